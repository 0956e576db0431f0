// Copyright 2026 The rellax Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "rellax/error.hpp"

namespace rellax {

namespace detail {
inline void check_binary(std::span<const int> labels, std::span<const double> scores) {
  if (labels.size() != scores.size()) throw ContractError("metrics: labels and scores differ in length");
  for (int y : labels)
    if (y != 0 && y != 1) throw ContractError("metrics: labels must be 0 or 1");
}
}  // namespace detail

// Probability that a random positive outranks a random negative, ties counted
// half. Uses the average-rank (Mann-Whitney) formula.
inline double compute_auc(std::span<const int> labels, std::span<const double> scores) {
  detail::check_binary(labels, scores);
  const std::size_t n = labels.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[idx[j]] == scores[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t t = i; t < j; ++t)
      if (labels[idx[t]] == 1) {
        rank_sum += avg;
        ++pos;
      }
    i = j;
  }
  const std::size_t neg = n - pos;
  if (pos == 0 || neg == 0) throw ContractError("compute_auc: both classes must be present");
  const double p = static_cast<double>(pos);
  return (rank_sum - p * (p + 1.0) / 2.0) / (p * static_cast<double>(neg));
}

struct LoglossAcc {
  double logloss = 0.0;
  double acc = 0.0;
};

inline constexpr double kScoreClamp = 1e-12;

// Mean binary cross-entropy and accuracy; a score equal to the threshold is
// predicted positive.
inline LoglossAcc compute_logloss_acc(std::span<const int> labels, std::span<const double> scores,
                                      double threshold = 0.5) {
  detail::check_binary(labels, scores);
  if (labels.empty()) throw ContractError("compute_logloss_acc: empty input");
  double ll = 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double p = std::clamp(scores[i], kScoreClamp, 1.0 - kScoreClamp);
    ll -= labels[i] ? std::log(p) : std::log1p(-p);
    correct += ((scores[i] >= threshold ? 1 : 0) == labels[i]);
  }
  const double n = static_cast<double>(labels.size());
  return {ll / n, static_cast<double>(correct) / n};
}

}  // namespace rellax
