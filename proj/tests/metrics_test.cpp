// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "rellax/metrics.hpp"
#include "rellax/numerics.hpp"

namespace rellax {
namespace {

double pair_count_auc(const std::vector<int>& y, const std::vector<double>& s) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < y.size(); ++i)
    for (std::size_t j = 0; j < y.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        pairs += 1;
        wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
  return wins / pairs;
}

TEST(Auc, WorkedExamples) {
  EXPECT_EQ(compute_auc(std::vector<int>{1, 0}, std::vector<double>{0.9, 0.1}), 1.0);
  EXPECT_EQ(compute_auc(std::vector<int>{1, 0}, std::vector<double>{0.1, 0.9}), 0.0);
  EXPECT_EQ(compute_auc(std::vector<int>{1, 0, 1}, std::vector<double>{0.8, 0.8, 0.4}), 0.25);
}

TEST(Auc, SingleClassAndShapeErrors) {
  EXPECT_THROW(compute_auc(std::vector<int>{1, 1}, std::vector<double>{0.1, 0.2}), ContractError);
  EXPECT_THROW(compute_auc(std::vector<int>{1, 0}, std::vector<double>{0.1}), ContractError);
  EXPECT_THROW(compute_auc(std::vector<int>{1, 2}, std::vector<double>{0.1, 0.2}), ContractError);
}

TEST(Auc, MatchesPairCountingWithTies) {
  Rng rng(1);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 2 + rng.below(199);
    std::vector<int> y(n);
    std::vector<double> s(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = static_cast<int>(rng.below(2));
      s[i] = static_cast<double>(rng.below(1 + n / 4)) / 8.0;  // coarse grid forces ties
    }
    y[0] = 1;
    y[1] = 0;
    ASSERT_LT(std::abs(compute_auc(y, s) - pair_count_auc(y, s)), 1e-12);
  }
}

TEST(Auc, InvariantUnderMonotoneTransforms) {
  Rng rng(2);
  std::vector<int> y(300);
  std::vector<double> s(300), t1(300), t2(300);
  for (std::size_t i = 0; i < 300; ++i) {
    y[i] = static_cast<int>(rng.below(2));
    s[i] = rng.normal();
    t1[i] = std::exp(3 * s[i]) + 7;
    t2[i] = sigmoid(s[i] / 2);
  }
  const double a = compute_auc(y, s);
  EXPECT_EQ(compute_auc(y, t1), a);
  EXPECT_EQ(compute_auc(y, t2), a);
}

TEST(Logloss, UniformSaturatedAndThreshold) {
  const std::vector<int> y{1, 0, 1, 0, 0};
  const auto half = compute_logloss_acc(y, std::vector<double>(5, 0.5));
  EXPECT_NEAR(half.logloss, std::log(2.0), 1e-12);
  EXPECT_EQ(half.acc, 0.4);  // 0.5 counts as a positive prediction
  const auto perfect = compute_logloss_acc(y, std::vector<double>{1, 0, 1, 0, 0});
  EXPECT_LT(perfect.logloss, 1e-11);
  EXPECT_EQ(perfect.acc, 1.0);
  EXPECT_NEAR(compute_logloss_acc(std::vector<int>{1}, std::vector<double>{0.0}).logloss, -std::log(1e-12), 1e-9);
  EXPECT_THROW(compute_logloss_acc(std::vector<int>{}, std::vector<double>{}), ContractError);
}

TEST(Logloss, MatchesLoopOracle) {
  Rng rng(3);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 1 + rng.below(50);
    std::vector<int> y(n);
    std::vector<double> s(n);
    double ll = 0, correct = 0;
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = static_cast<int>(rng.below(2));
      s[i] = rng.uniform();
      ll += y[i] ? -std::log(s[i]) : -std::log(1 - s[i]);
      correct += (s[i] >= 0.5) == (y[i] == 1);
    }
    const auto r = compute_logloss_acc(y, s);
    EXPECT_NEAR(r.logloss, ll / static_cast<double>(n), 1e-12);
    EXPECT_EQ(r.acc, correct / static_cast<double>(n));
  }
}

}  // namespace
}  // namespace rellax
