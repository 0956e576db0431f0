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

#include <vector>

#include "rellax/data.hpp"
#include "rellax/lm.hpp"
#include "rellax/prompt.hpp"

namespace rellax {

// Renders an item description, runs the language model over its tokens (no
// <bos>), and averages the final-block hidden states over positions.
class ToyLmEncoder {
 public:
  ToyLmEncoder(const ToyLm& lm, const Vocabulary& vocab, const PromptTemplate& tmpl)
      : lm_(&lm), vocab_(&vocab), tmpl_(&tmpl) {}

  std::size_t dim() const { return lm_->config.dim; }

  std::vector<std::int32_t> tokens(const Item& item) const {
    auto tp = tokenize(render_item_description(item, *tmpl_), *vocab_);
    return {tp.tokens.begin() + 1, tp.tokens.end()};
  }

  Vector encode_tokens(std::span<const std::int32_t> toks) const {
    RELLAX_REQUIRE(!toks.empty(), "toy encoder: empty description");
    const LmPass pass(*lm_, token_embeddings(*lm_, toks));
    const Matrix& hs = pass.hidden_states();
    Vector z(dim(), 0.0);
    for (std::size_t t = 0; t < hs.rows(); ++t)
      for (std::size_t k = 0; k < z.size(); ++k) z[k] += hs(t, k);
    for (double& v : z) v /= static_cast<double>(hs.rows());
    return z;
  }

  Vector encode(const Item& item) const { return encode_tokens(tokens(item)); }

 private:
  const ToyLm* lm_;
  const Vocabulary* vocab_;
  const PromptTemplate* tmpl_;
};

}  // namespace rellax
