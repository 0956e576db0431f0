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

// Builds the frozen side of an experiment: corpus, samples, vocabulary, a
// pretrained toy language model, a pretrained CRM, and the semantic index.

#include <string>
#include <vector>

#include "rellax/crm.hpp"
#include "rellax/data.hpp"
#include "rellax/item_encoder.hpp"
#include "rellax/lm.hpp"
#include "rellax/prompt.hpp"
#include "rellax/subr.hpp"

namespace rellax {

struct ExperimentConfig {
  SyntheticSpec synthetic;
  SampleRules rules;
  CrmConfig crm;
  CrmTrainConfig crm_train{.epochs = 6, .batch = 32, .learning_rate = 3e-3, .weight_decay = 0.0,
                           .max_history = 32, .seed = 1};
  LmConfig lm;
  LmPretrainConfig lm_train{.epochs = 2, .batch = 8, .learning_rate = 3e-3, .seed = 1};
  std::size_t lm_prompts = 300;     // recent-history prompts added to the pretraining text
  std::size_t lm_prompt_k = 8;
  std::size_t d_q = 32;
  std::uint64_t seed = 1;
};

struct Workspace {
  Corpus corpus;
  std::vector<InteractionSample> samples;
  std::vector<InteractionSample> train;
  std::vector<InteractionSample> test;
  PromptTemplate tmpl;
  Vocabulary vocab;
  ToyLm lm;
  CrmModel crm;
  SemanticIndex index;
  std::vector<double> lm_losses;
  std::vector<double> crm_losses;
};

// Text the base model is pretrained on: every item description plus hard
// prompts (recent behaviors, no answers) from a seeded subset of train.
inline std::vector<std::vector<std::int32_t>> lm_pretraining_text(const Workspace& ws, std::size_t prompts,
                                                                  std::size_t k, std::uint64_t seed) {
  std::vector<std::vector<std::int32_t>> seqs;
  for (const auto& [id, item] : ws.corpus.catalog.items)
    seqs.push_back(tokenize(render_item_description(item, ws.tmpl), ws.vocab).tokens);
  const std::size_t n = std::min(prompts, ws.train.size());
  for (const auto& s : sample_few_shot(ws.train, n, seed)) {
    const auto pos = select_behaviors(s.history.view(), s.target_id, BehaviorMode::recent, k, nullptr);
    seqs.push_back(tokenize(render_hard_prompt(s, ws.corpus.catalog, ws.tmpl, pos).text, ws.vocab).tokens);
  }
  return seqs;
}

inline void attach_corpus(Workspace& ws, Corpus corpus, const SampleRules& rules) {
  ws.corpus = std::move(corpus);
  ws.samples = build_samples(ws.corpus.events, ws.corpus.catalog, rules);
  ws.train = select_split(ws.samples, Split::train);
  ws.test = select_split(ws.samples, Split::test);
}

inline Workspace build_workspace(Corpus corpus, const ExperimentConfig& cfg) {
  Workspace ws;
  attach_corpus(ws, std::move(corpus), cfg.rules);
  const Rng root(cfg.seed);
  ws.vocab = build_vocabulary(ws.corpus.catalog, ws.tmpl);

  LmConfig lc = cfg.lm;
  lc.vocab_size = ws.vocab.size();
  ws.lm = ToyLm::create(lc, root.split("lm"));
  ws.lm_losses = lm_pretrain(ws.lm, lm_pretraining_text(ws, cfg.lm_prompts, cfg.lm_prompt_k, cfg.seed),
                             cfg.lm_train);

  ws.crm = CrmModel::create(ws.corpus.catalog, cfg.crm, root.split("crm"));
  ws.crm_losses = crm_pretrain(ws.crm, ws.train, cfg.crm_train);

  ws.index = build_semantic_index(ws.corpus.catalog, ToyLmEncoder(ws.lm, ws.vocab, ws.tmpl), cfg.d_q);
  return ws;
}

inline Workspace build_synthetic_workspace(const ExperimentConfig& cfg) {
  return build_workspace(make_synthetic_corpus(cfg.synthetic), cfg);
}

}  // namespace rellax
