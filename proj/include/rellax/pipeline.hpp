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

// Instruction tuning and evaluation of the adapted language model. A frozen
// base model and a frozen CRM feed one code path that covers every variant:
// retrieval on/off, soft prompts on/off, and the source of W.

#include <chrono>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "rellax/adapter.hpp"
#include "rellax/crm.hpp"
#include "rellax/data.hpp"
#include "rellax/error.hpp"
#include "rellax/lm.hpp"
#include "rellax/metrics.hpp"
#include "rellax/numerics.hpp"
#include "rellax/prompt.hpp"
#include "rellax/subr.hpp"

namespace rellax {

enum class Variant { rellax, rella, identity_w, ilora };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::rellax: return "rellax";
    case Variant::rella: return "rella";
    case Variant::identity_w: return "identity-W";
    case Variant::ilora: return "ilora";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "rellax") return Variant::rellax;
  if (s == "rella") return Variant::rella;
  if (s == "identity-W" || s == "identity-w" || s == "tallrec") return Variant::identity_w;
  if (s == "ilora") return Variant::ilora;
  throw ContractError("unknown variant '" + s + "' (rellax, rella, identity-W, tallrec, ilora)");
}

struct VariantSettings {
  bool subr = true;
  bool spa = true;
  InteractionKind kind = InteractionKind::projected;
};

inline VariantSettings variant_settings(Variant v) {
  switch (v) {
    case Variant::rellax: return {true, true, InteractionKind::projected};
    case Variant::rella: return {true, false, InteractionKind::identity};
    case Variant::identity_w: return {false, false, InteractionKind::identity};
    case Variant::ilora: return {false, false, InteractionKind::block_diagonal};
  }
  return {};
}

// How a sample becomes model input.
struct PromptOptions {
  bool subr = true;
  bool spa = true;
  std::size_t k_text = 8;  // behaviors rendered as text
  std::size_t l_id = 32;   // behaviors seen by the CRM (0 = whole history)
};

// Frozen inputs shared by training and evaluation.
struct PipelineInputs {
  const Catalog* catalog = nullptr;
  const PromptTemplate* tmpl = nullptr;
  const Vocabulary* vocab = nullptr;
  const ToyLm* lm = nullptr;
  const CrmModel* crm = nullptr;
  const SemanticIndex* index = nullptr;  // required when retrieval is on
};

// Everything that training may change.
struct TunedParts {
  std::optional<AdapterStack> adapters;
  std::optional<Mlp2> spa_projector;

  TunedParts zeros_like() const {
    TunedParts g;
    if (adapters) g.adapters = adapters->zeros_like();
    if (spa_projector)
      g.spa_projector = Mlp2::zeros(spa_projector->input_dim(), spa_projector->hidden_dim(), spa_projector->output_dim());
    return g;
  }
};

inline void append_params(ParamList& out, TunedParts& value, TunedParts& grad) {
  if (value.adapters) append_params(out, *value.adapters, *grad.adapters);
  if (value.spa_projector) append_params(out, "spa.projector", *value.spa_projector, *grad.spa_projector);
}

struct TunedPartsConfig {
  AdapterConfig adapter;
  bool with_adapters = true;
  bool spa = true;
  std::size_t spa_hidden = 32;
};

inline TunedParts create_tuned_parts(const ToyLm& lm, const CrmModel& crm, const TunedPartsConfig& cfg, const Rng& root) {
  TunedParts t;
  if (cfg.with_adapters) {
    Rng r = root.split("adapters");
    t.adapters = AdapterStack::create(lm.config.layers, lm.config.dim, crm.hidden_dim(), cfg.adapter, r);
  }
  if (cfg.spa) {
    Rng r = root.split("spa");
    t.spa_projector = Mlp2::random(crm.embed_dim(), cfg.spa_hidden, lm.config.dim, r);
  }
  return t;
}

inline Checkpoint tuned_checkpoint(const TunedParts& t) {
  Checkpoint ck;
  if (t.adapters) {
    ck.set_meta("adapters.layers", std::to_string(t.adapters->layers));
    for (std::size_t i = 0; i < t.adapters->slots.size(); ++i) {
      const auto& s = t.adapters->slots[i];
      if (!s) continue;
      const std::string n = AdapterStack::slot_name(i);
      ck.set_meta(n, "kind=" + to_string(s->source.kind) + " alpha=" + format_double(s->alpha) +
                         " blocks=" + std::to_string(s->source.blocks));
      ck.add(n + ".A", s->a);
      ck.add(n + ".B", s->b);
      if (s->source.projector) ck.add(n + ".projector", *s->source.projector);
      if (!s->source.alphas.empty()) ck.add(n + ".alphas", s->source.alphas);
    }
  }
  if (t.spa_projector) ck.add("spa.projector", *t.spa_projector);
  return ck;
}

inline TunedParts tuned_from_checkpoint(const Checkpoint& ck) {
  TunedParts t;
  const std::string layers = ck.meta("adapters.layers");
  if (!layers.empty()) {
    AdapterStack st;
    st.layers = std::stoul(layers);
    st.slots.resize(2 * st.layers);
    for (std::size_t i = 0; i < st.slots.size(); ++i) {
      const std::string n = AdapterStack::slot_name(i);
      if (!ck.contains(n + ".A")) continue;
      std::istringstream ss(ck.meta(n));
      std::string kv, kind = "identity";
      double alpha = 1.0;
      std::size_t blocks = 1;
      while (ss >> kv) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) continue;
        const std::string k = kv.substr(0, eq), v = kv.substr(eq + 1);
        if (k == "kind") kind = v;
        else if (k == "alpha") alpha = std::stod(v);
        else if (k == "blocks") blocks = std::stoul(v);
      }
      CfLoraAdapter ad;
      ad.a = ck.matrix(n + ".A");
      ad.b = ck.matrix(n + ".B");
      ad.alpha = alpha;
      ad.source.kind = parse_interaction_kind(kind);
      ad.source.blocks = blocks;
      if (ck.contains(n + ".projector.w1")) ad.source.projector = ck.mlp2(n + ".projector");
      if (ck.contains(n + ".alphas")) ad.source.alphas = ck.vector(n + ".alphas");
      st.slots[i] = std::move(ad);
    }
    t.adapters = std::move(st);
  }
  if (ck.contains("spa.projector.w1")) t.spa_projector = ck.mlp2("spa.projector");
  return t;
}

// ---------------------------------------------------------------------------
// Per-sample forward and backward

struct PreparedSample {
  TokenizedPrompt tokens;
  std::vector<std::int64_t> item_ids;  // rendered history items, then the target
  std::vector<std::size_t> history_positions;
  CrmInput crm_input;
  int label = 0;
};

inline PreparedSample prepare_sample(const InteractionSample& s, const PipelineInputs& in, const PromptOptions& opt) {
  RELLAX_REQUIRE(opt.k_text >= 1, "prompt: k_text must be >= 1");
  if (opt.subr && !in.index) throw ContractError("prompt: retrieval is on but no semantic index was given");
  const auto positions = select_behaviors(s.history.view(), s.target_id,
                                          opt.subr ? BehaviorMode::retrieved : BehaviorMode::recent, opt.k_text,
                                          in.index);
  const RenderedPrompt r = render_hard_prompt(s, *in.catalog, *in.tmpl, positions);
  PreparedSample p;
  p.tokens = tokenize(r.text, *in.vocab, r.item_spans);
  p.item_ids = r.item_ids;
  p.history_positions = r.history_positions;
  p.crm_input = crm_input(s, opt.l_id);
  p.label = s.label;
  return p;
}

struct SampleResult {
  double score = 0.5;
  double loss = 0.0;
  std::size_t positions = 0;  // rows fed to the language model
};

// Runs one sample. When `grad` is given, accumulates weight * dloss into it.
// When `attention` is given, fills the final-row attention over item spans.
inline SampleResult run_sample(const PreparedSample& p, const PipelineInputs& in, const TunedParts& tuned,
                               TunedParts* grad = nullptr, double weight = 1.0,
                               AttentionExtract* attention = nullptr) {
  const ToyLm& lm = *in.lm;
  const CrmModel& crm = *in.crm;
  const std::size_t n_items = p.item_ids.size();

  Matrix soft;
  std::vector<Mlp2Trace> spa_traces;
  if (tuned.spa_projector) {
    soft = Matrix(n_items, lm.config.dim);
    spa_traces.resize(n_items);
    for (std::size_t j = 0; j < n_items; ++j) {
      const Vector v = spa_project(crm.item_emb.row(crm.item_index(p.item_ids[j])), *tuned.spa_projector,
                                   grad ? &spa_traces[j] : nullptr);
      std::copy(v.begin(), v.end(), soft.row(j).begin());
    }
  }
  const AssembledPrompt assembled = assemble_soft_prompt(p.tokens, lm.tok_emb, soft);

  std::vector<Matrix> ws;
  std::vector<InteractionTrace> w_traces;
  const AdapterStack* adapters = tuned.adapters ? &*tuned.adapters : nullptr;
  if (adapters) {
    std::optional<Vector> h;
    if (adapters->needs_representation()) h = crm_forward(crm, p.crm_input).h;
    ws = realize_interactions(*adapters, h ? &*h : nullptr, grad ? &w_traces : nullptr);
  }
  const LmPass pass(lm, assembled.embeddings, adapters, ws);
  const Vector logits = pass.last_logits();
  SampleResult res;
  res.score = pointwise_score(logits, Vocabulary::kYes, Vocabulary::kNo);
  res.loss = causal_lm_loss(logits, answer_token(p.label));
  res.positions = assembled.size();
  if (attention) *attention = extract_item_attention(pass, assembled.item_spans);
  if (!grad) return res;

  Vector d_logits = causal_lm_loss_grad(logits, answer_token(p.label));
  for (double& v : d_logits) v *= weight;
  const Matrix d_out = last_position_output_grad(lm, pass, d_logits, nullptr);
  std::vector<Matrix> d_w;
  Matrix d_input;
  pass.backward(d_out, nullptr, grad->adapters ? &*grad->adapters : nullptr, adapters ? &d_w : nullptr,
                tuned.spa_projector ? &d_input : nullptr);
  if (adapters)
    for (std::size_t i = 0; i < adapters->slots.size(); ++i)
      if (adapters->slots[i])
        interaction_backward(adapters->slots[i]->source, w_traces[i], d_w[i], grad->adapters->slots[i]->source);
  if (tuned.spa_projector)
    for (std::size_t r = 0; r < assembled.size(); ++r)
      if (assembled.row_item[r] >= 0) {
        const auto j = static_cast<std::size_t>(assembled.row_item[r]);
        mlp2_backward(*tuned.spa_projector, spa_traces[j], d_input.row(r), *grad->spa_projector);
      }
  return res;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  std::size_t shots = 0;  // 0 = the whole training split
  std::size_t epochs = 3;
  std::size_t batch = 8;
  double learning_rate = 3e-3;
  double weight_decay = 0.0;
  std::uint64_t seed = 1;
  PromptOptions prompt;
};

struct TrainResult {
  std::vector<double> losses;  // mean batch loss per optimizer step
  std::size_t samples_used = 0;
  double seconds = 0.0;
};

inline std::size_t total_steps(std::size_t n, const TrainConfig& cfg) {
  return cfg.epochs * ((n + cfg.batch - 1) / cfg.batch);
}

inline TrainResult train_rellax(const TrainConfig& cfg, const std::vector<InteractionSample>& train,
                                const PipelineInputs& in, TunedParts& tuned) {
  const auto start = std::chrono::steady_clock::now();
  RELLAX_REQUIRE(cfg.batch >= 1, "train: batch must be >= 1");
  RELLAX_REQUIRE(cfg.prompt.k_text >= 1, "train: k_text must be >= 1");
  if (cfg.shots > train.size())
    throw ContractError("train: " + std::to_string(cfg.shots) + " shots requested but the training split has " +
                        std::to_string(train.size()) + " samples");
  const std::string lm_before = lm_digest(*in.lm);
  const std::string crm_before = crm_digest(*in.crm);

  const std::vector<InteractionSample> pool = cfg.shots ? sample_few_shot(train, cfg.shots, cfg.seed) : train;
  TrainResult result;
  result.samples_used = pool.size();
  const std::size_t steps = pool.empty() ? 0 : total_steps(pool.size(), cfg);
  if (steps > 0) {
    std::vector<PreparedSample> prepared;
    prepared.reserve(pool.size());
    for (const auto& s : pool) prepared.push_back(prepare_sample(s, in, cfg.prompt));

    TunedParts grad = tuned.zeros_like();
    ParamList params;
    append_params(params, tuned, grad);
    AdamW opt(AdamWConfig{cfg.learning_rate, 0.9, 0.999, 1e-8, cfg.weight_decay});
    Rng rng = Rng(cfg.seed).split("train-order");
    std::vector<std::size_t> order(prepared.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::size_t step = 0;
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
      rng.shuffle(order);
      for (std::size_t b = 0; b < order.size(); b += cfg.batch) {
        const std::size_t end = std::min(order.size(), b + cfg.batch);
        const double w = 1.0 / static_cast<double>(end - b);
        zero_grads(params);
        double loss = 0.0;
        for (std::size_t i = b; i < end; ++i) loss += w * run_sample(prepared[order[i]], in, tuned, &grad, w).loss;
        if (!std::isfinite(loss)) throw TrainingError("train: loss is not finite at step " + std::to_string(step));
        const double lr = cfg.learning_rate * (1.0 - static_cast<double>(step) / static_cast<double>(steps));
        opt.step(params, lr);
        result.losses.push_back(loss);
        ++step;
      }
    }
  }
  if (lm_digest(*in.lm) != lm_before) throw TrainingError("train: base language model changed during training");
  if (crm_digest(*in.crm) != crm_before) throw TrainingError("train: CRM changed during training");
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalReport {
  double auc = 0.5;
  double logloss = 0.0;
  double acc = 0.0;
  std::vector<double> scores;
  std::vector<int> labels;
  double mean_positions = 0.0;
  std::size_t total_positions = 0;
  std::string config_echo;
  double seconds = 0.0;
};

inline EvalReport evaluate(const std::vector<InteractionSample>& test, const PipelineInputs& in,
                           const TunedParts& tuned, const PromptOptions& opt) {
  const auto start = std::chrono::steady_clock::now();
  if (test.empty()) throw ContractError("evaluate: empty test set");
  EvalReport rep;
  rep.scores.reserve(test.size());
  for (const auto& s : test) {
    const SampleResult r = run_sample(prepare_sample(s, in, opt), in, tuned);
    rep.scores.push_back(r.score);
    rep.labels.push_back(s.label);
    rep.total_positions += r.positions;
  }
  rep.mean_positions = static_cast<double>(rep.total_positions) / static_cast<double>(test.size());
  rep.auc = compute_auc(rep.labels, rep.scores);
  const auto la = compute_logloss_acc(rep.labels, rep.scores);
  rep.logloss = la.logloss;
  rep.acc = la.acc;
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rep;
}

struct SweepRow {
  std::size_t value = 0;  // K or L
  EvalReport report;
};

enum class SweepAxis { k_text, l_id };

inline std::vector<SweepRow> evaluate_sweep(const std::vector<InteractionSample>& test, const PipelineInputs& in,
                                            const TunedParts& tuned, PromptOptions opt, SweepAxis axis,
                                            const std::vector<std::size_t>& values) {
  std::vector<SweepRow> rows;
  for (std::size_t v : values) {
    (axis == SweepAxis::k_text ? opt.k_text : opt.l_id) = v;
    rows.push_back({v, evaluate(test, in, tuned, opt)});
  }
  return rows;
}

// Final-row attention mass on each rendered item (history then target).
struct CaseStudy {
  std::int64_t user_id = 0;
  std::int64_t target_id = 0;
  int label = 0;
  double score = 0.5;
  std::vector<std::int64_t> item_ids;
  std::vector<std::size_t> history_positions;
  AttentionExtract attention;
};

inline CaseStudy case_study(const InteractionSample& s, const PipelineInputs& in, const TunedParts& tuned,
                            const PromptOptions& opt) {
  const PreparedSample p = prepare_sample(s, in, opt);
  CaseStudy cs;
  cs.user_id = s.user_id;
  cs.target_id = s.target_id;
  cs.label = s.label;
  cs.item_ids = p.item_ids;
  cs.history_positions = p.history_positions;
  cs.score = run_sample(p, in, tuned, nullptr, 1.0, &cs.attention).score;
  return cs;
}

}  // namespace rellax
