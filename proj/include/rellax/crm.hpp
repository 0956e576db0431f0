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

// Conventional recommendation model: ID embeddings for users and items, an
// aggregator over the behavior sequence, a two-layer perceptron producing the
// representation h, and a logistic head.

#include <cmath>
#include <cstdint>
#include <algorithm>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "rellax/checkpoint.hpp"
#include "rellax/data.hpp"
#include "rellax/error.hpp"
#include "rellax/numerics.hpp"

namespace rellax {

enum class Aggregator { target_attention, mean_pooling };

inline Aggregator parse_aggregator(const std::string& s) {
  if (s == "target-attention" || s == "attention") return Aggregator::target_attention;
  if (s == "mean-pooling" || s == "mean") return Aggregator::mean_pooling;
  throw ContractError("unknown aggregator '" + s + "'");
}

struct CrmConfig {
  std::size_t embed_dim = 16;
  std::size_t hidden_dim = 32;
  Aggregator aggregator = Aggregator::target_attention;
  double embed_stddev = 0.01;
};

struct CrmModel {
  CrmConfig config;
  std::map<std::int64_t, std::size_t> user_row;
  std::map<std::int64_t, std::size_t> item_row;
  Matrix user_emb;  // |U| x d_e
  Matrix item_emb;  // |I| x d_e
  Mlp2 f;           // 3 d_e -> d_h -> d_h
  Vector head_w;    // d_h
  Vector head_b;    // 1

  std::size_t embed_dim() const { return config.embed_dim; }
  std::size_t hidden_dim() const { return config.hidden_dim; }

  static CrmModel create(const Catalog& catalog, const CrmConfig& cfg, const Rng& root) {
    CrmModel m;
    m.config = cfg;
    for (const auto& [id, u] : catalog.users) m.user_row.emplace(id, m.user_row.size());
    for (const auto& [id, it] : catalog.items) m.item_row.emplace(id, m.item_row.size());
    Rng ru = root.split("crm.user_emb"), ri = root.split("crm.item_emb"), rf = root.split("crm.f"),
        rh = root.split("crm.head");
    m.user_emb = random_normal(m.user_row.size(), cfg.embed_dim, cfg.embed_stddev, ru);
    m.item_emb = random_normal(m.item_row.size(), cfg.embed_dim, cfg.embed_stddev, ri);
    m.f = Mlp2::random(3 * cfg.embed_dim, cfg.hidden_dim, cfg.hidden_dim, rf);
    m.head_w = random_normal(cfg.hidden_dim, 1.0 / std::sqrt(static_cast<double>(cfg.hidden_dim)), rh);
    m.head_b = {0.0};
    return m;
  }

  CrmModel zeros_like() const {
    CrmModel g;
    g.config = config;
    g.user_row = user_row;
    g.item_row = item_row;
    g.user_emb = Matrix(user_emb.rows(), user_emb.cols());
    g.item_emb = Matrix(item_emb.rows(), item_emb.cols());
    g.f = Mlp2::zeros(f.input_dim(), f.hidden_dim(), f.output_dim());
    g.head_w.assign(head_w.size(), 0.0);
    g.head_b = {0.0};
    return g;
  }

  std::size_t item_index(std::int64_t id) const {
    auto it = item_row.find(id);
    if (it == item_row.end()) throw ContractError("crm: unknown item id " + std::to_string(id));
    return it->second;
  }
  std::size_t user_index(std::int64_t id) const {
    auto it = user_row.find(id);
    if (it == user_row.end()) throw ContractError("crm: unknown user id " + std::to_string(id));
    return it->second;
  }
};

inline void append_params(ParamList& out, CrmModel& value, CrmModel& grad) {
  out.push_back({"crm.user_emb", value.user_emb.values(), grad.user_emb.values(), false});
  out.push_back({"crm.item_emb", value.item_emb.values(), grad.item_emb.values(), false});
  append_params(out, "crm.f", value.f, grad.f);
  out.push_back({"crm.head_w", value.head_w, grad.head_w, true});
  out.push_back({"crm.head_b", value.head_b, grad.head_b, false});
}

// ID-modality view of a sample.
struct CrmInput {
  std::int64_t user_id = 0;
  std::vector<std::int64_t> history;  // chronological
  std::int64_t target_id = 0;
};

// The last `max_history` behaviors (all when 0).
inline CrmInput crm_input(const InteractionSample& s, std::size_t max_history = 0) {
  CrmInput in{s.user_id, {}, s.target_id};
  const auto h = s.history.view();
  const std::size_t n = max_history == 0 ? h.size() : std::min(max_history, h.size());
  for (std::size_t i = h.size() - n; i < h.size(); ++i) in.history.push_back(h[i].item_id);
  return in;
}

// [e_1 .. e_L, e_target]
inline Matrix lookup_item_embeddings(const CrmModel& m, const CrmInput& in) {
  Matrix e(in.history.size() + 1, m.embed_dim());
  for (std::size_t l = 0; l < in.history.size(); ++l) {
    auto src = m.item_emb.row(m.item_index(in.history[l]));
    std::copy(src.begin(), src.end(), e.row(l).begin());
  }
  auto src = m.item_emb.row(m.item_index(in.target_id));
  std::copy(src.begin(), src.end(), e.row(in.history.size()).begin());
  return e;
}

struct CrmOutput {
  Vector h;
  double logit = 0.0;
  double y_hat = 0.5;
};

struct CrmTrace {
  Vector weights;  // aggregation weight per history position
  Vector pooled;
  Mlp2Trace f;
};

inline CrmOutput crm_forward(const CrmModel& m, const CrmInput& in, CrmTrace* trace = nullptr) {
  if (in.history.empty()) throw ContractError("crm_forward: empty history");
  const std::size_t d = m.embed_dim();
  const std::size_t L = in.history.size();
  auto r_u = m.user_emb.row(m.user_index(in.user_id));
  auto e_c = m.item_emb.row(m.item_index(in.target_id));
  Vector w(L);
  if (m.config.aggregator == Aggregator::mean_pooling) {
    std::fill(w.begin(), w.end(), 1.0 / static_cast<double>(L));
  } else {
    const double inv = 1.0 / std::sqrt(static_cast<double>(d));
    for (std::size_t l = 0; l < L; ++l) w[l] = dot(m.item_emb.row(m.item_index(in.history[l])), e_c) * inv;
    softmax_inplace(w);
  }
  Vector pooled(d, 0.0);
  for (std::size_t l = 0; l < L; ++l) {
    auto e = m.item_emb.row(m.item_index(in.history[l]));
    for (std::size_t k = 0; k < d; ++k) pooled[k] += w[l] * e[k];
  }
  Vector x;
  x.reserve(3 * d);
  x.insert(x.end(), r_u.begin(), r_u.end());
  x.insert(x.end(), pooled.begin(), pooled.end());
  x.insert(x.end(), e_c.begin(), e_c.end());
  CrmOutput out;
  out.h = mlp2_forward(m.f, x, trace ? &trace->f : nullptr);
  out.logit = dot(m.head_w, out.h) + m.head_b[0];
  out.y_hat = sigmoid(out.logit);
  if (trace) {
    trace->weights = std::move(w);
    trace->pooled = std::move(pooled);
  }
  return out;
}

// Accumulates into `grad` the gradient of a loss with dL/dlogit = d_logit
// (plus dL/dh = *d_h when given).
inline void crm_backward(const CrmModel& m, const CrmInput& in, const CrmTrace& tr, const CrmOutput& out,
                         double d_logit, CrmModel& grad, const Vector* d_h = nullptr) {
  const std::size_t d = m.embed_dim();
  const std::size_t L = in.history.size();
  for (std::size_t k = 0; k < out.h.size(); ++k) grad.head_w[k] += d_logit * out.h[k];
  grad.head_b[0] += d_logit;
  Vector dh(out.h.size());
  for (std::size_t k = 0; k < dh.size(); ++k) dh[k] = d_logit * m.head_w[k] + (d_h ? (*d_h)[k] : 0.0);
  Vector dx = mlp2_backward(m.f, tr.f, dh, grad.f);
  const std::size_t u = m.user_index(in.user_id);
  const std::size_t c = m.item_index(in.target_id);
  for (std::size_t k = 0; k < d; ++k) {
    grad.user_emb(u, k) += dx[k];
    grad.item_emb(c, k) += dx[2 * d + k];
  }
  const std::span<const double> d_pooled(dx.data() + d, d);
  if (m.config.aggregator == Aggregator::mean_pooling) {
    for (std::size_t l = 0; l < L; ++l) {
      const std::size_t r = m.item_index(in.history[l]);
      for (std::size_t k = 0; k < d; ++k) grad.item_emb(r, k) += tr.weights[l] * d_pooled[k];
    }
    return;
  }
  const double inv = 1.0 / std::sqrt(static_cast<double>(d));
  auto e_c = m.item_emb.row(c);
  Vector d_w(L);
  double wd = 0.0;
  for (std::size_t l = 0; l < L; ++l) {
    d_w[l] = dot(d_pooled, m.item_emb.row(m.item_index(in.history[l])));
    wd += tr.weights[l] * d_w[l];
  }
  for (std::size_t l = 0; l < L; ++l) {
    const std::size_t r = m.item_index(in.history[l]);
    const double ds = tr.weights[l] * (d_w[l] - wd) * inv;
    for (std::size_t k = 0; k < d; ++k) {
      const double e_l = m.item_emb(r, k);
      grad.item_emb(r, k) += tr.weights[l] * d_pooled[k] + ds * e_c[k];
      grad.item_emb(c, k) += ds * e_l;
    }
  }
}

// Binary cross-entropy of one prediction, from its logit.
inline double bce_from_logit(double logit, int label) {
  const double softplus = logit > 0 ? logit + std::log1p(std::exp(-logit)) : std::log1p(std::exp(logit));
  return softplus - (label ? logit : 0.0);
}

struct CrmTrainConfig {
  std::size_t epochs = 5;
  std::size_t batch = 32;
  double learning_rate = 3e-3;
  double weight_decay = 0.0;
  std::size_t max_history = 0;
  std::uint64_t seed = 1;
};

// Mean-BCE minimization with AdamW; returns the loss of every step.
inline std::vector<double> crm_pretrain(CrmModel& m, const std::vector<InteractionSample>& train,
                                        const CrmTrainConfig& cfg) {
  std::vector<double> history;
  if (cfg.epochs == 0) return history;
  if (train.empty()) throw ContractError("crm_pretrain: empty training set");
  RELLAX_REQUIRE(cfg.batch >= 1, "crm_pretrain: batch must be >= 1");
  CrmModel grad = m.zeros_like();
  ParamList params;
  append_params(params, m, grad);
  AdamW opt(AdamWConfig{cfg.learning_rate, 0.9, 0.999, 1e-8, cfg.weight_decay});
  Rng rng = Rng(cfg.seed).split("crm-pretrain");
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::size_t step = 0;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    rng.shuffle(order);
    for (std::size_t b = 0; b < order.size(); b += cfg.batch) {
      const std::size_t end = std::min(order.size(), b + cfg.batch);
      const double w = 1.0 / static_cast<double>(end - b);
      zero_grads(params);
      double loss = 0.0;
      for (std::size_t i = b; i < end; ++i) {
        const auto& s = train[order[i]];
        const CrmInput in = crm_input(s, cfg.max_history);
        CrmTrace tr;
        const CrmOutput out = crm_forward(m, in, &tr);
        loss += w * bce_from_logit(out.logit, s.label);
        crm_backward(m, in, tr, out, w * (out.y_hat - s.label), grad);
      }
      if (!std::isfinite(loss)) throw TrainingError("crm_pretrain: loss diverged at step " + std::to_string(step));
      opt.step(params);
      history.push_back(loss);
      ++step;
    }
  }
  return history;
}

inline Checkpoint crm_checkpoint(const CrmModel& m) {
  Checkpoint ck;
  ck.set_meta("crm.config", "embed_dim=" + std::to_string(m.config.embed_dim) +
                                " hidden_dim=" + std::to_string(m.config.hidden_dim) + " aggregator=" +
                                (m.config.aggregator == Aggregator::mean_pooling ? "mean-pooling" : "target-attention"));
  Vector uids, iids;
  for (const auto& [id, r] : m.user_row) uids.push_back(static_cast<double>(id));
  for (const auto& [id, r] : m.item_row) iids.push_back(static_cast<double>(id));
  ck.add("crm.user_ids", uids);
  ck.add("crm.item_ids", iids);
  ck.add("crm.user_emb", m.user_emb);
  ck.add("crm.item_emb", m.item_emb);
  ck.add("crm.f", m.f);
  ck.add("crm.head_w", m.head_w);
  ck.add("crm.head_b", m.head_b);
  return ck;
}

inline std::string crm_digest(const CrmModel& m) { return crm_checkpoint(m).digest(); }

inline CrmModel crm_from_checkpoint(const Checkpoint& ck) {
  CrmModel m;
  std::istringstream ss(ck.meta("crm.config"));
  std::string kv;
  while (ss >> kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) continue;
    const std::string k = kv.substr(0, eq), v = kv.substr(eq + 1);
    if (k == "embed_dim") m.config.embed_dim = std::stoul(v);
    else if (k == "hidden_dim") m.config.hidden_dim = std::stoul(v);
    else if (k == "aggregator") m.config.aggregator = parse_aggregator(v);
  }
  for (double id : ck.vector("crm.user_ids")) m.user_row.emplace(static_cast<std::int64_t>(id), m.user_row.size());
  for (double id : ck.vector("crm.item_ids")) m.item_row.emplace(static_cast<std::int64_t>(id), m.item_row.size());
  m.user_emb = ck.matrix("crm.user_emb");
  m.item_emb = ck.matrix("crm.item_emb");
  m.f = ck.mlp2("crm.f");
  m.head_w = ck.vector("crm.head_w");
  m.head_b = ck.vector("crm.head_b");
  return m;
}

}  // namespace rellax
