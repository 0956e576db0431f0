// SPDX-License-Identifier: Apache-2.0
#pragma once

// Fast invariant suite behind `rellax selftest`. Each check builds its own
// tiny fixture and compares against a direct recomputation.

#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "rellax/adapter.hpp"
#include "rellax/checkpoint.hpp"
#include "rellax/crm.hpp"
#include "rellax/lm.hpp"
#include "rellax/metrics.hpp"
#include "rellax/numerics.hpp"
#include "rellax/subr.hpp"

namespace rellax {

struct SelftestResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

namespace selftest {

inline SelftestResult cflora_equivalence() {
  Rng rng(101);
  double worst = 0.0;
  const std::size_t ranks[] = {1, 2, 4, 8};
  for (int t = 0; t < 200; ++t) {
    const std::size_t r = ranks[rng.below(4)];
    const std::size_t dd = r + rng.below(33), du = r + rng.below(33);
    const Matrix a = random_normal(r, dd, 1.0, rng), b = random_normal(du, r, 1.0, rng), w = random_normal(r, r, 1.0, rng);
    worst = std::max(worst, max_abs_diff(cflora_delta_composite(a, b, w), cflora_delta_decomposed(a, b, w)));
  }
  return {"cflora composite == decomposed", worst < 1e-10, "max diff " + format_double(worst)};
}

inline SelftestResult degradation_lattice() {
  Rng rng(102);
  const Matrix a = random_normal(4, 7, 1.0, rng), b = random_normal(5, 4, 1.0, rng);
  const Vector alphas{0.4, -1.1};
  Matrix lora(5, 7), scaled(5, 7);
  for (std::size_t j = 0; j < 4; ++j)
    for (std::size_t p = 0; p < 5; ++p)
      for (std::size_t q = 0; q < 7; ++q) {
        lora(p, q) += b(p, j) * a(j, q);
        scaled(p, q) += alphas[j / 2] * b(p, j) * a(j, q);
      }
  const double d1 = max_abs_diff(
      cflora_delta_composite(a, b, make_interaction_matrix(InteractionSource::identity(), 4, nullptr)), lora);
  const double d2 = max_abs_diff(
      cflora_delta_composite(a, b, make_interaction_matrix(InteractionSource::block_diagonal(alphas), 4, nullptr)), scaled);
  return {"identity / block-diagonal W reductions", d1 < 1e-12 && d2 < 1e-12,
          "identity " + format_double(d1) + ", block " + format_double(d2)};
}

inline ToyLm tiny_lm(std::uint64_t seed) {
  LmConfig c;
  c.vocab_size = 10;
  c.dim = 8;
  c.ffn_dim = 16;
  c.context = 32;
  c.init_stddev = 0.3;
  return ToyLm::create(c, Rng(seed));
}

inline SelftestResult zero_b_invariant() {
  const ToyLm m = tiny_lm(103);
  Rng rng(104);
  AdapterConfig cfg;
  cfg.rank = 2;
  cfg.projector_hidden = 4;
  cfg.projector_out_stddev = 1.0;
  const AdapterStack st = AdapterStack::create(2, 8, 3, cfg, rng);
  const Vector h = random_normal(3, 1.0, rng);
  const auto ws = realize_interactions(st, &h);
  const std::vector<std::int32_t> tokens{1, 5, 7, 2, 9, 3};
  const Matrix x = token_embeddings(m, tokens);
  const double d = max_abs_diff(LmPass(m, x).all_logits(), LmPass(m, x, &st, ws).all_logits());
  return {"zero-B adapters leave logits unchanged", d < 1e-12, "max diff " + format_double(d)};
}

inline SelftestResult causality() {
  const ToyLm m = tiny_lm(105);
  std::vector<std::int32_t> t{1, 4, 6, 8, 2, 3, 7};
  const Matrix before = LmPass(m, token_embeddings(m, t)).all_logits();
  t[5] = 9;
  t[6] = 0;
  const Matrix after = LmPass(m, token_embeddings(m, t)).all_logits();
  double d = 0.0;
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t v = 0; v < 10; ++v) d = std::max(d, std::abs(before(i, v) - after(i, v)));
  return {"causal mask", d < 1e-12, "max diff " + format_double(d)};
}

inline SelftestResult lm_adapter_gradients() {
  const ToyLm m = tiny_lm(106);
  Rng rng(107);
  AdapterConfig cfg;
  cfg.rank = 2;
  cfg.projector_hidden = 4;
  cfg.projector_out_stddev = 0.3;
  AdapterStack st = AdapterStack::create(2, 8, 3, cfg, rng);
  for (auto& s : st.slots) s->b = random_normal(8, 2, 0.3, rng);
  AdapterStack grad = st.zeros_like();
  ParamList params;
  append_params(params, st, grad);
  const Vector h = random_normal(3, 1.0, rng);
  const Matrix x = token_embeddings(m, std::vector<std::int32_t>{1, 6, 2, 8, 5});
  const auto rep = check_gradients(
      [&](bool with_grad) {
        std::vector<InteractionTrace> tr;
        const auto ws = realize_interactions(st, &h, &tr);
        const LmPass pass(m, x, &st, ws);
        const Vector lg = pass.last_logits();
        if (with_grad) {
          std::vector<Matrix> d_w;
          pass.backward(last_position_output_grad(m, pass, causal_lm_loss_grad(lg, 3), nullptr), nullptr, &grad, &d_w,
                        nullptr);
          for (std::size_t i = 0; i < st.slots.size(); ++i)
            interaction_backward(st.slots[i]->source, tr[i], d_w[i], grad.slots[i]->source);
        }
        return causal_lm_loss(lg, 3);
      },
      params, 1e-4);
  return {"LM loss gradients (A, B, W projector)", rep.passed,
          "max rel err " + format_double(rep.max_relative_error) + " at " + rep.worst_parameter};
}

inline SelftestResult crm_gradients() {
  Catalog c;
  for (std::int64_t i = 1; i <= 5; ++i) c.items[i] = Item{i, "i", {}};
  c.users[1] = User{1, {}};
  CrmConfig cfg;
  cfg.embed_dim = 3;
  cfg.hidden_dim = 4;
  cfg.embed_stddev = 0.7;
  CrmModel m = CrmModel::create(c, cfg, Rng(108));
  CrmModel grad = m.zeros_like();
  ParamList params;
  append_params(params, m, grad);
  const CrmInput in{1, {2, 3, 5}, 4};
  const auto rep = check_gradients(
      [&](bool with_grad) {
        CrmTrace tr;
        const CrmOutput out = crm_forward(m, in, &tr);
        if (with_grad) crm_backward(m, in, tr, out, out.y_hat - 1.0, grad);
        return bce_from_logit(out.logit, 1);
      },
      params, 1e-4);
  return {"CRM BCE gradients", rep.passed, "max rel err " + format_double(rep.max_relative_error)};
}

inline SelftestResult pointwise_properties() {
  Rng rng(109);
  double worst = 0.0;
  for (int t = 0; t < 1000; ++t) {
    const Vector s{rng.normal() * 4, rng.normal() * 4};
    const double c = rng.normal() * 10;
    worst = std::max(worst, std::abs(pointwise_score(s, 0, 1) + pointwise_score(s, 1, 0) - 1.0));
    worst = std::max(worst, std::abs(pointwise_score(s, 0, 1) - pointwise_score(Vector{s[0] + c, s[1] + c}, 0, 1)));
  }
  const bool examples = std::abs(pointwise_score(Vector{1, 0}, 0, 1) - 0.731059) < 5e-7 &&
                        std::abs(pointwise_score(Vector{0, 2}, 0, 1) - 0.119203) < 5e-7;
  return {"pointwise score swap/shift", worst < 1e-12 && examples, "max deviation " + format_double(worst)};
}

inline SelftestResult retrieval_oracle() {
  Rng rng(110);
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 1 + rng.below(20), k = 1 + rng.below(8);
    SemanticIndex idx;
    idx.reduced = Matrix(n + 1, 3);
    std::vector<HistoryEntry> hist;
    for (std::size_t i = 0; i <= n; ++i) {
      const auto id = static_cast<std::int64_t>(i + 1);
      idx.row_of[id] = i;
      idx.ids.push_back(id);
      const std::size_t src = (i > 0 && rng.below(3) == 0) ? rng.below(i) : i;  // duplicated vectors make ties
      for (std::size_t d = 0; d < 3; ++d) idx.reduced(i, d) = src == i ? rng.normal() : idx.reduced(src, d);
      if (i < n) hist.push_back({id, 1, static_cast<std::int64_t>(i)});
    }
    const auto target = static_cast<std::int64_t>(n + 1);
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
      const double sx = cosine_similarity(idx.vector(hist[x].item_id), idx.vector(target));
      const double sy = cosine_similarity(idx.vector(hist[y].item_id), idx.vector(target));
      return sx != sy ? sx > sy : x > y;
    });
    order.resize(std::min(k, n));
    std::sort(order.begin(), order.end());
    if (retrieve_top_k(hist, target, k, idx) != order)
      return {"retrieval vs exhaustive sort", false, "mismatch on instance " + std::to_string(t)};
  }
  return {"retrieval vs exhaustive sort", true, "200 instances"};
}

inline SelftestResult auc_oracle() {
  Rng rng(111);
  double worst = 0.0;
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 2 + rng.below(60);
    std::vector<int> y(n);
    std::vector<double> s(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = static_cast<int>(rng.below(2));
      s[i] = static_cast<double>(rng.below(6));
    }
    y[0] = 1;
    y[1] = 0;
    double wins = 0, pairs = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (y[i] == 1 && y[j] == 0) {
          pairs += 1;
          wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
        }
    worst = std::max(worst, std::abs(compute_auc(y, s) - wins / pairs));
  }
  const double ll = compute_logloss_acc(std::vector<int>{1, 0}, std::vector<double>{0.5, 0.5}).logloss;
  return {"AUC vs pair counting, uniform logloss", worst < 1e-12 && std::abs(ll - std::log(2.0)) < 1e-12,
          "max diff " + format_double(worst)};
}

inline SelftestResult checkpoint_roundtrip() {
  const ToyLm m = tiny_lm(112);
  std::stringstream ss(lm_checkpoint(m).to_string());
  const ToyLm back = lm_from_checkpoint(Checkpoint::parse(ss));
  const bool same = lm_digest(back) == lm_digest(m);
  return {"checkpoint round trip", same, lm_digest(m).substr(0, 16)};
}

}  // namespace selftest

inline std::vector<SelftestResult> run_selftest() {
  const std::vector<std::function<SelftestResult()>> checks{
      selftest::cflora_equivalence, selftest::degradation_lattice, selftest::zero_b_invariant,
      selftest::causality,          selftest::lm_adapter_gradients, selftest::crm_gradients,
      selftest::pointwise_properties, selftest::retrieval_oracle,  selftest::auc_oracle,
      selftest::checkpoint_roundtrip};
  std::vector<SelftestResult> out;
  for (const auto& c : checks) {
    try {
      out.push_back(c());
    } catch (const std::exception& e) {
      out.push_back({"(check threw)", false, e.what()});
    }
  }
  return out;
}

}  // namespace rellax
