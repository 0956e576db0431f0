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

// A small pre-norm causal transformer. Query and value projections of every
// block accept an additive CFLoRA path. Weights are stored input-major
// (d_in x d_out) so a projection is X * W.

#include <cmath>
#include <cstdint>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "rellax/adapter.hpp"
#include "rellax/checkpoint.hpp"
#include "rellax/error.hpp"
#include "rellax/numerics.hpp"
#include "rellax/prompt.hpp"

namespace rellax {

struct LmConfig {
  std::size_t vocab_size = 0;
  std::size_t dim = 48;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t ffn_dim = 192;
  std::size_t context = 512;
  double init_stddev = 0.08;
};

struct LmLayer {
  Vector ln1_g, ln1_b;
  Matrix wq, wk, wv, wo;
  Vector ln2_g, ln2_b;
  Matrix w1;
  Vector b1;
  Matrix w2;
  Vector b2;
};

struct ToyLm {
  LmConfig config;
  Matrix tok_emb;  // V x d, also the output projection
  Matrix pos_emb;  // context x d
  std::vector<LmLayer> layers;
  Vector lnf_g, lnf_b;

  static ToyLm zeros(const LmConfig& c) {
    RELLAX_REQUIRE(c.dim % c.heads == 0, "lm: dim must be divisible by heads");
    RELLAX_REQUIRE(c.vocab_size >= 5, "lm: vocabulary too small");
    ToyLm m;
    m.config = c;
    m.tok_emb = Matrix(c.vocab_size, c.dim);
    m.pos_emb = Matrix(c.context, c.dim);
    m.layers.resize(c.layers);
    for (auto& l : m.layers) {
      l.ln1_g.assign(c.dim, 0.0);
      l.ln1_b.assign(c.dim, 0.0);
      l.wq = l.wk = l.wv = l.wo = Matrix(c.dim, c.dim);
      l.ln2_g.assign(c.dim, 0.0);
      l.ln2_b.assign(c.dim, 0.0);
      l.w1 = Matrix(c.dim, c.ffn_dim);
      l.b1.assign(c.ffn_dim, 0.0);
      l.w2 = Matrix(c.ffn_dim, c.dim);
      l.b2.assign(c.dim, 0.0);
    }
    m.lnf_g.assign(c.dim, 0.0);
    m.lnf_b.assign(c.dim, 0.0);
    return m;
  }

  static ToyLm create(const LmConfig& c, const Rng& root) {
    ToyLm m = zeros(c);
    const double s = c.init_stddev;
    const double s_out = s / std::sqrt(2.0 * static_cast<double>(c.layers));
    auto fill = [](Matrix& w, double sd, Rng r) { w = random_normal(w.rows(), w.cols(), sd, r); };
    fill(m.tok_emb, s, root.split("tok_emb"));
    fill(m.pos_emb, s, root.split("pos_emb"));
    for (std::size_t i = 0; i < c.layers; ++i) {
      auto& l = m.layers[i];
      const std::string p = "layer" + std::to_string(i);
      l.ln1_g.assign(c.dim, 1.0);
      l.ln2_g.assign(c.dim, 1.0);
      fill(l.wq, s, root.split(p + ".wq"));
      fill(l.wk, s, root.split(p + ".wk"));
      fill(l.wv, s, root.split(p + ".wv"));
      fill(l.wo, s_out, root.split(p + ".wo"));
      fill(l.w1, s, root.split(p + ".w1"));
      fill(l.w2, s_out, root.split(p + ".w2"));
    }
    m.lnf_g.assign(c.dim, 1.0);
    return m;
  }

  template <class F>
  void visit(F&& f) {
    f("tok_emb", tok_emb.values(), true);
    f("pos_emb", pos_emb.values(), true);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      auto& l = layers[i];
      const std::string p = "layer" + std::to_string(i) + ".";
      f(p + "ln1.g", std::span<double>(l.ln1_g), false);
      f(p + "ln1.b", std::span<double>(l.ln1_b), false);
      f(p + "wq", l.wq.values(), true);
      f(p + "wk", l.wk.values(), true);
      f(p + "wv", l.wv.values(), true);
      f(p + "wo", l.wo.values(), true);
      f(p + "ln2.g", std::span<double>(l.ln2_g), false);
      f(p + "ln2.b", std::span<double>(l.ln2_b), false);
      f(p + "w1", l.w1.values(), true);
      f(p + "b1", std::span<double>(l.b1), false);
      f(p + "w2", l.w2.values(), true);
      f(p + "b2", std::span<double>(l.b2), false);
    }
    f("lnf.g", std::span<double>(lnf_g), false);
    f("lnf.b", std::span<double>(lnf_b), false);
  }
};

inline void append_params(ParamList& out, ToyLm& value, ToyLm& grad) {
  std::vector<std::span<double>> grads;
  grad.visit([&](const std::string&, std::span<double> g, bool) { grads.push_back(g); });
  std::size_t i = 0;
  value.visit([&](const std::string& name, std::span<double> v, bool decay) {
    out.push_back({"lm." + name, v, grads[i++], decay});
  });
}

inline Checkpoint lm_checkpoint(const ToyLm& m) {
  Checkpoint ck;
  const auto& c = m.config;
  ck.set_meta("lm.config", "vocab_size=" + std::to_string(c.vocab_size) + " dim=" + std::to_string(c.dim) +
                               " layers=" + std::to_string(c.layers) + " heads=" + std::to_string(c.heads) +
                               " ffn_dim=" + std::to_string(c.ffn_dim) + " context=" + std::to_string(c.context));
  const_cast<ToyLm&>(m).visit([&](const std::string& name, std::span<double> v, bool) {
    if (name == "tok_emb") ck.add(name, m.tok_emb);
    else if (name == "pos_emb") ck.add(name, m.pos_emb);
    else ck.add(name, std::span<const double>(v.data(), v.size()));
  });
  return ck;
}

inline std::string lm_digest(const ToyLm& m) { return lm_checkpoint(m).digest(); }

inline ToyLm lm_from_checkpoint(const Checkpoint& ck) {
  LmConfig c;
  std::istringstream ss(ck.meta("lm.config"));
  std::string kv;
  while (ss >> kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) continue;
    const std::string k = kv.substr(0, eq);
    const std::size_t v = std::stoul(kv.substr(eq + 1));
    if (k == "vocab_size") c.vocab_size = v;
    else if (k == "dim") c.dim = v;
    else if (k == "layers") c.layers = v;
    else if (k == "heads") c.heads = v;
    else if (k == "ffn_dim") c.ffn_dim = v;
    else if (k == "context") c.context = v;
  }
  ToyLm m = ToyLm::zeros(c);
  m.visit([&](const std::string& name, std::span<double> v, bool) {
    const Matrix& t = ck.matrix(name);
    if (t.size() != v.size()) throw LoadError("lm checkpoint: tensor " + name + " has wrong size");
    std::copy(t.values().begin(), t.values().end(), v.begin());
  });
  return m;
}

namespace detail {

struct LayerNormTrace {
  Matrix xhat;
  Vector rstd;
};

inline Matrix layer_norm(const Matrix& x, const Vector& g, const Vector& b, LayerNormTrace& tr) {
  constexpr double kEps = 1e-5;
  const std::size_t d = x.cols();
  Matrix y(x.rows(), d);
  tr.xhat = Matrix(x.rows(), d);
  tr.rstd.assign(x.rows(), 0.0);
  for (std::size_t t = 0; t < x.rows(); ++t) {
    auto row = x.row(t);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + kEps);
    tr.rstd[t] = rstd;
    for (std::size_t c = 0; c < d; ++c) {
      const double xh = (row[c] - mean) * rstd;
      tr.xhat(t, c) = xh;
      y(t, c) = g[c] * xh + b[c];
    }
  }
  return y;
}

// Returns dx; accumulates dg, db when given.
inline Matrix layer_norm_backward(const Matrix& dy, const Vector& g, const LayerNormTrace& tr, Vector* dg, Vector* db) {
  const std::size_t d = dy.cols();
  Matrix dx(dy.rows(), d);
  Vector dxhat(d);
  for (std::size_t t = 0; t < dy.rows(); ++t) {
    double m1 = 0.0, m2 = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      dxhat[c] = dy(t, c) * g[c];
      m1 += dxhat[c];
      m2 += dxhat[c] * tr.xhat(t, c);
      if (dg) (*dg)[c] += dy(t, c) * tr.xhat(t, c);
      if (db) (*db)[c] += dy(t, c);
    }
    m1 /= static_cast<double>(d);
    m2 /= static_cast<double>(d);
    for (std::size_t c = 0; c < d; ++c) dx(t, c) = tr.rstd[t] * (dxhat[c] - m1 - tr.xhat(t, c) * m2);
  }
  return dx;
}

inline void add_into(Matrix& dst, const Matrix& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst.data()[i] += src.data()[i];
}

inline void add_bias(Matrix& x, const Vector& b) {
  for (std::size_t t = 0; t < x.rows(); ++t)
    for (std::size_t c = 0; c < x.cols(); ++c) x(t, c) += b[c];
}

inline void add_column_sums(Vector& dst, const Matrix& x) {
  for (std::size_t t = 0; t < x.rows(); ++t)
    for (std::size_t c = 0; c < x.cols(); ++c) dst[c] += x(t, c);
}

}  // namespace detail

// One forward pass over an embedding sequence, keeping what backward needs.
class LmPass {
 public:
  LmPass(const ToyLm& model, const Matrix& input, const AdapterStack* adapters = nullptr,
         std::span<const Matrix> interactions = {}, Rng* dropout_rng = nullptr)
      : model_(&model), adapters_(adapters), w_(interactions.begin(), interactions.end()) {
    const auto& c = model.config;
    const std::size_t T = input.rows();
    if (T == 0) throw ContractError("lm_forward: empty sequence");
    if (T > c.context)
      throw ContractError("lm_forward: sequence of " + std::to_string(T) + " positions exceeds the context limit of " +
                          std::to_string(c.context));
    RELLAX_REQUIRE(input.cols() == c.dim, "lm_forward: input width != model dim");
    if (adapters_) {
      RELLAX_REQUIRE(adapters_->slots.size() == 2 * c.layers, "lm_forward: adapter stack does not match layer count");
      RELLAX_REQUIRE(w_.size() == adapters_->slots.size(), "lm_forward: need one interaction matrix per adapter slot");
    }
    Matrix x = input;
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t k = 0; k < c.dim; ++k) x(t, k) += model.pos_emb(t, k);

    const std::size_t H = c.heads;
    const std::size_t dh = c.dim / H;
    const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    layers_.resize(c.layers);
    for (std::size_t li = 0; li < c.layers; ++li) {
      const LmLayer& L = model.layers[li];
      LayerTrace& tr = layers_[li];
      tr.a = detail::layer_norm(x, L.ln1_g, L.ln1_b, tr.ln1);
      tr.q = matmul(tr.a, L.wq);
      tr.k = matmul(tr.a, L.wk);
      tr.v = matmul(tr.a, L.wv);
      for (std::size_t p = 0; p < 2; ++p) {
        const CfLoraAdapter* ad = adapters_ ? adapters_->get(li, static_cast<HostProjection>(p)) : nullptr;
        if (!ad) continue;
        Matrix mask;
        if (dropout_rng && adapters_->dropout > 0.0) {
          const double keep = 1.0 - adapters_->dropout;
          mask = Matrix(T, ad->rank());
          for (double& m : mask.values()) m = dropout_rng->uniform() < keep ? 1.0 / keep : 0.0;
        }
        const std::size_t slot = AdapterStack::index(li, static_cast<HostProjection>(p));
        Matrix extra = adapter_forward(*ad, w_[slot], tr.a, &tr.adapter[p], std::move(mask));
        detail::add_into(p == 0 ? tr.q : tr.v, extra);
      }
      tr.probs.assign(H, Matrix(T, T));
      tr.o = Matrix(T, c.dim);
      for (std::size_t h = 0; h < H; ++h) {
        Matrix& P = tr.probs[h];
        const std::size_t off = h * dh;
        for (std::size_t i = 0; i < T; ++i) {
          double mx = -1e300;
          for (std::size_t j = 0; j <= i; ++j) {
            double s = 0.0;
            for (std::size_t e = 0; e < dh; ++e) s += tr.q(i, off + e) * tr.k(j, off + e);
            s *= inv;
            P(i, j) = s;
            mx = std::max(mx, s);
          }
          double sum = 0.0;
          for (std::size_t j = 0; j <= i; ++j) {
            P(i, j) = std::exp(P(i, j) - mx);
            sum += P(i, j);
          }
          for (std::size_t j = 0; j <= i; ++j) {
            P(i, j) /= sum;
            const double pij = P(i, j);
            for (std::size_t e = 0; e < dh; ++e) tr.o(i, off + e) += pij * tr.v(j, off + e);
          }
        }
      }
      detail::add_into(x, matmul(tr.o, L.wo));
      tr.b = detail::layer_norm(x, L.ln2_g, L.ln2_b, tr.ln2);
      tr.f_pre = matmul(tr.b, L.w1);
      detail::add_bias(tr.f_pre, L.b1);
      Matrix f = tr.f_pre;
      for (double& v : f.values()) v = v > 0.0 ? v : 0.0;
      Matrix ff = matmul(f, L.w2);
      detail::add_bias(ff, L.b2);
      detail::add_into(x, ff);
    }
    hidden_ = x;
    output_ = detail::layer_norm(x, model.lnf_g, model.lnf_b, lnf_);
  }

  std::size_t length() const { return output_.rows(); }
  std::size_t layer_count() const { return layers_.size(); }
  std::size_t head_count() const { return model_->config.heads; }

  // Residual stream after the final block, before the final norm.
  const Matrix& hidden_states() const { return hidden_; }
  // Final-normed states; logits are output * tok_emb^T.
  const Matrix& output() const { return output_; }

  Vector logits_at(std::size_t t) const { return matvec(model_->tok_emb, output_.row(t)); }
  Vector last_logits() const { return logits_at(length() - 1); }
  Matrix all_logits() const { return matmul_nt(output_, model_->tok_emb); }

  // Causal attention probabilities (T x T, rows sum to 1) of one head.
  const Matrix& attention(std::size_t layer, std::size_t head) const { return layers_.at(layer).probs.at(head); }

  // Backpropagates dL/d(output). Any of the sinks may be null.
  //   base_grad:    accumulates frozen-weight gradients (pretraining only)
  //   adapter_grad: accumulates dA, dB (and nothing for projectors)
  //   d_w:          accumulates dL/dW per adapter slot
  //   d_input:      receives dL/d(input embeddings)
  void backward(const Matrix& d_output, ToyLm* base_grad, AdapterStack* adapter_grad, std::vector<Matrix>* d_w,
                Matrix* d_input) const {
    const ToyLm& model = *model_;
    const auto& c = model.config;
    const std::size_t T = length();
    const std::size_t H = c.heads;
    const std::size_t dh = c.dim / H;
    const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    RELLAX_REQUIRE(d_output.rows() == T && d_output.cols() == c.dim, "lm backward: gradient shape mismatch");
    if (d_w && adapters_) {
      if (d_w->size() != w_.size()) d_w->assign(w_.size(), Matrix());
      for (std::size_t i = 0; i < w_.size(); ++i)
        if (!w_[i].empty() && (*d_w)[i].empty()) (*d_w)[i] = Matrix(w_[i].rows(), w_[i].cols());
    }

    Matrix dx = detail::layer_norm_backward(d_output, model.lnf_g, lnf_, base_grad ? &base_grad->lnf_g : nullptr,
                                            base_grad ? &base_grad->lnf_b : nullptr);
    for (std::size_t li = c.layers; li-- > 0;) {
      const LmLayer& L = model.layers[li];
      const LayerTrace& tr = layers_[li];
      LmLayer* G = base_grad ? &base_grad->layers[li] : nullptr;

      // Feed-forward branch.
      Matrix f = tr.f_pre;
      for (double& v : f.values()) v = v > 0.0 ? v : 0.0;
      if (G) {
        add_matmul_tn(G->w2, f, dx);
        detail::add_column_sums(G->b2, dx);
      }
      Matrix df = matmul_nt(dx, L.w2);
      for (std::size_t i = 0; i < df.size(); ++i)
        if (tr.f_pre.data()[i] <= 0.0) df.data()[i] = 0.0;
      if (G) {
        add_matmul_tn(G->w1, tr.b, df);
        detail::add_column_sums(G->b1, df);
      }
      Matrix db = matmul_nt(df, L.w1);
      detail::add_into(dx, detail::layer_norm_backward(db, L.ln2_g, tr.ln2, G ? &G->ln2_g : nullptr,
                                                       G ? &G->ln2_b : nullptr));

      // Attention branch.
      if (G) add_matmul_tn(G->wo, tr.o, dx);
      Matrix d_o = matmul_nt(dx, L.wo);
      Matrix dq(T, c.dim), dk(T, c.dim), dv(T, c.dim);
      Vector dp(T);
      for (std::size_t h = 0; h < H; ++h) {
        const Matrix& P = tr.probs[h];
        const std::size_t off = h * dh;
        for (std::size_t i = 0; i < T; ++i) {
          double row_dot = 0.0;
          for (std::size_t j = 0; j <= i; ++j) {
            double s = 0.0;
            for (std::size_t e = 0; e < dh; ++e) s += d_o(i, off + e) * tr.v(j, off + e);
            dp[j] = s;
            row_dot += s * P(i, j);
            const double pij = P(i, j);
            for (std::size_t e = 0; e < dh; ++e) dv(j, off + e) += pij * d_o(i, off + e);
          }
          for (std::size_t j = 0; j <= i; ++j) {
            const double ds = P(i, j) * (dp[j] - row_dot) * inv;
            if (ds == 0.0) continue;
            for (std::size_t e = 0; e < dh; ++e) {
              dq(i, off + e) += ds * tr.k(j, off + e);
              dk(j, off + e) += ds * tr.q(i, off + e);
            }
          }
        }
      }
      if (G) {
        add_matmul_tn(G->wq, tr.a, dq);
        add_matmul_tn(G->wk, tr.a, dk);
        add_matmul_tn(G->wv, tr.a, dv);
      }
      Matrix da = matmul_nt(dq, L.wq);
      detail::add_into(da, matmul_nt(dk, L.wk));
      detail::add_into(da, matmul_nt(dv, L.wv));
      for (std::size_t p = 0; p < 2; ++p) {
        const CfLoraAdapter* ad = adapters_ ? adapters_->get(li, static_cast<HostProjection>(p)) : nullptr;
        if (!ad) continue;
        const std::size_t slot = AdapterStack::index(li, static_cast<HostProjection>(p));
        CfLoraAdapter scratch;
        CfLoraAdapter* ag = nullptr;
        if (adapter_grad && adapter_grad->slots.at(slot)) {
          ag = &*adapter_grad->slots[slot];
        } else {
          scratch = ad->zeros_like();
          ag = &scratch;
        }
        Matrix dw_scratch(ad->rank(), ad->rank());
        Matrix& dw = d_w ? (*d_w)[slot] : dw_scratch;
        adapter_backward(*ad, w_[slot], tr.a, tr.adapter[p], p == 0 ? dq : dv, *ag, dw, &da);
      }
      detail::add_into(dx, detail::layer_norm_backward(da, L.ln1_g, tr.ln1, G ? &G->ln1_g : nullptr,
                                                       G ? &G->ln1_b : nullptr));
    }
    if (base_grad)
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t k = 0; k < c.dim; ++k) base_grad->pos_emb(t, k) += dx(t, k);
    if (d_input) *d_input = std::move(dx);
  }

 private:
  struct LayerTrace {
    detail::LayerNormTrace ln1, ln2;
    Matrix a, q, k, v, o, b, f_pre;
    std::vector<Matrix> probs;
    AdapterTrace adapter[2];
  };

  const ToyLm* model_;
  const AdapterStack* adapters_;
  std::vector<Matrix> w_;
  std::vector<LayerTrace> layers_;
  detail::LayerNormTrace lnf_;
  Matrix hidden_;
  Matrix output_;
};

inline Matrix token_embeddings(const ToyLm& model, std::span<const std::int32_t> tokens) {
  Matrix e(tokens.size(), model.config.dim);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    RELLAX_REQUIRE(tokens[t] >= 0 && static_cast<std::size_t>(tokens[t]) < model.config.vocab_size,
                   "token id out of vocabulary range");
    std::copy_n(model.tok_emb.row(static_cast<std::size_t>(tokens[t])).begin(), model.config.dim, e.row(t).begin());
  }
  return e;
}

// -log softmax(logits)[answer], the answer-token-only causal LM objective.
inline double causal_lm_loss(std::span<const double> logits, std::int32_t answer) {
  if (answer < 0 || static_cast<std::size_t>(answer) >= logits.size())
    throw ContractError("causal_lm_loss: answer token " + std::to_string(answer) + " not in vocabulary");
  return log_sum_exp(logits) - logits[static_cast<std::size_t>(answer)];
}

inline Vector causal_lm_loss_grad(std::span<const double> logits, std::int32_t answer) {
  Vector p(logits.begin(), logits.end());
  softmax_inplace(p);
  p[static_cast<std::size_t>(answer)] -= 1.0;
  return p;
}

// exp(s_m) / (exp(s_m) + exp(s_n)) evaluated as sigmoid(s_m - s_n).
inline double pointwise_score(std::span<const double> logits, std::int32_t yes, std::int32_t no) {
  RELLAX_REQUIRE(yes != no && yes >= 0 && no >= 0 && static_cast<std::size_t>(yes) < logits.size() &&
                     static_cast<std::size_t>(no) < logits.size(),
                 "pointwise_score: invalid answer token indices");
  return sigmoid(logits[static_cast<std::size_t>(yes)] - logits[static_cast<std::size_t>(no)]);
}

// Turns a last-position logit gradient into dL/d(output); adds the tied
// output-projection gradient to base_grad when given.
inline Matrix last_position_output_grad(const ToyLm& model, const LmPass& pass, std::span<const double> d_logits,
                                        ToyLm* base_grad) {
  const std::size_t T = pass.length();
  Matrix d_out(T, model.config.dim);
  Vector d_last = matvec_t(model.tok_emb, d_logits);
  std::copy(d_last.begin(), d_last.end(), d_out.row(T - 1).begin());
  if (base_grad) {
    auto h = pass.output().row(T - 1);
    for (std::size_t v = 0; v < d_logits.size(); ++v)
      for (std::size_t k = 0; k < h.size(); ++k) base_grad->tok_emb(v, k) += d_logits[v] * h[k];
  }
  return d_out;
}

// ---------------------------------------------------------------------------
// Attention case studies

struct AttentionExtract {
  std::vector<double> item_mass;  // per span, averaged over heads
  double total = 0.0;             // total mass of the final row (1 up to rounding)
};

inline AttentionExtract extract_item_attention(const LmPass& pass, std::span<const TokenSpan> spans) {
  const std::size_t T = pass.length();
  AttentionExtract ex;
  ex.item_mass.assign(spans.size(), 0.0);
  const std::size_t layers = pass.layer_count();
  const std::size_t heads = pass.head_count();
  for (const auto& s : spans)
    if (s.first > s.last || s.last >= T) throw ContractError("extract_item_attention: span out of range");
  for (std::size_t h = 0; h < heads; ++h) {
    const Matrix& P = pass.attention(layers - 1, h);
    for (std::size_t j = 0; j < T; ++j) ex.total += P(T - 1, j) / static_cast<double>(heads);
    for (std::size_t k = 0; k < spans.size(); ++k)
      for (std::size_t j = spans[k].first; j <= spans[k].last; ++j)
        ex.item_mass[k] += P(T - 1, j) / static_cast<double>(heads);
  }
  return ex;
}

// ---------------------------------------------------------------------------
// Base-model pretraining on unlabeled prompts (next-token loss over every
// position; answers are never part of the sequences).

// Mean next-token loss of one sequence; accumulates full-model gradients into
// `grad` (scaled by `weight`) when given.
inline double lm_sequence_loss(const ToyLm& model, std::span<const std::int32_t> tokens, ToyLm* grad,
                               double weight = 1.0) {
  RELLAX_REQUIRE(tokens.size() >= 2, "lm_sequence_loss: need at least two tokens");
  const LmPass pass(model, token_embeddings(model, tokens));
  const std::size_t T = tokens.size();
  const double n = static_cast<double>(T - 1);
  Matrix logits = pass.all_logits();
  double loss = 0.0;
  Matrix d_logits(T, model.config.vocab_size);
  for (std::size_t t = 0; t + 1 < T; ++t) {
    loss += causal_lm_loss(logits.row(t), tokens[t + 1]) / n;
    if (grad) {
      Vector g = causal_lm_loss_grad(logits.row(t), tokens[t + 1]);
      for (std::size_t v = 0; v < g.size(); ++v) d_logits(t, v) = weight * g[v] / n;
    }
  }
  if (grad) {
    add_matmul_tn(grad->tok_emb, d_logits, pass.output());
    Matrix d_out = matmul(d_logits, model.tok_emb);
    Matrix d_in;
    pass.backward(d_out, grad, nullptr, nullptr, &d_in);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t k = 0; k < model.config.dim; ++k)
        grad->tok_emb(static_cast<std::size_t>(tokens[t]), k) += d_in(t, k);
  }
  return loss;
}

struct LmPretrainConfig {
  std::size_t epochs = 1;
  std::size_t batch = 8;
  double learning_rate = 3e-3;
  std::uint64_t seed = 1;
};

// Returns the mean loss of every optimizer step.
inline std::vector<double> lm_pretrain(ToyLm& model, const std::vector<std::vector<std::int32_t>>& sequences,
                                       const LmPretrainConfig& cfg) {
  std::vector<double> history;
  if (sequences.empty() || cfg.epochs == 0) return history;
  RELLAX_REQUIRE(cfg.batch >= 1, "lm_pretrain: batch must be >= 1");
  ToyLm grad = ToyLm::zeros(model.config);
  ParamList params;
  append_params(params, model, grad);
  AdamW opt(AdamWConfig{cfg.learning_rate, 0.9, 0.999, 1e-8, 0.0});
  Rng rng = Rng(cfg.seed).split("lm-pretrain");
  std::vector<std::size_t> order(sequences.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  const std::size_t steps_per_epoch = (order.size() + cfg.batch - 1) / cfg.batch;
  const std::size_t total = steps_per_epoch * cfg.epochs;
  std::size_t step = 0;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    rng.shuffle(order);
    for (std::size_t b = 0; b < order.size(); b += cfg.batch) {
      const std::size_t end = std::min(order.size(), b + cfg.batch);
      const double w = 1.0 / static_cast<double>(end - b);
      zero_grads(params);
      double loss = 0.0;
      for (std::size_t i = b; i < end; ++i) loss += w * lm_sequence_loss(model, sequences[order[i]], &grad, w);
      if (!std::isfinite(loss)) throw TrainingError("lm_pretrain: non-finite loss at step " + std::to_string(step));
      const double lr = cfg.learning_rate * (1.0 - static_cast<double>(step) / static_cast<double>(total));
      opt.step(params, lr);
      history.push_back(loss);
      ++step;
    }
  }
  return history;
}

}  // namespace rellax
