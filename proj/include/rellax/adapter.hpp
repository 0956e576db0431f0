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

// Component fully-interactive low-rank adapters.
//
// An adapter holds a down-projection A (r x d_down) and an up-projection
// B (d_up x r). Its weight update is scale * B W A where the r x r interaction
// matrix W comes from an InteractionSource:
//   identity        W = I                      (plain low-rank adaptation)
//   block_diagonal  W = diag(a_1..a_1, ..., a_N..a_N), r/N copies per block
//   projected       W = reshape(projector(h)), h the per-sample CRM state
// Block weights can also be produced per sample by a gating projector h -> N.

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "rellax/error.hpp"
#include "rellax/numerics.hpp"

namespace rellax {

enum class InteractionKind { identity, block_diagonal, projected };

inline std::string to_string(InteractionKind k) {
  switch (k) {
    case InteractionKind::identity: return "identity";
    case InteractionKind::block_diagonal: return "block-diagonal";
    case InteractionKind::projected: return "projected";
  }
  return "?";
}

inline InteractionKind parse_interaction_kind(const std::string& s) {
  if (s == "identity") return InteractionKind::identity;
  if (s == "block-diagonal" || s == "block") return InteractionKind::block_diagonal;
  if (s == "projected") return InteractionKind::projected;
  throw ContractError("unknown interaction source '" + s + "'");
}

struct InteractionSource {
  InteractionKind kind = InteractionKind::identity;
  std::size_t blocks = 1;
  Vector alphas;                  // fixed block weights, used when no projector
  std::optional<Mlp2> projector;  // projected: d_h -> r*r; block gating: d_h -> blocks

  static InteractionSource identity() { return {}; }
  static InteractionSource block_diagonal(Vector alphas) {
    InteractionSource s;
    s.kind = InteractionKind::block_diagonal;
    s.blocks = alphas.size();
    s.alphas = std::move(alphas);
    return s;
  }
  static InteractionSource gated_block_diagonal(Mlp2 gate) {
    InteractionSource s;
    s.kind = InteractionKind::block_diagonal;
    s.blocks = gate.output_dim();
    s.projector = std::move(gate);
    return s;
  }
  static InteractionSource projected(Mlp2 projector) {
    InteractionSource s;
    s.kind = InteractionKind::projected;
    s.projector = std::move(projector);
    return s;
  }

  bool needs_representation() const { return projector.has_value(); }
};

struct InteractionTrace {
  Mlp2Trace projector;
};

inline Matrix make_interaction_matrix(const InteractionSource& src, std::size_t rank,
                                      const Vector* h, InteractionTrace* trace = nullptr) {
  RELLAX_REQUIRE(rank >= 1, "interaction matrix: rank must be >= 1");
  switch (src.kind) {
    case InteractionKind::identity:
      return Matrix::identity(rank);
    case InteractionKind::block_diagonal: {
      if (src.blocks == 0 || rank % src.blocks != 0)
        throw ContractError("block-diagonal W: " + std::to_string(src.blocks) +
                            " blocks do not divide rank " + std::to_string(rank));
      Vector alphas;
      if (src.projector) {
        if (!h) throw ContractError("block-diagonal W: gating needs the CRM representation h");
        alphas = mlp2_forward(*src.projector, *h, trace ? &trace->projector : nullptr);
      } else {
        alphas = src.alphas;
      }
      RELLAX_REQUIRE(alphas.size() == src.blocks, "block-diagonal W: alpha count != blocks");
      const std::size_t width = rank / src.blocks;
      Matrix w(rank, rank);
      for (std::size_t j = 0; j < rank; ++j) w(j, j) = alphas[j / width];
      return w;
    }
    case InteractionKind::projected: {
      if (!src.projector) throw ContractError("projected W: no projector");
      if (!h) throw ContractError("projected W: the CRM representation h is absent");
      if (src.projector->output_dim() != rank * rank)
        throw ContractError("projected W: projector emits " +
                            std::to_string(src.projector->output_dim()) + " values, need " +
                            std::to_string(rank * rank));
      Vector flat = mlp2_forward(*src.projector, *h, trace ? &trace->projector : nullptr);
      return Matrix(rank, rank, std::move(flat));
    }
  }
  return {};
}

// Pushes dL/dW back into the source's projector gradient (if it has one).
// Fixed alphas and the identity are constants.
inline void interaction_backward(const InteractionSource& src, const InteractionTrace& trace,
                                 const Matrix& d_w, InteractionSource& grad) {
  if (!src.projector) return;
  RELLAX_REQUIRE(grad.projector.has_value(), "interaction_backward: grad has no projector");
  if (src.kind == InteractionKind::projected) {
    mlp2_backward(*src.projector, trace.projector, d_w.values(), *grad.projector);
  } else {
    const std::size_t rank = d_w.rows();
    const std::size_t width = rank / src.blocks;
    Vector d_alpha(src.blocks, 0.0);
    for (std::size_t j = 0; j < rank; ++j) d_alpha[j / width] += d_w(j, j);
    mlp2_backward(*src.projector, trace.projector, d_alpha, *grad.projector);
  }
}

// B W A, summed as a product of matrices.
inline Matrix cflora_delta_composite(const Matrix& a, const Matrix& b, const Matrix& w) {
  RELLAX_REQUIRE(b.cols() == w.rows() && w.cols() == a.rows() && w.rows() == w.cols(),
                 "cflora delta: shapes of A, B, W do not conform");
  return matmul(matmul(b, w), a);
}

// The same update as an explicit sum of rank-1 terms w_ij * B_i A_j, with B_i
// the i-th column of B and A_j the j-th row of A.
inline Matrix cflora_delta_decomposed(const Matrix& a, const Matrix& b, const Matrix& w) {
  RELLAX_REQUIRE(b.cols() == w.rows() && w.cols() == a.rows() && w.rows() == w.cols(),
                 "cflora delta: shapes of A, B, W do not conform");
  const std::size_t r = w.rows();
  Matrix delta(b.rows(), a.cols());
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < r; ++j) {
      const double wij = w(i, j);
      if (wij == 0.0) continue;
      for (std::size_t p = 0; p < b.rows(); ++p) {
        const double bw = wij * b(p, i);
        for (std::size_t q = 0; q < a.cols(); ++q) delta(p, q) += bw * a(j, q);
      }
    }
  }
  return delta;
}

struct CfLoraAdapter {
  Matrix a;  // rank x d_down
  Matrix b;  // d_up x rank
  double alpha = 8.0;
  InteractionSource source;

  std::size_t rank() const { return a.rows(); }
  std::size_t d_down() const { return a.cols(); }
  std::size_t d_up() const { return b.rows(); }
  double scale() const { return alpha / static_cast<double>(rank()); }

  // A ~ N(0, 1/d_down), B = 0 so the initial update vanishes.
  static CfLoraAdapter create(std::size_t d_down, std::size_t d_up, std::size_t rank, double alpha,
                              InteractionSource source, Rng& rng) {
    if (rank == 0 || rank > std::min(d_down, d_up))
      throw ContractError("adapter: rank " + std::to_string(rank) + " must be in [1, min(d_down, d_up)]");
    CfLoraAdapter ad;
    ad.a = random_normal(rank, d_down, 1.0 / std::sqrt(static_cast<double>(d_down)), rng);
    ad.b = Matrix(d_up, rank);
    ad.alpha = alpha;
    ad.source = std::move(source);
    return ad;
  }

  // Zero-valued copy with the same shapes, used as a gradient accumulator.
  CfLoraAdapter zeros_like() const {
    CfLoraAdapter g;
    g.a = Matrix(a.rows(), a.cols());
    g.b = Matrix(b.rows(), b.cols());
    g.alpha = alpha;
    g.source.kind = source.kind;
    g.source.blocks = source.blocks;
    g.source.alphas.assign(source.alphas.size(), 0.0);
    if (source.projector) {
      const auto& p = *source.projector;
      g.source.projector = Mlp2::zeros(p.input_dim(), p.hidden_dim(), p.output_dim());
    }
    return g;
  }
};

// scale * B (W (A x)): the additive path next to a frozen projection.
inline Vector adapter_apply(const CfLoraAdapter& ad, const Matrix& w, std::span<const double> x) {
  if (x.size() != ad.d_down())
    throw ContractError("adapter_apply: input dim " + std::to_string(x.size()) + " != d_down " +
                        std::to_string(ad.d_down()));
  RELLAX_REQUIRE(w.rows() == ad.rank() && w.cols() == ad.rank(), "adapter_apply: W must be r x r");
  Vector u = matvec(ad.a, x);
  Vector v = matvec(w, u);
  Vector y = matvec(ad.b, v);
  const double s = ad.scale();
  for (double& e : y) e *= s;
  return y;
}

// Row-batched forward over a T x d_down activation matrix.
struct AdapterTrace {
  Matrix u;     // X A^T after dropout, T x r
  Matrix v;     // U W^T, T x r
  Matrix mask;  // dropout keep-mask already divided by (1 - p); empty if unused
};

inline Matrix adapter_forward(const CfLoraAdapter& ad, const Matrix& w, const Matrix& x,
                              AdapterTrace* trace, Matrix mask = {}) {
  RELLAX_REQUIRE(x.cols() == ad.d_down(), "adapter_forward: input width != d_down");
  RELLAX_REQUIRE(w.rows() == ad.rank() && w.cols() == ad.rank(), "adapter_forward: W must be r x r");
  Matrix u = matmul_nt(x, ad.a);
  if (!mask.empty()) {
    RELLAX_REQUIRE(mask.rows() == u.rows() && mask.cols() == u.cols(), "adapter: mask shape");
    for (std::size_t i = 0; i < u.size(); ++i) u.data()[i] *= mask.data()[i];
  }
  Matrix v = matmul_nt(u, w);
  Matrix y = ad.scale() * matmul_nt(v, ad.b);
  if (trace) {
    trace->u = std::move(u);
    trace->v = std::move(v);
    trace->mask = std::move(mask);
  }
  return y;
}

// Accumulates dA, dB into `grad`, dW into `d_w`, and dX into `d_x` if given.
inline void adapter_backward(const CfLoraAdapter& ad, const Matrix& w, const Matrix& x,
                             const AdapterTrace& trace, const Matrix& d_y, CfLoraAdapter& grad,
                             Matrix& d_w, Matrix* d_x) {
  const double s = ad.scale();
  Matrix d_v = s * matmul(d_y, ad.b);        // T x r
  add_matmul_tn(grad.b, s * d_y, trace.v);   // d_up x r
  add_matmul_tn(d_w, d_v, trace.u);          // r x r
  Matrix d_u = matmul(d_v, w);               // T x r
  if (!trace.mask.empty())
    for (std::size_t i = 0; i < d_u.size(); ++i) d_u.data()[i] *= trace.mask.data()[i];
  add_matmul_tn(grad.a, d_u, x);             // r x d_down
  if (d_x) {
    Matrix dx = matmul(d_u, ad.a);
    for (std::size_t i = 0; i < dx.size(); ++i) d_x->data()[i] += dx.data()[i];
  }
}

// ---------------------------------------------------------------------------
// Adapters attached to the query and value projections of every layer.

enum class HostProjection : std::size_t { query = 0, value = 1 };

struct AdapterConfig {
  std::size_t rank = 4;
  double alpha = 8.0;
  InteractionKind kind = InteractionKind::projected;
  std::size_t blocks = 2;
  std::size_t projector_hidden = 32;
  double projector_out_stddev = 1e-3;
  double dropout = 0.0;
};

struct AdapterStack {
  std::size_t layers = 0;
  double dropout = 0.0;
  std::vector<std::optional<CfLoraAdapter>> slots;  // layer * 2 + projection

  static std::size_t index(std::size_t layer, HostProjection p) {
    return layer * 2 + static_cast<std::size_t>(p);
  }
  const CfLoraAdapter* get(std::size_t layer, HostProjection p) const {
    const auto& s = slots.at(index(layer, p));
    return s ? &*s : nullptr;
  }
  bool needs_representation() const {
    for (const auto& s : slots)
      if (s && s->source.needs_representation()) return true;
    return false;
  }

  static std::string slot_name(std::size_t i) {
    return "layer" + std::to_string(i / 2) + (i % 2 == 0 ? ".query" : ".value");
  }

  static AdapterStack create(std::size_t layers, std::size_t dim, std::size_t d_h,
                             const AdapterConfig& cfg, Rng& rng) {
    AdapterStack st;
    st.layers = layers;
    st.dropout = cfg.dropout;
    st.slots.resize(layers * 2);
    for (std::size_t i = 0; i < st.slots.size(); ++i) {
      Rng r = rng.split(slot_name(i));
      InteractionSource src;
      switch (cfg.kind) {
        case InteractionKind::identity:
          src = InteractionSource::identity();
          break;
        case InteractionKind::block_diagonal: {
          Rng pr = r.split("projector");
          src = InteractionSource::gated_block_diagonal(
              Mlp2::random(d_h, cfg.projector_hidden, cfg.blocks, pr, cfg.projector_out_stddev));
          break;
        }
        case InteractionKind::projected: {
          Rng pr = r.split("projector");
          src = InteractionSource::projected(Mlp2::random(
              d_h, cfg.projector_hidden, cfg.rank * cfg.rank, pr, cfg.projector_out_stddev));
          break;
        }
      }
      Rng ar = r.split("A");
      st.slots[i] = CfLoraAdapter::create(dim, dim, cfg.rank, cfg.alpha, std::move(src), ar);
    }
    return st;
  }

  AdapterStack zeros_like() const {
    AdapterStack g;
    g.layers = layers;
    g.dropout = dropout;
    g.slots.resize(slots.size());
    for (std::size_t i = 0; i < slots.size(); ++i)
      if (slots[i]) g.slots[i] = slots[i]->zeros_like();
    return g;
  }
};

// One W per slot, realized once per sample (empty Matrix for empty slots).
inline std::vector<Matrix> realize_interactions(const AdapterStack& st, const Vector* h,
                                                std::vector<InteractionTrace>* traces = nullptr) {
  std::vector<Matrix> ws(st.slots.size());
  if (traces) traces->assign(st.slots.size(), {});
  for (std::size_t i = 0; i < st.slots.size(); ++i)
    if (st.slots[i])
      ws[i] = make_interaction_matrix(st.slots[i]->source, st.slots[i]->rank(), h,
                                      traces ? &(*traces)[i] : nullptr);
  return ws;
}

inline void append_params(ParamList& out, AdapterStack& value, AdapterStack& grad) {
  for (std::size_t i = 0; i < value.slots.size(); ++i) {
    if (!value.slots[i]) continue;
    auto& v = *value.slots[i];
    auto& g = *grad.slots[i];
    const std::string name = AdapterStack::slot_name(i);
    out.push_back({name + ".A", v.a.values(), g.a.values(), true});
    out.push_back({name + ".B", v.b.values(), g.b.values(), true});
    if (v.source.projector) append_params(out, name + ".projector", *v.source.projector, *g.source.projector);
  }
}

}  // namespace rellax
