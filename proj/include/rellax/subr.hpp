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

// Semantic behavior retrieval: item vectors, PCA reduction, cosine top-K
// selection of history items, and the genre heterogeneity score.

#include <algorithm>
#include <cfloat>
#include <cmath>
#include <cstdint>
#include <istream>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "rellax/checkpoint.hpp"
#include "rellax/data.hpp"
#include "rellax/error.hpp"
#include "rellax/numerics.hpp"

namespace rellax {

// Zero-norm inputs rank last: their similarity is defined as -1.
inline double cosine_similarity(std::span<const double> x, std::span<const double> y) {
  RELLAX_REQUIRE(x.size() == y.size(), "cosine_similarity: length mismatch");
  const double nx = std::sqrt(dot(x, x));
  const double ny = std::sqrt(dot(y, y));
  if (nx == 0.0 || ny == 0.0) return -1.0;
  return dot(x, y) / (nx * ny);
}

// ---------------------------------------------------------------------------
// PCA

struct PcaModel {
  Vector mean;                // d_z
  Matrix components;          // d_q x d_z, orthonormal rows
  Vector explained_variance;  // per component, non-increasing
  std::size_t fitted_on = 0;

  std::size_t input_dim() const { return mean.size(); }
  std::size_t output_dim() const { return components.rows(); }
};

struct SvdResult {
  Vector singular_values;  // descending
  Matrix right_vectors;    // rows are right singular vectors, same order
};

// One-sided Jacobi SVD of an n x d matrix; only the right side is kept.
inline SvdResult right_svd(Matrix x) {
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();
  Matrix v = Matrix::identity(d);
  for (int sweep = 0; sweep < 100; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < d; ++p) {
      for (std::size_t q = p + 1; q < d; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          const double xp = x(i, p), xq = x(i, q);
          alpha += xp * xp;
          beta += xq * xq;
          gamma += xp * xq;
        }
        if (gamma == 0.0 || std::abs(gamma) <= 1e-15 * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < n; ++i) {
          const double xp = x(i, p), xq = x(i, q);
          x(i, p) = c * xp - s * xq;
          x(i, q) = s * xp + c * xq;
        }
        for (std::size_t i = 0; i < d; ++i) {
          const double vp = v(i, p), vq = v(i, q);
          v(i, p) = c * vp - s * vq;
          v(i, q) = s * vp + c * vq;
        }
      }
    }
    if (!rotated) break;
  }
  Vector sv(d);
  for (std::size_t j = 0; j < d; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += x(i, j) * x(i, j);
    sv[j] = std::sqrt(s);
  }
  std::vector<std::size_t> order(d);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sv[a] > sv[b]; });
  SvdResult out{Vector(d), Matrix(d, d)};
  for (std::size_t k = 0; k < d; ++k) {
    out.singular_values[k] = sv[order[k]];
    for (std::size_t i = 0; i < d; ++i) out.right_vectors(k, i) = v(i, order[k]);
  }
  return out;
}

// Number of singular values above the usual floating-point rank threshold.
inline std::size_t numerical_rank(const Vector& singular_values, std::size_t n, std::size_t d) {
  if (singular_values.empty() || singular_values[0] == 0.0) return 0;
  const double tol = singular_values[0] * static_cast<double>(std::max(n, d)) * DBL_EPSILON;
  return static_cast<std::size_t>(std::count_if(singular_values.begin(), singular_values.end(),
                                                [&](double s) { return s > tol; }));
}

// Rows of `data` are the raw vectors. Each component's largest-magnitude
// entry is made positive.
inline PcaModel fit_pca(const Matrix& data, std::size_t d_q) {
  const std::size_t n = data.rows();
  const std::size_t d = data.cols();
  RELLAX_REQUIRE(n >= 2 && d >= 1, "fit_pca: need at least two vectors");
  RELLAX_REQUIRE(d_q >= 1, "fit_pca: d_q must be >= 1");
  PcaModel m;
  m.fitted_on = n;
  m.mean.assign(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) m.mean[j] += data(i, j);
  for (double& v : m.mean) v /= static_cast<double>(n);
  Matrix centered = data;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) centered(i, j) -= m.mean[j];

  SvdResult svd = right_svd(std::move(centered));
  const std::size_t rank = numerical_rank(svd.singular_values, n, d);
  if (d_q > rank)
    throw ContractError("fit_pca: d_q=" + std::to_string(d_q) + " exceeds data rank; achievable rank is " +
                        std::to_string(rank));
  m.components = Matrix(d_q, d);
  m.explained_variance.resize(d_q);
  for (std::size_t k = 0; k < d_q; ++k) {
    auto row = svd.right_vectors.row(k);
    std::size_t arg = 0;
    for (std::size_t j = 1; j < d; ++j)
      if (std::abs(row[j]) > std::abs(row[arg])) arg = j;
    const double sign = row[arg] < 0.0 ? -1.0 : 1.0;
    for (std::size_t j = 0; j < d; ++j) m.components(k, j) = sign * row[j];
    m.explained_variance[k] = svd.singular_values[k] * svd.singular_values[k] / static_cast<double>(n - 1);
  }
  return m;
}

inline Vector pca_reduce(const PcaModel& m, std::span<const double> z) {
  if (z.size() != m.input_dim())
    throw ContractError("pca_reduce: vector has dim " + std::to_string(z.size()) + ", model expects " +
                        std::to_string(m.input_dim()));
  Vector centered(z.begin(), z.end());
  for (std::size_t j = 0; j < centered.size(); ++j) centered[j] -= m.mean[j];
  return matvec(m.components, centered);
}

inline Vector pca_reconstruct(const PcaModel& m, std::span<const double> q) {
  Vector z = matvec_t(m.components, q);
  for (std::size_t j = 0; j < z.size(); ++j) z[j] += m.mean[j];
  return z;
}

inline void save_pca(std::ostream& out, const PcaModel& m) {
  out << "# rellax-pca v1\n";
  out << "fitted_on " << m.fitted_on << "\n";
  out << "dims " << m.input_dim() << " " << m.output_dim() << "\n";
  out << "mean";
  for (double v : m.mean) out << ' ' << format_double(v);
  out << "\n";
  for (std::size_t k = 0; k < m.output_dim(); ++k) {
    out << "component " << format_double(m.explained_variance[k]);
    for (double v : m.components.row(k)) out << ' ' << format_double(v);
    out << "\n";
  }
}

inline PcaModel load_pca(std::istream& in) {
  PcaModel m;
  std::string line;
  std::size_t dz = 0, dq = 0, seen = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "fitted_on") {
      ls >> m.fitted_on;
    } else if (key == "dims") {
      ls >> dz >> dq;
      m.components = Matrix(dq, dz);
      m.explained_variance.assign(dq, 0.0);
    } else if (key == "mean") {
      m.mean.assign(dz, 0.0);
      for (auto& v : m.mean)
        if (!(ls >> v)) throw LoadError("pca file: short mean row");
    } else if (key == "component") {
      if (seen >= dq) throw LoadError("pca file: too many components");
      ls >> m.explained_variance[seen];
      for (std::size_t j = 0; j < dz; ++j)
        if (!(ls >> m.components(seen, j))) throw LoadError("pca file: short component row");
      ++seen;
    } else {
      throw LoadError("pca file: unknown record '" + key + "'");
    }
  }
  if (seen != dq || m.mean.size() != dz) throw LoadError("pca file: incomplete model");
  return m;
}

// ---------------------------------------------------------------------------
// Encoders. An encoder exposes `Vector encode(const Item&) const`.

// Looks vectors up from an imported table ("item_id<TAB>v1,v2,...").
class ImportedVectorEncoder {
 public:
  explicit ImportedVectorEncoder(std::map<std::int64_t, Vector> vectors) : vectors_(std::move(vectors)) {
    for (const auto& [id, v] : vectors_) {
      if (dim_ == 0) dim_ = v.size();
      RELLAX_REQUIRE(v.size() == dim_, "imported vectors: inconsistent dimension at item " + std::to_string(id));
    }
  }

  static ImportedVectorEncoder read(std::istream& in) {
    std::map<std::int64_t, Vector> table;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty() || line[0] == '#') continue;
      const auto tab = line.find('\t');
      std::int64_t id = 0;
      if (tab == std::string::npos || !detail::parse_number(line.substr(0, tab), id))
        throw LoadError("vector file line " + std::to_string(lineno) + ": expected item_id<TAB>values");
      Vector v;
      for (const auto& tok : detail::split_on(std::string_view(line).substr(tab + 1), ",")) {
        double x = 0.0;
        if (!detail::parse_number(tok, x))
          throw LoadError("vector file line " + std::to_string(lineno) + ": bad value '" + tok + "'");
        v.push_back(x);
      }
      if (table.contains(id))
        throw LoadError("vector file line " + std::to_string(lineno) + ": duplicate item " + std::to_string(id));
      table.emplace(id, std::move(v));
    }
    return ImportedVectorEncoder(std::move(table));
  }

  std::size_t dim() const { return dim_; }

  Vector encode(const Item& item) const {
    auto it = vectors_.find(item.id);
    if (it == vectors_.end())
      throw ContractError("imported vectors: no vector for item id " + std::to_string(item.id));
    return it->second;
  }

 private:
  std::map<std::int64_t, Vector> vectors_;
  std::size_t dim_ = 0;
};

template <class Encoder>
Vector encode_item(const Item& item, const Encoder& encoder) {
  return encoder.encode(item);
}

inline void write_vector_file(std::ostream& out, const std::vector<std::int64_t>& ids, const Matrix& rows) {
  for (std::size_t i = 0; i < ids.size(); ++i) {
    out << ids[i] << '\t';
    for (std::size_t j = 0; j < rows.cols(); ++j) out << (j ? "," : "") << format_double(rows(i, j));
    out << '\n';
  }
}

// Reduced vectors for every catalog item, plus the fitted PCA.
struct SemanticIndex {
  std::vector<std::int64_t> ids;
  std::map<std::int64_t, std::size_t> row_of;
  Matrix raw;
  Matrix reduced;
  PcaModel pca;

  std::span<const double> vector(std::int64_t item_id) const {
    auto it = row_of.find(item_id);
    if (it == row_of.end()) throw ContractError("semantic index: no vector for item " + std::to_string(item_id));
    return reduced.row(it->second);
  }
};

// PCA is fitted over the whole catalog. d_q is capped by d_z and data rank.
template <class Encoder>
SemanticIndex build_semantic_index(const Catalog& catalog, const Encoder& encoder, std::size_t d_q = 32) {
  SemanticIndex idx;
  std::vector<Vector> raws;
  for (const auto& [id, item] : catalog.items) {
    idx.row_of[id] = idx.ids.size();
    idx.ids.push_back(id);
    raws.push_back(encode_item(item, encoder));
  }
  RELLAX_REQUIRE(!raws.empty(), "semantic index: empty catalog");
  const std::size_t dz = raws[0].size();
  idx.raw = Matrix(raws.size(), dz);
  for (std::size_t i = 0; i < raws.size(); ++i) {
    RELLAX_REQUIRE(raws[i].size() == dz, "semantic index: encoder changed dimension");
    std::copy(raws[i].begin(), raws[i].end(), idx.raw.row(i).begin());
  }
  const SvdResult probe = [&] {
    Matrix c = idx.raw;
    Vector mean(dz, 0.0);
    for (std::size_t i = 0; i < c.rows(); ++i)
      for (std::size_t j = 0; j < dz; ++j) mean[j] += c(i, j) / static_cast<double>(c.rows());
    for (std::size_t i = 0; i < c.rows(); ++i)
      for (std::size_t j = 0; j < dz; ++j) c(i, j) -= mean[j];
    return right_svd(std::move(c));
  }();
  const std::size_t rank = numerical_rank(probe.singular_values, idx.raw.rows(), dz);
  idx.pca = fit_pca(idx.raw, std::min({d_q, dz, rank}));
  idx.reduced = Matrix(idx.raw.rows(), idx.pca.output_dim());
  for (std::size_t i = 0; i < idx.raw.rows(); ++i) {
    Vector q = pca_reduce(idx.pca, idx.raw.row(i));
    std::copy(q.begin(), q.end(), idx.reduced.row(i).begin());
  }
  return idx;
}

// ---------------------------------------------------------------------------
// Retrieval

// Positions (ascending, i.e. chronological) of the K history entries most
// cosine-similar to the target. Ties go to the later position.
inline std::vector<std::size_t> retrieve_top_k(std::span<const HistoryEntry> history, std::int64_t target_id,
                                               std::size_t k, const SemanticIndex& index) {
  if (history.empty()) throw ContractError("retrieve_top_k: empty history");
  RELLAX_REQUIRE(k >= 1, "retrieve_top_k: K must be >= 1");
  std::vector<std::size_t> pos(history.size());
  std::iota(pos.begin(), pos.end(), 0);
  if (k >= history.size()) return pos;
  const auto target = index.vector(target_id);
  Vector sim(history.size());
  for (std::size_t i = 0; i < history.size(); ++i)
    sim[i] = cosine_similarity(index.vector(history[i].item_id), target);
  std::partial_sort(pos.begin(), pos.begin() + static_cast<std::ptrdiff_t>(k), pos.end(),
                    [&](std::size_t a, std::size_t b) { return sim[a] != sim[b] ? sim[a] > sim[b] : a > b; });
  pos.resize(k);
  std::sort(pos.begin(), pos.end());
  return pos;
}

enum class BehaviorMode { recent, retrieved };

inline BehaviorMode parse_behavior_mode(const std::string& s) {
  if (s == "recent") return BehaviorMode::recent;
  if (s == "retrieved" || s == "relevant") return BehaviorMode::retrieved;
  throw ContractError("unknown behavior mode '" + s + "'");
}

// The K behaviors shown to the language model, as ascending positions.
inline std::vector<std::size_t> select_behaviors(std::span<const HistoryEntry> history, std::int64_t target_id,
                                                 BehaviorMode mode, std::size_t k, const SemanticIndex* index) {
  if (history.empty()) throw ContractError("select_behaviors: empty history");
  RELLAX_REQUIRE(k >= 1, "select_behaviors: K must be >= 1");
  if (mode == BehaviorMode::retrieved) {
    RELLAX_REQUIRE(index != nullptr, "select_behaviors: retrieved mode needs semantic vectors");
    return retrieve_top_k(history, target_id, k, *index);
  }
  const std::size_t n = std::min(k, history.size());
  std::vector<std::size_t> pos(n);
  std::iota(pos.begin(), pos.end(), history.size() - n);
  return pos;
}

// ---------------------------------------------------------------------------
// Heterogeneity

inline std::size_t heterogeneity_score(std::span<const Item* const> sequence, std::string_view field = "genres") {
  std::set<std::string> seen;
  for (const Item* item : sequence) {
    const Attribute* a = item->find(field);
    if (!a)
      throw ContractError("heterogeneity: item " + std::to_string(item->id) + " (" + item->title + ") has no '" +
                          std::string(field) + "' field");
    seen.insert(a->values.begin(), a->values.end());
  }
  return seen.size();
}

inline std::size_t heterogeneity_score(std::span<const Item> sequence, std::string_view field = "genres") {
  std::vector<const Item*> ptrs;
  for (const auto& it : sequence) ptrs.push_back(&it);
  return heterogeneity_score(std::span<const Item* const>(ptrs), field);
}

struct HeterogeneityReport {
  std::size_t k = 0;
  BehaviorMode mode = BehaviorMode::recent;
  std::string field;
  std::size_t samples = 0;
  double mean_score = 0.0;
};

inline HeterogeneityReport mean_heterogeneity(const std::vector<InteractionSample>& samples, const Catalog& catalog,
                                              BehaviorMode mode, std::size_t k, const SemanticIndex* index,
                                              std::string_view field = "genres") {
  HeterogeneityReport r{k, mode, std::string(field), 0, 0.0};
  double total = 0.0;
  for (const auto& s : samples) {
    if (s.history.empty()) continue;
    const auto hist = s.history.view();
    std::vector<const Item*> seq;
    for (std::size_t p : select_behaviors(hist, s.target_id, mode, k, index)) seq.push_back(&catalog.item(hist[p].item_id));
    total += static_cast<double>(heterogeneity_score(std::span<const Item* const>(seq), field));
    ++r.samples;
  }
  if (r.samples) r.mean_score = total / static_cast<double>(r.samples);
  return r;
}

}  // namespace rellax
