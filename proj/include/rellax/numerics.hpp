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

// Dense linear algebra, a two-layer perceptron, AdamW and a finite-difference
// gradient checker. Everything is 64-bit floating point and row-major.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <map>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "rellax/error.hpp"

namespace rellax {

using Vector = std::vector<double>;

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    RELLAX_REQUIRE(data_.size() == rows_ * cols_, "Matrix: data length != rows*cols");
  }
  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ ? rows.begin()->size() : 0;
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      RELLAX_REQUIRE(r.size() == cols_, "Matrix: ragged initializer");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

// C = A * B
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  RELLAX_REQUIRE(a.cols() == b.rows(), "matmul: inner dimensions differ");
  Matrix c(a.rows(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* ci = c.data() + i * n;
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const double* bk = b.data() + k * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aik * bk[j];
    }
  }
  return c;
}

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

// C = A * B^T
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  RELLAX_REQUIRE(a.cols() == b.cols(), "matmul_nt: inner dimensions differ");
  return matmul(a, transpose(b));
}

// C = A^T * B
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  RELLAX_REQUIRE(a.rows() == b.rows(), "matmul_tn: inner dimensions differ");
  Matrix c(a.cols(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* bi = b.data() + i * n;
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      double* ck = c.data() + k * n;
      for (std::size_t j = 0; j < n; ++j) ck[j] += aik * bi[j];
    }
  }
  return c;
}

// Accumulating variant: C += A^T * B.
inline void add_matmul_tn(Matrix& c, const Matrix& a, const Matrix& b) {
  RELLAX_REQUIRE(c.rows() == a.cols() && c.cols() == b.cols() && a.rows() == b.rows(),
                 "add_matmul_tn: shape mismatch");
  const std::size_t n = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* bi = b.data() + i * n;
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      double* ck = c.data() + k * n;
      for (std::size_t j = 0; j < n; ++j) ck[j] += aik * bi[j];
    }
  }
}

inline Vector matvec(const Matrix& a, std::span<const double> x) {
  RELLAX_REQUIRE(a.cols() == x.size(), "matvec: dimension mismatch");
  Vector y(a.rows(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double s = 0.0;
    const double* ai = a.data() + i * a.cols();
    for (std::size_t j = 0; j < x.size(); ++j) s += ai[j] * x[j];
    y[i] = s;
  }
  return y;
}

// y = A^T x
inline Vector matvec_t(const Matrix& a, std::span<const double> x) {
  RELLAX_REQUIRE(a.rows() == x.size(), "matvec_t: dimension mismatch");
  Vector y(a.cols(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double xi = x[i];
    const double* ai = a.data() + i * a.cols();
    for (std::size_t j = 0; j < y.size(); ++j) y[j] += xi * ai[j];
  }
  return y;
}

inline Matrix operator+(const Matrix& a, const Matrix& b) {
  RELLAX_REQUIRE(a.rows() == b.rows() && a.cols() == b.cols(), "matrix add: shape mismatch");
  Matrix c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c.data()[i] += b.data()[i];
  return c;
}

inline Matrix operator-(const Matrix& a, const Matrix& b) {
  RELLAX_REQUIRE(a.rows() == b.rows() && a.cols() == b.cols(), "matrix sub: shape mismatch");
  Matrix c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c.data()[i] -= b.data()[i];
  return c;
}

inline Matrix operator*(double s, const Matrix& a) {
  Matrix c = a;
  for (double& v : c.values()) v *= s;
  return c;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  RELLAX_REQUIRE(a.rows() == b.rows() && a.cols() == b.cols(), "max_abs_diff: shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  RELLAX_REQUIRE(a.size() == b.size(), "max_abs_diff: length mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  RELLAX_REQUIRE(a.size() == b.size(), "dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// In-place numerically stable softmax.
inline void softmax_inplace(std::span<double> v) {
  if (v.empty()) return;
  const double mx = *std::max_element(v.begin(), v.end());
  double sum = 0.0;
  for (double& x : v) {
    x = std::exp(x - mx);
    sum += x;
  }
  for (double& x : v) x /= sum;
}

inline double log_sum_exp(std::span<const double> v) {
  const double mx = *std::max_element(v.begin(), v.end());
  double sum = 0.0;
  for (double x : v) sum += std::exp(x - mx);
  return mx + std::log(sum);
}

// ---------------------------------------------------------------------------
// Seeded randomness. Engine output and the conversions below are fully
// specified, so streams are identical across standard libraries.

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(splitmix64(seed)) {}

  // Independent child stream keyed by name; does not advance this stream.
  Rng split(std::string_view name) const { return Rng(splitmix64(seed_ ^ fnv1a(name))); }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next() { return engine_(); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double t = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(t);
    has_spare_ = true;
    return r * std::cos(t);
  }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    RELLAX_REQUIRE(n > 0, "Rng::below: n must be positive");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x = engine_();
    while (x >= limit) x = engine_();
    return x % n;
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

inline Matrix random_normal(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  Matrix m(rows, cols);
  for (double& v : m.values()) v = stddev * rng.normal();
  return m;
}

inline Vector random_normal(std::size_t n, double stddev, Rng& rng) {
  Vector v(n);
  for (double& x : v) x = stddev * rng.normal();
  return v;
}

// ---------------------------------------------------------------------------
// Two-layer perceptron: y = w2 * relu(w1 * x + b1) + b2.

struct Mlp2 {
  Matrix w1;  // hidden x input
  Vector b1;
  Matrix w2;  // output x hidden
  Vector b2;

  std::size_t input_dim() const { return w1.cols(); }
  std::size_t hidden_dim() const { return w1.rows(); }
  std::size_t output_dim() const { return w2.rows(); }

  static Mlp2 zeros(std::size_t in, std::size_t hidden, std::size_t out) {
    return Mlp2{Matrix(hidden, in), Vector(hidden, 0.0), Matrix(out, hidden), Vector(out, 0.0)};
  }

  // He-style first layer; the last layer gets its own scale so callers can
  // start a projector near zero.
  static Mlp2 random(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng,
                     double out_stddev = -1.0) {
    Mlp2 m = zeros(in, hidden, out);
    m.w1 = random_normal(hidden, in, std::sqrt(2.0 / static_cast<double>(in)), rng);
    const double s2 = out_stddev >= 0 ? out_stddev : std::sqrt(1.0 / static_cast<double>(hidden));
    m.w2 = random_normal(out, hidden, s2, rng);
    return m;
  }
};

struct Mlp2Trace {
  Vector input;
  Vector hidden_pre;
};

inline Vector mlp2_forward(const Mlp2& m, std::span<const double> x, Mlp2Trace* trace = nullptr) {
  RELLAX_REQUIRE(m.w1.rows() == m.b1.size() && m.w2.cols() == m.w1.rows() &&
                     m.w2.rows() == m.b2.size(),
                 "mlp2: inconsistent layer dimensions");
  if (x.size() != m.input_dim())
    throw ContractError("mlp2_forward: input has dim " + std::to_string(x.size()) +
                        ", expected " + std::to_string(m.input_dim()));
  Vector pre = matvec(m.w1, x);
  for (std::size_t i = 0; i < pre.size(); ++i) pre[i] += m.b1[i];
  Vector act(pre.size());
  for (std::size_t i = 0; i < pre.size(); ++i) act[i] = pre[i] > 0.0 ? pre[i] : 0.0;
  Vector y = matvec(m.w2, act);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += m.b2[i];
  if (trace) {
    trace->input.assign(x.begin(), x.end());
    trace->hidden_pre = std::move(pre);
  }
  return y;
}

// Accumulates parameter gradients into `grad`; returns dL/dx.
inline Vector mlp2_backward(const Mlp2& m, const Mlp2Trace& trace, std::span<const double> dy,
                            Mlp2& grad) {
  RELLAX_REQUIRE(dy.size() == m.output_dim(), "mlp2_backward: gradient dim mismatch");
  const std::size_t h = m.hidden_dim();
  Vector act(h);
  for (std::size_t i = 0; i < h; ++i) act[i] = trace.hidden_pre[i] > 0.0 ? trace.hidden_pre[i] : 0.0;
  for (std::size_t o = 0; o < dy.size(); ++o) {
    grad.b2[o] += dy[o];
    double* g = grad.w2.data() + o * h;
    for (std::size_t i = 0; i < h; ++i) g[i] += dy[o] * act[i];
  }
  Vector dpre = matvec_t(m.w2, dy);
  for (std::size_t i = 0; i < h; ++i)
    if (trace.hidden_pre[i] <= 0.0) dpre[i] = 0.0;
  const std::size_t in = m.input_dim();
  for (std::size_t i = 0; i < h; ++i) {
    if (dpre[i] == 0.0) continue;
    grad.b1[i] += dpre[i];
    double* g = grad.w1.data() + i * in;
    for (std::size_t j = 0; j < in; ++j) g[j] += dpre[i] * trace.input[j];
  }
  return matvec_t(m.w1, dpre);
}

// ---------------------------------------------------------------------------
// Named parameter views shared by the optimizer and the gradient checker.

struct ParamRef {
  std::string name;
  std::span<double> value;
  std::span<double> grad;
  bool decay = true;
};

using ParamList = std::vector<ParamRef>;

inline void append_params(ParamList& out, const std::string& prefix, Mlp2& value, Mlp2& grad,
                          bool decay = true) {
  out.push_back({prefix + ".w1", value.w1.values(), grad.w1.values(), decay});
  out.push_back({prefix + ".b1", value.b1, grad.b1, false});
  out.push_back({prefix + ".w2", value.w2.values(), grad.w2.values(), decay});
  out.push_back({prefix + ".b2", value.b2, grad.b2, false});
}

inline void zero_grads(const ParamList& params) {
  for (const auto& p : params) std::fill(p.grad.begin(), p.grad.end(), 0.0);
}

inline std::size_t count_entries(const ParamList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.value.size();
  return n;
}

struct AdamWConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;
};

// Decoupled-weight-decay Adam. Moment buffers are keyed by parameter name.
class AdamW {
 public:
  explicit AdamW(AdamWConfig config = {}) : config_(config) {}

  const AdamWConfig& config() const { return config_; }
  std::int64_t step_count() const { return step_; }

  void step(const ParamList& params) { step(params, config_.learning_rate); }

  void step(const ParamList& params, double learning_rate) {
    for (const auto& p : params) {
      RELLAX_REQUIRE(p.value.size() == p.grad.size(), "adamw: grad shape differs for " + p.name);
      for (double g : p.grad)
        if (!std::isfinite(g)) throw TrainingError("adamw: non-finite gradient in " + p.name);
    }
    ++step_;
    const double t = static_cast<double>(step_);
    const double c1 = 1.0 - std::pow(config_.beta1, t);
    const double c2 = 1.0 - std::pow(config_.beta2, t);
    for (const auto& p : params) {
      auto& mom = moments_[p.name];
      if (mom.first.size() != p.value.size()) {
        RELLAX_REQUIRE(mom.first.empty(), "adamw: parameter " + p.name + " changed shape");
        mom.first.assign(p.value.size(), 0.0);
        mom.second.assign(p.value.size(), 0.0);
      }
      const double decay = p.decay ? config_.weight_decay : 0.0;
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = p.grad[i];
        double& m = mom.first[i];
        double& v = mom.second[i];
        m = config_.beta1 * m + (1.0 - config_.beta1) * g;
        v = config_.beta2 * v + (1.0 - config_.beta2) * g * g;
        const double mhat = m / c1;
        const double vhat = v / c2;
        p.value[i] -= learning_rate * decay * p.value[i];
        p.value[i] -= learning_rate * mhat / (std::sqrt(vhat) + config_.epsilon);
      }
    }
  }

 private:
  AdamWConfig config_;
  std::int64_t step_ = 0;
  std::map<std::string, std::pair<Vector, Vector>> moments_;
};

// ---------------------------------------------------------------------------
// Finite-difference gradient verification.

struct GradientReport {
  double max_relative_error = 0.0;
  double max_absolute_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  std::size_t entries_checked = 0;
  bool passed = false;
};

// The checker zeroes every grad span, then calls `loss(true)`, which must
// accumulate dL/dparam into them. `loss(false)` only evaluates.
// Relative error is |a - n| / max(|a|, |n|, floor).
inline GradientReport check_gradients(const std::function<double(bool)>& loss,
                                      const ParamList& params, double tolerance,
                                      double step = 1e-5, double floor = 1e-6) {
  const double l0 = loss(false);
  const double l1 = loss(false);
  if (!(l0 == l1) || !std::isfinite(l0))
    throw ContractError("check_gradients: loss is non-deterministic or non-finite");

  zero_grads(params);
  loss(true);
  std::vector<Vector> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) analytic.emplace_back(p.grad.begin(), p.grad.end());

  GradientReport report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    const auto& p = params[pi];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double saved = p.value[i];
      p.value[i] = saved + step;
      const double up = loss(false);
      p.value[i] = saved - step;
      const double down = loss(false);
      p.value[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[pi][i];
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), floor});
      report.max_absolute_error = std::max(report.max_absolute_error, abs_err);
      if (rel > report.max_relative_error || report.entries_checked == 0) {
        report.max_relative_error = rel;
        report.worst_parameter = p.name;
        report.worst_index = i;
      }
      ++report.entries_checked;
    }
  }
  report.passed = report.max_relative_error < tolerance;
  return report;
}

}  // namespace rellax
