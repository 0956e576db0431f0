// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include <gtest/gtest.h>

#include "rellax/numerics.hpp"

namespace rellax {
namespace {

// Scalar-loop evaluation of w2 * relu(w1 * x + b1) + b2, written without
// any of the library's matrix helpers.
Vector loop_mlp(const Mlp2& m, const Vector& x) {
  Vector hid(m.w1.rows());
  for (std::size_t i = 0; i < m.w1.rows(); ++i) {
    double s = m.b1[i];
    for (std::size_t j = 0; j < m.w1.cols(); ++j) s += m.w1(i, j) * x[j];
    hid[i] = s > 0 ? s : 0;
  }
  Vector y(m.w2.rows());
  for (std::size_t i = 0; i < m.w2.rows(); ++i) {
    double s = m.b2[i];
    for (std::size_t j = 0; j < m.w2.cols(); ++j) s += m.w2(i, j) * hid[j];
    y[i] = s;
  }
  return y;
}

TEST(Mlp2, ZeroNetworkMapsToZero) {
  const Mlp2 m = Mlp2::zeros(3, 5, 2);
  EXPECT_EQ(mlp2_forward(m, Vector{1.0, -4.0, 2.5}), (Vector{0.0, 0.0}));
}

TEST(Mlp2, IdentityLayersClipNegatives) {
  Mlp2 m{Matrix::identity(2), {0, 0}, Matrix::identity(2), {0, 0}};
  EXPECT_EQ(mlp2_forward(m, Vector{1.0, -2.0}), (Vector{1.0, 0.0}));
}

TEST(Mlp2, MatchesScalarLoopOnRandomNets) {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t in = 1 + rng.below(8), hid = 1 + rng.below(8), out = 1 + rng.below(8);
    Mlp2 m = Mlp2::random(in, hid, out, rng);
    m.b1 = random_normal(hid, 0.5, rng);
    m.b2 = random_normal(out, 0.5, rng);
    const Vector x = random_normal(in, 1.0, rng);
    EXPECT_LT(max_abs_diff(mlp2_forward(m, x), loop_mlp(m, x)), 1e-12);
  }
}

TEST(Mlp2, RejectsWrongInputWidth) {
  Rng rng(1);
  const Mlp2 m = Mlp2::random(3, 4, 2, rng);
  EXPECT_THROW(mlp2_forward(m, Vector{1.0, 2.0}), ContractError);
}

TEST(Mlp2, BackwardPassesGradientCheck) {
  Rng rng(5);
  Mlp2 m = Mlp2::random(4, 6, 3, rng);
  m.b1 = random_normal(6, 0.3, rng);
  Mlp2 g = Mlp2::zeros(4, 6, 3);
  const Vector x = random_normal(4, 1.0, rng);
  const Vector target = random_normal(3, 1.0, rng);
  ParamList params;
  append_params(params, "mlp", m, g);
  auto loss = [&](bool with_grad) {
    Mlp2Trace tr;
    const Vector y = mlp2_forward(m, x, &tr);
    Vector dy(3);
    double l = 0;
    for (std::size_t i = 0; i < 3; ++i) {
      l += 0.5 * (y[i] - target[i]) * (y[i] - target[i]);
      dy[i] = y[i] - target[i];
    }
    if (with_grad) mlp2_backward(m, tr, dy, g);
    return l;
  };
  const auto rep = check_gradients(loss, params, 1e-4);
  EXPECT_TRUE(rep.passed) << rep.worst_parameter << "[" << rep.worst_index << "] " << rep.max_relative_error;
}

TEST(Matrix, ProductIsAssociative) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t a = 1 + rng.below(64), b = 1 + rng.below(64), c = 1 + rng.below(64), d = 1 + rng.below(64);
    const Matrix A = random_normal(a, b, 1.0, rng), B = random_normal(b, c, 1.0, rng), C = random_normal(c, d, 1.0, rng);
    EXPECT_LT(max_abs_diff(matmul(matmul(A, B), C), matmul(A, matmul(B, C))), 1e-9);
  }
}

TEST(Matrix, TransposedProductsAgreeWithExplicitTranspose) {
  Rng rng(4);
  const Matrix A = random_normal(5, 7, 1.0, rng), B = random_normal(6, 7, 1.0, rng), C = random_normal(5, 3, 1.0, rng);
  EXPECT_LT(max_abs_diff(matmul_nt(A, B), matmul(A, transpose(B))), 1e-13);
  EXPECT_LT(max_abs_diff(matmul_tn(A, C), matmul(transpose(A), C)), 1e-13);
  Matrix acc(7, 3);
  add_matmul_tn(acc, A, C);
  add_matmul_tn(acc, A, C);
  EXPECT_LT(max_abs_diff(acc, 2.0 * matmul(transpose(A), C)), 1e-12);
}

TEST(Matrix, ShapeMismatchIsAContractError) {
  EXPECT_THROW(matmul(Matrix(2, 3), Matrix(2, 3)), ContractError);
  EXPECT_THROW(Matrix(2, 2) + Matrix(2, 3), ContractError);
}

TEST(Softmax, IsShiftInvariantAndNormalized) {
  Vector a{1.0, 2.0, -3.0, 0.5};
  Vector b{1001.0, 1002.0, 997.0, 1000.5};
  softmax_inplace(a);
  softmax_inplace(b);
  double s = 0;
  for (double v : a) s += v;
  EXPECT_NEAR(s, 1.0, 1e-15);
  EXPECT_LT(max_abs_diff(a, b), 1e-15);
  EXPECT_NEAR(log_sum_exp(Vector{0.0, 0.0}), std::log(2.0), 1e-15);
}

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next(), b.next());
}

TEST(Rng, SplitIsIndependentOfParentPosition) {
  Rng a(42);
  const Rng before = a.split("x");
  a.next();
  Rng c1 = before, c2 = a.split("x");
  EXPECT_EQ(c1.next(), c2.next());
  EXPECT_NE(Rng(42).split("x").next(), Rng(42).split("y").next());
}

TEST(Rng, BelowStaysInRangeAndCoversIt) {
  Rng r(9);
  std::vector<int> seen(7, 0);
  for (int i = 0; i < 7000; ++i) ++seen[r.below(7)];
  for (int c : seen) EXPECT_GT(c, 850);
}

TEST(Rng, NormalHasUnitMoments) {
  Rng r(10);
  double s = 0, s2 = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    s += x;
    s2 += x * x;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(s2 / n, 1.0, 0.02);
}

TEST(AdamW, ZeroGradientWithoutDecayIsIdentity) {
  Vector w{0.3, -1.2, 4.0}, g{0, 0, 0};
  const Vector before = w;
  AdamW opt(AdamWConfig{0.1, 0.9, 0.999, 1e-8, 0.0});
  const ParamList ps{{"w", w, g, true}};
  for (int i = 0; i < 5; ++i) opt.step(ps);
  EXPECT_EQ(w, before);
  EXPECT_EQ(opt.step_count(), 5);
}

TEST(AdamW, DegenerateBetasGiveSignStep) {
  // With beta1 = beta2 = 0 the update is lr * g / (|g| + eps).
  Vector w{2.0}, g{1.0};
  AdamW opt(AdamWConfig{0.1, 0.0, 0.0, 1e-8, 0.0});
  opt.step({{"w", w, g, true}});
  EXPECT_NEAR(w[0], 2.0 - 0.1 / (1.0 + 1e-8), 1e-15);
  EXPECT_NEAR(2.0 - w[0], 0.1, 1e-8);
}

TEST(AdamW, DecoupledDecayShrinksByLrTimesLambda) {
  Vector w{3.0}, g{0.0}, e{3.0}, ge{0.0};
  AdamW opt(AdamWConfig{0.01, 0.9, 0.999, 1e-8, 0.5});
  opt.step({{"w", w, g, true}, {"emb", e, ge, false}});
  EXPECT_DOUBLE_EQ(w[0], 3.0 - 0.01 * 0.5 * 3.0);
  EXPECT_EQ(e[0], 3.0);
}

TEST(AdamW, NonFiniteGradientNamesTheParameter) {
  Vector w{1.0}, g{std::nan("")};
  AdamW opt;
  try {
    opt.step({{"layer0.query.B", w, g, true}});
    FAIL() << "expected a TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("layer0.query.B"), std::string::npos);
  }
  EXPECT_EQ(w[0], 1.0);
}

TEST(GradientCheck, QuadraticIsExact) {
  Vector x{3.0}, g{0.0};
  const ParamList ps{{"x", x, g, true}};
  const auto rep = check_gradients(
      [&](bool with_grad) {
        if (with_grad) g[0] += 2 * x[0];
        return x[0] * x[0];
      },
      ps, 1e-8);
  EXPECT_TRUE(rep.passed);
  EXPECT_NEAR(g[0], 6.0, 1e-12);
  EXPECT_LT(rep.max_absolute_error, 1e-8);
}

TEST(GradientCheck, FlagsAWrongGradient) {
  Vector x{3.0}, g{0.0};
  const auto rep = check_gradients(
      [&](bool with_grad) {
        if (with_grad) g[0] += 5.0;
        return x[0] * x[0];
      },
      {{"x", x, g, true}}, 1e-4);
  EXPECT_FALSE(rep.passed);
  EXPECT_EQ(rep.worst_parameter, "x");
}

TEST(GradientCheck, RejectsNonDeterministicLoss) {
  Vector x{1.0}, g{0.0};
  int calls = 0;
  EXPECT_THROW(check_gradients([&](bool) { return x[0] + 1e-3 * ++calls; }, {{"x", x, g, true}}, 1e-4),
               ContractError);
}

}  // namespace
}  // namespace rellax
