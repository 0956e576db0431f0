// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "rellax/adapter.hpp"

namespace rellax {
namespace {

// Independent oracle: accumulate w * outer(B column i, A row j) one entry at a time.
Matrix rank_one_sum(const Matrix& a, const Matrix& b, const std::vector<std::tuple<std::size_t, std::size_t, double>>& terms) {
  Matrix out(b.rows(), a.cols());
  for (const auto& [i, j, w] : terms)
    for (std::size_t p = 0; p < b.rows(); ++p)
      for (std::size_t q = 0; q < a.cols(); ++q) out(p, q) += w * b(p, i) * a(j, q);
  return out;
}

TEST(InteractionMatrix, IdentityIsTheIdentity) {
  EXPECT_EQ(make_interaction_matrix(InteractionSource::identity(), 4, nullptr), Matrix::identity(4));
}

TEST(InteractionMatrix, BlockDiagonalRepeatsAlphas) {
  const Matrix w = make_interaction_matrix(InteractionSource::block_diagonal({0.5, -2.0}), 4, nullptr);
  const Matrix expected{{0.5, 0, 0, 0}, {0, 0.5, 0, 0}, {0, 0, -2.0, 0}, {0, 0, 0, -2.0}};
  EXPECT_EQ(w, expected);
}

TEST(InteractionMatrix, BlocksMustDivideRank) {
  EXPECT_THROW(make_interaction_matrix(InteractionSource::block_diagonal({1, 2, 3}), 4, nullptr), ContractError);
}

TEST(InteractionMatrix, ProjectedReshapesRowMajor) {
  Mlp2 p = Mlp2::zeros(2, 3, 4);
  p.b2 = {1, 2, 3, 4};
  const Vector h{0.3, -0.7};
  const Matrix w = make_interaction_matrix(InteractionSource::projected(p), 2, &h);
  EXPECT_EQ(w, (Matrix{{1, 2}, {3, 4}}));
  EXPECT_EQ(make_interaction_matrix(InteractionSource::projected(Mlp2::zeros(2, 3, 4)), 2, &h), Matrix(2, 2));
}

TEST(InteractionMatrix, ProjectedErrors) {
  const Vector h{0.3, -0.7};
  EXPECT_THROW(make_interaction_matrix(InteractionSource::projected(Mlp2::zeros(2, 3, 4)), 2, nullptr), ContractError);
  EXPECT_THROW(make_interaction_matrix(InteractionSource::projected(Mlp2::zeros(2, 3, 5)), 2, &h), ContractError);
}

TEST(CfLora, CompositeMatchesDecomposedOnRandomInstances) {
  Rng rng(11);
  const std::size_t ranks[] = {1, 2, 4, 8};
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t r = ranks[rng.below(4)];
    const std::size_t d_down = r + rng.below(65 - r), d_up = r + rng.below(65 - r);
    const Matrix a = random_normal(r, d_down, 1.0, rng), b = random_normal(d_up, r, 1.0, rng);
    const Matrix w = random_normal(r, r, 1.0, rng);
    ASSERT_LT(max_abs_diff(cflora_delta_composite(a, b, w), cflora_delta_decomposed(a, b, w)), 1e-10);
  }
}

TEST(CfLora, SmallCaseAgainstDoubleLoop) {
  Rng rng(2);
  const Matrix a = random_normal(2, 3, 1.0, rng), b = random_normal(3, 2, 1.0, rng), w = random_normal(2, 2, 1.0, rng);
  std::vector<std::tuple<std::size_t, std::size_t, double>> terms;
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j) terms.emplace_back(i, j, w(i, j));
  EXPECT_LT(max_abs_diff(cflora_delta_composite(a, b, w), rank_one_sum(a, b, terms)), 1e-12);
}

TEST(CfLora, IdentityWIsVanillaLora) {
  Rng rng(4);
  const Matrix a = random_normal(4, 10, 1.0, rng), b = random_normal(7, 4, 1.0, rng);
  const Matrix w = make_interaction_matrix(InteractionSource::identity(), 4, nullptr);
  std::vector<std::tuple<std::size_t, std::size_t, double>> terms;
  for (std::size_t j = 0; j < 4; ++j) terms.emplace_back(j, j, 1.0);
  EXPECT_LT(max_abs_diff(cflora_delta_composite(a, b, w), rank_one_sum(a, b, terms)), 1e-12);
  EXPECT_LT(max_abs_diff(cflora_delta_composite(a, b, w), matmul(b, a)), 1e-12);
}

TEST(CfLora, BlockDiagonalIsScaledLoraSets) {
  Rng rng(5);
  const Matrix a = random_normal(4, 6, 1.0, rng), b = random_normal(5, 4, 1.0, rng);
  const Vector alphas{0.7, -1.3};
  const Matrix w = make_interaction_matrix(InteractionSource::block_diagonal(alphas), 4, nullptr);
  std::vector<std::tuple<std::size_t, std::size_t, double>> terms;
  for (std::size_t j = 0; j < 4; ++j) terms.emplace_back(j, j, alphas[j / 2]);
  EXPECT_LT(max_abs_diff(cflora_delta_composite(a, b, w), rank_one_sum(a, b, terms)), 1e-12);
  EXPECT_LT(max_abs_diff(cflora_delta_decomposed(a, b, w), rank_one_sum(a, b, terms)), 1e-12);
}

TEST(CfLora, RankOneIsScaledOuterProduct) {
  const Matrix a{{1, 2, 3}}, b{{2}, {-1}};
  EXPECT_EQ(cflora_delta_decomposed(a, b, Matrix{{0.5}}), (Matrix{{1, 2, 3}, {-0.5, -1, -1.5}}));
}

TEST(CfLora, ZeroWAnnihilatesAndWIsLinear) {
  Rng rng(6);
  const Matrix a = random_normal(3, 8, 1.0, rng), b = random_normal(6, 3, 1.0, rng);
  EXPECT_EQ(cflora_delta_composite(a, b, Matrix(3, 3)), Matrix(6, 8));
  const Matrix w1 = random_normal(3, 3, 1.0, rng), w2 = random_normal(3, 3, 1.0, rng);
  const Matrix lhs = cflora_delta_composite(a, b, w1 + w2);
  const Matrix rhs = cflora_delta_composite(a, b, w1) + cflora_delta_composite(a, b, w2);
  EXPECT_LT(max_abs_diff(lhs, rhs), 1e-12);
}

TEST(CfLora, ShapeMismatchIsAnError) {
  EXPECT_THROW(cflora_delta_composite(Matrix(2, 3), Matrix(3, 2), Matrix(3, 3)), ContractError);
  EXPECT_THROW(cflora_delta_decomposed(Matrix(2, 3), Matrix(3, 3), Matrix(2, 2)), ContractError);
}

TEST(Adapter, FreshAdapterAddsNothing) {
  Rng rng(7);
  const auto ad = CfLoraAdapter::create(6, 5, 3, 6.0, InteractionSource::identity(), rng);
  EXPECT_EQ(ad.b, Matrix(5, 3));
  for (int t = 0; t < 20; ++t) {
    const Vector x = random_normal(6, 3.0, rng);
    EXPECT_EQ(adapter_apply(ad, random_normal(3, 3, 5.0, rng), x), Vector(5, 0.0));
  }
}

TEST(Adapter, ApplyEqualsScaledDeltaTimesX) {
  Rng rng(8);
  auto ad = CfLoraAdapter::create(9, 7, 4, 8.0, InteractionSource::identity(), rng);
  ad.b = random_normal(7, 4, 1.0, rng);
  EXPECT_DOUBLE_EQ(ad.scale(), 2.0);
  for (int t = 0; t < 20; ++t) {
    const Matrix w = random_normal(4, 4, 1.0, rng);
    const Vector x = random_normal(9, 1.0, rng);
    Vector expected = matvec(cflora_delta_composite(ad.a, ad.b, w), x);
    for (double& e : expected) e *= ad.scale();
    EXPECT_LT(max_abs_diff(adapter_apply(ad, w, x), expected), 1e-12);
    // The row-batched path agrees with the vector path.
    const Matrix xs(1, 9, x);
    EXPECT_LT(max_abs_diff(adapter_forward(ad, w, xs, nullptr).values(), expected), 1e-12);
  }
  EXPECT_THROW(adapter_apply(ad, Matrix::identity(4), Vector(8)), ContractError);
}

TEST(Adapter, RankBoundsAreEnforced) {
  Rng rng(1);
  EXPECT_THROW(CfLoraAdapter::create(3, 8, 4, 8.0, InteractionSource::identity(), rng), ContractError);
  EXPECT_THROW(CfLoraAdapter::create(3, 8, 0, 8.0, InteractionSource::identity(), rng), ContractError);
}

// Linear readout of the batched adapter output, differentiated through A, B
// and the W projector.
TEST(Adapter, GradientsThroughProjectedW) {
  Rng rng(9);
  Mlp2 proj = Mlp2::random(5, 6, 9, rng, 0.5);
  proj.b1 = random_normal(6, 0.3, rng);
  auto ad = CfLoraAdapter::create(4, 6, 3, 6.0, InteractionSource::projected(proj), rng);
  ad.b = random_normal(6, 3, 0.5, rng);
  auto grad = ad.zeros_like();
  const Vector h = random_normal(5, 1.0, rng);
  const Matrix x = random_normal(7, 4, 1.0, rng);
  const Matrix c = random_normal(7, 6, 1.0, rng);
  ParamList params;
  params.push_back({"A", ad.a.values(), grad.a.values(), true});
  params.push_back({"B", ad.b.values(), grad.b.values(), true});
  append_params(params, "projector", *ad.source.projector, *grad.source.projector);
  Matrix d_x_total(7, 4);
  auto loss = [&](bool with_grad) {
    InteractionTrace it;
    const Matrix w = make_interaction_matrix(ad.source, 3, &h, &it);
    AdapterTrace at;
    const Matrix y = adapter_forward(ad, w, x, &at);
    double l = 0;
    for (std::size_t i = 0; i < y.size(); ++i) l += c.data()[i] * y.data()[i] + 0.1 * y.data()[i] * y.data()[i];
    if (with_grad) {
      Matrix dy(7, 6);
      for (std::size_t i = 0; i < y.size(); ++i) dy.data()[i] = c.data()[i] + 0.2 * y.data()[i];
      Matrix d_w(3, 3);
      adapter_backward(ad, w, x, at, dy, grad, d_w, &d_x_total);
      interaction_backward(ad.source, it, d_w, grad.source);
    }
    return l;
  };
  const auto rep = check_gradients(loss, params, 1e-4);
  EXPECT_TRUE(rep.passed) << rep.worst_parameter << "[" << rep.worst_index << "] " << rep.max_relative_error;
  EXPECT_GT(rep.entries_checked, 100u);
}

TEST(Adapter, GatedBlockDiagonalGradient) {
  Rng rng(10);
  Mlp2 gate = Mlp2::random(3, 4, 2, rng, 0.5);
  gate.b1 = random_normal(4, 0.3, rng);
  auto ad = CfLoraAdapter::create(4, 4, 4, 8.0, InteractionSource::gated_block_diagonal(gate), rng);
  ad.b = random_normal(4, 4, 0.5, rng);
  auto grad = ad.zeros_like();
  const Vector h = random_normal(3, 1.0, rng);
  const Matrix x = random_normal(5, 4, 1.0, rng);
  ParamList params;
  append_params(params, "gate", *ad.source.projector, *grad.source.projector);
  auto loss = [&](bool with_grad) {
    InteractionTrace it;
    const Matrix w = make_interaction_matrix(ad.source, 4, &h, &it);
    AdapterTrace at;
    const Matrix y = adapter_forward(ad, w, x, &at);
    double l = 0;
    for (double v : y.values()) l += v * v;
    if (with_grad) {
      Matrix d_w(4, 4);
      adapter_backward(ad, w, x, at, 2.0 * y, grad, d_w, nullptr);
      interaction_backward(ad.source, it, d_w, grad.source);
    }
    return l;
  };
  const auto rep = check_gradients(loss, params, 1e-4);
  EXPECT_TRUE(rep.passed) << rep.worst_parameter << "[" << rep.worst_index << "] " << rep.max_relative_error;
}

TEST(AdapterStack, SlotsNamesAndZeroStart) {
  Rng rng(12);
  AdapterConfig cfg;
  const auto st = AdapterStack::create(2, 8, 5, cfg, rng);
  ASSERT_EQ(st.slots.size(), 4u);
  EXPECT_EQ(AdapterStack::slot_name(3), "layer1.value");
  EXPECT_TRUE(st.needs_representation());
  const Vector h = random_normal(5, 1.0, rng);
  const auto ws = realize_interactions(st, &h);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(ws[i].rows(), cfg.rank);
    EXPECT_EQ(st.slots[i]->b, Matrix(8, cfg.rank));
  }
  cfg.kind = InteractionKind::identity;
  EXPECT_FALSE(AdapterStack::create(2, 8, 5, cfg, rng).needs_representation());
}

}  // namespace
}  // namespace rellax
