// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <sstream>

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include "rellax/item_encoder.hpp"
#include "rellax/subr.hpp"

namespace rellax {
namespace {

TEST(Cosine, SymmetricScaleInvariantAndSelfOne) {
  Rng rng(1);
  for (int t = 0; t < 100; ++t) {
    const Vector x = random_normal(6, 1.0, rng), y = random_normal(6, 1.0, rng);
    Vector sx = x;
    for (double& v : sx) v *= 3.7;
    EXPECT_DOUBLE_EQ(cosine_similarity(x, y), cosine_similarity(y, x));
    EXPECT_NEAR(cosine_similarity(sx, y), cosine_similarity(x, y), 1e-15);
    EXPECT_NEAR(cosine_similarity(x, x), 1.0, 1e-15);
  }
  EXPECT_EQ(cosine_similarity(Vector{0, 0}, Vector{1, 0}), -1.0);
}

TEST(Pca, DataOnOneAxis) {
  const Matrix data{{2, 0}, {-2, 0}, {1, 0}, {-1, 0}};
  const PcaModel m = fit_pca(data, 1);
  EXPECT_NEAR(m.components(0, 0), 1.0, 1e-12);
  EXPECT_NEAR(m.components(0, 1), 0.0, 1e-12);
  EXPECT_NEAR(pca_reduce(m, Vector{3, 0})[0], 3.0, 1e-12);
}

TEST(Pca, FullRankReconstructionIsExact) {
  Rng rng(2);
  const Matrix data = random_normal(30, 5, 1.0, rng);
  const PcaModel m = fit_pca(data, 5);
  for (int t = 0; t < 20; ++t) {
    const Vector z = random_normal(5, 2.0, rng);
    EXPECT_LT(max_abs_diff(pca_reconstruct(m, pca_reduce(m, z)), z), 1e-9);
  }
}

TEST(Pca, ComponentsOrthonormalOrderedAndSigned) {
  Rng rng(3);
  Matrix data = random_normal(40, 8, 1.0, rng);
  for (std::size_t i = 0; i < data.rows(); ++i) data(i, 2) *= 5.0;
  const PcaModel m = fit_pca(data, 6);
  for (std::size_t a = 0; a < 6; ++a) {
    for (std::size_t b = 0; b < 6; ++b)
      EXPECT_NEAR(dot(m.components.row(a), m.components.row(b)), a == b ? 1.0 : 0.0, 1e-8);
    if (a) EXPECT_LE(m.explained_variance[a], m.explained_variance[a - 1]);
    const auto row = m.components.row(a);
    const auto it = std::max_element(row.begin(), row.end(), [](double x, double y) { return std::abs(x) < std::abs(y); });
    EXPECT_GT(*it, 0.0);
  }
}

TEST(Pca, VarianceMatchesIndependentEigenSolver) {
  Rng rng(4);
  const Matrix data = random_normal(20, 6, 1.0, rng);
  const PcaModel m = fit_pca(data, 3);

  Eigen::MatrixXd X(20, 6);
  for (int i = 0; i < 20; ++i)
    for (int j = 0; j < 6; ++j) X(i, j) = data(i, j);
  const Eigen::MatrixXd C = X.rowwise() - X.colwise().mean();
  const Eigen::MatrixXd cov = (C.transpose() * C) / 19.0;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  const Eigen::VectorXd ev = es.eigenvalues().reverse();

  for (std::size_t k = 0; k < 3; ++k) {
    double mean = 0, var = 0;
    std::vector<double> proj;
    for (std::size_t i = 0; i < 20; ++i) proj.push_back(pca_reduce(m, data.row(i))[k]);
    for (double p : proj) mean += p / 20.0;
    for (double p : proj) var += (p - mean) * (p - mean) / 19.0;
    EXPECT_NEAR(var, ev[static_cast<Eigen::Index>(k)], 1e-9);
    EXPECT_NEAR(m.explained_variance[k], ev[static_cast<Eigen::Index>(k)], 1e-9);
    // Same axis up to sign.
    const Eigen::VectorXd v = es.eigenvectors().col(5 - static_cast<Eigen::Index>(k));
    double d = 0;
    for (int j = 0; j < 6; ++j) d += v[j] * m.components(k, static_cast<std::size_t>(j));
    EXPECT_NEAR(std::abs(d), 1.0, 1e-8);
  }
}

TEST(Pca, RequestAboveRankReportsAchievableRank) {
  const Matrix data{{1, 2, 0}, {2, 4, 0}, {3, 6, 0}, {-1, -2, 0}};
  try {
    fit_pca(data, 2);
    FAIL();
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("achievable rank is 1"), std::string::npos) << e.what();
  }
}

TEST(Pca, SaveLoadRoundTripIsExact) {
  Rng rng(5);
  const PcaModel m = fit_pca(random_normal(15, 4, 1.0, rng), 3);
  std::stringstream ss;
  save_pca(ss, m);
  const PcaModel back = load_pca(ss);
  EXPECT_EQ(back.mean, m.mean);
  EXPECT_EQ(back.components, m.components);
  EXPECT_EQ(back.explained_variance, m.explained_variance);
  EXPECT_EQ(back.fitted_on, m.fitted_on);
}

TEST(ImportedVectors, ReadsTableAndNamesMissingId) {
  std::istringstream in("1\t0.5,1.5\n7\t-1,2\n");
  const auto enc = ImportedVectorEncoder::read(in);
  EXPECT_EQ(enc.dim(), 2u);
  EXPECT_EQ(encode_item(Item{7, "x", {}}, enc), (Vector{-1, 2}));
  try {
    encode_item(Item{9, "y", {}}, enc);
    FAIL();
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("9"), std::string::npos);
  }
  std::istringstream bad("1\t0.5,abc\n");
  EXPECT_THROW(ImportedVectorEncoder::read(bad), LoadError);
}

// A hand-built index over ids 1..n with the given reduced vectors.
SemanticIndex index_of(const std::vector<Vector>& vecs) {
  SemanticIndex idx;
  idx.reduced = Matrix(vecs.size(), vecs[0].size());
  for (std::size_t i = 0; i < vecs.size(); ++i) {
    const auto id = static_cast<std::int64_t>(i + 1);
    idx.ids.push_back(id);
    idx.row_of[id] = i;
    std::copy(vecs[i].begin(), vecs[i].end(), idx.reduced.row(i).begin());
  }
  return idx;
}

std::vector<HistoryEntry> history_of(const std::vector<std::int64_t>& ids) {
  std::vector<HistoryEntry> h;
  for (std::size_t i = 0; i < ids.size(); ++i) h.push_back({ids[i], 1, static_cast<std::int64_t>(i)});
  return h;
}

// Exhaustive oracle: score every position, sort by (similarity desc,
// position desc), keep K, emit ascending.
std::vector<std::size_t> exhaustive_top_k(const std::vector<HistoryEntry>& h, std::int64_t target, std::size_t k,
                                          const SemanticIndex& idx) {
  std::vector<std::pair<double, std::size_t>> scored;
  for (std::size_t i = 0; i < h.size(); ++i) {
    const auto a = idx.vector(h[i].item_id), b = idx.vector(target);
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t j = 0; j < a.size(); ++j) {
      ab += a[j] * b[j];
      aa += a[j] * a[j];
      bb += b[j] * b[j];
    }
    const double s = (aa == 0 || bb == 0) ? -1.0 : ab / (std::sqrt(aa) * std::sqrt(bb));
    scored.push_back({s, i});
  }
  std::sort(scored.begin(), scored.end(), [](const auto& x, const auto& y) {
    return x.first != y.first ? x.first > y.first : x.second > y.second;
  });
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < std::min(k, scored.size()); ++i) out.push_back(scored[i].second);
  std::sort(out.begin(), out.end());
  return out;
}

TEST(Retrieval, SaturatedKReturnsWholeHistory) {
  const auto idx = index_of({{1, 0}, {0, 1}, {1, 1}});
  const auto h = history_of({1, 2, 3});
  EXPECT_EQ(retrieve_top_k(h, 1, 3, idx), (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_EQ(retrieve_top_k(h, 1, 10, idx), (std::vector<std::size_t>{0, 1, 2}));
}

TEST(Retrieval, DuplicateOfTargetRanksFirst) {
  const auto idx = index_of({{1, 0}, {0, 1}, {1, 1}, {-1, 0.2}});
  const auto h = history_of({2, 4, 3, 1});
  EXPECT_EQ(retrieve_top_k(h, 3, 1, idx), (std::vector<std::size_t>{2}));
}

TEST(Retrieval, TiesGoToTheLaterPosition) {
  const auto idx = index_of({{1, 0}, {0, 1}});
  const auto h = history_of({1, 2, 1, 2, 1});
  EXPECT_EQ(retrieve_top_k(h, 1, 2, idx), (std::vector<std::size_t>{2, 4}));
}

TEST(Retrieval, ZeroVectorRanksLast) {
  const auto idx = index_of({{1, 0}, {0, 0}, {-1, 0}});
  const auto h = history_of({2, 3});
  EXPECT_EQ(retrieve_top_k(h, 1, 1, idx), (std::vector<std::size_t>{1}));
}

TEST(Retrieval, MatchesExhaustiveOracleOnRandomInstances) {
  Rng rng(6);
  for (int t = 0; t < 300; ++t) {
    std::vector<Vector> vecs;
    const std::size_t n_items = 2 + rng.below(20);
    for (std::size_t i = 0; i < n_items; ++i) vecs.push_back(random_normal(3, 1.0, rng));
    if (n_items > 3) vecs[1] = vecs[0];  // duplicated vectors create ties
    const auto idx = index_of(vecs);
    std::vector<std::int64_t> ids;
    const std::size_t len = 1 + rng.below(8);
    for (std::size_t i = 0; i < len; ++i) ids.push_back(static_cast<std::int64_t>(1 + rng.below(n_items)));
    const auto h = history_of(ids);
    const auto target = static_cast<std::int64_t>(1 + rng.below(n_items));
    const std::size_t k = 1 + rng.below(4);
    const auto got = retrieve_top_k(h, target, k, idx);
    EXPECT_EQ(got, exhaustive_top_k(h, target, k, idx));
    EXPECT_TRUE(std::is_sorted(got.begin(), got.end()));
  }
}

TEST(Retrieval, EmptyHistoryIsAnError) {
  const auto idx = index_of({{1, 0}});
  EXPECT_THROW(retrieve_top_k({}, 1, 1, idx), ContractError);
}

Item genre_item(std::int64_t id, std::vector<std::string> genres) { return Item{id, "t", {{"genres", std::move(genres)}}}; }

TEST(Heterogeneity, WorkedExamples) {
  const std::vector<Item> a{genre_item(1, {"Comedy"}), genre_item(2, {"Fiction"}), genre_item(3, {"Comedy"}),
                            genre_item(4, {"Family"})};
  const std::vector<Item> b{genre_item(1, {"Fiction"}), genre_item(2, {"Fiction"}), genre_item(3, {"Child"}),
                            genre_item(4, {"Fiction"})};
  EXPECT_EQ(heterogeneity_score(std::span<const Item>(a)), 3u);
  EXPECT_EQ(heterogeneity_score(std::span<const Item>(b)), 2u);
  EXPECT_EQ(heterogeneity_score(std::span<const Item>()), 0u);
}

TEST(Heterogeneity, CountsEveryValueOfMultiValuedAttributes) {
  const std::vector<Item> s{genre_item(1, {"Comedy", "Romance"}), genre_item(2, {"Romance", "Drama"})};
  EXPECT_EQ(heterogeneity_score(std::span<const Item>(s)), 3u);
}

TEST(Heterogeneity, MonotoneUnderExtension) {
  Rng rng(7);
  const std::vector<std::string> pool{"A", "B", "C", "D", "E"};
  std::vector<Item> seq;
  std::size_t prev = 0;
  for (int i = 0; i < 30; ++i) {
    seq.push_back(genre_item(i, {pool[rng.below(pool.size())]}));
    const std::size_t s = heterogeneity_score(std::span<const Item>(seq));
    EXPECT_GE(s, prev);
    EXPECT_LE(s, std::min<std::size_t>(seq.size(), pool.size()));
    prev = s;
  }
}

TEST(Heterogeneity, MissingFieldNamesTheItem) {
  const std::vector<Item> s{Item{42, "Nameless", {}}};
  try {
    heterogeneity_score(std::span<const Item>(s));
    FAIL();
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("42"), std::string::npos);
  }
}

class ToyEncoder : public ::testing::Test {
 protected:
  void SetUp() override {
    tmpl.item_description = "{title}";
    catalog.items[1] = genre_item(1, {"Drama"});
    catalog.items[1].title = "alpha";
    catalog.items[2] = genre_item(2, {"Drama"});
    catalog.items[2].title = "alpha";
    catalog.items[3] = genre_item(3, {"Drama"});
    catalog.items[3].title = "alpha beta gamma";
    vocab = Vocabulary::build({"alpha beta gamma"});
    LmConfig c;
    c.vocab_size = vocab.size();
    c.dim = 8;
    c.ffn_dim = 32;
    c.context = 16;
    lm = ToyLm::create(c, Rng(3));
  }
  PromptTemplate tmpl;
  Catalog catalog;
  Vocabulary vocab;
  ToyLm lm;
};

TEST_F(ToyEncoder, IdenticalDescriptionsGiveIdenticalVectors) {
  const ToyLmEncoder enc(lm, vocab, tmpl);
  EXPECT_EQ(enc.encode(catalog.item(1)), enc.encode(catalog.item(2)));
  EXPECT_EQ(enc.dim(), 8u);
}

TEST_F(ToyEncoder, SingleTokenIsThatTokensFinalState) {
  const ToyLmEncoder enc(lm, vocab, tmpl);
  const std::vector<std::int32_t> tok{vocab.id("alpha")};
  const LmPass pass(lm, token_embeddings(lm, tok));
  EXPECT_EQ(enc.encode(catalog.item(1)), Vector(pass.hidden_states().row(0).begin(), pass.hidden_states().row(0).end()));
}

TEST_F(ToyEncoder, ThreeTokensAverageTheirStates) {
  const ToyLmEncoder enc(lm, vocab, tmpl);
  const std::vector<std::int32_t> toks{vocab.id("alpha"), vocab.id("beta"), vocab.id("gamma")};
  const LmPass pass(lm, token_embeddings(lm, toks));
  const Matrix& hs = pass.hidden_states();
  Vector mean(8, 0.0);
  for (std::size_t k = 0; k < 8; ++k) mean[k] = (hs(0, k) + hs(1, k) + hs(2, k)) / 3.0;
  EXPECT_LT(max_abs_diff(enc.encode(catalog.item(3)), mean), 1e-15);
}

TEST(SemanticIndexBuild, CapsReducedDimensionByRank) {
  Catalog c;
  std::map<std::int64_t, Vector> table;
  Rng rng(8);
  for (int i = 1; i <= 10; ++i) {
    c.items[i] = genre_item(i, {"X"});
    const double a = rng.normal(), b = rng.normal();
    table[i] = Vector{a, b, a + b, 0.0};  // rank 2 after centering
  }
  const SemanticIndex idx = build_semantic_index(c, ImportedVectorEncoder(table), 32);
  EXPECT_EQ(idx.pca.output_dim(), 2u);
  EXPECT_EQ(idx.reduced.rows(), 10u);
  EXPECT_THROW(idx.vector(99), ContractError);
}

}  // namespace
}  // namespace rellax
