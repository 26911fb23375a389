#include <gtest/gtest.h>

#include "lgqave/graphs.hpp"
#include "test_util.hpp"

using namespace lgqave;
using lgqave::testing::random_frame;
using lgqave::testing::random_matrix;

namespace {

void expect_row_stochastic(const Tensor<double>& r, const std::vector<std::uint8_t>& mask) {
  for (std::size_t i = 0; i < r.dim(0); ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < r.dim(1); ++j) {
      EXPECT_GE(r(i, j), 0.0);
      sum += r(i, j);
      if (mask[i] && !mask[j]) EXPECT_EQ(r(i, j), 0.0) << "padded node received attention";
      if (!mask[i]) EXPECT_EQ(r(i, j), i == j ? 1.0 : 0.0);
    }
    EXPECT_NEAR(sum, 1.0, 1e-6);
  }
}

GraphParams<double> random_graph_params(Rng& rng, std::size_t c, std::size_t d) {
  return {Var<double>::constant(random_matrix<double>(rng, c, d)), Var<double>::constant(random_matrix<double>(rng, d, d / 2)),
          Var<double>::constant(random_matrix<double>(rng, d, d / 2))};
}

}  // namespace

TEST(AssembleNodes, MaskLayout) {
  Rng rng(1);
  auto proj = Var<double>::constant(random_matrix<double>(rng, 6, 4));
  auto [n0, m0] = assemble_nodes(data::pad_grounding(random_frame(rng, 0, 2, 0, 6)), proj);
  EXPECT_EQ(m0, (std::vector<std::uint8_t>{0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1}));
  EXPECT_EQ(n0.rows(), 11u);
  auto [n2, m2] = assemble_nodes(data::pad_grounding(random_frame(rng, 0, 2, 2, 6)), proj);
  EXPECT_EQ(m2, (std::vector<std::uint8_t>{1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 1}));
}

TEST(AssembleNodes, IdenticalRoiRowsProjectIdentically) {
  Rng rng(2);
  auto rec = random_frame(rng, 0, 2, 3, 6);
  for (std::size_t k = 0; k < 6; ++k) rec.roi_features(2, k) = rec.roi_features(0, k);
  auto proj = Var<double>::constant(random_matrix<double>(rng, 6, 4));
  auto [nodes, mask] = assemble_nodes(data::pad_grounding(rec, 3), proj);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(nodes.value()(0, k), nodes.value()(2, k));
  // Frame node is the projected frame feature.
  for (std::size_t k = 0; k < 4; ++k) {
    double ref = 0.0;
    for (std::size_t j = 0; j < 6; ++j) ref += double(rec.frame_feature[j]) * proj.value()(j, k);
    EXPECT_NEAR(nodes.value()(3, k), ref, 1e-6);
  }
}

TEST(BuildAdjacency, SingleNodeIsOne) {
  Rng rng(3);
  auto x = Var<double>::constant(random_matrix<double>(rng, 1, 4));
  auto r = build_adjacency(x, Var<double>::constant(random_matrix<double>(rng, 4, 2)),
                           Var<double>::constant(random_matrix<double>(rng, 4, 2)));
  EXPECT_EQ(r.value()(0, 0), 1.0);
}

TEST(BuildAdjacency, IdenticalNodesGiveUniformRows) {
  Rng rng(4);
  auto row = random_matrix<double>(rng, 1, 4);
  Tensor<double> x({5, 4});
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t k = 0; k < 4; ++k) x(i, k) = row(0, k);
  std::vector<std::uint8_t> mask{1, 0, 1, 0, 1};
  auto r = build_adjacency(Var<double>::constant(x), Var<double>::constant(random_matrix<double>(rng, 4, 2)),
                           Var<double>::constant(random_matrix<double>(rng, 4, 2)), mask);
  for (std::size_t i : {0, 2, 4})
    for (std::size_t j : {0, 2, 4}) EXPECT_NEAR(r.value()(i, j), 1.0 / 3.0, 1e-12);
  expect_row_stochastic(r.value(), mask);
}

TEST(BuildAdjacency, TwoNodeExample) {
  auto x = Var<double>::constant(Tensor<double>::matrix(2, 2, {1, 0, 0, 1}));
  // Full-width identity projections so the logits are exactly x x^T.
  auto id = Var<double>::constant(Tensor<double>::matrix(2, 2, {1, 0, 0, 1}));
  auto r = build_adjacency(x, id, id).value();
  EXPECT_NEAR(r(0, 0), 0.7310586, 1e-7);
  EXPECT_NEAR(r(0, 1), 0.2689414, 1e-7);
  EXPECT_NEAR(r(1, 0), 0.2689414, 1e-7);
  EXPECT_NEAR(r(1, 1), 0.7310586, 1e-7);
}

TEST(BuildAdjacency, RowStochasticOnRandomGraphs) {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    auto rec = random_frame(rng, 0, 2, rng.below(11), 6);
    auto p = random_graph_params(rng, 6, 8);
    auto g = build_frame_graph(rec, p, 10);
    expect_row_stochastic(g.adjacency.value(), g.node_mask);
    EXPECT_EQ(g.node_mask.back(), 1);
  }
}

TEST(BuildAdjacency, ObjectPermutationConjugates) {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + rng.below(6);
    auto x = random_matrix<double>(rng, n, 6);
    std::vector<std::uint8_t> mask(n, 1);
    for (std::size_t i = 0; i + 1 < n; ++i) mask[i] = rng.bernoulli(0.7);
    std::vector<std::size_t> perm(n - 1);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    perm.push_back(n - 1);
    Tensor<double> xp({n, 6});
    std::vector<std::uint8_t> mp(n);
    for (std::size_t i = 0; i < n; ++i) {
      mp[i] = mask[perm[i]];
      for (std::size_t k = 0; k < 6; ++k) xp(i, k) = x(perm[i], k);
    }
    auto wk = Var<double>::constant(random_matrix<double>(rng, 6, 3));
    auto wv = Var<double>::constant(random_matrix<double>(rng, 6, 3));
    auto r = build_adjacency(Var<double>::constant(x), wk, wv, mask).value();
    auto rp = build_adjacency(Var<double>::constant(xp), wk, wv, mp).value();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) EXPECT_NEAR(rp(i, j), r(perm[i], perm[j]), 1e-12);
  }
}

TEST(BuildAdjacency, GradientMatchesFiniteDifferences) {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_matrix<double>(rng, 4, 6);
    auto wk = random_matrix<double>(rng, 6, 3);
    auto wv = random_matrix<double>(rng, 6, 3);
    auto probe = random_matrix<double>(rng, 4, 4);
    std::vector<std::uint8_t> mask{1, 0, 1, 1};
    auto f = [&](const Var<double>& v) {
      auto r = build_adjacency(v, Var<double>::constant(wk), Var<double>::constant(wv), mask);
      return sum_all(mul(r, Var<double>::constant(probe)));
    };
    EXPECT_LE(grad_check<double>(f, x, 1e-4), 1e-4);
  }
}

TEST(GroupByClip, WindowsInOneClip) {
  std::vector<double> scores(32, 0.0);
  auto g = group_by_clip({3, 4, 5}, scores, 32);
  EXPECT_EQ(g[0], (std::vector<std::size_t>{3}));
  EXPECT_EQ(g[1], (std::vector<std::size_t>{4, 5}));
  auto single = group_by_clip({4, 5, 6}, scores, 32);
  EXPECT_EQ(single[1], (std::vector<std::size_t>{4, 5, 6}));
  for (std::size_t c = 2; c < 8; ++c) EXPECT_TRUE(single[c].empty());
}

TEST(GroupByClip, OverflowKeepsTopScores) {
  // A 96-frame video has 12 frames per clip.
  std::vector<double> scores(96, 0.0);
  std::vector<std::size_t> w;
  for (std::size_t t = 0; t < 12; ++t) {
    w.push_back(t);
    scores[t] = static_cast<double>(t % 5);
  }
  auto g = group_by_clip(w, scores, 96);
  ASSERT_EQ(g[0].size(), 10u);
  // Scores 0 appear at t=0,5,10; the two dropped are 5 and 10 (ties evict higher index).
  EXPECT_EQ(g[0], (std::vector<std::size_t>{0, 1, 2, 3, 4, 6, 7, 8, 9, 11}));
}

TEST(BuildGraphSequence, DeterministicAndGrouped) {
  Rng rng(8);
  auto ep = lgqave::testing::random_episode(rng, {.frames = 32, .objects = 3, .c = 6, .c_text = 6});
  auto p = random_graph_params(rng, 6, 8);
  Selection sel;
  sel.scores.assign(32, 0.0);
  sel.windows = {3, 4, 5};
  auto a = build_graph_sequence(ep, sel, p);
  auto b = build_graph_sequence(ep, sel, p);
  EXPECT_EQ(a[0].size(), 1u);
  EXPECT_EQ(a[1].size(), 2u);
  for (std::size_t c = 0; c < 8; ++c)
    for (std::size_t i = 0; i < a[c].size(); ++i) EXPECT_EQ(a[c][i].adjacency.value(), b[c][i].adjacency.value());
  auto bare = build_graph_sequence(ep, sel, p, false);
  EXPECT_EQ(bare[1][0].size(), 1u);
  EXPECT_EQ(bare[1][0].adjacency.value()(0, 0), 1.0);
}
