#include <gtest/gtest.h>

#include "lgqave/qdgt.hpp"
#include "test_util.hpp"

using namespace lgqave;
using lgqave::testing::random_frame;
using lgqave::testing::random_matrix;
using V = Var<double>;

namespace {

QdgtConfig small_config() {
  QdgtConfig cfg;
  cfg.c = 6;
  cfg.c_text = 5;
  cfg.d = 16;
  cfg.heads = 4;
  return cfg;
}

struct Fixture {
  ParamStore<double> store;
  QdgtLayout layout;
  Fixture(std::uint64_t seed, QdgtConfig cfg = small_config()) {
    Rng rng(seed);
    layout = QdgtLayout::create(store, cfg, rng);
  }
};

void expect_stochastic(const Tensor<double>& r, const std::vector<std::uint8_t>& mask) {
  for (std::size_t i = 0; i < r.dim(0); ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < r.dim(1); ++j) {
      EXPECT_GE(r(i, j), 0.0);
      sum += r(i, j);
      if (mask[i] && !mask[j]) EXPECT_EQ(r(i, j), 0.0);
    }
    EXPECT_NEAR(sum, 1.0, 1e-6);
  }
}

std::vector<std::vector<FrameGraph<double>>> random_clips(Rng& rng, const QdgtParams<double>& p, std::size_t n_frames,
                                                          std::size_t m_max = 0, bool pad = false) {
  std::vector<std::vector<FrameGraph<double>>> clips(kClips);
  for (std::size_t t = 0; t < n_frames; ++t) {
    auto rec = random_frame(rng, static_cast<int>(t), 2, rng.below(4), p.cfg.c);
    auto g = build_frame_graph(rec, p.graph, pad ? m_max : rec.num_objects());
    g.t = t;
    g.clip = clip_of(t, n_frames);
    clips[g.clip].push_back(std::move(g));
  }
  return clips;
}

}  // namespace

TEST(MaskQuestion, Examples) {
  Rng rng(1);
  auto q = V::constant(random_matrix<double>(rng, 2, 5));
  EXPECT_EQ(mask_question(q, {1, 1}).value(), q.value());
  auto zero = mask_question(q, {0, 0}).value();
  for (std::size_t i = 0; i < zero.size(); ++i) EXPECT_EQ(zero[i], 0.0);
  auto half = mask_question(q, {1, 0}).value();
  for (std::size_t k = 0; k < 5; ++k) {
    EXPECT_EQ(half(0, k), q.value()(0, k));
    EXPECT_EQ(half(1, k), 0.0);
  }
  EXPECT_THROW(mask_question(q, {1}), ShapeError);
}

TEST(ProjectTokens, LinearAndShape) {
  Rng rng(2);
  auto w = V::constant(random_matrix<double>(rng, 5, 16));
  auto z0 = project_tokens(V::constant(Tensor<double>({3, 5})), w).value();
  for (std::size_t i = 0; i < z0.size(); ++i) EXPECT_EQ(z0[i], 0.0);
  auto q = random_matrix<double>(rng, 3, 5);
  auto z = project_tokens(V::constant(q), w).value();
  auto zs = project_tokens(scale(V::constant(q), 2.5), w).value();
  for (std::size_t i = 0; i < z.size(); ++i) EXPECT_NEAR(zs[i], 2.5 * z[i], 1e-12);
  auto one = project_tokens(V::constant(random_matrix<double>(rng, 1, 5)), w);
  EXPECT_EQ(one.rows(), 1u);
  EXPECT_EQ(one.cols(), 16u);
}

TEST(CrossmodalRefine, Examples) {
  Rng rng(3);
  auto f = V::constant(random_matrix<double>(rng, 1, 4));
  EXPECT_EQ(crossmodal_refine(f, V::constant(Tensor<double>({3, 4}))).value(), f.value());

  auto fo = V::constant(Tensor<double>::matrix(1, 4, {1, 0, 0, 0}));
  auto z = Tensor<double>::matrix(1, 4, {0, 2, -1, 3});
  auto r = crossmodal_refine(fo, V::constant(z)).value();
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(r(0, k), fo.value()(0, k) + 0.5 * z(0, k), 1e-15);

  auto zr = random_matrix<double>(rng, 1, 4);
  Tensor<double> zh({3, 4});
  double dot = 0.0;
  for (std::size_t k = 0; k < 4; ++k) {
    dot += f.value()(0, k) * zr(0, k);
    for (std::size_t h = 0; h < 3; ++h) zh(h, k) = zr(0, k);
  }
  auto rh = crossmodal_refine(f, V::constant(zh)).value();
  const double a = 1.0 / (1.0 + std::exp(-dot));
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(rh(0, k), f.value()(0, k) + 3 * a * zr(0, k), 1e-12);
}

TEST(SpatialUnit, SingleNodeWithIdentityUpdate) {
  Fixture fx(4);
  for (ParamId id : fx.layout.w_u) {
    auto& w = fx.store.value(id);
    w.fill(0.0);
    for (std::size_t i = 0; i < w.dim(0); ++i) w(i, i) = 1.0;
  }
  Tape<double> tape(fx.store, false);
  auto p = QdgtParams<double>::bind(fx.layout, tape);
  Rng rng(5);
  FrameGraph<double> g;
  auto x = random_matrix<double>(rng, 1, 16);
  for (auto& v : x.storage()) v = std::abs(v);
  g.nodes = V::constant(x);
  g.node_mask = {1};
  g.slots = {10};
  g.spatial = Tensor<double>({0, 4});
  g.adjacency = V::constant(Tensor<double>::matrix(1, 1, {1.0}));
  auto out = spatial_unit(g, p, g.adjacency).nodes.value();
  // Each round doubles a nonnegative row: x + ReLU(x I) = 2x.
  auto expect = matmul(matmul(V::constant(x), p.spatial.w_v), p.spatial.w_o).value();
  for (std::size_t k = 0; k < 16; ++k) EXPECT_NEAR(out(0, k), 4.0 * expect(0, k), 1e-10);
}

TEST(SpatialUnit, ZeroFeaturesStayZero) {
  Fixture fx(6);
  Tape<double> tape(fx.store, false);
  auto p = QdgtParams<double>::bind(fx.layout, tape);
  FrameGraph<double> g;
  g.nodes = V::constant(Tensor<double>({3, 16}));
  g.node_mask = {1, 1, 1};
  g.slots = {0, 1, 10};
  g.spatial = Tensor<double>({2, 4});
  g.adjacency = build_adjacency(g.nodes, p.graph.w_k, p.graph.w_v);
  auto out = spatial_unit(g, p, g.adjacency).nodes.value();
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_EQ(out[i], 0.0);
}

TEST(TemporalUnit, SingleDuplicateAndOrder) {
  Fixture fx(7);
  Tape<double> tape(fx.store, false);
  auto p = QdgtParams<double>::bind(fx.layout, tape);
  Rng rng(8);
  auto a = V::constant(random_matrix<double>(rng, 1, 16));
  auto b = V::constant(random_matrix<double>(rng, 1, 16));

  auto one = temporal_unit<double>({a}, {3}, p).value();
  auto x = add(a, gather_rows(p.pos_embed, {3}));
  auto ref = add(a, matmul(matmul(x, p.temporal.w_v), p.temporal.w_o)).value();
  EXPECT_LT(max_abs_diff(one, ref), 1e-12);

  auto dup = temporal_unit<double>({a, a, b}, {5, 5, 6}, p).value();
  for (std::size_t k = 0; k < 16; ++k) EXPECT_EQ(dup(0, k), dup(1, k));

  auto fwd = temporal_unit<double>({a, b}, {0, 1}, p).value();
  auto rev = temporal_unit<double>({b, a}, {0, 1}, p).value();
  // Frame a at position 0 versus position 1.
  double diff = 0.0;
  for (std::size_t k = 0; k < 16; ++k) diff = std::max(diff, std::abs(fwd(0, k) - rev(1, k)));
  EXPECT_GT(diff, 1e-6);
}

TEST(EdgeTransform, OutputsStayStochastic) {
  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    Fixture fx(100 + trial);
    Tape<double> tape(fx.store, false);
    auto p = QdgtParams<double>::bind(fx.layout, tape);
    const bool pad = trial % 2 == 0;
    auto clips = random_clips(rng, p, 4, 10, pad);
    std::vector<const FrameGraph<double>*> ptrs;
    std::vector<V> adj;
    for (auto& c : clips)
      for (auto& g : c) {
        ptrs.push_back(&g);
        adj.push_back(g.adjacency);
      }
    auto out = edge_transform(ptrs, adj, p);
    for (std::size_t i = 0; i < out.size(); ++i) expect_stochastic(out[i].value(), ptrs[i]->node_mask);
  }
}

TEST(EdgeTransform, IdentityRowsStayStochastic) {
  Fixture fx(10);
  Tape<double> tape(fx.store, false);
  auto p = QdgtParams<double>::bind(fx.layout, tape);
  FrameGraph<double> g;
  g.node_mask = {1, 1, 1};
  g.slots = {0, 1, 10};
  Tensor<double> eye({3, 3});
  for (std::size_t i = 0; i < 3; ++i) eye(i, i) = 1.0;
  auto out = edge_transform<double>({&g}, {V::constant(eye)}, p);
  expect_stochastic(out[0].value(), g.node_mask);
}

TEST(EdgeTransform, UniformAttentionMatchesMeanPoolReference) {
  Fixture fx(11);
  fx.store.value(fx.layout.edge.w_q).fill(0.0);
  fx.store.value(fx.layout.edge.w_k).fill(0.0);
  Tape<double> tape(fx.store, false);
  auto p = QdgtParams<double>::bind(fx.layout, tape);
  Rng rng(12);
  auto clips = random_clips(rng, p, 3);
  std::vector<const FrameGraph<double>*> ptrs;
  std::vector<V> adj;
  for (auto& c : clips)
    for (auto& g : c) {
      ptrs.push_back(&g);
      adj.push_back(g.adjacency);
    }
  auto out = edge_transform(ptrs, adj, p);

  // Reference: every row attends uniformly, so the update is the same for all rows.
  const std::size_t w = QdgtConfig::edge_slots();
  std::vector<std::vector<double>> grid;
  for (std::size_t g = 0; g < ptrs.size(); ++g) {
    const auto& r = adj[g].value();
    for (std::size_t i = 0; i < r.dim(0); ++i) {
      std::vector<double> row(w, 0.0);
      for (std::size_t j = 0; j < r.dim(1); ++j) row[ptrs[g]->slots[j]] = r(i, j);
      grid.push_back(row);
    }
  }
  const auto& win = p.edge_in.value();
  const auto& wv = p.edge.w_v.value();
  const auto& wo = p.edge.w_o.value();
  const auto& wout = p.edge_out.value();
  const std::size_t e = win.dim(1);
  std::vector<double> mean_h(e, 0.0);
  for (const auto& row : grid)
    for (std::size_t k = 0; k < e; ++k)
      for (std::size_t j = 0; j < w; ++j) mean_h[k] += row[j] * win(j, k) / grid.size();
  auto apply = [&](const std::vector<double>& v, const Tensor<double>& m) {
    std::vector<double> o(m.dim(1), 0.0);
    for (std::size_t k = 0; k < m.dim(1); ++k)
      for (std::size_t j = 0; j < m.dim(0); ++j) o[k] += v[j] * m(j, k);
    return o;
  };
  auto delta = apply(apply(apply(mean_h, wv), wo), wout);
  std::size_t row_id = 0;
  for (std::size_t g = 0; g < ptrs.size(); ++g) {
    const std::size_t n = ptrs[g]->size();
    for (std::size_t i = 0; i < n; ++i, ++row_id) {
      std::vector<double> logit(n);
      double mx = -1e300, z = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t s = ptrs[g]->slots[j];
        logit[j] = grid[row_id][s] + delta[s];
        mx = std::max(mx, logit[j]);
      }
      for (auto& l : logit) z += std::exp(l - mx);
      for (std::size_t j = 0; j < n; ++j) EXPECT_NEAR(out[g].value()(i, j), std::exp(logit[j] - mx) / z, 1e-9);
    }
  }
}

TEST(LocalRepr, ZeroMaskAndLinearity) {
  Fixture fx(13);
  Tape<double> tape(fx.store, false);
  auto p = QdgtParams<double>::bind(fx.layout, tape);
  Rng rng(14);
  auto nodes = random_matrix<double>(rng, 4, 16);
  std::vector<std::uint8_t> mask{1, 0, 1, 1};
  auto q = V::constant(random_matrix<double>(rng, 3, 5));
  auto z0 = project_tokens(mask_question(q, {0, 0, 0}), p.phi_qhat);
  auto loc = local_repr(V::constant(nodes), mask, p, z0).value();
  auto plain = matmul(mean_rows(V::constant(nodes), mask), p.phi_local).value();
  EXPECT_EQ(loc, plain);
  auto scaled = matmul(mean_rows(scale(V::constant(nodes), 3.0), mask), p.phi_local).value();
  for (std::size_t k = 0; k < 16; ++k) EXPECT_NEAR(scaled[k], 3.0 * plain[k], 1e-12);

  // Straight-line reference with a live question.
  auto z = project_tokens(q, p.phi_qhat);
  auto got = local_repr(V::constant(nodes), mask, p, z).value();
  std::vector<double> pooled(16, 0.0), f(16, 0.0);
  for (std::size_t i : {0, 2, 3})
    for (std::size_t k = 0; k < 16; ++k) pooled[k] += nodes(i, k) / 3.0;
  for (std::size_t k = 0; k < 16; ++k)
    for (std::size_t j = 0; j < 16; ++j) f[k] += pooled[j] * p.phi_local.value()(j, k);
  std::vector<double> ref = f;
  for (std::size_t h = 0; h < 3; ++h) {
    double dot = 0.0;
    for (std::size_t k = 0; k < 16; ++k) dot += f[k] * z.value()(h, k);
    const double a = 1.0 / (1.0 + std::exp(-dot));
    for (std::size_t k = 0; k < 16; ++k) ref[k] += a * z.value()(h, k);
  }
  for (std::size_t k = 0; k < 16; ++k) EXPECT_NEAR(got[k], ref[k], 1e-6);
}

TEST(GlobalRepr, SingleFramePoolModesAndPermutation) {
  Fixture fx(15);
  Tape<double> tape(fx.store, false);
  auto p = QdgtParams<double>::bind(fx.layout, tape);
  Rng rng(16);
  auto z0 = V::constant(Tensor<double>({2, 16}));
  auto one = V::constant(random_matrix<double>(rng, 1, 16));
  auto g1 = global_repr(one, p, z0).value();
  auto ref = matmul(matmul(one, p.global.w_v), p.global.w_o).value();
  EXPECT_LT(max_abs_diff(g1, ref), 1e-12);

  auto frames = random_matrix<double>(rng, 4, 16);
  auto mean_out = global_repr(V::constant(frames), p, z0).value();
  p.cfg.pool = PoolMode::kMax;
  auto max_out = global_repr(V::constant(frames), p, z0).value();
  EXPECT_GT(max_abs_diff(mean_out, max_out), 1e-6);
  p.cfg.pool = PoolMode::kMean;

  Tensor<double> rev({4, 16});
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t k = 0; k < 16; ++k) rev(i, k) = frames(3 - i, k);
  EXPECT_LT(max_abs_diff(global_repr(V::constant(rev), p, z0).value(), mean_out), 1e-12);
}

TEST(Qdgt, AdjacenciesStayStochastic) {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    Fixture fx(200 + trial);
    Tape<double> tape(fx.store, false);
    auto p = QdgtParams<double>::bind(fx.layout, tape);
    auto clips = random_clips(rng, p, 1 + rng.below(8), 10, trial % 2 == 0);
    auto z = V::constant(random_matrix<double>(rng, 3, 16));
    auto out = qdgt_forward(clips, 8, z, p);
    std::size_t k = 0;
    for (auto& c : clips)
      for (auto& g : c)
        for (std::size_t u = 0; u < p.w_u.size(); ++u) expect_stochastic(out.adjacencies[k++].value(), g.node_mask);
    EXPECT_EQ(k, out.adjacencies.size());
  }
}

TEST(Qdgt, PaddingInvariance) {
  for (int trial = 0; trial < 50; ++trial) {
    Fixture fx(300 + trial);
    Tape<double> tape(fx.store, false);
    auto p = QdgtParams<double>::bind(fx.layout, tape);
    Rng gen(400 + trial);
    std::vector<data::FrameRecord> recs;
    const std::size_t n = 1 + gen.below(6);
    for (std::size_t t = 0; t < n; ++t) recs.push_back(random_frame(gen, static_cast<int>(t), 2, gen.below(4), 6));
    auto z = V::constant(random_matrix<double>(gen, 2, 16));
    auto run = [&](std::size_t m_max, bool garbage) {
      std::vector<std::vector<FrameGraph<double>>> clips(kClips);
      Rng noise(7);
      for (std::size_t t = 0; t < n; ++t) {
        auto g = build_frame_graph(recs[t], p.graph, m_max == 0 ? recs[t].num_objects() : m_max);
        if (garbage) {
          // Overwrite padded node rows and spatial slots with junk.
          auto x = g.nodes.value();
          for (std::size_t i = 0; i < g.size(); ++i)
            if (!g.node_mask[i])
              for (std::size_t k = 0; k < x.dim(1); ++k) x(i, k) = noise.uniform(-5, 5);
          for (std::size_t i = recs[t].num_objects(); i < g.spatial.dim(0); ++i)
            for (std::size_t k = 0; k < 4; ++k) g.spatial(i, k) = noise.uniform();
          g.nodes = V::constant(x);
          g.adjacency = build_adjacency(g.nodes, p.graph.w_k, p.graph.w_v, g.node_mask);
        }
        g.t = t;
        clips[clip_of(t, 8)].push_back(std::move(g));
      }
      return qdgt_forward(clips, 8, z, p);
    };
    auto base = run(0, false);
    for (auto [m_max, garbage] : {std::pair<std::size_t, bool>{3, false}, {10, false}, {10, true}}) {
      auto other = run(m_max, garbage);
      EXPECT_LT(max_abs_diff(base.global.value(), other.global.value()), 1e-6);
      ASSERT_EQ(base.locals.size(), other.locals.size());
      for (std::size_t i = 0; i < base.locals.size(); ++i)
        EXPECT_LT(max_abs_diff(base.locals[i].value(), other.locals[i].value()), 1e-6);
    }
  }
}

TEST(Qdgt, ZeroMaskIgnoresQuestion) {
  Rng rng(18);
  for (int trial = 0; trial < 50; ++trial) {
    Fixture fx(500 + trial);
    Tape<double> tape(fx.store, false);
    auto p = QdgtParams<double>::bind(fx.layout, tape);
    auto clips = random_clips(rng, p, 1 + rng.below(8));
    std::vector<std::uint8_t> off(3, 0);
    auto za = project_tokens(mask_question(V::constant(random_matrix<double>(rng, 3, 5)), off), p.phi_qhat);
    auto zb = project_tokens(mask_question(V::constant(random_matrix<double>(rng, 3, 5)), off), p.phi_qhat);
    auto a = qdgt_forward(clips, 8, za, p);
    auto b = qdgt_forward(clips, 8, zb, p);
    EXPECT_EQ(a.global.value(), b.global.value());
    for (std::size_t i = 0; i < a.locals.size(); ++i) EXPECT_EQ(a.locals[i].value(), b.locals[i].value());
  }
}

TEST(Qdgt, ForwardGradientMatchesFiniteDifferences) {
  Fixture fx(19);
  Rng rng(20);
  std::vector<data::FrameRecord> recs{random_frame(rng, 0, 2, 3, 6), random_frame(rng, 1, 2, 3, 6)};
  auto q = random_matrix<double>(rng, 3, 5);
  auto probe_g = random_matrix<double>(rng, 1, 16);
  auto probe_l = random_matrix<double>(rng, 1, 16);
  std::function<V(Tape<double>&)> loss = [&](Tape<double>& tape) {
    auto p = QdgtParams<double>::bind(fx.layout, tape);
    std::vector<std::vector<FrameGraph<double>>> clips(kClips);
    for (std::size_t t = 0; t < 2; ++t) {
      auto g = build_frame_graph(recs[t], p.graph, 3);
      g.t = t;
      clips[0].push_back(std::move(g));
    }
    auto z = project_tokens(V::constant(q), p.phi_qhat);
    auto out = qdgt_forward(clips, 2, z, p);
    V total = sum_all(mul(out.global, V::constant(probe_g)));
    for (auto& l : out.locals) total = add(total, sum_all(mul(l, V::constant(probe_l))));
    return total;
  };
  for (const auto& c : grad_check_params<double>(fx.store, loss, 1e-4)) EXPECT_LE(c.max_rel_error, 1e-3) << c.name;
}
