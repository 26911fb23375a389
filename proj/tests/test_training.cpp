#include <gtest/gtest.h>

#include <sstream>

#include "lgqave/training.hpp"
#include "test_util.hpp"

using namespace lgqave;
using lgqave::testing::EpisodeShape;
using lgqave::testing::random_episode;
using lgqave::testing::random_matrix;

namespace {

ModelConfig toy_config(std::size_t d = 16) {
  ModelConfig cfg;
  cfg.qdgt.c = 8;
  cfg.qdgt.c_text = 8;
  cfg.qdgt.d = d;
  cfg.qdgt.heads = 8;
  return cfg;
}

std::vector<data::Episode> toy_batch(std::uint64_t seed, std::size_t n, EpisodeShape shape = {}) {
  Rng rng(seed);
  std::vector<data::Episode> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(random_episode(rng, shape, "ep" + std::to_string(i)));
    out.back().category = i % 2 ? "odd" : "even";
  }
  return out;
}

std::vector<const data::Episode*> ptrs(const std::vector<data::Episode>& eps) {
  std::vector<const data::Episode*> out;
  for (const auto& e : eps) out.push_back(&e);
  return out;
}

template <typename T>
void randomize_heads(Model<T>& m, std::uint64_t seed) {
  Rng rng(seed);
  for (ParamId id : {m.layout.head.w_cat, m.layout.head.w_oe})
    for (auto& v : m.params.value(id).storage()) v = static_cast<T>(rng.uniform(-0.3, 0.3));
}

}  // namespace

TEST(ContrastiveLoss, Examples) {
  EXPECT_NEAR(contrastive_loss(0.3, {0.3, 0.3, 0.3, 0.3}), 1.6094379, 1e-7);
  EXPECT_NEAR(contrastive_loss(1.0, {0.0, 0.0}), 0.55144471, 1e-8);
  EXPECT_LT(contrastive_loss(60.0, {0.0, 0.0}), 1e-20);
  EXPECT_THROW(contrastive_loss(1.0, {}), std::invalid_argument);
}

TEST(ContrastiveLoss, MoreNegativesNeverLower) {
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> negs(1 + rng.below(6));
    for (auto& n : negs) n = rng.uniform(-3, 3);
    const double pos = rng.uniform(-3, 3);
    auto more = negs;
    more.push_back(rng.uniform(-3, 3));
    EXPECT_GE(contrastive_loss(pos, more), contrastive_loss(pos, negs));
    auto perm = negs;
    std::reverse(perm.begin(), perm.end());
    EXPECT_NEAR(contrastive_loss(pos, perm), contrastive_loss(pos, negs), 1e-12);
  }
}

TEST(ContrastiveLoss, MatchesCrossEntropyOp) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    auto logits = random_matrix<double>(rng, 1, 8, 3.0);
    std::vector<double> negs(logits.storage().begin() + 1, logits.storage().end());
    EXPECT_NEAR(cross_entropy_row(Var<double>::constant(logits), 0).item(), contrastive_loss(logits[0], negs), 1e-12);
  }
}

TEST(CosineLr, Examples) {
  EXPECT_DOUBLE_EQ(cosine_lr(0, 100, 5e-5), 5e-5);
  EXPECT_NEAR(cosine_lr(100, 100, 5e-5), 0.0, 1e-20);
  EXPECT_NEAR(cosine_lr(50, 100, 5e-5), 2.5e-5, 1e-18);
  EXPECT_THROW(cosine_lr(101, 100, 1.0), std::invalid_argument);
}

TEST(SampleNegatives, MultiChoiceUsesWrongOptions) {
  auto eps = toy_batch(3, 1, {.answers = 5});
  eps[0].label = 2;
  auto n = sample_negatives(0, ptrs(eps), 1);
  std::vector<std::size_t> idx;
  for (auto& r : n.refs) idx.push_back(r.answer);
  EXPECT_EQ(idx, (std::vector<std::size_t>{0, 1, 3, 4}));
}

TEST(SampleNegatives, OpenEndedForeignAndHard) {
  auto eps = toy_batch(4, 3, {.answers = 4});
  for (auto& e : eps) e.qa_mode = data::QaMode::kOpenEnded;
  auto batch = ptrs(eps);
  for (std::size_t i = 0; i < 3; ++i) {
    auto n = sample_negatives(i, batch, 7, 0);
    ASSERT_EQ(n.refs.size(), 2u);
    for (auto& r : n.refs) {
      EXPECT_NE(r.episode, i);
      EXPECT_EQ(r.answer, eps[r.episode].label);
    }
    auto h = sample_negatives(i, batch, 7, 4);
    EXPECT_LE(h.refs.size(), 6u);
    EXPECT_GT(h.refs.size(), 2u);
    for (std::size_t k = 2; k < h.refs.size(); ++k) {
      EXPECT_EQ(eps[h.refs[k].episode].category, eps[i].category);
      EXPECT_FALSE(h.refs[k].episode == i && h.refs[k].answer == eps[i].label);
    }
    EXPECT_EQ(sample_negatives(i, batch, 99, 4).refs, sample_negatives(i, batch, 99, 4).refs);
  }
}

TEST(Losses, ZeroHeadsGiveLogFive) {
  auto m = Model<double>::create(toy_config(), 1);
  auto eps = toy_batch(5, 2, {.answers = 5});
  Tape<double> tape(m.params);
  auto bound = BoundModel<double>::bind(m.layout, tape);
  TrainConfig tc;
  auto out = forward_in_batch(0, ptrs(eps), bound, tc, all_tokens(2), 0);
  EXPECT_NEAR(out.l_vqa.item(), std::log(5.0), 1e-12);
  auto mf = Model<float>::create(toy_config(), 1);
  Tape<float> tf(mf.params);
  auto bf = BoundModel<float>::bind(mf.layout, tf);
  auto of = forward_in_batch(0, ptrs(eps), bf, tc, all_tokens(2), 0);
  EXPECT_NEAR(of.l_vqa.item(), 1.6094379, 1e-6);
}

TEST(Losses, LambdaZeroIsVqaAndPartsAdd) {
  auto m = Model<double>::create(toy_config(), 2);
  randomize_heads(m, 3);
  auto eps = toy_batch(6, 2);
  Tape<double> tape(m.params);
  auto bound = BoundModel<double>::bind(m.layout, tape);
  TrainConfig tc;
  tc.selector_weight = 0.0;
  auto out = forward_in_batch(0, ptrs(eps), bound, tc, all_tokens(2), 0);
  tc.lambda = 0.0;
  EXPECT_EQ(episode_loss(out, tc).loss, out.l_vqa.item());
  tc.lambda = 1.0;
  auto l = episode_loss(out, tc);

  // Independent evaluation of both parts from the forward quantities.
  std::vector<double> a_scores;
  auto cand = candidate_embeddings(out.q_mean, out.answers, bound.w_cat).value();
  for (std::size_t r = 0; r < cand.dim(0); ++r) {
    double s = 0.0;
    for (std::size_t k = 0; k < 16; ++k) s += out.f_final.value()[k] * cand(r, k);
    a_scores.push_back(s);
  }
  std::vector<double> a_negs;
  for (std::size_t r = 0; r < a_scores.size(); ++r)
    if (r != eps[0].label) a_negs.push_back(a_scores[r]);
  const double vqa = contrastive_loss(a_scores[eps[0].label], a_negs);
  auto q_other = token_mean(eps[1].question_tokens, bound.phi_q).value();
  double pos = 0.0, neg = 0.0;
  for (std::size_t k = 0; k < 16; ++k) {
    pos += out.f_final.value()[k] * out.q_mean.value()[k];
    neg += out.f_final.value()[k] * q_other[k];
  }
  EXPECT_NEAR(l.loss, vqa + contrastive_loss(pos, {neg}), 1e-10);
}

TEST(Losses, OpenEndedPools) {
  auto m = Model<double>::create(toy_config(), 4);
  randomize_heads(m, 5);
  auto eps = toy_batch(7, 4, {.answers = 3});
  for (auto& e : eps) e.qa_mode = data::QaMode::kOpenEnded;
  Tape<double> tape(m.params);
  auto bound = BoundModel<double>::bind(m.layout, tape);
  TrainConfig tc;
  auto out = forward_in_batch(0, ptrs(eps), bound, tc, all_tokens(2), 11);
  // Brute-force softmax over the pool.
  const auto& lg = out.answer_logits.value();
  double z = 0.0;
  for (std::size_t j = 0; j < lg.size(); ++j) z += std::exp(lg[j]);
  EXPECT_NEAR(out.l_vqa.item(), -std::log(std::exp(lg[0]) / z), 1e-10);
  EXPECT_GE(lg.size(), 4u);

  // Zero open-ended head: pool of two equal scores.
  m.params.value(m.layout.head.w_oe).fill(0.0);
  Tape<double> t2(m.params);
  auto b2 = BoundModel<double>::bind(m.layout, t2);
  BatchContext ctx;
  ctx.open_pool = Tensor<float>({2, 8});
  auto o2 = forward_episode(eps[0], b2, all_tokens(2), &ctx);
  EXPECT_NEAR(o2.l_vqa.item(), std::log(2.0), 1e-12);
}

TEST(Losses, LocalOffGivesGlobal) {
  auto cfg = toy_config();
  cfg.local_repr = false;
  auto m = Model<double>::create(cfg, 6);
  auto eps = toy_batch(8, 1);
  Tape<double> tape(m.params);
  auto bound = BoundModel<double>::bind(m.layout, tape);
  EXPECT_EQ(bound.fusion.gamma, 0.0);
  auto out = forward_episode(eps[0], bound, all_tokens(2));
  EXPECT_EQ(out.n_locals, 0u);
  // Recompute the global path directly.
  auto clips = build_graph_sequence(eps[0], out.selection, bound.qdgt.graph, cfg.grounding);
  auto z = project_tokens(Var<double>::constant(eps[0].question_tokens.cast<double>()), bound.qdgt.phi_qhat);
  auto lg = qdgt_forward(clips, eps[0].frames.size(), z, bound.qdgt, false);
  EXPECT_EQ(out.f_final.value(), lg.global.value());
}

TEST(Losses, BatchedFrameScoresMatchPerFrame) {
  auto m = Model<double>::create(toy_config(), 7);
  auto eps = toy_batch(9, 1, {.frames = 5, .patches = 4});
  // Pad one frame with zero rows.
  auto& e = eps[0].frames[2].patch_embeddings;
  Tensor<float> padded({6, e.dim(1)});
  std::copy(e.storage().begin(), e.storage().end(), padded.data());
  e = padded;
  Tape<double> tape(m.params, false);
  auto b = BoundModel<double>::bind(m.layout, tape);
  auto stack = stack_patches<double>(eps[0]);
  auto q = l2_normalize_rows(matmul(constant_from<double>(eps[0].question_tokens), b.phi_q));
  auto all = frame_scores(l2_normalize_rows(matmul(stack.patches, b.phi_e)), stack.frame_mean, q).value();
  for (std::size_t t = 0; t < 5; ++t) {
    const auto& pe = eps[0].frames[t].patch_embeddings;
    auto et = l2_normalize_rows(matmul(constant_from<double>(pe), b.phi_e));
    EXPECT_NEAR(all[t], frame_score(et, q, nonzero_rows(pe)).item(), 1e-12);
  }
}

TEST(Training, FullModelGradientCheck) {
  auto cfg = toy_config();
  auto m = Model<double>::create(cfg, 8);
  randomize_heads(m, 9);
  auto eps = toy_batch(10, 2, {.frames = 1, .objects = 2, .answers = 3});
  auto batch = ptrs(eps);
  TrainConfig tc;
  std::function<Var<double>(Tape<double>&)> loss = [&](Tape<double>& tape) {
    auto b = BoundModel<double>::bind(m.layout, tape);
    return episode_loss(forward_in_batch(0, batch, b, tc, all_tokens(2), 0), tc).objective;
  };
  for (const auto& c : grad_check_params<double>(m.params, loss, 1e-4)) EXPECT_LE(c.max_rel_error, 1e-3) << c.name;
}

TEST(Training, DeterministicAcrossRunsAndThreads) {
  auto eps = toy_batch(11, 4);
  auto batch = ptrs(eps);
  TrainConfig tc;
  auto run = [&](std::size_t threads) {
    auto m = Model<float>::create(toy_config(), 12);
    auto adam = AdamState<float>::for_params(m.params);
    for (std::size_t s = 0; s < 3; ++s) train_step(m, adam, batch, tc, 1e-3, derive_seed(5, s), threads);
    return m;
  };
  auto a = run(1), b = run(1), c = run(3);
  for (ParamId p = 0; p < a.params.size(); ++p) {
    EXPECT_EQ(a.params.value(p), b.params.value(p)) << a.params.name(p);
    EXPECT_EQ(a.params.value(p), c.params.value(p)) << a.params.name(p);
  }
}

TEST(Training, AllParametersMove) {
  // Eight frames put two in every clip; one open-ended episode reaches its head.
  auto eps = toy_batch(13, 4, {.frames = 8});
  eps[3].qa_mode = data::QaMode::kOpenEnded;
  auto m = Model<float>::create(toy_config(), 14);
  auto before = m.params;
  auto adam = AdamState<float>::for_params(m.params);
  TrainConfig tc;
  for (std::size_t s = 0; s < 2; ++s) train_step(m, adam, ptrs(eps), tc, 1e-3, s);
  for (ParamId p = 0; p < m.params.size(); ++p)
    EXPECT_GT(max_abs_diff(m.params.value(p), before.value(p)), 0.0) << m.params.name(p);
}

TEST(Training, NonFiniteLossNamesEpisode) {
  auto eps = toy_batch(15, 2);
  eps[1].answer_bank(0, 0) = std::numeric_limits<float>::infinity();
  auto m = Model<float>::create(toy_config(), 16);
  randomize_heads(m, 17);
  auto adam = AdamState<float>::for_params(m.params);
  TrainConfig tc;
  try {
    train_step(m, adam, ptrs(eps), tc, 1e-3, 0);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("ep1"), std::string::npos) << e.what();
  }
}

TEST(Training, OverfitsSingleEpisode) {
  auto eps = toy_batch(18, 1, {.frames = 4, .answers = 5});
  auto m = Model<float>::create(toy_config(), 19);
  auto adam = AdamState<float>::for_params(m.params);
  TrainConfig tc;
  double loss = 1e9;
  std::size_t steps = 0;
  for (; steps < 200 && loss >= 0.01; ++steps) loss = train_step(m, adam, ptrs(eps), tc, 1e-2, steps).loss;
  EXPECT_LT(loss, 0.01) << "after " << steps << " steps";
}

TEST(Training, LoopLogsAndStops) {
  auto train_set = toy_batch(20, 6);
  auto val = toy_batch(21, 2);
  auto m = Model<float>::create(toy_config(), 22);
  TrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 4;
  tc.lr = 1e-3;
  std::ostringstream log;
  auto r = train(m, train_set, val, tc, &log);
  EXPECT_EQ(r.steps, 6u);
  std::istringstream in(log.str());
  std::size_t step_lines = 0, epoch_lines = 0;
  for (std::string line; std::getline(in, line);) {
    auto j = nlohmann::json::parse(line);
    if (j.contains("step")) {
      ++step_lines;
      for (auto k : {"lr", "loss", "l_vqa", "l_vq"}) EXPECT_TRUE(j.contains(k));
    } else {
      ++epoch_lines;
      EXPECT_TRUE(j.contains("val_accuracy"));
    }
  }
  EXPECT_EQ(step_lines, 6u);
  EXPECT_EQ(epoch_lines, 3u);
}
