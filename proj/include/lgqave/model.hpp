#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "lgqave/datamodel.hpp"
#include "lgqave/frame_select.hpp"
#include "lgqave/fusion.hpp"
#include "lgqave/graphs.hpp"
#include "lgqave/qdgt.hpp"

namespace lgqave {

/// Architecture and inference switches.
struct ModelConfig {
  QdgtConfig qdgt;
  double beta = 0.4;
  double gamma = 0.9;
  double temperature = 1.0;  // contrastive logits are divided by this
  bool sampling = true;
  bool grounding = true;
  bool local_repr = true;
  bool global_repr = true;
  /// Sharpness of the soft maximum over frames in the selector alignment loss.
  double selector_sharpness = 10.0;

  void validate() const {
    if (!(beta >= 0.0 && beta <= 1.0)) throw std::invalid_argument("beta must lie in [0, 1]");
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw std::invalid_argument("gamma must lie in [0, 1]");
    if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be positive");
    if (!local_repr && !global_repr) throw std::invalid_argument("at least one of local/global representations must be on");
    if (qdgt.d % qdgt.heads != 0) throw std::invalid_argument("hidden width must be divisible by the head count");
  }
};

struct ModelLayout {
  ModelConfig cfg;
  ParamId phi_e = 0, phi_q = 0;
  QdgtLayout qdgt;
  FusionLayout fusion;
  AnswerHeadLayout head;

  template <typename T>
  static ModelLayout create(ParamStore<T>& s, const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    ModelLayout l;
    l.cfg = cfg;
    l.phi_e = s.add_uniform("select.phi_e", cfg.qdgt.c, cfg.qdgt.d, rng);
    l.phi_q = s.add_uniform("select.phi_q", cfg.qdgt.c_text, cfg.qdgt.d, rng);
    l.qdgt = QdgtLayout::create(s, cfg.qdgt, rng);
    l.fusion = FusionLayout::create(s, cfg.qdgt.d, rng);
    l.head = AnswerHeadLayout::create(s, cfg.qdgt.d);
    return l;
  }
};

/// A model: its layout and the parameter values.
template <typename T>
struct Model {
  ParamStore<T> params;
  ModelLayout layout;

  static Model create(const ModelConfig& cfg, std::uint64_t seed) {
    Model m;
    Rng rng(derive_seed(seed, 0x1a7e));
    m.layout = ModelLayout::create(m.params, cfg, rng);
    return m;
  }
  const ModelConfig& config() const { return layout.cfg; }
};

/// All parameters bound to one tape.
template <typename T>
struct BoundModel {
  ModelConfig cfg;
  Var<T> phi_e, phi_q;
  QdgtParams<T> qdgt;
  FusionParams<T> fusion;
  Var<T> w_cat, w_oe;

  static BoundModel bind(const ModelLayout& l, Tape<T>& tape) {
    BoundModel b;
    b.cfg = l.cfg;
    b.phi_e = tape.param(l.phi_e);
    b.phi_q = tape.param(l.phi_q);
    b.qdgt = QdgtParams<T>::bind(l.qdgt, tape);
    b.qdgt.cfg.pool = l.cfg.qdgt.pool;
    b.fusion = FusionParams<T>::bind(l.fusion, tape, l.cfg.local_repr ? l.cfg.gamma : 0.0);
    b.w_cat = tape.param(l.head.w_cat);
    b.w_oe = tape.param(l.head.w_oe);
    return b;
  }
};

/// Every patch of every frame stacked into one matrix, plus a (T x rows)
/// averaging operator over each frame's non-padding rows.
template <typename T>
struct PatchStack {
  Var<T> patches;
  Var<T> frame_mean;
  std::size_t n_frames = 0;
};

template <typename T>
PatchStack<T> stack_patches(const data::Episode& ep) {
  std::size_t rows = 0;
  const std::size_t c = ep.frames.front().width();
  for (const auto& f : ep.frames) rows += f.patch_embeddings.dim(0);
  Tensor<T> all({rows, c});
  Tensor<T> avg({ep.frames.size(), rows});
  std::size_t r0 = 0;
  for (std::size_t t = 0; t < ep.frames.size(); ++t) {
    const auto& e = ep.frames[t].patch_embeddings;
    const auto mask = nonzero_rows(e);
    std::size_t live = 0;
    for (auto m : mask) live += m;
    for (std::size_t i = 0; i < e.dim(0); ++i) {
      for (std::size_t k = 0; k < c; ++k) all(r0 + i, k) = static_cast<T>(e(i, k));
      if (mask[i]) avg(t, r0 + i) = static_cast<T>(1.0 / static_cast<double>(live));
    }
    r0 += e.dim(0);
  }
  return {Var<T>::constant(std::move(all)), Var<T>::constant(std::move(avg)), ep.frames.size()};
}

/// Frame scores of every frame against one question, as a (T x 1) column.
/// Equal to frame_score on each frame: the mean entry of an attended row is
/// the softmax-weighted mean of the token means.
template <typename T>
Var<T> frame_scores(const Var<T>& e_unit, const Var<T>& frame_mean, const Var<T>& q_unit) {
  Tensor<T> ones({q_unit.cols(), 1}, T(1.0 / static_cast<double>(q_unit.cols())));
  Var<T> token_mean = matmul(q_unit, Var<T>::constant(std::move(ones)));
  return matmul(frame_mean, matmul(softmax_rows(matmul_nt(e_unit, q_unit)), token_mean));
}

/// Per-episode context drawn from the rest of the batch.
struct BatchContext {
  std::vector<const Tensor<float>*> other_questions;  // L_vq negatives
  std::vector<const Tensor<float>*> selector_negatives;
  Tensor<float> open_pool;  // open-ended candidate answers, positive first
};

template <typename T>
struct EpisodeOutput {
  Selection selection;
  Var<T> f_final;
  Var<T> q_mean;
  Var<T> answers;       // projected own answer bank
  Var<T> answer_logits; // over own options (multi-choice) or the pool (open-ended)
  Var<T> l_vqa, l_vq, l_sel;
  std::size_t n_locals = 0;
};

inline std::vector<std::uint8_t> all_tokens(std::size_t m) { return std::vector<std::uint8_t>(m, 1); }

template <typename T>
Var<T> token_mean(const Tensor<float>& q, const Var<T>& phi_q) {
  return mean_rows(matmul(constant_from<T>(q), phi_q));
}

/// Forward pass of one episode. `ctx` may be null at inference; losses that
/// need it are then left undefined.
template <typename T>
EpisodeOutput<T> forward_episode(const data::Episode& ep, const BoundModel<T>& m,
                                 const std::vector<std::uint8_t>& question_mask, const BatchContext* ctx = nullptr,
                                 bool want_selector_loss = false) {
  const auto& cfg = m.cfg;
  EpisodeOutput<T> out;
  const Var<T> q_raw = constant_from<T>(ep.question_tokens);

  // Frame selection.
  auto stack = stack_patches<T>(ep);
  Var<T> e_unit = l2_normalize_rows(matmul(stack.patches, m.phi_e));
  auto unit_question = [&](const Tensor<float>& q) { return l2_normalize_rows(matmul(constant_from<T>(q), m.phi_q)); };
  Var<T> own_scores = frame_scores(e_unit, stack.frame_mean, unit_question(ep.question_tokens));
  std::vector<double> raw(stack.n_frames);
  for (std::size_t t = 0; t < raw.size(); ++t) raw[t] = own_scores.value()[t];
  out.selection = select_video(raw, cfg.beta, cfg.sampling);

  if (want_selector_loss && ctx && !ctx->selector_negatives.empty()) {
    // Soft maximum of the frame scores for the own question against others.
    const T k = static_cast<T>(cfg.selector_sharpness * std::sqrt(static_cast<double>(cfg.qdgt.d)));
    std::vector<Var<T>> cols{own_scores};
    for (const auto* q : ctx->selector_negatives) cols.push_back(frame_scores(e_unit, stack.frame_mean, unit_question(*q)));
    Var<T> s = transpose(concat_cols(cols));  // (1 + negs) x T
    Var<T> smax = transpose(logsumexp_rows(scale(s, k)));
    out.l_sel = cross_entropy_row(smax, 0);
  }

  // Graphs and the graph transformer.
  auto clips = build_graph_sequence(ep, out.selection, m.qdgt.graph, cfg.grounding);
  Var<T> z = project_tokens(mask_question(q_raw, question_mask), m.qdgt.phi_qhat);
  auto lg = qdgt_forward(clips, ep.frames.size(), z, m.qdgt, cfg.local_repr);
  out.n_locals = lg.locals.size();
  if (!cfg.global_repr) {
    out.f_final = mean_rows(concat_rows(lg.locals));
  } else if (cfg.local_repr) {
    out.f_final = fuse_final(lg.global, lg.locals, m.fusion);
  } else {
    out.f_final = lg.global;
  }

  // Answer scoring.
  out.q_mean = mean_rows(matmul(q_raw, m.phi_q));
  out.answers = matmul(constant_from<T>(ep.answer_bank), m.phi_q);
  const T inv_tau = static_cast<T>(1.0 / cfg.temperature);
  if (ep.qa_mode == data::QaMode::kMultiChoice) {
    Var<T> cand = candidate_embeddings(out.q_mean, out.answers, m.w_cat);
    out.answer_logits = scale(matmul_nt(out.f_final, cand), inv_tau);
    out.l_vqa = cross_entropy_row(out.answer_logits, ep.label);
  } else if (ctx) {
    if (ctx->open_pool.rank() != 2 || ctx->open_pool.dim(0) == 0) {
      throw std::invalid_argument("open-ended answer pool is empty for episode '" + ep.video_id + "'");
    }
    Var<T> query = matmul(concat_cols<T>({out.f_final, out.q_mean}), m.w_oe);
    Var<T> pool_ans = matmul(constant_from<T>(ctx->open_pool), m.phi_q);
    out.answer_logits = scale(matmul_nt(query, pool_ans), inv_tau);
    out.l_vqa = cross_entropy_row(out.answer_logits, 0);
  }

  if (ctx && !ctx->other_questions.empty()) {
    // Token means of the other questions are taken before the (linear)
    // projection so they share one matmul.
    Tensor<T> means({ctx->other_questions.size(), ep.question_tokens.dim(1)});
    for (std::size_t i = 0; i < ctx->other_questions.size(); ++i) {
      const auto& q = *ctx->other_questions[i];
      if (q.dim(1) != means.dim(1)) throw ShapeError("other question has a different token width");
      for (std::size_t r = 0; r < q.dim(0); ++r)
        for (std::size_t c = 0; c < q.dim(1); ++c) means(i, c) += static_cast<T>(q(r, c)) / static_cast<T>(q.dim(0));
    }
    Var<T> others = matmul(Var<T>::constant(std::move(means)), m.phi_q);
    Var<T> qs = concat_rows<T>({out.q_mean, others});
    out.l_vq = cross_entropy_row(scale(matmul_nt(out.f_final, qs), inv_tau), 0);
  }
  return out;
}

/// Predicted answer index for an evaluated episode.
template <typename T>
std::size_t predict(const data::Episode& ep, const EpisodeOutput<T>& out, const Var<T>& w_cat) {
  if (ep.qa_mode == data::QaMode::kMultiChoice) {
    Var<T> cand = candidate_embeddings(out.q_mean, out.answers, w_cat);
    return predict_objective(out.f_final.value(), cand.value());
  }
  return predict_subjective(out.f_final.value(), out.q_mean.value(), out.answers.value());
}

}  // namespace lgqave
