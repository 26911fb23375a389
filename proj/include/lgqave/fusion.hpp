#pragma once

#include <cmath>
#include <vector>

#include "lgqave/numcore.hpp"

namespace lgqave {

struct FusionLayout {
  ParamId w_q = 0, w_k = 0, w_v = 0;

  template <typename T>
  static FusionLayout create(ParamStore<T>& s, std::size_t d, Rng& rng) {
    return {s.add_uniform("fusion.w_q", d, d, rng), s.add_uniform("fusion.w_k", d, d, rng),
            s.add_uniform("fusion.w_v", d, d, rng)};
  }
};

template <typename T>
struct FusionParams {
  double gamma = 0.9;
  Var<T> w_q, w_k, w_v;

  static FusionParams bind(const FusionLayout& l, Tape<T>& tape, double gamma) {
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw std::invalid_argument("gamma must lie in [0, 1]");
    return {gamma, tape.param(l.w_q), tape.param(l.w_k), tape.param(l.w_v)};
  }
};

/// Single-head attention of the global feature over the locals.
template <typename T>
Var<T> cross_attention(const Var<T>& global, const Var<T>& locals, const FusionParams<T>& p) {
  const T inv = static_cast<T>(1.0 / std::sqrt(static_cast<double>(global.cols())));
  Var<T> att = softmax_rows(scale(matmul_nt(matmul(global, p.w_q), matmul(locals, p.w_k)), inv));
  return matmul(att, matmul(locals, p.w_v));
}

/// (1 - gamma) F_global + gamma CrossAtt(F_global, locals). The boundaries
/// return an operand unchanged so they hold bit-exactly.
template <typename T>
Var<T> fuse_final(const Var<T>& global, const std::vector<Var<T>>& locals, const FusionParams<T>& p) {
  if (locals.empty()) throw std::invalid_argument("fuse_final: at least one local representation required");
  if (p.gamma == 0.0) return global;
  Var<T> stacked = locals.size() == 1 ? locals[0] : concat_rows(locals);
  Var<T> ca = cross_attention(global, stacked, p);
  if (p.gamma == 1.0) return ca;
  return add(scale(global, static_cast<T>(1.0 - p.gamma)), scale(ca, static_cast<T>(p.gamma)));
}

/// Index of the largest score; ties go to the lowest index.
template <typename S>
std::size_t argmax_first(const std::vector<S>& s) {
  if (s.empty()) throw std::invalid_argument("argmax over an empty score list");
  std::size_t best = 0;
  for (std::size_t i = 1; i < s.size(); ++i)
    if (s[i] > s[best]) best = i;
  return best;
}

/// <F_final, A_l> for every row of the answer matrix.
template <typename T>
std::vector<double> similarity_scores(const Tensor<T>& f, const Tensor<T>& answers) {
  if (f.size() != answers.dim(1)) throw ShapeError("similarity: feature width != answer width");
  std::vector<double> s(answers.dim(0), 0.0);
  for (std::size_t l = 0; l < answers.dim(0); ++l)
    for (std::size_t k = 0; k < f.size(); ++k) s[l] += static_cast<double>(f[k]) * answers(l, k);
  return s;
}

template <typename T>
std::size_t predict_objective(const Tensor<T>& f, const Tensor<T>& answers) {
  if (answers.dim(0) < 2) throw std::invalid_argument("predict_objective: need at least two options");
  return argmax_first(similarity_scores(f, answers));
}

/// argmax_l <F_final, A_l> * <q_pooled, A_l>.
template <typename T>
std::size_t predict_subjective(const Tensor<T>& f, const Tensor<T>& q_pooled, const Tensor<T>& answers) {
  if (answers.dim(0) < 2) throw std::invalid_argument("predict_subjective: need at least two options");
  auto v = similarity_scores(f, answers);
  auto q = similarity_scores(q_pooled, answers);
  for (std::size_t l = 0; l < v.size(); ++l) v[l] *= q[l];
  return argmax_first(v);
}

/// Projections that turn (question, answer) or (video, question) pairs into
/// scoring vectors. Both are 2d x d and start at zero.
struct AnswerHeadLayout {
  ParamId w_cat = 0;  // [q_mean ; answer] -> candidate
  ParamId w_oe = 0;   // [F_final ; q_mean] -> query for open-ended answers

  template <typename T>
  static AnswerHeadLayout create(ParamStore<T>& s, std::size_t d) {
    return {s.add("head.w_cat", Tensor<T>({2 * d, d})), s.add("head.w_oe", Tensor<T>({2 * d, d}))};
  }
};

/// Candidate rows W_cat [q_mean ; a_l] for a bank of projected answers.
template <typename T>
Var<T> candidate_embeddings(const Var<T>& q_mean, const Var<T>& answers, const Var<T>& w_cat) {
  std::vector<std::size_t> rep(answers.rows(), 0);
  return matmul(concat_cols<T>({gather_rows(q_mean, rep), answers}), w_cat);
}

}  // namespace lgqave
