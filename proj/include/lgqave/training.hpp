#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <mutex>
#include <numbers>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "lgqave/model.hpp"

namespace lgqave {

struct TrainConfig {
  double lambda = 1.0;
  double lr = 5e-5;
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  double mask_keep_rate = 0.9;
  /// Weight of the selector alignment term; it is optimized but not reported in `loss`.
  double selector_weight = 1.0;
  std::size_t selector_negatives = 3;
  std::size_t hard_negatives = 4;
  std::size_t patience = 5;
  std::size_t threads = 0;  // 0: LGQAVE_THREADS or hardware concurrency

  void validate() const {
    if (!(lambda >= 0.0)) throw std::invalid_argument("lambda must be nonnegative");
    if (!(lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
    if (epochs == 0 || epochs > 30) throw std::invalid_argument("epochs must be in [1, 30]");
    if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
    if (!(mask_keep_rate >= 0.0 && mask_keep_rate <= 1.0)) throw std::invalid_argument("mask keep rate must lie in [0, 1]");
    if (!(selector_weight >= 0.0)) throw std::invalid_argument("selector weight must be nonnegative");
  }
};

/// -log(e^pos / (e^pos + sum e^neg)), evaluated with log-sum-exp.
inline double contrastive_loss(double pos, const std::vector<double>& negs) {
  if (negs.empty()) throw std::invalid_argument("contrastive_loss: need at least one negative");
  double mx = pos;
  for (double n : negs) mx = std::max(mx, n);
  double s = std::exp(pos - mx);
  for (double n : negs) s += std::exp(n - mx);
  return mx + std::log(s) - pos;
}

/// lr0 * (1 + cos(pi * step / total)) / 2.
inline double cosine_lr(std::size_t step, std::size_t total_steps, double lr0) {
  if (step > total_steps) throw std::invalid_argument("cosine_lr: step beyond schedule");
  if (total_steps == 0) return lr0;
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps)));
}

/// Negative answers for one episode of a batch.
struct NegativeSet {
  struct Ref {
    std::size_t episode;  // position in the batch
    std::size_t answer;   // row of that episode's answer bank
    bool operator==(const Ref&) const = default;
  };
  std::vector<Ref> refs;
};

/// Multi-choice: every wrong option of the episode. Open-ended: the positives
/// of the other batch episodes plus up to `hard` seeded draws from
/// same-category answers that are not the positive.
inline NegativeSet sample_negatives(std::size_t self, const std::vector<const data::Episode*>& batch,
                                    std::uint64_t seed, std::size_t hard = 4) {
  const auto& ep = *batch.at(self);
  NegativeSet out;
  if (ep.qa_mode == data::QaMode::kMultiChoice) {
    for (std::size_t l = 0; l < ep.answer_bank.dim(0); ++l)
      if (l != ep.label) out.refs.push_back({self, l});
    return out;
  }
  for (std::size_t j = 0; j < batch.size(); ++j)
    if (j != self) out.refs.push_back({j, batch[j]->label});
  std::vector<NegativeSet::Ref> pool;
  for (std::size_t j = 0; j < batch.size(); ++j) {
    if (batch[j]->category != ep.category) continue;
    for (std::size_t l = 0; l < batch[j]->answer_bank.dim(0); ++l) {
      if (j == self ? l == ep.label : l == batch[j]->label) continue;
      pool.push_back({j, l});
    }
  }
  Rng rng(seed);
  for (std::size_t k = 0; k < hard && !pool.empty(); ++k) {
    const std::size_t pick = rng.below(pool.size());
    out.refs.push_back(pool[pick]);
    pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(pick));
  }
  return out;
}

/// Candidate rows for an open-ended episode: positive first, then negatives.
inline Tensor<float> open_ended_pool(std::size_t self, const std::vector<const data::Episode*>& batch,
                                     const NegativeSet& negs) {
  const auto& ep = *batch[self];
  const std::size_t w = ep.answer_bank.dim(1);
  Tensor<float> pool({1 + negs.refs.size(), w});
  auto copy_row = [&](std::size_t dst, const data::Episode& src, std::size_t row) {
    if (src.answer_bank.dim(1) != w) throw ShapeError("answer widths differ inside a batch");
    for (std::size_t k = 0; k < w; ++k) pool(dst, k) = src.answer_bank(row, k);
  };
  copy_row(0, ep, ep.label);
  for (std::size_t i = 0; i < negs.refs.size(); ++i) copy_row(1 + i, *batch[negs.refs[i].episode], negs.refs[i].answer);
  return pool;
}

/// Runs fn(i) for i in [0, n) on up to `threads` workers.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr err;
  std::mutex err_mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(err_mu);
          if (!err) err = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

/// Worker count from LGQAVE_THREADS, else the hardware.
inline std::size_t default_threads() {
  if (const char* env = std::getenv("LGQAVE_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Per-token keep mask drawn with the given keep rate.
inline std::vector<std::uint8_t> sample_question_mask(std::size_t m, double keep, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::uint8_t> mask(m);
  for (auto& v : mask) v = rng.bernoulli(keep) ? 1 : 0;
  return mask;
}

/// Loss components of one episode inside a batch.
template <typename T>
struct EpisodeLoss {
  Var<T> objective;  // what is differentiated
  double loss = 0.0, l_vqa = 0.0, l_vq = 0.0, l_sel = 0.0;
  bool has_vq = false;
};

/// Builds the batch context of episode `self` and runs its forward pass.
template <typename T>
EpisodeOutput<T> forward_in_batch(std::size_t self, const std::vector<const data::Episode*>& batch,
                                  const BoundModel<T>& m, const TrainConfig& tc,
                                  const std::vector<std::uint8_t>& question_mask, std::uint64_t draw_seed) {
  const auto& ep = *batch[self];
  BatchContext ctx;
  for (std::size_t j = 0; j < batch.size(); ++j)
    if (j != self) ctx.other_questions.push_back(&batch[j]->question_tokens);
  const std::size_t k = std::min(tc.selector_negatives, batch.size() - 1);
  for (std::size_t j = 1; j <= k; ++j) ctx.selector_negatives.push_back(&batch[(self + j) % batch.size()]->question_tokens);
  if (ep.qa_mode == data::QaMode::kOpenEnded) {
    ctx.open_pool = open_ended_pool(self, batch, sample_negatives(self, batch, draw_seed, tc.hard_negatives));
  }
  const bool sel = tc.selector_weight > 0.0 && m.cfg.sampling;
  return forward_episode(ep, m, question_mask, &ctx, sel);
}

template <typename T>
EpisodeLoss<T> episode_loss(const EpisodeOutput<T>& out, const TrainConfig& tc) {
  EpisodeLoss<T> r;
  r.l_vqa = out.l_vqa.item();
  Var<T> total = out.l_vqa;
  if (out.l_vq.defined()) {
    r.has_vq = true;
    r.l_vq = out.l_vq.item();
    if (tc.lambda != 0.0) total = add(total, scale(out.l_vq, static_cast<T>(tc.lambda)));
  }
  r.loss = total.item();
  if (out.l_sel.defined() && tc.selector_weight > 0.0) {
    r.l_sel = out.l_sel.item();
    total = add(total, scale(out.l_sel, static_cast<T>(tc.selector_weight)));
  }
  r.objective = total;
  return r;
}

/// Reported loss of a batch: mean of L_vqa + lambda L_vq over its episodes.
struct StepStats {
  double loss = 0.0, l_vqa = 0.0, l_vq = 0.0, l_sel = 0.0;
  bool vq_skipped = false;
};

/// Forward, backward and one Adam update over a batch. Gradients are summed in
/// batch order so the result does not depend on the worker count.
template <typename T>
StepStats train_step(Model<T>& model, AdamState<T>& adam, const std::vector<const data::Episode*>& batch,
                     const TrainConfig& tc, double lr, std::uint64_t step_seed, std::size_t threads = 1) {
  const std::size_t b = batch.size();
  if (b == 0) throw std::invalid_argument("train_step: empty batch");
  std::vector<std::vector<Tensor<T>>> grads(b);
  std::vector<EpisodeLoss<T>> losses(b);
  parallel_for(b, threads, [&](std::size_t i) {
    Tape<T> tape(model.params);
    auto bound = BoundModel<T>::bind(model.layout, tape);
    const auto& ep = *batch[i];
    auto mask = sample_question_mask(ep.question_tokens.dim(0), tc.mask_keep_rate, derive_seed(step_seed, 2 * i));
    auto out = forward_in_batch(i, batch, bound, tc, mask, derive_seed(step_seed, 2 * i + 1));
    auto l = episode_loss(out, tc);
    if (!std::isfinite(l.loss) || !std::isfinite(l.l_sel)) {
      throw NumericError("non-finite loss in episode '" + ep.video_id + "'");
    }
    backward(scale(l.objective, static_cast<T>(1.0 / static_cast<double>(b))));
    grads[i] = model.params.zeros_like();
    tape.accumulate_grads(grads[i]);
    losses[i] = std::move(l);
  });
  auto total = model.params.zeros_like();
  for (const auto& g : grads)
    for (std::size_t p = 0; p < total.size(); ++p)
      for (std::size_t k = 0; k < total[p].size(); ++k) total[p][k] += g[p][k];
  for (const auto& g : total)
    if (!g.all_finite()) throw NumericError("non-finite gradient");
  adam_step(model.params, total, adam, lr);

  StepStats s;
  for (const auto& l : losses) {
    s.loss += l.loss / b;
    s.l_vqa += l.l_vqa / b;
    s.l_vq += l.l_vq / b;
    s.l_sel += l.l_sel / b;
  }
  s.vq_skipped = !losses.front().has_vq;
  return s;
}

/// Evaluation-time forward (all question tokens kept) and prediction.
template <typename T>
std::size_t predict_episode(const Model<T>& model, const data::Episode& ep) {
  Tape<T> tape(model.params, false);
  auto bound = BoundModel<T>::bind(model.layout, tape);
  auto out = forward_episode(ep, bound, all_tokens(ep.question_tokens.dim(0)));
  return predict(ep, out, bound.w_cat);
}

/// Fraction of episodes whose predicted answer equals the label.
template <typename T>
double evaluate_accuracy(const Model<T>& model, const std::vector<data::Episode>& eps, std::size_t threads = 1) {
  if (eps.empty()) throw std::invalid_argument("evaluate_accuracy: empty split");
  std::vector<std::uint8_t> hit(eps.size(), 0);
  parallel_for(eps.size(), threads, [&](std::size_t i) { hit[i] = predict_episode(model, eps[i]) == eps[i].label; });
  std::size_t n = 0;
  for (auto h : hit) n += h;
  return static_cast<double>(n) / static_cast<double>(eps.size());
}

struct TrainResult {
  std::size_t epochs_run = 0;
  std::size_t steps = 0;
  double best_val_accuracy = -1.0;
  std::size_t best_epoch = 0;
  std::vector<double> val_accuracy;
  double last_loss = 0.0;
};

/// Epoch loop with cosine decay, early stopping on validation accuracy and an
/// NDJSON metrics stream. The best-validation parameters are restored at the end.
template <typename T>
TrainResult train(Model<T>& model, const std::vector<data::Episode>& train_set, const std::vector<data::Episode>& val_set,
                  const TrainConfig& tc, std::ostream* metrics = nullptr) {
  tc.validate();
  if (train_set.empty()) throw std::invalid_argument("train: empty training split");
  const std::size_t threads = tc.threads ? tc.threads : default_threads();
  const std::size_t per_epoch = (train_set.size() + tc.batch_size - 1) / tc.batch_size;
  const std::size_t total = per_epoch * tc.epochs;
  AdamState<T> adam = AdamState<T>::for_params(model.params);
  Rng order_rng(derive_seed(tc.seed, 0x0de));
  std::vector<std::size_t> order(train_set.size());
  TrainResult r;
  std::optional<ParamStore<T>> best;
  std::size_t since_best = 0;
  bool warned = false;

  for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[order_rng.below(i)]);
    for (std::size_t s = 0; s < per_epoch; ++s) {
      std::vector<const data::Episode*> batch;
      for (std::size_t i = s * tc.batch_size; i < std::min(order.size(), (s + 1) * tc.batch_size); ++i)
        batch.push_back(&train_set[order[i]]);
      const double lr = cosine_lr(r.steps, total, tc.lr);
      auto st = train_step(model, adam, batch, tc, lr, derive_seed(tc.seed, 1000 + r.steps), threads);
      if (st.vq_skipped && !warned) {
        std::cerr << "warning: batch of one episode, question contrast skipped\n";
        warned = true;
      }
      r.last_loss = st.loss;
      if (metrics) {
        *metrics << nlohmann::json{{"step", r.steps}, {"lr", lr}, {"loss", st.loss}, {"l_vqa", st.l_vqa},
                                   {"l_vq", st.l_vq}, {"l_sel", st.l_sel}}
                        .dump()
                 << '\n';
      }
      ++r.steps;
    }
    r.epochs_run = epoch + 1;
    if (val_set.empty()) continue;
    const double acc = evaluate_accuracy(model, val_set, threads);
    r.val_accuracy.push_back(acc);
    if (metrics) *metrics << nlohmann::json{{"epoch", epoch}, {"val_accuracy", acc}}.dump() << std::endl;
    if (acc > r.best_val_accuracy) {
      r.best_val_accuracy = acc;
      r.best_epoch = epoch;
      best = model.params;
      since_best = 0;
    } else if (++since_best >= tc.patience) {
      break;
    }
  }
  if (best) model.params = std::move(*best);
  return r;
}

}  // namespace lgqave
