#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "lgqave/datamodel.hpp"
#include "lgqave/frame_select.hpp"
#include "lgqave/training.hpp"

namespace lgqave::synth {

/// Generator settings. Every episode is a pure function of (seed, index).
struct SynthConfig {
  std::uint64_t seed = 7;
  std::size_t n_episodes = 2000;
  std::size_t frames = 32;
  std::size_t n_object_classes = 8;
  std::size_t n_answer_options = 5;
  std::size_t c = 64;
  double noise_std = 0.1;
  data::QaMode qa_mode = data::QaMode::kMultiChoice;

  std::size_t patches = 8;       // 4 x 2 grid of cells
  std::size_t span_min = 4;      // active span length range
  std::size_t span_max = 8;
  double p_true_box = 0.8;       // active frame grounds the asked-about actor
  double p_halluc_box = 0.3;     // distractor frame grounds an unrelated pair
  std::size_t n_background = 16;

  void validate() const {
    if (n_answer_options < 2) throw std::invalid_argument("need at least two answer options");
    if (!(noise_std >= 0.0)) throw std::invalid_argument("noise_std must be nonnegative");
    if (n_object_classes < 4 || n_object_classes < n_answer_options) {
      throw std::invalid_argument("need at least max(4, options) object classes");
    }
    if (frames == 0 || span_min == 0 || span_min > span_max || span_max > frames) {
      throw std::invalid_argument("active span must fit inside the video");
    }
    if (patches < 2 || patches > 8) throw std::invalid_argument("patches per frame must lie in [2, 8]");
  }
};

/// Shared prototype vectors. Text-space actors carry a positive mean so that
/// patches showing the asked-about actor attend to its question token; visual
/// vectors are the text vectors rotated by a fixed orthogonal map.
struct Prototypes {
  std::vector<Tensor<float>> actor, action, filler, background;  // rank-1, width c
  Tensor<double> rotation;                                        // c x c orthogonal, visual = text * rotation
};

namespace detail {

inline Tensor<float> unit(std::vector<double> v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  Tensor<float> t({v.size()});
  for (std::size_t i = 0; i < v.size(); ++i) t[i] = static_cast<float>(v[i] / n);
  return t;
}

inline Tensor<float> gaussian_unit(Rng& rng, std::size_t c, double shift = 0.0) {
  std::vector<double> v(c);
  for (auto& x : v) x = rng.normal() + shift;
  return unit(std::move(v));
}

/// Random orthogonal matrix by Gram-Schmidt on Gaussian rows.
inline Tensor<double> random_rotation(Rng& rng, std::size_t c) {
  Tensor<double> q({c, c});
  for (std::size_t i = 0; i < c; ++i) {
    std::vector<double> v(c);
    for (auto& x : v) x = rng.normal();
    for (std::size_t j = 0; j < i; ++j) {
      double dot = 0.0;
      for (std::size_t k = 0; k < c; ++k) dot += v[k] * q(j, k);
      for (std::size_t k = 0; k < c; ++k) v[k] -= dot * q(j, k);
    }
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    for (std::size_t k = 0; k < c; ++k) q(i, k) = v[k] / n;
  }
  return q;
}

inline std::vector<double> to_visual(const Tensor<float>& text, const Tensor<double>& rot) {
  const std::size_t c = text.size();
  std::vector<double> v(c, 0.0);
  for (std::size_t j = 0; j < c; ++j)
    for (std::size_t k = 0; k < c; ++k) v[k] += text[j] * rot(j, k);
  return v;
}

}  // namespace detail

inline Prototypes make_prototypes(const SynthConfig& cfg) {
  Rng rng(derive_seed(cfg.seed, 0x9e0));
  Prototypes p;
  for (std::size_t k = 0; k < cfg.n_object_classes; ++k) p.actor.push_back(detail::gaussian_unit(rng, cfg.c, 0.5));
  for (std::size_t k = 0; k < cfg.n_object_classes; ++k) p.action.push_back(detail::gaussian_unit(rng, cfg.c));
  for (std::size_t k = 0; k < 3; ++k) p.filler.push_back(detail::gaussian_unit(rng, cfg.c));
  for (std::size_t k = 0; k < cfg.n_background; ++k) p.background.push_back(detail::gaussian_unit(rng, cfg.c));
  p.rotation = detail::random_rotation(rng, cfg.c);
  return p;
}

/// Latent content of one episode.
struct Script {
  std::size_t actor = 0, action = 0;      // what the question asks about and its answer
  std::size_t span_begin = 0, span_end = 0;  // active frames [begin, end)
  std::vector<std::size_t> other_actors;  // c1 (active), c2, c3 (distractor frames)
  std::vector<std::size_t> other_actions; // d1, d2, d3, then extra wrong options
  std::vector<std::size_t> option_actions;  // action of each answer slot
};

struct Generated {
  data::Episode episode;
  Script script;
};

/// Box of grid cell k on a 4 x 2 layout, normalized coordinates.
inline data::Box cell_box(std::size_t k) {
  const float x = static_cast<float>(k % 4) / 4.0f, y = static_cast<float>(k / 4) / 2.0f;
  return {x, y, x + 0.25f, y + 0.5f};
}

inline Generated generate_episode(const SynthConfig& cfg, const Prototypes& protos, std::size_t index) {
  cfg.validate();
  Rng rng(derive_seed(cfg.seed, 0x100000 + index));
  const std::size_t n_cls = cfg.n_object_classes;
  auto distinct = [&](std::size_t count) {
    std::vector<std::size_t> all(n_cls);
    std::iota(all.begin(), all.end(), 0);
    for (std::size_t i = 0; i < count; ++i) std::swap(all[i], all[i + rng.below(n_cls - i)]);
    all.resize(count);
    return all;
  };
  Script s;
  const auto actors = distinct(4);
  s.actor = actors[0];
  s.other_actors.assign(actors.begin() + 1, actors.end());
  const std::size_t n_actions = std::max<std::size_t>(4, cfg.n_answer_options);
  const auto actions = distinct(n_actions);
  s.action = actions[0];
  s.other_actions.assign(actions.begin() + 1, actions.end());
  const std::size_t len = cfg.span_min + rng.below(cfg.span_max - cfg.span_min + 1);
  s.span_begin = rng.below(cfg.frames - len + 1);
  s.span_end = s.span_begin + len;

  const auto& rot = protos.rotation;
  auto pair_visual = [&](std::size_t actor, std::size_t action) {
    auto a = detail::to_visual(protos.actor[actor], rot);
    auto b = detail::to_visual(protos.action[action], rot);
    for (std::size_t k = 0; k < a.size(); ++k) a[k] += b[k];
    return a;
  };

  // The scene behind the pairs stays fixed for the whole video.
  std::vector<std::size_t> scene(cfg.patches > 2 ? cfg.patches - 2 : 0);
  for (auto& k : scene) k = rng.below(protos.background.size());

  data::Episode ep;
  ep.video_id = "synth" + std::to_string(cfg.seed) + "_" + std::to_string(index);
  ep.category = "actor" + std::to_string(s.actor);
  ep.qa_mode = cfg.qa_mode;
  const std::size_t c = cfg.c;
  for (std::size_t t = 0; t < cfg.frames; ++t) {
    const bool active = t >= s.span_begin && t < s.span_end;
    std::vector<std::vector<double>> patch(cfg.patches);
    if (active) {
      patch[0] = pair_visual(s.actor, s.action);
      patch[1] = pair_visual(s.other_actors[0], s.other_actions[0]);
    } else {
      patch[0] = pair_visual(s.other_actors[1], s.other_actions[1]);
      patch[1] = pair_visual(s.other_actors[2], s.other_actions[2]);
    }
    for (std::size_t k = 2; k < cfg.patches; ++k) {
      const auto& b = protos.background[scene[k - 2]];
      patch[k].assign(b.storage().begin(), b.storage().end());
    }
    // Pairs sit in random grid cells.
    std::vector<std::size_t> cell(cfg.patches);
    std::iota(cell.begin(), cell.end(), 0);
    for (std::size_t i = cfg.patches; i > 1; --i) std::swap(cell[i - 1], cell[rng.below(i)]);

    data::FrameRecord f;
    f.t = static_cast<int>(t);
    f.patch_embeddings = Tensor<float>({cfg.patches, c});
    f.frame_feature = Tensor<float>({c});
    for (std::size_t k = 0; k < cfg.patches; ++k) {
      for (std::size_t j = 0; j < c; ++j) {
        const float v = static_cast<float>(patch[k][j] + cfg.noise_std * rng.normal());
        f.patch_embeddings(cell[k], j) = v;
        f.frame_feature[j] += v / static_cast<float>(cfg.patches);
      }
    }
    std::vector<std::size_t> grounded;
    if (active) {
      grounded.push_back(rng.bernoulli(cfg.p_true_box) ? 0 : 1);
    } else if (rng.bernoulli(cfg.p_halluc_box)) {
      grounded.push_back(0);
    }
    f.roi_features = Tensor<float>({grounded.size(), c});
    f.spatial_features = Tensor<float>({grounded.size(), 4});
    for (std::size_t i = 0; i < grounded.size(); ++i) {
      const std::size_t where = cell[grounded[i]];
      const auto box = cell_box(where);
      f.boxes.push_back(box);
      f.spatial_features(i, 0) = box.x1;
      f.spatial_features(i, 1) = box.y1;
      f.spatial_features(i, 2) = box.x2;
      f.spatial_features(i, 3) = box.y2;
      for (std::size_t j = 0; j < c; ++j) f.roi_features(i, j) = f.patch_embeddings(where, j);
    }
    ep.frames.push_back(std::move(f));
  }

  // Question tokens: two fillers, the actor, a filler.
  std::vector<const Tensor<float>*> tokens{&protos.filler[0], &protos.filler[1], &protos.actor[s.actor], &protos.filler[2]};
  ep.question_tokens = Tensor<float>({tokens.size(), c});
  for (std::size_t m = 0; m < tokens.size(); ++m)
    for (std::size_t j = 0; j < c; ++j) ep.question_tokens(m, j) = (*tokens[m])[j];

  // Answer slots: the true action and wrong ones, label slot uniform.
  const std::size_t n_opt = cfg.n_answer_options;
  ep.label = rng.below(n_opt);
  std::vector<std::size_t> wrong(s.other_actions.begin(), s.other_actions.end());
  s.option_actions.resize(n_opt);
  for (std::size_t l = 0, w = 0; l < n_opt; ++l) s.option_actions[l] = l == ep.label ? s.action : wrong[w++];
  ep.answer_bank = Tensor<float>({n_opt, c});
  for (std::size_t l = 0; l < n_opt; ++l) {
    std::vector<double> v(c);
    for (std::size_t j = 0; j < c; ++j) v[j] = protos.actor[s.actor][j] + protos.action[s.option_actions[l]][j];
    auto u = detail::unit(std::move(v));
    for (std::size_t j = 0; j < c; ++j) ep.answer_bank(l, j) = u[j];
  }
  ep.validate();
  return {std::move(ep), std::move(s)};
}

inline std::vector<data::Episode> generate_episodes(const SynthConfig& cfg, std::size_t begin, std::size_t end) {
  const auto protos = make_prototypes(cfg);
  std::vector<data::Episode> out;
  for (std::size_t i = begin; i < end; ++i) out.push_back(generate_episode(cfg, protos, i).episode);
  return out;
}

/// Split by index: the first 80% train, next 10% val, last 10% test.
struct SplitBounds {
  std::size_t train_end, val_end, total;
};
inline SplitBounds split_bounds(std::size_t n) {
  const std::size_t tr = n * 8 / 10, va = n * 9 / 10;
  return {tr, va, n};
}

struct Splits {
  std::vector<data::Episode> train, val, test;
};
inline Splits generate_splits(const SynthConfig& cfg) {
  const auto b = split_bounds(cfg.n_episodes);
  return {generate_episodes(cfg, 0, b.train_end), generate_episodes(cfg, b.train_end, b.val_end),
          generate_episodes(cfg, b.val_end, b.total)};
}

/// Writes every episode and train/val/test manifests under `dir`.
inline void generate_dataset(const SynthConfig& cfg, const std::filesystem::path& dir) {
  const auto protos = make_prototypes(cfg);
  const auto b = split_bounds(cfg.n_episodes);
  std::filesystem::create_directories(dir / "episodes");
  std::vector<nlohmann::json> train, val, test;
  for (std::size_t i = 0; i < cfg.n_episodes; ++i) {
    auto g = generate_episode(cfg, protos, i);
    auto entry = data::save_episode(g.episode, dir / "episodes", "e" + std::to_string(i));
    // Manifest paths are relative to the manifest's directory.
    for (const char* k : {"question_file", "answers_file"}) entry[k] = "episodes/" + entry[k].get<std::string>();
    for (auto& f : entry["frames"])
      for (const char* k : {"embeddings_file", "grounding_file"}) f[k] = "episodes/" + f[k].get<std::string>();
    (i < b.train_end ? train : i < b.val_end ? val : test).push_back(std::move(entry));
  }
  data::write_manifest(dir / "train.ndjson", train);
  data::write_manifest(dir / "val.ndjson", val);
  data::write_manifest(dir / "test.ndjson", test);
}

// ---------------------------------------------------------------------------
// Oracles

/// Frame scores under ideal projections: patches are rotated back to text
/// space and restricted to the span of the question-token prototypes (actors
/// and fillers), which drops background and most noise.
inline std::vector<double> oracle_frame_scores(const data::Episode& ep, const Prototypes& protos) {
  const std::size_t c = protos.rotation.dim(0);
  std::vector<std::vector<double>> basis;
  auto absorb = [&](const Tensor<float>& v) {
    std::vector<double> u(v.storage().begin(), v.storage().end());
    for (const auto& b : basis) {
      double dot = 0.0;
      for (std::size_t k = 0; k < c; ++k) dot += u[k] * b[k];
      for (std::size_t k = 0; k < c; ++k) u[k] -= dot * b[k];
    }
    double n = 0.0;
    for (double x : u) n += x * x;
    if (n < 1e-12) return;
    for (auto& x : u) x /= std::sqrt(n);
    basis.push_back(std::move(u));
  };
  for (const auto& a : protos.actor) absorb(a);
  for (const auto& f : protos.filler) absorb(f);
  // visual -> text is R^T, followed by the orthogonal projector onto the span.
  Tensor<double> proj({c, c});
  for (std::size_t i = 0; i < c; ++i)
    for (const auto& b : basis) {
      double rb = 0.0;
      for (std::size_t j = 0; j < c; ++j) rb += protos.rotation(j, i) * b[j];
      for (std::size_t k = 0; k < c; ++k) proj(i, k) += rb * b[k];
    }
  auto q = l2_normalize_rows(Var<double>::constant(ep.question_tokens.cast<double>()));
  std::vector<double> s;
  for (const auto& f : ep.frames) {
    auto e = l2_normalize_rows(matmul(Var<double>::constant(f.patch_embeddings.cast<double>()), Var<double>::constant(proj)));
    s.push_back(frame_score(e, q, nonzero_rows(f.patch_embeddings)).item());
  }
  return s;
}

/// Nearest-prototype reader: finds the asked-about actor in the question,
/// decodes every patch into its best (actor, action) pair, votes over the
/// patches showing that actor and picks the closest answer option.
inline std::size_t oracle_predict(const data::Episode& ep, const Prototypes& protos) {
  const std::size_t c = protos.rotation.dim(0);
  const std::size_t n_cls = protos.actor.size();
  auto cos = [c](const std::vector<double>& a, const Tensor<float>& b) {
    double d = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t k = 0; k < c; ++k) {
      d += a[k] * b[k];
      na += a[k] * a[k];
      nb += double(b[k]) * b[k];
    }
    return d / std::sqrt(na * nb + 1e-30);
  };
  std::size_t asked = 0;
  double best = -2.0;
  for (std::size_t m = 0; m < ep.question_tokens.dim(0); ++m) {
    std::vector<double> tok(c);
    for (std::size_t k = 0; k < c; ++k) tok[k] = ep.question_tokens(m, k);
    for (std::size_t a = 0; a < n_cls; ++a)
      if (double v = cos(tok, protos.actor[a]); v > best) best = v, asked = a;
  }
  std::vector<Tensor<float>> pair_text;  // normalized actor+action in text space
  for (std::size_t a = 0; a < n_cls; ++a)
    for (std::size_t b = 0; b < n_cls; ++b) {
      std::vector<double> v(c);
      for (std::size_t k = 0; k < c; ++k) v[k] = protos.actor[a][k] + protos.action[b][k];
      pair_text.push_back(detail::unit(std::move(v)));
    }
  std::vector<std::size_t> votes(n_cls, 0);
  for (const auto& f : ep.frames) {
    for (std::size_t r = 0; r < f.patch_embeddings.dim(0); ++r) {
      std::vector<double> text(c, 0.0);
      for (std::size_t j = 0; j < c; ++j)
        for (std::size_t k = 0; k < c; ++k) text[j] += f.patch_embeddings(r, k) * protos.rotation(j, k);
      std::size_t pair = 0;
      double pb = -2.0;
      for (std::size_t p = 0; p < pair_text.size(); ++p)
        if (double v = cos(text, pair_text[p]); v > pb) pb = v, pair = p;
      if (pb > 0.8 && pair / n_cls == asked) ++votes[pair % n_cls];
    }
  }
  const std::size_t action = static_cast<std::size_t>(std::max_element(votes.begin(), votes.end()) - votes.begin());
  std::vector<double> want(c);
  for (std::size_t k = 0; k < c; ++k) want[k] = protos.actor[asked][k] + protos.action[action][k];
  std::vector<double> scores;
  for (std::size_t l = 0; l < ep.answer_bank.dim(0); ++l) {
    Tensor<float> row({c});
    for (std::size_t k = 0; k < c; ++k) row[k] = ep.answer_bank(l, k);
    scores.push_back(cos(want, row));
  }
  return argmax_first(scores);
}

inline double oracle_accuracy(const std::vector<data::Episode>& eps, const Prototypes& protos) {
  std::size_t hit = 0;
  for (const auto& e : eps) hit += oracle_predict(e, protos) == e.label;
  return eps.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(eps.size());
}

/// Accuracy of a seeded uniform guesser.
inline double random_guess_accuracy(const std::vector<data::Episode>& eps, std::uint64_t seed) {
  Rng rng(seed);
  std::size_t hit = 0;
  for (const auto& e : eps) hit += rng.below(e.answer_bank.dim(0)) == e.label;
  return eps.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(eps.size());
}

}  // namespace lgqave::synth
