#pragma once

#include <algorithm>
#include <cstdint>
#include <set>
#include <vector>

#include "lgqave/numcore.hpp"

namespace lgqave {

inline constexpr std::size_t kSampledFrames = 32;
inline constexpr std::size_t kClips = 8;
inline constexpr std::size_t kFramesPerClip = 4;
inline constexpr std::size_t kWindowRadius = 2;

/// Uniformly strided frame indices, grouped into `clips` runs of `per_clip`.
/// Short videos are padded by repeating the last frame.
inline std::vector<std::size_t> sample_clips(std::size_t n_frames, std::size_t clips = kClips,
                                             std::size_t per_clip = kFramesPerClip) {
  if (n_frames == 0) throw std::invalid_argument("sample_clips: video has no frames");
  const std::size_t target = clips * per_clip;
  std::vector<std::size_t> idx(target);
  for (std::size_t k = 0; k < target; ++k) {
    idx[k] = n_frames >= target ? k * n_frames / target : std::min(k, n_frames - 1);
  }
  return idx;
}

/// Clip that frame t of a T-frame video falls into, consistent with the
/// grouping of sample_clips (short videos fill the leading clips).
inline std::size_t clip_of(std::size_t t, std::size_t n_frames, std::size_t clips = kClips,
                           std::size_t per_clip = kFramesPerClip) {
  return std::min(clips - 1, t * clips / std::max(n_frames, clips * per_clip));
}

/// Marks patch rows that are not all-zero padding.
template <typename T>
std::vector<std::uint8_t> nonzero_rows(const Tensor<T>& m) {
  std::vector<std::uint8_t> mask(m.dim(0), 0);
  for (std::size_t r = 0; r < m.dim(0); ++r) {
    for (std::size_t c = 0; c < m.dim(1); ++c) {
      if (m(r, c) != T(0)) {
        mask[r] = 1;
        break;
      }
    }
  }
  return mask;
}

/// Cross-attention relevance of one frame to the question. Rows of e (N x d)
/// and q (M x d) are expected to be unit length. Softmax runs over question
/// tokens; the score is the mean over every entry of the attended rows.
/// Rows with patch_mask 0 are padding and do not contribute.
template <typename T>
Var<T> frame_score(const Var<T>& e, const Var<T>& q, const std::vector<std::uint8_t>& patch_mask = {}) {
  if (e.rows() == 0 || q.rows() == 0) throw NumericError("frame_score: empty patch or token set");
  if (e.cols() != q.cols()) throw ShapeError("frame_score: patch and token widths differ");
  Var<T> attended = matmul(softmax_rows(matmul_nt(e, q)), q);
  return mean_all(mean_rows(attended, patch_mask));
}

template <typename T>
T frame_score(const Tensor<T>& e, const Tensor<T>& q) {
  return frame_score(Var<T>::constant(e), Var<T>::constant(q)).item();
}

/// Min-max rescaling to [0, 1]. A constant vector maps to all zeros.
inline std::vector<double> normalize_scores(const std::vector<double>& s) {
  if (s.empty()) return {};
  const auto [lo, hi] = std::minmax_element(s.begin(), s.end());
  std::vector<double> out(s.size(), 0.0);
  const double range = *hi - *lo;
  if (!(range > 0.0)) return out;
  for (std::size_t i = 0; i < s.size(); ++i) out[i] = (s[i] - *lo) / range;
  return out;
}

/// Positions whose score exceeds beta; the single best position when none does.
inline std::vector<std::size_t> select_frames(const std::vector<double>& scores, double beta) {
  if (scores.empty()) return {};
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (scores[i] > beta) kept.push_back(i);
  if (kept.empty()) {
    kept.push_back(static_cast<std::size_t>(std::max_element(scores.begin(), scores.end()) - scores.begin()));
  }
  return kept;
}

/// Grows every kept index to [t - radius, t + radius] clipped to [0, T).
inline std::vector<std::size_t> expand_window(const std::vector<std::size_t>& kept, std::size_t n_frames,
                                              std::size_t radius = kWindowRadius) {
  std::set<std::size_t> out;
  for (std::size_t t : kept) {
    if (t >= n_frames) throw std::out_of_range("expand_window: frame index outside video");
    const std::size_t lo = t >= radius ? t - radius : 0;
    const std::size_t hi = std::min(n_frames - 1, t + radius);
    for (std::size_t u = lo; u <= hi; ++u) out.insert(u);
  }
  return {out.begin(), out.end()};
}

/// Outcome of frame selection on one video. Indices are original frame indices.
struct Selection {
  std::vector<double> scores;      // raw s_t per frame
  std::vector<double> normalized;  // rescaled scores used against beta
  std::vector<std::size_t> kept;
  std::vector<std::size_t> windows;
};

/// Thresholds the sampled frames of a video given per-frame raw scores.
/// With sampling disabled every sampled frame is kept and no window is grown.
inline Selection select_video(const std::vector<double>& scores, double beta, bool sampling = true) {
  Selection sel;
  sel.scores = scores;
  sel.normalized = normalize_scores(scores);
  const std::size_t n = scores.size();
  std::vector<std::size_t> candidates = sample_clips(n);
  candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());
  if (!sampling) {
    sel.kept = candidates;
    sel.windows = candidates;
    return sel;
  }
  std::vector<double> cand_scores;
  for (std::size_t t : candidates) cand_scores.push_back(sel.normalized[t]);
  for (std::size_t pos : select_frames(cand_scores, beta)) sel.kept.push_back(candidates[pos]);
  sel.windows = expand_window(sel.kept, n);
  return sel;
}

}  // namespace lgqave
