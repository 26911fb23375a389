#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "lgqave/datamodel.hpp"
#include "lgqave/frame_select.hpp"
#include "lgqave/numcore.hpp"

namespace lgqave {

/// Constant Var from stored float data, converted to the model scalar.
template <typename T>
Var<T> constant_from(const Tensor<float>& t) {
  if constexpr (std::is_same_v<T, float>) {
    return Var<T>::constant(t);
  } else {
    return Var<T>::constant(t.template cast<T>());
  }
}

/// One selected frame as a graph over grounded objects plus the frame node.
/// Node rows are laid out as slots 0..m_max-1 for objects and the last row for
/// the frame node; `slots` maps rows to those positions when the graph is
/// stored without padding.
template <typename T>
struct FrameGraph {
  std::size_t t = 0;
  std::size_t clip = 0;
  double score = 0.0;
  Var<T> nodes;                      // (rows) x d
  Tensor<T> spatial;                 // object rows x 4
  Var<T> adjacency;                  // rows x rows
  std::vector<std::uint8_t> node_mask;
  std::vector<std::size_t> slots;    // slot of each row in [0, m_max]

  std::size_t size() const { return node_mask.size(); }
  std::size_t num_objects() const { return size() - 1; }
};

/// F_u = [F_o; F_I] projected to d, with the frame node last and always unmasked.
template <typename T>
std::pair<Var<T>, std::vector<std::uint8_t>> assemble_nodes(const data::PaddedFrame& pf, const Var<T>& proj) {
  const auto& rec = pf.record;
  const std::size_t m = rec.roi_features.dim(0);
  const std::size_t c = rec.frame_feature.size();
  if (proj.rows() != c) throw ShapeError("assemble_nodes: projection rows must equal feature width");
  Tensor<float> raw({m + 1, c});
  std::copy(rec.roi_features.storage().begin(), rec.roi_features.storage().end(), raw.data());
  std::copy(rec.frame_feature.storage().begin(), rec.frame_feature.storage().end(), raw.data() + m * c);
  std::vector<std::uint8_t> mask = pf.node_mask;
  mask.push_back(1);
  return {matmul(constant_from<T>(raw), proj), std::move(mask)};
}

/// Row-stochastic soft adjacency softmax((F_u W_k)(F_u W_v)^T). Masked columns
/// get no mass; masked rows become identity rows.
template <typename T>
Var<T> build_adjacency(const Var<T>& nodes, const Var<T>& w_k, const Var<T>& w_v,
                       const std::vector<std::uint8_t>& mask = {}) {
  if (nodes.cols() != w_k.rows() || nodes.cols() != w_v.rows() || w_k.cols() != w_v.cols()) {
    throw ShapeError("build_adjacency: projection shapes do not match node width");
  }
  const std::size_t n = nodes.rows();
  if (!mask.empty() && mask.size() != n) throw ShapeError("build_adjacency: mask length != node count");
  Var<T> r = softmax_rows(matmul_nt(matmul(nodes, w_k), matmul(nodes, w_v)), mask);
  const bool any_masked = std::find(mask.begin(), mask.end(), 0) != mask.end();
  if (!any_masked) return r;
  Tensor<T> keep({n, n}), ident({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) keep(i, j) = mask[i] ? T(1) : T(0);
    if (!mask[i]) ident(i, i) = T(1);
  }
  return add(mul(r, Var<T>::constant(keep)), Var<T>::constant(ident));
}

/// Bound projections used to build frame graphs.
template <typename T>
struct GraphParams {
  Var<T> proj;  // C x d
  Var<T> w_k;   // d x d/2
  Var<T> w_v;   // d x d/2
};

/// Frame graph for one record. `m_max` controls the padded layout; pass
/// m_max equal to the object count for the compact form.
template <typename T>
FrameGraph<T> build_frame_graph(const data::FrameRecord& rec, const GraphParams<T>& p, std::size_t m_max) {
  auto padded = data::pad_grounding(rec, m_max);
  auto [nodes, mask] = assemble_nodes(padded, p.proj);
  FrameGraph<T> g;
  g.t = static_cast<std::size_t>(rec.t);
  g.nodes = nodes;
  g.node_mask = mask;
  g.spatial = padded.record.spatial_features.template cast<T>();
  g.adjacency = build_adjacency(nodes, p.w_k, p.w_v, mask);
  for (std::size_t i = 0; i < m_max; ++i) g.slots.push_back(i);
  g.slots.push_back(data::kMaxBoxes);
  return g;
}

/// Groups windowed frame positions by clip in temporal order, keeping at most
/// `cap` per clip: the highest scores, ties to the lower index.
inline std::vector<std::vector<std::size_t>> group_by_clip(const std::vector<std::size_t>& windows,
                                                           const std::vector<double>& scores, std::size_t n_frames,
                                                           std::size_t cap = data::kMaxBoxes) {
  std::vector<std::vector<std::size_t>> clips(kClips);
  for (std::size_t t : windows) clips[clip_of(t, n_frames)].push_back(t);
  for (auto& c : clips) {
    if (c.size() <= cap) continue;
    std::stable_sort(c.begin(), c.end(), [&](std::size_t a, std::size_t b) {
      return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
    });
    c.resize(cap);
    std::sort(c.begin(), c.end());
  }
  return clips;
}

/// Graphs for every windowed frame of an episode, grouped by clip. With
/// grounding disabled each graph holds only the frame node.
template <typename T>
std::vector<std::vector<FrameGraph<T>>> build_graph_sequence(const data::Episode& ep, const Selection& sel,
                                                             const GraphParams<T>& p, bool grounding = true) {
  const std::size_t n = ep.frames.size();
  std::vector<std::vector<FrameGraph<T>>> out(kClips);
  const auto groups = group_by_clip(sel.windows, sel.scores, n);
  for (std::size_t c = 0; c < groups.size(); ++c) {
    for (std::size_t pos : groups[c]) {
      const auto& rec = ep.frames[pos];
      FrameGraph<T> g;
      if (grounding) {
        g = build_frame_graph(rec, p, rec.num_objects());
      } else {
        data::FrameRecord bare = rec;
        bare.boxes.clear();
        bare.roi_features = Tensor<float>({0, rec.width()});
        bare.spatial_features = Tensor<float>({0, 4});
        g = build_frame_graph(bare, p, 0);
      }
      g.t = pos;
      g.clip = c;
      g.score = sel.scores.empty() ? 0.0 : sel.scores[pos];
      out[c].push_back(std::move(g));
    }
  }
  return out;
}

}  // namespace lgqave
