#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "lgqave/graphs.hpp"
#include "lgqave/numcore.hpp"

namespace lgqave {

struct QdgtConfig {
  std::size_t c = 64;       // visual feature width
  std::size_t c_text = 64;  // text token width
  std::size_t d = 64;       // hidden width
  std::size_t heads = 8;
  std::size_t edge_heads = 5;
  std::size_t layers = 2;
  std::size_t t_max = kSampledFrames;
  PoolMode pool = PoolMode::kMean;

  /// Edge-transformer width: the largest multiple of edge_heads not above d.
  std::size_t edge_width() const { return d / edge_heads * edge_heads; }
  /// Adjacency rows are laid out over the 10 object slots plus the frame node.
  static constexpr std::size_t edge_slots() { return data::kMaxBoxes + 1; }
};

/// Parameter slots of the graph transformer inside a ParamStore.
struct QdgtLayout {
  QdgtConfig cfg;
  ParamId node_proj = 0, adj_k = 0, adj_v = 0;
  ParamId box_embed = 0;
  std::vector<ParamId> w_u;
  MhsaLayout spatial, temporal, global, edge;
  ParamId edge_in = 0, edge_out = 0;
  ParamId pos_embed = 0;
  ParamId phi_local = 0, phi_qhat = 0;

  template <typename T>
  static QdgtLayout create(ParamStore<T>& s, const QdgtConfig& cfg, Rng& rng) {
    if (cfg.layers == 0) throw std::invalid_argument("qdgt: at least one graph layer required");
    if (cfg.d < 2 || cfg.edge_width() == 0) throw std::invalid_argument("qdgt: hidden width too small");
    QdgtLayout l;
    l.cfg = cfg;
    const std::size_t d = cfg.d;
    l.node_proj = s.add_uniform("graph.node_proj", cfg.c, d, rng);
    l.adj_k = s.add_uniform("graph.phi_k", d, d / 2, rng);
    l.adj_v = s.add_uniform("graph.phi_v", d, d / 2, rng);
    l.box_embed = s.add_uniform("qdgt.box_embed", 4, d, rng);
    for (std::size_t u = 0; u < cfg.layers; ++u) l.w_u.push_back(s.add_uniform("qdgt.w_u" + std::to_string(u), d, d, rng));
    l.spatial = MhsaLayout::create(s, "qdgt.spatial", d, cfg.heads, rng);
    l.temporal = MhsaLayout::create(s, "qdgt.temporal", d, cfg.heads, rng);
    const std::size_t e = cfg.edge_width();
    l.edge_in = s.add_uniform("qdgt.edge_in", QdgtConfig::edge_slots(), e, rng);
    l.edge = MhsaLayout::create(s, "qdgt.edge", e, cfg.edge_heads, rng);
    l.edge_out = s.add_uniform("qdgt.edge_out", e, QdgtConfig::edge_slots(), rng);
    l.pos_embed = s.add("qdgt.pos_embed", sinusoid_table<T>(cfg.t_max, d));
    l.global = MhsaLayout::create(s, "qdgt.global", d, cfg.heads, rng);
    l.phi_local = s.add_uniform("qdgt.phi_local", d, d, rng);
    l.phi_qhat = s.add_uniform("qdgt.phi_qhat", cfg.c_text, d, rng);
    return l;
  }

  template <typename T>
  static Tensor<T> sinusoid_table(std::size_t n, std::size_t d) {
    Tensor<T> pe({n, d});
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t i = 0; i < d; ++i) {
        const double freq = std::pow(10000.0, -static_cast<double>(i / 2 * 2) / static_cast<double>(d));
        pe(p, i) = static_cast<T>(i % 2 == 0 ? std::sin(p * freq) : std::cos(p * freq));
      }
    }
    return pe;
  }
};

/// Graph-transformer weights bound to one tape.
template <typename T>
struct QdgtParams {
  QdgtConfig cfg;
  GraphParams<T> graph;
  Var<T> box_embed;
  std::vector<Var<T>> w_u;
  MhsaParams<T> spatial, temporal, global, edge;
  Var<T> edge_in, edge_out;
  Var<T> pos_embed;
  Var<T> phi_local, phi_qhat;

  static QdgtParams bind(const QdgtLayout& l, Tape<T>& tape) {
    QdgtParams p;
    p.cfg = l.cfg;
    p.graph = {tape.param(l.node_proj), tape.param(l.adj_k), tape.param(l.adj_v)};
    p.box_embed = tape.param(l.box_embed);
    for (ParamId id : l.w_u) p.w_u.push_back(tape.param(id));
    p.spatial = l.spatial.bind(tape);
    p.temporal = l.temporal.bind(tape);
    p.global = l.global.bind(tape);
    p.edge = l.edge.bind(tape);
    p.edge_in = tape.param(l.edge_in);
    p.edge_out = tape.param(l.edge_out);
    p.pos_embed = tape.param(l.pos_embed);
    p.phi_local = tape.param(l.phi_local);
    p.phi_qhat = tape.param(l.phi_qhat);
    return p;
  }
};

/// Q_hat = M (.) Q: rows whose mask entry is 0 are zeroed.
template <typename T>
Var<T> mask_question(const Var<T>& q, const std::vector<std::uint8_t>& mask) {
  if (mask.size() != q.rows()) throw ShapeError("mask_question: mask length != token count");
  if (std::all_of(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; })) return q;
  Tensor<T> m({q.rows(), q.cols()});
  for (std::size_t r = 0; r < q.rows(); ++r)
    for (std::size_t c = 0; c < q.cols(); ++c) m(r, c) = mask[r] ? T(1) : T(0);
  return mul(q, Var<T>::constant(m));
}

/// Z = Q_hat * phi_qhat, one d-wide row per token.
template <typename T>
Var<T> project_tokens(const Var<T>& qhat, const Var<T>& phi_qhat) {
  if (qhat.cols() != phi_qhat.rows()) throw ShapeError("project_tokens: token width != projection rows");
  return matmul(qhat, phi_qhat);
}

/// F + sum_h sigmoid(F . z_h) z_h.
template <typename T>
Var<T> crossmodal_refine(const Var<T>& f, const Var<T>& z) {
  if (f.rows() != 1 || f.cols() != z.cols()) throw ShapeError("crossmodal_refine: width mismatch");
  return add(f, matmul(sigmoid(matmul_nt(f, z)), z));
}

/// Refines the initial adjacencies of one clip jointly. Every unmasked row is
/// laid out over the fixed slot grid, passed through the edge transformer and
/// added back as logits before a masked re-softmax.
template <typename T>
std::vector<Var<T>> edge_transform(const std::vector<const FrameGraph<T>*>& graphs, const std::vector<Var<T>>& adj,
                                   const QdgtParams<T>& p) {
  if (graphs.empty()) return {};
  const std::size_t width = QdgtConfig::edge_slots();
  std::vector<Var<T>> rows;
  std::vector<std::vector<std::size_t>> live(graphs.size());
  for (std::size_t g = 0; g < graphs.size(); ++g) {
    const auto& mask = graphs[g]->node_mask;
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (mask[i]) live[g].push_back(i);
    Var<T> r = live[g].size() == mask.size() ? adj[g] : gather_rows(adj[g], live[g]);
    rows.push_back(scatter_cols(r, graphs[g]->slots, width));
  }
  Var<T> x = rows.size() == 1 ? rows[0] : concat_rows(rows);
  Var<T> y = matmul(mhsa(matmul(x, p.edge_in), p.edge), p.edge_out);
  Var<T> logits = add(x, y);

  std::vector<Var<T>> out;
  std::size_t r0 = 0;
  for (std::size_t g = 0; g < graphs.size(); ++g) {
    const auto& mask = graphs[g]->node_mask;
    const std::size_t n = live[g].size();
    Var<T> block = gather_cols(slice_rows(logits, r0, r0 + n), graphs[g]->slots);
    r0 += n;
    Var<T> refined = softmax_rows(block, mask);
    if (n == mask.size()) {
      out.push_back(refined);
      continue;
    }
    // Scatter the live rows back; padded rows are identity.
    Tensor<T> place({mask.size(), n}), ident({mask.size(), mask.size()});
    for (std::size_t k = 0; k < n; ++k) place(live[g][k], k) = T(1);
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (!mask[i]) ident(i, i) = T(1);
    out.push_back(add(matmul(Var<T>::constant(place), refined), Var<T>::constant(ident)));
  }
  return out;
}

/// Output of the spatial unit for one graph.
template <typename T>
struct SpatialOut {
  Var<T> nodes;
  std::vector<Var<T>> adjacencies;  // the adjacency used by each layer
};

/// Box embedding, U rounds of h <- h + ReLU(R h W_u) with R rebuilt from h
/// between rounds, then masked self-attention over nodes.
template <typename T>
SpatialOut<T> spatial_unit(const FrameGraph<T>& g, const QdgtParams<T>& p, const Var<T>& initial_adjacency) {
  const std::size_t n = g.size();
  Var<T> h = g.nodes;
  if (g.num_objects() > 0) {
    Tensor<T> sp({n, 4});
    std::copy(g.spatial.storage().begin(), g.spatial.storage().end(), sp.data());
    h = add(h, matmul(Var<T>::constant(sp), p.box_embed));
  }
  SpatialOut<T> out;
  Var<T> r = initial_adjacency;
  for (std::size_t u = 0; u < p.w_u.size(); ++u) {
    if (u > 0) r = build_adjacency(h, p.graph.w_k, p.graph.w_v, g.node_mask);
    out.adjacencies.push_back(r);
    h = add(h, relu(matmul(matmul(r, h), p.w_u[u])));
  }
  out.nodes = mhsa(h, p.spatial, g.node_mask);
  return out;
}

/// phi_local(mean of unmasked nodes), refined by the question tokens.
template <typename T>
Var<T> local_repr(const Var<T>& nodes, const std::vector<std::uint8_t>& mask, const QdgtParams<T>& p,
                  const Var<T>& z) {
  return crossmodal_refine(matmul(mean_rows(nodes, mask), p.phi_local), z);
}

/// Contextualizes the frames of one clip: pooled frame vectors plus position
/// embeddings go through self-attention, added back to the pooled vectors.
template <typename T>
Var<T> temporal_unit(const std::vector<Var<T>>& frame_vectors, const std::vector<std::size_t>& positions,
                     const QdgtParams<T>& p) {
  if (frame_vectors.empty()) throw std::invalid_argument("temporal_unit: clip has no frames");
  if (positions.size() != frame_vectors.size()) throw ShapeError("temporal_unit: one position per frame");
  Var<T> v = frame_vectors.size() == 1 ? frame_vectors[0] : concat_rows(frame_vectors);
  Var<T> x = add(v, gather_rows(p.pos_embed, positions));
  return add(v, mhsa(x, p.temporal));
}

/// Pool(MHSA(all frame vectors)), refined by the question tokens.
template <typename T>
Var<T> global_repr(const Var<T>& frames, const QdgtParams<T>& p, const Var<T>& z) {
  return crossmodal_refine(pool(mhsa(frames, p.global), p.cfg.pool), z);
}

template <typename T>
struct LocalGlobal {
  std::vector<Var<T>> locals;
  Var<T> global;
  std::vector<Var<T>> adjacencies;  // every adjacency used, for inspection
};

/// Position of frame t of an n-frame video on the t_max position grid.
inline std::size_t position_index(std::size_t t, std::size_t n_frames, std::size_t t_max = kSampledFrames) {
  return std::min(t_max - 1, t * t_max / std::max<std::size_t>(n_frames, t_max));
}

/// Full graph transformer over the clip-grouped graphs of one episode.
template <typename T>
LocalGlobal<T> qdgt_forward(const std::vector<std::vector<FrameGraph<T>>>& clips, std::size_t n_frames,
                            const Var<T>& z, const QdgtParams<T>& p, bool with_locals = true) {
  LocalGlobal<T> out;
  std::vector<Var<T>> frame_rows;
  for (const auto& clip : clips) {
    if (clip.empty()) continue;
    std::vector<const FrameGraph<T>*> ptrs;
    std::vector<Var<T>> adj;
    for (const auto& g : clip) {
      ptrs.push_back(&g);
      adj.push_back(g.adjacency);
    }
    auto refined = edge_transform(ptrs, adj, p);
    std::vector<Var<T>> pooled;
    std::vector<std::size_t> positions;
    for (std::size_t i = 0; i < clip.size(); ++i) {
      auto s = spatial_unit(clip[i], p, refined[i]);
      out.adjacencies.insert(out.adjacencies.end(), s.adjacencies.begin(), s.adjacencies.end());
      pooled.push_back(mean_rows(s.nodes, clip[i].node_mask));
      positions.push_back(position_index(clip[i].t, n_frames, p.cfg.t_max));
      if (with_locals) out.locals.push_back(crossmodal_refine(matmul(pooled.back(), p.phi_local), z));
    }
    frame_rows.push_back(temporal_unit(pooled, positions, p));
  }
  if (frame_rows.empty()) throw std::invalid_argument("qdgt_forward: no graphs");
  Var<T> frames = frame_rows.size() == 1 ? frame_rows[0] : concat_rows(frame_rows);
  out.global = global_repr(frames, p, z);
  return out;
}

}  // namespace lgqave
