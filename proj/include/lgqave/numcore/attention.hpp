#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "lgqave/numcore/params.hpp"

namespace lgqave {

enum class PoolMode { kMean, kMax };

inline const char* to_string(PoolMode m) { return m == PoolMode::kMean ? "mean" : "max"; }

inline PoolMode parse_pool_mode(const std::string& s) {
  if (s == "mean") return PoolMode::kMean;
  if (s == "max") return PoolMode::kMax;
  throw std::invalid_argument("pool mode must be mean or max, got '" + s + "'");
}

/// Multi-head self-attention weights bound to a tape. All maps are d_in x d_in
/// and bias-free; inputs multiply from the left (x * W).
template <typename T>
struct MhsaParams {
  std::size_t n_heads = 1;
  Var<T> w_q, w_k, w_v, w_o;

  std::size_t d_in() const { return w_q.rows(); }
  std::size_t head_dim() const { return d_in() / n_heads; }

  void validate() const {
    if (n_heads == 0) throw ShapeError("mhsa: n_heads must be positive");
    const std::size_t d = d_in();
    if (d % n_heads != 0) {
      throw ShapeError("mhsa: width " + std::to_string(d) + " not divisible by " + std::to_string(n_heads) + " heads");
    }
    for (const auto* w : {&w_q, &w_k, &w_v, &w_o})
      if (w->rows() != d || w->cols() != d) throw ShapeError("mhsa: weight matrices must be d_in x d_in");
  }
};

/// Parameter slots of one MHSA block inside a ParamStore.
struct MhsaLayout {
  std::size_t n_heads = 1;
  std::size_t width = 0;
  ParamId w_q = 0, w_k = 0, w_v = 0, w_o = 0;

  template <typename T>
  static MhsaLayout create(ParamStore<T>& store, const std::string& prefix, std::size_t width, std::size_t n_heads,
                           Rng& rng) {
    if (n_heads == 0 || width % n_heads != 0) {
      throw ShapeError(prefix + ": width " + std::to_string(width) + " not divisible by " + std::to_string(n_heads));
    }
    MhsaLayout l;
    l.n_heads = n_heads;
    l.width = width;
    l.w_q = store.add_uniform(prefix + ".w_q", width, width, rng);
    l.w_k = store.add_uniform(prefix + ".w_k", width, width, rng);
    l.w_v = store.add_uniform(prefix + ".w_v", width, width, rng);
    l.w_o = store.add_uniform(prefix + ".w_o", width, width, rng);
    return l;
  }

  template <typename T>
  MhsaParams<T> bind(Tape<T>& tape) const {
    return {n_heads, tape.param(w_q), tape.param(w_k), tape.param(w_v), tape.param(w_o)};
  }
};

/// Scaled dot-product multi-head self-attention over the rows of x.
/// Keys with key_mask[j] == 0 receive no attention.
template <typename T>
Var<T> mhsa(const Var<T>& x, const MhsaParams<T>& p, const std::vector<std::uint8_t>& key_mask = {}) {
  p.validate();
  if (x.cols() != p.d_in()) {
    throw ShapeError("mhsa: input width " + std::to_string(x.cols()) + " != d_in " + std::to_string(p.d_in()));
  }
  const std::size_t hd = p.head_dim();
  const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
  Var<T> q = matmul(x, p.w_q);
  Var<T> k = matmul(x, p.w_k);
  Var<T> v = matmul(x, p.w_v);
  std::vector<Var<T>> heads;
  heads.reserve(p.n_heads);
  for (std::size_t h = 0; h < p.n_heads; ++h) {
    const std::size_t c0 = h * hd, c1 = c0 + hd;
    Var<T> qh = p.n_heads == 1 ? q : slice_cols(q, c0, c1);
    Var<T> kh = p.n_heads == 1 ? k : slice_cols(k, c0, c1);
    Var<T> vh = p.n_heads == 1 ? v : slice_cols(v, c0, c1);
    Var<T> att = softmax_rows(scale(matmul_nt(qh, kh), inv_sqrt), key_mask);
    heads.push_back(matmul(att, vh));
  }
  Var<T> merged = p.n_heads == 1 ? heads[0] : concat_cols(heads);
  return matmul(merged, p.w_o);
}

/// Column-wise reduction of x (n x d) to a (1 x d) row.
template <typename T>
Var<T> pool(const Var<T>& x, PoolMode mode, const std::vector<std::uint8_t>& row_mask = {}) {
  if (x.rows() == 0) throw NumericError("pool: empty input");
  return mode == PoolMode::kMean ? mean_rows(x, row_mask) : max_rows(x, row_mask);
}

/// Row softmax of a plain matrix.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& m) {
  return softmax_rows(Var<T>::constant(m)).value();
}

}  // namespace lgqave
