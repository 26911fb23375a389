#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "lgqave/numcore/tensor.hpp"

namespace lgqave {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Tensor<T>& ensure_grad() {
    if (grad.size() != value.size() || grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
    return grad;
  }
  bool has_grad() const { return !grad.empty() || value.empty(); }
};

/// Handle to a node on the gradient tape. Values are always rank-2; a vector
/// is a single row.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = value.rank() == 2 ? std::move(value) : value.as_matrix();
    node_->requires_grad = requires_grad;
  }

  static Var constant(Tensor<T> value) { return Var(std::move(value), false); }
  static Var leaf(Tensor<T> value) { return Var(std::move(value), true); }

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  /// Gradient accumulated by the last backward pass; zeros if none reached this node.
  Tensor<T> grad() const {
    if (!node_->grad.empty()) return node_->grad;
    return Tensor<T>(node_->value.shape());
  }
  bool requires_grad() const { return node_->requires_grad; }
  std::size_t rows() const { return node_->value.dim(0); }
  std::size_t cols() const { return node_->value.dim(1); }
  T item() const { return node_->value[0]; }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

  /// Value-only copy cut from the tape.
  Var detach() const { return Var(node_->value, false); }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <typename T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> parents, std::function<void(Node<T>&)> backward) {
  Var<T> out(std::move(value), false);
  bool needs = false;
  for (const auto& p : parents) needs = needs || p.requires_grad();
  if (needs) {
    auto& n = *out.node();
    n.requires_grad = true;
    n.parents.reserve(parents.size());
    for (auto& p : parents) n.parents.push_back(p.node());
    n.backward = std::move(backward);
  }
  return out;
}

template <typename T>
Node<T>& parent(Node<T>& n, std::size_t i) {
  return *n.parents[i];
}

// C (n x m) += A (n x k) * B (k x m)
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    T* crow = c + i * m;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T{0}) continue;
      const T* brow = b + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

// C (n x m) += A (n x k) * B^T, B is (m x k). B is transposed once so the
// inner loop runs over contiguous memory and vectorizes.
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t n, std::size_t k, std::size_t m) {
  if (n == 1 || m == 1) {
    for (std::size_t i = 0; i < n; ++i) {
      const T* arow = a + i * k;
      for (std::size_t j = 0; j < m; ++j) {
        const T* brow = b + j * k;
        T s{0};
        for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
        c[i * m + j] += s;
      }
    }
    return;
  }
  std::vector<T> bt(k * m);
  for (std::size_t j = 0; j < m; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * m + j] = b[j * k + p];
  gemm_nn(a, bt.data(), c, n, k, m);
}

// C (k x m) += A^T * B, A is (n x k), B is (n x m)
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const T* arow = a + i * k;
    const T* brow = b + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T{0}) continue;
      T* crow = c + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.value().shape() != b.value().shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.value().shape()) + " vs " +
                     shape_str(b.value().shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Backward pass

/// Reverse-mode sweep from several roots, each seeded with its upstream gradient.
template <typename T>
void backward(const std::vector<std::pair<Var<T>, Tensor<T>>>& seeds) {
  std::vector<Node<T>*> order;
  std::unordered_set<const Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  for (const auto& [root, seed] : seeds) {
    if (!root.requires_grad()) continue;
    if (seed.size() != root.value().size()) throw ShapeError("backward: seed shape mismatch");
    Node<T>* r = root.node().get();
    if (seen.insert(r).second) stack.emplace_back(r, 0);
    while (!stack.empty()) {
      auto& [n, i] = stack.back();
      if (i < n->parents.size()) {
        Node<T>* p = n->parents[i++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
  }
  for (const auto& [root, seed] : seeds) {
    if (!root.requires_grad()) continue;
    auto& g = root.node()->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

/// Backward from a scalar root with seed 1.
template <typename T>
void backward(const Var<T>& root) {
  if (root.value().size() != 1) throw ShapeError("backward: root must be scalar");
  backward<T>({{root, Tensor<T>(root.value().shape(), T{1})}});
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul: " + shape_str(a.value().shape()) + " x " + shape_str(b.value().shape()));
  }
  Tensor<T> out({n, m});
  detail::gemm_nn(a.value().data(), b.value().data(), out.data(), n, k, m);
  return detail::make_result<T>(std::move(out), {a, b}, [n, k, m](Node<T>& self) {
    auto& pa = detail::parent(self, 0);
    auto& pb = detail::parent(self, 1);
    if (pa.requires_grad) detail::gemm_nt(self.grad.data(), pb.value.data(), pa.ensure_grad().data(), n, m, k);
    if (pb.requires_grad) detail::gemm_tn(pa.value.data(), self.grad.data(), pb.ensure_grad().data(), n, k, m);
  });
}

/// a * b^T for a (n x k), b (m x k).
template <typename T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
  if (b.cols() != k) {
    throw ShapeError("matmul_nt: " + shape_str(a.value().shape()) + " x " + shape_str(b.value().shape()) + "^T");
  }
  Tensor<T> out({n, m});
  detail::gemm_nt(a.value().data(), b.value().data(), out.data(), n, k, m);
  return detail::make_result<T>(std::move(out), {a, b}, [n, k, m](Node<T>& self) {
    auto& pa = detail::parent(self, 0);
    auto& pb = detail::parent(self, 1);
    if (pa.requires_grad) detail::gemm_nn(self.grad.data(), pb.value.data(), pa.ensure_grad().data(), n, m, k);
    if (pb.requires_grad) detail::gemm_tn(self.grad.data(), pa.value.data(), pb.ensure_grad().data(), n, m, k);
  });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
  const std::size_t n = a.rows(), m = a.cols();
  Tensor<T> out({m, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out(j, i) = a.value()(i, j);
  return detail::make_result<T>(std::move(out), {a}, [n, m](Node<T>& self) {
    auto& g = detail::parent(self, 0).ensure_grad();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) g(i, j) += self.grad(j, i);
  });
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return detail::make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      auto& par = detail::parent(self, p);
      if (!par.requires_grad) continue;
      auto& g = par.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return detail::make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    auto& pa = detail::parent(self, 0);
    auto& pb = detail::parent(self, 1);
    if (pa.requires_grad) {
      auto& g = pa.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

/// Hadamard product.
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return detail::make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    auto& pa = detail::parent(self, 0);
    auto& pb = detail::parent(self, 1);
    if (pa.requires_grad) {
      auto& g = pa.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T c) {
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v *= c;
  return detail::make_result<T>(std::move(out), {a}, [c](Node<T>& self) {
    auto& g = detail::parent(self, 0).ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * self.grad[i];
  });
}

/// a (n x d) + row (1 x d) broadcast over rows.
template <typename T>
Var<T> add_row(const Var<T>& a, const Var<T>& row) {
  const std::size_t n = a.rows(), d = a.cols();
  if (row.rows() != 1 || row.cols() != d) throw ShapeError("add_row: broadcast row width mismatch");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out(i, j) += row.value()[j];
  return detail::make_result<T>(std::move(out), {a, row}, [n, d](Node<T>& self) {
    auto& pa = detail::parent(self, 0);
    auto& pr = detail::parent(self, 1);
    if (pa.requires_grad) {
      auto& g = pa.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pr.requires_grad) {
      auto& g = pr.ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) g[j] += self.grad(i, j);
    }
  });
}

/// Scales row r of a (n x d) by w[r], w is (n x 1).
template <typename T>
Var<T> scale_rows(const Var<T>& a, const Var<T>& w) {
  const std::size_t n = a.rows(), d = a.cols();
  if (w.rows() != n || w.cols() != 1) throw ShapeError("scale_rows: weight column mismatch");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out(i, j) *= w.value()[i];
  return detail::make_result<T>(std::move(out), {a, w}, [n, d](Node<T>& self) {
    auto& pa = detail::parent(self, 0);
    auto& pw = detail::parent(self, 1);
    if (pa.requires_grad) {
      auto& g = pa.ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) g(i, j) += self.grad(i, j) * pw.value[i];
    }
    if (pw.requires_grad) {
      auto& g = pw.ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        T s{0};
        for (std::size_t j = 0; j < d; ++j) s += self.grad(i, j) * pa.value(i, j);
        g[i] += s;
      }
    }
  });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v = v > T{0} ? v : T{0};
  return detail::make_result<T>(std::move(out), {a}, [](Node<T>& self) {
    auto& pa = detail::parent(self, 0);
    auto& g = pa.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (pa.value[i] > T{0}) g[i] += self.grad[i];
  });
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v = stable_sigmoid(v);
  return detail::make_result<T>(std::move(out), {a}, [](Node<T>& self) {
    auto& g = detail::parent(self, 0).ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T s = self.value[i];
      g[i] += self.grad[i] * s * (T{1} - s);
    }
  });
}

// ---------------------------------------------------------------------------
// Normalizers and reductions

/// Row softmax with max subtraction and float64 denominators. Columns with
/// col_mask[j] == 0 receive zero probability. Every row needs one live column.
template <typename T>
Var<T> softmax_rows(const Var<T>& a, const std::vector<std::uint8_t>& col_mask = {}) {
  const std::size_t n = a.rows(), m = a.cols();
  if (n == 0 || m == 0) throw NumericError("softmax_rows: empty input");
  if (!col_mask.empty() && col_mask.size() != m) throw ShapeError("softmax_rows: mask width mismatch");
  if (!a.value().all_finite()) throw NumericError("softmax_rows: non-finite input");
  Tensor<T> out({n, m});
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < m; ++j)
      if (col_mask.empty() || col_mask[j]) mx = std::max(mx, static_cast<double>(a.value()(i, j)));
    if (!std::isfinite(mx)) throw NumericError("softmax_rows: every column masked");
    double denom = 0.0;
    std::vector<double> e(m, 0.0);
    for (std::size_t j = 0; j < m; ++j) {
      if (!col_mask.empty() && !col_mask[j]) continue;
      e[j] = std::exp(static_cast<double>(a.value()(i, j)) - mx);
      denom += e[j];
    }
    for (std::size_t j = 0; j < m; ++j) out(i, j) = static_cast<T>(e[j] / denom);
  }
  return detail::make_result<T>(std::move(out), {a}, [n, m](Node<T>& self) {
    auto& g = detail::parent(self, 0).ensure_grad();
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < m; ++j) dot += static_cast<double>(self.grad(i, j)) * self.value(i, j);
      for (std::size_t j = 0; j < m; ++j)
        g(i, j) += static_cast<T>(self.value(i, j) * (self.grad(i, j) - dot));
    }
  });
}

/// Rows scaled to unit L2 norm; rows with norm below eps map to zero.
template <typename T>
Var<T> l2_normalize_rows(const Var<T>& a, T eps = T(1e-12)) {
  const std::size_t n = a.rows(), d = a.cols();
  Tensor<T> out({n, d});
  std::vector<T> norms(n, T{0});
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += static_cast<double>(a.value()(i, j)) * a.value()(i, j);
    norms[i] = static_cast<T>(std::sqrt(s));
    if (norms[i] < eps) continue;
    for (std::size_t j = 0; j < d; ++j) out(i, j) = a.value()(i, j) / norms[i];
  }
  return detail::make_result<T>(std::move(out), {a}, [n, d, norms, eps](Node<T>& self) {
    auto& g = detail::parent(self, 0).ensure_grad();
    for (std::size_t i = 0; i < n; ++i) {
      if (norms[i] < eps) continue;
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += static_cast<double>(self.grad(i, j)) * self.value(i, j);
      for (std::size_t j = 0; j < d; ++j)
        g(i, j) += static_cast<T>((self.grad(i, j) - self.value(i, j) * dot) / norms[i]);
    }
  });
}

/// Column-wise mean over the rows whose row_mask entry is nonzero -> (1 x d).
template <typename T>
Var<T> mean_rows(const Var<T>& a, const std::vector<std::uint8_t>& row_mask = {}) {
  const std::size_t n = a.rows(), d = a.cols();
  if (!row_mask.empty() && row_mask.size() != n) throw ShapeError("mean_rows: mask length mismatch");
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) count += row_mask.empty() || row_mask[i] ? 1 : 0;
  if (count == 0) throw NumericError("mean_rows: empty input");
  std::vector<double> acc(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (!row_mask.empty() && !row_mask[i]) continue;
    for (std::size_t j = 0; j < d; ++j) acc[j] += a.value()(i, j);
  }
  Tensor<T> out({1, d});
  for (std::size_t j = 0; j < d; ++j) out[j] = static_cast<T>(acc[j] / static_cast<double>(count));
  return detail::make_result<T>(std::move(out), {a}, [n, d, count, row_mask](Node<T>& self) {
    auto& g = detail::parent(self, 0).ensure_grad();
    const T inv = T{1} / static_cast<T>(count);
    for (std::size_t i = 0; i < n; ++i) {
      if (!row_mask.empty() && !row_mask[i]) continue;
      for (std::size_t j = 0; j < d; ++j) g(i, j) += self.grad[j] * inv;
    }
  });
}

/// Column-wise max over rows -> (1 x d). Gradient routes to the first maximizer.
template <typename T>
Var<T> max_rows(const Var<T>& a, const std::vector<std::uint8_t>& row_mask = {}) {
  const std::size_t n = a.rows(), d = a.cols();
  if (!row_mask.empty() && row_mask.size() != n) throw ShapeError("max_rows: mask length mismatch");
  std::vector<std::size_t> arg(d, n);
  Tensor<T> out({1, d});
  for (std::size_t i = 0; i < n; ++i) {
    if (!row_mask.empty() && !row_mask[i]) continue;
    for (std::size_t j = 0; j < d; ++j)
      if (arg[j] == n || a.value()(i, j) > out[j]) {
        out[j] = a.value()(i, j);
        arg[j] = i;
      }
  }
  if (d > 0 && arg[0] == n) throw NumericError("max_rows: empty input");
  return detail::make_result<T>(std::move(out), {a}, [d, arg](Node<T>& self) {
    auto& g = detail::parent(self, 0).ensure_grad();
    for (std::size_t j = 0; j < d; ++j) g(arg[j], j) += self.grad[j];
  });
}

template <typename T>
Var<T> sum_all(const Var<T>& a) {
  double s = 0.0;
  for (T v : a.value().storage()) s += v;
  Tensor<T> out({1, 1}, static_cast<T>(s));
  return detail::make_result<T>(std::move(out), {a}, [](Node<T>& self) {
    auto& g = detail::parent(self, 0).ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0];
  });
}

template <typename T>
Var<T> mean_all(const Var<T>& a) {
  if (a.value().empty()) throw NumericError("mean_all: empty input");
  return scale(sum_all(a), T{1} / static_cast<T>(a.value().size()));
}

/// Stable log(sum(exp(row))) of every row: (n x k) -> (n x 1).
template <typename T>
Var<T> logsumexp_rows(const Var<T>& a) {
  const std::size_t n = a.rows(), k = a.cols();
  if (n == 0 || k == 0) throw ShapeError("logsumexp_rows: expects a nonempty matrix");
  std::vector<double> lse(n);
  Tensor<T> out({n, 1});
  for (std::size_t r = 0; r < n; ++r) {
    const T* row = a.value().data() + r * k;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(static_cast<double>(row[j]) - mx);
    lse[r] = mx + std::log(s);
    out[r] = static_cast<T>(lse[r]);
  }
  return detail::make_result<T>(std::move(out), {a}, [n, k, lse = std::move(lse)](Node<T>& self) {
    auto& pa = detail::parent(self, 0);
    auto& g = pa.ensure_grad();
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < k; ++j)
        g[r * k + j] += static_cast<T>(self.grad[r] * std::exp(static_cast<double>(pa.value[r * k + j]) - lse[r]));
  });
}

/// Stable log(sum(exp(row))) of a (1 x k) row -> (1 x 1).
template <typename T>
Var<T> logsumexp_row(const Var<T>& a) {
  if (a.rows() != 1 || a.cols() == 0) throw ShapeError("logsumexp_row: expects a nonempty row");
  return logsumexp_rows(a);
}

/// -log softmax(logits)[target] for a (1 x k) row of logits.
template <typename T>
Var<T> cross_entropy_row(const Var<T>& logits, std::size_t target) {
  if (target >= logits.cols()) throw ShapeError("cross_entropy_row: target out of range");
  return sub(logsumexp_row(logits), slice_cols(logits, target, target + 1));
}

// ---------------------------------------------------------------------------
// Structural

template <typename T>
Var<T> slice_cols(const Var<T>& a, std::size_t c0, std::size_t c1) {
  const std::size_t n = a.rows(), m = a.cols();
  if (c0 > c1 || c1 > m) throw ShapeError("slice_cols: range out of bounds");
  const std::size_t w = c1 - c0;
  Tensor<T> out({n, w});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < w; ++j) out(i, j) = a.value()(i, c0 + j);
  return detail::make_result<T>(std::move(out), {a}, [n, w, c0](Node<T>& self) {
    auto& g = detail::parent(self, 0).ensure_grad();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < w; ++j) g(i, c0 + j) += self.grad(i, j);
  });
}

template <typename T>
Var<T> slice_rows(const Var<T>& a, std::size_t r0, std::size_t r1) {
  const std::size_t n = a.rows(), d = a.cols();
  if (r0 > r1 || r1 > n) throw ShapeError("slice_rows: range out of bounds");
  Tensor<T> out({r1 - r0, d});
  std::copy(a.value().data() + r0 * d, a.value().data() + r1 * d, out.data());
  return detail::make_result<T>(std::move(out), {a}, [r0, r1, d](Node<T>& self) {
    auto& g = detail::parent(self, 0).ensure_grad();
    for (std::size_t i = 0; i < (r1 - r0) * d; ++i) g[r0 * d + i] += self.grad[i];
  });
}

template <typename T>
Var<T> gather_rows(const Var<T>& a, const std::vector<std::size_t>& idx) {
  const std::size_t d = a.cols();
  Tensor<T> out({idx.size(), d});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= a.rows()) throw ShapeError("gather_rows: index out of range");
    std::copy_n(a.value().data() + idx[i] * d, d, out.data() + i * d);
  }
  return detail::make_result<T>(std::move(out), {a}, [idx, d](Node<T>& self) {
    auto& g = detail::parent(self, 0).ensure_grad();
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) g(idx[i], j) += self.grad(i, j);
  });
}

template <typename T>
Var<T> gather_cols(const Var<T>& a, const std::vector<std::size_t>& idx) {
  const std::size_t n = a.rows(), w = idx.size();
  Tensor<T> out({n, w});
  for (std::size_t j = 0; j < w; ++j)
    if (idx[j] >= a.cols()) throw ShapeError("gather_cols: index out of range");
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < w; ++j) out(i, j) = a.value()(i, idx[j]);
  return detail::make_result<T>(std::move(out), {a}, [n, w, idx](Node<T>& self) {
    auto& g = detail::parent(self, 0).ensure_grad();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < w; ++j) g(i, idx[j]) += self.grad(i, j);
  });
}

/// Places the columns of a into a zero matrix of width `width` at positions idx.
template <typename T>
Var<T> scatter_cols(const Var<T>& a, const std::vector<std::size_t>& idx, std::size_t width) {
  const std::size_t n = a.rows(), w = a.cols();
  if (idx.size() != w) throw ShapeError("scatter_cols: index count mismatch");
  Tensor<T> out({n, width});
  for (std::size_t j = 0; j < w; ++j)
    if (idx[j] >= width) throw ShapeError("scatter_cols: index out of range");
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < w; ++j) out(i, idx[j]) = a.value()(i, j);
  return detail::make_result<T>(std::move(out), {a}, [n, w, idx](Node<T>& self) {
    auto& g = detail::parent(self, 0).ensure_grad();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < w; ++j) g(i, j) += self.grad(i, idx[j]);
  });
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t n = parts[0].rows();
  std::vector<std::size_t> offs;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rows() != n) throw ShapeError("concat_cols: row count mismatch");
    offs.push_back(total);
    total += p.cols();
  }
  Tensor<T> out({n, total});
  for (std::size_t k = 0; k < parts.size(); ++k)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < parts[k].cols(); ++j) out(i, offs[k] + j) = parts[k].value()(i, j);
  return detail::make_result<T>(std::move(out), parts, [n, offs](Node<T>& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      auto& p = *self.parents[k];
      if (!p.requires_grad) continue;
      auto& g = p.ensure_grad();
      const std::size_t w = p.value.dim(1);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < w; ++j) g(i, j) += self.grad(i, offs[k] + j);
    }
  });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t d = parts[0].cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.cols() != d) throw ShapeError("concat_rows: column count mismatch");
    total += p.rows();
  }
  Tensor<T> out({total, d});
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data(), p.value().data() + p.value().size(), out.data() + off);
    off += p.value().size();
  }
  return detail::make_result<T>(std::move(out), parts, [](Node<T>& self) {
    std::size_t off = 0;
    for (auto& pp : self.parents) {
      auto& p = *pp;
      if (p.requires_grad) {
        auto& g = p.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[off + i];
      }
      off += p.value.size();
    }
  });
}

}  // namespace lgqave
