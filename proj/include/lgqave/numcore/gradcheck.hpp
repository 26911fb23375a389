#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "lgqave/numcore/params.hpp"

namespace lgqave {

/// max_i |analytic_i - numeric_i| / max(1, |analytic_i|), numeric by central differences.
template <typename T>
double relative_gradient_error(const Tensor<T>& analytic, const Tensor<T>& numeric) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double a = analytic[i];
    const double n = numeric[i];
    worst = std::max(worst, std::abs(a - n) / std::max(1.0, std::abs(a)));
  }
  return worst;
}

/// Compares the tape gradient of scalar f at x with central differences.
template <typename T>
double grad_check(const std::function<Var<T>(const Var<T>&)>& f, const Tensor<T>& x, T eps) {
  Var<T> leaf = Var<T>::leaf(x);
  Var<T> y = f(leaf);
  backward(y);
  const Tensor<T> analytic = leaf.grad();

  Tensor<T> xm = leaf.value();
  Tensor<T> numeric(xm.shape());
  for (std::size_t i = 0; i < xm.size(); ++i) {
    const T orig = xm[i];
    xm[i] = orig + eps;
    const double fp = f(Var<T>::constant(xm)).item();
    xm[i] = orig - eps;
    const double fm = f(Var<T>::constant(xm)).item();
    xm[i] = orig;
    numeric[i] = static_cast<T>((fp - fm) / (2.0 * static_cast<double>(eps)));
  }
  return relative_gradient_error(analytic, numeric);
}

/// Per-parameter result of a model-level gradient check.
struct ParamCheck {
  std::string name;
  std::size_t elements = 0;
  double max_rel_error = 0.0;
};

/// Checks d loss / d param for every parameter in `store`. `loss` builds the
/// scalar from a tape bound to the store; it is re-run for each perturbation.
template <typename T>
std::vector<ParamCheck> grad_check_params(ParamStore<T>& store, const std::function<Var<T>(Tape<T>&)>& loss,
                                          T eps) {
  std::vector<Tensor<T>> analytic = store.zeros_like();
  {
    Tape<T> tape(store);
    Var<T> y = loss(tape);
    backward(y);
    tape.accumulate_grads(analytic);
  }
  auto eval = [&]() {
    Tape<T> tape(store, false);
    return static_cast<double>(loss(tape).item());
  };
  std::vector<ParamCheck> out;
  for (ParamId p = 0; p < store.size(); ++p) {
    auto& w = store.value(p);
    Tensor<T> numeric(w.shape());
    for (std::size_t i = 0; i < w.size(); ++i) {
      const T orig = w[i];
      w[i] = orig + eps;
      const double fp = eval();
      w[i] = orig - eps;
      const double fm = eval();
      w[i] = orig;
      numeric[i] = static_cast<T>((fp - fm) / (2.0 * static_cast<double>(eps)));
    }
    out.push_back({store.name(p), w.size(), relative_gradient_error(analytic[p], numeric)});
  }
  return out;
}

}  // namespace lgqave
