#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "lgqave/numcore/params.hpp"

namespace lgqave {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::uint64_t step = 0;

  static AdamState for_params(const ParamStore<T>& params) {
    return {params.zeros_like(), params.zeros_like(), 0};
  }
};

/// One bias-corrected Adam update in place.
template <typename T>
void adam_step(ParamStore<T>& params, const std::vector<Tensor<T>>& grads, AdamState<T>& state, double lr,
               const AdamConfig& cfg = {}) {
  if (grads.size() != params.size() || state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ShapeError("adam_step: parameter/gradient/state count mismatch");
  }
  state.step += 1;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& w = params.value(p);
    const auto& g = grads[p];
    auto& m = state.m[p];
    auto& v = state.v[p];
    if (g.shape() != w.shape() || m.shape() != w.shape() || v.shape() != w.shape()) {
      throw ShapeError("adam_step: shape mismatch for " + params.name(p));
    }
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i];
      const double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      const double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double mhat = mi / c1;
      const double vhat = vi / c2;
      w[i] = static_cast<T>(w[i] - lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

}  // namespace lgqave
