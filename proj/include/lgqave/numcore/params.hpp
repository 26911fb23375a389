#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "lgqave/numcore/autograd.hpp"
#include "lgqave/numcore/rng.hpp"

namespace lgqave {

using ParamId = std::size_t;

/// Named, ordered collection of learnable tensors.
template <typename T>
class ParamStore {
 public:
  ParamId add(const std::string& name, Tensor<T> value) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter " + name);
    index_[name] = values_.size();
    names_.push_back(name);
    values_.push_back(std::move(value));
    return values_.size() - 1;
  }

  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) matrix.
  ParamId add_uniform(const std::string& name, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Tensor<T> w({fan_in, fan_out});
    for (auto& v : w.storage()) v = static_cast<T>(rng.uniform(-bound, bound));
    return add(name, std::move(w));
  }

  std::size_t size() const { return values_.size(); }
  const std::string& name(ParamId id) const { return names_.at(id); }
  ParamId id(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter " + name);
    return it->second;
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Tensor<T>& value(ParamId id) { return values_.at(id); }
  const Tensor<T>& value(ParamId id) const { return values_.at(id); }

  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& v : values_) n += v.size();
    return n;
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (std::size_t i = 0; i < values_.size(); ++i) out.add(names_[i], values_[i].template cast<U>());
    return out;
  }

  std::vector<Tensor<T>> zeros_like() const {
    std::vector<Tensor<T>> out;
    out.reserve(values_.size());
    for (const auto& v : values_) out.emplace_back(v.shape());
    return out;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<T>> values_;
  std::map<std::string, ParamId> index_;
};

/// Binds parameters to leaf nodes for one forward pass. Each parameter gets one
/// leaf, created on first use, so its gradient collects every use site.
template <typename T>
class Tape {
 public:
  explicit Tape(const ParamStore<T>& store, bool track = true)
      : store_(&store), track_(track), leaves_(store.size()) {}

  const Var<T>& param(ParamId id) {
    auto& slot = leaves_.at(id);
    if (!slot.defined()) slot = Var<T>(store_->value(id), track_);
    return slot;
  }

  bool tracking() const { return track_; }
  const ParamStore<T>& store() const { return *store_; }

  /// Adds each bound leaf's gradient into `into` (indexed like the store).
  void accumulate_grads(std::vector<Tensor<T>>& into) const {
    for (std::size_t i = 0; i < leaves_.size(); ++i) {
      if (!leaves_[i].defined() || leaves_[i].node()->grad.empty()) continue;
      const auto& g = leaves_[i].node()->grad;
      auto& dst = into.at(i);
      for (std::size_t k = 0; k < g.size(); ++k) dst[k] += g[k];
    }
  }

 private:
  const ParamStore<T>* store_;
  bool track_;
  std::vector<Var<T>> leaves_;
};

}  // namespace lgqave
