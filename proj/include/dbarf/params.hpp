// Named parameter storage shared by the trainable subsystems. Parameters
// persist across steps; each step binds them onto the live tape as leaves and
// collects tape gradients back after backward(). Adam moments live here too.
#pragma once

#include <map>

#include "dbarf/tensor.hpp"

namespace dbarf {

template <typename S>
struct ParamT {
  std::string name;
  ArrayT<S> value;
  ArrayT<S> grad;
  ArrayT<S> m, v;  // Adam moments
};

template <typename S>
class ParamStoreT {
 public:
  ParamT<S>& add(const std::string& name, Shape shape) {
    if (index_.count(name)) throw StateError("parameter '" + name + "' already registered");
    index_[name] = params_.size();
    params_.push_back({name, ArrayT<S>::zeros(shape), ArrayT<S>::zeros(shape),
                       ArrayT<S>::zeros(shape), ArrayT<S>::zeros(shape)});
    return params_.back();
  }

  ParamT<S>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw StateError("unknown parameter '" + name + "'");
    return params_[it->second];
  }
  const ParamT<S>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw StateError("unknown parameter '" + name + "'");
    return params_[it->second];
  }
  bool has(const std::string& name) const { return index_.count(name) > 0; }

  std::vector<ParamT<S>>& params() { return params_; }
  const std::vector<ParamT<S>>& params() const { return params_; }

  int64_t total_elements() const {
    int64_t n = 0;
    for (const auto& p : params_) n += p.value.numel();
    return n;
  }

 private:
  std::vector<ParamT<S>> params_;
  std::map<std::string, size_t> index_;
};

// Per-step binding of a store's parameters onto a tape.
template <typename S>
class BoundParamsT {
 public:
  BoundParamsT(TapeT<S>& tape, ParamStoreT<S>& store, bool trainable = true) : store_(&store) {
    for (auto& p : store.params()) {
      leaves_.push_back(tape.leaf(p.value, trainable));
      names_[p.name] = leaves_.size() - 1;
    }
  }

  TensorT<S> operator[](const std::string& name) const {
    auto it = names_.find(name);
    if (it == names_.end()) throw StateError("unbound parameter '" + name + "'");
    return leaves_[it->second];
  }

  // Accumulates tape gradients back into the store.
  void collect_grads() {
    auto& ps = store_->params();
    for (size_t i = 0; i < ps.size(); ++i) {
      if (!leaves_[i].node()->grad_alloc) continue;
      const ArrayT<S>& g = leaves_[i].node()->grad;
      for (int64_t k = 0; k < g.numel(); ++k) ps[i].grad[k] += g[k];
    }
  }

 private:
  ParamStoreT<S>* store_;
  std::vector<TensorT<S>> leaves_;
  std::map<std::string, size_t> names_;
};

// Global-norm clipping followed by an Adam update; gradients are cleared.
template <typename S>
void adam_step(ParamStoreT<S>& store, double lr, int64_t step, double clip_norm = 1.0,
               double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
  double sq = 0.0;
  for (auto& p : store.params())
    for (int64_t i = 0; i < p.grad.numel(); ++i) sq += static_cast<double>(p.grad[i]) * p.grad[i];
  const double norm = std::sqrt(sq);
  const double scale = (clip_norm > 0 && norm > clip_norm) ? clip_norm / norm : 1.0;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step + 1));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step + 1));
  for (auto& p : store.params()) {
    for (int64_t i = 0; i < p.value.numel(); ++i) {
      const double g = static_cast<double>(p.grad[i]) * scale;
      const double m = beta1 * p.m[i] + (1.0 - beta1) * g;
      const double v = beta2 * p.v[i] + (1.0 - beta2) * g * g;
      p.m[i] = static_cast<S>(m);
      p.v[i] = static_cast<S>(v);
      p.value[i] -= static_cast<S>(lr * (m / bc1) / (std::sqrt(v / bc2) + eps));
      p.grad[i] = S(0);
    }
  }
}

template <typename S>
void zero_grads(ParamStoreT<S>& store) {
  for (auto& p : store.params()) p.grad.fill(S(0));
}

// fan-in scaled uniform init (He-style for the relu paths)
template <typename S>
void init_kaiming(ParamT<S>& p, Rng& rng, int64_t fan_in, double gain = std::sqrt(2.0)) {
  const double bound = gain * std::sqrt(3.0 / static_cast<double>(fan_in));
  for (int64_t i = 0; i < p.value.numel(); ++i)
    p.value[i] = static_cast<S>(rng.uniform(-bound, bound));
}

}  // namespace dbarf
