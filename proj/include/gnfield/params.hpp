#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "gnfield/autodiff.hpp"
#include "gnfield/rng.hpp"
#include "gnfield/tensor.hpp"

namespace gnfield {

enum class LrGroup { kBackbone, kRest };

template <class S>
struct Param {
  std::string name;
  Tensor<S> value;
  Tensor<S> grad;
  Tensor<S> m, v;  // Adam moments
  bool trainable = true;
  bool is_state = false;  // running statistics: persisted, never optimized
  LrGroup group = LrGroup::kRest;
};

template <class S>
class ParamStore {
 public:
  uint64_t init_seed = 0;

  int add(const std::string& name, Tensor<S> value, bool trainable = true) {
    if (index_.count(name)) throw std::invalid_argument("duplicate param " + name);
    Param<S> p;
    p.name = name;
    p.value = std::move(value);
    p.trainable = trainable;
    p.group = name.rfind("backbone.", 0) == 0 ? LrGroup::kBackbone : LrGroup::kRest;
    params_.push_back(std::move(p));
    index_[name] = static_cast<int>(params_.size()) - 1;
    return static_cast<int>(params_.size()) - 1;
  }

  int add_state(const std::string& name, Tensor<S> value) {
    int id = add(name, std::move(value), false);
    params_[static_cast<size_t>(id)].is_state = true;
    return id;
  }

  // Fan-in scaled uniform init, keyed by parameter name so registration order
  // does not matter.
  int add_linear_weight(const std::string& name, int64_t fan_in, int64_t fan_out,
                        double scale = 1.0) {
    Tensor<S> w(Shape{fan_in, fan_out});
    Rng rng(init_seed, name);
    const double a = scale / std::sqrt(static_cast<double>(fan_in));
    for (int64_t i = 0; i < w.numel(); ++i) w[i] = static_cast<S>(rng.uniform(-a, a));
    return add(name, std::move(w));
  }

  int add_conv_weight(const std::string& name, int64_t c_out, int64_t c_in, int64_t k) {
    Tensor<S> w(Shape{c_out, c_in, k, k});
    Rng rng(init_seed, name);
    const double a = 1.0 / std::sqrt(static_cast<double>(c_in * k * k));
    for (int64_t i = 0; i < w.numel(); ++i) w[i] = static_cast<S>(rng.uniform(-a, a));
    return add(name, std::move(w));
  }

  int add_zeros(const std::string& name, Shape shape) { return add(name, Tensor<S>::zeros(shape)); }
  int add_full(const std::string& name, Shape shape, S x) {
    return add(name, Tensor<S>::full(shape, x));
  }

  Param<S>& at(int id) { return params_[static_cast<size_t>(id)]; }
  const Param<S>& at(int id) const { return params_[static_cast<size_t>(id)]; }
  int find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? -1 : it->second;
  }
  size_t size() const { return params_.size(); }
  std::vector<Param<S>>& all() { return params_; }
  const std::vector<Param<S>>& all() const { return params_; }

 private:
  std::vector<Param<S>> params_;
  std::unordered_map<std::string, int> index_;
};

// Binds store parameters to tape leaves for one forward/backward pass.
template <class S>
class Binder {
 public:
  Binder(Tape<S>& tape, ParamStore<S>& store, bool training)
      : tape_(tape), store_(store), training_(training), var_of_(store.size(), -1) {}

  Var<S> operator()(int pid) {
    int& vid = var_of_[static_cast<size_t>(pid)];
    if (vid < 0) {
      const Param<S>& p = store_.at(pid);
      Var<S> v = make_leaf(tape_, p.value, p.trainable);
      vid = v.id;
    }
    return Var<S>{&tape_, vid};
  }

  bool training() const { return training_; }
  Tape<S>& tape() { return tape_; }
  ParamStore<S>& store() { return store_; }

  // Copies tape gradients back into the store (accumulating).
  void harvest_grads() {
    for (size_t i = 0; i < var_of_.size(); ++i) {
      const int vid = var_of_[i];
      if (vid < 0) continue;
      Param<S>& p = store_.at(static_cast<int>(i));
      if (!p.trainable) continue;
      auto& node = tape_.nodes[static_cast<size_t>(vid)];
      if (node.grad.empty()) continue;
      if (p.grad.empty()) p.grad = Tensor<S>::zeros(p.value.shape);
      detail::accum(p.grad, node.grad);
    }
  }

 private:
  Tape<S>& tape_;
  ParamStore<S>& store_;
  bool training_;
  std::vector<int> var_of_;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One Adam update over all trainable parameters with accumulated gradients.
template <class S>
void adam_step(ParamStore<S>& store, int64_t step_index, double lr_backbone, double lr_rest,
               const AdamConfig& cfg = {}) {
  const double t = static_cast<double>(step_index + 1);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (Param<S>& p : store.all()) {
    if (!p.trainable || p.grad.empty()) continue;
    if (p.m.empty()) {
      p.m = Tensor<S>::zeros(p.value.shape);
      p.v = Tensor<S>::zeros(p.value.shape);
    }
    const double lr = p.group == LrGroup::kBackbone ? lr_backbone : lr_rest;
    for (int64_t i = 0; i < p.value.numel(); ++i) {
      const double g = static_cast<double>(p.grad[i]);
      const double m = cfg.beta1 * static_cast<double>(p.m[i]) + (1.0 - cfg.beta1) * g;
      const double v = cfg.beta2 * static_cast<double>(p.v[i]) + (1.0 - cfg.beta2) * g * g;
      p.m[i] = static_cast<S>(m);
      p.v[i] = static_cast<S>(v);
      const double update = lr * (m / bc1) / (std::sqrt(v / bc2) + cfg.eps);
      p.value[i] = static_cast<S>(static_cast<double>(p.value[i]) - update);
    }
    for (int64_t i = 0; i < p.grad.numel(); ++i) p.grad[i] = S(0);
  }
}

template <class S>
void zero_grads(ParamStore<S>& store) {
  for (Param<S>& p : store.all())
    for (int64_t i = 0; i < p.grad.numel(); ++i) p.grad[i] = S(0);
}

}  // namespace gnfield
