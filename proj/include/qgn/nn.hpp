#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "qgn/ops.hpp"
#include "qgn/rng.hpp"
#include "qgn/tape.hpp"
#include "qgn/tensor.hpp"

namespace qgn {

/// Owns all trainable tensors of a model, keyed by hierarchical name.
class ParamStore {
 public:
  Tensor& create(const std::string& name, Tensor init) {
    auto [it, fresh] = params_.emplace(name, std::move(init));
    if (!fresh) throw std::logic_error("ParamStore: duplicate parameter " + name);
    return it->second;
  }

  Tensor& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("ParamStore: unknown parameter " + name);
    return it->second;
  }
  const Tensor& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("ParamStore: unknown parameter " + name);
    return it->second;
  }

  bool has(const std::string& name) const { return params_.count(name) != 0; }

  int64_t total_elements() const {
    int64_t n = 0;
    for (const auto& [k, v] : params_) n += v.numel();
    return n;
  }

  const std::map<std::string, Tensor>& all() const { return params_; }
  std::map<std::string, Tensor>& all_mut() { return params_; }

 private:
  std::map<std::string, Tensor> params_;
};

/// Binds store parameters onto one tape for a single forward/backward pass.
/// Each parameter becomes at most one leaf per pass so gradients from all uses
/// accumulate in one buffer.
class ParamBinder {
 public:
  ParamBinder(Tape* tape, ParamStore* store, bool train = true)
      : tape_(tape), store_(store), train_(train) {}

  Value operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return Value{tape_, it->second};
    Value v = tape_->leaf(store_->at(name), train_);
    bound_.emplace(name, v.id);
    return v;
  }

  /// Gradients of every bound parameter after tape.backward(). Parameters that
  /// never entered the graph this pass are absent.
  std::map<std::string, Tensor> grads() const {
    std::map<std::string, Tensor> out;
    for (const auto& [name, id] : bound_) {
      if (!tape_->requires_grad(id)) continue;
      Tensor g = tape_->grad(id);
      if (!g.empty()) out.emplace(name, std::move(g));
    }
    return out;
  }

  Tape& tape() { return *tape_; }
  bool training() const { return train_; }

 private:
  Tape* tape_;
  ParamStore* store_;
  bool train_;
  std::map<std::string, int> bound_;
};

// Centered uniform init with fan-in scaling: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
inline Tensor init_uniform_fan_in(std::vector<int> shape, int fan_in, RandomSource& rng) {
  Tensor t(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-bound, bound);
  return t;
}

struct LinearLayer {
  std::string w, b;
  int in = 0, out = 0;

  static LinearLayer create(ParamStore& ps, RandomSource& rng, const std::string& prefix, int in,
                            int out, bool bias = true) {
    LinearLayer l{prefix + ".w", bias ? prefix + ".b" : "", in, out};
    ps.create(l.w, init_uniform_fan_in({out, in}, in, rng));
    if (bias) ps.create(l.b, init_uniform_fan_in({out}, in, rng));
    return l;
  }

  Value forward(ParamBinder& p, Value x) const {
    return linear(x, p(w), b.empty() ? Value{} : p(b));
  }
};

struct Conv2dLayer {
  std::string w, b;
  int stride = 1, pad = 0;

  static Conv2dLayer create(ParamStore& ps, RandomSource& rng, const std::string& prefix, int ci,
                            int co, int k, int stride, int pad, bool bias = true) {
    Conv2dLayer l{prefix + ".w", bias ? prefix + ".b" : "", stride, pad};
    const int fan_in = ci * k * k;
    ps.create(l.w, init_uniform_fan_in({co, ci, k, k}, fan_in, rng));
    if (bias) ps.create(l.b, init_uniform_fan_in({co}, fan_in, rng));
    return l;
  }

  Value forward(ParamBinder& p, Value x) const {
    return conv2d(x, p(w), b.empty() ? Value{} : p(b), stride, pad);
  }
};

/// Adam with the standard bias correction. Moment buffers are keyed the same
/// way as the parameters they track.
class AdamOptimizer {
 public:
  explicit AdamOptimizer(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParamStore& ps, const std::map<std::string, Tensor>& grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (const auto& [name, g] : grads) {
      Tensor& p = ps.at(name);
      auto& [m, v] = moments_[name];
      if (m.empty()) {
        m = Tensor(p.shape());
        v = Tensor(p.shape());
      }
      for (int64_t i = 0; i < p.numel(); ++i) {
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
        p[i] -= lr_ * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
      }
    }
  }

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  int64_t steps() const { return t_; }

  std::map<std::string, std::pair<Tensor, Tensor>>& moments() { return moments_; }
  void restore(int64_t t) { t_ = t; }

 private:
  double lr_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::map<std::string, std::pair<Tensor, Tensor>> moments_;
};

class SgdOptimizer {
 public:
  explicit SgdOptimizer(double lr, double momentum = 0.9) : lr_(lr), momentum_(momentum) {}

  void step(ParamStore& ps, const std::map<std::string, Tensor>& grads) {
    for (const auto& [name, g] : grads) {
      Tensor& p = ps.at(name);
      Tensor& v = velocity_[name];
      if (v.empty()) v = Tensor(p.shape());
      for (int64_t i = 0; i < p.numel(); ++i) {
        v[i] = momentum_ * v[i] + g[i];
        p[i] -= lr_ * v[i];
      }
    }
  }

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  std::map<std::string, Tensor>& velocity() { return velocity_; }

 private:
  double lr_, momentum_;
  std::map<std::string, Tensor> velocity_;
};

}  // namespace qgn
