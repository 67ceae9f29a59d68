#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "discdiff/errors.hpp"
#include "discdiff/nn.hpp"

namespace discdiff {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.0;
  double eps = 1e-8;

  void validate() const {
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
      throw InvalidArgument("AdamW betas must lie in [0, 1)");
    if (!(weight_decay >= 0.0)) throw InvalidArgument("weight_decay must be >= 0");
    if (!(eps > 0.0)) throw InvalidArgument("AdamW eps must be > 0");
  }
  bool operator==(const AdamWConfig&) const = default;
};

// Decoupled weight decay Adam over a ParameterSet's gradients.
template <typename T>
class AdamW {
 public:
  AdamW(const nn::ParameterSet<T>& params, AdamWConfig config) : config_(config) {
    config_.validate();
    for (const auto& e : params.entries()) {
      m_.emplace_back(e.var.shape(), T(0));
      v_.emplace_back(e.var.shape(), T(0));
    }
  }

  void step(nn::ParameterSet<T>& params, double lr) {
    if (params.size() != m_.size()) throw ShapeMismatch("optimizer/parameter count mismatch");
    ++steps_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
    for (std::size_t p = 0; p < m_.size(); ++p) {
      auto& var = params.entries()[p].var;
      Tensor<T>& w = var.mutable_value();
      const Tensor<T>& g = var.mutable_grad();
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        const double mi = config_.beta1 * m_[p][i] + (1.0 - config_.beta1) * gi;
        const double vi = config_.beta2 * v_[p][i] + (1.0 - config_.beta2) * gi * gi;
        m_[p][i] = static_cast<T>(mi);
        v_[p][i] = static_cast<T>(vi);
        double wi = static_cast<double>(w[i]) * (1.0 - lr * config_.weight_decay);
        wi -= lr * (mi / bc1) / (std::sqrt(vi / bc2) + config_.eps);
        w[i] = static_cast<T>(wi);
      }
    }
  }

  long steps() const noexcept { return steps_; }
  const std::vector<Tensor<T>>& first_moments() const noexcept { return m_; }
  const std::vector<Tensor<T>>& second_moments() const noexcept { return v_; }

  void restore(long steps, std::vector<Tensor<T>> m, std::vector<Tensor<T>> v) {
    if (m.size() != m_.size() || v.size() != v_.size()) throw ShapeMismatch("optimizer state size mismatch");
    for (std::size_t i = 0; i < m.size(); ++i) {
      require_same_shape(m[i], m_[i], "optimizer first moment");
      require_same_shape(v[i], v_[i], "optimizer second moment");
    }
    steps_ = steps;
    m_ = std::move(m);
    v_ = std::move(v);
  }

 private:
  AdamWConfig config_;
  long steps_ = 0;
  std::vector<Tensor<T>> m_, v_;
};

// Rescales all gradients so their joint L2 norm is at most `max_norm`.
// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(nn::ParameterSet<T>& params, double max_norm) {
  double sq = 0.0;
  for (auto& e : params.entries())
    for (T g : e.var.mutable_grad().values()) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const auto k = static_cast<T>(max_norm / (norm + 1e-12));
    for (auto& e : params.entries())
      for (T& g : e.var.mutable_grad().values()) g *= k;
  }
  return norm;
}

// Exponential moving average of parameter values. With warmup the effective
// decay after n updates is min(decay, (1 + n) / (10 + n)).
template <typename T>
class Ema {
 public:
  Ema(const nn::ParameterSet<T>& params, double decay, bool warmup)
      : decay_(decay), warmup_(warmup), shadow_(params.snapshot()) {
    if (!(decay >= 0.0 && decay <= 1.0)) throw InvalidArgument("ema_decay must lie in [0, 1]");
  }

  double effective_decay() const {
    if (!warmup_) return decay_;
    const double n = static_cast<double>(updates_);
    return std::min(decay_, (1.0 + n) / (10.0 + n));
  }

  void update(const nn::ParameterSet<T>& params) {
    const double d = effective_decay();
    for (std::size_t p = 0; p < shadow_.size(); ++p) {
      const Tensor<T>& w = params.entries()[p].var.value();
      for (std::size_t i = 0; i < w.size(); ++i)
        shadow_[p][i] = static_cast<T>(d * shadow_[p][i] + (1.0 - d) * w[i]);
    }
    ++updates_;
  }

  const std::vector<Tensor<T>>& shadow() const noexcept { return shadow_; }
  long updates() const noexcept { return updates_; }

  void restore(long updates, std::vector<Tensor<T>> shadow) {
    if (shadow.size() != shadow_.size()) throw ShapeMismatch("EMA state size mismatch");
    for (std::size_t i = 0; i < shadow.size(); ++i) require_same_shape(shadow[i], shadow_[i], "EMA tensor");
    updates_ = updates;
    shadow_ = std::move(shadow);
  }

 private:
  double decay_;
  bool warmup_;
  long updates_ = 0;
  std::vector<Tensor<T>> shadow_;
};

}  // namespace discdiff
