#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "discdiff/errors.hpp"
#include "discdiff/tensor.hpp"

namespace discdiff {

// Per-step noise tables for a T-step diffusion. Steps are 1-based
// throughout: beta(1) .. beta(T).
class NoiseSchedule {
 public:
  NoiseSchedule() = default;

  // Builds the tables from betas; ᾱ is the running product of α.
  static NoiseSchedule from_betas(std::vector<double> betas, std::vector<int> original_indices = {}) {
    NoiseSchedule s;
    if (betas.empty()) throw InvalidArgument("noise schedule needs at least one step");
    for (double b : betas)
      if (!(b > 0.0 && b < 1.0)) throw InvalidArgument("beta outside (0, 1): " + std::to_string(b));
    s.betas_ = std::move(betas);
    s.alphas_.resize(s.betas_.size());
    s.alpha_bars_.resize(s.betas_.size());
    double prod = 1.0;
    for (std::size_t i = 0; i < s.betas_.size(); ++i) {
      s.alphas_[i] = 1.0 - s.betas_[i];
      prod *= s.alphas_[i];
      s.alpha_bars_[i] = prod;
    }
    s.finish(std::move(original_indices));
    return s;
  }

  // Builds the tables from a strictly decreasing ᾱ sequence, keeping those
  // values bit-exact (used by respacing).
  static NoiseSchedule from_alpha_bars(std::vector<double> alpha_bars,
                                       std::vector<int> original_indices = {}) {
    NoiseSchedule s;
    if (alpha_bars.empty()) throw InvalidArgument("noise schedule needs at least one step");
    s.alpha_bars_ = std::move(alpha_bars);
    s.alphas_.resize(s.alpha_bars_.size());
    s.betas_.resize(s.alpha_bars_.size());
    double prev = 1.0;
    for (std::size_t i = 0; i < s.alpha_bars_.size(); ++i) {
      s.alphas_[i] = s.alpha_bars_[i] / prev;
      s.betas_[i] = 1.0 - s.alphas_[i];
      if (!(s.betas_[i] > 0.0 && s.betas_[i] < 1.0))
        throw InvalidArgument("alpha_bar sequence is not strictly decreasing in (0, 1)");
      prev = s.alpha_bars_[i];
    }
    s.finish(std::move(original_indices));
    return s;
  }

  int steps() const noexcept { return static_cast<int>(betas_.size()); }

  double beta(int t) const { return betas_[index(t)]; }
  double alpha(int t) const { return alphas_[index(t)]; }
  double alpha_bar(int t) const { return alpha_bars_[index(t)]; }
  double alpha_bar_prev(int t) const { return t == 1 ? 1.0 : alpha_bars_[index(t) - 1]; }
  // β̃_t = (1 − ᾱ_{t−1}) / (1 − ᾱ_t) · β_t; zero at t = 1.
  double posterior_variance(int t) const { return posterior_variances_[index(t)]; }
  // β̃_t with the t = 1 zero replaced by β̃_2 (or β_1 for a one-step
  // schedule) so its logarithm is finite.
  double posterior_variance_clipped(int t) const {
    if (t != 1) return posterior_variance(t);
    return steps() >= 2 ? posterior_variances_[1] : betas_[0];
  }
  // Coefficients of the forward posterior mean
  // μ̃(x_t, x_0) = coef_x0 · x_0 + coef_xt · x_t.
  double posterior_coef_x0(int t) const {
    return beta(t) * std::sqrt(alpha_bar_prev(t)) / (1.0 - alpha_bar(t));
  }
  double posterior_coef_xt(int t) const {
    return (1.0 - alpha_bar_prev(t)) * std::sqrt(alpha(t)) / (1.0 - alpha_bar(t));
  }
  // Step index in the schedule this one was respaced from (identity for an
  // original schedule).
  int original_index(int t) const { return original_indices_[index(t)]; }

  const std::vector<double>& betas() const noexcept { return betas_; }
  const std::vector<double>& alphas() const noexcept { return alphas_; }
  const std::vector<double>& alpha_bars() const noexcept { return alpha_bars_; }
  const std::vector<double>& posterior_variances() const noexcept { return posterior_variances_; }
  const std::vector<int>& original_indices() const noexcept { return original_indices_; }

  void check_step(int t) const {
    if (t < 1 || t > steps())
      throw StepOutOfRange("step " + std::to_string(t) + " outside [1, " + std::to_string(steps()) +
                           "]");
  }

  bool operator==(const NoiseSchedule&) const = default;

 private:
  std::size_t index(int t) const {
    check_step(t);
    return static_cast<std::size_t>(t - 1);
  }

  void finish(std::vector<int> original_indices) {
    const std::size_t n = betas_.size();
    posterior_variances_.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double prev = i == 0 ? 1.0 : alpha_bars_[i - 1];
      posterior_variances_[i] = (1.0 - prev) / (1.0 - alpha_bars_[i]) * betas_[i];
    }
    if (original_indices.empty()) {
      original_indices.resize(n);
      for (std::size_t i = 0; i < n; ++i) original_indices[i] = static_cast<int>(i + 1);
    }
    if (original_indices.size() != n)
      throw InvalidArgument("original_indices length differs from step count");
    original_indices_ = std::move(original_indices);
  }

  std::vector<double> betas_;
  std::vector<double> alphas_;
  std::vector<double> alpha_bars_;
  std::vector<double> posterior_variances_;
  std::vector<int> original_indices_;
};

inline NoiseSchedule make_linear_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw InvalidArgument("schedule step count must be >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw InvalidArgument("need 0 < beta_start <= beta_end < 1");
  std::vector<double> betas(static_cast<std::size_t>(steps));
  for (int i = 0; i < steps; ++i)
    betas[static_cast<std::size_t>(i)] =
        steps == 1 ? beta_start
                   : beta_start + (beta_end - beta_start) * static_cast<double>(i) / (steps - 1);
  betas.back() = steps == 1 ? beta_start : beta_end;
  return NoiseSchedule::from_betas(std::move(betas));
}

// Evenly spaced subsequence of `n_steps` parent steps, always ending at T.
// The selected parent ᾱ values are carried over unchanged.
inline NoiseSchedule respace_schedule(const NoiseSchedule& parent, int n_steps) {
  const int T = parent.steps();
  if (n_steps < 1 || n_steps > T)
    throw InvalidArgument("respacing to " + std::to_string(n_steps) + " steps needs 1 <= n <= " +
                          std::to_string(T));
  if (n_steps == T) return parent;
  std::vector<int> selected;
  if (n_steps == 1) {
    selected.push_back(T);
  } else {
    // floor(i·(T−1)/(n−1)) is strictly increasing since the stride is >= 1.
    for (int i = 0; i < n_steps; ++i) {
      const long zero_based = static_cast<long>(i) * (T - 1) / (n_steps - 1);
      selected.push_back(static_cast<int>(zero_based) + 1);
    }
  }
  std::vector<double> bars;
  std::vector<int> original;
  for (int t : selected) {
    bars.push_back(parent.alpha_bar(t));
    original.push_back(parent.original_index(t));
  }
  return NoiseSchedule::from_alpha_bars(std::move(bars), std::move(original));
}

// x_t = √ᾱ_t · x0 + √(1 − ᾱ_t) · eps
template <typename T>
Tensor<T> q_sample(const Tensor<T>& x0, int t, const Tensor<T>& eps, const NoiseSchedule& schedule) {
  require_same_shape(x0, eps, "q_sample");
  const double ab = schedule.alpha_bar(t);
  const T a = static_cast<T>(std::sqrt(ab)), b = static_cast<T>(std::sqrt(1.0 - ab));
  Tensor<T> out(x0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x0[i] + b * eps[i];
  return out;
}

// μ = (x_t − β_t / √(1 − ᾱ_t) · ε) / √α_t
template <typename T>
Tensor<T> posterior_mean_from_eps(const Tensor<T>& x_t, const Tensor<T>& eps_pred, int t,
                                  const NoiseSchedule& schedule) {
  require_same_shape(x_t, eps_pred, "posterior_mean_from_eps");
  const double inv_sqrt_alpha = 1.0 / std::sqrt(schedule.alpha(t));
  const double eps_coef = schedule.beta(t) / std::sqrt(1.0 - schedule.alpha_bar(t));
  Tensor<T> out(x_t.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<T>(inv_sqrt_alpha * (static_cast<double>(x_t[i]) -
                                              eps_coef * static_cast<double>(eps_pred[i])));
  return out;
}

// log σ² = v · log β_t + (1 − v) · log β̃_t, with the clipped β̃ at t = 1.
inline double log_variance_from_v(double v, int t, const NoiseSchedule& schedule) {
  return v * std::log(schedule.beta(t)) + (1.0 - v) * std::log(schedule.posterior_variance_clipped(t));
}

template <typename T>
Tensor<T> variance_from_vpred(const Tensor<T>& v_pred, int t, const NoiseSchedule& schedule) {
  schedule.check_step(t);
  Tensor<T> out(v_pred.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = static_cast<double>(v_pred[i]);
    if (!(v >= 0.0 && v <= 1.0))
      throw DomainError("variance interpolation coefficient outside [0, 1]: " + std::to_string(v));
    out[i] = static_cast<T>(std::exp(log_variance_from_v(v, t, schedule)));
  }
  return out;
}

}  // namespace discdiff
