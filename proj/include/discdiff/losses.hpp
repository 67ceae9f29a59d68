#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include "discdiff/autograd.hpp"
#include "discdiff/schedule.hpp"
#include "discdiff/unet.hpp"

namespace discdiff {

struct LossWeights {
  double lambda1 = 1.0;     // disentanglement
  double lambda2 = 1.0;     // reconstruction (Charbonnier or MSE)
  double gamma = 1e-3;      // Charbonnier constant
  double vlb_weight = 1.0;  // learned-variance term
  double eps_div = 1e-8;    // guard on the disentanglement denominator

  void validate() const {
    if (!(lambda1 >= 0.0 && lambda1 <= 1.0) || !(lambda2 > 0.0 && lambda2 <= 1.0))
      throw InvalidArgument("loss weights must lie in (0, 1] (lambda1 may be 0 for ablation)");
    if (!(gamma > 0.0)) throw InvalidArgument("Charbonnier gamma must be > 0");
    if (!(vlb_weight >= 0.0)) throw InvalidArgument("vlb_weight must be >= 0");
    if (!(eps_div > 0.0)) throw InvalidArgument("eps_div must be > 0");
  }

  bool operator==(const LossWeights&) const = default;
};

enum class Reconstruction { charbonnier, mse };

// mean √((ε_θ − ε)² + γ²)
template <typename T>
ag::Var<T> charbonnier_loss(const ag::Var<T>& eps_pred, const ag::Var<T>& eps_true, double gamma) {
  require_same_shape(eps_pred.value(), eps_true.value(), "charbonnier_loss");
  if (!(gamma > 0.0)) throw InvalidArgument("Charbonnier gamma must be > 0");
  return ag::charbonnier_mean(ag::sub(eps_pred, eps_true), static_cast<T>(gamma));
}

template <typename T>
double charbonnier_loss(const Tensor<T>& eps_pred, const Tensor<T>& eps_true, double gamma) {
  return static_cast<double>(
      charbonnier_loss(ag::constant(eps_pred), ag::constant(eps_true), gamma).item());
}

template <typename T>
ag::Var<T> mse_loss(const ag::Var<T>& eps_pred, const ag::Var<T>& eps_true) {
  require_same_shape(eps_pred.value(), eps_true.value(), "mse_loss");
  return ag::square_mean(ag::sub(eps_pred, eps_true));
}

template <typename T>
ag::Var<T> reconstruction_loss(const ag::Var<T>& eps_pred, const ag::Var<T>& eps_true,
                               Reconstruction kind, double gamma) {
  return kind == Reconstruction::mse ? mse_loss(eps_pred, eps_true)
                                     : charbonnier_loss(eps_pred, eps_true, gamma);
}

// Sum of pairwise Euclidean distances between raw shared blocks over the same
// sum for independent blocks, per batch item, averaged over the batch.
template <typename T>
ag::Var<T> disentanglement_loss(const Representations<T>& r, double eps_div) {
  const auto& ref = r.s_x.value();
  for (const auto* b : {&r.s_y, &r.s_v, &r.i_x, &r.i_y, &r.i_v})
    require_same_shape(b->value(), ref, "disentanglement_loss");
  using ag::add;
  using ag::l2_norm_per_item;
  using ag::sub;
  ag::Var<T> shared = add(add(l2_norm_per_item(sub(r.s_x, r.s_y)), l2_norm_per_item(sub(r.s_x, r.s_v))),
                          l2_norm_per_item(sub(r.s_y, r.s_v)));
  ag::Var<T> indep = add(add(l2_norm_per_item(sub(r.i_x, r.i_y)), l2_norm_per_item(sub(r.i_x, r.i_v))),
                         l2_norm_per_item(sub(r.i_y, r.i_v)));
  return ag::mean(ag::div(shared, indep, static_cast<T>(eps_div)));
}

// KL(N(mean1, e^logvar1) || N(mean2, e^logvar2))
inline double gaussian_kl(double mean1, double logvar1, double mean2, double logvar2) {
  return 0.5 * (-1.0 + logvar2 - logvar1 + std::exp(logvar1 - logvar2) +
                (mean1 - mean2) * (mean1 - mean2) * std::exp(-logvar2));
}

namespace detail {

inline double std_normal_pdf(double z) { return std::exp(-0.5 * z * z) / std::sqrt(2.0 * M_PI); }
inline double std_normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }
inline double std_normal_sf(double z) { return 0.5 * std::erfc(z / std::sqrt(2.0)); }

// log-probability of x under N(mean, e^logvar) integrated over the 8-bit bin
// containing x on [-1, 1] (edge bins extend to ±∞), and its derivative with
// respect to logvar.
inline std::pair<double, double> discretized_log_likelihood(double x, double mean, double logvar) {
  constexpr double half_bin = 1.0 / 255.0;
  constexpr double floor_p = 1e-12;
  const double inv_std = std::exp(-0.5 * logvar);
  const double zp = inv_std * (x - mean + half_bin);
  const double zm = inv_std * (x - mean - half_bin);
  // dΦ(z)/dlogvar = φ(z) · (−z/2)
  const double dp = std_normal_pdf(zp) * (-0.5 * zp);
  const double dm = std_normal_pdf(zm) * (-0.5 * zm);
  double p, dprob;
  if (x < -0.999) {
    p = std_normal_cdf(zp);
    dprob = dp;
  } else if (x > 0.999) {
    p = std_normal_sf(zm);
    dprob = -dm;
  } else {
    p = zm > 0 ? std_normal_sf(zm) - std_normal_sf(zp) : std_normal_cdf(zp) - std_normal_cdf(zm);
    dprob = dp - dm;
  }
  if (p < floor_p) return {std::log(floor_p), 0.0};
  return {std::log(p), dprob / p};
}

}  // namespace detail

inline double discretized_gaussian_log_likelihood(double x, double mean, double logvar) {
  return detail::discretized_log_likelihood(x, mean, logvar).first;
}

// Variational term for the learned variances: per element KL between the
// forward posterior q(x_{t−1} | x_t, x_0) and the model Gaussian, or the
// discretized NLL of x_0 at t = 1; averaged over all elements. The model mean
// is held fixed so only the variance head receives gradient.
template <typename T>
ag::Var<T> vlb_variance_loss(const Tensor<T>& x0, const Tensor<T>& x_t, const std::vector<int>& steps,
                             const ModelOutput<T>& output, const NoiseSchedule& schedule) {
  if (!output.v_pred) throw InvalidArgument("vlb_variance_loss requires learn_variance");
  const ag::Var<T>& v = *output.v_pred;
  require_same_shape(x0, x_t, "vlb_variance_loss");
  require_same_shape(v.value(), x_t, "vlb_variance_loss");
  require_same_shape(output.eps_pred.value(), x_t, "vlb_variance_loss");
  const std::size_t n = x_t.dim(0), per = x_t.size() / n;
  if (steps.size() != n) throw ShapeMismatch("vlb_variance_loss: one step per batch item");

  Tensor<T> loss_sum({1});
  std::vector<double> dloss_dv(x_t.size());
  double total = 0.0;
  for (std::size_t b = 0; b < n; ++b) {
    const int t = steps[b];
    schedule.check_step(t);
    const double log_beta = std::log(schedule.beta(t));
    const double log_post = std::log(schedule.posterior_variance_clipped(t));
    const double c0 = schedule.posterior_coef_x0(t), ct = schedule.posterior_coef_xt(t);
    const double inv_sqrt_alpha = 1.0 / std::sqrt(schedule.alpha(t));
    const double eps_coef = schedule.beta(t) / std::sqrt(1.0 - schedule.alpha_bar(t));
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
      const double vi = static_cast<double>(v.value()[i]);
      const double logvar_p = vi * log_beta + (1.0 - vi) * log_post;
      const double mean_p =
          inv_sqrt_alpha * (static_cast<double>(x_t[i]) - eps_coef * static_cast<double>(output.eps_pred.value()[i]));
      double term, dterm;
      if (t == 1) {
        auto [ll, dll] = detail::discretized_log_likelihood(static_cast<double>(x0[i]), mean_p, logvar_p);
        term = -ll;
        dterm = -dll;
      } else {
        const double mean_q = c0 * static_cast<double>(x0[i]) + ct * static_cast<double>(x_t[i]);
        term = gaussian_kl(mean_q, log_post, mean_p, logvar_p);
        const double dm = mean_q - mean_p;
        dterm = 0.5 * (1.0 - std::exp(log_post - logvar_p) - dm * dm * std::exp(-logvar_p));
      }
      total += term;
      dloss_dv[i] = dterm * (log_beta - log_post);
    }
  }
  const double inv_count = 1.0 / static_cast<double>(x_t.size());
  loss_sum[0] = static_cast<T>(total * inv_count);
  return ag::detail::make_result<T>(
      std::move(loss_sum), {v}, [dloss_dv = std::move(dloss_dv), inv_count](ag::Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        const double up = static_cast<double>(self.grad[0]) * inv_count;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += static_cast<T>(up * dloss_dv[i]);
      });
}

// λ1·L_disent + λ2·L_recon (+ w·L_vlb)
template <typename T>
ag::Var<T> total_loss(const ag::Var<T>& disent, const ag::Var<T>& recon,
                      const std::optional<ag::Var<T>>& vlb, const LossWeights& w) {
  ag::Var<T> out = ag::add(ag::scale(disent, static_cast<T>(w.lambda1)),
                           ag::scale(recon, static_cast<T>(w.lambda2)));
  if (vlb) out = ag::add(out, ag::scale(*vlb, static_cast<T>(w.vlb_weight)));
  return out;
}

template <typename T>
ag::Var<T> total_loss(const Representations<T>& reps, const ag::Var<T>& eps_pred,
                      const ag::Var<T>& eps_true, const LossWeights& w,
                      const std::optional<ag::Var<T>>& vlb = std::nullopt) {
  return total_loss(disentanglement_loss(reps, w.eps_div), charbonnier_loss(eps_pred, eps_true, w.gamma),
                    vlb, w);
}

}  // namespace discdiff
