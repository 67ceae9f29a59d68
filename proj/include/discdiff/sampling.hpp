#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "discdiff/rng.hpp"
#include "discdiff/schedule.hpp"
#include "discdiff/tensor.hpp"

namespace discdiff {

// Conditioning inputs for one slice: the zero-filled LR image y and the
// auxiliary contrast v, both {H, W} grids in [-1, 1].
template <typename T>
struct ConditionPair {
  Tensor<T> lr_image;
  Tensor<T> aux_contrast;

  void validate() const {
    if (lr_image.rank() != 2) throw ShapeMismatch("condition grids must be rank 2");
    require_same_shape(lr_image, aux_contrast, "condition pair");
    for (const auto* g : {&lr_image, &aux_contrast})
      for (T v : g->values())
        if (!(v >= T(-1) && v <= T(1)))
          throw DomainError("condition value outside [-1, 1]");
  }
};

// One network evaluation: ε prediction and, for learned variances, the
// interpolation coefficient in [0, 1]. Both {K, 1, H, W}.
template <typename T>
struct DenoiserOutput {
  Tensor<T> eps;
  std::optional<Tensor<T>> v;
};

// x_t is {K, 1, H, W}; all K chains share `cond`. `model_t` is the step index
// in the model's training schedule (the original index for respaced ones).
template <typename T>
using Denoiser =
    std::function<DenoiserOutput<T>(const Tensor<T>& x_t, const ConditionPair<T>& cond, int model_t)>;

template <typename T>
struct MeanVariance {
  Tensor<T> mean;
  Tensor<T> variance;
};

// Mean and variance of p(x_{t−1} | x_t, y, v). Without a v head the variance
// is the fixed β̃_t.
template <typename T>
MeanVariance<T> p_mean_variance(const Tensor<T>& x_t, const ConditionPair<T>& cond, int t,
                                const Denoiser<T>& model, const NoiseSchedule& schedule) {
  schedule.check_step(t);
  DenoiserOutput<T> out = model(x_t, cond, schedule.original_index(t));
  MeanVariance<T> mv;
  mv.mean = posterior_mean_from_eps(x_t, out.eps, t, schedule);
  if (out.v) {
    require_same_shape(*out.v, x_t, "variance prediction");
    mv.variance = variance_from_vpred(*out.v, t, schedule);
  } else {
    mv.variance = Tensor<T>(x_t.shape(), static_cast<T>(schedule.posterior_variance(t)));
  }
  return mv;
}

// One ancestral step. `chains` holds one random stream per leading-axis item
// of x_t; no noise is injected at t = 1.
template <typename T>
Tensor<T> p_sample_step(const Tensor<T>& x_t, const ConditionPair<T>& cond, int t,
                        const Denoiser<T>& model, const NoiseSchedule& schedule,
                        std::span<Rng> chains) {
  if (x_t.rank() != 4 || chains.size() != x_t.dim(0))
    throw ShapeMismatch("p_sample_step: need one random stream per chain of a {K,1,H,W} state");
  MeanVariance<T> mv = p_mean_variance(x_t, cond, t, model, schedule);
  if (t == 1) return std::move(mv.mean);
  const std::size_t per_chain = x_t.size() / x_t.dim(0);
  Tensor<T> out = std::move(mv.mean);
  for (std::size_t k = 0; k < chains.size(); ++k)
    for (std::size_t i = k * per_chain; i < (k + 1) * per_chain; ++i)
      out[i] += static_cast<T>(std::sqrt(static_cast<double>(mv.variance[i])) * chains[k].normal());
  return out;
}

template <typename T>
Tensor<T> p_sample_step(const Tensor<T>& x_t, const ConditionPair<T>& cond, int t,
                        const Denoiser<T>& model, const NoiseSchedule& schedule, Rng& rng) {
  return p_sample_step(x_t, cond, t, model, schedule, std::span<Rng>(&rng, 1));
}

enum class ChainSeeding {
  independent,  // each chain draws its own seed from the caller's source
  frozen,       // all chains replay one stream (zero spread by construction)
};

// Runs K reverse chains from x_T ~ N(0, I) down to t = 1 and returns K {H, W}
// grids clamped to [-1, 1].
template <typename T>
std::vector<Tensor<T>> sample_hr(const ConditionPair<T>& cond, const Denoiser<T>& model,
                                 const NoiseSchedule& schedule, int k_samples, Rng& rng,
                                 ChainSeeding seeding = ChainSeeding::independent) {
  if (k_samples < 1) throw InvalidArgument("sample count must be >= 1");
  cond.validate();
  if (seeding == ChainSeeding::frozen && k_samples > 1) {
    // Identical streams give identical chains; run one so batched kernels
    // cannot introduce per-chain rounding differences.
    auto one = sample_hr(cond, model, schedule, 1, rng, ChainSeeding::frozen);
    return std::vector<Tensor<T>>(static_cast<std::size_t>(k_samples), one.front());
  }
  const std::size_t k = static_cast<std::size_t>(k_samples);
  const std::size_t h = cond.lr_image.dim(0), w = cond.lr_image.dim(1);
  std::vector<Rng> chains;
  const std::uint64_t shared = rng.next_u64();
  for (std::size_t i = 0; i < k; ++i)
    chains.emplace_back(seeding == ChainSeeding::frozen ? shared : (i == 0 ? shared : rng.next_u64()));

  Tensor<T> x({k, 1, h, w});
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < h * w; ++j) x[i * h * w + j] = static_cast<T>(chains[i].normal());
  for (int t = schedule.steps(); t >= 1; --t)
    x = p_sample_step(x, cond, t, model, schedule, std::span<Rng>(chains));

  std::vector<Tensor<T>> out;
  for (std::size_t i = 0; i < k; ++i) {
    Tensor<T> g({h, w});
    for (std::size_t j = 0; j < h * w; ++j) g[j] = std::clamp(x[i * h * w + j], T(-1), T(1));
    out.push_back(std::move(g));
  }
  return out;
}

}  // namespace discdiff
