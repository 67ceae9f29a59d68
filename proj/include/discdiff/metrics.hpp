#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <utility>
#include <vector>

#include "discdiff/errors.hpp"
#include "discdiff/tensor.hpp"

namespace discdiff {

// 10·log10(range² / MSE); +inf for identical inputs.
template <typename T>
double psnr(const Tensor<T>& restored, const Tensor<T>& reference, double data_range) {
  require_same_shape(restored, reference, "psnr");
  if (!(data_range > 0.0)) throw InvalidArgument("psnr data_range must be > 0");
  double se = 0.0;
  for (std::size_t i = 0; i < restored.size(); ++i) {
    const double d = static_cast<double>(restored[i]) - static_cast<double>(reference[i]);
    se += d * d;
  }
  const double mse = se / static_cast<double>(restored.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(data_range * data_range / mse);
}

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
};

// Mean SSIM over all fully-contained Gaussian windows.
template <typename T>
double ssim(const Tensor<T>& restored, const Tensor<T>& reference, double data_range,
            const SsimOptions& opt = {}) {
  require_same_shape(restored, reference, "ssim");
  if (restored.rank() != 2) throw ShapeMismatch("ssim expects 2-D grids");
  if (!(data_range > 0.0)) throw InvalidArgument("ssim data_range must be > 0");
  const std::size_t h = restored.dim(0), w = restored.dim(1), k = static_cast<std::size_t>(opt.window);
  if (h < k || w < k) throw InvalidArgument("image smaller than the SSIM window");

  std::vector<double> g(k);
  double gs = 0;
  for (std::size_t i = 0; i < k; ++i) {
    const double d = static_cast<double>(i) - static_cast<double>(k - 1) / 2.0;
    gs += g[i] = std::exp(-d * d / (2.0 * opt.sigma * opt.sigma));
  }
  for (auto& v : g) v /= gs;

  // Separable valid-mode filtering of the five moment images.
  const std::size_t ho = h - k + 1, wo = w - k + 1;
  auto filter = [&](auto&& value) {
    std::vector<double> rows(h * wo), out(ho * wo);
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < wo; ++j) {
        double s = 0;
        for (std::size_t t = 0; t < k; ++t) s += g[t] * value(i * w + j + t);
        rows[i * wo + j] = s;
      }
    for (std::size_t i = 0; i < ho; ++i)
      for (std::size_t j = 0; j < wo; ++j) {
        double s = 0;
        for (std::size_t t = 0; t < k; ++t) s += g[t] * rows[(i + t) * wo + j];
        out[i * wo + j] = s;
      }
    return out;
  };
  auto x = [&](std::size_t i) { return static_cast<double>(restored[i]); };
  auto y = [&](std::size_t i) { return static_cast<double>(reference[i]); };
  const auto mx = filter(x), my = filter(y);
  const auto sxx = filter([&](std::size_t i) { return x(i) * x(i); });
  const auto syy = filter([&](std::size_t i) { return y(i) * y(i); });
  const auto sxy = filter([&](std::size_t i) { return x(i) * y(i); });
  const double c1 = std::pow(opt.k1 * data_range, 2), c2 = std::pow(opt.k2 * data_range, 2);
  double total = 0;
  for (std::size_t i = 0; i < ho * wo; ++i) {
    const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cxy = sxy[i] - mx[i] * my[i];
    total += ((2 * mx[i] * my[i] + c1) * (2 * cxy + c2)) /
             ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
  }
  return total / static_cast<double>(ho * wo);
}

template <typename T>
struct UncertaintyMaps {
  Tensor<T> mean;
  Tensor<T> std;
};

// Per-pixel mean and population standard deviation across restorations.
template <typename T>
UncertaintyMaps<T> uncertainty_maps(std::span<const Tensor<T>> samples) {
  if (samples.empty()) throw InvalidArgument("uncertainty maps need at least one sample");
  const Shape& shape = samples.front().shape();
  UncertaintyMaps<T> out{Tensor<T>(shape), Tensor<T>(shape)};
  const double k = static_cast<double>(samples.size());
  for (const auto& s : samples)
    if (s.shape() != shape) throw ShapeMismatch("uncertainty samples differ in shape");
  // Welford updates: identical samples give exactly zero spread.
  for (std::size_t i = 0; i < out.mean.size(); ++i) {
    double m = 0, m2 = 0, n = 0;
    for (const auto& s : samples) {
      const double x = static_cast<double>(s[i]);
      n += 1;
      const double d = x - m;
      m += d / n;
      m2 += d * (x - m);
    }
    out.mean[i] = static_cast<T>(m);
    out.std[i] = static_cast<T>(std::sqrt(m2 / k));
  }
  return out;
}

}  // namespace discdiff
