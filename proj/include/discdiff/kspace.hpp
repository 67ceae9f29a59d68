#pragma once

#include <complex>
#include <cstddef>
#include <memory>
#include <string>

#include <fftw3.h>

#include "discdiff/errors.hpp"
#include "discdiff/tensor.hpp"

namespace discdiff {

// Half-width of the retained band along an axis of length n at factor s.
// Frequency k (signed, |k| <= n/2) is kept iff both k and −k fall inside the
// centred n/s block of the shifted spectrum, i.e. the block intersected with
// its mirror, so the real-part reconstruction is an orthogonal projection.
inline bool kspace_keeps(long k, std::size_t n, int scale) {
  const long block = static_cast<long>(n) / scale;
  // Centred block in the shifted spectrum covers signed frequencies
  // [−block/2, block − block/2 − 1] (even blocks lose the +block/2 edge).
  const long lo = -(block / 2), hi = block - block / 2 - 1;
  return k >= lo && k <= hi && -k >= lo && -k <= hi;
}

inline std::string kspace_mask_descriptor() {
  return "centred-block-symmetric: keep signed frequency k iff k and -k both lie in "
         "[-(n/s)/2, n/s - (n/s)/2 - 1]; real part of inverse DFT";
}

// Simulated low-resolution acquisition: 2-D DFT, zero everything outside the
// central (H/scale)x(W/scale) band, inverse DFT, real part. Output keeps the
// input grid size.
template <typename T>
Tensor<T> kspace_truncate(const Tensor<T>& hr, int scale) {
  if (hr.rank() != 2) throw ShapeMismatch("kspace_truncate expects a 2-D grid");
  const std::size_t h = hr.dim(0), w = hr.dim(1);
  if (scale < 1 || h % static_cast<std::size_t>(scale) || w % static_cast<std::size_t>(scale))
    throw InvalidArgument("grid " + shape_str(hr.shape()) + " not divisible by scale " +
                          std::to_string(scale));
  if (scale == 1) return hr;
  const std::size_t n = h * w;
  using Buffer = std::unique_ptr<fftw_complex, decltype(&fftw_free)>;
  Buffer buf(static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * n)), &fftw_free);
  for (std::size_t i = 0; i < n; ++i) {
    buf.get()[i][0] = static_cast<double>(hr[i]);
    buf.get()[i][1] = 0.0;
  }
  fftw_plan fwd = fftw_plan_dft_2d(static_cast<int>(h), static_cast<int>(w), buf.get(), buf.get(),
                                   FFTW_FORWARD, FFTW_ESTIMATE);
  fftw_execute(fwd);
  fftw_destroy_plan(fwd);
  for (std::size_t r = 0; r < h; ++r) {
    const long kr = r <= h / 2 ? static_cast<long>(r) : static_cast<long>(r) - static_cast<long>(h);
    const bool row_keep = kspace_keeps(kr, h, scale);
    for (std::size_t c = 0; c < w; ++c) {
      const long kc = c <= w / 2 ? static_cast<long>(c) : static_cast<long>(c) - static_cast<long>(w);
      if (!(row_keep && kspace_keeps(kc, w, scale))) {
        buf.get()[r * w + c][0] = 0.0;
        buf.get()[r * w + c][1] = 0.0;
      }
    }
  }
  fftw_plan inv = fftw_plan_dft_2d(static_cast<int>(h), static_cast<int>(w), buf.get(), buf.get(),
                                   FFTW_BACKWARD, FFTW_ESTIMATE);
  fftw_execute(inv);
  fftw_destroy_plan(inv);
  Tensor<T> out(hr.shape());
  const double norm = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<T>(buf.get()[i][0] * norm);
  return out;
}

}  // namespace discdiff
