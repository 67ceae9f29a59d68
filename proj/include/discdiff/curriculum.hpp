#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "discdiff/errors.hpp"
#include "discdiff/rng.hpp"
#include "discdiff/tensor.hpp"

namespace discdiff {

// Shannon entropy (bits) of the intensity histogram with `n_bins` equal-width
// bins spanning the image's own [min, max].
template <typename T>
double shannon_entropy(const Tensor<T>& image, int n_bins = 256) {
  if (image.empty()) throw InvalidArgument("entropy of an empty image");
  if (n_bins < 2) throw InvalidArgument("entropy needs at least 2 bins");
  const auto [lo_it, hi_it] = std::minmax_element(image.values().begin(), image.values().end());
  const double lo = static_cast<double>(*lo_it), hi = static_cast<double>(*hi_it);
  if (!std::isfinite(lo) || !std::isfinite(hi)) throw InvalidArgument("entropy of non-finite image");
  if (lo == hi) return 0.0;
  std::vector<std::size_t> counts(static_cast<std::size_t>(n_bins), 0);
  const double width = (hi - lo) / n_bins;
  for (T v : image.values()) {
    auto bin = static_cast<long>((static_cast<double>(v) - lo) / width);
    bin = std::clamp(bin, 0L, static_cast<long>(n_bins) - 1);
    ++counts[static_cast<std::size_t>(bin)];
  }
  double h = 0.0;
  const double total = static_cast<double>(image.size());
  for (std::size_t c : counts)
    if (c) {
      const double p = static_cast<double>(c) / total;
      h -= p * std::log2(p);
    }
  return h;
}

struct EntropyEntry {
  std::string slice_id;
  double entropy_bits = 0.0;
  bool operator==(const EntropyEntry&) const = default;
};

// Slices sorted ascending by entropy, ties by slice id.
class EntropyIndex {
 public:
  explicit EntropyIndex(std::vector<EntropyEntry> entries) : entries_(std::move(entries)) {
    if (entries_.empty()) throw InvalidArgument("entropy index over an empty dataset");
    std::sort(entries_.begin(), entries_.end(), [](const EntropyEntry& a, const EntropyEntry& b) {
      return a.entropy_bits != b.entropy_bits ? a.entropy_bits < b.entropy_bits : a.slice_id < b.slice_id;
    });
  }

  const std::vector<EntropyEntry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }
  double e_min() const { return entries_.front().entropy_bits; }
  double e_max() const { return entries_.back().entropy_bits; }

  // Position of the entry whose entropy is nearest to `target`; on equal
  // distance the lower slice id wins.
  std::size_t nearest(double target) const {
    auto it = std::lower_bound(entries_.begin(), entries_.end(), target,
                               [](const EntropyEntry& e, double v) { return e.entropy_bits < v; });
    if (it == entries_.end()) {
      std::size_t first = entries_.size() - 1;
      while (first > 0 && entries_[first - 1].entropy_bits == entries_.back().entropy_bits) --first;
      return first;
    }
    const auto best = static_cast<std::size_t>(it - entries_.begin());
    // Candidates: the run of equal entropies at `best` and the run just below.
    auto better = [&](std::size_t cand, std::size_t cur) {
      const double dc = std::abs(entries_[cand].entropy_bits - target);
      const double du = std::abs(entries_[cur].entropy_bits - target);
      return dc < du || (dc == du && entries_[cand].slice_id < entries_[cur].slice_id);
    };
    std::size_t pick = best;
    if (best > 0) {
      const double below = entries_[best - 1].entropy_bits;
      std::size_t first_below = best - 1;
      while (first_below > 0 && entries_[first_below - 1].entropy_bits == below) --first_below;
      if (better(first_below, pick)) pick = first_below;
    }
    return pick;
  }

 private:
  std::vector<EntropyEntry> entries_;
};

struct CurriculumConfig {
  long M = 20000;      // curriculum horizon (iterations)
  int N = 8;           // batch size
  double sigma = 0.0;  // <= 0 selects (e_max − e_min) / 6
  std::uint64_t seed = 0;

  double resolved_sigma(const EntropyIndex& index) const {
    if (sigma > 0.0) return sigma;
    const double s = (index.e_max() - index.e_min()) / 6.0;
    return s > 0.0 ? s : 1e-12;
  }
};

// μ = e_min + (e_max − e_min) · min(iteration / M, 1); e_max when M = 0.
inline double curriculum_mu(long iteration, long M, double e_min, double e_max) {
  if (iteration < 0) throw InvalidArgument("iteration must be >= 0");
  if (M <= 0) return e_max;
  const double frac = std::min(1.0, static_cast<double>(iteration) / static_cast<double>(M));
  return e_min + (e_max - e_min) * frac;
}

// Batch of slice ids for one training iteration. Before M, targets are drawn
// from N(μ, σ²), clipped to [e_min, e_max] and matched to the nearest-entropy
// slice; afterwards ids are uniform. Both with replacement, and a pure
// function of (seed, iteration).
inline std::vector<std::string> sample_batch_indices(const EntropyIndex& index, long iteration,
                                                     const CurriculumConfig& config) {
  if (config.N < 1) throw InvalidArgument("curriculum batch size must be >= 1");
  Rng rng(mix_seed(config.seed, static_cast<std::uint64_t>(iteration)));
  std::vector<std::string> out;
  out.reserve(static_cast<std::size_t>(config.N));
  if (iteration < config.M) {
    const double mu = curriculum_mu(iteration, config.M, index.e_min(), index.e_max());
    const double sigma = config.resolved_sigma(index);
    for (int i = 0; i < config.N; ++i) {
      const double target = std::clamp(mu + sigma * rng.normal(), index.e_min(), index.e_max());
      out.push_back(index.entries()[index.nearest(target)].slice_id);
    }
  } else {
    for (int i = 0; i < config.N; ++i) {
      const auto k = rng.uniform_int(0, static_cast<long>(index.size()) - 1);
      out.push_back(index.entries()[static_cast<std::size_t>(k)].slice_id);
    }
  }
  return out;
}

}  // namespace discdiff
