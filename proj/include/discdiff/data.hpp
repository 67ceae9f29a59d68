#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "discdiff/curriculum.hpp"
#include "discdiff/version.hpp"
#include "discdiff/kspace.hpp"
#include "discdiff/rng.hpp"
#include "discdiff/tensor.hpp"

namespace discdiff {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "grid files assume a little-endian host");

// ---------------------------------------------------------------------------
// Cropping and normalization

// Symmetric crop of an {H, W, S} volume; odd margins leave the extra row /
// column / slice on the high side.
template <typename T>
Tensor<T> center_crop(const Tensor<T>& volume, std::size_t out_h, std::size_t out_w, std::size_t out_s) {
  if (volume.rank() != 3) throw ShapeMismatch("center_crop expects an {H, W, S} volume");
  const std::size_t h = volume.dim(0), w = volume.dim(1), s = volume.dim(2);
  if (out_h > h || out_w > w || out_s > s)
    throw InvalidArgument("crop " + shape_str({out_h, out_w, out_s}) + " larger than volume " +
                          shape_str(volume.shape()));
  const std::size_t oh = (h - out_h) / 2, ow = (w - out_w) / 2, os = (s - out_s) / 2;
  Tensor<T> out({out_h, out_w, out_s});
  for (std::size_t i = 0; i < out_h; ++i)
    for (std::size_t j = 0; j < out_w; ++j)
      for (std::size_t k = 0; k < out_s; ++k)
        out[(i * out_w + j) * out_s + k] = volume[((i + oh) * w + (j + ow)) * s + (k + os)];
  return out;
}

// 2-D center crop (same floor rule).
template <typename T>
Tensor<T> center_crop(const Tensor<T>& grid, std::size_t out_h, std::size_t out_w) {
  return center_crop(grid.reshaped({grid.dim(0), grid.dim(1), 1}), out_h, out_w, 1).reshaped({out_h, out_w});
}

template <typename T>
Tensor<T> volume_slice(const Tensor<T>& volume, std::size_t k) {
  const std::size_t h = volume.dim(0), w = volume.dim(1), s = volume.dim(2);
  Tensor<T> out({h, w});
  for (std::size_t i = 0; i < h * w; ++i) out[i] = volume[i * s + k];
  return out;
}

struct NormRange {
  double min = 0.0;
  double max = 1.0;
  bool operator==(const NormRange&) const = default;
};

template <typename T>
NormRange range_of(const Tensor<T>& grid) {
  const auto [lo, hi] = std::minmax_element(grid.values().begin(), grid.values().end());
  return {static_cast<double>(*lo), static_cast<double>(*hi)};
}

// Affine map of [min, max] onto [-1, 1]; constant ranges map to zero.
template <typename T>
Tensor<T> normalize(const Tensor<T>& grid, const NormRange& r) {
  Tensor<T> out(grid.shape());
  if (r.max == r.min) return out;
  const double k = 2.0 / (r.max - r.min);
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<T>((static_cast<double>(grid[i]) - r.min) * k - 1.0);
  return out;
}

template <typename T>
Tensor<T> denormalize(const Tensor<T>& grid, const NormRange& r) {
  Tensor<T> out(grid.shape());
  const double k = 0.5 * (r.max - r.min);
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<T>((static_cast<double>(grid[i]) + 1.0) * k + r.min);
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic phantoms

struct PhantomVolume {
  Tensor<float> t2;  // {H, W, S}
  Tensor<float> t1;
};

namespace detail {

struct Ellipsoid {
  double cx, cy, cz, a, b, c, theta, value;
};

inline double soft_inside(const Ellipsoid& e, double x, double y, double z, double edge) {
  const double dx = x - e.cx, dy = y - e.cy, dz = z - e.cz;
  const double ct = std::cos(e.theta), st = std::sin(e.theta);
  const double u = (ct * dx + st * dy) / e.a, v = (-st * dx + ct * dy) / e.b, w = dz / e.c;
  const double r = std::sqrt(u * u + v * v + w * w);
  // signed distance approximation in units of the minor in-plane axis
  const double d = (1.0 - r) * std::min(e.a, e.b) / edge;
  return 1.0 / (1.0 + std::exp(-d));
}

struct SmoothField {
  double amp[3], fx[3], fy[3], phase[3];
  double at(double x, double y) const {
    double s = 0;
    for (int i = 0; i < 3; ++i) s += amp[i] * std::sin(M_PI * (fx[i] * x + fy[i] * y) + phase[i]);
    return s;
  }
};

inline SmoothField random_field(Rng& rng, double amplitude) {
  SmoothField f{};
  for (int i = 0; i < 3; ++i) {
    f.amp[i] = amplitude * rng.uniform(0.3, 1.0);
    f.fx[i] = rng.uniform(-1.5, 1.5);
    f.fy[i] = rng.uniform(-1.5, 1.5);
    f.phase[i] = rng.uniform(0.0, 2.0 * M_PI);
  }
  return f;
}

}  // namespace detail

// Two-contrast phantom volume: random ellipsoids define a shared tissue map;
// T2 and T1 apply different monotone intensity curves (T1 inverted) plus
// independent smooth shading. Values lie in [0, 1].
inline PhantomVolume generate_phantom_volume(Rng& rng, int resolution, int slices) {
  if (resolution < 16) throw InvalidArgument("phantom resolution must be >= 16");
  if (slices < 1) throw InvalidArgument("phantom needs at least one slice");
  const auto res = static_cast<std::size_t>(resolution), ns = static_cast<std::size_t>(slices);
  using detail::Ellipsoid;
  Ellipsoid head{rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05), 0.0, rng.uniform(0.78, 0.9),
                 rng.uniform(0.68, 0.85), 1.6, rng.uniform(-0.3, 0.3), 0.0};
  std::vector<Ellipsoid> inner;
  const int count = static_cast<int>(rng.uniform_int(2, 10));
  for (int i = 0; i < count; ++i) {
    const double rad = rng.uniform(0.0, 0.55), ang = rng.uniform(0.0, 2.0 * M_PI);
    inner.push_back({head.cx + rad * std::cos(ang) * head.a, head.cy + rad * std::sin(ang) * head.b,
                     rng.uniform(-0.6, 0.6), rng.uniform(0.08, 0.4), rng.uniform(0.08, 0.4),
                     rng.uniform(0.3, 1.0), rng.uniform(0.0, M_PI), rng.uniform(0.0, 1.0)});
  }
  const double base_tissue = rng.uniform(0.3, 0.6);
  const double gamma2 = rng.uniform(0.5, 0.8), gamma1 = rng.uniform(1.2, 1.8);
  const detail::SmoothField shade2 = detail::random_field(rng, 0.02);
  const detail::SmoothField shade1 = detail::random_field(rng, 0.02);
  const double edge = 1.0 / resolution;

  PhantomVolume vol{Tensor<float>({res, res, ns}), Tensor<float>({res, res, ns})};
  for (std::size_t k = 0; k < ns; ++k) {
    const double z = ns == 1 ? 0.0 : -0.5 + static_cast<double>(k) / static_cast<double>(ns - 1);
    for (std::size_t i = 0; i < res; ++i)
      for (std::size_t j = 0; j < res; ++j) {
        const double y = 2.0 * (static_cast<double>(i) + 0.5) / resolution - 1.0;
        const double x = 2.0 * (static_cast<double>(j) + 0.5) / resolution - 1.0;
        const double m = detail::soft_inside(head, x, y, z, edge);
        double g = base_tissue;
        for (const auto& e : inner) {
          const double w = detail::soft_inside(e, x, y, z, edge);
          g = g * (1.0 - w) + e.value * w;
        }
        const double t2 = m * (0.15 + 0.85 * std::pow(g, gamma2) + shade2.at(x, y));
        const double t1 = m * (0.2 + 0.8 * std::pow(1.0 - g, gamma1) + shade1.at(x, y));
        vol.t2[(i * res + j) * ns + k] = static_cast<float>(std::clamp(t2, 0.0, 1.0));
        vol.t1[(i * res + j) * ns + k] = static_cast<float>(std::clamp(t1, 0.0, 1.0));
      }
  }
  return vol;
}

struct PhantomPair {
  Tensor<float> hr_t2;  // {H, W}
  Tensor<float> hr_t1;
};

inline PhantomPair generate_phantom_pair(Rng& rng, int resolution) {
  PhantomVolume v = generate_phantom_volume(rng, resolution, 1);
  const auto r = static_cast<std::size_t>(resolution);
  return {v.t2.reshaped({r, r}), v.t1.reshaped({r, r})};
}

// ---------------------------------------------------------------------------
// Grid files

inline void write_grid(const fs::path& path, const Tensor<float>& grid) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char*>(grid.data()), static_cast<std::streamsize>(grid.size() * sizeof(float)));
  if (!os) throw IoError("failed writing " + path.string());
}

inline Tensor<float> read_grid(const fs::path& path, const Shape& shape) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  Tensor<float> grid(shape);
  is.read(reinterpret_cast<char*>(grid.data()), static_cast<std::streamsize>(grid.size() * sizeof(float)));
  if (is.gcount() != static_cast<std::streamsize>(grid.size() * sizeof(float)))
    throw IoError(path.string() + " is shorter than shape " + shape_str(shape));
  if (is.peek() != std::char_traits<char>::eof())
    throw IoError(path.string() + " is longer than shape " + shape_str(shape));
  return grid;
}

// ---------------------------------------------------------------------------
// Manifest

struct SlicePaths {
  std::string hr_t2, lr_t2, hr_t1;
  bool operator==(const SlicePaths&) const = default;
};

struct SliceRecord {
  std::string slice_id;
  std::string volume_id;
  SlicePaths paths;  // relative to the manifest directory
  std::vector<std::size_t> shape;
  int scale = 4;
  double entropy_bits = 0.0;
  std::string split;
  NormRange hr_t2_range;
  NormRange hr_t1_range;
  bool operator==(const SliceRecord&) const = default;
};

struct Manifest {
  int version = 1;
  std::string created_with = std::string("discdiff ") + DISCDIFF_VERSION;
  std::vector<std::size_t> crop;
  int scale = 4;
  std::string normalization =
      "per-slice min-max to [-1,1]; hr_t2 and lr_t2 share the hr_t2 range (lr clamped), hr_t1 uses its own";
  std::string kspace_mask = kspace_mask_descriptor();
  int entropy_bins = 256;
  std::string entropy_computed_on = "stored hr_t2 before normalization";
  std::vector<SliceRecord> records;

  std::vector<const SliceRecord*> split(const std::string& name) const {
    std::vector<const SliceRecord*> out;
    for (const auto& r : records)
      if (r.split == name) out.push_back(&r);
    return out;
  }
  const SliceRecord& find(const std::string& slice_id) const {
    for (const auto& r : records)
      if (r.slice_id == slice_id) return r;
    throw InvalidArgument("unknown slice id " + slice_id);
  }

  bool operator==(const Manifest&) const = default;
};

inline void to_json(nlohmann::json& j, const NormRange& r) { j = nlohmann::json::array({r.min, r.max}); }
inline void from_json(const nlohmann::json& j, NormRange& r) {
  r.min = j.at(0).get<double>();
  r.max = j.at(1).get<double>();
}

inline void to_json(nlohmann::json& j, const SliceRecord& r) {
  j = {{"slice_id", r.slice_id},
       {"volume_id", r.volume_id},
       {"paths", {{"hr_t2", r.paths.hr_t2}, {"lr_t2", r.paths.lr_t2}, {"hr_t1", r.paths.hr_t1}}},
       {"shape", r.shape},
       {"scale", r.scale},
       {"entropy_bits", r.entropy_bits},
       {"split", r.split},
       {"norm", {{"hr_t2", r.hr_t2_range}, {"hr_t1", r.hr_t1_range}}}};
}

inline void from_json(const nlohmann::json& j, SliceRecord& r) {
  r.slice_id = j.at("slice_id").get<std::string>();
  r.volume_id = j.at("volume_id").get<std::string>();
  const auto& p = j.at("paths");
  r.paths = {p.at("hr_t2").get<std::string>(), p.at("lr_t2").get<std::string>(), p.at("hr_t1").get<std::string>()};
  r.shape = j.at("shape").get<std::vector<std::size_t>>();
  r.scale = j.at("scale").get<int>();
  r.entropy_bits = j.at("entropy_bits").get<double>();
  r.split = j.at("split").get<std::string>();
  r.hr_t2_range = j.at("norm").at("hr_t2").get<NormRange>();
  r.hr_t1_range = j.at("norm").at("hr_t1").get<NormRange>();
}

inline nlohmann::json manifest_to_json(const Manifest& m) {
  return {{"version", m.version},
          {"created_with", m.created_with},
          {"crop", m.crop},
          {"scale", m.scale},
          {"normalization", m.normalization},
          {"kspace_mask", m.kspace_mask},
          {"entropy", {{"bins", m.entropy_bins}, {"computed_on", m.entropy_computed_on}}},
          {"records", m.records}};
}

inline Manifest manifest_from_json(const nlohmann::json& j) {
  Manifest m;
  m.version = j.at("version").get<int>();
  if (m.version != 1) throw IoError("unsupported manifest version " + std::to_string(m.version));
  m.created_with = j.at("created_with").get<std::string>();
  m.crop = j.at("crop").get<std::vector<std::size_t>>();
  m.scale = j.at("scale").get<int>();
  m.normalization = j.at("normalization").get<std::string>();
  m.kspace_mask = j.at("kspace_mask").get<std::string>();
  m.entropy_bins = j.at("entropy").at("bins").get<int>();
  m.entropy_computed_on = j.at("entropy").at("computed_on").get<std::string>();
  m.records = j.at("records").get<std::vector<SliceRecord>>();
  return m;
}

inline void save_manifest(const Manifest& m, const fs::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write manifest " + path.string());
  os << manifest_to_json(m).dump(2) << '\n';
}

inline Manifest load_manifest(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    is >> j;
    return manifest_from_json(j);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed manifest " + path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Dataset construction

struct VolumeInput {
  std::string id;
  Tensor<float> t2;  // {H, W, S}
  Tensor<float> t1;
};

struct SplitRatios {
  int train = 7, val = 1, test = 2;
};

struct DatasetOptions {
  int scale = 4;
  SplitRatios ratios;
  std::vector<std::size_t> crop;  // {H, W, S}; empty keeps the volume size
  std::uint64_t seed = 0;
  int entropy_bins = 256;
};

// Per-split volume counts: train and val take floor shares, test the rest.
inline std::array<std::size_t, 3> split_counts(std::size_t volumes, const SplitRatios& r) {
  if (r.train < 0 || r.val < 0 || r.test < 0 || r.train + r.val + r.test <= 0)
    throw InvalidArgument("split ratios must be nonnegative with a positive sum");
  const auto total = static_cast<std::size_t>(r.train + r.val + r.test);
  const std::size_t tr = volumes * static_cast<std::size_t>(r.train) / total;
  const std::size_t va = volumes * static_cast<std::size_t>(r.val) / total;
  return {tr, va, volumes - tr - va};
}

// Crops, degrades, scores and stores every slice; splits are assigned per
// volume. Writes the grid files and manifest.json under `out_dir`.
inline Manifest build_dataset(const std::vector<VolumeInput>& volumes, const DatasetOptions& opt,
                              const fs::path& out_dir) {
  if (volumes.empty()) throw InvalidArgument("no volumes to build a dataset from");
  if (opt.scale != 2 && opt.scale != 4) throw InvalidArgument("scale must be 2 or 4");
  fs::create_directories(out_dir / "grids");
  Manifest m;
  m.scale = opt.scale;
  m.entropy_bins = opt.entropy_bins;

  std::vector<std::size_t> order(volumes.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(mix_seed(opt.seed, 0x5b11));
  std::shuffle(order.begin(), order.end(), std::mt19937_64(rng.next_u64()));
  const auto counts = split_counts(volumes.size(), opt.ratios);
  std::vector<std::string> split_of(volumes.size());
  for (std::size_t i = 0; i < order.size(); ++i)
    split_of[order[i]] = i < counts[0] ? "train" : (i < counts[0] + counts[1] ? "val" : "test");

  for (std::size_t vi = 0; vi < volumes.size(); ++vi) {
    const auto& vol = volumes[vi];
    require_same_shape(vol.t2, vol.t1, "volume contrasts");
    Tensor<float> t2 = vol.t2, t1 = vol.t1;
    if (!opt.crop.empty()) {
      t2 = center_crop(t2, opt.crop[0], opt.crop[1], opt.crop[2]);
      t1 = center_crop(t1, opt.crop[0], opt.crop[1], opt.crop[2]);
    }
    if (m.crop.empty()) m.crop = {t2.dim(0), t2.dim(1), t2.dim(2)};
    for (std::size_t k = 0; k < t2.dim(2); ++k) {
      SliceRecord r;
      r.volume_id = vol.id;
      r.slice_id = vol.id + "_s" + (k < 10 ? "0" : "") + std::to_string(k);
      Tensor<float> hr = volume_slice(t2, k), aux = volume_slice(t1, k);
      Tensor<float> lr = kspace_truncate(hr, opt.scale);
      r.shape = {hr.dim(0), hr.dim(1)};
      r.scale = opt.scale;
      r.entropy_bits = shannon_entropy(hr, opt.entropy_bins);
      r.split = split_of[vi];
      r.hr_t2_range = range_of(hr);
      r.hr_t1_range = range_of(aux);
      r.paths = {"grids/" + r.slice_id + "_hr_t2.f32", "grids/" + r.slice_id + "_lr_t2.f32",
                 "grids/" + r.slice_id + "_hr_t1.f32"};
      write_grid(out_dir / r.paths.hr_t2, hr);
      write_grid(out_dir / r.paths.lr_t2, lr);
      write_grid(out_dir / r.paths.hr_t1, aux);
      m.records.push_back(std::move(r));
    }
  }
  save_manifest(m, out_dir / "manifest.json");
  return m;
}

inline std::vector<VolumeInput> phantom_volumes(int count, int resolution, int slices, std::uint64_t seed) {
  std::vector<VolumeInput> out;
  for (int i = 0; i < count; ++i) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(i) + 1));
    PhantomVolume v = generate_phantom_volume(rng, resolution, slices);
    std::string id = "vol" + std::string(i < 10 ? "00" : (i < 100 ? "0" : "")) + std::to_string(i);
    out.push_back({std::move(id), std::move(v.t2), std::move(v.t1)});
  }
  return out;
}

// A slice loaded for training / evaluation.
template <typename T>
struct SliceSample {
  std::string slice_id;
  Tensor<T> hr;   // normalized x0
  Tensor<T> lr;   // normalized with the hr range, clamped to [-1, 1]
  Tensor<T> aux;  // normalized with its own range
  Tensor<float> hr_raw, lr_raw;
  NormRange hr_range;
  double entropy_bits = 0.0;
};

template <typename T>
SliceSample<T> load_slice(const SliceRecord& r, const fs::path& root) {
  SliceSample<T> s;
  s.slice_id = r.slice_id;
  s.hr_raw = read_grid(root / r.paths.hr_t2, r.shape);
  s.lr_raw = read_grid(root / r.paths.lr_t2, r.shape);
  Tensor<float> aux = read_grid(root / r.paths.hr_t1, r.shape);
  s.hr_range = r.hr_t2_range;
  s.hr = normalize(s.hr_raw, r.hr_t2_range).template cast<T>();
  s.lr = normalize(s.lr_raw, r.hr_t2_range).template cast<T>();
  for (auto& v : s.lr.values()) v = std::clamp(v, T(-1), T(1));
  s.aux = normalize(aux, r.hr_t1_range).template cast<T>();
  s.entropy_bits = r.entropy_bits;
  return s;
}

template <typename T>
std::vector<SliceSample<T>> load_split(const Manifest& m, const fs::path& root, const std::string& split) {
  std::vector<SliceSample<T>> out;
  for (const SliceRecord* r : m.split(split)) out.push_back(load_slice<T>(*r, root));
  return out;
}

}  // namespace discdiff
