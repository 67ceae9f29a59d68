#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "discdiff/data.hpp"
#include "discdiff/metrics.hpp"
#include "discdiff/sampling.hpp"

namespace discdiff {

// ---------------------------------------------------------------------------
// 8-bit portable graymap dumps

// Maps [lo, hi] linearly onto 0..255 (values outside are clamped).
inline void write_pgm(const fs::path& path, const Tensor<float>& grid, double lo, double hi) {
  if (grid.rank() != 2) throw ShapeMismatch("write_pgm expects a 2-D grid");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << "P5\n" << grid.dim(1) << ' ' << grid.dim(0) << "\n255\n";
  const double span = hi > lo ? hi - lo : 1.0;
  for (float v : grid.values()) {
    const double u = std::clamp((static_cast<double>(v) - lo) / span, 0.0, 1.0);
    os.put(static_cast<char>(static_cast<unsigned char>(std::lround(u * 255.0))));
  }
  if (!os) throw IoError("failed writing " + path.string());
}

// ---------------------------------------------------------------------------
// Report

struct SliceScore {
  std::string slice_id;
  double psnr = 0, ssim = 0;
  double psnr_lr = 0, ssim_lr = 0;  // zero-filled input against the same reference
  double data_range = 0;
  std::string mean_image, error_image;
  std::optional<std::string> std_image;
  bool operator==(const SliceScore&) const = default;
};

struct EvalReport {
  std::string split = "test";
  int k = 4;
  int sampling_steps = 100;
  std::uint64_t seed = 0;
  std::vector<SliceScore> slices;
  double mean_psnr = 0, mean_ssim = 0;
  double mean_psnr_lr = 0, mean_ssim_lr = 0;

  // Dataset means as arithmetic means of the per-slice values.
  void summarize() {
    const auto avg = [&](double SliceScore::*field) {
      double s = 0;
      for (const auto& r : slices) s += r.*field;
      return slices.empty() ? 0.0 : s / static_cast<double>(slices.size());
    };
    mean_psnr = avg(&SliceScore::psnr);
    mean_ssim = avg(&SliceScore::ssim);
    mean_psnr_lr = avg(&SliceScore::psnr_lr);
    mean_ssim_lr = avg(&SliceScore::ssim_lr);
  }

  bool operator==(const EvalReport&) const = default;
};

namespace detail {

inline nlohmann::json db_to_json(double v) {
  if (std::isinf(v) && v > 0) return "inf";
  return v;
}

inline double db_from_json(const nlohmann::json& j) {
  if (j.is_string()) {
    if (j.get<std::string>() == "inf") return std::numeric_limits<double>::infinity();
    throw IoError("unexpected metric string " + j.dump());
  }
  return j.get<double>();
}

}  // namespace detail

inline nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json slices = nlohmann::json::array();
  for (const auto& s : r.slices) {
    nlohmann::json images = {{"mean", s.mean_image}, {"error", s.error_image}, {"std", nullptr}};
    if (s.std_image) images["std"] = *s.std_image;
    slices.push_back({{"slice_id", s.slice_id},
                      {"psnr", detail::db_to_json(s.psnr)},
                      {"ssim", s.ssim},
                      {"psnr_lr", detail::db_to_json(s.psnr_lr)},
                      {"ssim_lr", s.ssim_lr},
                      {"data_range", s.data_range},
                      {"images", images}});
  }
  return {{"split", r.split},
          {"k", r.k},
          {"sampling_steps", r.sampling_steps},
          {"seed", r.seed},
          {"slices", slices},
          {"mean_psnr", detail::db_to_json(r.mean_psnr)},
          {"mean_ssim", r.mean_ssim},
          {"mean_psnr_lr", detail::db_to_json(r.mean_psnr_lr)},
          {"mean_ssim_lr", r.mean_ssim_lr}};
}

inline EvalReport report_from_json(const nlohmann::json& j) {
  try {
    EvalReport r;
    r.split = j.at("split").get<std::string>();
    r.k = j.at("k").get<int>();
    r.sampling_steps = j.at("sampling_steps").get<int>();
    r.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& s : j.at("slices")) {
      SliceScore sc;
      sc.slice_id = s.at("slice_id").get<std::string>();
      sc.psnr = detail::db_from_json(s.at("psnr"));
      sc.ssim = s.at("ssim").get<double>();
      sc.psnr_lr = detail::db_from_json(s.at("psnr_lr"));
      sc.ssim_lr = s.at("ssim_lr").get<double>();
      sc.data_range = s.at("data_range").get<double>();
      const auto& im = s.at("images");
      sc.mean_image = im.at("mean").get<std::string>();
      sc.error_image = im.at("error").get<std::string>();
      if (!im.at("std").is_null()) sc.std_image = im.at("std").get<std::string>();
      r.slices.push_back(std::move(sc));
    }
    r.mean_psnr = detail::db_from_json(j.at("mean_psnr"));
    r.mean_ssim = j.at("mean_ssim").get<double>();
    r.mean_psnr_lr = detail::db_from_json(j.at("mean_psnr_lr"));
    r.mean_ssim_lr = j.at("mean_ssim_lr").get<double>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed evaluation report: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Dataset evaluation

struct EvalOptions {
  std::string split = "test";
  int k = 4;
  std::uint64_t seed = 0;
  ChainSeeding seeding = ChainSeeding::independent;
  fs::path image_dir;  // empty: no image dumps
};

// Scores one slice from its K restorations (normalized range). Writes the
// mean / error / std images when `image_dir` is set.
template <typename T>
SliceScore score_slice(const SliceSample<T>& slice, const std::vector<Tensor<T>>& samples,
                       const fs::path& image_dir) {
  std::vector<Tensor<float>> restored;
  for (const auto& s : samples) restored.push_back(denormalize(s.template cast<float>(), slice.hr_range));
  const UncertaintyMaps<float> maps = uncertainty_maps<float>(restored);
  const double range = slice.hr_range.max - slice.hr_range.min;
  if (!(range > 0.0)) throw InvalidArgument("slice " + slice.slice_id + " has a constant reference");

  SliceScore sc;
  sc.slice_id = slice.slice_id;
  sc.data_range = range;
  sc.psnr = psnr(maps.mean, slice.hr_raw, range);
  sc.ssim = ssim(maps.mean, slice.hr_raw, range);
  sc.psnr_lr = psnr(slice.lr_raw, slice.hr_raw, range);
  sc.ssim_lr = ssim(slice.lr_raw, slice.hr_raw, range);
  if (!image_dir.empty()) {
    fs::create_directories(image_dir);
    Tensor<float> err(maps.mean.shape());
    for (std::size_t i = 0; i < err.size(); ++i) err[i] = std::abs(maps.mean[i] - slice.hr_raw[i]);
    sc.mean_image = slice.slice_id + "_mean.pgm";
    sc.error_image = slice.slice_id + "_error.pgm";
    write_pgm(image_dir / sc.mean_image, maps.mean, slice.hr_range.min, slice.hr_range.max);
    write_pgm(image_dir / sc.error_image, err, 0.0, range);
    if (samples.size() >= 2) {
      const auto peak = *std::max_element(maps.std.values().begin(), maps.std.values().end());
      sc.std_image = slice.slice_id + "_std.pgm";
      write_pgm(image_dir / *sc.std_image, maps.std, 0.0, peak > 0 ? peak : 1.0);
    }
  }
  return sc;
}

// Draws K restorations per slice of the split and scores their mean. Each
// slice's random stream depends only on (seed, position in the split).
template <typename T>
EvalReport evaluate_dataset(const Manifest& manifest, const fs::path& data_root, const Denoiser<T>& model,
                            const NoiseSchedule& schedule, const EvalOptions& opt) {
  const auto records = manifest.split(opt.split);
  if (records.empty()) throw InvalidArgument("split '" + opt.split + "' is empty");
  EvalReport report;
  report.split = opt.split;
  report.k = opt.k;
  report.sampling_steps = schedule.steps();
  report.seed = opt.seed;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const SliceSample<T> slice = load_slice<T>(*records[i], data_root);
    Rng rng(mix_seed(opt.seed, i));
    const auto samples = sample_hr<T>({slice.lr, slice.aux}, model, schedule, opt.k, rng, opt.seeding);
    report.slices.push_back(score_slice(slice, samples, opt.image_dir));
  }
  report.summarize();
  return report;
}

}  // namespace discdiff
