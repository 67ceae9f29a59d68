#pragma once

#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "discdiff/config.hpp"
#include "discdiff/evaluation.hpp"
#include "discdiff/training.hpp"

namespace discdiff::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

struct UsageError : Error {
  explicit UsageError(const std::string& msg) : Error("usage", msg) {}
};

inline fs::path data_root_default() {
  const char* env = std::getenv("DISCDIFF_DATA_DIR");
  return env && *env ? fs::path(env) : fs::path("data");
}

inline void emit_diagnostic(std::ostream& err, const std::string& kind, const std::string& message, int code) {
  err << nlohmann::json{{"status", "error"}, {"kind", kind}, {"message", message}, {"exit_code", code}}.dump()
      << '\n';
}

// Phantom generation or ingestion of raw float32 volumes listed in a JSON
// file: [{"id", "t2", "t1", "shape": [H, W, S]}], paths relative to the list.
inline std::vector<VolumeInput> ingest_volumes(const fs::path& listing) {
  const nlohmann::json j = read_json_file(listing);
  if (!j.is_array()) throw ConfigError("volume listing must be a JSON array");
  std::vector<VolumeInput> out;
  const fs::path dir = listing.parent_path();
  for (const auto& e : j) {
    try {
      const auto shape = e.at("shape").get<Shape>();
      if (shape.size() != 3) throw ConfigError("volume shape must be [H, W, S]");
      out.push_back({e.at("id").get<std::string>(), read_grid(dir / e.at("t2").get<std::string>(), shape),
                     read_grid(dir / e.at("t1").get<std::string>(), shape)});
    } catch (const nlohmann::json::exception& ex) {
      throw ConfigError(std::string("bad volume listing entry: ") + ex.what());
    }
  }
  return out;
}

struct SamplingModel {
  TrainConfig config;
  std::unique_ptr<DisentangledUNet<float>> model;
  NoiseSchedule schedule;
};

inline SamplingModel open_sampling_model(const fs::path& checkpoint, std::optional<int> steps) {
  TrainConfig cfg;
  auto model = load_sampling_model<float>(checkpoint, &cfg);
  const int n = steps.value_or(cfg.sampling_steps);
  if (n < 1 || n > cfg.schedule.T) throw UsageError("--sampling-steps must lie in [1, " + std::to_string(cfg.schedule.T) + "]");
  NoiseSchedule sched = respace_schedule(cfg.make_schedule(), n);
  return {std::move(cfg), std::move(model), std::move(sched)};
}

inline fs::path manifest_path_or_default(const std::string& flag) {
  return flag.empty() ? data_root_default() / "manifest.json" : fs::path(flag);
}

// Ablation rows: each flips exactly one switch of the base configuration.
inline std::vector<std::pair<std::string, TrainConfig>> ablation_configs(const TrainConfig& base) {
  std::vector<std::pair<std::string, TrainConfig>> rows;
  TrainConfig a = base;
  a.ablations = {};
  a.ablations.no_disent = true;
  rows.emplace_back("no_disent", a);
  a.ablations = {};
  a.ablations.mse_instead_of_charbonnier = true;
  rows.emplace_back("mse_instead_of_charbonnier", a);
  a.ablations = {};
  a.ablations.no_curriculum = true;
  rows.emplace_back("no_curriculum", a);
  return rows;
}

inline std::string format_db(double v) {
  if (std::isinf(v)) return "inf";
  std::ostringstream os;
  os << std::fixed << std::setprecision(3) << v;
  return os.str();
}

// Entry point for the command-line tool. Returns the process exit status.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Multi-contrast MRI super-resolution with a disentangled conditional diffusion model", "discdiff"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(DISCDIFF_VERSION));

  // Shared flag storage.
  std::string config_path, manifest_flag, checkpoint, out_dir, input_id, resume, split = "test", ingest;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<int> sampling_steps;
  std::optional<long> stop_after;
  int k = 4, scale = 4, phantoms = 20, resolution = 32, slices = 4;
  bool frozen = false, skip_eval = false;

  auto add_config_flags = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON training configuration")->check(CLI::ExistingFile);
    sub->add_option("--set", overrides, "Dotted-path override key=value (repeatable)")->take_all();
    sub->add_option("--seed", seed, "Random seed");
  };

  CLI::App* prep = app.add_subcommand("prepare-data", "Build a manifest and grid files from phantoms or volumes");
  prep->add_option("--phantoms", phantoms, "Number of synthetic phantom volumes")->check(CLI::PositiveNumber);
  prep->add_option("--ingest", ingest, "JSON listing of raw float32 volumes")->check(CLI::ExistingFile);
  prep->add_option("--resolution", resolution, "Phantom grid size")->check(CLI::Range(16, 1024));
  prep->add_option("--slices", slices, "Slices per phantom volume")->check(CLI::PositiveNumber);
  prep->add_option("--scale", scale, "Downsampling factor")->check(CLI::IsMember({2, 4}));
  prep->add_option("--seed", seed, "Random seed");
  prep->add_option("--out", out_dir, "Output directory (default $DISCDIFF_DATA_DIR or ./data)");

  CLI::App* train = app.add_subcommand("train", "Train a model on a manifest's train split");
  add_config_flags(train);
  train->add_option("--manifest", manifest_flag, "Manifest path (default $DISCDIFF_DATA_DIR/manifest.json)");
  train->add_option("--out", out_dir, "Run directory for checkpoint and log")->required();
  train->add_option("--resume", resume, "Checkpoint to resume from")->check(CLI::ExistingFile);
  train->add_option("--stop-after", stop_after, "Stop after this many completed iterations");

  CLI::App* sample = app.add_subcommand("sample", "Restore one slice and write K samples plus uncertainty maps");
  sample->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  sample->add_option("--manifest", manifest_flag, "Manifest path");
  sample->add_option("--input", input_id, "Slice id to restore")->required();
  sample->add_option("--k", k, "Number of samples")->check(CLI::PositiveNumber);
  sample->add_option("--sampling-steps", sampling_steps, "Respaced sampling steps");
  sample->add_option("--seed", seed, "Random seed");
  sample->add_option("--out", out_dir, "Output directory")->required();
  sample->add_flag("--frozen", frozen, "Replay one random stream in every chain");

  CLI::App* eval = app.add_subcommand("evaluate", "Score a checkpoint on a split");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  eval->add_option("--manifest", manifest_flag, "Manifest path");
  eval->add_option("--split", split, "Split to score")->check(CLI::IsMember({"train", "val", "test"}));
  eval->add_option("--k", k, "Samples per slice")->check(CLI::PositiveNumber);
  eval->add_option("--sampling-steps", sampling_steps, "Respaced sampling steps");
  eval->add_option("--seed", seed, "Random seed");
  eval->add_option("--out", out_dir, "Output directory")->required();

  CLI::App* ablate = app.add_subcommand("ablate", "Train and score the three ablation configurations");
  add_config_flags(ablate);
  ablate->add_option("--manifest", manifest_flag, "Manifest path");
  ablate->add_option("--out", out_dir, "Output directory")->required();
  ablate->add_option("--k", k, "Samples per slice")->check(CLI::PositiveNumber);
  ablate->add_option("--sampling-steps", sampling_steps, "Respaced sampling steps");
  ablate->add_flag("--skip-eval", skip_eval, "Only train; leave the metric columns empty");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    emit_diagnostic(err, "usage", e.what(), kExitUsage);
    return kExitUsage;
  }

  try {
    auto train_config = [&]() {
      std::optional<fs::path> file;
      if (!config_path.empty()) file = config_path;
      TrainConfig c = resolve_train_config(file, overrides);
      if (seed) c.seed = *seed;
      return c;
    };

    if (*prep) {
      const fs::path dest = out_dir.empty() ? data_root_default() : fs::path(out_dir);
      DatasetOptions opt;
      opt.scale = scale;
      opt.seed = seed.value_or(0);
      const auto volumes = ingest.empty() ? phantom_volumes(phantoms, resolution, slices, opt.seed)
                                          : ingest_volumes(ingest);
      const Manifest m = build_dataset(volumes, opt, dest);
      out << nlohmann::json{{"status", "ok"},
                            {"manifest", (dest / "manifest.json").string()},
                            {"records", m.records.size()},
                            {"train", m.split("train").size()},
                            {"val", m.split("val").size()},
                            {"test", m.split("test").size()}}
                 .dump()
          << '\n';
    } else if (*train) {
      const TrainConfig cfg = train_config();
      const fs::path mpath = manifest_path_or_default(manifest_flag);
      const Manifest m = load_manifest(mpath);
      TrainOptions opt;
      opt.out_dir = out_dir;
      if (!resume.empty()) opt.resume = fs::path(resume);
      opt.stop_after = stop_after;
      fs::create_directories(out_dir);
      std::ofstream(fs::path(out_dir) / "config.json") << config_to_json(cfg).dump(2) << '\n';
      const TrainState<float> s = train_loop<float>(m, mpath.parent_path(), cfg, opt);
      out << nlohmann::json{{"status", "ok"},
                            {"iterations", s.iteration},
                            {"checkpoint", (fs::path(out_dir) / "checkpoint.bin").string()},
                            {"log", (fs::path(out_dir) / "train_log.ndjson").string()}}
                 .dump()
          << '\n';
    } else if (*sample) {
      const fs::path mpath = manifest_path_or_default(manifest_flag);
      const Manifest m = load_manifest(mpath);
      SamplingModel sm = open_sampling_model(checkpoint, sampling_steps);
      const SliceSample<float> slice = load_slice<float>(m.find(input_id), mpath.parent_path());
      Rng rng(mix_seed(seed.value_or(0), 0));
      const auto samples = sample_hr<float>({slice.lr, slice.aux}, make_denoiser(*sm.model), sm.schedule, k, rng,
                                            frozen ? ChainSeeding::frozen : ChainSeeding::independent);
      const fs::path dest(out_dir);
      fs::create_directories(dest);
      nlohmann::json files = nlohmann::json::array();
      for (std::size_t i = 0; i < samples.size(); ++i) {
        const Tensor<float> img = denormalize(samples[i], slice.hr_range);
        const std::string stem = input_id + "_sample" + std::to_string(i);
        write_grid(dest / (stem + ".f32"), img);
        write_pgm(dest / (stem + ".pgm"), img, slice.hr_range.min, slice.hr_range.max);
        files.push_back(stem + ".f32");
      }
      const SliceScore sc = score_slice(slice, samples, dest);
      std::vector<Tensor<float>> restored;
      for (const auto& s : samples) restored.push_back(denormalize(s, slice.hr_range));
      const auto maps = uncertainty_maps<float>(restored);
      write_grid(dest / (input_id + "_mean.f32"), maps.mean);
      write_grid(dest / (input_id + "_std.f32"), maps.std);
      out << nlohmann::json{{"status", "ok"},
                            {"slice_id", input_id},
                            {"k", k},
                            {"samples", files},
                            {"mean", sc.mean_image},
                            {"std", sc.std_image ? nlohmann::json(*sc.std_image) : nlohmann::json(nullptr)},
                            {"psnr", detail::db_to_json(sc.psnr)},
                            {"ssim", sc.ssim}}
                 .dump()
          << '\n';
    } else if (*eval) {
      const fs::path mpath = manifest_path_or_default(manifest_flag);
      const Manifest m = load_manifest(mpath);
      SamplingModel sm = open_sampling_model(checkpoint, sampling_steps);
      EvalOptions opt;
      opt.split = split;
      opt.k = k;
      opt.seed = seed.value_or(0);
      opt.image_dir = fs::path(out_dir) / "images";
      const EvalReport r = evaluate_dataset<float>(m, mpath.parent_path(), make_denoiser(*sm.model), sm.schedule, opt);
      fs::create_directories(out_dir);
      std::ofstream(fs::path(out_dir) / "report.json") << report_to_json(r).dump(2) << '\n';
      out << nlohmann::json{{"status", "ok"},
                            {"report", (fs::path(out_dir) / "report.json").string()},
                            {"mean_psnr", detail::db_to_json(r.mean_psnr)},
                            {"mean_ssim", r.mean_ssim}}
                 .dump()
          << '\n';
    } else if (*ablate) {
      const TrainConfig base = train_config();
      const fs::path mpath = manifest_path_or_default(manifest_flag);
      const Manifest m = load_manifest(mpath);
      nlohmann::json rows = nlohmann::json::array();
      std::ostringstream table;
      table << "| configuration | final loss_total | mean PSNR (dB) | mean SSIM |\n|---|---|---|---|\n";
      for (const auto& [name, cfg] : ablation_configs(base)) {
        const fs::path run_dir = fs::path(out_dir) / name;
        fs::create_directories(run_dir);
        std::ofstream(run_dir / "config.json") << config_to_json(cfg).dump(2) << '\n';
        TrainOptions topt;
        topt.out_dir = run_dir;
        double last_loss = 0;
        topt.on_record = [&](const LogRecord& r) { last_loss = r.loss_total; };
        train_loop<float>(m, mpath.parent_path(), cfg, topt);
        nlohmann::json row = {{"configuration", name},
                              {"log", (run_dir / "train_log.ndjson").string()},
                              {"final_loss_total", last_loss},
                              {"mean_psnr", nullptr},
                              {"mean_ssim", nullptr}};
        std::string psnr_cell = "-", ssim_cell = "-";
        if (!skip_eval) {
          SamplingModel sm = open_sampling_model(run_dir / "checkpoint.bin", sampling_steps);
          EvalOptions eopt;
          eopt.k = k;
          eopt.seed = cfg.seed;
          const EvalReport r = evaluate_dataset<float>(m, mpath.parent_path(), make_denoiser(*sm.model),
                                                       sm.schedule, eopt);
          std::ofstream(run_dir / "report.json") << report_to_json(r).dump(2) << '\n';
          row["mean_psnr"] = detail::db_to_json(r.mean_psnr);
          row["mean_ssim"] = r.mean_ssim;
          psnr_cell = format_db(r.mean_psnr);
          std::ostringstream s;
          s << std::fixed << std::setprecision(4) << r.mean_ssim;
          ssim_cell = s.str();
        }
        table << "| " << name << " | " << last_loss << " | " << psnr_cell << " | " << ssim_cell << " |\n";
        rows.push_back(std::move(row));
      }
      std::ofstream(fs::path(out_dir) / "ablation.json") << rows.dump(2) << '\n';
      std::ofstream(fs::path(out_dir) / "ablation.md") << table.str();
      out << table.str();
    }
    return kExitOk;
  } catch (const UsageError& e) {
    emit_diagnostic(err, e.kind(), e.what(), kExitUsage);
    return kExitUsage;
  } catch (const ConfigError& e) {
    emit_diagnostic(err, e.kind(), e.what(), kExitUsage);
    return kExitUsage;
  } catch (const Error& e) {
    emit_diagnostic(err, e.kind(), e.what(), kExitRuntime);
    return kExitRuntime;
  } catch (const std::exception& e) {
    emit_diagnostic(err, "internal", e.what(), kExitRuntime);
    return kExitRuntime;
  }
}

}  // namespace discdiff::cli
