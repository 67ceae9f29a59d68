#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "discdiff/cli.hpp"

using namespace discdiff;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "discdiff");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

const std::vector<std::string> kTinyModel = {
    "--set", "model.base_channels=8",        "--set", "model.channel_multipliers=[1,2]",
    "--set", "model.attention_resolutions=[8]", "--set", "model.head_channels=8",
    "--set", "model.in_resolution=16",       "--set", "schedule.T=20",
    "--set", "sampling_steps=4",             "--set", "checkpoint_every=0",
    "--set", "batch_size=2"};

std::vector<std::string> concat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

class CliRun : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / "discdiff_cli";
    fs::remove_all(dir_);
    const auto r = invoke({"prepare-data", "--phantoms", "10", "--resolution", "16", "--slices", "1", "--out",
                           (dir_ / "data").string()});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  static void TearDownTestSuite() { fs::remove_all(dir_); }

  static std::string manifest() { return (dir_ / "data" / "manifest.json").string(); }
  static inline fs::path dir_;
};

}  // namespace

TEST(CliUsage, ExitCodes) {
  EXPECT_EQ(invoke({}).code, cli::kExitUsage);
  EXPECT_EQ(invoke({"fly"}).code, cli::kExitUsage);
  EXPECT_EQ(invoke({"train"}).code, cli::kExitUsage);  // --out is required
  EXPECT_EQ(invoke({"prepare-data", "--scale", "3"}).code, cli::kExitUsage);
  EXPECT_EQ(invoke({"--help"}).code, cli::kExitOk);
  EXPECT_EQ(invoke({"--version"}).code, cli::kExitOk);
}

TEST(CliUsage, DiagnosticsAreJson) {
  const auto r = invoke({"train", "--out", "x", "--set", "nonsense.key=1"});
  EXPECT_EQ(r.code, cli::kExitUsage);
  const auto j = nlohmann::json::parse(r.err);
  EXPECT_EQ(j["status"], "error");
  EXPECT_EQ(j["exit_code"], cli::kExitUsage);
  EXPECT_NE(j["message"].get<std::string>().find("nonsense"), std::string::npos);
}

TEST(CliUsage, MissingManifestIsRuntimeError) {
  const auto r = invoke({"train", "--out", (fs::temp_directory_path() / "discdiff_cli_none").string(), "--manifest",
                         "/nonexistent/manifest.json"});
  EXPECT_EQ(r.code, cli::kExitRuntime);
  EXPECT_EQ(nlohmann::json::parse(r.err)["kind"], "io_error");
  fs::remove_all(fs::temp_directory_path() / "discdiff_cli_none");
}

TEST(CliUsage, AblationRowsFlipOneSwitchEach) {
  const auto rows = cli::ablation_configs(TrainConfig::desk());
  ASSERT_EQ(rows.size(), 3u);
  int flips = 0;
  for (const auto& [name, c] : rows)
    flips += c.ablations.no_disent + c.ablations.mse_instead_of_charbonnier + c.ablations.no_curriculum;
  EXPECT_EQ(flips, 3);
}

TEST_F(CliRun, PrepareDataCountsRecords) {
  const auto m = load_manifest(manifest());
  EXPECT_EQ(m.records.size(), 10u);
  EXPECT_EQ(m.split("train").size(), 7u);
}

TEST_F(CliRun, TrainSampleEvaluate) {
  const fs::path run = dir_ / "run";
  auto r = invoke(concat({"train", "--manifest", manifest(), "--out", run.string(), "--set", "iterations=3", "--set",
                          "M=2", "--set", "ablations.no_curriculum=true"},
                         kTinyModel));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(run / "checkpoint.bin"));
  EXPECT_TRUE(fs::exists(run / "config.json"));
  const auto log = read_log(run / "train_log.ndjson");
  ASSERT_EQ(log.size(), 3u);
  for (const auto& rec : log) EXPECT_FALSE(rec.mu_entropy);

  const std::string id = load_manifest(manifest()).split("test").front()->slice_id;
  r = invoke({"sample", "--checkpoint", (run / "checkpoint.bin").string(), "--manifest", manifest(), "--input", id,
              "--k", "3", "--out", (dir_ / "samples").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  for (int i = 0; i < 3; ++i) EXPECT_TRUE(fs::exists(dir_ / "samples" / (id + "_sample" + std::to_string(i) + ".f32")));
  EXPECT_TRUE(fs::exists(dir_ / "samples" / (id + "_mean.f32")));
  EXPECT_TRUE(fs::exists(dir_ / "samples" / (id + "_std.f32")));

  r = invoke({"sample", "--checkpoint", (run / "checkpoint.bin").string(), "--manifest", manifest(), "--input",
              "no_such_slice", "--out", (dir_ / "samples").string()});
  EXPECT_EQ(r.code, cli::kExitRuntime);

  r = invoke({"evaluate", "--checkpoint", (run / "checkpoint.bin").string(), "--manifest", manifest(), "--k", "2",
              "--out", (dir_ / "eval").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto report = report_from_json(read_json_file(dir_ / "eval" / "report.json"));
  EXPECT_EQ(report.slices.size(), load_manifest(manifest()).split("test").size());
  EXPECT_EQ(report.k, 2);
  EXPECT_EQ(report.sampling_steps, 4);

  r = invoke({"evaluate", "--checkpoint", (run / "checkpoint.bin").string(), "--manifest", manifest(),
              "--sampling-steps", "99", "--out", (dir_ / "eval").string()});
  EXPECT_EQ(r.code, cli::kExitUsage);
}

TEST_F(CliRun, DataRootFromEnvironment) {
  setenv("DISCDIFF_DATA_DIR", (dir_ / "data").string().c_str(), 1);
  EXPECT_EQ(cli::manifest_path_or_default(""), dir_ / "data" / "manifest.json");
  unsetenv("DISCDIFF_DATA_DIR");
  EXPECT_EQ(cli::manifest_path_or_default(""), fs::path("data") / "manifest.json");
}
