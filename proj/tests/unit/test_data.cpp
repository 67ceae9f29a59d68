#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <filesystem>
#include <map>
#include <set>

#include "discdiff/curriculum.hpp"
#include "discdiff/data.hpp"
#include "discdiff/kspace.hpp"
#include "support/oracles.hpp"

using namespace discdiff;
namespace fs = std::filesystem;

namespace {

// Reference truncation: naive DFT, keep |k| <= (n/s − 1)/2 on both axes,
// naive inverse, real part.
std::vector<double> reference_truncate(const std::vector<double>& x, std::size_t h, std::size_t w, int s) {
  auto spec = oracle::naive_dft2(x, h, w);
  auto keep = [s](long k, std::size_t n) { return std::abs(k) <= (static_cast<long>(n) / s - 1) / 2; };
  for (std::size_t u = 0; u < h; ++u)
    for (std::size_t v = 0; v < w; ++v) {
      const long ku = u <= h / 2 ? static_cast<long>(u) : static_cast<long>(u) - static_cast<long>(h);
      const long kv = v <= w / 2 ? static_cast<long>(v) : static_cast<long>(v) - static_cast<long>(w);
      if (!(keep(ku, h) && keep(kv, w))) spec[u * w + v] = 0;
    }
  std::vector<double> out(h * w);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      std::complex<double> acc = 0;
      for (std::size_t u = 0; u < h; ++u)
        for (std::size_t v = 0; v < w; ++v) {
          const double ph = 2.0 * M_PI * (static_cast<double>(u * r) / h + static_cast<double>(v * c) / w);
          acc += spec[u * w + v] * std::complex<double>(std::cos(ph), std::sin(ph));
        }
      out[r * w + c] = acc.real() / static_cast<double>(h * w);
    }
  return out;
}

Tensor<double> random_grid(std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<double> t({h, w});
  for (auto& v : t.values()) v = rng.uniform();
  return t;
}

double correlation(const std::vector<double>& a, const std::vector<double>& b) {
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= a.size();
  mb /= b.size();
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

std::vector<double> gradient_magnitude(const Tensor<float>& g) {
  const std::size_t h = g.dim(0), w = g.dim(1);
  std::vector<double> out;
  for (std::size_t i = 0; i + 1 < h; ++i)
    for (std::size_t j = 0; j + 1 < w; ++j) {
      const double dx = g[i * w + j + 1] - g[i * w + j], dy = g[(i + 1) * w + j] - g[i * w + j];
      out.push_back(std::hypot(dx, dy));
    }
  return out;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) : path(fs::temp_directory_path() / ("discdiff_" + tag)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST(KspaceTruncation, ConstantImageUnchanged) {
  const Tensor<double> c({8, 8}, 0.37);
  const auto out = kspace_truncate(c, 4);
  for (double v : out.values()) EXPECT_NEAR(v, 0.37, 1e-12);
}

TEST(KspaceTruncation, InBandCosineKeptOutOfBandRemoved) {
  Tensor<double> low({16, 16}), high({16, 16});
  for (std::size_t r = 0; r < 16; ++r)
    for (std::size_t c = 0; c < 16; ++c) {
      low[r * 16 + c] = std::cos(2 * M_PI * 2 * c / 16.0);
      high[r * 16 + c] = std::cos(2 * M_PI * 5 * r / 16.0);
    }
  const auto lo = kspace_truncate(low, 2), hi = kspace_truncate(high, 2);
  for (std::size_t i = 0; i < low.size(); ++i) {
    EXPECT_NEAR(lo[i], low[i], 1e-12);
    EXPECT_NEAR(hi[i], 0.0, 1e-12);
  }
}

TEST(KspaceTruncation, CheckerboardVanishes) {
  Tensor<double> cb({8, 8});
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 0; c < 8; ++c) cb[r * 8 + c] = (r + c) % 2 ? 1.0 : -1.0;
  for (int s : {2, 4})
    for (double v : kspace_truncate(cb, s).storage()) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(KspaceTruncation, MatchesNaiveDftReference) {
  for (auto [h, w, s] : {std::tuple{8u, 8u, 2}, {16u, 8u, 4}, {12u, 12u, 4}, {12u, 6u, 2}}) {
    const auto x = random_grid(h, w, h * 100 + w + s);
    const auto ref = reference_truncate({x.values().begin(), x.values().end()}, h, w, s);
    const auto got = kspace_truncate(x, s);
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(got[i], ref[i], 1e-10) << h << "x" << w << "/" << s;
  }
}

TEST(KspaceTruncation, IdempotentLinearAndEnergyReducing) {
  const auto a = random_grid(16, 16, 1), b = random_grid(16, 16, 2);
  for (int s : {2, 4}) {
    const auto ta = kspace_truncate(a, s);
    const auto tta = kspace_truncate(ta, s);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(tta[i], ta[i], 1e-12);
    Tensor<double> combo(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) combo[i] = 2.0 * a[i] - 0.5 * b[i];
    const auto tc = kspace_truncate(combo, s), tb = kspace_truncate(b, s);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(tc[i], 2.0 * ta[i] - 0.5 * tb[i], 1e-12);
    double ea = 0, eta = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      ea += a[i] * a[i];
      eta += ta[i] * ta[i];
    }
    EXPECT_LE(eta, ea + 1e-12);
  }
}

TEST(KspaceTruncation, ScaleOneIsIdentityAndErrors) {
  const auto a = random_grid(6, 6, 3);
  EXPECT_EQ(kspace_truncate(a, 1).storage(), a.storage());
  EXPECT_THROW(kspace_truncate(random_grid(10, 8, 1), 4), InvalidArgument);
  EXPECT_THROW(kspace_truncate(Tensor<double>({4, 4, 1}), 2), ShapeMismatch);
}

TEST(Cropping, VolumeCropKeepsCentre) {
  Tensor<float> vol({256, 240, 140});
  for (std::size_t i = 0; i < vol.size(); ++i) vol[i] = static_cast<float>(i % 9973);
  const auto out = center_crop(vol, 224, 224, 20);
  ASSERT_EQ(out.shape(), (Shape{224, 224, 20}));
  // (256−224)/2 = 16, (240−224)/2 = 8, (140−20)/2 = 60
  EXPECT_EQ(out[0], vol[(16 * 240 + 8) * 140 + 60]);
  EXPECT_EQ(out[out.size() - 1], vol[((16 + 223) * 240 + 8 + 223) * 140 + 60 + 19]);
}

TEST(Cropping, IdentityAndOddMargins) {
  const auto g = random_grid(5, 5, 4);
  EXPECT_EQ(center_crop(g, 5, 5).storage(), g.storage());
  const auto c = center_crop(g, 3, 3);
  EXPECT_EQ(c[0], g[1 * 5 + 1]);
  EXPECT_EQ(c[8], g[3 * 5 + 3]);
  const auto even = center_crop(random_grid(4, 4, 5), 1, 1);
  EXPECT_EQ(even.size(), 1u);
  EXPECT_THROW(center_crop(g, 6, 5), InvalidArgument);
}

TEST(Normalization, MapsRangeOntoSymmetricUnitInterval) {
  Tensor<double> g({3}, {2.0, 3.0, 6.0});
  const auto r = range_of(g);
  EXPECT_EQ(r, (NormRange{2.0, 6.0}));
  const auto n = normalize(g, r);
  EXPECT_DOUBLE_EQ(n[0], -1.0);
  EXPECT_DOUBLE_EQ(n[1], -0.5);
  EXPECT_DOUBLE_EQ(n[2], 1.0);
  const auto back = denormalize(n, r);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(back[i], g[i], 1e-12);
  const auto flat = normalize(Tensor<double>({2}, 4.0), NormRange{4.0, 4.0});
  for (double v : flat.storage()) EXPECT_EQ(v, 0.0);
}

TEST(Phantoms, DeterministicAndBounded) {
  Rng a(7), b(7);
  const auto pa = generate_phantom_volume(a, 32, 3), pb = generate_phantom_volume(b, 32, 3);
  EXPECT_EQ(pa.t2.storage(), pb.t2.storage());
  EXPECT_EQ(pa.t1.storage(), pb.t1.storage());
  for (float v : pa.t2.values()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
  Rng c(8);
  EXPECT_NE(generate_phantom_volume(c, 32, 3).t2.storage(), pa.t2.storage());
  Rng d(1);
  EXPECT_THROW(generate_phantom_volume(d, 8, 1), InvalidArgument);
}

TEST(Phantoms, ContrastsShareEdges) {
  double total = 0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    Rng rng(s);
    const auto p = generate_phantom_pair(rng, 32);
    total += correlation(gradient_magnitude(p.hr_t2), gradient_magnitude(p.hr_t1));
  }
  EXPECT_GT(total / 100, 0.5);
}

TEST(DatasetSplits, CountsFollowRatios) {
  EXPECT_EQ(split_counts(40, {}), (std::array<std::size_t, 3>{28, 4, 8}));
  EXPECT_EQ(split_counts(10, {}), (std::array<std::size_t, 3>{7, 1, 2}));
  EXPECT_EQ(split_counts(1, {}), (std::array<std::size_t, 3>{0, 0, 1}));
  EXPECT_THROW(split_counts(10, {0, 0, 0}), InvalidArgument);
}

TEST(DatasetBuild, RecordsManifestAndLowResolutionGrids) {
  TempDir dir("data_build");
  const auto volumes = phantom_volumes(10, 16, 2, 5);
  DatasetOptions opt;
  opt.scale = 4;
  const Manifest m = build_dataset(volumes, opt, dir.path);
  ASSERT_EQ(m.records.size(), 20u);
  EXPECT_EQ(m.split("train").size(), 14u);
  EXPECT_EQ(m.split("val").size(), 2u);
  EXPECT_EQ(m.split("test").size(), 4u);

  // Volumes never straddle splits and ids are unique.
  std::map<std::string, std::string> split_of_volume;
  std::set<std::string> ids;
  for (const auto& r : m.records) {
    EXPECT_TRUE(ids.insert(r.slice_id).second);
    auto [it, fresh] = split_of_volume.emplace(r.volume_id, r.split);
    if (!fresh) {
      EXPECT_EQ(it->second, r.split);
    }
  }

  EXPECT_EQ(load_manifest(dir.path / "manifest.json"), m);

  for (const auto& r : m.records) {
    const auto hr = read_grid(dir.path / r.paths.hr_t2, r.shape);
    const auto lr = read_grid(dir.path / r.paths.lr_t2, r.shape);
    EXPECT_EQ(lr.storage(), kspace_truncate(hr, 4).storage());
    EXPECT_DOUBLE_EQ(r.entropy_bits, shannon_entropy(hr));
    const auto s = load_slice<double>(r, dir.path);
    for (double v : s.hr.values()) {
      EXPECT_GE(v, -1.0);
      EXPECT_LE(v, 1.0);
    }
    for (double v : s.lr.values()) {
      EXPECT_GE(v, -1.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(DatasetBuild, Errors) {
  TempDir dir("data_errors");
  EXPECT_THROW(build_dataset({}, {}, dir.path), InvalidArgument);
  DatasetOptions bad;
  bad.scale = 3;
  EXPECT_THROW(build_dataset(phantom_volumes(1, 16, 1, 0), bad, dir.path), InvalidArgument);
  EXPECT_THROW(load_manifest(dir.path / "missing.json"), IoError);
}
