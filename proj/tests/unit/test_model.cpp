#include <gtest/gtest.h>

#include "discdiff/losses.hpp"
#include "discdiff/unet.hpp"
#include "support/oracles.hpp"

using namespace discdiff;
using ag::Var;

namespace {

ModelConfig tiny_config() {
  ModelConfig c = ModelConfig::desk();
  c.in_resolution = 16;
  c.channel_multipliers = {1, 2, 2};
  c.attention_resolutions = {8};
  c.head_channels = 16;
  return c;
}

Var<double> random_input(std::size_t n, std::size_t res, Rng& rng, double lo = -1, double hi = 1) {
  Tensor<double> t({n, 1, res, res});
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return ag::constant(std::move(t));
}

// Moves every parameter off its initializer so zero-initialized layers
// do not mask paths.
template <typename T>
void jitter(nn::ParameterSet<T>& ps, Rng& rng, double scale) {
  for (auto& e : ps.entries())
    for (auto& v : e.var.mutable_value().values()) v += static_cast<T>(scale * rng.normal());
}

}  // namespace

TEST(ModelConfigValidation, RejectsBadConfigs) {
  ModelConfig c = ModelConfig::desk();
  c.base_channels = 15;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = ModelConfig::desk();
  c.attention_resolutions = {12};
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = ModelConfig::desk();
  c.in_resolution = 36;
  EXPECT_THROW(c.validate(), InvalidArgument);
  EXPECT_NO_THROW(ModelConfig::full_scale().validate());
  EXPECT_NO_THROW(ModelConfig::desk().validate());
}

TEST(ModelConfigValidation, FullScaleBottleneckIsSevenBySeven) {
  const auto c = ModelConfig::full_scale();
  EXPECT_EQ(c.bottleneck_resolution(), 7);
  EXPECT_EQ(c.bottleneck_channels(), 192);
}

TEST(SharedIndependentSplit, ShapeContract) {
  Rng rng(1);
  nn::ParameterSet<float> ps;
  SharedIndependentSplit<float> split(ps, "s", 192, rng);
  auto [s, i] = split(ag::constant(Tensor<float>({1, 192, 7, 7}, 0.5f)));
  EXPECT_EQ(s.shape(), (Shape{1, 96, 7, 7}));
  EXPECT_EQ(i.shape(), (Shape{1, 96, 7, 7}));

  nn::ParameterSet<float> desk_ps;
  SharedIndependentSplit<float> desk(desk_ps, "d", 32, rng);
  auto [ds, di] = desk(ag::constant(Tensor<float>({2, 32, 4, 4})));
  EXPECT_EQ(ds.shape(), (Shape{2, 16, 4, 4}));
  EXPECT_EQ(di.shape(), (Shape{2, 16, 4, 4}));
}

TEST(SharedIndependentSplit, ZeroHeadsOnZeroInputGiveZero) {
  Rng rng(2);
  nn::ParameterSet<double> ps;
  SharedIndependentSplit<double> split(ps, "s", 8, rng, /*zero=*/true);
  auto [s, i] = split(ag::constant(Tensor<double>({1, 8, 3, 3})));
  for (double v : s.value().storage()) EXPECT_EQ(v, 0.0);
  for (double v : i.value().storage()) EXPECT_EQ(v, 0.0);
}

TEST(SharedIndependentSplit, OddChannelsRejected) {
  Rng rng(3);
  nn::ParameterSet<double> ps;
  EXPECT_THROW(SharedIndependentSplit<double>(ps, "s", 7, rng), InvalidArgument);
}

TEST(FuseShared, ConvexCombinationCases) {
  Tensor<double> a({1, 2, 2, 2}, 1.5);
  EXPECT_EQ(fuse_shared(a, a, a, {0.2, 0.5, 0.3}), a);
  Rng rng(4);
  Tensor<double> x({1, 1, 2, 2}), y({1, 1, 2, 2}), z({1, 1, 2, 2});
  for (auto* t : {&x, &y, &z})
    for (auto& v : t->values()) v = rng.normal();
  EXPECT_EQ(fuse_shared(x, y, z, {1.0, 0.0, 0.0}), x);
  const auto avg = fuse_shared(Tensor<double>({4}, 0.0), Tensor<double>({4}, 2.0), Tensor<double>({4}, 4.0),
                               {1.0 / 3, 1.0 / 3, 1.0 / 3});
  for (double v : avg.values()) EXPECT_NEAR(v, 2.0, 1e-15);
}

TEST(FuseShared, RejectsInvalidInputs) {
  Tensor<double> a({2}), b({3});
  EXPECT_THROW(fuse_shared(a, b, a, {1.0, 0.0, 0.0}), ShapeMismatch);
  EXPECT_THROW(fuse_shared(a, a, a, {0.5, 0.6, -0.1}), InvalidArgument);
  EXPECT_THROW(fuse_shared(a, a, a, {0.5, 0.2, 0.2}), InvalidArgument);
}

TEST(SEModule, ZeroWeightsGiveHalfScale) {
  Rng rng(5);
  nn::ParameterSet<double> ps;
  nn::SEModule<double> se(ps, "se", 8, rng);
  for (auto& e : ps.entries()) e.var.mutable_value().fill(0.0);
  Tensor<double> x({1, 8, 3, 3});
  for (auto& v : x.values()) v = rng.normal();
  const auto y = se(ag::constant(x)).value();
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_DOUBLE_EQ(y[i], 0.5 * x[i]);
}

TEST(SEModule, PerChannelScalingStrictlyInsideUnitInterval) {
  Rng rng(6);
  nn::ParameterSet<double> ps;
  nn::SEModule<double> se(ps, "se", 16, rng);
  Tensor<double> x({2, 16, 4, 4});
  for (auto& v : x.values()) v = 3.0 * rng.normal();
  const auto s = se.weights(ag::constant(x)).value();
  for (double v : s.values()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
  const auto y = se(ag::constant(x)).value();
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 16; ++c)
      for (std::size_t i = 0; i < 16; ++i) {
        const std::size_t k = (n * 16 + c) * 16 + i;
        EXPECT_NEAR(y[k], s(n, c) * x[k], 1e-14);
      }
}

TEST(SEModule, ConstantChannelStaysConstant) {
  Rng rng(7);
  nn::ParameterSet<double> ps;
  nn::SEModule<double> se(ps, "se", 4, rng);
  Tensor<double> x({1, 4, 3, 3}, 2.5);
  const auto y = se(ag::constant(x)).value();
  const auto s = se.weights(ag::constant(x)).value();
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t i = 0; i < 9; ++i) EXPECT_NEAR(y[c * 9 + i], s(0, c) * 2.5, 1e-14);
}

TEST(SEModule, HiddenWidthHasFloorOfFour) {
  Rng rng(8);
  nn::ParameterSet<float> ps;
  nn::SEModule<float> se(ps, "se", 8, rng);
  EXPECT_EQ(se.fc1.weight.shape(), (Shape{4, 8}));
  nn::SEModule<float> wide(ps, "wide", 96, rng);
  EXPECT_EQ(wide.fc1.weight.shape(), (Shape{24, 96}));
}

TEST(TimestepEmbedding, CosineThenSine) {
  const auto e = nn::timestep_embedding<double>({0, 5}, 8);
  EXPECT_EQ(e.shape(), (Shape{2, 8}));
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_DOUBLE_EQ(e(0, i), 1.0);
    EXPECT_DOUBLE_EQ(e(0, 4 + i), 0.0);
  }
  EXPECT_NEAR(e(1, 0), std::cos(5.0), 1e-15);
  EXPECT_NEAR(e(1, 4), std::sin(5.0), 1e-15);
}

TEST(NormGroups, LargestDivisorUpToHalfOrThirtyTwo) {
  EXPECT_EQ(nn::norm_groups(16), 8u);
  EXPECT_EQ(nn::norm_groups(96), 32u);
  EXPECT_EQ(nn::norm_groups(192), 32u);
  EXPECT_EQ(nn::norm_groups(2), 1u);
}

TEST(DisentangledUNet, DeskShapesAndVariance) {
  DisentangledUNet<float> model(ModelConfig::desk(), 100, 1);
  Rng rng(9);
  Tensor<float> x({2, 1, 32, 32});
  for (auto& v : x.values()) v = static_cast<float>(rng.normal());
  auto in = ag::constant(x);
  const auto out = model.forward(in, in, in, {3, 77});
  EXPECT_EQ(out.eps_pred.shape(), (Shape{2, 1, 32, 32}));
  ASSERT_TRUE(out.v_pred.has_value());
  EXPECT_EQ(out.v_pred->shape(), out.eps_pred.shape());
  for (float v : out.v_pred->value().values()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
  const auto& r = out.reps;
  for (const auto* b : {&r.s_x, &r.i_x, &r.s_y, &r.i_y, &r.s_v, &r.i_v, &r.s_hat, &r.i_hat_x, &r.i_hat_y, &r.i_hat_v})
    EXPECT_EQ(b->shape(), (Shape{2, 16, 8, 8}));
}

TEST(DisentangledUNet, NoVarianceHeadWhenDisabled) {
  ModelConfig c = tiny_config();
  c.learn_variance = false;
  DisentangledUNet<float> model(c, 10, 2);
  auto in = ag::constant(Tensor<float>({1, 1, 16, 16}));
  EXPECT_FALSE(model.forward(in, in, in, {1}).v_pred.has_value());
}

TEST(DisentangledUNet, ForwardIsPure) {
  DisentangledUNet<double> model(tiny_config(), 50, 3);
  Rng rng(10);
  jitter(model.parameters(), rng, 0.05);
  auto x = random_input(1, 16, rng), y = random_input(1, 16, rng), v = random_input(1, 16, rng);
  EXPECT_EQ(model.forward(x, y, v, {12}).eps_pred.value(), model.forward(x, y, v, {12}).eps_pred.value());
}

TEST(DisentangledUNet, RejectsBadInputs) {
  DisentangledUNet<float> model(tiny_config(), 10, 4);
  auto good = ag::constant(Tensor<float>({1, 1, 16, 16}));
  auto wrong = ag::constant(Tensor<float>({1, 1, 32, 32}));
  EXPECT_THROW(model.forward(wrong, good, good, {1}), ShapeMismatch);
  EXPECT_THROW(model.forward(good, good, good, {0}), StepOutOfRange);
  EXPECT_THROW(model.forward(good, good, good, {11}), StepOutOfRange);
  EXPECT_THROW(model.forward(good, good, good, {1, 2}), ShapeMismatch);
}

TEST(DisentangledUNet, EncodersHaveIndependentParameters) {
  DisentangledUNet<double> model(tiny_config(), 20, 5);
  Rng rng(11);
  jitter(model.parameters(), rng, 0.05);
  auto x = random_input(1, 16, rng), y = random_input(1, 16, rng), v = random_input(1, 16, rng);
  const auto before = model.forward(x, y, v, {7}).eps_pred.value();
  const auto snapshot = model.parameters().snapshot();

  auto& w = model.parameters().at("enc_y.conv_in.weight").mutable_value();
  w[0] += 0.5;
  const auto after = model.forward(x, y, v, {7}).eps_pred.value();
  EXPECT_NE(before, after);

  const auto& entries = model.parameters().entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].name.rfind("enc_x.", 0) == 0 || entries[i].name.rfind("enc_v.", 0) == 0) {
      EXPECT_EQ(entries[i].var.value(), snapshot[i]) << entries[i].name;
    }
  }
}

TEST(DisentangledUNet, ParameterGroupsPresent) {
  DisentangledUNet<float> model(ModelConfig::desk(), 100, 6);
  for (const char* name : {"enc_x.conv_in.weight", "enc_y.conv_in.weight", "enc_v.conv_in.weight",
                           "split_x.shared.weight", "split_v.independent.weight", "fuse.logits",
                           "se_i_x.fc1.weight", "se_i_y.fc2.bias", "se_i_v.fc1.bias", "se_s.fc2.weight",
                           "dec.out_conv.weight", "time.fc1.weight"})
    EXPECT_NO_THROW(model.parameters().at(name)) << name;
  // Fusion starts at equal thirds.
  for (float v : model.parameters().at("fuse.logits").value().storage()) EXPECT_EQ(v, 0.0f);
}

TEST(DisentangledUNet, CharbonnierGradientsMatchFiniteDifferences) {
  DisentangledUNet<double> model(tiny_config(), 20, 7);
  Rng rng(12);
  jitter(model.parameters(), rng, 0.05);
  auto x = random_input(2, 16, rng, -2, 2), y = random_input(2, 16, rng), v = random_input(2, 16, rng);
  Tensor<double> eps({2, 1, 16, 16});
  for (auto& e : eps.values()) e = rng.normal();
  auto target = ag::constant(eps);
  auto loss = [&] { return charbonnier_loss(model.forward(x, y, v, {4, 15}).eps_pred, target, 1e-3); };

  auto& ps = model.parameters();
  ps.zero_grad();
  ag::backward(loss());
  for (int trial = 0; trial < 12; ++trial) {
    auto& e = ps.entries()[static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(ps.size()) - 1))];
    const auto i = static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(e.var.size()) - 1));
    const double analytic = e.var.grad().empty() ? 0.0 : e.var.grad()[i];
    const double numeric = oracle::central_difference(&e.var.mutable_value()[i], 1e-6, [&] { return loss().item(); });
    EXPECT_NEAR(analytic, numeric, 1e-3 * std::max(std::abs(numeric), 1e-4)) << e.name << "[" << i << "]";
  }
}

TEST(MakeDenoiser, BroadcastsConditionAcrossChains) {
  DisentangledUNet<float> model(tiny_config(), 10, 8);
  Rng rng(13);
  jitter(model.parameters(), rng, 0.02);
  auto denoise = make_denoiser(model);
  ConditionPair<float> cond{Tensor<float>({16, 16}, 0.1f), Tensor<float>({16, 16}, -0.2f)};
  Tensor<float> x({3, 1, 16, 16}, 0.3f);
  const auto out = denoise(x, cond, 5);
  EXPECT_EQ(out.eps.shape(), x.shape());
  ASSERT_TRUE(out.v.has_value());
  // Identical chains in, identical predictions out.
  for (std::size_t i = 0; i < 256; ++i) {
    EXPECT_EQ(out.eps[i], out.eps[256 + i]);
    EXPECT_EQ(out.eps[i], out.eps[512 + i]);
  }
}
