#pragma once

#include <algorithm>
#include <array>
#include <tuple>
#include <optional>
#include <string>
#include <vector>

#include "discdiff/nn.hpp"
#include "discdiff/sampling.hpp"

namespace discdiff {

struct ModelConfig {
  int base_channels = 96;
  int num_res_blocks = 2;
  std::vector<int> attention_resolutions{28, 14, 7};
  std::vector<int> channel_multipliers{1, 1, 2, 2, 2, 2};
  bool learn_variance = true;
  int in_resolution = 224;
  int head_channels = 64;

  static ModelConfig full_scale() { return {}; }

  // 32x32 inputs, 8x8 bottleneck: at scale 4 the LR band fits through the
  // bottleneck, which is the only path from y and v to the decoder.
  static ModelConfig desk() {
    ModelConfig c;
    c.base_channels = 16;
    c.num_res_blocks = 1;
    c.attention_resolutions = {8};
    c.channel_multipliers = {1, 2, 2};
    c.in_resolution = 32;
    return c;
  }

  int levels() const { return static_cast<int>(channel_multipliers.size()); }
  int bottleneck_resolution() const { return in_resolution >> (levels() - 1); }
  int bottleneck_channels() const { return base_channels * channel_multipliers.back(); }

  void validate() const {
    if (base_channels <= 0 || base_channels % 2)
      throw InvalidArgument("base_channels must be positive and even");
    if (num_res_blocks < 1) throw InvalidArgument("num_res_blocks must be >= 1");
    if (channel_multipliers.empty()) throw InvalidArgument("channel_multipliers is empty");
    for (int m : channel_multipliers)
      if (m < 1) throw InvalidArgument("channel multipliers must be >= 1");
    if (in_resolution < 1 || in_resolution % (1 << (levels() - 1)))
      throw InvalidArgument("in_resolution must be divisible by 2^(levels-1)");
    if (bottleneck_channels() % 2) throw InvalidArgument("bottleneck channel count must be even");
    for (int r : attention_resolutions) {
      bool reachable = false;
      for (int l = 0; l < levels(); ++l) reachable |= (in_resolution >> l) == r;
      if (!reachable)
        throw InvalidArgument("attention resolution " + std::to_string(r) + " is not reachable");
    }
    if (head_channels < 1) throw InvalidArgument("head_channels must be >= 1");
  }

  bool operator==(const ModelConfig&) const = default;
};

// Shared/independent blocks of the three streams and their SE-reweighted
// forms, each {N, C, h, w} at the bottleneck.
template <typename T>
struct Representations {
  ag::Var<T> s_x, i_x, s_y, i_y, s_v, i_v;
  ag::Var<T> s_hat, i_hat_x, i_hat_y, i_hat_v;
};

template <typename T>
struct ModelOutput {
  ag::Var<T> eps_pred;
  std::optional<ag::Var<T>> v_pred;
  Representations<T> reps;
};

// Two 3x3 convolution heads mapping a 2C-channel stream to (S, I), C each.
template <typename T>
struct SharedIndependentSplit {
  nn::Conv2d<T> shared, independent;

  SharedIndependentSplit() = default;
  SharedIndependentSplit(nn::ParameterSet<T>& ps, const std::string& name, std::size_t channels,
                         Rng& rng, bool zero = false) {
    if (channels % 2) throw InvalidArgument("shared/independent split needs an even channel count");
    shared = nn::Conv2d<T>(ps, name + ".shared", channels, channels / 2, 3, rng, zero);
    independent = nn::Conv2d<T>(ps, name + ".independent", channels, channels / 2, 3, rng, zero);
  }

  std::pair<ag::Var<T>, ag::Var<T>> operator()(const ag::Var<T>& features) const {
    return {shared(features), independent(features)};
  }
};

// S = w1·S_x + w2·S_y + w3·S_v for explicit convex weights.
template <typename T>
Tensor<T> fuse_shared(const Tensor<T>& s_x, const Tensor<T>& s_y, const Tensor<T>& s_v,
                      const std::array<double, 3>& weights) {
  require_same_shape(s_x, s_y, "fuse_shared");
  require_same_shape(s_x, s_v, "fuse_shared");
  double total = 0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw InvalidArgument("fusion weights must be nonnegative");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-9) throw InvalidArgument("fusion weights must sum to 1");
  Tensor<T> out(s_x.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<T>(weights[0] * s_x[i] + weights[1] * s_y[i] + weights[2] * s_v[i]);
  return out;
}

namespace detail {

template <typename T>
struct Encoder {
  nn::Conv2d<T> conv_in;
  struct Stage {
    nn::ResBlock<T> block;
    std::optional<nn::AttentionBlock<T>> attn;
  };
  std::vector<Stage> stages;
  nn::ResBlock<T> middle;
  std::vector<std::size_t> skip_channels;

  Encoder(nn::ParameterSet<T>& ps, const std::string& name, const ModelConfig& cfg,
          std::size_t emb_dim, Rng& rng) {
    const auto has_attn = [&](int res) {
      return std::find(cfg.attention_resolutions.begin(), cfg.attention_resolutions.end(), res) !=
             cfg.attention_resolutions.end();
    };
    std::size_t ch = static_cast<std::size_t>(cfg.base_channels * cfg.channel_multipliers[0]);
    conv_in = nn::Conv2d<T>(ps, name + ".conv_in", 1, ch, 3, rng);
    skip_channels.push_back(ch);
    int res = cfg.in_resolution;
    for (int l = 0; l < cfg.levels(); ++l) {
      const std::size_t out = static_cast<std::size_t>(cfg.base_channels * cfg.channel_multipliers[l]);
      for (int r = 0; r < cfg.num_res_blocks; ++r) {
        const std::string p = name + ".level" + std::to_string(l) + ".res" + std::to_string(r);
        Stage s{nn::ResBlock<T>(ps, p, ch, out, emb_dim, rng), std::nullopt};
        ch = out;
        if (has_attn(res)) s.attn.emplace(ps, p + ".attn", ch, cfg.head_channels, rng);
        stages.push_back(std::move(s));
        skip_channels.push_back(ch);
      }
      if (l + 1 < cfg.levels()) {
        const std::string p = name + ".level" + std::to_string(l) + ".down";
        stages.push_back({nn::ResBlock<T>(ps, p, ch, ch, emb_dim, rng, nn::Resample::down), std::nullopt});
        skip_channels.push_back(ch);
        res /= 2;
      }
    }
    middle = nn::ResBlock<T>(ps, name + ".middle", ch, ch, emb_dim, rng);
  }

  // Returns the bottleneck features; appends skip activations.
  ag::Var<T> operator()(const ag::Var<T>& x, const ag::Var<T>& emb,
                        std::vector<ag::Var<T>>* skips) const {
    ag::Var<T> h = conv_in(x);
    if (skips) skips->push_back(h);
    for (const auto& s : stages) {
      h = s.block(h, emb);
      if (s.attn) h = (*s.attn)(h);
      if (skips) skips->push_back(h);
    }
    return middle(h, emb);
  }
};

template <typename T>
struct Decoder {
  nn::ResBlock<T> mid1, mid2;
  std::optional<nn::AttentionBlock<T>> mid_attn;
  struct Stage {
    nn::ResBlock<T> block;
    std::optional<nn::AttentionBlock<T>> attn;
    std::optional<nn::ResBlock<T>> up;
  };
  std::vector<Stage> stages;
  nn::GroupNorm<T> out_norm;
  nn::Conv2d<T> out_conv;

  Decoder(nn::ParameterSet<T>& ps, const std::string& name, const ModelConfig& cfg,
          std::size_t emb_dim, std::vector<std::size_t> skip_channels, std::size_t out_channels,
          Rng& rng) {
    const auto has_attn = [&](int res) {
      return std::find(cfg.attention_resolutions.begin(), cfg.attention_resolutions.end(), res) !=
             cfg.attention_resolutions.end();
    };
    std::size_t ch = static_cast<std::size_t>(cfg.bottleneck_channels());
    int res = cfg.bottleneck_resolution();
    mid1 = nn::ResBlock<T>(ps, name + ".mid1", 2 * ch, ch, emb_dim, rng);
    if (has_attn(res)) mid_attn.emplace(ps, name + ".mid_attn", ch, cfg.head_channels, rng);
    mid2 = nn::ResBlock<T>(ps, name + ".mid2", ch, ch, emb_dim, rng);
    for (int l = cfg.levels() - 1; l >= 0; --l) {
      const std::size_t out = static_cast<std::size_t>(cfg.base_channels * cfg.channel_multipliers[l]);
      for (int r = 0; r <= cfg.num_res_blocks; ++r) {
        const std::string p = name + ".level" + std::to_string(l) + ".res" + std::to_string(r);
        const std::size_t skip = skip_channels.back();
        skip_channels.pop_back();
        Stage s{nn::ResBlock<T>(ps, p, ch + skip, out, emb_dim, rng), std::nullopt, std::nullopt};
        ch = out;
        if (has_attn(res)) s.attn.emplace(ps, p + ".attn", ch, cfg.head_channels, rng);
        if (l > 0 && r == cfg.num_res_blocks) {
          s.up.emplace(ps, name + ".level" + std::to_string(l) + ".up", ch, ch, emb_dim, rng,
                       nn::Resample::up);
          res *= 2;
        }
        stages.push_back(std::move(s));
      }
    }
    out_norm = nn::GroupNorm<T>(ps, name + ".out_norm", ch);
    out_conv = nn::Conv2d<T>(ps, name + ".out_conv", ch, out_channels, 3, rng, /*zero=*/true);
  }

  ag::Var<T> operator()(const ag::Var<T>& fused, const ag::Var<T>& emb,
                        std::vector<ag::Var<T>> skips) const {
    ag::Var<T> h = mid1(fused, emb);
    if (mid_attn) h = (*mid_attn)(h);
    h = mid2(h, emb);
    for (const auto& s : stages) {
      h = s.block(ag::concat_channels<T>({h, skips.back()}), emb);
      skips.pop_back();
      if (s.attn) h = (*s.attn)(h);
      if (s.up) h = (*s.up)(h, emb);
    }
    return out_conv(ag::silu(out_norm(h)));
  }
};

}  // namespace detail

// Three-encoder U-Net: each of x_t, y, v has its own encoder; bottleneck
// features are split into shared/independent blocks, shared blocks fused by
// a softmax-weighted sum, all four results reweighted by SE modules and
// concatenated into one decoder that takes skips from the x_t encoder.
template <typename T>
class DisentangledUNet {
 public:
  DisentangledUNet(ModelConfig config, int timesteps, std::uint64_t seed)
      : config_(std::move(config)), timesteps_(timesteps) {
    config_.validate();
    if (timesteps < 1) throw InvalidArgument("timesteps must be >= 1");
    Rng rng(seed);
    const std::size_t base = static_cast<std::size_t>(config_.base_channels);
    const std::size_t emb_dim = 4 * base;
    const std::size_t c2 = static_cast<std::size_t>(config_.bottleneck_channels());
    time_fc1_ = nn::Linear<T>(params_, "time.fc1", base, emb_dim, rng);
    time_fc2_ = nn::Linear<T>(params_, "time.fc2", emb_dim, emb_dim, rng);
    enc_x_.emplace(params_, "enc_x", config_, emb_dim, rng);
    enc_y_.emplace(params_, "enc_y", config_, emb_dim, rng);
    enc_v_.emplace(params_, "enc_v", config_, emb_dim, rng);
    split_x_ = SharedIndependentSplit<T>(params_, "split_x", c2, rng);
    split_y_ = SharedIndependentSplit<T>(params_, "split_y", c2, rng);
    split_v_ = SharedIndependentSplit<T>(params_, "split_v", c2, rng);
    fuse_logits_ = params_.add("fuse.logits", Tensor<T>({3}, T(0)));
    se_i_x_ = nn::SEModule<T>(params_, "se_i_x", c2 / 2, rng);
    se_i_y_ = nn::SEModule<T>(params_, "se_i_y", c2 / 2, rng);
    se_i_v_ = nn::SEModule<T>(params_, "se_i_v", c2 / 2, rng);
    se_s_ = nn::SEModule<T>(params_, "se_s", c2 / 2, rng);
    decoder_.emplace(params_, "dec", config_, emb_dim, enc_x_->skip_channels,
                     config_.learn_variance ? 2 : 1, rng);
  }

  DisentangledUNet(const DisentangledUNet&) = delete;
  DisentangledUNet& operator=(const DisentangledUNet&) = delete;

  const ModelConfig& config() const noexcept { return config_; }
  int timesteps() const noexcept { return timesteps_; }
  nn::ParameterSet<T>& parameters() noexcept { return params_; }
  const nn::ParameterSet<T>& parameters() const noexcept { return params_; }

  // x_t, y, v: {N, 1, H, W}; steps: N indices in [1, timesteps].
  ModelOutput<T> forward(const ag::Var<T>& x_t, const ag::Var<T>& y, const ag::Var<T>& v,
                         const std::vector<int>& steps) const {
    const std::size_t res = static_cast<std::size_t>(config_.in_resolution);
    for (const auto* in : {&x_t, &y, &v})
      if (in->value().rank() != 4 || in->dim(1) != 1 || in->dim(2) != res || in->dim(3) != res)
        throw ShapeMismatch("model input must be {N,1," + std::to_string(res) + "," +
                            std::to_string(res) + "}, got " + shape_str(in->shape()));
    if (y.dim(0) != x_t.dim(0) || v.dim(0) != x_t.dim(0) || steps.size() != x_t.dim(0))
      throw ShapeMismatch("model inputs disagree on batch size");
    for (int t : steps)
      if (t < 1 || t > timesteps_)
        throw StepOutOfRange("model step " + std::to_string(t) + " outside [1, " +
                             std::to_string(timesteps_) + "]");

    const auto base = static_cast<std::size_t>(config_.base_channels);
    ag::Var<T> emb = ag::constant(nn::timestep_embedding<T>(steps, base));
    emb = time_fc2_(ag::silu(time_fc1_(emb)));

    std::vector<ag::Var<T>> skips;
    ag::Var<T> zx = (*enc_x_)(x_t, emb, &skips);
    ag::Var<T> zy = (*enc_y_)(y, emb, nullptr);
    ag::Var<T> zv = (*enc_v_)(v, emb, nullptr);

    ModelOutput<T> out;
    auto& r = out.reps;
    std::tie(r.s_x, r.i_x) = split_x_(zx);
    std::tie(r.s_y, r.i_y) = split_y_(zy);
    std::tie(r.s_v, r.i_v) = split_v_(zv);
    ag::Var<T> fused = ag::weighted_sum<T>({r.s_x, r.s_y, r.s_v}, ag::softmax(fuse_logits_));
    r.i_hat_x = se_i_x_(r.i_x);
    r.i_hat_y = se_i_y_(r.i_y);
    r.i_hat_v = se_i_v_(r.i_v);
    r.s_hat = se_s_(fused);

    ag::Var<T> h = (*decoder_)(ag::concat_channels<T>({r.i_hat_x, r.i_hat_y, r.i_hat_v, r.s_hat}),
                               emb, std::move(skips));
    out.eps_pred = ag::slice_channels(h, 0, 1);
    if (config_.learn_variance) out.v_pred = ag::sigmoid(ag::slice_channels(h, 1, 1));
    return out;
  }

  const nn::SEModule<T>& se_shared() const noexcept { return se_s_; }

 private:
  ModelConfig config_;
  int timesteps_;
  nn::ParameterSet<T> params_;
  nn::Linear<T> time_fc1_, time_fc2_;
  std::optional<detail::Encoder<T>> enc_x_, enc_y_, enc_v_;
  SharedIndependentSplit<T> split_x_, split_y_, split_v_;
  ag::Var<T> fuse_logits_;
  nn::SEModule<T> se_i_x_, se_i_y_, se_i_v_, se_s_;
  std::optional<detail::Decoder<T>> decoder_;
};

// Inference adapter: runs the network without building a graph. The model's
// parameters are switched to no-grad for the lifetime of the returned
// callable's use; callers own that model exclusively while sampling.
template <typename T>
Denoiser<T> make_denoiser(DisentangledUNet<T>& model) {
  model.parameters().set_requires_grad(false);
  return [&model](const Tensor<T>& x_t, const ConditionPair<T>& cond, int model_t) {
    const std::size_t k = x_t.dim(0), h = x_t.dim(2), w = x_t.dim(3);
    Tensor<T> y({k, 1, h, w}), v({k, 1, h, w});
    for (std::size_t i = 0; i < k; ++i) {
      std::copy(cond.lr_image.data(), cond.lr_image.data() + h * w, y.data() + i * h * w);
      std::copy(cond.aux_contrast.data(), cond.aux_contrast.data() + h * w, v.data() + i * h * w);
    }
    ModelOutput<T> out = model.forward(ag::constant(x_t), ag::constant(std::move(y)),
                                       ag::constant(std::move(v)), std::vector<int>(k, model_t));
    DenoiserOutput<T> d;
    d.eps = out.eps_pred.value();
    if (out.v_pred) d.v = out.v_pred->value();
    return d;
  };
}

}  // namespace discdiff
