#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "discdiff/autograd.hpp"
#include "discdiff/rng.hpp"

namespace discdiff::nn {

using ag::Var;

// Named, ordered parameter registry. Layers hand out Vars that alias the
// registered nodes, so updating a value here updates the layer.
template <typename T>
class ParameterSet {
 public:
  struct Entry {
    std::string name;
    Var<T> var;
  };

  ParameterSet() = default;
  ParameterSet(const ParameterSet&) = delete;
  ParameterSet& operator=(const ParameterSet&) = delete;

  Var<T> add(const std::string& name, Tensor<T> init) {
    if (index_.count(name)) throw InvalidArgument("duplicate parameter name " + name);
    index_[name] = entries_.size();
    entries_.push_back({name, Var<T>(std::move(init), requires_grad_)});
    return entries_.back().var;
  }

  std::vector<Entry>& entries() noexcept { return entries_; }
  const std::vector<Entry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }

  Var<T>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw InvalidArgument("unknown parameter " + name);
    return entries_[it->second].var;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.var.size();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.var.zero_grad();
  }

  void set_requires_grad(bool on) {
    requires_grad_ = on;
    for (auto& e : entries_) e.var.node()->requires_grad = on;
  }

  std::vector<Tensor<T>> snapshot() const {
    std::vector<Tensor<T>> out;
    for (const auto& e : entries_) out.push_back(e.var.value());
    return out;
  }

  void load(const std::vector<Tensor<T>>& values) {
    if (values.size() != entries_.size()) throw ShapeMismatch("parameter count mismatch on load");
    for (std::size_t i = 0; i < values.size(); ++i) {
      require_same_shape(values[i], entries_[i].var.value(), entries_[i].name.c_str());
      entries_[i].var.mutable_value() = values[i];
    }
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
  bool requires_grad_ = true;
};

template <typename T>
Tensor<T> uniform_init(Shape shape, double bound, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

inline std::size_t norm_groups(std::size_t channels) {
  for (std::size_t g = std::min<std::size_t>(32, channels / 2); g > 1; --g)
    if (channels % g == 0) return g;
  return 1;
}

template <typename T>
struct Linear {
  Var<T> weight, bias;

  Linear() = default;
  Linear(ParameterSet<T>& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
         bool zero = false) {
    const double bound = zero ? 0.0 : 1.0 / std::sqrt(static_cast<double>(in));
    weight = ps.add(name + ".weight", uniform_init<T>({out, in}, bound, rng));
    bias = ps.add(name + ".bias", uniform_init<T>({out}, bound, rng));
  }
  Var<T> operator()(const Var<T>& x) const { return ag::linear(x, weight, bias); }
};

template <typename T>
struct Conv2d {
  Var<T> weight, bias;
  std::size_t stride = 1, pad = 0;

  Conv2d() = default;
  Conv2d(ParameterSet<T>& ps, const std::string& name, std::size_t in, std::size_t out,
         std::size_t kernel, Rng& rng, bool zero = false, std::size_t stride_ = 1)
      : stride(stride_), pad(kernel / 2) {
    const double bound = zero ? 0.0 : 1.0 / std::sqrt(static_cast<double>(in * kernel * kernel));
    weight = ps.add(name + ".weight", uniform_init<T>({out, in, kernel, kernel}, bound, rng));
    bias = ps.add(name + ".bias", uniform_init<T>({out}, bound, rng));
  }
  Var<T> operator()(const Var<T>& x) const { return ag::conv2d(x, weight, bias, stride, pad); }
};

template <typename T>
struct GroupNorm {
  Var<T> gamma, beta;
  std::size_t groups = 1;

  GroupNorm() = default;
  GroupNorm(ParameterSet<T>& ps, const std::string& name, std::size_t channels)
      : groups(norm_groups(channels)) {
    gamma = ps.add(name + ".gamma", Tensor<T>({channels}, T(1)));
    beta = ps.add(name + ".beta", Tensor<T>({channels}, T(0)));
  }
  Var<T> operator()(const Var<T>& x) const { return ag::group_norm(x, gamma, beta, groups); }
};

// Sinusoidal step embedding, {N} -> {N, dim}.
template <typename T>
Tensor<T> timestep_embedding(const std::vector<int>& steps, std::size_t dim) {
  const std::size_t half = dim / 2;
  Tensor<T> out({steps.size(), dim});
  for (std::size_t b = 0; b < steps.size(); ++b)
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      const double arg = steps[b] * freq;
      out(b, i) = static_cast<T>(std::cos(arg));
      out(b, half + i) = static_cast<T>(std::sin(arg));
    }
  return out;
}

enum class Resample { none, up, down };

// Residual block with step-embedding injection. With `up`/`down` the block
// also resamples by 2 on both paths (BigGAN style).
template <typename T>
struct ResBlock {
  GroupNorm<T> norm1, norm2;
  Conv2d<T> conv1, conv2, skip;
  Linear<T> emb_proj;
  Resample mode = Resample::none;
  bool has_skip = false;

  ResBlock() = default;
  ResBlock(ParameterSet<T>& ps, const std::string& name, std::size_t in, std::size_t out,
           std::size_t emb_dim, Rng& rng, Resample mode_ = Resample::none)
      : mode(mode_), has_skip(in != out) {
    norm1 = GroupNorm<T>(ps, name + ".norm1", in);
    conv1 = Conv2d<T>(ps, name + ".conv1", in, out, 3, rng);
    emb_proj = Linear<T>(ps, name + ".emb", emb_dim, out, rng);
    norm2 = GroupNorm<T>(ps, name + ".norm2", out);
    conv2 = Conv2d<T>(ps, name + ".conv2", out, out, 3, rng, /*zero=*/true);
    if (has_skip) skip = Conv2d<T>(ps, name + ".skip", in, out, 1, rng);
  }

  Var<T> resample(const Var<T>& x) const {
    switch (mode) {
      case Resample::up: return ag::upsample_nearest2(x);
      case Resample::down: return ag::avg_pool2(x);
      default: return x;
    }
  }

  Var<T> operator()(const Var<T>& x, const Var<T>& emb) const {
    Var<T> h = ag::silu(norm1(x));
    h = conv1(resample(h));
    h = ag::add_channel_bias(h, emb_proj(ag::silu(emb)));
    h = conv2(ag::silu(norm2(h)));
    Var<T> base = resample(x);
    if (has_skip) base = skip(base);
    return ag::add(base, h);
  }
};

template <typename T>
struct AttentionBlock {
  GroupNorm<T> norm;
  Conv2d<T> qkv, proj;
  std::size_t heads = 1;

  AttentionBlock() = default;
  AttentionBlock(ParameterSet<T>& ps, const std::string& name, std::size_t channels,
                 std::size_t head_channels, Rng& rng)
      : heads(std::max<std::size_t>(1, channels / head_channels)) {
    if (channels % heads) heads = 1;
    norm = GroupNorm<T>(ps, name + ".norm", channels);
    qkv = Conv2d<T>(ps, name + ".qkv", channels, 3 * channels, 1, rng);
    proj = Conv2d<T>(ps, name + ".proj", channels, channels, 1, rng, /*zero=*/true);
  }

  Var<T> operator()(const Var<T>& x) const {
    return ag::add(x, proj(ag::spatial_attention(qkv(norm(x)), heads)));
  }
};

// Squeeze-and-excitation: pooled channel descriptor -> FC+SiLU -> FC+Sigmoid
// -> per-channel weights in (0, 1).
template <typename T>
struct SEModule {
  Linear<T> fc1, fc2;

  SEModule() = default;
  SEModule(ParameterSet<T>& ps, const std::string& name, std::size_t channels, Rng& rng) {
    const std::size_t hidden = std::max<std::size_t>(4, channels / 4);
    fc1 = Linear<T>(ps, name + ".fc1", channels, hidden, rng);
    fc2 = Linear<T>(ps, name + ".fc2", hidden, channels, rng);
  }

  Var<T> weights(const Var<T>& x) const {
    return ag::sigmoid(fc2(ag::silu(fc1(ag::global_avg_pool(x)))));
  }
  Var<T> operator()(const Var<T>& x) const { return ag::scale_channels(x, weights(x)); }
};

}  // namespace discdiff::nn
