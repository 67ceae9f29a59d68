#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "discdiff/curriculum.hpp"
#include "discdiff/data.hpp"
#include "discdiff/losses.hpp"
#include "discdiff/optim.hpp"
#include "discdiff/unet.hpp"

namespace discdiff {

struct ScheduleConfig {
  int T = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  bool operator==(const ScheduleConfig&) const = default;
};

struct Ablations {
  bool no_disent = false;
  bool mse_instead_of_charbonnier = false;
  bool no_curriculum = false;
  bool operator==(const Ablations&) const = default;
};

struct TrainConfig {
  long iterations = 200000;
  long M = 20000;
  int batch_size = 8;
  double learning_rate = 1e-4;
  AdamWConfig optimizer;
  LossWeights loss_weights;
  ModelConfig model;
  ScheduleConfig schedule;
  int sampling_steps = 100;
  double ema_decay = 0.9999;
  bool ema_warmup = true;
  double grad_clip = 1.0;
  double curriculum_sigma = 0.0;  // <= 0: (e_max − e_min) / 6
  long checkpoint_every = 10000;  // 0: only at the end
  std::uint64_t seed = 0;
  Ablations ablations;

  static TrainConfig full_scale() { return {}; }

  // 32x32 slices, T = 100 with the linear endpoints scaled by 1000 / T.
  static TrainConfig desk() {
    TrainConfig c;
    c.iterations = 2000;
    c.M = 200;
    c.learning_rate = 1e-3;
    c.model = ModelConfig::desk();
    c.schedule = {100, 1e-3, 0.2};
    c.loss_weights.vlb_weight = 0.1;
    c.sampling_steps = 25;
    c.ema_decay = 0.999;
    c.checkpoint_every = 500;
    return c;
  }

  NoiseSchedule make_schedule() const {
    return make_linear_schedule(schedule.T, schedule.beta_start, schedule.beta_end);
  }

  Reconstruction reconstruction() const {
    return ablations.mse_instead_of_charbonnier ? Reconstruction::mse : Reconstruction::charbonnier;
  }

  void validate() const {
    if (iterations < 1) throw ConfigError("iterations must be >= 1");
    if (M < 0 || M > iterations) throw ConfigError("need iterations >= M >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
    if (sampling_steps < 1 || sampling_steps > schedule.T)
      throw ConfigError("sampling_steps must lie in [1, schedule.T]");
    if (!(ema_decay >= 0.0 && ema_decay <= 1.0)) throw ConfigError("ema_decay must lie in [0, 1]");
    if (!(grad_clip >= 0.0)) throw ConfigError("grad_clip must be >= 0");
    if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
    try {
      optimizer.validate();
      loss_weights.validate();
      model.validate();
      make_schedule();
    } catch (const Error& e) {
      throw ConfigError(e.what());
    }
  }

  bool operator==(const TrainConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Config JSON. Parsing is strict: every object must carry exactly the known
// keys, missing keys keep their defaults.

namespace detail {

class StrictObject {
 public:
  StrictObject(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
  }

  template <typename V>
  void get(const char* key, V& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<V>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("bad value for " + child(key) + ": " + it->dump());
    }
  }

  template <typename F>
  void object(const char* key, F&& parse) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it != j_.end()) {
      StrictObject sub(*it, child(key));
      parse(sub);
      sub.finish();
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError("unknown config key " + child(it.key()));
  }

 private:
  std::string where() const { return path_.empty() ? "config" : path_; }
  std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline nlohmann::json model_config_to_json(const ModelConfig& m) {
  return {{"base_channels", m.base_channels},
          {"num_res_blocks", m.num_res_blocks},
          {"attention_resolutions", m.attention_resolutions},
          {"channel_multipliers", m.channel_multipliers},
          {"learn_variance", m.learn_variance},
          {"in_resolution", m.in_resolution},
          {"head_channels", m.head_channels}};
}

inline nlohmann::json config_to_json(const TrainConfig& c) {
  const auto& w = c.loss_weights;
  return {{"iterations", c.iterations},
          {"M", c.M},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"optimizer",
           {{"beta1", c.optimizer.beta1},
            {"beta2", c.optimizer.beta2},
            {"weight_decay", c.optimizer.weight_decay},
            {"eps", c.optimizer.eps}}},
          {"loss_weights",
           {{"lambda1", w.lambda1},
            {"lambda2", w.lambda2},
            {"gamma", w.gamma},
            {"vlb_weight", w.vlb_weight},
            {"eps_div", w.eps_div}}},
          {"model", model_config_to_json(c.model)},
          {"schedule", {{"T", c.schedule.T}, {"beta_start", c.schedule.beta_start}, {"beta_end", c.schedule.beta_end}}},
          {"sampling_steps", c.sampling_steps},
          {"ema_decay", c.ema_decay},
          {"ema_warmup", c.ema_warmup},
          {"grad_clip", c.grad_clip},
          {"curriculum_sigma", c.curriculum_sigma},
          {"checkpoint_every", c.checkpoint_every},
          {"seed", c.seed},
          {"ablations",
           {{"no_disent", c.ablations.no_disent},
            {"mse_instead_of_charbonnier", c.ablations.mse_instead_of_charbonnier},
            {"no_curriculum", c.ablations.no_curriculum}}}};
}

// Fields absent from `j` keep the values already in `base`.
inline TrainConfig config_from_json(const nlohmann::json& j, TrainConfig base = TrainConfig::desk()) {
  TrainConfig c = std::move(base);
  detail::StrictObject o(j, "");
  o.get("iterations", c.iterations);
  o.get("M", c.M);
  o.get("batch_size", c.batch_size);
  o.get("learning_rate", c.learning_rate);
  o.object("optimizer", [&](detail::StrictObject& s) {
    s.get("beta1", c.optimizer.beta1);
    s.get("beta2", c.optimizer.beta2);
    s.get("weight_decay", c.optimizer.weight_decay);
    s.get("eps", c.optimizer.eps);
  });
  o.object("loss_weights", [&](detail::StrictObject& s) {
    s.get("lambda1", c.loss_weights.lambda1);
    s.get("lambda2", c.loss_weights.lambda2);
    s.get("gamma", c.loss_weights.gamma);
    s.get("vlb_weight", c.loss_weights.vlb_weight);
    s.get("eps_div", c.loss_weights.eps_div);
  });
  o.object("model", [&](detail::StrictObject& s) {
    s.get("base_channels", c.model.base_channels);
    s.get("num_res_blocks", c.model.num_res_blocks);
    s.get("attention_resolutions", c.model.attention_resolutions);
    s.get("channel_multipliers", c.model.channel_multipliers);
    s.get("learn_variance", c.model.learn_variance);
    s.get("in_resolution", c.model.in_resolution);
    s.get("head_channels", c.model.head_channels);
  });
  o.object("schedule", [&](detail::StrictObject& s) {
    s.get("T", c.schedule.T);
    s.get("beta_start", c.schedule.beta_start);
    s.get("beta_end", c.schedule.beta_end);
  });
  o.get("sampling_steps", c.sampling_steps);
  o.get("ema_decay", c.ema_decay);
  o.get("ema_warmup", c.ema_warmup);
  o.get("grad_clip", c.grad_clip);
  o.get("curriculum_sigma", c.curriculum_sigma);
  o.get("checkpoint_every", c.checkpoint_every);
  o.get("seed", c.seed);
  o.object("ablations", [&](detail::StrictObject& s) {
    s.get("no_disent", c.ablations.no_disent);
    s.get("mse_instead_of_charbonnier", c.ablations.mse_instead_of_charbonnier);
    s.get("no_curriculum", c.ablations.no_curriculum);
  });
  o.finish();
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Training state and checkpoint container
//
// Layout: 8-byte magic "DISCDIFF", u32 format version, u64 header length,
// JSON header, then the tensors of the sections listed in the header in
// order, each as raw little-endian scalars of the header's dtype.

inline constexpr char kCheckpointMagic[8] = {'D', 'I', 'S', 'C', 'D', 'I', 'F', 'F'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
struct TrainState {
  TrainConfig config;
  std::unique_ptr<DisentangledUNet<T>> model;
  std::unique_ptr<AdamW<T>> optimizer;
  std::unique_ptr<Ema<T>> ema;
  Rng rng;
  long iteration = 0;  // completed iterations

  explicit TrainState(TrainConfig cfg)
      : config((cfg.validate(), std::move(cfg))),
        model(std::make_unique<DisentangledUNet<T>>(config.model, config.schedule.T, mix_seed(config.seed, 1))),
        optimizer(std::make_unique<AdamW<T>>(model->parameters(), config.optimizer)),
        ema(std::make_unique<Ema<T>>(model->parameters(), config.ema_decay, config.ema_warmup)),
        rng(mix_seed(config.seed, 2)) {}
};

template <typename T>
constexpr const char* dtype_name() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? "f32" : "f64";
}

template <typename T>
void save_checkpoint(const TrainState<T>& s, const fs::path& path) {
  const auto& params = s.model->parameters();
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& e : params.entries()) tensors.push_back({{"name", e.name}, {"shape", e.var.shape()}});
  const nlohmann::json header = {{"created_with", std::string("discdiff ") + DISCDIFF_VERSION},
                                 {"dtype", dtype_name<T>()},
                                 {"config", config_to_json(s.config)},
                                 {"iteration", s.iteration},
                                 {"rng_state", s.rng.state()},
                                 {"optimizer_steps", s.optimizer->steps()},
                                 {"ema_updates", s.ema->updates()},
                                 {"sections", {"params", "ema", "adam_m", "adam_v"}},
                                 {"tensors", tensors}};
  const std::string text = header.dump();
  const fs::path tmp = fs::path(path).concat(".tmp");
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw IoError("cannot write checkpoint " + tmp.string());
    os.write(kCheckpointMagic, sizeof kCheckpointMagic);
    const std::uint32_t version = kCheckpointVersion;
    const std::uint64_t len = text.size();
    os.write(reinterpret_cast<const char*>(&version), sizeof version);
    os.write(reinterpret_cast<const char*>(&len), sizeof len);
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    auto dump = [&](const std::vector<Tensor<T>>& section) {
      for (const auto& t : section)
        os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(T)));
    };
    dump(params.snapshot());
    dump(s.ema->shadow());
    dump(s.optimizer->first_moments());
    dump(s.optimizer->second_moments());
    if (!os) throw IoError("failed writing checkpoint " + tmp.string());
  }
  fs::rename(tmp, path);
}

struct CheckpointHeader {
  nlohmann::json json;
  std::uint64_t payload_offset = 0;
};

inline CheckpointHeader read_checkpoint_header(std::istream& is, const std::string& label) {
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
    throw IoError(label + " is not a checkpoint");
  is.read(reinterpret_cast<char*>(&version), sizeof version);
  if (!is || version != kCheckpointVersion)
    throw IoError(label + ": unsupported checkpoint version " + std::to_string(version));
  is.read(reinterpret_cast<char*>(&len), sizeof len);
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  if (!is) throw IoError(label + ": truncated checkpoint header");
  try {
    return {nlohmann::json::parse(text), sizeof magic + sizeof version + sizeof len + len};
  } catch (const nlohmann::json::exception& e) {
    throw IoError(label + ": malformed checkpoint header: " + e.what());
  }
}

namespace detail {

template <typename T, typename Stored>
std::vector<Tensor<T>> read_section(std::istream& is, const std::vector<Shape>& shapes, const std::string& label) {
  std::vector<Tensor<T>> out;
  for (const auto& shape : shapes) {
    std::vector<Stored> buf(shape_size(shape));
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(Stored)));
    if (!is) throw IoError(label + ": truncated checkpoint payload");
    Tensor<T> t(shape);
    for (std::size_t i = 0; i < buf.size(); ++i) t[i] = static_cast<T>(buf[i]);
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace detail

// Restores the complete training state. A checkpoint stored with the other
// floating type is converted on load.
template <typename T>
TrainState<T> load_checkpoint(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("missing checkpoint " + path.string());
  const CheckpointHeader h = read_checkpoint_header(is, path.string());
  try {
    TrainState<T> s(config_from_json(h.json.at("config"), TrainConfig::full_scale()));
    std::vector<Shape> shapes;
    const auto& entries = s.model->parameters().entries();
    const auto& listed = h.json.at("tensors");
    if (listed.size() != entries.size()) throw IoError(path.string() + ": parameter count mismatch");
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (listed[i].at("name").get<std::string>() != entries[i].name ||
          listed[i].at("shape").get<Shape>() != entries[i].var.shape())
        throw IoError(path.string() + ": parameter layout mismatch at " + entries[i].name);
      shapes.push_back(entries[i].var.shape());
    }
    const std::string dtype = h.json.at("dtype").get<std::string>();
    auto section = [&]() {
      if (dtype == "f32") return detail::read_section<T, float>(is, shapes, path.string());
      if (dtype == "f64") return detail::read_section<T, double>(is, shapes, path.string());
      throw IoError(path.string() + ": unknown dtype " + dtype);
    };
    s.model->parameters().load(section());
    auto ema = section();
    auto m = section();
    auto v = section();
    s.ema->restore(h.json.at("ema_updates").get<long>(), std::move(ema));
    s.optimizer->restore(h.json.at("optimizer_steps").get<long>(), std::move(m), std::move(v));
    s.rng.set_state(h.json.at("rng_state").get<std::string>());
    s.iteration = h.json.at("iteration").get<long>();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": malformed checkpoint header: " + e.what());
  }
}

// Model for sampling: the checkpoint's EMA weights.
template <typename T>
std::unique_ptr<DisentangledUNet<T>> load_sampling_model(const fs::path& path, TrainConfig* config_out = nullptr) {
  TrainState<T> s = load_checkpoint<T>(path);
  s.model->parameters().load(s.ema->shadow());
  if (config_out) *config_out = s.config;
  return std::move(s.model);
}

// ---------------------------------------------------------------------------
// One optimization step

struct StepLosses {
  double total = 0, disent = 0, charb = 0, recon = 0, vlb = 0;
  double grad_norm = 0;
  std::vector<int> steps;
};

template <typename T>
struct TrainBatch {
  Tensor<T> hr, lr, aux;  // {N, 1, H, W}
};

template <typename T>
TrainBatch<T> assemble_batch(const std::vector<const SliceSample<T>*>& slices) {
  if (slices.empty()) throw InvalidArgument("empty training batch");
  const std::size_t n = slices.size(), h = slices[0]->hr.dim(0), w = slices[0]->hr.dim(1);
  TrainBatch<T> b{Tensor<T>({n, 1, h, w}), Tensor<T>({n, 1, h, w}), Tensor<T>({n, 1, h, w})};
  for (std::size_t i = 0; i < n; ++i) {
    if (slices[i]->hr.shape() != Shape{h, w}) throw ShapeMismatch("batch slices differ in shape");
    std::copy_n(slices[i]->hr.data(), h * w, b.hr.data() + i * h * w);
    std::copy_n(slices[i]->lr.data(), h * w, b.lr.data() + i * h * w);
    std::copy_n(slices[i]->aux.data(), h * w, b.aux.data() + i * h * w);
  }
  return b;
}

// Loss terms for one batch under the configured ablations. Draws one step per
// batch item and noise per element from `rng`.
template <typename T>
struct LossGraph {
  ag::Var<T> total;
  StepLosses values;
};

template <typename T>
LossGraph<T> compute_losses(const DisentangledUNet<T>& model, const TrainBatch<T>& batch,
                            const TrainConfig& config, const NoiseSchedule& schedule, Rng& rng) {
  const std::size_t n = batch.hr.dim(0), per = batch.hr.size() / n;
  LossGraph<T> g;
  g.values.steps.resize(n);
  for (auto& t : g.values.steps) t = static_cast<int>(rng.uniform_int(1, schedule.steps()));
  Tensor<T> eps(batch.hr.shape());
  for (auto& e : eps.values()) e = static_cast<T>(rng.normal());
  Tensor<T> x_t(batch.hr.shape());
  for (std::size_t b = 0; b < n; ++b) {
    const double a = std::sqrt(schedule.alpha_bar(g.values.steps[b]));
    const double s = std::sqrt(1.0 - schedule.alpha_bar(g.values.steps[b]));
    for (std::size_t i = b * per; i < (b + 1) * per; ++i)
      x_t[i] = static_cast<T>(a * batch.hr[i] + s * eps[i]);
  }

  ModelOutput<T> out = model.forward(ag::constant(x_t), ag::constant(batch.lr), ag::constant(batch.aux),
                                     g.values.steps);
  const LossWeights& w = config.loss_weights;
  const ag::Var<T> eps_var = ag::constant(eps);
  ag::Var<T> disent = disentanglement_loss(out.reps, w.eps_div);
  ag::Var<T> charb = charbonnier_loss(out.eps_pred, eps_var, w.gamma);
  ag::Var<T> recon = config.ablations.mse_instead_of_charbonnier ? mse_loss(out.eps_pred, eps_var) : charb;
  std::optional<ag::Var<T>> vlb;
  if (out.v_pred && w.vlb_weight > 0.0) vlb = vlb_variance_loss(batch.hr, x_t, g.values.steps, out, schedule);

  LossWeights effective = w;
  if (config.ablations.no_disent) effective.lambda1 = 0.0;
  g.total = effective.lambda1 > 0.0 ? total_loss(disent, recon, vlb, effective)
                                    : total_loss(ag::constant(Tensor<T>({1}, T(0))), recon, vlb, effective);
  g.values.total = static_cast<double>(g.total.item());
  g.values.disent = static_cast<double>(disent.item());
  g.values.charb = static_cast<double>(charb.item());
  g.values.recon = static_cast<double>(recon.item());
  g.values.vlb = vlb ? static_cast<double>(vlb->item()) : 0.0;
  return g;
}

inline std::string describe_steps(const std::vector<int>& steps) {
  std::string s = "[";
  for (std::size_t i = 0; i < steps.size(); ++i) s += (i ? "," : "") + std::to_string(steps[i]);
  return s + "]";
}

// Forward, backward, clip, AdamW update and EMA update. Throws NonFiniteLoss
// before touching the parameters if any loss term is not finite.
template <typename T>
StepLosses train_step(TrainState<T>& state, const TrainBatch<T>& batch, const NoiseSchedule& schedule) {
  auto& params = state.model->parameters();
  params.set_requires_grad(true);
  params.zero_grad();
  LossGraph<T> g = compute_losses(*state.model, batch, state.config, schedule, state.rng);
  const StepLosses& v = g.values;
  for (double x : {v.total, v.disent, v.recon, v.vlb})
    if (!std::isfinite(x)) {
      std::ostringstream os;
      os << "non-finite loss at iteration " << state.iteration << " (t=" << describe_steps(v.steps)
         << ", total=" << v.total << ", disent=" << v.disent << ", recon=" << v.recon << ", vlb=" << v.vlb << ")";
      throw NonFiniteLoss(os.str());
    }
  ag::backward(g.total);
  g.values.grad_norm = clip_grad_norm(params, state.config.grad_clip);
  state.optimizer->step(params, state.config.learning_rate);
  state.ema->update(params);
  params.zero_grad();
  ++state.iteration;
  return std::move(g.values);
}

// ---------------------------------------------------------------------------
// Training loop

struct LogRecord {
  long iteration = 0;
  double loss_total = 0, loss_disent = 0, loss_charb = 0, loss_vlb = 0, loss_recon = 0;
  std::optional<double> mu_entropy;
  std::string reconstruction;
  double weight_disent = 0, weight_recon = 0, weight_vlb = 0;
  double grad_norm = 0;
  std::vector<std::string> slice_ids;
};

inline nlohmann::json log_to_json(const LogRecord& r) {
  nlohmann::json j = {{"iteration", r.iteration},
                      {"loss_total", r.loss_total},
                      {"loss_disent", r.loss_disent},
                      {"loss_charb", r.loss_charb},
                      {"loss_vlb", r.loss_vlb},
                      {"mu_entropy", nullptr},
                      {"loss_recon", r.loss_recon},
                      {"reconstruction", r.reconstruction},
                      {"weights", {{"disent", r.weight_disent}, {"recon", r.weight_recon}, {"vlb", r.weight_vlb}}},
                      {"grad_norm", r.grad_norm},
                      {"slice_ids", r.slice_ids}};
  if (r.mu_entropy) j["mu_entropy"] = *r.mu_entropy;
  return j;
}

inline LogRecord log_from_json(const nlohmann::json& j) {
  LogRecord r;
  r.iteration = j.at("iteration").get<long>();
  r.loss_total = j.at("loss_total").get<double>();
  r.loss_disent = j.at("loss_disent").get<double>();
  r.loss_charb = j.at("loss_charb").get<double>();
  r.loss_vlb = j.at("loss_vlb").get<double>();
  if (!j.at("mu_entropy").is_null()) r.mu_entropy = j.at("mu_entropy").get<double>();
  r.loss_recon = j.at("loss_recon").get<double>();
  r.reconstruction = j.at("reconstruction").get<std::string>();
  r.weight_disent = j.at("weights").at("disent").get<double>();
  r.weight_recon = j.at("weights").at("recon").get<double>();
  r.weight_vlb = j.at("weights").at("vlb").get<double>();
  r.grad_norm = j.at("grad_norm").get<double>();
  r.slice_ids = j.at("slice_ids").get<std::vector<std::string>>();
  return r;
}

inline std::vector<LogRecord> read_log(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open log " + path.string());
  std::vector<LogRecord> out;
  std::string line;
  while (std::getline(is, line))
    if (!line.empty()) out.push_back(log_from_json(nlohmann::json::parse(line)));
  return out;
}

struct TrainOptions {
  fs::path out_dir;                  // checkpoint.bin and train_log.ndjson; empty disables both
  std::optional<fs::path> resume;    // continue from this checkpoint
  std::optional<long> stop_after;    // stop once this many iterations are complete
  std::function<void(const LogRecord&)> on_record;
};

// Curriculum-ordered batch ids for one iteration; the flag tells whether the
// entropy curriculum (rather than uniform sampling) produced them.
inline std::pair<std::vector<std::string>, std::optional<double>> batch_for_iteration(
    const EntropyIndex& index, const TrainConfig& config, long iteration) {
  CurriculumConfig cc{config.ablations.no_curriculum ? 0 : config.M, config.batch_size, config.curriculum_sigma,
                      mix_seed(config.seed, 3)};
  std::optional<double> mu;
  if (iteration < cc.M) mu = curriculum_mu(iteration, cc.M, index.e_min(), index.e_max());
  return {sample_batch_indices(index, iteration, cc), mu};
}

// Runs (or resumes) training over the manifest's train split.
template <typename T>
TrainState<T> train_loop(const Manifest& manifest, const fs::path& data_root, const TrainConfig& config,
                         const TrainOptions& options = {}) {
  config.validate();
  const auto records = manifest.split("train");
  if (records.empty()) throw InvalidArgument("manifest has no train split");
  std::map<std::string, SliceSample<T>> slices;
  std::vector<EntropyEntry> entries;
  for (const SliceRecord* r : records) {
    if (r->shape != Shape{static_cast<std::size_t>(config.model.in_resolution),
                          static_cast<std::size_t>(config.model.in_resolution)})
      throw ShapeMismatch("slice " + r->slice_id + " has shape " + shape_str(r->shape) +
                          ", model expects in_resolution " + std::to_string(config.model.in_resolution));
    slices.emplace(r->slice_id, load_slice<T>(*r, data_root));
    entries.push_back({r->slice_id, r->entropy_bits});
  }
  const EntropyIndex index(std::move(entries));

  TrainState<T> state = options.resume ? load_checkpoint<T>(*options.resume) : TrainState<T>(config);
  if (options.resume) {
    // Only the iteration budget may change across a resume.
    TrainConfig saved = state.config;
    saved.iterations = config.iterations;
    if (!(saved == config)) throw ConfigError("resume config differs from the checkpoint's");
    state.config = config;
  }
  const NoiseSchedule schedule = config.make_schedule();

  std::ofstream log;
  if (!options.out_dir.empty()) {
    fs::create_directories(options.out_dir);
    const fs::path log_path = options.out_dir / "train_log.ndjson";
    std::vector<std::string> kept;
    if (options.resume && fs::exists(log_path)) {
      // Drop records written after the checkpoint being resumed.
      std::ifstream is(log_path);
      std::string line;
      while (std::getline(is, line))
        if (!line.empty() && nlohmann::json::parse(line).at("iteration").get<long>() < state.iteration)
          kept.push_back(line);
    }
    log.open(log_path, std::ios::trunc);
    for (const auto& line : kept) log << line << '\n';
    if (!log) throw IoError("cannot open training log in " + options.out_dir.string());
  }
  const long stop = std::min(config.iterations, options.stop_after.value_or(config.iterations));
  const double w_disent = config.ablations.no_disent ? 0.0 : config.loss_weights.lambda1;
  const double w_vlb = config.model.learn_variance ? config.loss_weights.vlb_weight : 0.0;

  while (state.iteration < stop) {
    const long it = state.iteration;
    auto [ids, mu] = batch_for_iteration(index, config, it);
    std::vector<const SliceSample<T>*> members;
    for (const auto& id : ids) members.push_back(&slices.at(id));
    const StepLosses l = train_step(state, assemble_batch(members), schedule);

    LogRecord rec{it, l.total, l.disent, l.charb, l.vlb, l.recon, mu,
                  config.ablations.mse_instead_of_charbonnier ? "mse" : "charbonnier",
                  w_disent, config.loss_weights.lambda2, w_vlb, l.grad_norm, std::move(ids)};
    if (log.is_open()) log << log_to_json(rec).dump() << '\n' << std::flush;
    if (options.on_record) options.on_record(rec);
    const bool periodic = config.checkpoint_every > 0 && state.iteration % config.checkpoint_every == 0;
    if (!options.out_dir.empty() && (periodic || state.iteration == stop))
      save_checkpoint(state, options.out_dir / "checkpoint.bin");
  }
  return state;
}

}  // namespace discdiff
