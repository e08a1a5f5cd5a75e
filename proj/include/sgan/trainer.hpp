#pragma once

// Alternating critic/generator optimisation with ablation switches,
// deterministic batch streams, checkpoints and a per-iteration loss log.

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "sgan/core/optim.hpp"
#include "sgan/data.hpp"
#include "sgan/detector.hpp"
#include "sgan/discriminators.hpp"
#include "sgan/generators.hpp"
#include "sgan/losses.hpp"

namespace sgan {

struct Ablation {
  bool use_pam = true;
  bool use_cam = true;
  bool use_multiscale = true;
  bool use_detection_loss = true;

  /// Applies one of no-pam, no-cam, no-multiscale, no-det.
  void apply(const std::string& flag) {
    if (flag == "no-pam") use_pam = false;
    else if (flag == "no-cam") use_cam = false;
    else if (flag == "no-multiscale") use_multiscale = false;
    else if (flag == "no-det") use_detection_loss = false;
    else throw std::invalid_argument("unknown ablation '" + flag + "'");
  }
};

struct TrainConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  int batch_size = 1;
  int iterations = 0;
  LossWeights loss_weights;
  Ablation ablation;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // 0: only the initial and final checkpoints
  GeneratorConfig generator;
  CriticConfig critic;
  CropPolicy crop = CropPolicy::allrain();

  static TrainConfig toy() {
    TrainConfig c;
    c.generator = GeneratorConfig::toy();
    c.critic = CriticConfig::toy();
    c.crop = CropPolicy::toy();
    return c;
  }

  /// Generator configs with the ablation switches applied.
  GeneratorConfig forward_generator() const {
    GeneratorConfig g = generator;
    g.use_pam = generator.use_pam && ablation.use_pam;
    g.use_cam = generator.use_cam && ablation.use_cam;
    g.use_multiscale = generator.use_multiscale && ablation.use_multiscale;
    return g;
  }
  GeneratorConfig backward_generator() const { return backward_config(forward_generator()); }

  void validate() const {
    if (!(lr >= 0) || !std::isfinite(lr)) throw std::invalid_argument("lr must be finite and >= 0");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1))
      throw std::invalid_argument("Adam betas must lie in [0,1)");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (iterations < 0) throw std::invalid_argument("iterations must be >= 0");
    if (checkpoint_every < 0) throw std::invalid_argument("checkpoint_every must be >= 0");
    loss_weights.validate();
    forward_generator().validate();
    if (crop.crop_size % forward_generator().required_multiple() != 0)
      throw std::invalid_argument("crop size " + std::to_string(crop.crop_size) +
                                  " is not a multiple of " +
                                  std::to_string(forward_generator().required_multiple()));
    if (critic.output_size(crop.crop_size) < 1)
      throw std::invalid_argument("crop size too small for the critic");
  }
};

// ---- JSON ----------------------------------------------------------------------

namespace detail {
using ojson = nlohmann::ordered_json;

template <class V>
void read_field(const nlohmann::json& j, const char* key, V& out, std::vector<std::string>& seen) {
  seen.emplace_back(key);
  if (j.contains(key)) out = j.at(key).get<V>();
}

inline void reject_unknown(const nlohmann::json& j, const std::vector<std::string>& known,
                           const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::find(known.begin(), known.end(), it.key()) == known.end())
      throw std::invalid_argument("unknown config key '" + where + it.key() + "'");
}
}  // namespace detail

inline detail::ojson to_json(const TrainConfig& c) {
  detail::ojson pam = detail::ojson::array();
  for (const auto& f : c.generator.pam_scales) pam.push_back(f.str());
  return {
      {"lr", c.lr},
      {"beta1", c.beta1},
      {"beta2", c.beta2},
      {"batch_size", c.batch_size},
      {"iterations", c.iterations},
      {"seed", c.seed},
      {"checkpoint_every", c.checkpoint_every},
      {"loss_weights",
       {{"k1", c.loss_weights.k1},
        {"k2", c.loss_weights.k2},
        {"k3", c.loss_weights.k3},
        {"a", c.loss_weights.a},
        {"b", c.loss_weights.b},
        {"c", c.loss_weights.c}}},
      {"ablation",
       {{"use_pam", c.ablation.use_pam},
        {"use_cam", c.ablation.use_cam},
        {"use_multiscale", c.ablation.use_multiscale},
        {"use_detection_loss", c.ablation.use_detection_loss}}},
      {"generator",
       {{"in_channels", c.generator.in_channels},
        {"out_channels", c.generator.out_channels},
        {"base_channels", c.generator.base_channels},
        {"num_residual_blocks_g1", c.generator.num_residual_blocks_g1},
        {"num_residual_blocks_g2", c.generator.num_residual_blocks_g2},
        {"downsample_scale", c.generator.downsample_scale.str()},
        {"use_multiscale", c.generator.use_multiscale},
        {"use_pam", c.generator.use_pam},
        {"use_cam", c.generator.use_cam},
        {"pam_scales", pam}}},
      {"critic",
       {{"in_channels", c.critic.in_channels},
        {"base_channels", c.critic.base_channels},
        {"num_downsample", c.critic.num_downsample}}},
      {"crop",
       {{"resize_width", c.crop.resize_width ? detail::ojson(*c.crop.resize_width) : detail::ojson()},
        {"crop_size", c.crop.crop_size},
        {"mode", c.crop.mode == CropMode::random ? "random" : "center"}}},
  };
}

/// Reads a config; missing keys keep the defaults of `base`, unknown keys are
/// rejected.
inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c = {}) {
  std::vector<std::string> seen;
  detail::read_field(j, "lr", c.lr, seen);
  detail::read_field(j, "beta1", c.beta1, seen);
  detail::read_field(j, "beta2", c.beta2, seen);
  detail::read_field(j, "batch_size", c.batch_size, seen);
  detail::read_field(j, "iterations", c.iterations, seen);
  detail::read_field(j, "seed", c.seed, seen);
  detail::read_field(j, "checkpoint_every", c.checkpoint_every, seen);
  seen.insert(seen.end(), {"loss_weights", "ablation", "generator", "critic", "crop", "profile"});
  detail::reject_unknown(j, seen, "");
  if (j.contains("loss_weights")) {
    const auto& w = j.at("loss_weights");
    std::vector<std::string> s;
    detail::read_field(w, "k1", c.loss_weights.k1, s);
    detail::read_field(w, "k2", c.loss_weights.k2, s);
    detail::read_field(w, "k3", c.loss_weights.k3, s);
    detail::read_field(w, "a", c.loss_weights.a, s);
    detail::read_field(w, "b", c.loss_weights.b, s);
    detail::read_field(w, "c", c.loss_weights.c, s);
    detail::reject_unknown(w, s, "loss_weights.");
  }
  if (j.contains("ablation")) {
    const auto& a = j.at("ablation");
    std::vector<std::string> s;
    detail::read_field(a, "use_pam", c.ablation.use_pam, s);
    detail::read_field(a, "use_cam", c.ablation.use_cam, s);
    detail::read_field(a, "use_multiscale", c.ablation.use_multiscale, s);
    detail::read_field(a, "use_detection_loss", c.ablation.use_detection_loss, s);
    detail::reject_unknown(a, s, "ablation.");
  }
  if (j.contains("generator")) {
    const auto& g = j.at("generator");
    std::vector<std::string> s;
    detail::read_field(g, "in_channels", c.generator.in_channels, s);
    detail::read_field(g, "out_channels", c.generator.out_channels, s);
    detail::read_field(g, "base_channels", c.generator.base_channels, s);
    detail::read_field(g, "num_residual_blocks_g1", c.generator.num_residual_blocks_g1, s);
    detail::read_field(g, "num_residual_blocks_g2", c.generator.num_residual_blocks_g2, s);
    detail::read_field(g, "use_multiscale", c.generator.use_multiscale, s);
    detail::read_field(g, "use_pam", c.generator.use_pam, s);
    detail::read_field(g, "use_cam", c.generator.use_cam, s);
    s.insert(s.end(), {"downsample_scale", "pam_scales"});
    detail::reject_unknown(g, s, "generator.");
    if (g.contains("downsample_scale"))
      c.generator.downsample_scale = Fraction::parse(g.at("downsample_scale").get<std::string>());
    if (g.contains("pam_scales")) {
      c.generator.pam_scales.clear();
      for (const auto& f : g.at("pam_scales")) c.generator.pam_scales.push_back(Fraction::parse(f.get<std::string>()));
    }
  }
  if (j.contains("critic")) {
    const auto& d = j.at("critic");
    std::vector<std::string> s;
    detail::read_field(d, "in_channels", c.critic.in_channels, s);
    detail::read_field(d, "base_channels", c.critic.base_channels, s);
    detail::read_field(d, "num_downsample", c.critic.num_downsample, s);
    detail::reject_unknown(d, s, "critic.");
  }
  if (j.contains("crop")) {
    const auto& p = j.at("crop");
    std::vector<std::string> s{"resize_width", "mode"};
    detail::read_field(p, "crop_size", c.crop.crop_size, s);
    detail::reject_unknown(p, s, "crop.");
    if (p.contains("resize_width"))
      c.crop.resize_width = p.at("resize_width").is_null() ? std::nullopt
                                                           : std::optional<int>(p.at("resize_width").get<int>());
    if (p.contains("mode")) {
      const auto m = p.at("mode").get<std::string>();
      if (m != "random" && m != "center") throw std::invalid_argument("crop.mode must be random or center");
      c.crop.mode = m == "random" ? CropMode::random : CropMode::center;
    }
  }
  return c;
}

/// "toy" starts from the 64px profile, anything else from the full-size defaults.
inline TrainConfig train_config_from_json_with_profile(const nlohmann::json& j) {
  const std::string profile = j.value("profile", "full");
  if (profile != "toy" && profile != "full") throw std::invalid_argument("profile must be toy or full");
  return train_config_from_json(j, profile == "toy" ? TrainConfig::toy() : TrainConfig{});
}

// ---- state ------------------------------------------------------------------------

template <class T>
struct TrainState {
  TrainConfig cfg;
  GeneratorPair<T> generators;
  PatchCritic<T> critic_adverse;  // judges G(x) against real y
  PatchCritic<T> critic_normal;   // judges F(y) against real x
  optim::Adam<T> opt_generators;
  optim::Adam<T> opt_critics;
  std::int64_t iteration = 0;
  LossReport running;  // mean over all completed iterations

  nn::ParamList<T> generator_parameters() const {
    nn::ParamList<T> p;
    generators.normal_to_adverse.collect("G.", p);
    generators.adverse_to_normal.collect("F.", p);
    return p;
  }
  nn::ParamList<T> critic_parameters() const {
    nn::ParamList<T> p;
    critic_adverse.collect("DY.", p);
    critic_normal.collect("DX.", p);
    return p;
  }
};

/// Fresh state. Parameters are drawn in a fixed order (G, F, D_Y, D_X) from
/// one stream seeded by cfg.seed.
template <class T>
TrainState<T> init_state(const TrainConfig& cfg) {
  cfg.validate();
  nn::Rng rng(cfg.seed);
  auto gens = build_pair<T>(cfg.forward_generator(), cfg.backward_generator(), rng);
  PatchCritic<T> dy(cfg.critic, rng), dx(cfg.critic, rng);
  TrainState<T> s{cfg, std::move(gens), std::move(dy), std::move(dx), {}, {}, 0, {}};
  const optim::AdamOptions opt{cfg.lr, cfg.beta1, cfg.beta2, 1e-8};
  s.opt_generators = optim::Adam<T>(s.generator_parameters(), opt);
  s.opt_critics = optim::Adam<T>(s.critic_parameters(), opt);
  return s;
}

template <class T>
struct ForwardPass {
  Var<T> x, y;    // real
  Var<T> fake_y;  // G(x)
  Var<T> fake_x;  // F(y)
};

template <class T>
ForwardPass<T> translate(const TrainState<T>& s, const Tensor<T>& x, const Tensor<T>& y) {
  ForwardPass<T> f{Var<T>(x), Var<T>(y), {}, {}};
  f.fake_y = s.generators.normal_to_adverse(f.x);
  f.fake_x = s.generators.adverse_to_normal(f.y);
  return f;
}

/// Least-squares critic objective on detached fakes, both directions.
template <class T>
Var<T> critic_objective(const TrainState<T>& s, const ForwardPass<T>& f) {
  auto ly = adversarial_loss(s.critic_adverse(f.y), s.critic_adverse(f.fake_y.detach()),
                             AdversarialRole::critic);
  auto lx = adversarial_loss(s.critic_normal(f.x), s.critic_normal(f.fake_x.detach()),
                             AdversarialRole::critic);
  return ops::add(ly, lx);
}

template <class T>
struct GeneratorObjective {
  Var<T> total;
  LossReport report;
};

/// k1*L_det(G(x)) + k2*L_adv + k3*L_cyc. With the detection loss disabled the
/// detector is not called and every det field is 0.
template <class T>
GeneratorObjective<T> generator_objective(const TrainState<T>& s, const ForwardPass<T>& f,
                                          const std::vector<BoxSet>& labels,
                                          const Detector<T>* detector) {
  const LossWeights& w = s.cfg.loss_weights;
  auto adv = ops::add(adversarial_loss(Var<T>(), s.critic_adverse(f.fake_y), AdversarialRole::generator),
                      adversarial_loss(Var<T>(), s.critic_normal(f.fake_x), AdversarialRole::generator));
  auto cyc = cycle_loss(f.x, s.generators.adverse_to_normal(f.fake_y), f.y,
                        s.generators.normal_to_adverse(f.fake_x));
  auto total = ops::add(ops::mul_scalar(adv, static_cast<T>(w.k2)), ops::mul_scalar(cyc, static_cast<T>(w.k3)));
  double ciou = 0, cls = 0, conf = 0;
  if (s.cfg.ablation.use_detection_loss) {
    if (!detector) throw std::invalid_argument("detection loss enabled but no detector supplied");
    auto d = detection_loss(f.fake_y, labels, *detector, MatchPolicy::greedy_iou);
    ciou = static_cast<double>(d.ciou.value().item());
    cls = static_cast<double>(d.cls.value().item());
    conf = static_cast<double>(d.conf.value().item());
    total = ops::add(total, ops::mul_scalar(weighted_detection(d, w), static_cast<T>(w.k1)));
  }
  auto report = total_loss(ciou, cls, conf, static_cast<double>(adv.value().item()),
                           static_cast<double>(cyc.value().item()), w);
  return {total, report};
}

namespace detail {
template <class T>
std::vector<Tensor<T>> snapshot(const nn::ParamList<T>& params) {
  std::vector<Tensor<T>> out;
  for (const auto& p : params) out.push_back(p.var.value());
  return out;
}
template <class T>
void restore(const nn::ParamList<T>& params, std::vector<Tensor<T>> values) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto v = params[i].var;
    v.mutable_value() = std::move(values[i]);
  }
}
}  // namespace detail

/// One iteration: critic update on detached fakes, then a generator update
/// against the updated critics. On a non-finite loss the state is left as it
/// was before the call and NonFiniteLoss names the component.
template <class T>
LossReport train_step(TrainState<T>& s, const Tensor<T>& x, const std::vector<BoxSet>& labels,
                      const Tensor<T>& y, const Detector<T>* detector) {
  auto f = translate(s, x, y);

  s.opt_critics.zero_grad();
  auto lc = critic_objective(s, f);
  const double critic_value = static_cast<double>(lc.value().item());
  if (!std::isfinite(critic_value)) throw NonFiniteLoss("critic");
  const auto critic_params = s.critic_parameters();
  auto critic_backup = detail::snapshot(critic_params);
  auto opt_backup = s.opt_critics;
  backward(lc);
  s.opt_critics.step();

  s.opt_generators.zero_grad();
  GeneratorObjective<T> g;
  try {
    g = generator_objective(s, f, labels, detector);
    if (!std::isfinite(static_cast<double>(g.total.value().item()))) throw NonFiniteLoss("total");
  } catch (const NonFiniteLoss&) {
    detail::restore(critic_params, std::move(critic_backup));
    s.opt_critics = std::move(opt_backup);
    s.opt_critics.zero_grad();
    throw;
  }
  backward(g.total);
  s.opt_generators.step();
  s.opt_critics.zero_grad();  // drop gradients the generator pass left on the critics

  g.report.critic = critic_value;
  ++s.iteration;
  const double k = 1.0 / static_cast<double>(s.iteration);
  auto upd = [k](double& r, double v) { r += (v - r) * k; };
  upd(s.running.total, g.report.total);
  upd(s.running.det, g.report.det);
  upd(s.running.adv, g.report.adv);
  upd(s.running.cyc, g.report.cyc);
  upd(s.running.det_ciou, g.report.det_ciou);
  upd(s.running.det_cls, g.report.det_cls);
  upd(s.running.det_conf, g.report.det_conf);
  upd(s.running.critic, g.report.critic);
  return g.report;
}

/// Per-iteration sampling seed; independent of how the run was split by resumes.
inline std::uint64_t batch_seed(std::uint64_t seed, std::int64_t iteration) {
  auto mix = [](std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  };
  return mix(seed ^ mix(static_cast<std::uint64_t>(iteration)));
}

// ---- checkpoints ------------------------------------------------------------------
//
// <dir>/manifest.json, generators.bin, critics.bin, opt_generators.bin,
// opt_critics.bin.

inline detail::ojson report_json(const LossReport& r) {
  return {{"total", r.total},       {"det", r.det},         {"adv", r.adv},
          {"cyc", r.cyc},           {"det_ciou", r.det_ciou}, {"det_cls", r.det_cls},
          {"det_conf", r.det_conf}, {"critic", r.critic}};
}

inline LossReport report_from_json(const nlohmann::json& j) {
  LossReport r;
  r.total = j.at("total");
  r.det = j.at("det");
  r.adv = j.at("adv");
  r.cyc = j.at("cyc");
  r.det_ciou = j.at("det_ciou");
  r.det_cls = j.at("det_cls");
  r.det_conf = j.at("det_conf");
  r.critic = j.at("critic");
  return r;
}

template <class T>
void save_checkpoint(const std::filesystem::path& dir, const TrainState<T>& s) {
  std::filesystem::create_directories(dir);
  nn::save_parameters<T>((dir / "generators.bin").string(), s.generator_parameters());
  nn::save_parameters<T>((dir / "critics.bin").string(), s.critic_parameters());
  nn::save_tensors<T>((dir / "opt_generators.bin").string(), s.opt_generators.state_items());
  nn::save_tensors<T>((dir / "opt_critics.bin").string(), s.opt_critics.state_items());
  detail::ojson m = {{"format", "sgan-checkpoint-v1"},
                     {"scalar_bytes", sizeof(T)},
                     {"iteration", s.iteration},
                     {"adam_steps_generators", s.opt_generators.steps()},
                     {"adam_steps_critics", s.opt_critics.steps()},
                     {"running", report_json(s.running)},
                     {"config", to_json(s.cfg)}};
  std::ofstream(dir / "manifest.json") << m.dump(2) << '\n';
}

inline TrainConfig checkpoint_config(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw std::runtime_error("not a checkpoint directory: " + dir.string());
  const auto m = nlohmann::json::parse(is);
  if (m.value("format", "") != "sgan-checkpoint-v1")
    throw std::runtime_error(dir.string() + ": unknown checkpoint format");
  return train_config_from_json(m.at("config"));
}

template <class T>
TrainState<T> load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw std::runtime_error("not a checkpoint directory: " + dir.string());
  const auto m = nlohmann::json::parse(is);
  if (m.value("format", "") != "sgan-checkpoint-v1")
    throw std::runtime_error(dir.string() + ": unknown checkpoint format");
  if (m.at("scalar_bytes").get<std::size_t>() != sizeof(T))
    throw std::runtime_error(dir.string() + ": checkpoint scalar width differs");
  auto s = init_state<T>(train_config_from_json(m.at("config")));
  nn::load_parameters<T>((dir / "generators.bin").string(), s.generator_parameters());
  nn::load_parameters<T>((dir / "critics.bin").string(), s.critic_parameters());
  s.opt_generators.restore(nn::load_tensors<T>((dir / "opt_generators.bin").string()),
                           m.at("adam_steps_generators").get<std::int64_t>());
  s.opt_critics.restore(nn::load_tensors<T>((dir / "opt_critics.bin").string()),
                        m.at("adam_steps_critics").get<std::int64_t>());
  s.iteration = m.at("iteration").get<std::int64_t>();
  s.running = report_from_json(m.at("running"));
  return s;
}

inline std::filesystem::path checkpoint_dir(const std::filesystem::path& run_dir, std::int64_t it) {
  char name[32];
  std::snprintf(name, sizeof(name), "ckpt_%08" PRId64, it);
  return run_dir / "checkpoints" / name;
}

/// Newest checkpoint under run_dir, if any.
inline std::optional<std::filesystem::path> latest_checkpoint(const std::filesystem::path& run_dir) {
  const auto root = run_dir / "checkpoints";
  if (!std::filesystem::is_directory(root)) return std::nullopt;
  std::optional<std::filesystem::path> best;
  for (const auto& e : std::filesystem::directory_iterator(root))
    if (e.is_directory() && std::filesystem::exists(e.path() / "manifest.json") &&
        (!best || e.path().filename() > best->filename()))
      best = e.path();
  return best;
}

// ---- loss log ----------------------------------------------------------------------

inline const char* kLossLogHeader = "iteration,total,det,adv,cyc,det_ciou,det_cls,det_conf,critic";

inline std::string loss_log_row(std::int64_t it, const LossReport& r) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), "%" PRId64 ",%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g", it,
                r.total, r.det, r.adv, r.cyc, r.det_ciou, r.det_cls, r.det_conf, r.critic);
  return buf;
}

struct LossLogRow {
  std::int64_t iteration = 0;
  LossReport report;
};

inline std::vector<LossLogRow> read_loss_log(const std::filesystem::path& p) {
  std::ifstream is(p);
  if (!is) throw std::runtime_error("cannot read loss log " + p.string());
  std::string line;
  std::getline(is, line);
  if (line != kLossLogHeader) throw std::runtime_error(p.string() + ": unexpected loss log header");
  std::vector<LossLogRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    LossLogRow row;
    auto& r = row.report;
    if (std::sscanf(line.c_str(), "%" SCNd64 ",%lf,%lf,%lf,%lf,%lf,%lf,%lf,%lf", &row.iteration, &r.total,
                    &r.det, &r.adv, &r.cyc, &r.det_ciou, &r.det_cls, &r.det_conf, &r.critic) != 9)
      throw std::runtime_error(p.string() + ": malformed row '" + line + "'");
    rows.push_back(row);
  }
  return rows;
}

// ---- driver ---------------------------------------------------------------------------

struct RunOptions {
  bool resume = true;
  /// Stop after this many total iterations without finishing the run (for
  /// interruption tests); negative means run to cfg.iterations.
  std::int64_t stop_after = -1;
  std::function<void(std::int64_t, const LossReport&)> on_step;
};

/// Runs cfg.iterations steps into run_dir, resuming from the newest
/// checkpoint when present. Returns the final checkpoint directory.
template <class T>
std::filesystem::path run_training(const TrainConfig& cfg, const DomainDataset& src,
                                   const DomainDataset& tgt, const Detector<T>* detector,
                                   const std::filesystem::path& run_dir, const RunOptions& opts = {}) {
  cfg.validate();
  if (src.empty() || tgt.empty()) throw std::invalid_argument("run_training: empty dataset");
  if (cfg.ablation.use_detection_loss) {
    if (!detector) throw std::invalid_argument("run_training: detection loss needs a detector");
    src.require_labels();
  }
  std::filesystem::create_directories(run_dir);
  const auto log_path = run_dir / "loss_log.csv";

  std::optional<TrainState<T>> state;
  if (opts.resume)
    if (auto last = latest_checkpoint(run_dir)) {
      state.emplace(load_checkpoint<T>(*last));
      if (to_json(state->cfg) != to_json(cfg)) {
        // Only the run length may change on resume.
        TrainConfig a = state->cfg, b = cfg;
        a.iterations = b.iterations = 0;
        if (to_json(a) != to_json(b))
          throw std::runtime_error("checkpoint in " + run_dir.string() + " was made with a different config");
        state->cfg.iterations = cfg.iterations;
      }
    }
  if (!state) {
    state.emplace(init_state<T>(cfg));
    std::ofstream(log_path, std::ios::trunc) << kLossLogHeader << '\n';
    save_checkpoint(checkpoint_dir(run_dir, 0), *state);
  } else {
    // Drop log rows written after the checkpoint we resume from.
    std::vector<std::string> keep;
    if (std::ifstream is{log_path}) {
      std::string line;
      std::getline(is, line);
      while (std::getline(is, line))
        if (!line.empty() && std::stoll(line.substr(0, line.find(','))) <= state->iteration)
          keep.push_back(line);
    }
    std::ofstream os(log_path, std::ios::trunc);
    os << kLossLogHeader << '\n';
    for (const auto& l : keep) os << l << '\n';
  }

  TrainState<T>& s = *state;
  std::ofstream log(log_path, std::ios::app);
  const std::int64_t end = opts.stop_after >= 0 ? std::min<std::int64_t>(opts.stop_after, cfg.iterations)
                                                : cfg.iterations;
  while (s.iteration < end) {
    const auto batch = load_pair_batch<T>(src, tgt, cfg.crop, batch_seed(cfg.seed, s.iteration), cfg.batch_size);
    const auto report = train_step(s, batch.x, batch.labels, batch.y, detector);
    log << loss_log_row(s.iteration, report) << '\n';
    if (opts.on_step) opts.on_step(s.iteration, report);
    if (cfg.checkpoint_every > 0 && s.iteration % cfg.checkpoint_every == 0) {
      log.flush();
      save_checkpoint(checkpoint_dir(run_dir, s.iteration), s);
    }
  }
  log.flush();
  const auto final_dir = checkpoint_dir(run_dir, s.iteration);
  if (!std::filesystem::exists(final_dir / "manifest.json")) save_checkpoint(final_dir, s);
  return final_dir;
}

}  // namespace sgan
