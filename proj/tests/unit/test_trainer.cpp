#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "sgan/trainer.hpp"

using namespace sgan;
namespace fs = std::filesystem;

namespace {

TrainConfig small() {
  auto c = TrainConfig::toy();
  c.generator.base_channels = 4;
  c.generator.num_residual_blocks_g1 = 1;
  c.generator.num_residual_blocks_g2 = 1;
  c.generator.pam_scales = {Fraction{1, 1}, Fraction{1, 2}};
  c.critic.base_channels = 4;
  c.crop.crop_size = 32;
  c.iterations = 6;
  c.seed = 3;
  return c;
}

const DomainDataset& day() {
  static const auto d = synth_toy_domain(8, false, 1);
  return d;
}
const DomainDataset& night() {
  static const auto d = synth_toy_domain(8, true, 2);
  return d;
}

std::shared_ptr<ToyDetector<float>> untrained_detector() {
  nn::Rng r(1);
  DetectorConfig dc;
  dc.image_size = 32;
  return std::make_shared<ToyDetector<float>>(dc, r);
}

/// Forwards to a real detector and counts calls.
class CountingDetector : public Detector<float> {
 public:
  explicit CountingDetector(std::shared_ptr<const ToyDetector<float>> d) : inner_(std::move(d)) {}
  DetectorMaps<float> forward(const Var<float>& images) const override {
    ++calls;
    return inner_.forward(images);
  }
  const DetectorConfig& config() const override { return inner_.config(); }
  mutable int calls = 0;

 private:
  FrozenDetector<float> inner_;
};

/// Produces NaN objectness logits.
class PoisonedDetector : public Detector<float> {
 public:
  explicit PoisonedDetector(std::shared_ptr<const ToyDetector<float>> d) : inner_(std::move(d)) {}
  DetectorMaps<float> forward(const Var<float>& images) const override {
    auto m = inner_.forward(images);
    m.objectness = ops::mul_scalar(m.objectness, std::numeric_limits<float>::quiet_NaN());
    return m;
  }
  const DetectorConfig& config() const override { return inner_.config(); }

 private:
  FrozenDetector<float> inner_;
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

fs::path fresh_dir(const std::string& name) {
  const auto d = fs::path(::testing::TempDir()) / ("sgan_trainer_" + name);
  fs::remove_all(d);
  return d;
}

void expect_params_equal(const nn::ParamList<float>& a, const nn::ParamList<float>& b) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(a[i].var.value() == b[i].var.value()) << a[i].name;
}

}  // namespace

// ---- config ----------------------------------------------------------------------

TEST(Ablation, FlagsSwitchOffExactlyOneComponent) {
  for (const std::string f : {"no-pam", "no-cam", "no-multiscale", "no-det"}) {
    Ablation a;
    a.apply(f);
    EXPECT_EQ(a.use_pam, f != "no-pam");
    EXPECT_EQ(a.use_cam, f != "no-cam");
    EXPECT_EQ(a.use_multiscale, f != "no-multiscale");
    EXPECT_EQ(a.use_detection_loss, f != "no-det");
  }
  Ablation a;
  EXPECT_THROW(a.apply("no-critic"), std::invalid_argument);
}

TEST(TrainConfig, AblationReachesTheGeneratorConfigs) {
  auto c = small();
  c.ablation.apply("no-multiscale");
  c.ablation.apply("no-cam");
  EXPECT_FALSE(c.forward_generator().use_multiscale);
  EXPECT_FALSE(c.forward_generator().use_cam);
  EXPECT_TRUE(c.forward_generator().use_pam);
  EXPECT_FALSE(c.backward_generator().use_multiscale);
}

TEST(TrainConfig, JsonRoundTripIsLossless) {
  auto c = small();
  c.lr = 1.25e-4;
  c.loss_weights.k1 = 0.6;
  c.ablation.use_cam = false;
  c.generator.downsample_scale = {1, 8};
  c.crop.resize_width = 100;
  c.crop.mode = CropMode::center;
  const auto j = to_json(c);
  EXPECT_EQ(to_json(train_config_from_json(nlohmann::json::parse(j.dump()))), j);
}

TEST(TrainConfig, JsonRejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(train_config_from_json(nlohmann::json{{"learning_rate", 1}}), std::invalid_argument);
  EXPECT_THROW(train_config_from_json(nlohmann::json{{"ablation", {{"use_gan", false}}}}), std::invalid_argument);
  EXPECT_THROW(train_config_from_json(nlohmann::json{{"crop", {{"mode", "diagonal"}}}}), std::invalid_argument);
  EXPECT_THROW(train_config_from_json_with_profile(nlohmann::json{{"profile", "huge"}}), std::invalid_argument);
  const auto toy = train_config_from_json_with_profile(nlohmann::json{{"profile", "toy"}, {"iterations", 7}});
  EXPECT_EQ(toy.crop.crop_size, 64);
  EXPECT_EQ(toy.iterations, 7);
  EXPECT_EQ(train_config_from_json_with_profile(nlohmann::json::object()).crop.crop_size, 360);
}

TEST(TrainConfig, ValidationCatchesInconsistentSettings) {
  auto c = small();
  c.lr = -1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = small();
  c.crop.crop_size = 36;  // not a multiple of the generator's required side
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = small();
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = small();
  c.beta1 = 1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  EXPECT_NO_THROW(small().validate());
}

// ---- single steps -------------------------------------------------------------------

TEST(TrainStep, ZeroLearningRateLeavesEveryParameterBitIdentical) {
  auto c = small();
  c.lr = 0;
  auto s = init_state<float>(c);
  const auto g0 = detail::snapshot(s.generator_parameters());
  const auto d0 = detail::snapshot(s.critic_parameters());
  FrozenDetector<float> det(untrained_detector());
  const auto b = load_pair_batch<float>(day(), night(), c.crop, 1);
  const auto r = train_step(s, b.x, b.labels, b.y, &det);
  EXPECT_TRUE(std::isfinite(r.total));
  const auto g1 = s.generator_parameters(), d1 = s.critic_parameters();
  for (std::size_t i = 0; i < g0.size(); ++i) EXPECT_TRUE(g1[i].var.value() == g0[i]) << g1[i].name;
  for (std::size_t i = 0; i < d0.size(); ++i) EXPECT_TRUE(d1[i].var.value() == d0[i]) << d1[i].name;
  EXPECT_EQ(s.iteration, 1);
}

TEST(TrainStep, ReportHonoursLossIdentities) {
  auto c = small();
  auto s = init_state<float>(c);
  FrozenDetector<float> det(untrained_detector());
  const auto b = load_pair_batch<float>(day(), night(), c.crop, 2);
  const auto r = train_step(s, b.x, b.labels, b.y, &det);
  const auto& w = c.loss_weights;
  EXPECT_NEAR(r.det, w.a * r.det_ciou + w.b * r.det_cls + w.c * r.det_conf, 1e-9);
  EXPECT_NEAR(r.total, w.k1 * r.det + w.k2 * r.adv + w.k3 * r.cyc, 1e-9);
  EXPECT_GT(r.det, 0.0);
  EXPECT_GT(r.cyc, 0.0);
  EXPECT_GE(r.critic, 0.0);
}

TEST(TrainStep, DetectionOffNeverCallsTheDetector) {
  auto c = small();
  c.ablation.use_detection_loss = false;
  auto s = init_state<float>(c);
  CountingDetector det(untrained_detector());
  const auto b = load_pair_batch<float>(day(), night(), c.crop, 3);
  const auto r = train_step(s, b.x, b.labels, b.y, &det);
  EXPECT_EQ(det.calls, 0);
  EXPECT_EQ(r.det, 0.0);
  EXPECT_EQ(r.det_ciou, 0.0);
  EXPECT_NEAR(r.total, c.loss_weights.k2 * r.adv + c.loss_weights.k3 * r.cyc, 1e-9);
  EXPECT_NO_THROW(train_step(s, b.x, b.labels, b.y, static_cast<const Detector<float>*>(nullptr)));

  c.ablation.use_detection_loss = true;
  auto on = init_state<float>(c);
  train_step(on, b.x, b.labels, b.y, &det);
  EXPECT_GT(det.calls, 0);
  EXPECT_THROW(train_step(on, b.x, b.labels, b.y, static_cast<const Detector<float>*>(nullptr)),
               std::invalid_argument);
}

TEST(TrainStep, NonFiniteLossNamesComponentAndRestoresState) {
  const auto c = small();
  auto s = init_state<float>(c);
  const auto g0 = detail::snapshot(s.generator_parameters());
  const auto d0 = detail::snapshot(s.critic_parameters());
  PoisonedDetector bad(untrained_detector());
  const auto b = load_pair_batch<float>(day(), night(), c.crop, 4);
  try {
    train_step(s, b.x, b.labels, b.y, &bad);
    FAIL() << "expected NonFiniteLoss";
  } catch (const NonFiniteLoss& e) {
    EXPECT_EQ(e.component(), "det_conf");
  }
  EXPECT_EQ(s.iteration, 0);
  const auto g1 = s.generator_parameters(), d1 = s.critic_parameters();
  for (std::size_t i = 0; i < g0.size(); ++i) EXPECT_TRUE(g1[i].var.value() == g0[i]) << g1[i].name;
  for (std::size_t i = 0; i < d0.size(); ++i) EXPECT_TRUE(d1[i].var.value() == d0[i]) << d1[i].name;

  // Optimiser moments were rolled back too: the next good step matches a fresh state.
  FrozenDetector<float> good(untrained_detector());
  auto fresh = init_state<float>(c);
  const auto r1 = train_step(s, b.x, b.labels, b.y, &good);
  const auto r2 = train_step(fresh, b.x, b.labels, b.y, &good);
  EXPECT_EQ(r1.total, r2.total);
  expect_params_equal(s.generator_parameters(), fresh.generator_parameters());
  expect_params_equal(s.critic_parameters(), fresh.critic_parameters());
}

TEST(BatchSeed, DependsOnSeedAndIterationOnly) {
  EXPECT_EQ(batch_seed(3, 10), batch_seed(3, 10));
  EXPECT_NE(batch_seed(3, 10), batch_seed(3, 11));
  EXPECT_NE(batch_seed(3, 10), batch_seed(4, 10));
}

// ---- checkpoints and runs -------------------------------------------------------------

TEST(Checkpoint, SaveLoadRestoresParametersOptimiserAndCounters) {
  const auto c = small();
  auto s = init_state<float>(c);
  FrozenDetector<float> det(untrained_detector());
  for (int i = 0; i < 2; ++i) {
    const auto b = load_pair_batch<float>(day(), night(), c.crop, 10 + i);
    train_step(s, b.x, b.labels, b.y, &det);
  }
  const auto dir = fresh_dir("ckpt");
  save_checkpoint(dir, s);
  auto t = load_checkpoint<float>(dir);
  EXPECT_EQ(t.iteration, 2);
  EXPECT_EQ(t.running.total, s.running.total);
  EXPECT_EQ(to_json(t.cfg), to_json(s.cfg));
  expect_params_equal(s.generator_parameters(), t.generator_parameters());
  expect_params_equal(s.critic_parameters(), t.critic_parameters());
  const auto b = load_pair_batch<float>(day(), night(), c.crop, 20);
  EXPECT_EQ(train_step(s, b.x, b.labels, b.y, &det).total, train_step(t, b.x, b.labels, b.y, &det).total);
  EXPECT_THROW(load_checkpoint<double>(dir), std::runtime_error);
  EXPECT_THROW(load_checkpoint<float>(fresh_dir("nothing")), std::runtime_error);
}

TEST(RunTraining, SameSeedGivesByteIdenticalLossLogs) {
  const auto c = small();
  FrozenDetector<float> det(untrained_detector());
  const auto a = fresh_dir("det_a"), b = fresh_dir("det_b");
  run_training<float>(c, day(), night(), &det, a);
  run_training<float>(c, day(), night(), &det, b);
  const auto la = slurp(a / "loss_log.csv");
  EXPECT_EQ(la, slurp(b / "loss_log.csv"));
  const auto rows = read_loss_log(a / "loss_log.csv");
  ASSERT_EQ(rows.size(), 6u);
  EXPECT_EQ(rows.front().iteration, 1);
  EXPECT_EQ(rows.back().iteration, 6);

  auto other = c;
  other.seed = 4;
  const auto o = fresh_dir("det_other");
  run_training<float>(other, day(), night(), &det, o);
  EXPECT_NE(la, slurp(o / "loss_log.csv"));
}

TEST(RunTraining, LogRowsRoundTripReportedLosses) {
  auto c = small();
  c.iterations = 3;
  FrozenDetector<float> det(untrained_detector());
  std::vector<LossReport> seen;
  RunOptions ro;
  ro.on_step = [&](std::int64_t, const LossReport& r) { seen.push_back(r); };
  const auto dir = fresh_dir("log");
  run_training<float>(c, day(), night(), &det, dir, ro);
  const auto rows = read_loss_log(dir / "loss_log.csv");
  ASSERT_EQ(rows.size(), seen.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i].report.total, seen[i].total);
    EXPECT_EQ(rows[i].report.cyc, seen[i].cyc);
    EXPECT_EQ(rows[i].report.critic, seen[i].critic);
  }
}

TEST(RunTraining, InterruptedRunResumesToTheSameResult) {
  auto c = small();
  c.checkpoint_every = 3;
  FrozenDetector<float> det(untrained_detector());
  const auto whole = fresh_dir("whole"), split = fresh_dir("split");
  const auto final_whole = run_training<float>(c, day(), night(), &det, whole);

  RunOptions stop;
  stop.stop_after = 5;
  run_training<float>(c, day(), night(), &det, split, stop);
  // Simulate a crash after iteration 5 was logged but before its checkpoint.
  fs::remove_all(checkpoint_dir(split, 5));
  const auto final_split = run_training<float>(c, day(), night(), &det, split);

  EXPECT_EQ(slurp(whole / "loss_log.csv"), slurp(split / "loss_log.csv"));
  auto a = load_checkpoint<float>(final_whole), b = load_checkpoint<float>(final_split);
  EXPECT_EQ(b.iteration, 6);
  const auto pa = a.generator_parameters(), pb = b.generator_parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    const auto& va = pa[i].var.value();
    const auto& vb = pb[i].var.value();
    for (std::size_t k = 0; k < va.size(); ++k) ASSERT_NEAR(va[k], vb[k], 1e-6) << pa[i].name;
  }
}

TEST(RunTraining, ResumeRejectsAChangedConfigButAllowsLongerRuns) {
  auto c = small();
  c.iterations = 2;
  FrozenDetector<float> det(untrained_detector());
  const auto dir = fresh_dir("resume_cfg");
  run_training<float>(c, day(), night(), &det, dir);
  auto changed = c;
  changed.lr = 1e-3;
  EXPECT_THROW(run_training<float>(changed, day(), night(), &det, dir), std::runtime_error);
  auto longer = c;
  longer.iterations = 3;
  const auto last = run_training<float>(longer, day(), night(), &det, dir);
  EXPECT_EQ(load_checkpoint<float>(last).iteration, 3);
  EXPECT_EQ(read_loss_log(dir / "loss_log.csv").size(), 3u);
}

TEST(RunTraining, DetectionLossRequiresDetectorAndSourceLabels) {
  const auto c = small();
  const auto dir = fresh_dir("needs_det");
  EXPECT_THROW(run_training<float>(c, day(), night(), nullptr, dir), std::invalid_argument);
  DomainDataset unlabelled("<mem>", Domain::source,
                           {Sample{"u", {}, std::make_shared<const Image>(day().image(0)), std::nullopt}});
  FrozenDetector<float> det(untrained_detector());
  EXPECT_THROW(run_training<float>(c, unlabelled, night(), &det, dir), std::runtime_error);
  auto off = c;
  off.ablation.use_detection_loss = false;
  off.iterations = 1;
  EXPECT_NO_THROW(run_training<float>(off, unlabelled, night(), nullptr, dir));
}
