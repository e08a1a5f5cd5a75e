// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance            run every criterion
//   acceptance 2 7 9      run a subset
//   acceptance --work D   scratch directory for training runs (default: temp)
//
// Exit status is 0 only if every selected criterion passes.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "sgan/sgan.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

using namespace sgan;
namespace fs = std::filesystem;
namespace st = sgan::testing;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) {
  return std::chrono::duration<double>(Clock::now() - t).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

fs::path g_work;

// ---- 1: full-scale reference numbers ---------------------------------------------------
//
// The full-scale datasets and GPU budget are out of reach, so the reference
// numbers are only rendered through the same report layouts the tools emit.

Outcome criterion1() {
  const auto targets = reference_targets();
  const std::string md = reference_markdown();
  std::cout << "  reference targets (reported, not reproduced at desk scale):\n";
  std::istringstream is(md);
  for (std::string line; std::getline(is, line);) std::cout << "    " << line << '\n';
  std::map<std::string, double> want{{"55.200", 55.2}, {"0.422", 0.422}, {"0.469", 0.469}};
  bool ok = targets.size() >= 3;
  for (const auto& [text, v] : want) {
    bool found = false;
    for (const auto& t : targets) found = found || t.value == v;
    ok = ok && found && md.find(text) != std::string::npos;
  }
  return {ok, "FID 55.2 and mAP 0.422 / 0.469 listed as reference targets; desk-scale "
              "acceptance is carried by criteria 2-10"};
}

// ---- 2: attention invariants ----------------------------------------------------------

std::vector<double> dual_oracle(const Tensor<double>& f, int n, const DualAttention<double>& dual) {
  const int C = f.dim(1), HW = f.dim(2) * f.dim(3);
  const auto pam = st::pam_oracle(f, n, dual.pam());
  const auto cam = st::cam_oracle(f, n);
  const auto a = st::conv1x1_oracle(pam.out, C, HW, const_cast<DualAttention<double>&>(dual).proj_pam());
  const auto b = st::conv1x1_oracle(cam.out, C, HW, const_cast<DualAttention<double>&>(dual).proj_cam());
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

Outcome criterion2() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> pick_c(1, 8), pick_side(16, 32), pick_n(1, 2);
  int inputs = 0, failures = 0;
  double worst_oracle = 0, worst_row = 0;
  int spread_rows = 0;  // CAM rows with no entry above 0.9
  for (int trial = 0; trial < 120; ++trial) {
    const int N = pick_n(rng), C = pick_c(rng), H = pick_side(rng), W = pick_side(rng);
    nn::Rng init(static_cast<std::uint64_t>(trial));
    DualAttention<double> dual(C, true, true, default_pam_scales(), init);
    st::randomize(dual.parameters(), rng);
    // Alternate amplitudes: large inputs saturate the channel softmax, small
    // ones keep its rows spread out.
    const double amp = trial % 2 ? 2.0 : 0.05;
    const auto f = st::random_tensor({N, C, H, W}, rng, -amp, amp);
    const Var<double> fv(f);
    const auto pam_out = dual.pam()(fv).value();
    const auto map = dual.pam().attention_map(fv).value();
    const auto cam_out = cam_forward(fv).value();
    const auto x = channel_attention_matrix(fv).value();
    const auto out = dual(fv).value();
    bool ok = pam_out.shape() == f.shape() && cam_out.shape() == f.shape() && out.shape() == f.shape() &&
              map.shape() == (Shape{N, 1, H, W}) && x.shape() == (Shape{N, C, C});
    for (double v : map.vec()) ok = ok && v > 0.0 && v < 1.0;
    for (int r = 0; r < N * C; ++r) {
      double s = 0, top = 0;
      for (int j = 0; j < C; ++j) {
        s += x[static_cast<std::size_t>(r) * C + j];
        top = std::max(top, x[static_cast<std::size_t>(r) * C + j]);
      }
      worst_row = std::max(worst_row, std::abs(s - 1.0));
      spread_rows += C > 1 && top < 0.9;
    }
    for (int n = 0; n < N; ++n) {
      const auto p = st::pam_oracle(f, n, dual.pam());
      const auto c = st::cam_oracle(f, n);
      const auto d = dual_oracle(f, n, dual);
      const std::size_t off = static_cast<std::size_t>(n) * C * H * W;
      for (std::size_t i = 0; i < p.out.size(); ++i) {
        worst_oracle = std::max(worst_oracle, std::abs(pam_out[off + i] - p.out[i]));
        worst_oracle = std::max(worst_oracle, std::abs(cam_out[off + i] - c.out[i]));
        worst_oracle = std::max(worst_oracle, std::abs(out[off + i] - d[i]));
      }
      for (std::size_t i = 0; i < p.map.size(); ++i)
        worst_oracle = std::max(worst_oracle, std::abs(map[static_cast<std::size_t>(n) * H * W + i] - p.map[i]));
    }
    ++inputs;
    failures += !ok;
  }
  const double elapsed = seconds_since(t0);
  const bool pass = failures == 0 && worst_row <= 1e-5 && worst_oracle <= 1e-5 && elapsed < 60 && spread_rows > 0;
  return {pass, std::to_string(inputs) + " inputs up to [8,32,32], shape/range failures " + std::to_string(failures) +
                    ", max |row sum - 1| " + fmt("%.1e", worst_row) + " (" + std::to_string(spread_rows) + " unsaturated rows)" + ", max oracle deviation " +
                    fmt("%.1e", worst_oracle) + ", " + fmt("%.1f", elapsed) + " s"};
}

// ---- 3: gradient checks of the full generator objective --------------------------------

Outcome criterion3() {
  const auto t0 = Clock::now();
  std::vector<std::string> notes;
  bool pass = true;
  for (const std::string ablation : {"full", "no-pam", "no-cam", "no-multiscale", "no-det"}) {
    TrainConfig cfg = TrainConfig::toy();
    cfg.generator.base_channels = 2;
    cfg.generator.num_residual_blocks_g1 = 1;
    cfg.generator.num_residual_blocks_g2 = 1;
    cfg.generator.downsample_scale = {1, 2};
    cfg.generator.pam_scales = {Fraction{1, 1}, Fraction{1, 2}};
    cfg.critic = CriticConfig{3, 2, 1};
    cfg.crop.crop_size = 8;
    cfg.seed = 17;
    if (ablation != "full") cfg.ablation.apply(ablation);
    auto s = init_state<double>(cfg);

    DetectorConfig dc;
    dc.image_size = 8;
    dc.width = 2;
    dc.num_downsample = 1;
    nn::Rng det_init(5);
    auto det = std::make_shared<ToyDetector<double>>(dc, det_init);
    const FrozenDetector<double> frozen(det);

    std::mt19937_64 rng(99);
    const auto x = st::random_tensor({2, 3, 8, 8}, rng, -0.9, 0.9);
    const auto y = st::random_tensor({2, 3, 8, 8}, rng, -0.9, 0.9);
    const std::vector<BoxSet> labels{BoxSet{{Box{0, 0.4, 0.45, 0.35, 0.3, 1.0}}},
                                     BoxSet{{Box{1, 0.6, 0.55, 0.3, 0.4, 1.0}}}};
    auto loss = [&] {
      const auto f = translate(s, x, y);
      return generator_objective(s, f, labels, &frozen).total;
    };
    st::GradCheckOptions o;
    o.samples_per_tensor = 6;
    o.eps = 1e-6;
    const auto r = st::gradcheck(s.generator_parameters(), loss, o);
    const bool ok = r.pass_rate() >= 0.95;
    pass = pass && ok;
    notes.push_back(ablation + " " + std::to_string(r.passed) + "/" + std::to_string(r.checked));
    if (r.passed < r.checked)
      std::cout << "  " << ablation << ": worst mismatch " << r.worst_name << " rel " << fmt("%.2e", r.worst_rel)
                << '\n';
  }
  const double elapsed = seconds_since(t0);
  pass = pass && elapsed < 300;
  std::string d;
  for (const auto& n : notes) d += (d.empty() ? "" : ", ") + n;
  return {pass, d + " within rel 1e-3 (need >= 95% each), " + fmt("%.1f", elapsed) + " s"};
}

// ---- 4: FID ------------------------------------------------------------------------------

Outcome criterion4() {
  std::mt19937_64 rng(4);
  const int n = 10000, d = 8;
  const Eigen::VectorXd ones = Eigen::VectorXd::Ones(d);
  Eigen::VectorXd offset(d);
  std::uniform_real_distribution<double> u(-2, 2);
  for (int i = 0; i < d; ++i) offset[i] = u(rng);
  const FeatureSet a{"oracle", st::exact_gaussian_set(rng, n, Eigen::VectorXd::Zero(d), ones)};
  const FeatureSet b{"oracle", st::exact_gaussian_set(rng, n, offset, ones)};
  const double shift_err = std::abs(fid(a, b) - offset.squaredNorm());
  const double self = fid(a, a);
  const double sym = std::abs(fid(a, b) - fid(b, a));
  const bool pass = shift_err <= 1e-3 && std::abs(self) <= 1e-6 && sym <= 1e-9;
  return {pass, "|FID - |d|^2| = " + fmt("%.2e", shift_err) + ", FID(a,a) = " + fmt("%.2e", self) +
                    ", |FID(a,b) - FID(b,a)| = " + fmt("%.2e", sym)};
}

// ---- 5: KID ------------------------------------------------------------------------------

Outcome criterion5() {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> nd;
  auto normal = [&](int rows, int cols, double shift) {
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = nd(rng) + shift;
    return m;
  };
  double worst = 0;
  int cases = 0;
  for (int m = 2; m <= 8; ++m)
    for (int k = 2; k <= 8; ++k)
      for (int rep = 0; rep < 3; ++rep) {
        const auto x = normal(m, 4, 0.0), y = normal(k, 4, 0.3);
        const double want = st::mmd2_oracle(x, y);
        worst = std::max(worst, std::abs(mmd2_unbiased(x, y) - want) / std::max(1.0, std::abs(want)));
        ++cases;
      }
  const FeatureSet a{"oracle", normal(2000, 16, 0.0)}, b{"oracle", normal(2000, 16, 0.0)};
  const auto r = kid(a, b, 100, 100, 5);
  const bool null_ok = std::abs(r.mean) <= 3 * r.stddev;
  const bool pass = worst <= 1e-12 && null_ok;
  return {pass, std::to_string(cases) + " brute-force cases for N <= 8, max rel deviation " + fmt("%.1e", worst) +
                    "; null KID " + fmt("%.2e", r.mean) + " +- " + fmt("%.2e", r.stddev) + " over 100 subsets"};
}

// ---- 6: mAP ------------------------------------------------------------------------------

Outcome criterion6() {
  std::mt19937_64 rng(6);
  int fixtures = 0, mismatches = 0, conservation = 0;
  for (int t = 0; t < 3000; ++t) {
    std::vector<BoxSet> preds, gts;
    st::random_detection_fixture(rng, 10, preds, gts);
    int gt_count = 0;
    for (const auto& g : gts) gt_count += static_cast<int>(g.size());
    if (gt_count == 0) continue;
    const auto s = evaluate_map(preds, gts, 0.5);
    const auto o = st::map_oracle(preds, gts, 0.5);
    ++fixtures;
    mismatches += std::abs(s.map - o.map) > 1e-12 || s.tp != o.tp || s.fp != o.fp || s.fn != o.fn;
    conservation += s.tp + s.fn != gt_count;
  }
  std::vector<BoxSet> gts(2);
  gts[0].boxes = {{0, 0.3, 0.3, 0.2, 0.2, 1.0}, {1, 0.7, 0.7, 0.2, 0.3, 1.0}};
  gts[1].boxes = {{1, 0.5, 0.4, 0.3, 0.2, 1.0}};
  const double perfect = evaluate_map(gts, gts).map;
  const bool pass = mismatches == 0 && conservation == 0 && perfect == 1.0;
  return {pass, std::to_string(fixtures) + " fixtures with <= 10 boxes, oracle mismatches " +
                    std::to_string(mismatches) + ", tp+fn violations " + std::to_string(conservation) +
                    ", perfect-prediction mAP " + fmt("%.3f", perfect)};
}

// ---- 7: Pareto front -----------------------------------------------------------------------

Outcome criterion7() {
  const std::vector<ScaleCandidate> c{{{1, 2}, 76.9, 0.406}, {{1, 4}, 67.3, 0.422}, {{1, 8}, 65.6, 0.415}};
  const auto front = pareto_front(c);
  std::set<std::string> got;
  for (const auto& f : front) got.insert(f.scale.str());
  const bool pass = got == std::set<std::string>{"1/4", "1/8"} && front.size() == 2;
  std::string d = "front {";
  for (const auto& f : front) d += (d.back() == '{' ? "" : ", ") + f.scale.str();
  return {pass, d + "}"};
}

// ---- 8: loss weights -----------------------------------------------------------------------

Outcome criterion8() {
  const LossWeights w;
  const bool defaults = w.k1 == 0.8 && w.k2 == 1.0 && w.k3 == 10.0 && w.a == 0.4 && w.b == 0.3 && w.c == 0.3;
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0, 3);
  double worst = 0;
  for (int i = 0; i < 1000; ++i) {
    const double ci = u(rng), cl = u(rng), co = u(rng), adv = u(rng), cyc = u(rng);
    const auto r = total_loss(ci, cl, co, adv, cyc, w);
    worst = std::max(worst, std::abs(r.det - (w.a * ci + w.b * cl + w.c * co)));
    worst = std::max(worst, std::abs(r.total - (w.k1 * r.det + w.k2 * adv + w.k3 * cyc)));
  }
  const auto unit = total_loss(1, 1, 1, 1, 1, w);
  const bool pass = defaults && worst <= 1e-12 && std::abs(unit.total - 11.8) < 1e-12 && std::abs(unit.det - 1.0) < 1e-12;
  return {pass, std::string("k1/k2/k3 = 0.8/1/10 and a/b/c = 0.4/0.3/0.3 ") + (defaults ? "hold" : "DIFFER") +
                    ", identity residual " + fmt("%.1e", worst) + ", unit total " + fmt("%.3f", unit.total)};
}

// ---- 9: toy end-to-end -------------------------------------------------------------------

struct GanRun {
  double cycle_ratio = 0;
  double first100 = 0, last100 = 0;
  double night_map = 0;
};

GanRun toy_gan(bool detection_loss, const DomainDataset& day, const DomainDataset& dark,
               const Detector<float>& loss_detector, const std::vector<LabelledImage>& test) {
  auto cfg = TrainConfig::toy();
  cfg.iterations = 2000;
  cfg.seed = 5;
  cfg.ablation.use_detection_loss = detection_loss;
  std::vector<double> cyc;
  RunOptions ro;
  ro.resume = false;
  ro.on_step = [&](std::int64_t, const LossReport& r) { cyc.push_back(r.cyc); };
  const auto dir = g_work / (detection_loss ? "toy_det_on" : "toy_det_off");
  fs::remove_all(dir);
  const auto ckpt = run_training<float>(cfg, day, dark, &loss_detector, dir, ro);
  GanRun g;
  for (int i = 0; i < 100; ++i) {
    g.first100 += cyc[i] / 100;
    g.last100 += cyc[cyc.size() - 100 + i] / 100;
  }
  g.cycle_ratio = g.last100 / g.first100;
  const auto state = load_checkpoint<float>(ckpt);
  const auto generated = translate_labelled(state.generators.normal_to_adverse, day, 200);
  const auto det = retrain_detector(labelled_images(day), generated, DetectorConfig{}, DetectorTrainConfig{});
  g.night_map = evaluate_detector(det.inner(), test).map;
  return g;
}

Outcome criterion9() {
  const auto t0 = Clock::now();
  const auto day = synth_toy_domain(400, false, 11);
  const auto dark = synth_toy_domain(400, true, 12);  // unpaired target, labels unused
  const auto test = labelled_images(synth_toy_domain(200, true, 13));
  const DetectorConfig dc;
  const DetectorTrainConfig tc;

  // Setting 1: daytime images only.
  const auto baseline = train_detector(labelled_images(day), dc, tc);
  const double base_map = evaluate_detector(*baseline, test).map;

  // Frozen detector for the detection loss: pre-trained on a broad labelled
  // corpus covering both lighting conditions, disjoint from the test split.
  auto corpus = labelled_images(day);
  const auto dark_corpus = labelled_images(synth_toy_domain(400, true, 14));
  corpus.insert(corpus.end(), dark_corpus.begin(), dark_corpus.end());
  const FrozenDetector<float> loss_detector(train_detector(corpus, dc, tc));

  const auto on = toy_gan(true, day, dark, loss_detector, test);
  const auto off = toy_gan(false, day, dark, loss_detector, test);
  const double elapsed = seconds_since(t0);

  const bool cycle_ok = on.cycle_ratio <= 0.5;
  const bool beats_base = on.night_map > base_map;
  const bool beats_ablation = on.night_map > off.night_map;
  const bool time_ok = elapsed <= 30 * 60;
  std::cout << "  (i)  cycle loss first-100 " << fmt("%.4f", on.first100) << " -> final-100 "
            << fmt("%.4f", on.last100) << " (ratio " << fmt("%.3f", on.cycle_ratio) << "; no-det run ratio "
            << fmt("%.3f", off.cycle_ratio) << ")\n";
  std::cout << "  (ii) dark-test mAP: daytime-only " << fmt("%.3f", base_map) << ", + generated (with L_det) "
            << fmt("%.3f", on.night_map) << ", + generated (no L_det) " << fmt("%.3f", off.night_map) << '\n';
  std::cout << "  wall time " << fmt("%.0f", elapsed) << " s\n";
  std::string why;
  if (!cycle_ok) why += " cycle ratio above 0.5;";
  if (!beats_base) why += " generated data does not beat the daytime-only baseline;";
  if (!beats_ablation) why += " detection loss does not beat its ablation;";
  if (!time_ok) why += " over the 30 min budget;";
  return {cycle_ok && beats_base && beats_ablation && time_ok,
          "cycle ratio " + fmt("%.3f", on.cycle_ratio) + ", mAP " + fmt("%.3f", base_map) + " -> " +
              fmt("%.3f", on.night_map) + " (no L_det " + fmt("%.3f", off.night_map) + "), " +
              fmt("%.0f", elapsed) + " s" + (why.empty() ? "" : ";" + why)};
}

// ---- 10: determinism and resume ------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

Outcome criterion10() {
  const auto day = synth_toy_domain(40, false, 21);
  const auto dark = synth_toy_domain(40, true, 22);
  nn::Rng init(3);
  const FrozenDetector<float> det(std::make_shared<ToyDetector<float>>(DetectorConfig{}, init));
  auto cfg = TrainConfig::toy();
  cfg.iterations = 100;
  cfg.seed = 10;
  cfg.checkpoint_every = 40;
  const auto a = g_work / "det_a", b = g_work / "det_b", c = g_work / "det_resume";
  for (const auto& d : {a, b, c}) fs::remove_all(d);
  run_training<float>(cfg, day, dark, &det, a);
  run_training<float>(cfg, day, dark, &det, b);
  const bool identical = slurp(a / "loss_log.csv") == slurp(b / "loss_log.csv");

  // Interrupt after step 55, lose everything after the step-40 checkpoint, resume.
  RunOptions stop;
  stop.stop_after = 55;
  run_training<float>(cfg, day, dark, &det, c, stop);
  fs::remove_all(checkpoint_dir(c, 55));
  run_training<float>(cfg, day, dark, &det, c);
  const auto ra = read_loss_log(a / "loss_log.csv"), rc = read_loss_log(c / "loss_log.csv");
  double worst = ra.size() == rc.size() ? 0.0 : INFINITY;
  for (std::size_t i = 0; i < std::min(ra.size(), rc.size()); ++i) {
    const auto &p = ra[i].report, &q = rc[i].report;
    for (const auto& [u, v] : {std::pair{p.total, q.total}, {p.det, q.det}, {p.adv, q.adv}, {p.cyc, q.cyc},
                               {p.critic, q.critic}})
      worst = std::max(worst, std::abs(u - v));
  }
  const bool pass = identical && ra.size() == 100 && worst <= 1e-6;
  return {pass, std::string("two seeded 100-step runs ") + (identical ? "bit-identical" : "DIFFER") +
                    "; resumed run max per-step deviation " + fmt("%.1e", worst)};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> selected;
  g_work = fs::temp_directory_path() / "sgan_acceptance";
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--work" && i + 1 < argc) {
      g_work = argv[++i];
    } else {
      selected.insert(std::stoi(a));
    }
  }
  fs::create_directories(g_work);

  const std::map<int, std::pair<const char*, std::function<Outcome()>>> criteria{
      {1, {"full-scale numbers documented as targets", criterion1}},
      {2, {"attention invariants and oracles", criterion2}},
      {3, {"gradient checks of L_total per ablation", criterion3}},
      {4, {"FID oracle", criterion4}},
      {5, {"KID oracle", criterion5}},
      {6, {"mAP oracle", criterion6}},
      {7, {"Pareto scale selection", criterion7}},
      {8, {"loss-weight defaults and identities", criterion8}},
      {9, {"toy end-to-end", criterion9}},
      {10, {"determinism and resume", criterion10}},
  };
  int failed = 0;
  for (const auto& [id, c] : criteria) {
    if (!selected.empty() && !selected.count(id)) continue;
    Outcome o;
    try {
      o = c.second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << ": " << c.first << " -- " << o.detail
              << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
