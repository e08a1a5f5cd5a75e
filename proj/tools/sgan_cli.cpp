// Command-line entry points: train, generate, evaluate, plus toy-domain and
// detector helpers. Every command writes run_manifest.json into its --out
// directory.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "sgan/image_io.hpp"
#include "sgan/sgan.hpp"

namespace fs = std::filesystem;
using sgan::Image;
using sgan::LabelledImage;

namespace {

class ModuleError : public std::runtime_error {
 public:
  ModuleError(std::string module, const std::string& what)
      : std::runtime_error(what), module_(std::move(module)) {}
  const std::string& module() const { return module_; }

 private:
  std::string module_;
};

/// Runs `f`, tagging any failure with the module it happened in.
template <class F>
auto in_module(const char* module, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const ModuleError&) {
    throw;
  } catch (const std::exception& e) {
    throw ModuleError(module, e.what());
  }
}

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Content hash over every file under `dir` except the manifest itself.
std::string artifact_hash(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename() != "run_manifest.json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& f : files) {
    const std::string rel = fs::relative(f, dir).generic_string();
    h = sgan::detail::fnv1a(rel.data(), rel.size(), h);
    std::ifstream is(f, std::ios::binary);
    std::vector<char> buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    h = sgan::detail::fnv1a(buf.data(), buf.size(), h);
  }
  return hex64(h);
}

struct RunManifest {
  std::string command;
  std::vector<std::string> argv;
  std::string config_path;
  std::uint64_t seed = 0;
  fs::path out_dir;
  std::string started = utc_now();
  nlohmann::ordered_json extra = nlohmann::ordered_json::object();

  void write() const {
    fs::create_directories(out_dir);
    nlohmann::ordered_json j = {{"command", command},
                                {"argv", argv},
                                {"config_path", config_path},
                                {"seed", seed},
                                {"artifact_hash", artifact_hash(out_dir)},
                                {"output_dir", fs::absolute(out_dir).string()},
                                {"started_utc", started},
                                {"finished_utc", utc_now()},
                                {"details", extra}};
    std::ofstream(out_dir / "run_manifest.json") << j.dump(2) << '\n';
  }
};

/// Label file for `stem` next to the image, or in the sibling labels/<dir>/ tree.
std::optional<fs::path> find_label(const fs::path& image_dir, const std::string& stem) {
  const fs::path direct = image_dir / (stem + ".txt");
  if (fs::exists(direct)) return direct;
  const fs::path dir = fs::absolute(image_dir).lexically_normal();
  const fs::path sibling = dir.parent_path() / "labels" / dir.filename() / (stem + ".txt");
  if (fs::exists(sibling)) return sibling;
  return std::nullopt;
}

std::vector<LabelledImage> labelled_dir(const fs::path& dir) {
  std::vector<LabelledImage> out;
  for (const auto& p : sgan::list_images(dir)) {
    const auto lp = find_label(dir, p.stem().string());
    if (!lp) throw std::runtime_error("no label file for " + p.string());
    out.push_back({sgan::read_image(p), sgan::read_labels(*lp)});
  }
  if (out.empty()) throw std::runtime_error("no images in " + dir.string());
  return out;
}

// ---- features --------------------------------------------------------------------

/// A .feat file, or a directory of images embedded with the random-projection
/// extractor. Image-directory features are cached under $SGAN_CACHE_DIR.
sgan::FeatureSet load_features(const fs::path& input) {
  if (fs::is_regular_file(input)) return sgan::load_feature_set(input.string());
  const sgan::RandomProjectionExtractor ex;
  const auto files = sgan::list_images(input);
  if (files.empty()) throw std::runtime_error("no images in " + input.string());
  std::optional<fs::path> cache;
  if (const char* dir = std::getenv("SGAN_CACHE_DIR")) {
    std::string key = ex.id();
    for (const auto& f : files)
      key += "|" + fs::absolute(f).string() + "|" + std::to_string(fs::file_size(f)) + "|" +
             std::to_string(fs::last_write_time(f).time_since_epoch().count());
    cache = fs::path(dir) / (hex64(sgan::detail::fnv1a(key.data(), key.size())) + ".feat");
    if (fs::exists(*cache)) return sgan::load_feature_set(cache->string());
  }
  std::vector<Image> images;
  for (const auto& f : files) images.push_back(sgan::read_image(f));
  auto fsx = ex.extract(images);
  if (cache) {
    fs::create_directories(cache->parent_path());
    sgan::save_feature_set(cache->string(), fsx);
  }
  return fsx;
}

/// Per-stem label sets for `gt_dir`; predictions default to empty.
void load_detection_pair(const fs::path& pred_dir, const fs::path& gt_dir, std::vector<sgan::BoxSet>& preds,
                         std::vector<sgan::BoxSet>& gts) {
  if (!fs::is_directory(gt_dir)) throw std::runtime_error("not a directory: " + gt_dir.string());
  if (!fs::is_directory(pred_dir)) throw std::runtime_error("not a directory: " + pred_dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(gt_dir))
    if (e.is_regular_file() && e.path().extension() == ".txt") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw std::runtime_error("no ground-truth label files in " + gt_dir.string());
  for (const auto& f : files) {
    gts.push_back(sgan::read_labels(f));
    const fs::path p = pred_dir / f.filename();
    preds.push_back(fs::exists(p) ? sgan::read_labels(p) : sgan::BoxSet{});
  }
}

// ---- commands ----------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> ablations;
  std::string scale;
  std::optional<int> iterations;
};

int cmd_train(const TrainArgs& a, RunManifest& m) {
  nlohmann::json j = in_module("trainer", [&] {
    std::ifstream is(a.config);
    if (!is) throw std::runtime_error("cannot read config " + a.config);
    return nlohmann::json::parse(is);
  });
  const nlohmann::json data = j.value("data", nlohmann::json::object());
  // Relative paths in a config are relative to the config file.
  const fs::path config_dir = fs::path(a.config).parent_path();
  auto resolve = [&](const std::string& p) { return fs::path(p).is_relative() ? config_dir / p : fs::path(p); };
  const std::string detector_path = j.contains("detector") ? resolve(j.at("detector").get<std::string>()).string() : "";
  j.erase("data");
  j.erase("detector");
  auto cfg = in_module("trainer", [&] {
    auto c = sgan::train_config_from_json_with_profile(j);
    if (a.seed) c.seed = *a.seed;
    if (a.iterations) c.iterations = *a.iterations;
    for (const auto& ab : a.ablations) c.ablation.apply(ab);
    if (!a.scale.empty()) c.generator.downsample_scale = sgan::Fraction::parse(a.scale);
    c.validate();
    return c;
  });
  m.seed = cfg.seed;

  const fs::path root = in_module("data", [&] {
    if (!data.contains("root")) throw std::runtime_error("config has no data.root");
    return resolve(data.at("root").get<std::string>());
  });
  const auto src = in_module("data", [&] {
    return sgan::load_domain(root, data.value("source", "trainA"), sgan::Domain::source,
                             cfg.ablation.use_detection_loss);
  });
  const auto tgt = in_module("data", [&] {
    return sgan::load_domain(root, data.value("target", "trainB"), sgan::Domain::target);
  });
  std::optional<sgan::FrozenDetector<float>> det;
  if (cfg.ablation.use_detection_loss)
    det.emplace(in_module("detection", [&] {
      if (detector_path.empty()) throw std::runtime_error("detection loss enabled but config has no detector");
      return sgan::FrozenDetector<float>(sgan::load_detector(detector_path));
    }));

  const fs::path out(a.out);
  fs::create_directories(out);
  std::ofstream(out / "config.json") << sgan::to_json(cfg).dump(2) << '\n';
  const auto final_ckpt = in_module("trainer", [&] {
    sgan::RunOptions ro;
    ro.on_step = [&](std::int64_t it, const sgan::LossReport& r) {
      if (it % 100 == 0 || it == cfg.iterations)
        std::cout << "iter " << it << " total " << r.total << " cyc " << r.cyc << " adv " << r.adv
                  << " det " << r.det << '\n';
    };
    return sgan::run_training<float>(cfg, src, tgt, det ? &*det : nullptr, out, ro);
  });
  std::cout << "final checkpoint: " << final_ckpt.string() << '\n';
  m.extra["final_checkpoint"] = final_ckpt.string();
  return 0;
}

int cmd_generate(const std::string& checkpoint, const std::string& input, const std::string& out,
                 const std::string& direction, RunManifest& m) {
  const auto dir = in_module("cli", [&] { return sgan::parse_direction(direction); });
  const auto state = in_module("trainer", [&] { return sgan::load_checkpoint<float>(checkpoint); });
  m.seed = state.cfg.seed;
  const auto& g = sgan::generator_for(state.generators, dir);
  const auto files = in_module("data", [&] { return sgan::list_images(input); });
  if (files.empty()) throw ModuleError("data", "no images in " + input);
  fs::create_directories(out);
  int ok = 0, failed = 0;
  for (const auto& f : files) {
    try {
      const Image img = sgan::read_image(f);
      sgan::write_image(fs::path(out) / f.filename(), sgan::translate_image(g, img));
      if (auto lp = find_label(input, f.stem().string()))
        fs::copy_file(*lp, fs::path(out) / lp->filename(), fs::copy_options::overwrite_existing);
      ++ok;
    } catch (const std::exception& e) {
      ++failed;
      std::cerr << "warning: [generators] skipped " << f.string() << ": " << e.what() << '\n';
    }
  }
  std::cout << "generated " << ok << " image(s), " << failed << " failure(s)\n";
  m.extra["generated"] = ok;
  m.extra["failed"] = failed;
  m.extra["direction"] = direction;
  return ok > 0 ? 0 : 1;
}

struct EvalArgs {
  std::vector<std::string> inputs;
  std::string out;
  std::string dataset = "dataset";
  std::string method = "method";
  int subset_size = 100;
  int subsets = 100;
  double iou = 0.5;
  std::uint64_t seed = 0;
};

int cmd_evaluate(const std::string& kind, const EvalArgs& a, RunManifest& m) {
  const fs::path out(a.out);
  fs::create_directories(out);
  auto need = [&](std::size_t n) {
    if (a.inputs.size() != n)
      throw ModuleError("cli", "evaluate " + kind + " expects " + std::to_string(n) + " input(s)");
  };
  if (kind == "fid" || kind == "kid") {
    need(2);
    const auto fa = in_module("metrics", [&] { return load_features(a.inputs[0]); });
    const auto fb = in_module("metrics", [&] { return load_features(a.inputs[1]); });
    sgan::MetricRow row{a.dataset, a.method, 0, {}};
    in_module("metrics", [&] {
      if (kind == "fid") {
        row.fid = sgan::fid(fa, fb);
      } else {
        row.fid = std::numeric_limits<double>::quiet_NaN();
        row.kid = sgan::kid(fa, fb, a.subset_size, a.subsets, a.seed);
      }
      return 0;
    });
    sgan::write_text((out / (kind + ".csv")).string(), sgan::metric_csv({row}));
    sgan::write_text((out / (kind + ".md")).string(), sgan::metric_markdown({row}));
    if (kind == "fid")
      std::cout << "fid " << row.fid << '\n';
    else
      std::cout << "kid " << row.kid.mean << " +- " << row.kid.stddev << '\n';
    m.extra["extractor"] = fa.extractor;
    return 0;
  }
  if (kind == "map" || kind == "stats") {
    need(2);
    std::vector<sgan::BoxSet> preds, gts;
    in_module("detection", [&] {
      load_detection_pair(a.inputs[0], a.inputs[1], preds, gts);
      return 0;
    });
    const auto stats = in_module("detection", [&] { return sgan::evaluate_map(preds, gts, a.iou); });
    const std::vector<sgan::DetectionRow> rows{{a.dataset, a.method, stats}};
    sgan::write_text((out / (kind + ".csv")).string(), sgan::detection_csv(rows));
    sgan::write_text((out / (kind + ".md")).string(), sgan::detection_markdown(rows));
    std::cout << "map " << stats.map << " tp " << stats.tp << " fp " << stats.fp << " fn " << stats.fn << '\n';
    return 0;
  }
  if (kind == "pareto") {
    need(1);
    const auto cands = in_module("metrics", [&] {
      std::ifstream is(a.inputs[0]);
      if (!is) throw std::runtime_error("cannot read " + a.inputs[0]);
      return sgan::parse_candidates(is, a.inputs[0]);
    });
    const auto front = in_module("metrics", [&] { return sgan::pareto_front(cands); });
    sgan::write_text((out / "pareto.csv").string(), sgan::pareto_csv(cands, front));
    sgan::write_text((out / "pareto.md").string(), sgan::pareto_markdown(front));
    std::cout << "front:";
    for (const auto& c : front) std::cout << ' ' << c.scale.str();
    std::cout << '\n';
    return 0;
  }
  throw ModuleError("cli", "unknown evaluation kind '" + kind + "'");
}

int cmd_synth_toy(const std::string& out, int n_train, int n_test, std::uint64_t seed, RunManifest& m) {
  m.seed = seed;
  in_module("data", [&] {
    sgan::write_domain(out, "trainA", sgan::synth_toy_domain(n_train, false, seed));
    sgan::write_domain(out, "trainB", sgan::synth_toy_domain(n_train, true, seed + 1));
    sgan::write_domain(out, "testA", sgan::synth_toy_domain(n_test, false, seed + 2));
    sgan::write_domain(out, "testB", sgan::synth_toy_domain(n_test, true, seed + 3));
    m.extra["dataset_manifest"] = sgan::write_dataset_manifest(out);
    return 0;
  });
  std::cout << "wrote toy dataset to " << out << '\n';
  return 0;
}

int cmd_train_detector(const std::string& base_dir, const std::vector<std::string>& added_dirs,
                       const std::string& test_dir, int iterations, std::uint64_t seed,
                       const std::string& out, RunManifest& m) {
  m.seed = seed;
  const auto base = in_module("data", [&] { return labelled_dir(base_dir); });
  std::vector<LabelledImage> added;
  for (const auto& d : added_dirs) {
    auto more = in_module("data", [&] { return labelled_dir(d); });
    added.insert(added.end(), more.begin(), more.end());
  }
  sgan::DetectorTrainConfig tc;
  tc.iterations = iterations;
  tc.seed = seed;
  const auto det = in_module("detection", [&] {
    return sgan::retrain_detector(base, added, sgan::DetectorConfig{}, tc);
  });
  sgan::save_detector(out, det.inner());
  m.extra["base_images"] = base.size();
  m.extra["added_images"] = added.size();
  if (!test_dir.empty()) {
    const auto test = in_module("data", [&] { return labelled_dir(test_dir); });
    const auto stats = in_module("detection", [&] { return sgan::evaluate_detector(det.inner(), test); });
    const std::vector<sgan::DetectionRow> rows{
        {fs::path(test_dir).filename().string(), added.empty() ? "base only" : "base + added", stats}};
    sgan::write_text((fs::path(out) / "eval.csv").string(), sgan::detection_csv(rows));
    sgan::write_text((fs::path(out) / "eval.md").string(), sgan::detection_markdown(rows));
    std::cout << "test map " << stats.map << '\n';
    m.extra["test_map"] = stats.map;
  }
  return 0;
}

int cmd_detect(const std::string& detector, const std::string& input, const std::string& out, RunManifest& m) {
  const auto det = in_module("detection", [&] { return sgan::load_detector(detector); });
  const auto files = in_module("data", [&] { return sgan::list_images(input); });
  fs::create_directories(out);
  for (const auto& f : files) {
    const auto boxes = in_module("detection", [&] {
      return sgan::detect_images(*det, std::vector<Image>{sgan::read_image(f)}).front();
    });
    sgan::write_labels(fs::path(out) / (f.stem().string() + ".txt"), boxes, true);
  }
  m.extra["images"] = files.size();
  std::cout << "wrote predictions for " << files.size() << " image(s)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Unpaired normal-to-adverse driving-scene translation"};
  app.require_subcommand(1);
  RunManifest m;
  for (int i = 0; i < argc; ++i) m.argv.emplace_back(argv[i]);

  TrainArgs ta;
  std::uint64_t seed_value = 0;
  auto* train = app.add_subcommand("train", "Train a generator pair");
  train->add_option("--config", ta.config, "JSON config")->required();
  train->add_option("--seed", seed_value, "Override the config seed");
  train->add_option("--out", ta.out, "Run directory")->required();
  train->add_option("--ablation", ta.ablations, "no-pam, no-cam, no-multiscale or no-det")
      ->check(CLI::IsMember({"no-pam", "no-cam", "no-multiscale", "no-det"}));
  train->add_option("--scale", ta.scale, "Coarse-generator down-sampling scale")
      ->check(CLI::IsMember({"1/2", "1/4", "1/8"}));
  int iterations_value = 0;
  auto* iter_opt = train->add_option("--iterations", iterations_value, "Override the iteration count");

  std::string checkpoint, input, out, direction = "normal-to-adverse";
  auto* gen = app.add_subcommand("generate", "Translate a directory of images");
  gen->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();
  gen->add_option("--input", input, "Input image directory")->required();
  gen->add_option("--out", out, "Output directory")->required();
  gen->add_option("--direction", direction, "normal-to-adverse or adverse-to-normal")
      ->check(CLI::IsMember({"normal-to-adverse", "adverse-to-normal"}));

  EvalArgs ea;
  std::string kind;
  auto* eval = app.add_subcommand("evaluate", "FID, KID, mAP, detection statistics or Pareto front");
  eval->add_option("kind", kind, "fid | kid | map | stats | pareto")
      ->required()
      ->check(CLI::IsMember({"fid", "kid", "map", "stats", "pareto"}));
  eval->add_option("inputs", ea.inputs, "Image dirs / feature files, prediction and GT dirs, or a CSV")
      ->required();
  eval->add_option("--out", ea.out, "Report directory")->required();
  eval->add_option("--dataset", ea.dataset, "Dataset label for the report");
  eval->add_option("--method", ea.method, "Method or setting label for the report");
  eval->add_option("--subset-size", ea.subset_size, "KID subset size");
  eval->add_option("--subsets", ea.subsets, "KID subset count");
  eval->add_option("--iou", ea.iou, "mAP IoU threshold");
  eval->add_option("--seed", ea.seed, "KID subset sampling seed");

  int n_train = 400, n_test = 200;
  std::uint64_t synth_seed = 1;
  auto* synth = app.add_subcommand("synth-toy", "Write the synthetic day/dark toy dataset");
  synth->add_option("--out", out, "Dataset root")->required();
  synth->add_option("--train", n_train, "Images per training split");
  synth->add_option("--test", n_test, "Images per test split");
  synth->add_option("--seed", synth_seed, "Generation seed");

  std::string base_dir, test_dir;
  std::vector<std::string> added_dirs;
  int det_iters = sgan::DetectorTrainConfig{}.iterations;
  std::uint64_t det_seed = 7;
  auto* tdet = app.add_subcommand("train-detector", "Train the toy detector");
  tdet->add_option("--base", base_dir, "Labelled base training images")->required();
  tdet->add_option("--added", added_dirs, "Extra labelled images (real adverse or generated)");
  tdet->add_option("--test", test_dir, "Labelled test images to report mAP on");
  tdet->add_option("--iterations", det_iters, "Training iterations");
  tdet->add_option("--seed", det_seed, "Training seed");
  tdet->add_option("--out", out, "Detector directory")->required();

  std::string detector;
  auto* detect = app.add_subcommand("detect", "Write toy-detector predictions as label files");
  detect->add_option("--detector", detector, "Detector directory")->required();
  detect->add_option("--input", input, "Image directory")->required();
  detect->add_option("--out", out, "Prediction directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    int rc = 1;
    if (train->parsed()) {
      if (train->count("--seed")) ta.seed = seed_value;
      if (iter_opt->count()) ta.iterations = iterations_value;
      m = {"train", m.argv, ta.config, 0, ta.out};
      rc = cmd_train(ta, m);
    } else if (gen->parsed()) {
      m = {"generate", m.argv, "", 0, out};
      rc = cmd_generate(checkpoint, input, out, direction, m);
    } else if (eval->parsed()) {
      m = {"evaluate " + kind, m.argv, "", ea.seed, ea.out};
      rc = cmd_evaluate(kind, ea, m);
    } else if (synth->parsed()) {
      m = {"synth-toy", m.argv, "", synth_seed, out};
      rc = cmd_synth_toy(out, n_train, n_test, synth_seed, m);
    } else if (tdet->parsed()) {
      m = {"train-detector", m.argv, "", det_seed, out};
      rc = cmd_train_detector(base_dir, added_dirs, test_dir, det_iters, det_seed, out, m);
    } else if (detect->parsed()) {
      m = {"detect", m.argv, "", 0, out};
      rc = cmd_detect(detector, input, out, m);
    }
    m.extra["exit_code"] = rc;
    m.write();
    return rc;
  } catch (const ModuleError& e) {
    std::cerr << "error: [" << e.module() << "] " << e.what() << '\n';
    m.extra["error"] = "[" + e.module() + "] " + e.what();
  } catch (const std::exception& e) {
    std::cerr << "error: [cli] " << e.what() << '\n';
    m.extra["error"] = std::string("[cli] ") + e.what();
  }
  m.extra["exit_code"] = 1;
  if (!m.out_dir.empty()) {
    try {
      m.write();
    } catch (const std::exception&) {
      // the output directory itself may be the problem
    }
  }
  return 1;
}
