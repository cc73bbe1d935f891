// magscope command-line front end.

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "magscope/error.hpp"
#include "magscope/eval.hpp"
#include "magscope/features.hpp"
#include "magscope/forest.hpp"
#include "magscope/image.hpp"
#include "magscope/lbp.hpp"
#include "magscope/mlp.hpp"
#include "magscope/parallel.hpp"
#include "magscope/pyramid.hpp"
#include "magscope/version.hpp"
#ifdef MAGSCOPE_HAS_DEEP
#include "magscope/deep.hpp"
#endif

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace magscope;

namespace {

/// Bad flag values caught after parsing; exits with the usage code.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

struct Globals {
  std::uint64_t seed = 42;
  unsigned threads = 0;
  fs::path out = ".";
  std::vector<std::string> argv;
};

void write_run_json(const Globals& g, const std::string& command, ordered_json config,
                    const std::vector<fs::path>& outputs) {
  ordered_json doc;
  doc["command"] = command;
  doc["argv"] = g.argv;
  doc["seed"] = g.seed;
  doc["threads"] = g.threads;
  doc["config"] = std::move(config);
  doc["outputs"] = ordered_json::array();
  for (const auto& p : outputs) doc["outputs"].push_back(p.lexically_relative(g.out).generic_string());
  doc["versions"] = {{"magscope", kVersion}, {"compiler", __VERSION__}};
  write_text_atomic(g.out / "run.json", doc.dump(2) + "\n");
}

void need_file(const fs::path& path, const std::string& what) {
  if (!fs::exists(path)) {
    throw FileNotFound(path.string() + " (" + what + ")");
  }
}

class Progress {
 public:
  explicit Progress(std::string label) : label_(std::move(label)) {}
  void operator()(std::size_t done, std::size_t total) {
    const std::size_t pct = total ? done * 100 / total : 100;
    if (pct / 10 != last_ / 10 || done == total) {
      std::fprintf(stderr, "\r%s: %zu/%zu", label_.c_str(), done, total);
      if (done == total) std::fputc('\n', stderr);
      last_ = pct;
    }
  }

 private:
  std::string label_;
  std::size_t last_ = 0;
};

std::pair<int, int> parse_mix(const std::string& s) {
  const auto colon = s.find(':');
  auto num = [&](std::string_view part) {
    int v = -1;
    const auto [p, ec] = std::from_chars(part.data(), part.data() + part.size(), v);
    if (ec != std::errc() || p != part.data() + part.size() || v < 0) {
      throw UsageError("--base-power-mix expects A:B with non-negative integers, got '" + s + "'");
    }
    return v;
  };
  if (colon == std::string::npos) {
    throw UsageError("--base-power-mix expects A:B, got '" + s + "'");
  }
  const std::string_view sv(s);
  const int a = num(sv.substr(0, colon));
  const int b = num(sv.substr(colon + 1));
  if (a + b == 0) throw UsageError("--base-power-mix must not be 0:0");
  return {a, b};
}

int parse_max_features(const std::string& s) {
  if (s == "sqrt") return forest::kSqrtFeatures;
  if (s == "all") return forest::kAllFeatures;
  int v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || v < 1) {
    throw UsageError("--max-features expects sqrt, all or a positive count, got '" + s + "'");
  }
  return v;
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  int slides = 10;
  int width = 4096;
  int height = 4096;
  std::string mix = "7:3";
  int patch_size = pyramid::kDefaultPatchSize;
};

void cmd_synth(const Globals& g, const SynthArgs& a) {
  const auto [p40, p20] = parse_mix(a.mix);
  const int min_side = pyramid::kMaxFactor * a.patch_size;
  if (a.width < min_side || a.height < min_side) {
    throw UsageError("--width and --height must be at least " + std::to_string(min_side) +
                     " (16 x patch size " + std::to_string(a.patch_size) + ")");
  }
  const fs::path slide_dir = g.out / "slides";
  fs::create_directories(slide_dir);
  std::vector<pyramid::SlideManifest> manifests;
  std::vector<fs::path> outputs;
  Progress progress("synth");
  for (int i = 0; i < a.slides; ++i) {
    // Spread the base-20 slides evenly through the sequence.
    const long long den = p40 + p20;
    const bool base40 = (static_cast<long long>(i + 1) * p20) / den == (static_cast<long long>(i) * p20) / den;
    char id[32];
    std::snprintf(id, sizeof id, "slide-%03d", i);
    auto slide = pyramid::synth_slide(id, a.width, a.height, g.seed, base40 ? 40.0 : 20.0,
                                      a.patch_size, g.threads);
    const fs::path image_path = slide_dir / (std::string(id) + ".png");
    write_png(image_path, slide.image, PngSpeed::Fast);
    slide.manifest.image_path = fs::path("slides") / (std::string(id) + ".png");
    manifests.push_back(slide.manifest);
    outputs.push_back(image_path);
    progress(static_cast<std::size_t>(i + 1), static_cast<std::size_t>(a.slides));
  }
  const fs::path manifest_path = g.out / "manifest.jsonl";
  pyramid::write_manifest(manifest_path, manifests);
  outputs.insert(outputs.begin(), manifest_path);
  std::printf("wrote %d slides to %s\n", a.slides, manifest_path.string().c_str());
  write_run_json(g, "synth",
                 {{"slides", a.slides},
                  {"width", a.width},
                  {"height", a.height},
                  {"base_power_mix", a.mix},
                  {"patch_size", a.patch_size}},
                 outputs);
}

struct SampleArgs {
  fs::path manifest;
  int points = 5;
  int patch_size = pyramid::kDefaultPatchSize;
};

void cmd_sample(const Globals& g, const SampleArgs& a) {
  need_file(a.manifest, "slide manifest; create one with `magscope synth`");
  const auto ingest = pyramid::ingest_manifest(a.manifest);
  if (ingest.discarded) {
    std::fprintf(stderr, "discarded %zu slide(s) without a 20x or 40x base\n", ingest.discarded);
  }
  if (ingest.accepted.empty()) throw InvalidArgument("no usable slides in " + a.manifest.string());
  for (const auto& s : ingest.accepted) need_file(s.image_path, "slide image of " + s.slide_id);
  pyramid::SamplerConfig cfg{a.points, a.patch_size, g.seed};
  const auto records = pyramid::build_dataset(ingest.accepted, cfg, g.out, g.threads);
  std::printf("wrote %zu patches from %zu slides to %s\n", records.size(), ingest.accepted.size(),
              (g.out / "index.csv").string().c_str());
  write_run_json(g, "sample",
                 {{"manifest", fs::absolute(a.manifest).lexically_normal().string()},
                  {"points_per_slide", a.points},
                  {"patch_size", a.patch_size},
                  {"accepted_slides", ingest.accepted.size()},
                  {"discarded_slides", ingest.discarded},
                  {"patches", records.size()}},
                 {g.out / "index.csv", g.out / "patches"});
}

struct ExtractArgs {
  fs::path index;
  fs::path store = "features.magf";
  std::string preset = "LBP3";
  fs::path model;
  std::string input_name = "input";
  std::string output_name = "features";
  std::size_t batch_size = 16;
};

fs::path resolve_out(const Globals& g, const fs::path& p) { return p.is_absolute() ? p : g.out / p; }

void report_extraction(const FeatureStore& store, const ExtractionStats& stats, const fs::path& path) {
  std::printf("wrote %zu x %zu features to %s (%.1f patches/s)\n", store.size(), store.dim,
              path.string().c_str(), stats.patches_per_second());
}

void cmd_extract_lbp(const Globals& g, const ExtractArgs& a) {
  need_file(a.index, "patch index; create one with `magscope sample`");
  const auto preset = lbp::preset_from_name(a.preset);
  if (!preset) throw UsageError("unknown preset '" + a.preset + "' (LBP1, LBP2, LBP3)");
  const auto cfg = lbp::preset_config(*preset);
  const auto records = pyramid::read_index(a.index);
  ExtractionStats stats;
  Progress progress("lbp");
  const auto store = lbp::extract_lbp_batch(records, cfg, g.threads, &stats, std::ref(progress));
  const fs::path path = resolve_out(g, a.store);
  save_store(path, store);
  report_extraction(store, stats, path);
  std::vector<fs::path> outputs{path};
  if (path.extension() != ".csv") outputs.push_back(ids_sidecar(path));
  write_run_json(g, "extract lbp",
                 {{"index", fs::absolute(a.index).lexically_normal().string()},
                  {"preset", a.preset},
                  {"radius", cfg.radius},
                  {"neighbors", cfg.neighbors},
                  {"dim", store.dim},
                  {"patches", store.size()},
                  {"patches_per_second", stats.patches_per_second()}},
                 outputs);
}

void cmd_extract_deep(const Globals& g, const ExtractArgs& a) {
#ifdef MAGSCOPE_HAS_DEEP
  need_file(a.index, "patch index; create one with `magscope sample`");
  need_file(a.model, "ONNX embedding model");
  if (a.batch_size < 1) throw UsageError("--batch-size must be >= 1");
  const auto handle = deep::load_model(a.model, a.input_name, a.output_name);
  const auto records = pyramid::read_index(a.index);
  ExtractionStats stats;
  Progress progress("deep");
  const auto store = deep::extract_deep_batch(records, handle, a.batch_size, &stats, std::ref(progress));
  const fs::path path = resolve_out(g, a.store);
  save_store(path, store);
  report_extraction(store, stats, path);
  std::vector<fs::path> outputs{path};
  if (path.extension() != ".csv") outputs.push_back(ids_sidecar(path));
  write_run_json(g, "extract deep",
                 {{"index", fs::absolute(a.index).lexically_normal().string()},
                  {"model", fs::absolute(a.model).lexically_normal().string()},
                  {"input_name", a.input_name},
                  {"output_name", a.output_name},
                  {"batch_size", a.batch_size},
                  {"dim", store.dim},
                  {"patches", store.size()},
                  {"patches_per_second", stats.patches_per_second()}},
                 outputs);
#else
  (void)g;
  (void)a;
  throw Error("this build has no deep feature support (configure with -DMAGSCOPE_WITH_DEEP=ON)");
#endif
}

struct RfArgs {
  int trees = 1000;
  int max_depth = 50;
  int min_samples_split = 2;
  std::string max_features = "sqrt";
  bool no_bootstrap = false;

  forest::ForestConfig config(std::uint64_t seed) const {
    forest::ForestConfig c;
    c.n_trees = trees;
    c.max_depth = max_depth;
    c.min_samples_split = min_samples_split;
    c.max_features = parse_max_features(max_features);
    c.bootstrap = !no_bootstrap;
    c.seed = seed;
    return c;
  }
};

struct MlpArgs {
  int epochs = 30;
  int batch_size = 128;
  double learning_rate = 1e-3;

  mlp::TrainConfig config(std::uint64_t seed) const {
    mlp::TrainConfig c;
    c.epochs = epochs;
    c.batch_size = batch_size;
    c.learning_rate = learning_rate;
    c.seed = seed;
    return c;
  }
};

ordered_json describe(const forest::ForestConfig& c) {
  ordered_json mf;
  if (c.max_features == forest::kSqrtFeatures) mf = "sqrt";
  else if (c.max_features == forest::kAllFeatures) mf = "all";
  else mf = c.max_features;
  return {{"n_trees", c.n_trees},         {"max_depth", c.max_depth},
          {"min_samples_split", c.min_samples_split},
          {"max_features", mf},           {"bootstrap", c.bootstrap},
          {"seed", c.seed}};
}

ordered_json describe(const mlp::TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"seed", c.seed}};
}

template <class Config>
Config checked(Config c) {
  try {
    validate(c);
  } catch (const InvalidArgument& e) {
    throw UsageError(e.what());
  }
  return c;
}

FeatureStore load_features(const fs::path& path) {
  need_file(path, "feature store; create one with `magscope extract`");
  auto store = load_store(path);
  if (store.empty()) throw InvalidArgument(path.string() + " holds no feature vectors");
  return store;
}

void cmd_train_rf(const Globals& g, const fs::path& features, const RfArgs& a) {
  const auto cfg = checked(a.config(g.seed));
  const auto store = load_features(features);
  const auto model = forest::fit_forest(view(store), store.labels, cfg, g.threads);
  const fs::path path = g.out / "model.rf.json";
  forest::save_forest(path, model);
  const auto train_acc =
      eval::accuracy(eval::confusion(store.labels, forest::predict(model, view(store), g.threads)));
  std::printf("trained %zu trees on %zu samples (training accuracy %.4f) -> %s\n",
              model.trees.size(), store.size(), train_acc, path.string().c_str());
  auto config = describe(cfg);
  config["features"] = fs::absolute(features).lexically_normal().string();
  config["samples"] = store.size();
  config["dim"] = store.dim;
  config["training_accuracy"] = train_acc;
  write_run_json(g, "train rf", std::move(config), {path});
}

void cmd_train_mlp(const Globals& g, const fs::path& features, const MlpArgs& a) {
  const auto cfg = checked(a.config(g.seed));
  const auto store = load_features(features);
  const auto result = mlp::train(store, cfg);
  const fs::path path = g.out / "model.mlp";
  mlp::save_model(path, result.params);
  mlp::save_sidecar(path, result.params, cfg, result.loss_history);
  const auto train_acc =
      eval::accuracy(eval::confusion(store.labels, mlp::predict(result.params, store)));
  std::printf("trained MLP for %d epochs on %zu samples (final loss %.4f, training accuracy %.4f) -> %s\n",
              cfg.epochs, store.size(), result.loss_history.empty() ? 0.0 : result.loss_history.back(),
              train_acc, path.string().c_str());
  auto config = describe(cfg);
  config["features"] = fs::absolute(features).lexically_normal().string();
  config["samples"] = store.size();
  config["dim"] = store.dim;
  config["training_accuracy"] = train_acc;
  auto sidecar = path;
  sidecar += ".json";
  write_run_json(g, "train mlp", std::move(config), {path, sidecar});
}

struct EvalArgs {
  fs::path features;
  std::string classifier = "rf";
  int folds = 5;
  std::string strategy = "patch";
  bool no_stratify = false;
  std::string label;
  RfArgs rf;
  MlpArgs mlp;
};

std::vector<fs::path> render_report(const fs::path& out, const eval::MetricsReport& report) {
  const std::string title = (report.features.empty() ? "" : report.features + " / ") +
                            report.classifier + " (summed over folds)";
  const fs::path csv = out / "confusion.csv";
  const fs::path svg = out / "confusion.svg";
  const fs::path table = out / "table.txt";
  write_text_atomic(csv, eval::confusion_csv(report.confusion));
  write_text_atomic(svg, eval::confusion_svg(report.confusion, title));
  write_text_atomic(table, eval::format_table(report));
  return {csv, svg, table};
}

void cmd_eval(const Globals& g, const EvalArgs& a) {
  const auto strategy = eval::strategy_from_string(a.strategy);
  if (!strategy) throw UsageError("--fold-strategy must be patch or slide");
  eval::ClassifierSpec spec;
  ordered_json classifier_config;
  if (a.classifier == "rf") {
    const auto cfg = checked(a.rf.config(g.seed));
    spec = cfg;
    classifier_config = describe(cfg);
  } else {
    const auto cfg = checked(a.mlp.config(g.seed));
    spec = cfg;
    classifier_config = describe(cfg);
  }
  const auto store = load_features(a.features);
  std::vector<std::string> slides;
  if (*strategy == eval::FoldStrategy::SlideGrouped) {
    for (const auto& id : store.patch_ids) slides.push_back(pyramid::slide_of_patch_id(id));
  }
  const auto plan =
      eval::make_folds(store.labels, slides, *strategy, !a.no_stratify, g.seed, a.folds);
  const std::string label = a.label.empty() ? a.features.stem().string() : a.label;
  const auto report = eval::cross_validate(store, spec, plan, g.threads, label);

  const fs::path json = g.out / "report.json";
  eval::write_report(json, report);
  auto outputs = render_report(g.out, report);
  outputs.insert(outputs.begin(), json);
  std::fputs(eval::format_table(report).c_str(), stdout);
  write_run_json(g, "eval",
                 {{"features", fs::absolute(a.features).lexically_normal().string()},
                  {"label", label},
                  {"classifier", a.classifier},
                  {"classifier_config", classifier_config},
                  {"folds", a.folds},
                  {"fold_strategy", a.strategy},
                  {"stratified", !a.no_stratify},
                  {"samples", store.size()},
                  {"dim", store.dim}},
                 outputs);
}

void cmd_report(const Globals& g, const fs::path& report_path) {
  need_file(report_path, "metrics report; create one with `magscope eval`");
  const auto report = eval::read_report(report_path);
  const auto outputs = render_report(g.out, report);
  std::fputs(eval::format_table(report).c_str(), stdout);
  write_run_json(g, "report", {{"report", fs::absolute(report_path).lexically_normal().string()}},
                 outputs);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"magscope: magnification-level recognition for image pyramids"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", std::string(kVersion));

  Globals g;
  for (int i = 0; i < argc; ++i) g.argv.emplace_back(argv[i]);
  std::optional<unsigned> threads_flag;
  app.add_option("--seed", g.seed, "Master random seed")->capture_default_str();
  app.add_option("--threads", threads_flag,
                 "Worker threads (default: MAGSCOPE_THREADS, else all cores)")
      ->check(CLI::PositiveNumber);
  app.add_option("--out", g.out, "Output directory")->capture_default_str();

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Render synthetic slides and a manifest");
  s->add_option("--slides", synth.slides, "Number of slides")->check(CLI::PositiveNumber)->capture_default_str();
  s->add_option("--width", synth.width, "Base image width in pixels")->capture_default_str();
  s->add_option("--height", synth.height, "Base image height in pixels")->capture_default_str();
  s->add_option("--base-power-mix", synth.mix, "Ratio of 40x-base to 20x-base slides, A:B")
      ->capture_default_str();
  s->add_option("--patch-size", synth.patch_size, "Patch size the slides must support")
      ->check(CLI::PositiveNumber)->capture_default_str();

  SampleArgs sample;
  auto* sa = app.add_subcommand("sample", "Sample center-aligned patches at every level");
  sa->add_option("--manifest", sample.manifest, "Slide manifest (JSONL)")->required();
  sa->add_option("--points", sample.points, "Points per slide")->check(CLI::PositiveNumber)->capture_default_str();
  sa->add_option("--patch-size", sample.patch_size, "Patch side in pixels")
      ->check(CLI::PositiveNumber)->capture_default_str();

  ExtractArgs extract;
  auto* ex = app.add_subcommand("extract", "Compute feature vectors for a patch index");
  ex->require_subcommand(1);
  auto* ex_lbp = ex->add_subcommand("lbp", "Rotation-invariant uniform LBP histograms");
  ex_lbp->add_option("--index", extract.index, "Patch index CSV")->required();
  ex_lbp->add_option("--preset", extract.preset, "LBP1 (r1,p8), LBP2 (r2,p16) or LBP3 (r3,p24)")
      ->check(CLI::IsMember({"LBP1", "LBP2", "LBP3"}))->capture_default_str();
  ex_lbp->add_option("--store", extract.store, "Feature store file, relative to --out (.csv for text)")
      ->capture_default_str();
  auto* ex_deep = ex->add_subcommand("deep", "Embeddings from an ONNX network");
  ex_deep->add_option("--index", extract.index, "Patch index CSV")->required();
  ex_deep->add_option("--model", extract.model, "ONNX model file")->required();
  ex_deep->add_option("--input-name", extract.input_name, "Graph input name")->capture_default_str();
  ex_deep->add_option("--output-name", extract.output_name, "Graph output name")->capture_default_str();
  ex_deep->add_option("--batch-size", extract.batch_size, "Inference batch size")
      ->check(CLI::PositiveNumber)->capture_default_str();
  ex_deep->add_option("--store", extract.store, "Feature store file, relative to --out (.csv for text)")
      ->capture_default_str();

  auto add_rf = [](CLI::App* cmd, RfArgs& a) {
    cmd->add_option("--trees", a.trees, "Number of trees")->capture_default_str();
    cmd->add_option("--max-depth", a.max_depth, "Maximum tree depth")->capture_default_str();
    cmd->add_option("--min-samples-split", a.min_samples_split, "Smallest node that may split")
        ->capture_default_str();
    cmd->add_option("--max-features", a.max_features, "Features per split: sqrt, all or a count")
        ->capture_default_str();
    cmd->add_flag("--no-bootstrap", a.no_bootstrap, "Grow every tree on the full training set");
  };
  auto add_mlp = [](CLI::App* cmd, MlpArgs& a) {
    cmd->add_option("--epochs", a.epochs, "Training epochs")->capture_default_str();
    cmd->add_option("--batch-size", a.batch_size, "Mini-batch size")->capture_default_str();
    cmd->add_option("--lr", a.learning_rate, "Adam learning rate")->capture_default_str();
  };

  fs::path train_features;
  RfArgs train_rf;
  MlpArgs train_mlp;
  auto* tr = app.add_subcommand("train", "Train a classifier on a feature store");
  tr->require_subcommand(1);
  auto* tr_rf = tr->add_subcommand("rf", "Random forest");
  tr_rf->add_option("--features", train_features, "Feature store")->required();
  add_rf(tr_rf, train_rf);
  auto* tr_mlp = tr->add_subcommand("mlp", "Multilayer perceptron");
  tr_mlp->add_option("--features", train_features, "Feature store")->required();
  add_mlp(tr_mlp, train_mlp);

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Cross-validate a classifier and write a metrics report");
  e->add_option("--features", ev.features, "Feature store")->required();
  e->add_option("--classifier", ev.classifier, "rf or mlp")
      ->check(CLI::IsMember({"rf", "mlp"}))->capture_default_str();
  e->add_option("--folds", ev.folds, "Number of folds")->check(CLI::Range(2, 1000))->capture_default_str();
  e->add_option("--fold-strategy", ev.strategy, "patch or slide (slide keeps each slide in one fold)")
      ->check(CLI::IsMember({"patch", "slide"}))->capture_default_str();
  e->add_flag("--no-stratify", ev.no_stratify, "Do not balance classes across patch-level folds");
  e->add_option("--label", ev.label, "Feature-set name in the report (default: store file stem)");
  add_rf(e, ev.rf);
  add_mlp(e, ev.mlp);

  fs::path report_path;
  auto* rp = app.add_subcommand("report", "Render a metrics report as CSV, SVG and a text table");
  rp->add_option("--report", report_path, "report.json from eval")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    g.threads = threads_flag ? *threads_flag : default_threads();
    if (g.threads == 0) g.threads = 1;
    fs::create_directories(g.out);
    if (*s) {
      cmd_synth(g, synth);
    } else if (*sa) {
      cmd_sample(g, sample);
    } else if (*ex_lbp) {
      cmd_extract_lbp(g, extract);
    } else if (*ex_deep) {
      cmd_extract_deep(g, extract);
    } else if (*tr_rf) {
      cmd_train_rf(g, train_features, train_rf);
    } else if (*tr_mlp) {
      cmd_train_mlp(g, train_features, train_mlp);
    } else if (*e) {
      cmd_eval(g, ev);
    } else if (*rp) {
      cmd_report(g, report_path);
    }
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return 0;
}
