#include "magscope/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "magscope/error.hpp"
#include "magscope/image.hpp"
#include "magscope/parallel.hpp"
#include "magscope/rng.hpp"

namespace magscope::eval {
namespace {

using nlohmann::ordered_json;

void require_nonempty(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw InvalidArgument("confusion matrix is empty");
}

MagLevel checked_level(MagLevel level) {
  if (ordinal(level) >= kNumLevels) {
    throw InvalidArgument("unknown label ordinal " + std::to_string(ordinal(level)));
  }
  return level;
}

ordered_json optional_array(const std::vector<std::optional<double>>& values) {
  auto arr = ordered_json::array();
  for (const auto& v : values) arr.push_back(v ? ordered_json(*v) : ordered_json(nullptr));
  return arr;
}

ordered_json matrix_json(const ConfusionMatrix& cm) {
  auto rows = ordered_json::array();
  for (std::size_t a = 0; a < cm.classes(); ++a) {
    auto row = ordered_json::array();
    for (std::size_t p = 0; p < cm.classes(); ++p) row.push_back(cm.at(a, p));
    rows.push_back(std::move(row));
  }
  return rows;
}

ConfusionMatrix matrix_from_json(const ordered_json& j) {
  if (!j.is_array() || j.size() != kNumLevels) throw ParseError(1, "confusion must be 5x5");
  ConfusionMatrix cm;
  for (std::size_t a = 0; a < kNumLevels; ++a) {
    if (!j[a].is_array() || j[a].size() != kNumLevels) throw ParseError(1, "confusion must be 5x5");
    for (std::size_t p = 0; p < kNumLevels; ++p) cm.at(a, p) = j[a][p].get<std::uint64_t>();
  }
  return cm;
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

std::string_view to_string(FoldStrategy s) noexcept {
  return s == FoldStrategy::PatchLevel ? "patch" : "slide";
}

std::optional<FoldStrategy> strategy_from_string(std::string_view s) noexcept {
  if (s == "patch") return FoldStrategy::PatchLevel;
  if (s == "slide") return FoldStrategy::SlideGrouped;
  return std::nullopt;
}

std::vector<std::size_t> FoldPlan::test_indices(int fold) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < assignments.size(); ++i) {
    if (assignments[i] == fold) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> FoldPlan::train_indices(int fold) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < assignments.size(); ++i) {
    if (assignments[i] != fold) out.push_back(i);
  }
  return out;
}

FoldPlan make_folds(std::span<const MagLevel> labels, std::span<const std::string> slide_ids,
                    FoldStrategy strategy, bool stratified, std::uint64_t seed, int n_folds) {
  if (n_folds < 2) throw InvalidArgument("need at least 2 folds");
  const std::size_t n = labels.size();
  if (n < static_cast<std::size_t>(n_folds)) {
    throw InvalidArgument("need at least " + std::to_string(n_folds) + " samples, got " +
                          std::to_string(n));
  }
  FoldPlan plan;
  plan.n_folds = n_folds;
  plan.strategy = strategy;
  plan.stratified = stratified;
  plan.seed = seed;
  plan.assignments.assign(n, -1);
  Rng rng(seed);
  const auto k = static_cast<std::size_t>(n_folds);

  if (strategy == FoldStrategy::PatchLevel) {
    std::vector<std::vector<std::size_t>> groups(stratified ? kNumLevels : 1);
    for (std::size_t i = 0; i < n; ++i) {
      groups[stratified ? ordinal(checked_level(labels[i])) : 0].push_back(i);
    }
    std::size_t dealt = 0;
    for (auto& g : groups) {
      rng.shuffle(g.begin(), g.end());
      for (std::size_t i : g) plan.assignments[i] = static_cast<int>(dealt++ % k);
    }
    return plan;
  }

  if (slide_ids.size() != n) throw InvalidArgument("slide id count differs from label count");
  std::map<std::string_view, std::vector<std::size_t>> by_slide;
  for (std::size_t i = 0; i < n; ++i) by_slide[slide_ids[i]].push_back(i);
  if (by_slide.size() < k) {
    throw InvalidArgument("slide-grouped folds need at least " + std::to_string(k) +
                          " distinct slides, got " + std::to_string(by_slide.size()));
  }
  std::vector<const std::vector<std::size_t>*> slides;
  for (const auto& [id, members] : by_slide) slides.push_back(&members);
  rng.shuffle(slides.begin(), slides.end());
  std::stable_sort(slides.begin(), slides.end(),
                   [](const auto* a, const auto* b) { return a->size() > b->size(); });
  std::vector<std::size_t> fold_size(k, 0);
  for (const auto* members : slides) {
    const auto fold = static_cast<std::size_t>(
        std::min_element(fold_size.begin(), fold_size.end()) - fold_size.begin());
    for (std::size_t i : *members) plan.assignments[i] = static_cast<int>(fold);
    fold_size[fold] += members->size();
  }
  return plan;
}

ConfusionMatrix::ConfusionMatrix(std::size_t classes) : k_(classes), counts_(classes * classes, 0) {
  if (classes == 0) throw InvalidArgument("confusion matrix needs at least one class");
}

std::uint64_t ConfusionMatrix::total() const noexcept {
  return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0});
}

std::uint64_t ConfusionMatrix::trace() const noexcept {
  std::uint64_t t = 0;
  for (std::size_t i = 0; i < k_; ++i) t += counts_[i * k_ + i];
  return t;
}

std::uint64_t ConfusionMatrix::row_sum(std::size_t r) const noexcept {
  std::uint64_t t = 0;
  for (std::size_t c = 0; c < k_; ++c) t += counts_[r * k_ + c];
  return t;
}

std::uint64_t ConfusionMatrix::col_sum(std::size_t c) const noexcept {
  std::uint64_t t = 0;
  for (std::size_t r = 0; r < k_; ++r) t += counts_[r * k_ + c];
  return t;
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  if (other.k_ != k_) throw DimensionMismatch("confusion matrices differ in class count");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  return *this;
}

ConfusionMatrix ConfusionMatrix::permuted(std::span<const std::size_t> perm) const {
  if (perm.size() != k_) throw DimensionMismatch("permutation length differs from class count");
  std::vector<bool> seen(k_, false);
  for (std::size_t p : perm) {
    if (p >= k_ || seen[p]) throw InvalidArgument("not a permutation");
    seen[p] = true;
  }
  ConfusionMatrix out(k_);
  for (std::size_t a = 0; a < k_; ++a) {
    for (std::size_t p = 0; p < k_; ++p) out.at(a, p) = at(perm[a], perm[p]);
  }
  return out;
}

ConfusionMatrix confusion(std::span<const MagLevel> actual, std::span<const MagLevel> predicted) {
  if (actual.size() != predicted.size()) {
    throw DimensionMismatch("actual has " + std::to_string(actual.size()) + " labels, predicted " +
                            std::to_string(predicted.size()));
  }
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < actual.size(); ++i) {
    ++cm.at(ordinal(checked_level(actual[i])), ordinal(checked_level(predicted[i])));
  }
  return cm;
}

ConfusionMatrix confusion(std::span<const std::string> actual,
                          std::span<const std::string> predicted) {
  auto parse = [](const std::string& s) {
    const auto level = level_from_string(s);
    if (!level) throw InvalidArgument("unknown label '" + s + "'");
    return *level;
  };
  std::vector<MagLevel> a, p;
  for (const auto& s : actual) a.push_back(parse(s));
  for (const auto& s : predicted) p.push_back(parse(s));
  return confusion(a, p);
}

double accuracy(const ConfusionMatrix& cm) {
  require_nonempty(cm);
  return static_cast<double>(cm.trace()) / static_cast<double>(cm.total());
}

double kappa(const ConfusionMatrix& cm) {
  require_nonempty(cm);
  const auto n = static_cast<double>(cm.total());
  const double po = static_cast<double>(cm.trace()) / n;
  double pe = 0.0;
  for (std::size_t k = 0; k < cm.classes(); ++k) {
    pe += static_cast<double>(cm.row_sum(k)) * static_cast<double>(cm.col_sum(k));
  }
  pe /= n * n;
  if (pe == 1.0) return po == 1.0 ? 1.0 : 0.0;
  return (po - pe) / (1.0 - pe);
}

double macro_f1(const ConfusionMatrix& cm) {
  require_nonempty(cm);
  double sum = 0.0;
  std::size_t counted = 0;
  for (std::size_t k = 0; k < cm.classes(); ++k) {
    const auto support = cm.row_sum(k);
    if (support == 0) continue;
    ++counted;
    const auto tp = static_cast<double>(cm.at(k, k));
    const auto predicted = cm.col_sum(k);
    if (tp == 0.0 || predicted == 0) continue;
    const double precision = tp / static_cast<double>(predicted);
    const double recall = tp / static_cast<double>(support);
    sum += 2.0 * precision * recall / (precision + recall);
  }
  return sum / static_cast<double>(counted);
}

std::vector<std::optional<double>> per_class_accuracy(const ConfusionMatrix& cm) {
  std::vector<std::optional<double>> out(cm.classes());
  for (std::size_t k = 0; k < cm.classes(); ++k) {
    if (const auto r = cm.row_sum(k); r > 0) {
      out[k] = static_cast<double>(cm.at(k, k)) / static_cast<double>(r);
    }
  }
  return out;
}

MeanStd mean_std(std::span<const double> values) {
  if (values.empty()) return {};
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / n)};
}

std::string classifier_name(const ClassifierSpec& spec) {
  return std::holds_alternative<forest::ForestConfig>(spec) ? "rf" : "mlp";
}

void summarize(MetricsReport& report) {
  std::vector<double> acc, kap, f1;
  report.confusion = ConfusionMatrix();
  for (const auto& f : report.folds) {
    acc.push_back(f.accuracy);
    kap.push_back(f.kappa);
    f1.push_back(f.f1);
    report.confusion += f.confusion;
  }
  report.accuracy = mean_std(acc);
  report.kappa = mean_std(kap);
  report.f1 = mean_std(f1);
  report.per_class_accuracy = per_class_accuracy(report.confusion);
}

std::uint64_t fold_seed(std::uint64_t classifier_seed, int fold) noexcept {
  return derive_seed(classifier_seed, static_cast<std::uint64_t>(fold));
}

MetricsReport cross_validate(const FeatureStore& store, const ClassifierSpec& spec,
                             const FoldPlan& plan, unsigned threads, std::string features_label) {
  if (plan.size() != store.size()) {
    throw DimensionMismatch("fold plan covers " + std::to_string(plan.size()) +
                            " samples, store has " + std::to_string(store.size()));
  }
  std::visit([](const auto& cfg) { validate(cfg); }, spec);

  MetricsReport report;
  report.features = std::move(features_label);
  report.classifier = classifier_name(spec);
  report.strategy = plan.strategy;
  report.stratified = plan.stratified;
  report.seed = plan.seed;
  report.folds.resize(static_cast<std::size_t>(plan.n_folds));

  auto run_fold = [&](std::size_t f, unsigned inner_threads) {
    const int fold = static_cast<int>(f);
    const auto train_idx = plan.train_indices(fold);
    const auto test_idx = plan.test_indices(fold);
    const FeatureStore train = store.subset(train_idx);
    const FeatureStore test = store.subset(test_idx);
    std::vector<MagLevel> predicted;
    try {
      if (const auto* rf = std::get_if<forest::ForestConfig>(&spec)) {
        auto cfg = *rf;
        cfg.seed = fold_seed(rf->seed, fold);
        const auto model = forest::fit_forest(view(train), train.labels, cfg, inner_threads);
        predicted = forest::predict(model, view(test), inner_threads);
      } else {
        auto cfg = std::get<mlp::TrainConfig>(spec);
        cfg.seed = fold_seed(cfg.seed, fold);
        const auto result = mlp::train(train, cfg);
        predicted = mlp::predict(result.params, test);
      }
    } catch (const TrainingDiverged& e) {
      throw TrainingDiverged("fold " + std::to_string(fold + 1) + ": " + e.what());
    } catch (const InvalidArgument& e) {
      throw InvalidArgument("fold " + std::to_string(fold + 1) + ": " + e.what());
    }
    FoldMetrics m;
    m.confusion = confusion(test.labels, predicted);
    m.accuracy = accuracy(m.confusion);
    m.kappa = kappa(m.confusion);
    m.f1 = macro_f1(m.confusion);
    m.train_size = train_idx.size();
    m.test_size = test_idx.size();
    report.folds[f] = std::move(m);
  };

  // The forest already spreads trees over threads; MLP folds run side by side.
  if (std::holds_alternative<forest::ForestConfig>(spec)) {
    for (std::size_t f = 0; f < report.folds.size(); ++f) run_fold(f, threads);
  } else {
    parallel_for(report.folds.size(), threads, [&](std::size_t f) { run_fold(f, 1); });
  }
  summarize(report);
  return report;
}

std::string report_json(const MetricsReport& report) {
  ordered_json doc;
  doc["features"] = report.features;
  doc["classifier"] = report.classifier;
  doc["fold_strategy"] = to_string(report.strategy);
  doc["stratified"] = report.stratified;
  doc["seed"] = report.seed;
  doc["label_order"] = ordered_json::array();
  for (MagLevel l : kAllLevels) doc["label_order"].push_back(to_string(l));
  auto folds = ordered_json::array();
  for (std::size_t i = 0; i < report.folds.size(); ++i) {
    const auto& f = report.folds[i];
    folds.push_back({{"fold", i + 1},
                     {"accuracy", f.accuracy},
                     {"kappa", f.kappa},
                     {"f1", f.f1},
                     {"train_size", f.train_size},
                     {"test_size", f.test_size},
                     {"confusion", matrix_json(f.confusion)}});
  }
  doc["folds"] = std::move(folds);
  auto ms = [](const MeanStd& m) { return ordered_json{{"mean", m.mean}, {"std", m.std}}; };
  doc["all_folds"] = {{"accuracy", ms(report.accuracy)},
                      {"kappa", ms(report.kappa)},
                      {"f1", ms(report.f1)}};
  doc["per_class_accuracy"] = optional_array(report.per_class_accuracy);
  doc["confusion"] = matrix_json(report.confusion);
  return doc.dump(2) + "\n";
}

MetricsReport parse_report_json(std::string_view text) {
  MetricsReport r;
  try {
    const auto doc = ordered_json::parse(text);
    r.features = doc.at("features").get<std::string>();
    r.classifier = doc.at("classifier").get<std::string>();
    const auto strategy = strategy_from_string(doc.at("fold_strategy").get<std::string>());
    if (!strategy) throw ParseError(1, "unknown fold_strategy");
    r.strategy = *strategy;
    r.stratified = doc.at("stratified").get<bool>();
    r.seed = doc.at("seed").get<std::uint64_t>();
    for (const auto& f : doc.at("folds")) {
      FoldMetrics m;
      m.accuracy = f.at("accuracy").get<double>();
      m.kappa = f.at("kappa").get<double>();
      m.f1 = f.at("f1").get<double>();
      m.train_size = f.at("train_size").get<std::size_t>();
      m.test_size = f.at("test_size").get<std::size_t>();
      m.confusion = matrix_from_json(f.at("confusion"));
      r.folds.push_back(std::move(m));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(1, std::string("malformed report: ") + e.what());
  }
  summarize(r);
  return r;
}

void write_report(const std::filesystem::path& path, const MetricsReport& report) {
  write_text_atomic(path, report_json(report));
}

MetricsReport read_report(const std::filesystem::path& path) {
  try {
    return parse_report_json(read_text(path));
  } catch (const ParseError& e) {
    throw ParseError(e.line(), path.string() + ": " + e.what());
  }
}

std::string confusion_csv(const ConfusionMatrix& cm) {
  if (cm.classes() != kNumLevels) throw DimensionMismatch("expected a 5-class confusion matrix");
  std::ostringstream out;
  out << "actual\\predicted";
  for (MagLevel l : kAllLevels) out << ',' << to_string(l);
  out << '\n';
  for (std::size_t a = 0; a < kNumLevels; ++a) {
    out << to_string(kAllLevels[a]);
    for (std::size_t p = 0; p < kNumLevels; ++p) out << ',' << cm.at(a, p);
    out << '\n';
  }
  return out.str();
}

std::string confusion_svg(const ConfusionMatrix& cm, std::string_view title) {
  if (cm.classes() != kNumLevels) throw DimensionMismatch("expected a 5-class confusion matrix");
  constexpr int cell = 80, left = 90, top = 70;
  constexpr int size = cell * static_cast<int>(kNumLevels);
  std::ostringstream out;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << left + size + 20 << "\" height=\""
      << top + size + 50 << "\" font-family=\"sans-serif\" font-size=\"13\">\n";
  std::string escaped;
  for (char c : title) {
    switch (c) {
      case '<': escaped += "&lt;"; break;
      case '>': escaped += "&gt;"; break;
      case '&': escaped += "&amp;"; break;
      case '"': escaped += "&quot;"; break;
      default: escaped += c;
    }
  }
  out << "<text x=\"" << left + size / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">"
      << escaped << "</text>\n";
  out << "<text x=\"" << left + size / 2 << "\" y=\"" << top + size + 40
      << "\" text-anchor=\"middle\">predicted</text>\n";
  out << "<text x=\"20\" y=\"" << top + size / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 20 "
      << top + size / 2 << ")\">actual</text>\n";
  for (std::size_t i = 0; i < kNumLevels; ++i) {
    const int c = static_cast<int>(i) * cell + cell / 2;
    out << "<text x=\"" << left + c << "\" y=\"" << top - 8 << "\" text-anchor=\"middle\">"
        << to_string(kAllLevels[i]) << "</text>\n";
    out << "<text x=\"" << left - 8 << "\" y=\"" << top + c + 5 << "\" text-anchor=\"end\">"
        << to_string(kAllLevels[i]) << "</text>\n";
  }
  for (std::size_t a = 0; a < kNumLevels; ++a) {
    const auto row = cm.row_sum(a);
    for (std::size_t p = 0; p < kNumLevels; ++p) {
      const double frac = row ? static_cast<double>(cm.at(a, p)) / static_cast<double>(row) : 0.0;
      // White to dark blue.
      const int r = static_cast<int>(std::lround(255 - frac * (255 - 8)));
      const int g = static_cast<int>(std::lround(255 - frac * (255 - 48)));
      const int b = static_cast<int>(std::lround(255 - frac * (255 - 107)));
      const int x = left + static_cast<int>(p) * cell;
      const int y = top + static_cast<int>(a) * cell;
      out << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << cell << "\" height=\"" << cell
          << "\" fill=\"rgb(" << r << ',' << g << ',' << b << ")\" stroke=\"#888\"/>\n";
      const char* ink = frac > 0.5 ? "#fff" : "#000";
      out << "<text x=\"" << x + cell / 2 << "\" y=\"" << y + cell / 2 - 4
          << "\" text-anchor=\"middle\" fill=\"" << ink << "\">" << cm.at(a, p) << "</text>\n";
      out << "<text x=\"" << x + cell / 2 << "\" y=\"" << y + cell / 2 + 14
          << "\" text-anchor=\"middle\" font-size=\"11\" fill=\"" << ink << "\">"
          << fixed(100.0 * frac, 1) << "%</text>\n";
    }
  }
  out << "</svg>\n";
  return out.str();
}

std::string format_table(const MetricsReport& report) {
  std::ostringstream out;
  out << "features: " << (report.features.empty() ? "-" : report.features)
      << "  classifier: " << report.classifier << "  folds: " << to_string(report.strategy)
      << (report.stratified && report.strategy == FoldStrategy::PatchLevel ? " (stratified)" : "")
      << '\n';
  out << "fold        accuracy        kappa           f1\n";
  for (std::size_t i = 0; i < report.folds.size(); ++i) {
    const auto& f = report.folds[i];
    out << "Fold " << i + 1 << "      " << fixed(f.accuracy, 3) << "           "
        << fixed(f.kappa, 3) << "           " << fixed(f.f1, 3) << '\n';
  }
  auto ms = [](const MeanStd& m) { return fixed(m.mean, 3) + " ± " + fixed(m.std, 3); };
  out << "All Folds   " << ms(report.accuracy) << "   " << ms(report.kappa) << "   "
      << ms(report.f1) << '\n';
  out << "per-class accuracy:";
  for (std::size_t k = 0; k < report.per_class_accuracy.size(); ++k) {
    out << ' ' << to_string(kAllLevels[k]) << '=';
    const auto& v = report.per_class_accuracy[k];
    out << (v ? fixed(*v, 3) : std::string("n/a"));
  }
  out << '\n';
  return out.str();
}

}  // namespace magscope::eval
