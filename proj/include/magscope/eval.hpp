#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "magscope/features.hpp"
#include "magscope/forest.hpp"
#include "magscope/mag_level.hpp"
#include "magscope/mlp.hpp"

namespace magscope::eval {

enum class FoldStrategy { PatchLevel, SlideGrouped };

std::string_view to_string(FoldStrategy s) noexcept;
std::optional<FoldStrategy> strategy_from_string(std::string_view s) noexcept;

struct FoldPlan {
  int n_folds = 5;
  std::vector<int> assignments;  // fold index per sample
  FoldStrategy strategy = FoldStrategy::PatchLevel;
  bool stratified = true;
  std::uint64_t seed = 42;

  std::size_t size() const noexcept { return assignments.size(); }
  /// Sample indices held out in `fold`, ascending.
  std::vector<std::size_t> test_indices(int fold) const;
  /// Everything else, ascending.
  std::vector<std::size_t> train_indices(int fold) const;
};

/// Patch-level plans shuffle the samples (per class when stratified) and
/// deal them round-robin, the deal continuing from one class to the next,
/// so fold sizes and per-class fold counts differ by at most one.
/// Slide-grouped plans assign whole slides, largest first, to the currently
/// smallest fold; stratification is not attempted there.
/// Throws InvalidArgument when n < n_folds, when lengths differ, or when a
/// slide-grouped plan has fewer distinct slides than folds.
FoldPlan make_folds(std::span<const MagLevel> labels, std::span<const std::string> slide_ids,
                    FoldStrategy strategy, bool stratified, std::uint64_t seed, int n_folds = 5);

/// Square count matrix, rows = actual, columns = predicted.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes = kNumLevels);

  std::size_t classes() const noexcept { return k_; }
  std::uint64_t& at(std::size_t actual, std::size_t predicted) { return counts_[actual * k_ + predicted]; }
  std::uint64_t at(std::size_t actual, std::size_t predicted) const {
    return counts_[actual * k_ + predicted];
  }

  std::uint64_t total() const noexcept;
  std::uint64_t trace() const noexcept;
  std::uint64_t row_sum(std::size_t k) const noexcept;
  std::uint64_t col_sum(std::size_t k) const noexcept;

  ConfusionMatrix& operator+=(const ConfusionMatrix& other);
  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

  /// Class i of the result is class perm[i] of this matrix.
  ConfusionMatrix permuted(std::span<const std::size_t> perm) const;

 private:
  std::size_t k_;
  std::vector<std::uint64_t> counts_;
};

/// Throws DimensionMismatch on unequal lengths.
ConfusionMatrix confusion(std::span<const MagLevel> actual, std::span<const MagLevel> predicted);
/// Label strings such as "5x"; throws InvalidArgument on an unknown label.
ConfusionMatrix confusion(std::span<const std::string> actual, std::span<const std::string> predicted);

// Each metric throws InvalidArgument on an empty matrix.
double accuracy(const ConfusionMatrix& cm);
/// Cohen's kappa; when chance agreement is 1 the result is 1 for perfect
/// agreement and 0 otherwise.
double kappa(const ConfusionMatrix& cm);
/// Harmonic per-class F1 averaged over classes that have support.
double macro_f1(const ConfusionMatrix& cm);
/// Row-normalized diagonal; empty for classes without support.
std::vector<std::optional<double>> per_class_accuracy(const ConfusionMatrix& cm);

struct FoldMetrics {
  double accuracy = 0.0;
  double kappa = 0.0;
  double f1 = 0.0;
  std::size_t train_size = 0;
  std::size_t test_size = 0;
  ConfusionMatrix confusion;
};

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population
};

MeanStd mean_std(std::span<const double> values);

using ClassifierSpec = std::variant<forest::ForestConfig, mlp::TrainConfig>;

std::string classifier_name(const ClassifierSpec& spec);

struct MetricsReport {
  std::string features;    // free-form label, e.g. "LBP3"
  std::string classifier;  // "rf" or "mlp"
  FoldStrategy strategy = FoldStrategy::PatchLevel;
  bool stratified = true;
  std::uint64_t seed = 42;
  std::vector<FoldMetrics> folds;
  MeanStd accuracy, kappa, f1;
  ConfusionMatrix confusion;  // summed over folds
  std::vector<std::optional<double>> per_class_accuracy;
};

/// Fills the aggregate fields from `folds`.
void summarize(MetricsReport& report);

/// Seed used for the classifier of fold `fold`.
std::uint64_t fold_seed(std::uint64_t classifier_seed, int fold) noexcept;

/// Trains a fresh classifier on each training split and scores the held-out
/// fold. Training errors are rethrown with the fold number prepended.
/// Throws DimensionMismatch if the plan and store differ in size.
MetricsReport cross_validate(const FeatureStore& store, const ClassifierSpec& spec,
                             const FoldPlan& plan, unsigned threads = 1,
                             std::string features_label = {});

std::string report_json(const MetricsReport& report);
/// Throws ParseError (line 1) on malformed input.
MetricsReport parse_report_json(std::string_view text);
void write_report(const std::filesystem::path& path, const MetricsReport& report);
MetricsReport read_report(const std::filesystem::path& path);

/// Header row and column of canonical labels, counts in the cells.
std::string confusion_csv(const ConfusionMatrix& cm);
/// Row-normalized heatmap with count and percentage annotations.
std::string confusion_svg(const ConfusionMatrix& cm, std::string_view title);
/// Plain-text table: one row per fold, then "All Folds" as mean ± std.
std::string format_table(const MetricsReport& report);

}  // namespace magscope::eval
