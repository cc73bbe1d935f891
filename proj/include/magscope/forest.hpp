#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "magscope/features.hpp"
#include "magscope/mag_level.hpp"

namespace magscope::forest {

using ClassCounts = std::array<std::uint32_t, kNumLevels>;

/// Sentinels for ForestConfig::max_features; positive values are counts.
inline constexpr int kSqrtFeatures = 0;
inline constexpr int kAllFeatures = -1;

struct ForestConfig {
  int n_trees = 1000;
  int max_depth = 50;
  int min_samples_split = 2;
  int max_features = kSqrtFeatures;
  bool bootstrap = true;
  std::uint64_t seed = 42;

  friend bool operator==(const ForestConfig&, const ForestConfig&) = default;
};

/// Features sampled at each node for dimension d, in [1, d].
int features_per_split(const ForestConfig& cfg, std::size_t dim);

/// Throws InvalidArgument on non-positive counts.
void validate(const ForestConfig& cfg);

/// Gini impurity 1 - sum (c_k / n)^2 of a count vector.
double gini(std::span<const std::uint32_t> counts);

/// Impurity decrease of a split. Throws InvalidArgument when
/// left + right != parent for some class or the parent is empty.
double gini_gain(std::span<const std::uint32_t> parent, std::span<const std::uint32_t> left,
                 std::span<const std::uint32_t> right);

struct Node {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  ClassCounts counts{};  // leaves only

  bool is_leaf() const noexcept { return feature < 0; }
  friend bool operator==(const Node&, const Node&) = default;
};

/// Binary tree, root at index 0. Samples with value <= threshold go left.
struct DecisionTree {
  std::vector<Node> nodes;

  /// Leaf reached by `x`.
  const Node& leaf_for(std::span<const float> x) const;
  /// Argmax of the leaf counts, ties to the lowest ordinal.
  MagLevel predict(std::span<const float> x) const;
  /// Longest root-to-leaf path in edges.
  int depth() const;

  friend bool operator==(const DecisionTree&, const DecisionTree&) = default;
};

/// Grows one CART tree. Each node samples features_per_split features
/// without replacement, tries every midpoint between consecutive distinct
/// values, and keeps the best Gini gain (ties: lower feature, then lower
/// threshold). Growth stops at max_depth, on pure nodes, below
/// min_samples_split, or when no sampled feature varies.
DecisionTree fit_tree(MatrixView x, std::span<const MagLevel> y, const ForestConfig& cfg,
                      std::uint64_t tree_seed);

struct Forest {
  ForestConfig config;
  std::size_t dim = 0;
  std::vector<DecisionTree> trees;

  friend bool operator==(const Forest&, const Forest&) = default;
};

std::uint64_t tree_seed(std::uint64_t forest_seed, std::size_t tree_index) noexcept;

/// Tree t is grown with tree_seed(cfg.seed, t), so the thread count never
/// changes the result.
Forest fit_forest(MatrixView x, std::span<const MagLevel> y, const ForestConfig& cfg,
                  unsigned threads = 1);

/// Plurality vote over the trees' leaf labels, ties to the lowest ordinal.
MagLevel predict(const Forest& forest, std::span<const float> x);
std::vector<MagLevel> predict(const Forest& forest, MatrixView x, unsigned threads = 1);

void save_forest(const std::filesystem::path& path, const Forest& forest);
Forest load_forest(const std::filesystem::path& path);

}  // namespace magscope::forest
