#include "magscope/forest.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <string>
#include <utility>

#include <json.hpp>

#include "magscope/error.hpp"
#include "magscope/image.hpp"
#include "magscope/parallel.hpp"
#include "magscope/rng.hpp"

namespace magscope::forest {
namespace {

using nlohmann::json;

std::size_t argmax_counts(const ClassCounts& counts) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < counts.size(); ++k) {
    if (counts[k] > counts[best]) best = k;
  }
  return best;
}

bool is_pure(const ClassCounts& counts) {
  return std::count_if(counts.begin(), counts.end(), [](auto c) { return c > 0; }) <= 1;
}

// Gains closer than this are ties and keep the earlier candidate.
constexpr double kGainTolerance = 1e-12;

struct Split {
  int feature = -1;
  double threshold = 0.0;
  double gain = -1.0;
};

class TreeBuilder {
 public:
  TreeBuilder(MatrixView x, std::span<const MagLevel> y, const ForestConfig& cfg,
              std::uint64_t seed)
      : x_(x), y_(y), cfg_(cfg), rng_(seed),
        k_(features_per_split(cfg, x.cols)), features_(x.cols) {
    std::iota(features_.begin(), features_.end(), 0);
  }

  DecisionTree build() {
    const std::size_t n = x_.rows;
    std::vector<std::uint32_t> samples(n);
    if (cfg_.bootstrap) {
      for (auto& s : samples) s = static_cast<std::uint32_t>(rng_.uniform_index(n));
    } else {
      std::iota(samples.begin(), samples.end(), 0u);
    }

    struct Task {
      int node;
      std::size_t begin;
      std::size_t end;
      int depth;
    };
    DecisionTree tree;
    tree.nodes.emplace_back();
    std::vector<Task> stack = {{0, 0, n, 0}};
    while (!stack.empty()) {
      const Task task = stack.back();
      stack.pop_back();
      std::span<std::uint32_t> node_samples(samples.data() + task.begin, task.end - task.begin);

      ClassCounts counts{};
      for (auto s : node_samples) ++counts[ordinal(y_[s])];

      Split split;
      if (task.depth < cfg_.max_depth && !is_pure(counts) &&
          node_samples.size() >= static_cast<std::size_t>(cfg_.min_samples_split)) {
        split = best_split(node_samples, counts);
      }
      if (split.feature < 0) {
        tree.nodes[task.node].counts = counts;
        continue;
      }

      const auto mid = std::partition(node_samples.begin(), node_samples.end(), [&](auto s) {
        return static_cast<double>(x_.at(s, static_cast<std::size_t>(split.feature))) <=
               split.threshold;
      });
      const std::size_t split_at = task.begin + static_cast<std::size_t>(mid - node_samples.begin());

      const int left = static_cast<int>(tree.nodes.size());
      const int right = left + 1;
      tree.nodes.emplace_back();
      tree.nodes.emplace_back();
      Node& node = tree.nodes[task.node];
      node.feature = split.feature;
      node.threshold = split.threshold;
      node.left = left;
      node.right = right;
      // Right first so the left subtree is expanded first.
      stack.push_back({right, split_at, task.end, task.depth + 1});
      stack.push_back({left, task.begin, split_at, task.depth + 1});
    }
    return tree;
  }

 private:
  Split best_split(std::span<const std::uint32_t> samples, const ClassCounts& parent) {
    // Partial Fisher-Yates draw of k features, evaluated in ascending order.
    const std::size_t d = features_.size();
    for (std::size_t i = 0; i < static_cast<std::size_t>(k_); ++i) {
      const std::size_t j = i + rng_.uniform_index(d - i);
      std::swap(features_[i], features_[j]);
    }
    std::vector<int> chosen(features_.begin(), features_.begin() + k_);
    std::sort(chosen.begin(), chosen.end());

    Split best;
    std::vector<std::pair<float, std::uint8_t>> column(samples.size());
    for (int f : chosen) {
      for (std::size_t i = 0; i < samples.size(); ++i) {
        column[i] = {x_.at(samples[i], static_cast<std::size_t>(f)),
                     static_cast<std::uint8_t>(ordinal(y_[samples[i]]))};
      }
      std::sort(column.begin(), column.end());
      ClassCounts left{};
      ClassCounts right = parent;
      for (std::size_t i = 0; i + 1 < column.size(); ++i) {
        ++left[column[i].second];
        --right[column[i].second];
        if (column[i].first == column[i + 1].first) continue;
        const double gain = gini_gain(parent, left, right);
        if (gain > best.gain + kGainTolerance) {
          best.feature = f;
          best.threshold = (static_cast<double>(column[i].first) + column[i + 1].first) / 2.0;
          best.gain = gain;
        }
      }
    }
    return best;
  }

  MatrixView x_;
  std::span<const MagLevel> y_;
  const ForestConfig& cfg_;
  Rng rng_;
  int k_;
  std::vector<int> features_;
};

json config_to_json(const ForestConfig& cfg) {
  return {{"n_trees", cfg.n_trees},
          {"max_depth", cfg.max_depth},
          {"min_samples_split", cfg.min_samples_split},
          {"max_features", cfg.max_features == kSqrtFeatures ? json("sqrt")
                           : cfg.max_features == kAllFeatures ? json("all")
                                                              : json(cfg.max_features)},
          {"bootstrap", cfg.bootstrap},
          {"seed", cfg.seed}};
}

ForestConfig config_from_json(const json& j) {
  ForestConfig cfg;
  cfg.n_trees = j.at("n_trees").get<int>();
  cfg.max_depth = j.at("max_depth").get<int>();
  cfg.min_samples_split = j.at("min_samples_split").get<int>();
  const json& mf = j.at("max_features");
  if (mf.is_string()) {
    const auto s = mf.get<std::string>();
    if (s == "sqrt") {
      cfg.max_features = kSqrtFeatures;
    } else if (s == "all") {
      cfg.max_features = kAllFeatures;
    } else {
      throw MalformedModel("unknown max_features '" + s + "'");
    }
  } else {
    cfg.max_features = mf.get<int>();
  }
  cfg.bootstrap = j.at("bootstrap").get<bool>();
  cfg.seed = j.at("seed").get<std::uint64_t>();
  return cfg;
}

}  // namespace

int features_per_split(const ForestConfig& cfg, std::size_t dim) {
  if (dim == 0) throw InvalidArgument("feature dimension must be positive");
  const auto d = static_cast<int>(dim);
  if (cfg.max_features == kAllFeatures) return d;
  if (cfg.max_features == kSqrtFeatures) {
    return std::max(1, static_cast<int>(std::floor(std::sqrt(static_cast<double>(d)))));
  }
  if (cfg.max_features < 1) throw InvalidArgument("max_features must be positive");
  return std::min(cfg.max_features, d);
}

void validate(const ForestConfig& cfg) {
  if (cfg.n_trees < 1) throw InvalidArgument("n_trees must be >= 1");
  if (cfg.max_depth < 1) throw InvalidArgument("max_depth must be >= 1");
  if (cfg.min_samples_split < 2) throw InvalidArgument("min_samples_split must be >= 2");
  if (cfg.max_features < kAllFeatures) throw InvalidArgument("invalid max_features");
}

double gini(std::span<const std::uint32_t> counts) {
  double n = 0;
  for (auto c : counts) n += c;
  if (n == 0) return 0.0;
  double sum_sq = 0;
  for (auto c : counts) {
    const double p = c / n;
    sum_sq += p * p;
  }
  return 1.0 - sum_sq;
}

double gini_gain(std::span<const std::uint32_t> parent, std::span<const std::uint32_t> left,
                 std::span<const std::uint32_t> right) {
  if (parent.size() != left.size() || parent.size() != right.size()) {
    throw InvalidArgument("count vectors differ in length");
  }
  double n = 0, n_left = 0, n_right = 0;
  for (std::size_t k = 0; k < parent.size(); ++k) {
    if (static_cast<std::uint64_t>(left[k]) + right[k] != parent[k]) {
      throw InvalidArgument("left + right counts differ from the parent for class " +
                            std::to_string(k));
    }
    n += parent[k];
    n_left += left[k];
    n_right += right[k];
  }
  if (n == 0) throw InvalidArgument("parent node is empty");
  return gini(parent) - (n_left / n) * gini(left) - (n_right / n) * gini(right);
}

const Node& DecisionTree::leaf_for(std::span<const float> x) const {
  std::size_t i = 0;
  while (!nodes[i].is_leaf()) {
    const Node& n = nodes[i];
    i = static_cast<std::size_t>(
        static_cast<double>(x[static_cast<std::size_t>(n.feature)]) <= n.threshold ? n.left
                                                                                  : n.right);
  }
  return nodes[i];
}

MagLevel DecisionTree::predict(std::span<const float> x) const {
  return kAllLevels[argmax_counts(leaf_for(x).counts)];
}

int DecisionTree::depth() const {
  if (nodes.empty()) return 0;
  int deepest = 0;
  std::vector<std::pair<int, int>> stack = {{0, 0}};
  while (!stack.empty()) {
    auto [i, d] = stack.back();
    stack.pop_back();
    const Node& n = nodes[static_cast<std::size_t>(i)];
    if (n.is_leaf()) {
      deepest = std::max(deepest, d);
    } else {
      stack.push_back({n.left, d + 1});
      stack.push_back({n.right, d + 1});
    }
  }
  return deepest;
}

DecisionTree fit_tree(MatrixView x, std::span<const MagLevel> y, const ForestConfig& cfg,
                      std::uint64_t seed) {
  validate(cfg);
  if (x.rows == 0) throw InvalidArgument("cannot fit a tree on zero samples");
  if (y.size() != x.rows) throw DimensionMismatch("label count differs from row count");
  return TreeBuilder(x, y, cfg, seed).build();
}

std::uint64_t tree_seed(std::uint64_t forest_seed, std::size_t tree_index) noexcept {
  return derive_seed(forest_seed, tree_index);
}

Forest fit_forest(MatrixView x, std::span<const MagLevel> y, const ForestConfig& cfg,
                  unsigned threads) {
  validate(cfg);
  if (x.cols == 0) throw InvalidArgument("feature dimension must be positive");
  Forest forest;
  forest.config = cfg;
  forest.dim = x.cols;
  forest.trees.resize(static_cast<std::size_t>(cfg.n_trees));
  parallel_for(forest.trees.size(), threads, [&](std::size_t t) {
    forest.trees[t] = fit_tree(x, y, cfg, tree_seed(cfg.seed, t));
  });
  return forest;
}

MagLevel predict(const Forest& forest, std::span<const float> x) {
  if (x.size() != forest.dim) {
    throw DimensionMismatch("input has " + std::to_string(x.size()) +
                            " features, forest expects " + std::to_string(forest.dim));
  }
  ClassCounts votes{};
  for (const auto& tree : forest.trees) ++votes[ordinal(tree.predict(x))];
  return kAllLevels[argmax_counts(votes)];
}

std::vector<MagLevel> predict(const Forest& forest, MatrixView x, unsigned threads) {
  if (x.cols != forest.dim) {
    throw DimensionMismatch("input has " + std::to_string(x.cols) + " features, forest expects " +
                            std::to_string(forest.dim));
  }
  std::vector<MagLevel> out(x.rows);
  parallel_for(x.rows, threads, [&](std::size_t i) { out[i] = predict(forest, x.row(i)); });
  return out;
}

void save_forest(const std::filesystem::path& path, const Forest& forest) {
  json trees = json::array();
  for (const auto& tree : forest.trees) {
    json nodes = json::array();
    for (std::size_t i = 0; i < tree.nodes.size(); ++i) {
      const Node& n = tree.nodes[i];
      if (n.is_leaf()) {
        nodes.push_back({{"id", i}, {"counts", n.counts}});
      } else {
        nodes.push_back({{"id", i}, {"f", n.feature}, {"t", n.threshold}, {"l", n.left},
                         {"r", n.right}});
      }
    }
    trees.push_back(std::move(nodes));
  }
  json labels = json::array();
  for (MagLevel level : kAllLevels) labels.push_back(std::string(to_string(level)));
  const json doc = {{"config", config_to_json(forest.config)},
                    {"label_order", labels},
                    {"dim", forest.dim},
                    {"trees", std::move(trees)}};
  const std::string text = doc.dump();
  write_text_atomic(path, text);
}

Forest load_forest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FileNotFound(path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw MalformedModel(path.string() + ": " + e.what());
  }
  Forest forest;
  try {
    forest.config = config_from_json(doc.at("config"));
    forest.dim = doc.at("dim").get<std::size_t>();
    const auto& labels = doc.at("label_order");
    if (labels.size() != kNumLevels) throw MalformedModel("label_order must list 5 levels");
    for (std::size_t k = 0; k < kNumLevels; ++k) {
      if (labels[k].get<std::string>() != to_string(kAllLevels[k])) {
        throw MalformedModel("label_order differs from the canonical order");
      }
    }
    for (const auto& jtree : doc.at("trees")) {
      DecisionTree tree;
      tree.nodes.resize(jtree.size());
      for (const auto& jn : jtree) {
        const auto id = jn.at("id").get<std::size_t>();
        if (id >= tree.nodes.size()) throw MalformedModel("node id out of range");
        Node& n = tree.nodes[id];
        if (jn.contains("counts")) {
          n.counts = jn.at("counts").get<ClassCounts>();
        } else {
          n.feature = jn.at("f").get<int>();
          n.threshold = jn.at("t").get<double>();
          n.left = jn.at("l").get<int>();
          n.right = jn.at("r").get<int>();
          const auto size = static_cast<int>(tree.nodes.size());
          if (n.feature < 0 || static_cast<std::size_t>(n.feature) >= forest.dim ||
              n.left <= static_cast<int>(id) || n.right <= static_cast<int>(id) ||
              n.left >= size || n.right >= size) {
            throw MalformedModel("node " + std::to_string(id) + " has invalid links");
          }
        }
      }
      forest.trees.push_back(std::move(tree));
    }
  } catch (const json::exception& e) {
    throw MalformedModel(path.string() + ": " + e.what());
  }
  if (forest.trees.empty()) throw MalformedModel(path.string() + ": forest has no trees");
  return forest;
}

}  // namespace magscope::forest
