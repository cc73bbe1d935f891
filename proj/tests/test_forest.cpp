#include <doctest.h>

#include <fstream>

#include "magscope/error.hpp"
#include "magscope/forest.hpp"
#include "test_util.hpp"

using namespace magscope;
using namespace magscope::forest;

namespace {

struct Data {
  std::vector<float> values;
  std::vector<MagLevel> labels;
  std::size_t dim = 0;
  MatrixView view() const { return {values.data(), labels.size(), dim}; }
};

Data xor_data(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Data d;
  d.dim = 2;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = rng.uniform(-1, 1), y = rng.uniform(-1, 1);
    d.values.push_back(static_cast<float>(x));
    d.values.push_back(static_cast<float>(y));
    d.labels.push_back((x > 0) != (y > 0) ? MagLevel::X5 : MagLevel::X2_5);
  }
  return d;
}

Data blobs(std::size_t n, std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  Data d;
  d.dim = dim;
  for (std::size_t i = 0; i < n; ++i) {
    const auto k = i % kNumLevels;
    for (std::size_t j = 0; j < dim; ++j) d.values.push_back(static_cast<float>(k + rng.uniform(-1.5, 1.5)));
    d.labels.push_back(kAllLevels[k]);
  }
  return d;
}

ForestConfig exhaustive(int depth = 50) {
  ForestConfig cfg;
  cfg.n_trees = 1;
  cfg.bootstrap = false;
  cfg.max_features = kAllFeatures;
  cfg.max_depth = depth;
  return cfg;
}

}  // namespace

TEST_SUITE("forest") {
  TEST_CASE("gini and gain") {
    const std::uint32_t pure[] = {10, 0, 0, 0, 0};
    CHECK(gini(pure) == 0.0);
    const std::uint32_t half[] = {5, 5, 0, 0, 0};
    CHECK(gini(half) == doctest::Approx(0.5));
    const std::uint32_t l[] = {5, 0, 0, 0, 0}, r[] = {0, 5, 0, 0, 0}, none[] = {0, 0, 0, 0, 0};
    CHECK(gini_gain(half, l, r) == doctest::Approx(0.5));
    CHECK(gini_gain(half, half, none) == 0.0);
    const std::uint32_t pl[] = {4, 0, 0, 0, 0}, pr[] = {6, 0, 0, 0, 0};
    CHECK(gini_gain(pure, pl, pr) == 0.0);
    CHECK_THROWS_AS(gini_gain(half, l, l), InvalidArgument);
    CHECK_THROWS_AS(gini_gain(none, none, none), InvalidArgument);
  }

  TEST_CASE("hand-sized trees") {
    Data same;
    same.dim = 1;
    same.values = {1, 2, 3};
    same.labels = {MagLevel::X20, MagLevel::X20, MagLevel::X20};
    const auto leaf = fit_tree(same.view(), same.labels, exhaustive(), 1);
    CHECK(leaf.nodes.size() == 1);
    const float q[] = {100};
    CHECK(leaf.predict(q) == MagLevel::X20);

    Data two;
    two.dim = 1;
    two.values = {0, 1};
    two.labels = {MagLevel::X2_5, MagLevel::X5};
    const auto t = fit_tree(two.view(), two.labels, exhaustive(), 1);
    REQUIRE(t.nodes.size() == 3);
    CHECK(t.nodes[0].threshold == 0.5);
    CHECK(t.nodes[1].counts[0] == 1);
    CHECK(t.nodes[2].counts[1] == 1);
    CHECK(t.depth() == 1);

    const Data x = xor_data(200, 3);
    const auto stump = fit_tree(x.view(), x.labels, exhaustive(1), 1);
    CHECK(stump.nodes.size() == 3);
    CHECK(stump.depth() == 1);
    const bool impure = gini(stump.nodes[1].counts) > 0 || gini(stump.nodes[2].counts) > 0;
    CHECK(impure);
  }

  TEST_CASE("root split equals brute force on a random family") {
    Rng family(2024);
    int checked = 0;
    for (int inst = 0; inst < 200; ++inst) {
      const std::size_t n = 1 + family.uniform_index(12);
      const std::size_t d = 1 + family.uniform_index(2);
      const int classes = 2 + static_cast<int>(family.uniform_index(4));
      Data data;
      data.dim = d;
      std::vector<std::vector<float>> rows(n, std::vector<float>(d));
      std::vector<int> y(n);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
          rows[i][j] = static_cast<float>(family.uniform_index(5)) * 0.5f;
          data.values.push_back(rows[i][j]);
        }
        y[i] = static_cast<int>(family.uniform_index(static_cast<std::uint64_t>(classes)));
        data.labels.push_back(kAllLevels[static_cast<std::size_t>(y[i])]);
      }
      const auto tree = fit_tree(data.view(), data.labels, exhaustive(), 7);
      const bool pure = std::all_of(y.begin(), y.end(), [&](int v) { return v == y[0]; });
      const auto expect = oracle::best_root_split(rows, y, classes);
      if (pure || n < 2 || expect.feature < 0) {
        CHECK(tree.nodes[0].is_leaf());
      } else {
        CHECK(tree.nodes[0].feature == expect.feature);
        CHECK(tree.nodes[0].threshold == expect.threshold);
      }
      ++checked;
    }
    CHECK(checked == 200);
  }

  TEST_CASE("default forests respect the depth cap and thread count") {
    const Data b = blobs(300, 4, 5);
    ForestConfig cfg;
    CHECK(cfg.n_trees == 1000);
    CHECK(cfg.max_depth == 50);
    const auto f = fit_forest(b.view(), b.labels, cfg, 1);
    CHECK(f.trees.size() == 1000);
    int deepest = 0;
    for (const auto& t : f.trees) deepest = std::max(deepest, t.depth());
    CHECK(deepest <= 50);
    CHECK(fit_forest(b.view(), b.labels, cfg, 4) == f);

    cfg.max_depth = 3;
    cfg.n_trees = 50;
    for (const auto& t : fit_forest(b.view(), b.labels, cfg, 2).trees) CHECK(t.depth() <= 3);
  }

  TEST_CASE("one exhaustive tree is the forest") {
    const Data b = blobs(120, 3, 6);
    auto cfg = exhaustive();
    cfg.seed = 99;
    const auto f = fit_forest(b.view(), b.labels, cfg);
    REQUIRE(f.trees.size() == 1);
    CHECK(f.trees[0] == fit_tree(b.view(), b.labels, cfg, tree_seed(99, 0)));
  }

  TEST_CASE("voting") {
    auto leaf = [](MagLevel l) {
      DecisionTree t;
      t.nodes.emplace_back();
      t.nodes[0].counts[ordinal(l)] = 3;
      return t;
    };
    Forest f;
    f.dim = 1;
    f.trees = {leaf(MagLevel::X10), leaf(MagLevel::X10), leaf(MagLevel::X40)};
    const float x[] = {0};
    CHECK(predict(f, x) == MagLevel::X10);
    f.trees = {leaf(MagLevel::X40), leaf(MagLevel::X10)};
    CHECK(predict(f, x) == MagLevel::X10);

    Data single;
    single.dim = 2;
    single.values = {0, 0, 1, 1, 2, 2};
    single.labels = {MagLevel::X5, MagLevel::X5, MagLevel::X5};
    ForestConfig cfg;
    cfg.n_trees = 10;
    const auto g = fit_forest(single.view(), single.labels, cfg);
    const float far[] = {-50, 80};
    CHECK(predict(g, far) == MagLevel::X5);
  }

  TEST_CASE("xor is learned") {
    const Data x = xor_data(200, 11);
    ForestConfig cfg;
    cfg.n_trees = 100;
    const auto f = fit_forest(x.view(), x.labels, cfg, 2);
    const auto pred = predict(f, x.view(), 2);
    std::size_t right = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) right += pred[i] == x.labels[i];
    CHECK(static_cast<double>(right) / 200.0 >= 0.95);
  }

  TEST_CASE("save and load") {
    testing::TempDir dir("rf");
    const Data b = blobs(100, 3, 8);
    ForestConfig cfg;
    cfg.n_trees = 7;
    cfg.max_features = 2;
    const auto f = fit_forest(b.view(), b.labels, cfg);
    save_forest(dir / "m.rf.json", f);
    CHECK(load_forest(dir / "m.rf.json") == f);
    CHECK_THROWS_AS(load_forest(dir / "none.json"), FileNotFound);
    std::ofstream(dir / "bad.json") << "{\"trees\": 3}";
    CHECK_THROWS_AS(load_forest(dir / "bad.json"), MalformedModel);
  }

  TEST_CASE("config validation") {
    CHECK(features_per_split(ForestConfig{}, 26) == 5);
    CHECK(features_per_split(ForestConfig{}, 1024) == 32);
    ForestConfig c;
    c.max_features = kAllFeatures;
    CHECK(features_per_split(c, 26) == 26);
    c.n_trees = 0;
    CHECK_THROWS_AS(validate(c), InvalidArgument);
    const Data b = blobs(10, 2, 1);
    const std::vector<MagLevel> short_labels(3, MagLevel::X5);
    CHECK_THROWS(fit_forest(b.view(), short_labels, ForestConfig{}));
  }
}
