#include <doctest.h>

#include <map>
#include <set>

#include "magscope/error.hpp"
#include "magscope/eval.hpp"
#include "test_util.hpp"

using namespace magscope;
using namespace magscope::eval;

namespace {

ConfusionMatrix from_rows(const std::vector<std::vector<std::uint64_t>>& rows) {
  ConfusionMatrix cm(rows.size());
  for (std::size_t a = 0; a < rows.size(); ++a) {
    for (std::size_t p = 0; p < rows.size(); ++p) cm.at(a, p) = rows[a][p];
  }
  return cm;
}

oracle::Counts to_counts(const ConfusionMatrix& cm) {
  oracle::Counts m(cm.classes(), std::vector<double>(cm.classes()));
  for (std::size_t a = 0; a < cm.classes(); ++a) {
    for (std::size_t p = 0; p < cm.classes(); ++p) m[a][p] = static_cast<double>(cm.at(a, p));
  }
  return m;
}

FeatureStore separable_store(std::size_t per_class, std::uint64_t seed) {
  Rng rng(seed);
  FeatureStore s(3);
  for (std::size_t i = 0; i < per_class * kNumLevels; ++i) {
    const auto k = i % kNumLevels;
    const float row[] = {static_cast<float>(k * 2 + rng.uniform(-0.5, 0.5)),
                         static_cast<float>(rng.uniform(-1, 1)),
                         static_cast<float>(k + rng.uniform(-0.3, 0.3))};
    s.append("s" + std::to_string(i / 10) + "-p" + std::to_string(i) + "-" +
                 std::string(to_string(kAllLevels[k])),
             kAllLevels[k], std::span<const float>(row));
  }
  return s;
}

}  // namespace

TEST_SUITE("eval") {
  TEST_CASE("metric examples") {
    const auto two = from_rows({{8, 2}, {1, 9}});
    CHECK(accuracy(two) == doctest::Approx(0.85));
    CHECK(kappa(two) == doctest::Approx(0.7));
    CHECK(macro_f1(two) == doctest::Approx((16.0 / 19 + 18.0 / 21) / 2));
    CHECK(kappa(from_rows({{25, 25}, {25, 25}})) == doctest::Approx(0.0));

    ConfusionMatrix diag;
    for (std::size_t k = 0; k < 5; ++k) diag.at(k, k) = 7;
    CHECK(accuracy(diag) == 1.0);
    CHECK(kappa(diag) == 1.0);
    CHECK(macro_f1(diag) == 1.0);

    ConfusionMatrix one_class;
    one_class.at(1, 1) = 9;
    CHECK(kappa(one_class) == 1.0);
    one_class.at(1, 2) = 1;
    CHECK(macro_f1(one_class) == doctest::Approx((18.0 / 19 + 0.0) / 1.0));

    CHECK_THROWS_AS(accuracy(ConfusionMatrix()), InvalidArgument);
    CHECK_THROWS_AS(kappa(ConfusionMatrix()), InvalidArgument);
  }

  TEST_CASE("metrics agree with naive formulas") {
    Rng rng(5);
    for (int t = 0; t < 300; ++t) {
      ConfusionMatrix cm;
      for (std::size_t a = 0; a < 5; ++a) {
        for (std::size_t p = 0; p < 5; ++p) cm.at(a, p) = rng.uniform_index(a == p ? 60 : 15);
      }
      if (rng.coin()) {
        for (std::size_t p = 0; p < 5; ++p) cm.at(2, p) = 0;
      }
      if (cm.total() == 0) continue;
      const auto m = to_counts(cm);
      CHECK(accuracy(cm) == doctest::Approx(oracle::accuracy(m)).epsilon(1e-12));
      CHECK(kappa(cm) == doctest::Approx(oracle::kappa(m)).epsilon(1e-12));
      CHECK(macro_f1(cm) == doctest::Approx(oracle::macro_f1(m)).epsilon(1e-12));
      const auto per = per_class_accuracy(cm);
      for (std::size_t k = 0; k < 5; ++k) {
        if (cm.row_sum(k) == 0) {
          CHECK_FALSE(per[k]);
        } else {
          CHECK(*per[k] == doctest::Approx(m[k][k] / static_cast<double>(cm.row_sum(k))));
        }
      }
      // Relabeling classes consistently changes nothing.
      const std::size_t perm[] = {3, 0, 4, 1, 2};
      const auto q = cm.permuted(perm);
      CHECK(kappa(q) == doctest::Approx(kappa(cm)).epsilon(1e-12));
      CHECK(macro_f1(q) == doctest::Approx(macro_f1(cm)).epsilon(1e-12));
    }
  }

  TEST_CASE("confusion from labels") {
    const std::vector<MagLevel> a(6, MagLevel::X5), b(6, MagLevel::X10);
    const auto off = confusion(a, b);
    CHECK(off.at(1, 2) == 6);
    CHECK(off.trace() == 0);
    CHECK(confusion(a, a).trace() == 6);
    const std::vector<std::string> s1 = {"2.5x", "40x"}, s2 = {"2.5x", "20x"};
    CHECK(confusion(s1, s2).at(4, 3) == 1);
    const std::vector<std::string> bad = {"2.5x", "3x"};
    CHECK_THROWS_AS(confusion(s1, bad), InvalidArgument);
    CHECK_THROWS_AS(confusion(a, std::vector<MagLevel>(2)), DimensionMismatch);
  }

  TEST_CASE("mean and population std") {
    const double v[] = {1, 2, 3, 4};
    const auto ms = mean_std(v);
    CHECK(ms.mean == 2.5);
    CHECK(ms.std == doctest::Approx(std::sqrt(1.25)));
  }

  TEST_CASE("stratified folds on balanced data") {
    std::vector<MagLevel> labels;
    std::vector<std::string> slides;
    for (int i = 0; i < 100; ++i) {
      labels.push_back(kAllLevels[static_cast<std::size_t>(i % 5)]);
      slides.push_back("s" + std::to_string(i / 10));
    }
    const auto plan = make_folds(labels, slides, FoldStrategy::PatchLevel, true, 42);
    for (int f = 0; f < 5; ++f) {
      const auto test = plan.test_indices(f);
      CHECK(test.size() == 20);
      std::map<MagLevel, int> per;
      for (auto i : test) ++per[labels[i]];
      for (auto level : kAllLevels) CHECK(per[level] == 4);
      CHECK(plan.train_indices(f).size() == 80);
    }
    CHECK(make_folds(labels, slides, FoldStrategy::PatchLevel, true, 42).assignments == plan.assignments);
    CHECK(make_folds(labels, slides, FoldStrategy::PatchLevel, true, 43).assignments != plan.assignments);
  }

  TEST_CASE("fold plan properties") {
    Rng rng(77);
    for (int t = 0; t < 200; ++t) {
      const std::size_t n = 5 + rng.uniform_index(200);
      const int folds = 2 + static_cast<int>(rng.uniform_index(6));
      std::vector<MagLevel> labels(n);
      std::vector<std::string> slides(n);
      const std::size_t n_slides = 1 + rng.uniform_index(40);
      for (std::size_t i = 0; i < n; ++i) {
        labels[i] = kAllLevels[rng.uniform_index(5)];
        slides[i] = "s" + std::to_string(rng.uniform_index(n_slides));
      }
      if (n < static_cast<std::size_t>(folds)) continue;
      const bool stratified = rng.coin();
      const auto p = make_folds(labels, slides, FoldStrategy::PatchLevel, stratified, t, folds);
      std::vector<std::size_t> sizes(static_cast<std::size_t>(folds));
      std::set<std::size_t> seen;
      for (int f = 0; f < folds; ++f) {
        const auto test = p.test_indices(f);
        sizes[static_cast<std::size_t>(f)] = test.size();
        for (auto i : test) CHECK(seen.insert(i).second);
      }
      CHECK(seen.size() == n);
      CHECK(*std::max_element(sizes.begin(), sizes.end()) - *std::min_element(sizes.begin(), sizes.end()) <= 1);

      std::set<std::string> distinct(slides.begin(), slides.end());
      if (distinct.size() < static_cast<std::size_t>(folds)) {
        CHECK_THROWS_AS(make_folds(labels, slides, FoldStrategy::SlideGrouped, false, t, folds), InvalidArgument);
        continue;
      }
      const auto g = make_folds(labels, slides, FoldStrategy::SlideGrouped, false, t, folds);
      std::map<std::string, int> fold_of;
      for (std::size_t i = 0; i < n; ++i) {
        const auto [it, fresh] = fold_of.emplace(slides[i], g.assignments[i]);
        CHECK(it->second == g.assignments[i]);
      }
      for (int f = 0; f < folds; ++f) CHECK_FALSE(g.test_indices(f).empty());
    }
    const std::vector<MagLevel> few(3, MagLevel::X5);
    const std::vector<std::string> ids = {"a", "b", "c"};
    CHECK_THROWS_AS(make_folds(few, ids, FoldStrategy::PatchLevel, true, 1), InvalidArgument);
  }

  TEST_CASE("cross validation reports") {
    const auto store = separable_store(20, 3);
    std::vector<std::string> slides;
    for (const auto& id : store.patch_ids) slides.push_back(pyramid::slide_of_patch_id(id));
    const auto plan = make_folds(store.labels, slides, FoldStrategy::PatchLevel, true, 42);
    forest::ForestConfig rf;
    rf.n_trees = 20;
    const auto report = cross_validate(store, rf, plan, 2, "toy");
    CHECK(report.folds.size() == 5);
    CHECK(report.classifier == "rf");
    CHECK(report.confusion.total() == store.size());
    CHECK(report.accuracy.mean > 0.9);
    CHECK(cross_validate(store, rf, plan, 1, "toy").confusion == report.confusion);

    const auto table = format_table(report);
    CHECK(table.find("Fold 5") != std::string::npos);
    CHECK(table.find("All Folds") != std::string::npos);
    CHECK(table.find("±") != std::string::npos);

    const auto back = parse_report_json(report_json(report));
    CHECK(back.confusion == report.confusion);
    CHECK(back.accuracy.mean == report.accuracy.mean);
    CHECK(back.folds.size() == 5);
    CHECK(back.features == "toy");
    CHECK_THROWS_AS(parse_report_json("{"), ParseError);

    const auto csv = confusion_csv(report.confusion);
    CHECK(csv.rfind("actual\\predicted,2.5x,5x,10x,20x,40x\n", 0) == 0);
    const auto svg = confusion_svg(report.confusion, "toy");
    CHECK(svg.find("<svg") != std::string::npos);
    CHECK(svg.find("</svg>") != std::string::npos);

    mlp::TrainConfig m;
    m.epochs = 3;
    m.batch_size = 16;
    const auto mr = cross_validate(store, m, plan, 1);
    CHECK(mr.classifier == "mlp");
    CHECK(mr.confusion.total() == store.size());

    m.batch_size = 1000;
    try {
      cross_validate(store, m, plan, 1);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(std::string(e.what()).find("fold 1") != std::string::npos);
    }
  }

  TEST_CASE("majority predictions sit at chance") {
    ConfusionMatrix cm;
    for (std::size_t a = 0; a < 5; ++a) cm.at(a, 2) = 40;
    CHECK(accuracy(cm) == doctest::Approx(0.2));
    CHECK(kappa(cm) == doctest::Approx(0.0));
  }
}
