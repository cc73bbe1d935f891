#include <doctest.h>

#include <fstream>

#include <json.hpp>

#include "magscope/error.hpp"
#include "magscope/mlp.hpp"
#include "test_util.hpp"

using namespace magscope;
using namespace magscope::mlp;

namespace {

Matrix random_batch(Eigen::Index n, Eigen::Index d, std::uint64_t seed) {
  Rng rng(seed);
  Matrix m(n, d);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-2, 2);
  return m;
}

std::vector<int> random_labels(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<int> y(n);
  for (auto& v : y) v = static_cast<int>(rng.uniform_index(5));
  return y;
}

// Two Gaussian-ish clusters labeled 5x and 20x.
void toy(Matrix& x, std::vector<int>& y) {
  Rng rng(17);
  const Eigen::Index n = 400;
  x.resize(n, 4);
  y.resize(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    const bool second = i % 2 == 1;
    for (Eigen::Index j = 0; j < 4; ++j) x(i, j) = (second ? 1.5 : -1.5) + rng.uniform(-1, 1);
    y[static_cast<std::size_t>(i)] = second ? 3 : 1;
  }
}

double loss_of(const Params& p, const Matrix& x, std::span<const int> y) {
  Activations c;
  forward(p, x, ForwardMode::no_dropout(), nullptr, &c);
  return cross_entropy(c.logits, y);
}

}  // namespace

TEST_SUITE("mlp") {
  TEST_CASE("init") {
    const auto a = init(Architecture{1024}, 1);
    CHECK(a == init(Architecture{1024}, 1));
    CHECK_FALSE(a == init(Architecture{1024}, 2));
    CHECK(a.w1.rows() == 1024);
    CHECK(a.w1.cols() == 512);
    CHECK(a.w2.rows() == 512);
    CHECK(a.w2.cols() == 256);
    CHECK(a.w3.rows() == 256);
    CHECK(a.w3.cols() == 5);
    CHECK(a.b1.isZero(0));
    CHECK(a.b2.isZero(0));
    CHECK(a.b3.isZero(0));
    const double limit = std::sqrt(6.0 / (1024 + 512));
    CHECK(a.w1.cwiseAbs().maxCoeff() <= limit);
    CHECK(a.w1.cwiseAbs().maxCoeff() > 0.9 * limit);
    CHECK_THROWS_AS(init(Architecture{0}, 1), InvalidArgument);
  }

  TEST_CASE("forward") {
    auto p = init(Architecture{10}, 3);
    const Matrix x = random_batch(16, 10, 4);
    for (auto mode : {ForwardMode::eval(), ForwardMode::no_dropout()}) {
      const Matrix probs = forward(p, x, mode);
      for (Eigen::Index i = 0; i < probs.rows(); ++i) {
        CHECK(std::abs(probs.row(i).sum() - 1.0) < 1e-6);
        CHECK(probs.row(i).minCoeff() > 0.0);
        CHECK(probs.row(i).maxCoeff() < 1.0);
      }
    }
    CHECK(forward(p, x, ForwardMode::eval()) == forward(p, x, ForwardMode::eval()));
    Rng rng(1);
    CHECK_NOTHROW(forward(p, x, ForwardMode::train(), &rng));
    CHECK_THROWS_AS(forward(p, x, ForwardMode::train()), InvalidArgument);
    CHECK_THROWS_AS(forward(p, random_batch(4, 9, 1), ForwardMode::eval()), DimensionMismatch);

    p.w3.setZero();
    p.b3.setZero();
    const Matrix uniform = forward(p, x, ForwardMode::eval());
    CHECK((uniform.array() == 0.2).all());
  }

  TEST_CASE("dropout keeps activations unbiased") {
    const auto p = init(Architecture{6}, 5);
    const Matrix x = random_batch(32, 6, 6);
    Activations ref;
    forward(p, x, ForwardMode::no_dropout(), nullptr, &ref);
    Rng rng(8);
    Matrix sum = Matrix::Zero(ref.h1.rows(), ref.h1.cols());
    double kept = 0;
    const int trials = 400;
    for (int t = 0; t < trials; ++t) {
      Activations a;
      forward(p, x, ForwardMode::train(), &rng, &a);
      sum += a.d1;
      kept += (a.mask.array() > 0).cast<double>().mean();
      CHECK(((a.mask.array() == 0.0) || (a.mask.array() == 2.0)).all());
    }
    CHECK(kept / trials == doctest::Approx(0.5).epsilon(0.01));
    const Matrix mean = sum / trials;
    // Per-unit relative bias shrinks as 1/sqrt(trials); compare in aggregate.
    const double rel = (mean - ref.h1).cwiseAbs().sum() / ref.h1.cwiseAbs().sum();
    CHECK(rel < 0.05);
  }

  TEST_CASE("cross entropy and argmax") {
    Matrix logits(2, 5);
    logits << 0, 0, 0, 0, 0, 1000, 0, 0, 0, 0;
    const int y[] = {2, 0};
    CHECK(cross_entropy(logits, y) == doctest::Approx(std::log(5.0) / 2));
    const double row[] = {0.1, 0.5, 0.2, 0.1, 0.1};
    CHECK(argmax(row) == 1);
    const double tie[] = {0.2, 0.2, 0.2, 0.2, 0.2};
    CHECK(argmax(tie) == 0);
  }

  TEST_CASE("analytic gradients match central differences") {
    const auto p = init(Architecture{10}, 9);
    const Matrix x = random_batch(8, 10, 10);
    const auto y = random_labels(8, 11);
    const auto r = grad_check(p, x, y, 1e-5, 64, 1);
    CHECK(r.max_relative_error < 1e-4);
    CHECK(r.per_tensor.size() == kTrainableTensors);

    // Independent spot check: loss change of one perturbed weight.
    Activations c;
    forward(p, x, ForwardMode::no_dropout(), nullptr, &c);
    const Gradients g = backward(p, c, y);
    const double base = loss_of(p, x, y);
    for (double delta : {1e-3, 1e-4}) {
      auto q = p;
      q.w1(3, 7) += delta;
      q.bn_gain(0, 5) += delta;
      const double predicted = (g.w1(3, 7) + g.bn_gain(0, 5)) * delta;
      CHECK(std::abs(loss_of(q, x, y) - base - predicted) < 50 * delta * delta);
    }
  }

  TEST_CASE("no learning signal gives a zero output bias gradient") {
    auto p = init(Architecture{4}, 2);
    p.w3.setZero();
    const Matrix x = random_batch(5, 4, 3);
    const int y[] = {0, 1, 2, 3, 4};
    Activations c;
    forward(p, x, ForwardMode::no_dropout(), nullptr, &c);
    const Gradients g = backward(p, c, y);
    CHECK(g.b3.cwiseAbs().maxCoeff() < 1e-8);
  }

  TEST_CASE("training") {
    Matrix x;
    std::vector<int> y;
    toy(x, y);
    TrainConfig cfg;
    const auto r = train(x, y, Architecture{4}, cfg);
    CHECK(r.loss_history.size() == 30);
    CHECK(r.loss_history.back() < r.loss_history.front());
    const auto pred = predict(r.params, x);
    std::size_t right = 0;
    for (std::size_t i = 0; i < y.size(); ++i) right += static_cast<int>(ordinal(pred[i])) == y[i];
    CHECK(static_cast<double>(right) / static_cast<double>(y.size()) >= 0.99);
    CHECK((r.params.running_var.array() > 0).all());

    const auto again = train(x, y, Architecture{4}, cfg);
    CHECK(again.params == r.params);
    CHECK(again.loss_history == r.loss_history);

    cfg.epochs = 0;
    const auto none = train(x, y, Architecture{4}, cfg);
    CHECK(none.loss_history.empty());
    CHECK(none.params == init(Architecture{4}, derive_seed(cfg.seed, 0)));
  }

  TEST_CASE("training errors") {
    Matrix x;
    std::vector<int> y;
    toy(x, y);
    TrainConfig cfg;
    cfg.batch_size = 1000;
    CHECK_THROWS_AS(train(x, y, Architecture{4}, cfg), InvalidArgument);
    cfg = {};
    cfg.learning_rate = 0;
    CHECK_THROWS_AS(train(x, y, Architecture{4}, cfg), InvalidArgument);
    cfg = {};
    x(5, 1) = std::numeric_limits<double>::quiet_NaN();
    try {
      train(x, y, Architecture{4}, cfg);
      FAIL("expected divergence");
    } catch (const TrainingDiverged& e) {
      CHECK(std::string(e.what()).find("epoch 1") != std::string::npos);
    }
  }

  TEST_CASE("a trailing single sample joins the previous batch") {
    Matrix x;
    std::vector<int> y;
    toy(x, y);
    x.conservativeResize(257, Eigen::NoChange);
    y.resize(257);
    TrainConfig cfg;
    cfg.epochs = 2;
    const auto r = train(x, y, Architecture{4}, cfg);
    CHECK(r.loss_history.size() == 2);
    CHECK(std::isfinite(r.loss_history.back()));
  }

  TEST_CASE("model files") {
    testing::TempDir dir("mlp");
    Matrix x;
    std::vector<int> y;
    toy(x, y);
    TrainConfig cfg;
    cfg.epochs = 2;
    const auto r = train(x, y, Architecture{4}, cfg);
    save_model(dir / "m.mlp", r.params);
    const auto back = load_model(dir / "m.mlp");
    CHECK(back == r.params);
    CHECK(predict(back, x) == predict(r.params, x));

    save_sidecar(dir / "m.mlp", r.params, cfg, r.loss_history);
    const auto doc = nlohmann::json::parse(read_text(dir / "m.mlp.json"));
    CHECK(doc["architecture"]["hidden1"] == 512);
    CHECK(doc["architecture"]["hidden2"] == 256);
    CHECK(doc["architecture"]["outputs"] == 5);
    CHECK(doc["train_config"]["epochs"] == 2);
    CHECK(doc["loss_history"].size() == 2);

    CHECK_THROWS_AS(load_model(dir / "none.mlp"), FileNotFound);
    std::ofstream(dir / "junk.mlp") << "MMLPxx";
    CHECK_THROWS_AS(load_model(dir / "junk.mlp"), MalformedModel);
    std::filesystem::copy_file(dir / "m.mlp", dir / "cut.mlp");
    std::filesystem::resize_file(dir / "cut.mlp", std::filesystem::file_size(dir / "cut.mlp") - 8);
    CHECK_THROWS_AS(load_model(dir / "cut.mlp"), MalformedModel);
  }
}
