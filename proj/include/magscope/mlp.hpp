#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "magscope/features.hpp"
#include "magscope/mag_level.hpp"
#include "magscope/rng.hpp"

namespace magscope::mlp {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// input -> 512 (batch norm, ReLU, dropout) -> 256 (ReLU) -> 5 (softmax).
struct Architecture {
  static constexpr int kHidden1 = 512;
  static constexpr int kHidden2 = 256;
  static constexpr int kOutputs = static_cast<int>(kNumLevels);
  static constexpr double kDropout = 0.5;

  int input_dim = 0;
};

/// Weights are stored input-major so a batch propagates as X * W + b.
struct Params {
  Matrix w1, b1;              // d x 512, 1 x 512
  Matrix bn_gain, bn_shift;   // 1 x 512
  Matrix running_mean, running_var;  // 1 x 512, not trained by gradient
  Matrix w2, b2;              // 512 x 256, 1 x 256
  Matrix w3, b3;              // 256 x 5, 1 x 5

  int input_dim() const noexcept { return static_cast<int>(w1.rows()); }

  friend bool operator==(const Params& a, const Params& b);
};

/// Trainable tensors in the serialization order (running statistics
/// excluded).
inline constexpr std::size_t kTrainableTensors = 8;
std::vector<std::string> trainable_names();

struct Gradients {
  Matrix w1, b1, bn_gain, bn_shift, w2, b2, w3, b3;
};

/// Glorot-uniform weights, zero biases, unit gain, zero shift, running
/// mean 0 and variance 1.
Params init(const Architecture& arch, std::uint64_t seed);

struct ForwardMode {
  bool batch_stats = false;  // batch norm from the batch rather than running stats
  bool dropout = false;

  static constexpr ForwardMode train() { return {true, true}; }
  static constexpr ForwardMode eval() { return {false, false}; }
  /// Batch statistics without dropout: deterministic and differentiable.
  static constexpr ForwardMode no_dropout() { return {true, false}; }
};

struct Activations {
  Matrix input;
  Matrix z1, xhat, a1, h1, mask, d1, z2, h2, logits, probs;
  Matrix batch_mean, batch_var, inv_std;
};

struct BatchNormSettings {
  double momentum = 0.9;
  double epsilon = 1e-5;
};

/// Row-wise class probabilities. `rng` is required when dropout is on;
/// `cache` receives intermediates for backward().
/// Throws DimensionMismatch when the batch width differs from input_dim.
Matrix forward(const Params& params, const Matrix& batch, ForwardMode mode, Rng* rng = nullptr,
               Activations* cache = nullptr, const BatchNormSettings& bn = {});

/// Mean categorical cross-entropy from logits via log-sum-exp.
double cross_entropy(const Matrix& logits, std::span<const int> labels);

/// Gradients of the mean cross-entropy for a forward pass made with
/// batch statistics.
Gradients backward(const Params& params, const Activations& cache, std::span<const int> labels);

struct TrainConfig {
  int epochs = 30;
  int batch_size = 128;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::uint64_t seed = 42;
  BatchNormSettings bn{};
};

void validate(const TrainConfig& cfg);

struct TrainResult {
  Params params;
  /// Mean training cross-entropy of each epoch.
  std::vector<double> loss_history;
};

/// Mini-batch Adam on cross-entropy. Initialization, shuffling and dropout
/// draw from separate streams derived from cfg.seed; a trailing batch of
/// one sample is merged into the previous batch. Throws TrainingDiverged
/// if a batch loss is not finite.
TrainResult train(const Matrix& features, std::span<const int> labels, const Architecture& arch,
                  const TrainConfig& cfg);
TrainResult train(const FeatureStore& store, const TrainConfig& cfg);

/// Index of the largest entry, ties to the lowest index.
int argmax(std::span<const double> row);

std::vector<MagLevel> predict(const Params& params, const Matrix& batch);
std::vector<MagLevel> predict(const Params& params, const FeatureStore& store);

Matrix to_matrix(const FeatureStore& store);
Matrix to_matrix(MatrixView view);
std::vector<int> label_ordinals(std::span<const MagLevel> labels);

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::vector<double> per_tensor;  // trainable_names() order
  std::size_t checked = 0;
};

/// Compares backward() against central differences (step `epsilon`) in
/// no-dropout mode. Tensors with at most `max_entries` elements are
/// checked fully; larger ones at `max_entries` seeded random positions.
/// Relative error is |a - n| / max(|a| + |n|, 1e-6).
GradCheckResult grad_check(const Params& params, const Matrix& batch, std::span<const int> labels,
                           double epsilon = 1e-5, std::size_t max_entries = 64,
                           std::uint64_t seed = 0);

void save_model(const std::filesystem::path& path, const Params& params);
Params load_model(const std::filesystem::path& path);

/// JSON sidecar `<path>.json` with architecture, config and loss history.
void save_sidecar(const std::filesystem::path& model_path, const Params& params,
                  const TrainConfig& cfg, std::span<const double> loss_history);

}  // namespace magscope::mlp
