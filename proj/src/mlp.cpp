#include "magscope/mlp.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "magscope/error.hpp"
#include "magscope/image.hpp"

namespace magscope::mlp {
namespace {

constexpr std::array<char, 4> kMagic = {'M', 'M', 'L', 'P'};
constexpr std::uint32_t kVersion = 1;

Matrix glorot(int fan_in, int fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  Matrix m(fan_in, fan_out);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-limit, limit);
  return m;
}

Matrix relu_mask(const Matrix& z) { return (z.array() > 0.0).cast<double>(); }

// Pointers to the trainable tensors in serialization order.
std::array<Matrix*, kTrainableTensors> trainable(Params& p) {
  return {&p.w1, &p.b1, &p.bn_gain, &p.bn_shift, &p.w2, &p.b2, &p.w3, &p.b3};
}

std::array<const Matrix*, kTrainableTensors> trainable(const Gradients& g) {
  return {&g.w1, &g.b1, &g.bn_gain, &g.bn_shift, &g.w2, &g.b2, &g.w3, &g.b3};
}

std::array<const Matrix*, 10> all_tensors(const Params& p) {
  return {&p.w1, &p.b1, &p.bn_gain, &p.bn_shift, &p.running_mean, &p.running_var,
          &p.w2, &p.b2, &p.w3, &p.b3};
}

std::array<Matrix*, 10> all_tensors(Params& p) {
  return {&p.w1, &p.b1, &p.bn_gain, &p.bn_shift, &p.running_mean, &p.running_var,
          &p.w2, &p.b2, &p.w3, &p.b3};
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f64(std::vector<std::uint8_t>& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

class Reader {
 public:
  Reader(std::vector<std::uint8_t> bytes, std::string where)
      : bytes_(std::move(bytes)), where_(std::move(where)) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }

  double f64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_++]) << (8 * i);
    return std::bit_cast<double>(v);
  }

  const std::uint8_t* take(std::size_t n) {
    need(n);
    const auto* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

  bool done() const noexcept { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw MalformedModel(where_ + ": truncated model file");
  }

  std::vector<std::uint8_t> bytes_;
  std::string where_;
  std::size_t pos_ = 0;
};

struct AdamState {
  std::array<Matrix, kTrainableTensors> m;
  std::array<Matrix, kTrainableTensors> v;
  long step = 0;
};

}  // namespace

bool operator==(const Params& a, const Params& b) {
  const auto ta = all_tensors(a);
  const auto tb = all_tensors(b);
  for (std::size_t i = 0; i < ta.size(); ++i) {
    if (ta[i]->rows() != tb[i]->rows() || ta[i]->cols() != tb[i]->cols()) return false;
    if (*ta[i] != *tb[i]) return false;
  }
  return true;
}

std::vector<std::string> trainable_names() {
  return {"w1", "b1", "bn_gain", "bn_shift", "w2", "b2", "w3", "b3"};
}

Params init(const Architecture& arch, std::uint64_t seed) {
  if (arch.input_dim < 1) throw InvalidArgument("input dimension must be >= 1");
  constexpr int h1 = Architecture::kHidden1;
  constexpr int h2 = Architecture::kHidden2;
  constexpr int out = Architecture::kOutputs;
  Rng rng(seed);
  Params p;
  p.w1 = glorot(arch.input_dim, h1, rng);
  p.b1 = Matrix::Zero(1, h1);
  p.bn_gain = Matrix::Ones(1, h1);
  p.bn_shift = Matrix::Zero(1, h1);
  p.running_mean = Matrix::Zero(1, h1);
  p.running_var = Matrix::Ones(1, h1);
  p.w2 = glorot(h1, h2, rng);
  p.b2 = Matrix::Zero(1, h2);
  p.w3 = glorot(h2, out, rng);
  p.b3 = Matrix::Zero(1, out);
  return p;
}

Matrix forward(const Params& p, const Matrix& batch, ForwardMode mode, Rng* rng,
               Activations* cache, const BatchNormSettings& bn) {
  if (batch.cols() != p.w1.rows()) {
    throw DimensionMismatch("batch has " + std::to_string(batch.cols()) +
                            " features, network expects " + std::to_string(p.w1.rows()));
  }
  if (mode.dropout && rng == nullptr) throw InvalidArgument("dropout needs a random stream");
  const auto n = batch.rows();

  Activations local;
  Activations& a = cache ? *cache : local;
  a.input = batch;
  a.z1 = (batch * p.w1).rowwise() + p.b1.row(0);
  if (mode.batch_stats) {
    a.batch_mean = a.z1.colwise().mean();
    const Matrix centered = a.z1.rowwise() - a.batch_mean.row(0);
    a.batch_var = centered.array().square().colwise().mean();
    a.inv_std = (a.batch_var.array() + bn.epsilon).rsqrt();
    a.xhat = centered.array().rowwise() * a.inv_std.row(0).array();
  } else {
    a.inv_std = (p.running_var.array() + bn.epsilon).rsqrt();
    a.xhat = (a.z1.rowwise() - p.running_mean.row(0)).array().rowwise() * a.inv_std.row(0).array();
  }
  a.a1 = (a.xhat.array().rowwise() * p.bn_gain.row(0).array()).rowwise() + p.bn_shift.row(0).array();
  a.h1 = a.a1.cwiseMax(0.0);
  if (mode.dropout) {
    const double keep = 1.0 - Architecture::kDropout;
    a.mask.resize(n, a.h1.cols());
    for (Eigen::Index i = 0; i < a.mask.size(); ++i) {
      a.mask.data()[i] = rng->uniform01() < keep ? 1.0 / keep : 0.0;
    }
    a.d1 = a.h1.cwiseProduct(a.mask);
  } else {
    a.mask.resize(0, 0);
    a.d1 = a.h1;
  }
  a.z2 = (a.d1 * p.w2).rowwise() + p.b2.row(0);
  a.h2 = a.z2.cwiseMax(0.0);
  a.logits = (a.h2 * p.w3).rowwise() + p.b3.row(0);

  const Eigen::VectorXd row_max = a.logits.rowwise().maxCoeff();
  Matrix e = (a.logits.colwise() - row_max).array().exp();
  const Eigen::VectorXd sums = e.rowwise().sum();
  a.probs = e.array().colwise() / sums.array();
  return a.probs;
}

double cross_entropy(const Matrix& logits, std::span<const int> labels) {
  if (static_cast<std::size_t>(logits.rows()) != labels.size()) {
    throw DimensionMismatch("label count differs from batch size");
  }
  double total = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    const double lse = m + std::log((logits.row(i).array() - m).exp().sum());
    total += lse - logits(i, labels[static_cast<std::size_t>(i)]);
  }
  return total / static_cast<double>(logits.rows());
}

Gradients backward(const Params& p, const Activations& a, std::span<const int> labels) {
  const auto n = a.probs.rows();
  if (static_cast<std::size_t>(n) != labels.size()) {
    throw DimensionMismatch("label count differs from batch size");
  }
  Gradients g;
  Matrix dz3 = a.probs;
  for (Eigen::Index i = 0; i < n; ++i) dz3(i, labels[static_cast<std::size_t>(i)]) -= 1.0;
  dz3 /= static_cast<double>(n);

  g.w3 = a.h2.transpose() * dz3;
  g.b3 = dz3.colwise().sum();
  const Matrix dz2 = (dz3 * p.w3.transpose()).cwiseProduct(relu_mask(a.z2));
  g.w2 = a.d1.transpose() * dz2;
  g.b2 = dz2.colwise().sum();
  Matrix dh1 = dz2 * p.w2.transpose();
  if (a.mask.size() != 0) dh1 = dh1.cwiseProduct(a.mask);
  const Matrix da1 = dh1.cwiseProduct(relu_mask(a.a1));
  g.bn_gain = da1.cwiseProduct(a.xhat).colwise().sum();
  g.bn_shift = da1.colwise().sum();

  const Matrix dxhat = da1.array().rowwise() * p.bn_gain.row(0).array();
  // Batch-norm input gradient with batch statistics:
  // dz = inv_std / n * (n dxhat - sum(dxhat) - xhat * sum(dxhat * xhat)).
  const Matrix sum_dxhat = dxhat.colwise().sum();
  const Matrix sum_dxhat_xhat = dxhat.cwiseProduct(a.xhat).colwise().sum();
  Matrix dz1 = (static_cast<double>(n) * dxhat).rowwise() - sum_dxhat.row(0);
  dz1 -= (a.xhat.array().rowwise() * sum_dxhat_xhat.row(0).array()).matrix();
  dz1 = (dz1.array().rowwise() * (a.inv_std.row(0).array() / static_cast<double>(n))).matrix();

  g.w1 = a.input.transpose() * dz1;
  g.b1 = dz1.colwise().sum();
  return g;
}

void validate(const TrainConfig& cfg) {
  if (cfg.epochs < 0) throw InvalidArgument("epochs must be >= 0");
  if (cfg.batch_size < 2) throw InvalidArgument("batch_size must be >= 2");
  if (!(cfg.learning_rate > 0)) throw InvalidArgument("learning_rate must be positive");
  if (!(cfg.beta1 > 0 && cfg.beta1 < 1 && cfg.beta2 > 0 && cfg.beta2 < 1)) {
    throw InvalidArgument("Adam betas must lie in (0, 1)");
  }
  if (!(cfg.adam_epsilon > 0) || !(cfg.bn.epsilon > 0)) {
    throw InvalidArgument("epsilons must be positive");
  }
  if (!(cfg.bn.momentum > 0 && cfg.bn.momentum < 1)) {
    throw InvalidArgument("batch-norm momentum must lie in (0, 1)");
  }
}

TrainResult train(const Matrix& features, std::span<const int> labels, const Architecture& arch,
                  const TrainConfig& cfg) {
  validate(cfg);
  const auto n = static_cast<std::size_t>(features.rows());
  if (labels.size() != n) throw DimensionMismatch("label count differs from row count");
  if (features.cols() != arch.input_dim) throw DimensionMismatch("feature width differs from input_dim");
  if (n < static_cast<std::size_t>(cfg.batch_size)) {
    throw InvalidArgument("need at least batch_size (" + std::to_string(cfg.batch_size) +
                          ") samples, got " + std::to_string(n));
  }
  for (int y : labels) {
    if (y < 0 || y >= Architecture::kOutputs) throw InvalidArgument("label out of range");
  }

  TrainResult result{init(arch, derive_seed(cfg.seed, 0)), {}};
  Params& p = result.params;
  Rng shuffle_rng(derive_seed(cfg.seed, 1));
  Rng dropout_rng(derive_seed(cfg.seed, 2));

  AdamState adam;
  {
    const auto params = trainable(p);
    for (std::size_t t = 0; t < kTrainableTensors; ++t) {
      adam.m[t] = Matrix::Zero(params[t]->rows(), params[t]->cols());
      adam.v[t] = Matrix::Zero(params[t]->rows(), params[t]->cols());
    }
  }

  // Batch boundaries; a lone trailing sample joins the previous batch since
  // batch statistics need at least two rows.
  std::vector<std::size_t> bounds;
  for (std::size_t b = 0; b < n; b += static_cast<std::size_t>(cfg.batch_size)) bounds.push_back(b);
  if (n - bounds.back() < 2) bounds.pop_back();
  bounds.push_back(n);

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Activations cache;
  std::vector<int> batch_labels;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order.begin(), order.end());
    double epoch_loss = 0.0;
    for (std::size_t b = 0; b + 1 < bounds.size(); ++b) {
      const std::size_t begin = bounds[b];
      const std::size_t size = bounds[b + 1] - begin;
      Matrix batch(static_cast<Eigen::Index>(size), features.cols());
      batch_labels.resize(size);
      for (std::size_t i = 0; i < size; ++i) {
        batch.row(static_cast<Eigen::Index>(i)) = features.row(static_cast<Eigen::Index>(order[begin + i]));
        batch_labels[i] = labels[order[begin + i]];
      }
      forward(p, batch, ForwardMode::train(), &dropout_rng, &cache, cfg.bn);
      const double loss = cross_entropy(cache.logits, batch_labels);
      if (!std::isfinite(loss)) {
        throw TrainingDiverged("loss became non-finite at epoch " + std::to_string(epoch + 1) +
                               ", batch " + std::to_string(b + 1) +
                               "; try a smaller learning rate");
      }
      epoch_loss += loss * static_cast<double>(size);

      const Gradients g = backward(p, cache, batch_labels);
      ++adam.step;
      const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(adam.step));
      const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(adam.step));
      const auto params = trainable(p);
      const auto grads = trainable(g);
      for (std::size_t t = 0; t < kTrainableTensors; ++t) {
        adam.m[t] = cfg.beta1 * adam.m[t] + (1.0 - cfg.beta1) * *grads[t];
        adam.v[t] = cfg.beta2 * adam.v[t] + (1.0 - cfg.beta2) * grads[t]->cwiseAbs2();
        params[t]->array() -= cfg.learning_rate * (adam.m[t].array() / c1) /
                              ((adam.v[t].array() / c2).sqrt() + cfg.adam_epsilon);
      }

      const double unbias = static_cast<double>(size) / static_cast<double>(size - 1);
      p.running_mean = cfg.bn.momentum * p.running_mean + (1.0 - cfg.bn.momentum) * cache.batch_mean;
      p.running_var =
          cfg.bn.momentum * p.running_var + (1.0 - cfg.bn.momentum) * unbias * cache.batch_var;
    }
    result.loss_history.push_back(epoch_loss / static_cast<double>(n));
  }
  return result;
}

TrainResult train(const FeatureStore& store, const TrainConfig& cfg) {
  const auto labels = label_ordinals(store.labels);
  return train(to_matrix(store), labels, Architecture{static_cast<int>(store.dim)}, cfg);
}

int argmax(std::span<const double> row) {
  int best = 0;
  for (std::size_t k = 1; k < row.size(); ++k) {
    if (row[k] > row[static_cast<std::size_t>(best)]) best = static_cast<int>(k);
  }
  return best;
}

std::vector<MagLevel> predict(const Params& params, const Matrix& batch) {
  const Matrix probs = forward(params, batch, ForwardMode::eval());
  std::vector<MagLevel> out(static_cast<std::size_t>(probs.rows()));
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    out[static_cast<std::size_t>(i)] =
        kAllLevels[static_cast<std::size_t>(argmax({probs.row(i).data(), static_cast<std::size_t>(probs.cols())}))];
  }
  return out;
}

std::vector<MagLevel> predict(const Params& params, const FeatureStore& store) {
  return predict(params, to_matrix(store));
}

Matrix to_matrix(MatrixView view) {
  Matrix m(static_cast<Eigen::Index>(view.rows), static_cast<Eigen::Index>(view.cols));
  for (std::size_t i = 0; i < view.rows * view.cols; ++i) m.data()[i] = view.data[i];
  return m;
}

Matrix to_matrix(const FeatureStore& store) { return to_matrix(view(store)); }

std::vector<int> label_ordinals(std::span<const MagLevel> labels) {
  std::vector<int> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) out[i] = static_cast<int>(ordinal(labels[i]));
  return out;
}

GradCheckResult grad_check(const Params& params, const Matrix& batch, std::span<const int> labels,
                           double epsilon, std::size_t max_entries, std::uint64_t seed) {
  Activations cache;
  forward(params, batch, ForwardMode::no_dropout(), nullptr, &cache);
  const Gradients analytic = backward(params, cache, labels);
  const auto grads = trainable(analytic);

  Params probe = params;
  const auto tensors = trainable(probe);
  auto loss_at = [&] {
    Activations c;
    forward(probe, batch, ForwardMode::no_dropout(), nullptr, &c);
    return cross_entropy(c.logits, labels);
  };

  GradCheckResult result;
  result.per_tensor.assign(kTrainableTensors, 0.0);
  Rng rng(seed);
  for (std::size_t t = 0; t < kTrainableTensors; ++t) {
    const auto size = static_cast<std::size_t>(tensors[t]->size());
    std::vector<std::size_t> positions;
    if (size <= max_entries) {
      positions.resize(size);
      std::iota(positions.begin(), positions.end(), std::size_t{0});
    } else {
      for (std::size_t i = 0; i < max_entries; ++i) positions.push_back(rng.uniform_index(size));
    }
    for (std::size_t pos : positions) {
      double& w = tensors[t]->data()[pos];
      const double saved = w;
      w = saved + epsilon;
      const double up = loss_at();
      w = saved - epsilon;
      const double down = loss_at();
      w = saved;
      const double numeric = (up - down) / (2.0 * epsilon);
      const double a = grads[t]->data()[pos];
      const double rel = std::abs(a - numeric) / std::max(std::abs(a) + std::abs(numeric), 1e-6);
      result.per_tensor[t] = std::max(result.per_tensor[t], rel);
      ++result.checked;
    }
    result.max_relative_error = std::max(result.max_relative_error, result.per_tensor[t]);
  }
  return result;
}

void save_model(const std::filesystem::path& path, const Params& params) {
  std::vector<std::uint8_t> out(kMagic.begin(), kMagic.end());
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(params.input_dim()));
  put_u32(out, Architecture::kHidden1);
  put_u32(out, Architecture::kHidden2);
  put_u32(out, Architecture::kOutputs);
  for (const Matrix* m : all_tensors(params)) {
    // Row vectors are stored as rank 1.
    if (m->rows() == 1) {
      put_u32(out, 1);
      put_u32(out, static_cast<std::uint32_t>(m->cols()));
    } else {
      put_u32(out, 2);
      put_u32(out, static_cast<std::uint32_t>(m->rows()));
      put_u32(out, static_cast<std::uint32_t>(m->cols()));
    }
    for (Eigen::Index i = 0; i < m->size(); ++i) put_f64(out, m->data()[i]);
  }
  write_file_atomic(path, out);
}

Params load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileNotFound(path.string());
  Reader r({std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()}, path.string());
  if (std::memcmp(r.take(4), kMagic.data(), 4) != 0) {
    throw MalformedModel(path.string() + ": not an MMLP model");
  }
  if (const auto v = r.u32(); v != kVersion) {
    throw MalformedModel(path.string() + ": unsupported version " + std::to_string(v));
  }
  const auto d = static_cast<int>(r.u32());
  if (d < 1 || r.u32() != Architecture::kHidden1 || r.u32() != Architecture::kHidden2 ||
      r.u32() != Architecture::kOutputs) {
    throw MalformedModel(path.string() + ": unexpected layer sizes");
  }
  Params p = init(Architecture{d}, 0);
  for (Matrix* m : all_tensors(p)) {
    const auto rank = r.u32();
    Eigen::Index rows = 1, cols = 0;
    if (rank == 1) {
      cols = r.u32();
    } else if (rank == 2) {
      rows = r.u32();
      cols = r.u32();
    } else {
      throw MalformedModel(path.string() + ": bad tensor rank");
    }
    if (rows != m->rows() || cols != m->cols()) {
      throw MalformedModel(path.string() + ": tensor shape mismatch");
    }
    for (Eigen::Index i = 0; i < m->size(); ++i) {
      const double v = r.f64();
      if (!std::isfinite(v)) throw MalformedModel(path.string() + ": non-finite parameter");
      m->data()[i] = v;
    }
  }
  if (!r.done()) throw MalformedModel(path.string() + ": trailing bytes");
  if ((p.running_var.array() <= 0.0).any()) {
    throw MalformedModel(path.string() + ": running variance must be positive");
  }
  return p;
}

void save_sidecar(const std::filesystem::path& model_path, const Params& params,
                  const TrainConfig& cfg, std::span<const double> loss_history) {
  nlohmann::ordered_json doc;
  doc["architecture"] = {{"input_dim", params.input_dim()},
                         {"hidden1", Architecture::kHidden1},
                         {"hidden1_batch_norm", true},
                         {"hidden1_activation", "relu"},
                         {"hidden1_dropout", Architecture::kDropout},
                         {"hidden2", Architecture::kHidden2},
                         {"hidden2_activation", "relu"},
                         {"outputs", Architecture::kOutputs},
                         {"output_activation", "softmax"}};
  doc["train_config"] = {{"epochs", cfg.epochs},
                         {"batch_size", cfg.batch_size},
                         {"learning_rate", cfg.learning_rate},
                         {"optimizer", "adam"},
                         {"beta1", cfg.beta1},
                         {"beta2", cfg.beta2},
                         {"adam_epsilon", cfg.adam_epsilon},
                         {"bn_momentum", cfg.bn.momentum},
                         {"bn_epsilon", cfg.bn.epsilon}};
  doc["seed"] = cfg.seed;
  doc["determinism"] = "bitwise";
  doc["loss_history"] = std::vector<double>(loss_history.begin(), loss_history.end());
  auto path = model_path;
  path += ".json";
  const std::string text = doc.dump(2) + "\n";
  write_text_atomic(path, text);
}

}  // namespace magscope::mlp
