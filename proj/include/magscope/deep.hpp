#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "magscope/features.hpp"
#include "magscope/image.hpp"
#include "magscope/pyramid.hpp"

namespace magscope::deep {

inline constexpr int kInputSize = 224;
inline constexpr std::size_t kFeatureDim = 1024;

/// Dense float32 tensor, row-major.
struct Tensor {
  std::vector<std::int64_t> shape;
  std::vector<float> data;

  std::size_t elements() const noexcept;
};

namespace onnx_rt {
class Model;
}

/// A loaded embedding network. Not safe for concurrent run() calls.
class ModelHandle {
 public:
  ModelHandle(std::shared_ptr<onnx_rt::Model> model, std::filesystem::path path,
              std::string input_name, std::string output_name, std::size_t output_dim);

  const std::filesystem::path& path() const noexcept { return path_; }
  const std::string& input_name() const noexcept { return input_name_; }
  const std::string& output_name() const noexcept { return output_name_; }
  std::size_t output_dim() const noexcept { return output_dim_; }

  /// Worker threads used inside operators; results do not depend on it.
  void set_threads(unsigned threads) noexcept { threads_ = threads ? threads : 1; }
  unsigned threads() const noexcept { return threads_; }

  /// N x 3 x 224 x 224 in, N x output_dim out.
  Tensor run(const Tensor& input) const;

 private:
  std::shared_ptr<onnx_rt::Model> model_;
  std::filesystem::path path_;
  std::string input_name_;
  std::string output_name_;
  std::size_t output_dim_;
  unsigned threads_ = 1;
};

/// Loads an ONNX graph and checks it with a zero 1 x 3 x 224 x 224 pass.
/// Throws FileNotFound, MalformedModel (unparsable graph, unknown names or
/// unsupported operators) or WrongOutputDim.
ModelHandle load_model(const std::filesystem::path& path, const std::string& input_name = "input",
                       const std::string& output_name = "features",
                       std::size_t expected_dim = kFeatureDim);

/// 3 x 224 x 224 planar float tensor with each channel's mean subtracted.
/// Other sizes are bilinearly resized first (half-pixel centers, clamped).
/// Throws InvalidArgument unless the image has 3 channels.
std::vector<float> preprocess(const Image& image);

/// One vector per record in record order. Inference errors name the
/// patch ids of the failing batch.
FeatureStore extract_deep_batch(std::span<const pyramid::PatchRecord> records,
                                const ModelHandle& model, std::size_t batch_size = 16,
                                ExtractionStats* stats = nullptr, const ProgressFn& progress = {});

/// Reference activations shipped next to an exported model.
struct Golden {
  Tensor inputs;   // N x 3 x 224 x 224
  Tensor outputs;  // N x 1024
};

/// Reads {"inputs": base64 f32, "outputs": base64 f32}. Each field may be a
/// single string or an array of per-sample strings. Throws ParseError.
Golden read_golden(const std::filesystem::path& path, std::size_t output_dim = kFeatureDim);

}  // namespace magscope::deep
