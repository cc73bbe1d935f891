#pragma once

// Minimal ONNX inference engine: float32 CNN operators on CPU, enough for
// DenseNet-style feature extractors and small test graphs.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "magscope/deep.hpp"

namespace onnx {
class ModelProto;
}

namespace magscope::deep::onnx_rt {

/// Operators the engine executes.
const std::vector<std::string>& supported_ops();

class Model {
 public:
  /// Throws FileNotFound or MalformedModel.
  static std::shared_ptr<Model> load(const std::filesystem::path& path);
  /// Throws MalformedModel.
  static std::shared_ptr<Model> parse(std::string_view bytes, const std::string& origin);
  static std::shared_ptr<Model> from_proto(const onnx::ModelProto& proto, const std::string& origin);

  ~Model();

  /// Graph inputs that are not initializers.
  const std::vector<std::string>& inputs() const noexcept;
  const std::vector<std::string>& outputs() const noexcept;

  /// Feeds `input` to graph input `input_name` and evaluates `output_name`.
  /// Only nodes the output depends on run. Throws MalformedModel for
  /// unknown names and InvalidArgument when shapes do not fit.
  Tensor run(const std::string& input_name, const Tensor& input, const std::string& output_name,
             unsigned threads = 1) const;

 private:
  struct Impl;
  explicit Model(std::unique_ptr<Impl> impl);
  std::unique_ptr<Impl> impl_;
};

}  // namespace magscope::deep::onnx_rt
