#include "magscope/deep.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <chrono>
#include <cmath>

#include <json.hpp>

#include "magscope/error.hpp"
#include "onnx/runtime.hpp"

namespace magscope::deep {
namespace {

constexpr std::size_t kPlane = static_cast<std::size_t>(kInputSize) * kInputSize;

std::vector<std::uint8_t> base64_decode(std::string_view text) {
  static const std::array<int, 256> table = [] {
    std::array<int, 256> t{};
    t.fill(-1);
    const std::string_view alphabet =
        "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    for (std::size_t i = 0; i < alphabet.size(); ++i) t[static_cast<unsigned char>(alphabet[i])] = static_cast<int>(i);
    return t;
  }();
  std::vector<std::uint8_t> out;
  out.reserve(text.size() * 3 / 4);
  std::uint32_t acc = 0;
  int bits = 0;
  std::size_t padding = 0;
  for (char ch : text) {
    if (ch == '=') {
      ++padding;
      continue;
    }
    if (ch == '\n' || ch == '\r' || ch == ' ') continue;
    const int v = table[static_cast<unsigned char>(ch)];
    if (v < 0 || padding > 0) throw ParseError(1, "invalid base64 data");
    acc = (acc << 6) | static_cast<std::uint32_t>(v);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(static_cast<std::uint8_t>(acc >> bits));
    }
  }
  if (padding > 2) throw ParseError(1, "invalid base64 padding");
  return out;
}

std::vector<float> decode_floats(const nlohmann::json& field, const char* name) {
  std::vector<std::uint8_t> bytes;
  auto append = [&](const nlohmann::json& s) {
    if (!s.is_string()) throw ParseError(1, std::string("'") + name + "' must hold base64 strings");
    const auto part = base64_decode(s.get_ref<const std::string&>());
    bytes.insert(bytes.end(), part.begin(), part.end());
  };
  if (field.is_array()) {
    for (const auto& s : field) append(s);
  } else {
    append(field);
  }
  if (bytes.size() % 4 != 0) throw ParseError(1, std::string("'") + name + "' is not a whole number of float32 values");
  std::vector<float> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::uint32_t u = static_cast<std::uint32_t>(bytes[4 * i]) |
                            static_cast<std::uint32_t>(bytes[4 * i + 1]) << 8 |
                            static_cast<std::uint32_t>(bytes[4 * i + 2]) << 16 |
                            static_cast<std::uint32_t>(bytes[4 * i + 3]) << 24;
    out[i] = std::bit_cast<float>(u);
  }
  return out;
}

// Planar float image, bilinearly resampled with half-pixel centers and edge
// clamping. Same-size input is copied exactly.
std::vector<double> to_planar(const Image& src, int out_w, int out_h) {
  std::vector<double> out(3 * static_cast<std::size_t>(out_w) * out_h);
  const double sx = static_cast<double>(src.width) / out_w;
  const double sy = static_cast<double>(src.height) / out_h;
  for (int y = 0; y < out_h; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.height - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, src.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.width - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, src.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < 3; ++c) {
        const double top = src.at(x0, y0, c) + wx * (src.at(x1, y0, c) - src.at(x0, y0, c));
        const double bottom = src.at(x0, y1, c) + wx * (src.at(x1, y1, c) - src.at(x0, y1, c));
        out[(static_cast<std::size_t>(c) * out_h + y) * out_w + x] = top + wy * (bottom - top);
      }
    }
  }
  return out;
}

}  // namespace

std::size_t Tensor::elements() const noexcept {
  std::size_t n = 1;
  for (auto d : shape) n *= d < 0 ? 0 : static_cast<std::size_t>(d);
  return n;
}

ModelHandle::ModelHandle(std::shared_ptr<onnx_rt::Model> model, std::filesystem::path path,
                         std::string input_name, std::string output_name, std::size_t output_dim)
    : model_(std::move(model)),
      path_(std::move(path)),
      input_name_(std::move(input_name)),
      output_name_(std::move(output_name)),
      output_dim_(output_dim) {}

Tensor ModelHandle::run(const Tensor& input) const {
  if (input.shape.size() != 4 || input.shape[1] != 3 || input.shape[2] != kInputSize ||
      input.shape[3] != kInputSize) {
    throw InvalidArgument("model input must be N x 3 x 224 x 224");
  }
  Tensor out = model_->run(input_name_, input, output_name_, threads_);
  const auto n = static_cast<std::size_t>(input.shape[0]);
  if (out.shape.empty() || out.shape[0] != input.shape[0] || out.data.size() != n * output_dim_) {
    throw MalformedModel(path_.string() + ": output '" + output_name_ + "' does not have " +
                         std::to_string(output_dim_) + " values per sample");
  }
  out.shape = {input.shape[0], static_cast<std::int64_t>(output_dim_)};
  return out;
}

ModelHandle load_model(const std::filesystem::path& path, const std::string& input_name,
                       const std::string& output_name, std::size_t expected_dim) {
  auto model = onnx_rt::Model::load(path);
  const auto& ins = model->inputs();
  const auto& outs = model->outputs();
  if (std::find(ins.begin(), ins.end(), input_name) == ins.end()) {
    throw MalformedModel(path.string() + ": graph has no input named '" + input_name + "'");
  }
  if (std::find(outs.begin(), outs.end(), output_name) == outs.end()) {
    throw MalformedModel(path.string() + ": graph has no output named '" + output_name + "'");
  }
  Tensor probe{{1, 3, kInputSize, kInputSize}, std::vector<float>(3 * kPlane, 0.0f)};
  Tensor out;
  try {
    out = model->run(input_name, probe, output_name);
  } catch (const InvalidArgument& e) {
    throw MalformedModel(path.string() + ": probe inference failed: " + e.what());
  }
  if (out.shape.empty() || out.shape[0] != 1) {
    throw MalformedModel(path.string() + ": output '" + output_name + "' has no batch axis");
  }
  if (out.data.size() != expected_dim) throw WrongOutputDim(expected_dim, out.data.size());
  return ModelHandle(std::move(model), path, input_name, output_name, expected_dim);
}

std::vector<float> preprocess(const Image& image) {
  if (image.channels != 3) {
    throw InvalidArgument("deep features need a 3-channel image, got " + std::to_string(image.channels));
  }
  if (image.width < 1 || image.height < 1) throw InvalidArgument("empty image");
  const auto planar = to_planar(image, kInputSize, kInputSize);
  std::vector<float> out(3 * kPlane);
  for (std::size_t c = 0; c < 3; ++c) {
    const double* src = planar.data() + c * kPlane;
    double sum = 0.0;
    for (std::size_t q = 0; q < kPlane; ++q) sum += src[q];
    const double mean = sum / static_cast<double>(kPlane);
    for (std::size_t q = 0; q < kPlane; ++q) out[c * kPlane + q] = static_cast<float>(src[q] - mean);
  }
  return out;
}

FeatureStore extract_deep_batch(std::span<const pyramid::PatchRecord> records, const ModelHandle& model,
                                std::size_t batch_size, ExtractionStats* stats, const ProgressFn& progress) {
  if (batch_size < 1) throw InvalidArgument("batch size must be >= 1");
  const auto start = std::chrono::steady_clock::now();
  FeatureStore store(model.output_dim());
  for (std::size_t begin = 0; begin < records.size(); begin += batch_size) {
    const std::size_t end = std::min(records.size(), begin + batch_size);
    const auto n = static_cast<std::int64_t>(end - begin);
    Tensor batch{{n, 3, kInputSize, kInputSize}, {}};
    batch.data.reserve(static_cast<std::size_t>(n) * 3 * kPlane);
    for (std::size_t i = begin; i < end; ++i) {
      try {
        const auto x = preprocess(read_png(records[i].image_path));
        batch.data.insert(batch.data.end(), x.begin(), x.end());
      } catch (const Error& e) {
        throw Error("patch " + records[i].patch_id + ": " + e.what());
      }
    }
    Tensor out;
    try {
      out = model.run(batch);
    } catch (const Error& e) {
      throw Error("inference failed for batch " + records[begin].patch_id + " .. " +
                  records[end - 1].patch_id + ": " + e.what());
    }
    for (std::size_t i = begin; i < end; ++i) {
      const float* row = out.data.data() + (i - begin) * model.output_dim();
      store.append(records[i].patch_id, records[i].level, std::span<const float>(row, model.output_dim()));
    }
    if (progress) progress(end, records.size());
  }
  if (stats) {
    stats->patches = records.size();
    stats->seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
  return store;
}

Golden read_golden(const std::filesystem::path& path, std::size_t output_dim) {
  const std::string text = read_text(path);
  Golden g;
  try {
    const auto doc = nlohmann::json::parse(text);
    if (!doc.is_object() || !doc.contains("inputs") || !doc.contains("outputs")) {
      throw ParseError(1, "expected an object with 'inputs' and 'outputs'");
    }
    g.inputs.data = decode_floats(doc["inputs"], "inputs");
    g.outputs.data = decode_floats(doc["outputs"], "outputs");
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(1, path.string() + ": " + e.what());
  }
  const std::size_t per_input = 3 * kPlane;
  if (g.inputs.data.empty() || g.inputs.data.size() % per_input != 0) {
    throw ParseError(1, path.string() + ": inputs are not a whole number of 3x224x224 tensors");
  }
  const auto n = static_cast<std::int64_t>(g.inputs.data.size() / per_input);
  if (g.outputs.data.size() != static_cast<std::size_t>(n) * output_dim) {
    throw ParseError(1, path.string() + ": expected " + std::to_string(n) + " x " + std::to_string(output_dim) +
                            " outputs, got " + std::to_string(g.outputs.data.size()) + " values");
  }
  g.inputs.shape = {n, 3, kInputSize, kInputSize};
  g.outputs.shape = {n, static_cast<std::int64_t>(output_dim)};
  return g;
}

}  // namespace magscope::deep
