#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "magscope/mag_level.hpp"

namespace magscope {

/// Labeled fixed-length feature vectors, row-major, in patch-index order.
struct FeatureStore {
  std::size_t dim = 0;
  std::vector<std::string> patch_ids;
  std::vector<MagLevel> labels;
  std::vector<float> values;

  FeatureStore() = default;
  explicit FeatureStore(std::size_t d) : dim(d) {}

  std::size_t size() const noexcept { return labels.size(); }
  bool empty() const noexcept { return labels.empty(); }

  std::span<const float> row(std::size_t i) const noexcept {
    return {values.data() + i * dim, dim};
  }

  void append(std::string patch_id, MagLevel label, std::span<const float> row);
  void append(std::string patch_id, MagLevel label, std::span<const double> row);

  /// Rows selected by `indices`, in that order.
  FeatureStore subset(std::span<const std::size_t> indices) const;

  friend bool operator==(const FeatureStore&, const FeatureStore&) = default;
};

/// Read-only row-major matrix over float features.
struct MatrixView {
  const float* data = nullptr;
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::span<const float> row(std::size_t i) const noexcept { return {data + i * cols, cols}; }
  float at(std::size_t i, std::size_t j) const noexcept { return data[i * cols + j]; }
};

inline MatrixView view(const FeatureStore& store) noexcept {
  return {store.values.data(), store.size(), store.dim};
}

// On-disk forms. Binary: "MAGF", u32 version, u32 dim, u64 count, then per
// record a u32 label ordinal and dim little-endian f32 values; patch ids go
// to the sidecar `<path>.ids`, one per line. CSV: `patch_id,label,f0..`.

inline constexpr std::uint32_t kStoreVersion = 1;

std::filesystem::path ids_sidecar(const std::filesystem::path& store_path);

void save_store_binary(const std::filesystem::path& path, const FeatureStore& store);
FeatureStore load_store_binary(const std::filesystem::path& path);

void save_store_csv(const std::filesystem::path& path, const FeatureStore& store);
FeatureStore load_store_csv(const std::filesystem::path& path);

/// Picks the form from the extension: `.csv` is text, anything else binary.
void save_store(const std::filesystem::path& path, const FeatureStore& store);
FeatureStore load_store(const std::filesystem::path& path);

struct ExtractionStats {
  std::size_t patches = 0;
  double seconds = 0.0;
  double patches_per_second() const noexcept {
    return seconds > 0.0 ? static_cast<double>(patches) / seconds : 0.0;
  }
};

/// Called with (completed, total) as batch extraction advances.
using ProgressFn = std::function<void(std::size_t, std::size_t)>;

}  // namespace magscope
