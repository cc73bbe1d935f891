#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace magscope {

/// 8-bit image, interleaved channels, row-major.
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> data;

  Image() = default;
  Image(int w, int h, int c, std::uint8_t fill = 0)
      : width(w), height(h), channels(c),
        data(static_cast<std::size_t>(w) * h * c, fill) {}

  std::size_t stride() const noexcept { return static_cast<std::size_t>(width) * channels; }

  std::uint8_t* row(int y) noexcept { return data.data() + y * stride(); }
  const std::uint8_t* row(int y) const noexcept { return data.data() + y * stride(); }

  std::uint8_t& at(int x, int y, int c) noexcept {
    return data[y * stride() + static_cast<std::size_t>(x) * channels + c];
  }
  std::uint8_t at(int x, int y, int c) const noexcept {
    return data[y * stride() + static_cast<std::size_t>(x) * channels + c];
  }

  bool empty() const noexcept { return data.empty(); }

  friend bool operator==(const Image&, const Image&) = default;
};

enum class PngSpeed { Default, Fast };

/// Reads an 8-bit PNG keeping its channel count (1 to 4). Palette images
/// expand to RGB; 16-bit samples are reduced to 8 bits.
Image read_png(const std::filesystem::path& path);

/// Encodes 1-4 channel images. Output bytes depend only on pixel content.
std::vector<std::uint8_t> encode_png(const Image& image, PngSpeed speed = PngSpeed::Default);

void write_png(const std::filesystem::path& path, const Image& image,
               PngSpeed speed = PngSpeed::Default);

/// Writes bytes to `path` through a temporary file and rename.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text_atomic(const std::filesystem::path& path, std::string_view text);

/// Whole file as a string. Throws FileNotFound or IoError.
std::string read_text(const std::filesystem::path& path);

}  // namespace magscope
