#include "magscope/image.hpp"

#include <png.h>

#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>

#include "magscope/error.hpp"

namespace magscope {
namespace {

png_uint_32 format_for_channels(int channels) {
  switch (channels) {
    case 1: return PNG_FORMAT_GRAY;
    case 2: return PNG_FORMAT_GA;
    case 3: return PNG_FORMAT_RGB;
    case 4: return PNG_FORMAT_RGBA;
    default: throw InvalidArgument("unsupported channel count " + std::to_string(channels));
  }
}

struct PngImageGuard {
  png_image* image;
  ~PngImageGuard() { png_image_free(image); }
};

}  // namespace

Image read_png(const std::filesystem::path& path) {
  std::error_code ec;
  if (!std::filesystem::is_regular_file(path, ec)) throw FileNotFound(path.string());

  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  PngImageGuard guard{&png};
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw IoError("cannot decode PNG " + path.string() + ": " + png.message);
  }
  int channels = 3;
  if (png.format & PNG_FORMAT_FLAG_COLORMAP) {
    channels = (png.format & PNG_FORMAT_FLAG_ALPHA) ? 4 : 3;
  } else {
    channels = ((png.format & PNG_FORMAT_FLAG_COLOR) ? 3 : 1) +
               ((png.format & PNG_FORMAT_FLAG_ALPHA) ? 1 : 0);
  }
  png.format = format_for_channels(channels);
  Image out(static_cast<int>(png.width), static_cast<int>(png.height), channels);
  if (!png_image_finish_read(&png, nullptr, out.data.data(), static_cast<png_int_32>(out.stride()),
                             nullptr)) {
    throw IoError("cannot decode PNG " + path.string() + ": " + png.message);
  }
  return out;
}

std::vector<std::uint8_t> encode_png(const Image& image, PngSpeed speed) {
  if (image.width <= 0 || image.height <= 0) throw InvalidArgument("cannot encode an empty image");
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = format_for_channels(image.channels);
  if (speed == PngSpeed::Fast) png.flags |= PNG_IMAGE_FLAG_FAST;
  PngImageGuard guard{&png};

  png_alloc_size_t size = 0;
  const auto stride = static_cast<png_int_32>(image.stride());
  if (!png_image_write_to_memory(&png, nullptr, &size, 0, image.data.data(), stride, nullptr)) {
    throw IoError(std::string("PNG encoding failed: ") + png.message);
  }
  std::vector<std::uint8_t> bytes(size);
  if (!png_image_write_to_memory(&png, bytes.data(), &size, 0, image.data.data(), stride,
                                 nullptr)) {
    throw IoError(std::string("PNG encoding failed: ") + png.message);
  }
  bytes.resize(size);
  return bytes;
}

void write_png(const std::filesystem::path& path, const Image& image, PngSpeed speed) {
  const auto bytes = encode_png(image, speed);
  write_file_atomic(path, bytes);
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw IoError("cannot move " + tmp.string() + " into place");
  }
}

void write_text_atomic(const std::filesystem::path& path, std::string_view text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    if (!std::filesystem::exists(path)) throw FileNotFound(path.string());
    throw IoError("cannot open " + path.string());
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read failed: " + path.string());
  return ss.str();
}

}  // namespace magscope
