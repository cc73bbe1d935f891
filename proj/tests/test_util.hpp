#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <string>
#include <unistd.h>

#include "magscope/image.hpp"
#include "magscope/lbp.hpp"
#include "magscope/rng.hpp"
#include "oracles.hpp"

namespace testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "t") {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("magscope-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const noexcept { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline magscope::Image random_image(int w, int h, int channels, std::uint64_t seed) {
  magscope::Rng rng(seed);
  magscope::Image img(w, h, channels);
  for (auto& v : img.data) v = static_cast<std::uint8_t>(rng.uniform_index(256));
  return img;
}

inline magscope::lbp::GrayImage random_gray(int w, int h, std::uint64_t seed) {
  magscope::Rng rng(seed);
  magscope::lbp::GrayImage g(w, h);
  for (auto& v : g.values) v = rng.uniform(0.0, 255.0);
  return g;
}

inline oracle::Gray to_oracle(const magscope::lbp::GrayImage& g) { return {g.width, g.height, g.values}; }

inline magscope::lbp::GrayImage from_oracle(const oracle::Gray& g) {
  magscope::lbp::GrayImage out(g.w, g.h);
  out.values = g.v;
  return out;
}

}  // namespace testing
