#include "magscope/lbp.hpp"

#include <atomic>
#include <bit>
#include <chrono>
#include <cmath>
#include <mutex>
#include <numbers>
#include <string>

#include "magscope/error.hpp"
#include "magscope/parallel.hpp"

namespace magscope::lbp {
namespace {

void validate(int radius, int neighbors) {
  if (radius < 1) throw InvalidArgument("LBP radius must be >= 1");
  if (neighbors < 1 || neighbors > 32) throw InvalidArgument("LBP neighbors must be in [1, 32]");
}

double snap(double v) {
  const double r = std::round(v);
  return std::abs(v - r) < 1e-9 ? r : v;
}

std::uint32_t low_mask(int bits) {
  return bits >= 32 ? 0xffffffffu : (1u << bits) - 1u;
}

// Histogram with the sampler's taps flattened to linear offsets.
std::vector<double> histogram_with(const Sampler& sampler, const GrayImage& gray) {
  const int r = sampler.radius();
  const int p = sampler.neighbors();
  if (gray.width < 2 * r + 3 || gray.height < 2 * r + 3) {
    throw InvalidArgument("image " + std::to_string(gray.width) + "x" +
                          std::to_string(gray.height) + " is too small for radius " +
                          std::to_string(r) + " (needs " + std::to_string(2 * r + 3) +
                          " per side)");
  }
  struct FlatTap {
    std::ptrdiff_t offset;
    double weight;
  };
  std::vector<FlatTap> flat;
  std::vector<std::size_t> begin(static_cast<std::size_t>(p) + 1, 0);
  for (int k = 0; k < p; ++k) {
    for (const auto& t : sampler.taps(k)) {
      flat.push_back({static_cast<std::ptrdiff_t>(t.dy) * gray.width + t.dx, t.weight});
    }
    begin[k + 1] = flat.size();
  }

  const int m = interior_margin(r);
  std::vector<std::uint64_t> counts(static_cast<std::size_t>(p) + 2, 0);
  for (int y = m; y < gray.height - m; ++y) {
    const double* row = gray.values.data() + static_cast<std::size_t>(y) * gray.width;
    for (int x = m; x < gray.width - m; ++x) {
      const double* px = row + x;
      const double center = *px;
      std::uint32_t code = 0;
      for (int k = 0; k < p; ++k) {
        double s = 0.0;
        for (std::size_t t = begin[k]; t < begin[k + 1]; ++t) {
          s += flat[t].weight * (px[flat[t].offset] - center);
        }
        code |= static_cast<std::uint32_t>(s >= -kTieTolerance) << k;
      }
      ++counts[static_cast<std::size_t>(riu2_bin(code, p))];
    }
  }
  std::uint64_t total = 0;
  for (auto c : counts) total += c;
  std::vector<double> hist(counts.size());
  for (std::size_t i = 0; i < counts.size(); ++i) {
    hist[i] = static_cast<double>(counts[i]) / static_cast<double>(total);
  }
  return hist;
}

}  // namespace

GrayImage to_grayscale(const Image& image) {
  if (image.channels != 3) {
    throw InvalidArgument("grayscale conversion needs 3 channels, got " +
                          std::to_string(image.channels));
  }
  GrayImage gray(image.width, image.height);
  const std::size_t n = gray.values.size();
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* px = image.data.data() + 3 * i;
    gray.values[i] = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
  }
  return gray;
}

LbpConfig preset_config(Preset preset) noexcept {
  switch (preset) {
    case Preset::LBP1: return {1, 8};
    case Preset::LBP2: return {2, 16};
    case Preset::LBP3: return {3, 24};
  }
  return {1, 8};
}

std::optional<Preset> preset_from_name(std::string_view name) noexcept {
  for (Preset p : {Preset::LBP1, Preset::LBP2, Preset::LBP3}) {
    if (preset_name(p) == name) return p;
  }
  return std::nullopt;
}

std::string_view preset_name(Preset preset) noexcept {
  switch (preset) {
    case Preset::LBP1: return "LBP1";
    case Preset::LBP2: return "LBP2";
    case Preset::LBP3: return "LBP3";
  }
  return "";
}

Sampler::Sampler(int radius, int neighbors) : radius_(radius), neighbors_(neighbors) {
  validate(radius, neighbors);
  std::vector<std::vector<Tap>> per(static_cast<std::size_t>(neighbors));
  const int quarter = neighbors % 4 == 0 ? neighbors / 4 : 0;
  for (int k = 0; k < neighbors; ++k) {
    auto& taps = per[static_cast<std::size_t>(k)];
    if (quarter > 0 && k >= quarter) {
      // Rotating offset (dx, dy) by +90 degrees gives (dy, -dx).
      for (const Tap& t : per[static_cast<std::size_t>(k - quarter)]) {
        taps.push_back({t.dy, -t.dx, t.weight});
      }
      continue;
    }
    const double angle = 2.0 * std::numbers::pi * k / neighbors;
    const double dx = snap(radius * std::cos(angle));
    const double dy = snap(-radius * std::sin(angle));
    const double x0 = std::floor(dx);
    const double y0 = std::floor(dy);
    const double fx = dx - x0;
    const double fy = dy - y0;
    const int ix = static_cast<int>(x0);
    const int iy = static_cast<int>(y0);
    const Tap candidates[4] = {{ix, iy, (1.0 - fx) * (1.0 - fy)},
                               {ix + 1, iy, fx * (1.0 - fy)},
                               {ix, iy + 1, (1.0 - fx) * fy},
                               {ix + 1, iy + 1, fx * fy}};
    for (const Tap& t : candidates) {
      if (t.weight != 0.0) taps.push_back(t);
    }
  }
  begin_.push_back(0);
  for (const auto& taps : per) {
    taps_.insert(taps_.end(), taps.begin(), taps.end());
    begin_.push_back(taps_.size());
  }
}

std::uint32_t Sampler::code_unchecked(const GrayImage& gray, int x, int y) const noexcept {
  const double center = gray.at(x, y);
  std::uint32_t code = 0;
  for (int k = 0; k < neighbors_; ++k) {
    double s = 0.0;
    for (const Tap& t : taps(k)) s += t.weight * (gray.at(x + t.dx, y + t.dy) - center);
    code |= static_cast<std::uint32_t>(s >= -kTieTolerance) << k;
  }
  return code;
}

std::uint32_t lbp_code(const GrayImage& gray, int x, int y, int radius, int neighbors) {
  validate(radius, neighbors);
  const int m = interior_margin(radius);
  if (x < m || y < m || x >= gray.width - m || y >= gray.height - m) {
    throw OutOfBounds("LBP center (" + std::to_string(x) + ", " + std::to_string(y) +
                      ") is within " + std::to_string(m) + " pixels of the border");
  }
  return Sampler(radius, neighbors).code_unchecked(gray, x, y);
}

int transitions(std::uint32_t code, int neighbors) noexcept {
  const std::uint32_t mask = low_mask(neighbors);
  code &= mask;
  const std::uint32_t rotated = ((code << 1) | (code >> (neighbors - 1))) & mask;
  return std::popcount(code ^ rotated);
}

int riu2_bin(std::uint32_t code, int neighbors) {
  if (neighbors < 1 || neighbors > 32) throw InvalidArgument("LBP neighbors must be in [1, 32]");
  if ((code & ~low_mask(neighbors)) != 0) {
    throw InvalidArgument("LBP code has bits above position " + std::to_string(neighbors - 1));
  }
  return transitions(code, neighbors) <= 2 ? std::popcount(code) : neighbors + 1;
}

std::vector<double> lbp_histogram(const GrayImage& gray, const LbpConfig& cfg) {
  return histogram_with(Sampler(cfg.radius, cfg.neighbors), gray);
}

FeatureStore extract_lbp_batch(std::span<const pyramid::PatchRecord> records,
                               const LbpConfig& cfg, unsigned threads, ExtractionStats* stats,
                               const ProgressFn& progress) {
  const auto start = std::chrono::steady_clock::now();
  const Sampler sampler(cfg.radius, cfg.neighbors);
  const auto bins = static_cast<std::size_t>(cfg.bins());
  std::vector<std::vector<double>> rows(records.size());

  std::atomic<std::size_t> done{0};
  std::mutex progress_mu;
  parallel_for(records.size(), threads, [&](std::size_t i) {
    const auto& rec = records[i];
    try {
      const Image patch = read_png(rec.image_path);
      rows[i] = histogram_with(sampler, to_grayscale(patch));
    } catch (const std::exception& e) {
      throw Error("patch " + rec.patch_id + ": " + e.what());
    }
    const std::size_t n = ++done;
    if (progress) {
      std::lock_guard lock(progress_mu);
      progress(n, records.size());
    }
  });

  FeatureStore store(bins);
  store.patch_ids.reserve(records.size());
  store.labels.reserve(records.size());
  store.values.reserve(records.size() * bins);
  for (std::size_t i = 0; i < records.size(); ++i) {
    store.append(records[i].patch_id, records[i].level, std::span<const double>(rows[i]));
  }
  if (stats) {
    stats->patches = records.size();
    stats->seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
  return store;
}

}  // namespace magscope::lbp
