#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "magscope/features.hpp"
#include "magscope/image.hpp"
#include "magscope/pyramid.hpp"

namespace magscope::lbp {

/// Single-channel image of real gray values.
struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<double> values;

  GrayImage() = default;
  GrayImage(int w, int h, double fill = 0.0)
      : width(w), height(h), values(static_cast<std::size_t>(w) * h, fill) {}

  double& at(int x, int y) noexcept { return values[static_cast<std::size_t>(y) * width + x]; }
  double at(int x, int y) const noexcept {
    return values[static_cast<std::size_t>(y) * width + x];
  }
};

/// BT.601 luma 0.299 R + 0.587 G + 0.114 B, unquantized.
/// Throws InvalidArgument unless the image has 3 channels.
GrayImage to_grayscale(const Image& image);

struct LbpConfig {
  int radius = 1;
  int neighbors = 8;

  /// Histogram length of the riu2 mapping.
  int bins() const noexcept { return neighbors + 2; }
};

enum class Preset { LBP1, LBP2, LBP3 };

/// LBP1 = (1, 8), LBP2 = (2, 16), LBP3 = (3, 24).
LbpConfig preset_config(Preset preset) noexcept;
std::optional<Preset> preset_from_name(std::string_view name) noexcept;
std::string_view preset_name(Preset preset) noexcept;

/// Pixels closer than this to any border are skipped.
constexpr int interior_margin(int radius) noexcept { return radius + 1; }

/// Circular neighbor sampling pattern for one (radius, neighbors) pair.
/// Neighbor k sits at angle 2*pi*k/p (counter-clockwise, y down) and is
/// bilinearly interpolated. When p is divisible by 4, the taps for the
/// last three quadrants are exact 90-degree rotations of the first
/// quadrant's taps, which makes histograms exactly invariant to 90-degree
/// image rotations.
class Sampler {
 public:
  struct Tap {
    int dx;
    int dy;
    double weight;
  };

  Sampler(int radius, int neighbors);

  int radius() const noexcept { return radius_; }
  int neighbors() const noexcept { return neighbors_; }
  std::span<const Tap> taps(int k) const noexcept {
    return {taps_.data() + begin_[k], begin_[k + 1] - begin_[k]};
  }

  /// Code at (x, y); no bounds checks.
  std::uint32_t code_unchecked(const GrayImage& gray, int x, int y) const noexcept;

 private:
  int radius_;
  int neighbors_;
  std::vector<Tap> taps_;
  std::vector<std::size_t> begin_;
};

/// Neighbor-minus-center differences above -kTieTolerance count as ties
/// and set the bit, so rounding noise cannot split equal samples.
inline constexpr double kTieTolerance = 1e-9;

/// bit k is set iff the interpolated neighbor k is >= the center.
/// Throws OutOfBounds when (x, y) is within interior_margin(radius) of a
/// border and InvalidArgument for radius < 1 or neighbors outside [1, 32].
std::uint32_t lbp_code(const GrayImage& gray, int x, int y, int radius, int neighbors);

/// Rotation-invariant uniform mapping: popcount for codes with at most two
/// circular 0/1 transitions, p + 1 for the rest.
int riu2_bin(std::uint32_t code, int neighbors);

/// Number of circular 0/1 transitions in a p-bit code.
int transitions(std::uint32_t code, int neighbors) noexcept;

/// L1-normalized riu2 histogram over all interior pixels, length p + 2.
/// Throws InvalidArgument when a side is shorter than 2r + 3.
std::vector<double> lbp_histogram(const GrayImage& gray, const LbpConfig& cfg);

/// One histogram per record, in record order. Errors name the patch id.
FeatureStore extract_lbp_batch(std::span<const pyramid::PatchRecord> records,
                               const LbpConfig& cfg, unsigned threads = 1,
                               ExtractionStats* stats = nullptr,
                               const ProgressFn& progress = {});

}  // namespace magscope::lbp
