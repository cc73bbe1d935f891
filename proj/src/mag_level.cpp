#include "magscope/mag_level.hpp"

#include <cmath>

namespace magscope {

std::optional<MagLevel> level_from_string(std::string_view s) noexcept {
  for (MagLevel level : kAllLevels) {
    if (to_string(level) == s) return level;
  }
  return std::nullopt;
}

std::optional<MagLevel> level_from_ordinal(std::size_t i) noexcept {
  if (i >= kNumLevels) return std::nullopt;
  return kAllLevels[i];
}

std::optional<int> downsample_factor(double base_power, MagLevel level) noexcept {
  const double ratio = base_power / power(level);
  if (!(ratio >= 1.0)) return std::nullopt;
  const double rounded = std::round(ratio);
  if (rounded != ratio || rounded > 1 << 20) return std::nullopt;
  return static_cast<int>(rounded);
}

}  // namespace magscope
