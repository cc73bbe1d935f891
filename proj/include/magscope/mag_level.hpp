#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string_view>

namespace magscope {

/// Magnification levels in canonical report order.
enum class MagLevel : unsigned char { X2_5 = 0, X5 = 1, X10 = 2, X20 = 3, X40 = 4 };

inline constexpr std::size_t kNumLevels = 5;

inline constexpr std::array<MagLevel, kNumLevels> kAllLevels = {
    MagLevel::X2_5, MagLevel::X5, MagLevel::X10, MagLevel::X20, MagLevel::X40};

constexpr std::size_t ordinal(MagLevel level) noexcept {
  return static_cast<std::size_t>(level);
}

constexpr double power(MagLevel level) noexcept {
  constexpr std::array<double, kNumLevels> kPowers = {2.5, 5.0, 10.0, 20.0, 40.0};
  return kPowers[ordinal(level)];
}

constexpr std::string_view to_string(MagLevel level) noexcept {
  constexpr std::array<std::string_view, kNumLevels> kNames = {"2.5x", "5x", "10x", "20x",
                                                               "40x"};
  return kNames[ordinal(level)];
}

std::optional<MagLevel> level_from_string(std::string_view s) noexcept;
std::optional<MagLevel> level_from_ordinal(std::size_t i) noexcept;

/// base_power / power(level) when that is a positive integer and the level
/// is not above base power; empty otherwise.
std::optional<int> downsample_factor(double base_power, MagLevel level) noexcept;

}  // namespace magscope
