#pragma once

namespace magscope {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace magscope
