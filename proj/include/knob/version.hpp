#pragma once

namespace knob {

inline constexpr const char* kVersion = "0.1.0";
inline constexpr const char* kToolName = "knobctl";

}  // namespace knob
