#pragma once

#define BSIFT_VERSION_STRING "0.1.0"

namespace bsift {

inline constexpr const char* version() { return BSIFT_VERSION_STRING; }

}  // namespace bsift
