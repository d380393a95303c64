#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace gdla {

// FNV-1a, used for content fingerprints in report metadata and dataset ids.
inline uint64_t fnv1a64(std::string_view bytes) {
  uint64_t hash = 14695981039346656037ull;
  for (unsigned char c : bytes) {
    hash ^= c;
    hash *= 1099511628211ull;
  }
  return hash;
}

inline std::string fnv1a64_hex(std::string_view bytes) {
  static const char* digits = "0123456789abcdef";
  uint64_t h = fnv1a64(bytes);
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<size_t>(i)] = digits[h & 0xf];
    h >>= 4;
  }
  return out;
}

}  // namespace gdla
