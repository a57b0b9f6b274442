#pragma once

#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "dmc/errors.hpp"

namespace dmc {

// Tensor layout is N x C x spatial, spatial = H x W (rank 2) or D x H x W
// (rank 3), row-major with the last axis contiguous.
using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& s) {
  std::int64_t n = 1;
  for (std::int64_t e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  return os.str();
}

inline void check_positive_extents(const Shape& s, const char* what) {
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] < 1) {
      throw ShapeError(std::string(what) + ": axis " + std::to_string(i) +
                       " has extent " + std::to_string(s[i]) +
                       " (all extents must be >= 1)");
    }
  }
}

// Spatial rank of an N x C x spatial shape.
inline int spatial_rank(const Shape& s) { return static_cast<int>(s.size()) - 2; }

inline std::int64_t spatial_numel(const Shape& s) {
  std::int64_t n = 1;
  for (std::size_t i = 2; i < s.size(); ++i) n *= s[i];
  return n;
}

inline std::int64_t div_floor(std::int64_t a, std::int64_t b) {
  // b > 0
  return a >= 0 ? a / b : -((-a + b - 1) / b);
}

inline std::int64_t div_ceil(std::int64_t a, std::int64_t b) {
  // b > 0
  return a >= 0 ? (a + b - 1) / b : -((-a) / b);
}

}  // namespace dmc
