#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <sstream>
#include <string>

#include "dmc/errors.hpp"

namespace dmc {

// Deterministic random stream. The engine is std::mt19937_64 (bit-portable by
// the standard); all distributions are implemented here rather than with
// std:: distribution objects, whose output is implementation-defined.
// State serializes to text so checkpoints can resume the exact stream.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 bits.
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Uniform integer in [0, n), rejection sampled (no modulo bias).
  std::int64_t uniform_int(std::int64_t n) {
    if (n <= 0) throw ContractError("Rng::uniform_int: n must be positive");
    const std::uint64_t un = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return static_cast<std::int64_t>(x % un);
  }

  bool bernoulli(double p) { return uniform01() < p; }

  // Standard normal via Box-Muller. No spare caching: two draws per sample
  // keeps the stream state trivially serializable.
  double normal() {
    double u1 = uniform01();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    const double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  std::string serialize() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }

  static Rng deserialize(const std::string& state) {
    Rng r;
    std::istringstream is(state);
    is >> r.engine_;
    if (is.fail()) throw IoError("Rng::deserialize: malformed engine state");
    return r;
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace dmc
