#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <vector>

namespace csg {

// Counter-based generator built on the splitmix64 finalizer. Each draw is a
// pure function of (seed, stream, counter), so independent streams can be
// handed to parallel workers and any draw can be reproduced in isolation.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0)
      : key_(mix(mix(seed + 0x9E3779B97F4A7C15ull) ^ stream)) {}

  std::uint64_t next_u64() {
    ++counter_;
    return mix(key_ + counter_ * 0x9E3779B97F4A7C15ull);
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Uniform in (0, 1]; safe as a log() argument.
  double uniform_open() {
    return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller; draws are paired internally.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform_open();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  // Uniform integer on the inclusive range [lo, hi].
  int uniform_int(int lo, int hi) {
    if (hi < lo) throw std::invalid_argument("uniform_int: empty range.");
    const std::uint64_t span = static_cast<std::uint64_t>(hi) - lo + 1;
    return lo + static_cast<int>(next_u64() % span);
  }

  // Index draw proportional to nonnegative weights.
  std::size_t categorical(const std::vector<double>& weights) {
    double total = 0.0;
    for (double w : weights) {
      if (w < 0.0) throw std::invalid_argument("categorical: negative weight.");
      total += w;
    }
    if (total <= 0.0) throw std::invalid_argument("categorical: zero mass.");
    const double u = uniform() * total;
    double acc = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      acc += weights[i];
      if (u < acc) return i;
    }
    return weights.size() - 1;
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ull;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBull;
    z ^= z >> 31;
    return z;
  }

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// Stable sub-seed so nested components (per scene, per epoch, per sample)
// get decorrelated streams from one user-facing seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
  CounterRng r(seed, tag ^ 0xA5A5A5A55A5A5A5Aull);
  return r.next_u64();
}

}  // namespace csg
