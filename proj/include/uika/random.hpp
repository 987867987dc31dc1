#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace uika {

/// mt19937_64 with portable real-valued draws (the std distributions are
/// implementation-defined, which would break byte-identical datasets).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  int uniform_int(int lo, int hi_inclusive) {
    const auto span = static_cast<std::uint64_t>(hi_inclusive - lo + 1);
    return lo + static_cast<int>(engine_() % span);
  }
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }
  /// Derived stream for a sub-task, stable under reordering of siblings.
  Rng fork(std::uint64_t salt) const {
    std::uint64_t z = seed_mix(salt);
    return Rng(z);
  }

 private:
  std::uint64_t seed_mix(std::uint64_t salt) const {
    std::mt19937_64 copy = engine_;
    std::uint64_t z = copy() ^ (salt + 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  std::mt19937_64 engine_;
};

}  // namespace uika
