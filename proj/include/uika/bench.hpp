#pragma once

#include "uika/splatter.hpp"

#include "json.hpp"

#include <cstdint>

namespace uika {

/// Random Gaussians filling the view frustum of `camera` between depths 2 and
/// 4, with footprints of roughly 1 to 6 pixels at 512 x 512.
GaussianSet<double> benchmark_scene(int count, const Camera<double>& camera, std::uint64_t seed);

struct BenchConfig {
  int gaussians = 50000;
  int size = 512;
  int threads = 0;         // 0: leave the OpenMP default
  bool single_precision = true;
  int repeats = 3;         // tiled renders timed (best of)
  int naive_repeats = 1;   // 0 skips the naive renderer
  std::uint64_t seed = 1;
};

struct BenchResult {
  BenchConfig config;
  int threads_used = 0;
  double tiled_ms = 0.0;
  double naive_ms = 0.0;     // 0 when skipped
  double max_abs_diff = 0.0;  // tiled vs naive image

  double speedup() const { return tiled_ms > 0 && naive_ms > 0 ? naive_ms / tiled_ms : 0.0; }
  nlohmann::json to_json() const;
};

BenchResult run_benchmark(const BenchConfig& config);

}  // namespace uika
