#include "uika/bench.hpp"

#include "uika/random.hpp"

#include <omp.h>

#include <algorithm>
#include <chrono>
#include <limits>

namespace uika {

GaussianSet<double> benchmark_scene(int count, const Camera<double>& cam, std::uint64_t seed) {
  require(count >= 0, "benchmark_scene: negative count");
  Rng rng(seed);
  GaussianSet<double> g;
  g.resize(count);
  const double half_w = 0.5 * cam.width / cam.fx, half_h = 0.5 * cam.height / cam.fy;
  const Eigen::Matrix3d R_wc = cam.rotation.transpose();
  for (int i = 0; i < count; ++i) {
    const double z = rng.uniform(2.0, 4.0);
    const Eigen::Vector3d p_cam(rng.uniform(-half_w, half_w) * z, rng.uniform(-half_h, half_h) * z, z);
    g.positions.row(i) = (R_wc * (p_cam - cam.translation)).transpose();
    g.rotations.row(i) << rng.normal(), rng.normal(), rng.normal(), rng.normal();
    g.rotations.row(i).normalize();
    for (int c = 0; c < 3; ++c) g.scales(i, c) = rng.uniform(0.002, 0.012);
    g.opacities[i] = rng.uniform(0.2, 0.9);
    g.colors.row(i) << rng.uniform(), rng.uniform(), rng.uniform();
  }
  return g;
}

nlohmann::json BenchResult::to_json() const {
  const double fps = tiled_ms > 0 ? 1000.0 / tiled_ms : 0.0;
  nlohmann::json j = {{"gaussians", config.gaussians},
                      {"size", config.size},
                      {"precision", config.single_precision ? "float" : "double"},
                      {"threads", threads_used},
                      {"tiled_ms", tiled_ms},
                      {"tiled_fps", fps},
                      {"tiled_gaussians_per_sec", fps * config.gaussians}};
  if (naive_ms > 0) {
    j["naive_ms"] = naive_ms;
    j["naive_fps"] = 1000.0 / naive_ms;
    j["naive_gaussians_per_sec"] = 1000.0 / naive_ms * config.gaussians;
    j["speedup"] = speedup();
    j["max_abs_diff"] = max_abs_diff;
  }
  return j;
}

namespace {

template <typename Scalar>
BenchResult bench_as(const BenchConfig& c, const GaussianSet<double>& scene, const Camera<double>& cam) {
  const GaussianSet<Scalar> g = scene.cast<Scalar>();
  const Camera<Scalar> k = cam.cast<Scalar>();
  const Vec3<Scalar> bg = Vec3<Scalar>::Zero();
  auto time = [](auto&& f, int repeats, RenderOutput<Scalar>& out) {
    double best = std::numeric_limits<double>::infinity();
    for (int r = 0; r < repeats; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      out = f();
      best = std::min(best, std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
    }
    return best;
  };
  BenchResult res;
  res.config = c;
  RenderOutput<Scalar> tiled, naive;
  res.tiled_ms = time([&] { return render(g, k, bg); }, std::max(1, c.repeats), tiled);
  if (c.naive_repeats > 0) {
    res.naive_ms = time([&] { return render_naive(g, k, bg); }, c.naive_repeats, naive);
    for (std::size_t i = 0; i < tiled.color.size(); ++i)
      res.max_abs_diff = std::max(res.max_abs_diff, static_cast<double>(std::abs(tiled.color[i] - naive.color[i])));
  }
  return res;
}

}  // namespace

BenchResult run_benchmark(const BenchConfig& c) {
  require(c.gaussians >= 1 && c.size >= 1 && c.threads >= 0, "bench: gaussians and size must be >= 1");
  const int saved = omp_get_max_threads();
  if (c.threads > 0) omp_set_num_threads(c.threads);
  Camera<double> cam;
  cam.width = cam.height = c.size;
  cam.fx = cam.fy = 1.1 * c.size;
  cam.cx = cam.cy = (c.size - 1) / 2.0;
  const GaussianSet<double> scene = benchmark_scene(c.gaussians, cam, c.seed);
  BenchResult r = c.single_precision ? bench_as<float>(c, scene, cam) : bench_as<double>(c, scene, cam);
  r.threads_used = omp_get_max_threads();
  omp_set_num_threads(saved);
  return r;
}

}  // namespace uika
