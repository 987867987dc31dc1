#include "uika/splatter.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>
#include <omp.h>

#include <algorithm>

namespace uika {
namespace {

using test::random_scene;
using test::test_camera;

GaussianSet<double> single(const Eigen::Vector3d& pos, double scale, double opacity, const Eigen::Vector3d& color) {
  GaussianSet<double> g;
  g.resize(1);
  g.positions.row(0) = pos.transpose();
  g.rotations.row(0) << 1, 0, 0, 0;
  g.scales.row(0).setConstant(scale);
  g.opacities[0] = opacity;
  g.colors.row(0) = color.transpose();
  return g;
}

// Settings without the kernel cutoff and early-termination discontinuities,
// so central differences see a smooth function.
RasterSettings smooth_settings() {
  RasterSettings s;
  s.cutoff_sigma = 8.0;
  s.min_transmittance = 0.0;
  return s;
}

double weighted_loss(const RenderOutput<double>& out, const std::vector<double>& w) {
  double l = 0;
  for (std::size_t i = 0; i < w.size(); ++i) l += w[i] * out.color[i];
  return l;
}

TEST(Project, OpticalAxisMapsToPrincipalPoint) {
  auto cam = test_camera(64);
  cam.cx = 30.25;
  cam.cy = 17.5;
  for (double d : {0.5, 2.0, 7.0}) {
    const auto s = project(single({0, 0, d}, 0.05, 0.5, {1, 1, 1}), cam);
    ASSERT_FALSE(s[0].culled);
    EXPECT_EQ(s[0].mean_x, cam.cx);
    EXPECT_EQ(s[0].mean_y, cam.cy);
    EXPECT_EQ(s[0].depth, d);
  }
}

TEST(Project, SmallSplatCovarianceLimit) {
  auto cam = test_camera(64);
  cam.fy = 1.3 * cam.fx;
  for (double d : {1.0, 3.0, 9.0})
    for (double ratio : {0.001, 0.01, 0.049}) {
      const double s = ratio * d;
      const auto sp = project(single({0.02 * d, -0.03 * d, d}, s, 0.5, {1, 1, 1}), cam)[0];
      const double ex = std::pow(cam.fx * s / d, 2) + 0.3, ey = std::pow(cam.fy * s / d, 2) + 0.3;
      EXPECT_LT(std::abs(sp.cov[0] - ex) / ex, 1e-3);
      EXPECT_LT(std::abs(sp.cov[2] - ey) / ey, 1e-3);
      EXPECT_LT(std::abs(sp.cov[1]), 1e-3 * std::sqrt(ex * ey));
    }
}

TEST(Project, CullsBehindNearAndOutsideFrustum) {
  auto cam = test_camera(32);
  EXPECT_TRUE(project(single({0, 0, 0.005}, 0.01, 1, {1, 1, 1}), cam)[0].culled);
  EXPECT_TRUE(project(single({0, 0, -1}, 0.01, 1, {1, 1, 1}), cam)[0].culled);
  EXPECT_TRUE(project(single({0, 0, 200}, 0.01, 1, {1, 1, 1}), cam)[0].culled);
  // 1.3x margin: half-width tangent is W / (2 fx) = 1 / 2.2.
  const double edge = 1.3 / 2.2;
  // Large enough that the support still reaches into the image.
  EXPECT_FALSE(project(single({0.99 * edge * 2, 0, 2}, 0.3, 1, {1, 1, 1}), cam)[0].culled);
  EXPECT_TRUE(project(single({1.01 * edge * 2, 0, 2}, 0.3, 1, {1, 1, 1}), cam)[0].culled);
}

TEST(Render, EmptySceneIsBackground) {
  GaussianSet<double> g;
  g.resize(0);
  const Eigen::Vector3d bg(0.2, 0.5, 0.9);
  const auto out = render(g, test_camera(40), bg);
  for (std::size_t p = 0; p < out.alpha.size(); ++p) {
    EXPECT_EQ(out.alpha[p], 0.0);
    for (int c = 0; c < 3; ++c) EXPECT_EQ(out.color[3 * p + c], bg[c]);
  }
}

TEST(Render, OpaqueGaussianAtPixelCenter) {
  auto cam = test_camera(32);
  cam.cx = 12;
  cam.cy = 20;
  const Eigen::Vector3d c(0.3, 0.6, 0.8);
  const auto out = render(single({0, 0, 3}, 0.1, 1.0, c), cam, Eigen::Vector3d::Zero());
  const std::size_t p = 20 * 32 + 12;
  for (int k = 0; k < 3; ++k) EXPECT_DOUBLE_EQ(out.color[3 * p + k], c[k]);
  EXPECT_EQ(out.alpha[p], 1.0);
  EXPECT_EQ(out.contributors[p], 1);
}

TEST(Render, TiledMatchesNaiveOracle) {
  Rng rng(101);
  double worst = 0;
  for (int scene = 0; scene < 100; ++scene) {
    const auto g = random_scene(rng, rng.uniform_int(1, 100), 0.3);
    const Eigen::Vector3d bg(rng.uniform(), rng.uniform(), rng.uniform());
    const auto cam = test_camera(64);
    const auto a = render(g, cam, bg);
    const auto b = render_naive(g, cam, bg);
    for (std::size_t i = 0; i < a.color.size(); ++i) worst = std::max(worst, std::abs(a.color[i] - b.color[i]));
    EXPECT_EQ(a.contributors, b.contributors);
  }
  EXPECT_LE(worst, 1e-6);
}

TEST(Render, CompositingIsConvex) {
  Rng rng(5);
  for (int scene = 0; scene < 20; ++scene) {
    auto g = random_scene(rng, 60, 0.3);
    const auto cam = test_camera(48);
    const Eigen::Vector3d bg(rng.uniform(), rng.uniform(), rng.uniform());
    const auto out = render(g, cam, bg);
    const double lo = std::min(g.colors.minCoeff(), bg.minCoeff());
    const double hi = std::max(g.colors.maxCoeff(), bg.maxCoeff());
    for (double v : out.color) {
      EXPECT_GE(v, lo - 1e-12);
      EXPECT_LE(v, hi + 1e-12);
    }
    // White Gaussians on black: color equals the summed weights, i.e. alpha.
    g.colors.setOnes();
    const auto w = render(g, cam, Eigen::Vector3d::Zero());
    for (std::size_t p = 0; p < w.alpha.size(); ++p) {
      EXPECT_GE(w.alpha[p], 0.0);
      EXPECT_LE(w.alpha[p], 1.0);
      EXPECT_NEAR(w.color[3 * p], w.alpha[p], 1e-12);
    }
  }
}

TEST(Render, RejectsNonFiniteWithIndices) {
  Rng rng(3);
  auto g = random_scene(rng, 10);
  g.positions(3, 1) = std::nan("");
  g.opacities[7] = std::numeric_limits<double>::infinity();
  try {
    render(g, test_camera(16), Eigen::Vector3d::Zero());
    FAIL() << "expected InputError";
  } catch (const InputError& e) {
    EXPECT_EQ(e.indices(), (std::vector<std::int64_t>{3, 7}));
  }
  EXPECT_THROW(render_backward(g, test_camera(16), Eigen::Vector3d::Zero(), std::vector<double>(16 * 16 * 3, 1.0)),
               InputError);
}

TEST(Render, DeterministicAcrossThreadCounts) {
  Rng rng(11);
  const auto g = random_scene(rng, 400, 0.2).cast<float>();
  const auto cam = test_camera(96).cast<float>();
  const Eigen::Vector3f bg(0.5f, 0.5f, 0.5f);
  std::vector<float> up(96 * 96 * 3);
  for (auto& v : up) v = static_cast<float>(rng.normal());
  const int saved = omp_get_max_threads();
  omp_set_num_threads(1);
  const auto a = render(g, cam, bg);
  const auto ga = render_backward(g, cam, bg, up);
  omp_set_num_threads(4);
  const auto b = render(g, cam, bg);
  const auto gb = render_backward(g, cam, bg, up);
  omp_set_num_threads(saved);
  EXPECT_EQ(a.color, b.color);
  EXPECT_TRUE(ga.positions == gb.positions);
  EXPECT_TRUE(ga.rotations == gb.rotations);
  EXPECT_TRUE(ga.scales == gb.scales);
  EXPECT_TRUE(ga.opacities == gb.opacities);
  EXPECT_TRUE(ga.colors == gb.colors);
}

TEST(Render, FloatTracksDouble) {
  Rng rng(21);
  const auto g = random_scene(rng, 80, 0.2);
  const auto cam = test_camera(64);
  const auto d = render(g, cam, Eigen::Vector3d(0.1, 0.2, 0.3));
  const auto f = render(g.cast<float>(), cam.cast<float>(), Eigen::Vector3f(0.1f, 0.2f, 0.3f));
  double worst = 0;
  for (std::size_t i = 0; i < d.color.size(); ++i) worst = std::max(worst, std::abs(d.color[i] - f.color[i]));
  // Pixels near a cutoff boundary may flip a contribution in float.
  EXPECT_LT(worst, 5e-2);
}

// ---------------------------------------------------------------------------

struct GradCheck {
  int checked = 0;
  int failed = 0;
};

void check_scene(std::uint64_t seed, GradCheck& stats) {
  Rng rng(seed);
  const int n = rng.uniform_int(1, 20);
  auto g = random_scene(rng, n, 0.25);
  // Unnormalized quaternions exercise the normalization Jacobian.
  for (int i = 0; i < n; ++i) g.rotations.row(i) *= rng.uniform(0.5, 2.0);
  const auto cam = test_camera(32);
  const Eigen::Vector3d bg(rng.uniform(), rng.uniform(), rng.uniform());
  const auto settings = smooth_settings();
  std::vector<double> w(32 * 32 * 3);
  for (auto& v : w) v = rng.normal();
  const auto grads = render_backward(g, cam, bg, w, settings);

  const double h = 1e-4;
  auto compare = [&](double& param, double analytic, const char* what, int i) {
    const double fd = test::central_difference(param, 1e-4, [&] { return weighted_loss(render(g, cam, bg, settings), w); });
    ++stats.checked;
    if (!test::grad_close(analytic, fd)) {
      ++stats.failed;
      ADD_FAILURE() << "seed " << seed << " " << what << " of Gaussian " << i << ": analytic " << analytic << " fd "
                    << fd;
    }
  };
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < 3; ++k) compare(g.positions(i, k), grads.positions(i, k), "position", i);
    for (int k = 0; k < 4; ++k) compare(g.rotations(i, k), grads.rotations(i, k), "rotation", i);
    for (int k = 0; k < 3; ++k) compare(g.scales(i, k), grads.scales(i, k), "scale", i);
    compare(g.opacities[i], grads.opacities[i], "opacity", i);
    for (int k = 0; k < 3; ++k) compare(g.colors(i, k), grads.colors(i, k), "color", i);
  }
}

TEST(RenderBackward, MatchesFiniteDifferences) {
  GradCheck stats;
  for (std::uint64_t seed = 1; seed <= 50; ++seed) check_scene(seed, stats);
  EXPECT_EQ(stats.failed, 0);
  EXPECT_GT(stats.checked, 50 * 14);
}

TEST(RenderBackward, QuaternionGradientIsTangent) {
  Rng rng(8);
  auto g = random_scene(rng, 15);
  for (int i = 0; i < 15; ++i) g.rotations.row(i) *= 1.7;
  std::vector<double> w(32 * 32 * 3);
  for (auto& v : w) v = rng.normal();
  const auto grads = render_backward(g, test_camera(32), Eigen::Vector3d::Zero(), w);
  for (int i = 0; i < 15; ++i)
    EXPECT_NEAR(grads.rotations.row(i).dot(g.rotations.row(i)), 0.0, 1e-10 * (1 + grads.rotations.row(i).norm()));
}

TEST(RenderBackward, TransparentGaussianHasNoColorGradient) {
  Rng rng(4);
  auto g = random_scene(rng, 12);
  g.opacities[5] = 0.0;
  std::vector<double> w(32 * 32 * 3);
  for (auto& v : w) v = rng.normal();
  const auto grads = render_backward(g, test_camera(32), Eigen::Vector3d(0.5, 0.5, 0.5), w);
  EXPECT_TRUE(grads.colors.row(5).isZero(0.0));
  EXPECT_FALSE(grads.colors.isZero(0.0));
}

TEST(RenderBackward, CulledGaussianHasZeroGradient) {
  Rng rng(6);
  auto g = random_scene(rng, 8);
  g.positions.row(2) << 50, 0, 3;
  g.positions.row(6) << 0, 0, -3;
  std::vector<double> w(32 * 32 * 3);
  for (auto& v : w) v = rng.normal();
  const auto grads = render_backward(g, test_camera(32), Eigen::Vector3d::Zero(), w);
  for (int i : {2, 6}) {
    EXPECT_TRUE(grads.positions.row(i).isZero(0.0));
    EXPECT_TRUE(grads.rotations.row(i).isZero(0.0));
    EXPECT_TRUE(grads.scales.row(i).isZero(0.0));
    EXPECT_EQ(grads.opacities[i], 0.0);
    EXPECT_TRUE(grads.colors.row(i).isZero(0.0));
  }
}

TEST(RenderBackward, FiniteForDefaultSettings) {
  Rng rng(12);
  for (int scene = 0; scene < 10; ++scene) {
    const auto g = random_scene(rng, 100, 0.3);
    std::vector<double> w(64 * 64 * 3);
    for (auto& v : w) v = rng.normal();
    const auto grads = render_backward(g, test_camera(64), Eigen::Vector3d(1, 1, 1), w);
    EXPECT_TRUE(grads.positions.allFinite() && grads.rotations.allFinite() && grads.scales.allFinite() &&
                grads.opacities.allFinite() && grads.colors.allFinite());
  }
}

}  // namespace
}  // namespace uika
