#include "uika/correspondence.hpp"
#include "uika/synthdata.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace uika {
namespace {

UvCoordMap empty_map(int w, int h) {
  UvCoordMap m;
  m.width = w;
  m.height = h;
  m.uv = MatX2d::Constant(std::size_t(w) * h, 2, -1.0);
  m.valid.assign(std::size_t(w) * h, 0);
  return m;
}

UvImage random_uv_image(Rng& rng, int R, double coverage) {
  UvImage im;
  im.resolution = R;
  im.color = MatX3d::Zero(R * R, 3);
  im.hit_count.assign(R * R, 0);
  for (int k = 0; k < R * R; ++k) {
    if (rng.uniform() > coverage) continue;
    im.hit_count[k] = rng.uniform_int(1, 6);
    im.color.row(k) << rng.uniform(), rng.uniform(), rng.uniform();
  }
  return im;
}

TEST(Reproject, SinglePixelLandsOnTexel) {
  UvCoordMap m = empty_map(3, 3);
  m.uv.row(4) << 0.5, 0.5;
  m.valid[4] = 1;
  Image im(3, 3, 0.0);
  im.at(1, 1, 0) = 0.2;
  im.at(1, 1, 1) = 0.4;
  im.at(1, 1, 2) = 0.6;
  const UvImage out = reproject(im, m, 4);
  for (int k = 0; k < 16; ++k) {
    if (k == 2 * 4 + 2) {
      EXPECT_EQ(out.hit_count[k], 1);
      EXPECT_EQ(out.color.row(k), Eigen::RowVector3d(0.2, 0.4, 0.6));
    } else {
      EXPECT_EQ(out.hit_count[k], 0);
      EXPECT_TRUE(out.color.row(k).isZero(0.0));
    }
  }
}

TEST(Reproject, CollisionsAverage) {
  UvCoordMap m = empty_map(2, 1);
  m.uv.row(0) << 0.3, 0.7;
  m.uv.row(1) << 0.3, 0.7;
  m.valid = {1, 1};
  Image im(2, 1, 0.0);
  im.at(0, 0, 0) = 1.0;
  im.at(1, 0, 2) = 1.0;
  const UvImage out = reproject(im, m, 8);
  const int k = 5 * 8 + 2;
  EXPECT_EQ(out.hit_count[k], 2);
  EXPECT_EQ(out.color.row(k), Eigen::RowVector3d(0.5, 0.0, 0.5));
}

TEST(Reproject, UpperEdgeClampsToLastTexel) {
  UvCoordMap m = empty_map(1, 1);
  m.uv.row(0) << 1.0, 1.0;
  m.valid = {1};
  const UvImage out = reproject(Image(1, 1, 0.5), m, 16);
  EXPECT_EQ(out.hit_count[16 * 16 - 1], 1);
}

TEST(Reproject, MatchesReferenceLoop) {
  Rng rng(17);
  const int W = 96, H = 80, R = 32;
  UvCoordMap m = empty_map(W, H);
  Image im(W, H);
  for (auto& v : im.data) v = rng.uniform();
  for (int p = 0; p < W * H; ++p)
    if (rng.uniform() < 0.7) {
      m.uv.row(p) << rng.uniform(), rng.uniform();
      m.valid[p] = 1;
    }
  const UvImage out = reproject(im, m, R);

  std::vector<Eigen::RowVector3d> sum(R * R, Eigen::RowVector3d::Zero());
  std::vector<int> count(R * R, 0);
  for (int p = 0; p < W * H; ++p) {
    if (!m.valid[p]) continue;
    const int i = std::min(R - 1, static_cast<int>(m.uv(p, 0) * R));
    const int j = std::min(R - 1, static_cast<int>(m.uv(p, 1) * R));
    for (int c = 0; c < 3; ++c) sum[j * R + i][c] += im.data[3 * p + c];
    ++count[j * R + i];
  }
  for (int k = 0; k < R * R; ++k) {
    ASSERT_EQ(out.hit_count[k], count[k]);
    if (count[k] > 0) EXPECT_EQ(out.color.row(k), sum[k] / count[k]);
    else EXPECT_TRUE(out.color.row(k).isZero(0.0));
  }
}

TEST(Aggregate, ConfidenceClosedForm) {
  // Texel 0 seen by no view, texel 1 by one, texel 2 by all three.
  std::vector<UvImage> views(3);
  for (int v = 0; v < 3; ++v) {
    views[v].resolution = 2;
    views[v].color = MatX3d::Zero(4, 3);
    views[v].hit_count = {0, v == 0 ? 1 : 0, 2, 0};
    views[v].color.row(2).setConstant(0.25 * (v + 1));
  }
  views[0].color.row(1).setConstant(0.9);
  const UvAggregate a = aggregate(views);
  EXPECT_EQ(a.total_hits, (std::vector<int>{0, 1, 3, 0}));
  EXPECT_EQ(a.confidence[0], 0.0);
  EXPECT_EQ(a.confidence[1], 0.5);
  EXPECT_EQ(a.confidence[2], 1.0);
  EXPECT_EQ(a.confidence[3], 0.0);
  EXPECT_DOUBLE_EQ(a.color(2, 0), 0.5);
  EXPECT_EQ(a.color(1, 1), 0.9);
  EXPECT_TRUE(a.color.row(0).isZero(0.0));
}

TEST(Aggregate, HitWeightedMean) {
  std::vector<UvImage> views(2);
  for (auto& v : views) {
    v.resolution = 1;
    v.color = MatX3d::Zero(1, 3);
  }
  views[0].hit_count = {3};
  views[0].color.row(0) << 1, 0, 0;
  views[1].hit_count = {1};
  views[1].color.row(0) << 0, 0, 1;
  const UvAggregate a = aggregate(views);
  EXPECT_DOUBLE_EQ(a.color(0, 0), 0.75);
  EXPECT_DOUBLE_EQ(a.color(0, 2), 0.25);
}

TEST(Aggregate, PermutationInvariantExactly) {
  Rng rng(23);
  std::vector<UvImage> views;
  for (int v = 0; v < 7; ++v) views.push_back(random_uv_image(rng, 24, 0.6));
  const UvAggregate a = aggregate(views);
  std::vector<int> order(views.size());
  std::iota(order.begin(), order.end(), 0);
  for (int trial = 0; trial < 10; ++trial) {
    for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rng.uniform_int(0, int(i))]);
    std::vector<UvImage> shuffled;
    for (int i : order) shuffled.push_back(views[i]);
    const UvAggregate b = aggregate(shuffled);
    EXPECT_TRUE(a.color == b.color);
    EXPECT_TRUE(a.confidence == b.confidence);
    EXPECT_EQ(a.total_hits, b.total_hits);
  }
}

TEST(Aggregate, DuplicatedViewsKeepColorBitwise) {
  Rng rng(29);
  std::vector<UvImage> views;
  for (int v = 0; v < 5; ++v) views.push_back(random_uv_image(rng, 20, 0.5));
  const UvAggregate a = aggregate(views);
  std::vector<UvImage> doubled = views;
  doubled.insert(doubled.end(), views.begin(), views.end());
  const UvAggregate b = aggregate(doubled);
  EXPECT_TRUE(a.color == b.color);
  for (int k = 0; k < 400; ++k)
    for (int l = 0; l < 400; ++l)
      if (b.total_hits[k] <= b.total_hits[l]) ASSERT_LE(b.confidence[k], b.confidence[l]);
}

TEST(Aggregate, ConfidenceInvariants) {
  Rng rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<UvImage> views;
    const int n = rng.uniform_int(1, 6);
    for (int v = 0; v < n; ++v) views.push_back(random_uv_image(rng, 16, rng.uniform()));
    const UvAggregate a = aggregate(views);
    std::vector<int> idx(256);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](int x, int y) { return a.total_hits[x] < a.total_hits[y]; });
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const double g = a.confidence[idx[i]];
      EXPECT_GE(g, 0.0);
      EXPECT_LE(g, 1.0);
      EXPECT_EQ(g == 0.0, a.total_hits[idx[i]] == 0);
      if (i > 0) EXPECT_GE(g, a.confidence[idx[i - 1]]);
    }
    if (n == 1)
      for (int k = 0; k < 256; ++k) EXPECT_TRUE(a.confidence[k] == 0.0 || a.confidence[k] == 1.0);
  }
}

TEST(Aggregate, AllEmptyGivesZeroConfidence) {
  UvImage v;
  v.resolution = 4;
  v.color = MatX3d::Zero(16, 3);
  v.hit_count.assign(16, 0);
  const UvAggregate a = aggregate({v, v});
  EXPECT_TRUE(a.confidence.isZero(0.0));
}

TEST(Aggregate, RejectsMismatchedResolution) {
  Rng rng(1);
  EXPECT_THROW(aggregate({random_uv_image(rng, 8, 0.5), random_uv_image(rng, 16, 0.5)}), ParameterError);
  EXPECT_THROW(aggregate({}), ParameterError);
}

// ---------------------------------------------------------------------------

class IndexEcho : public CorrespondenceEstimator {
 public:
  UvCoordMap estimate(const Image& image, std::size_t index) const override {
    UvCoordMap m = empty_map(image.width, image.height);
    m.uv.row(0) << double(index) / 10.0, 0.0;
    m.valid[0] = 1;
    return m;
  }
};

TEST(EstimateCorrespondence, OrderPreservingAndValidated) {
  const IndexEcho est;
  const std::vector<Image> images(3, Image(8, 8));
  const auto maps = estimate_correspondence(images, est);
  ASSERT_EQ(maps.size(), 3u);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(maps[i].uv(0, 0), i / 10.0);
  EXPECT_THROW(estimate_correspondence({}, est), ParameterError);
  EXPECT_THROW(estimate_correspondence({Image(8, 8), Image(8, 9)}, est), ParameterError);
}

/// Nearest ray/triangle hit through the pixel center, by brute force.
std::optional<Eigen::Vector2d> raycast_uv(const HeadModel& m, const MatX3d& posed, const Camera<double>& cam, int x,
                                          int y) {
  const Eigen::Vector3d dir_cam((x - cam.cx) / cam.fx, (y - cam.cy) / cam.fy, 1.0);
  const Eigen::Vector3d origin = -cam.rotation.transpose() * cam.translation;
  const Eigen::Vector3d dir = cam.rotation.transpose() * dir_cam;
  double best = std::numeric_limits<double>::infinity();
  std::optional<Eigen::Vector2d> uv;
  for (int t = 0; t < m.num_triangles(); ++t) {
    const Eigen::Vector3d a = posed.row(m.triangles(t, 0)), b = posed.row(m.triangles(t, 1)),
                          c = posed.row(m.triangles(t, 2));
    // Moller-Trumbore.
    const Eigen::Vector3d e1 = b - a, e2 = c - a, pv = dir.cross(e2);
    const double det = e1.dot(pv);
    if (std::abs(det) < 1e-14) continue;
    const Eigen::Vector3d tv = origin - a;
    const double u = tv.dot(pv) / det;
    const Eigen::Vector3d qv = tv.cross(e1);
    const double v = dir.dot(qv) / det;
    const double dist = e2.dot(qv) / det;
    if (u < 0 || v < 0 || u + v > 1 || dist <= 0 || dist >= best) continue;
    best = dist;
    uv = (1 - u - v) * m.uv.row(m.triangles(t, 0)).transpose() + u * m.uv.row(m.triangles(t, 1)).transpose() +
         v * m.uv.row(m.triangles(t, 2)).transpose();
  }
  return uv;
}

TEST(GroundTruthOracle, MatchesRayCastWithinOneTexel) {
  auto model = std::make_shared<HeadModel>(generate_toy_head({}));
  Rng rng(41);
  const auto cams = ring_cameras(3, 96, 96);
  std::vector<GroundTruthOracle::View> views;
  for (const auto& c : cams) views.push_back({c, test::random_pose(*model, rng, 0.3)});
  const GroundTruthOracle oracle(model, views);
  const auto maps = estimate_correspondence(std::vector<Image>(3, Image(96, 96)), oracle);
  int compared = 0, background = 0;
  for (int v = 0; v < 3; ++v) {
    const MatX3d posed = pose_mesh(*model, views[v].theta);
    for (int y = 0; y < 96; y += 3)
      for (int x = 0; x < 96; x += 3) {
        const std::size_t p = std::size_t(y) * 96 + x;
        const auto uv = raycast_uv(*model, posed, views[v].camera, x, y);
        ASSERT_EQ(uv.has_value(), maps[v].valid[p] == 1) << "view " << v << " pixel " << x << "," << y;
        if (!uv) {
          EXPECT_EQ(maps[v].uv.row(p), Eigen::RowVector2d(-1, -1));
          ++background;
          continue;
        }
        EXPECT_LT((maps[v].uv.row(p).transpose() - *uv).cwiseAbs().maxCoeff(), 1.0 / 384);
        ++compared;
      }
  }
  EXPECT_GT(compared, 500);
  EXPECT_GT(background, 100);
}

TEST(ExternalMapLoader, RoundTripsAndChecksSize) {
  const auto dir = test::scratch_dir("uvmap");
  Rng rng(2);
  UvCoordMap m = empty_map(10, 6);
  for (int p = 0; p < 60; p += 2) {
    m.uv.row(p) << double(float(rng.uniform())), double(float(rng.uniform()));
    m.valid[p] = 1;
  }
  save_uv_map(dir / "a.uv.f32", m);
  const ExternalMapLoader loader({dir / "a.uv.f32"});
  const UvCoordMap back = loader.estimate(Image(10, 6), 0);
  EXPECT_TRUE(back.uv == m.uv);
  EXPECT_EQ(back.valid, m.valid);
  EXPECT_THROW(loader.estimate(Image(6, 10), 0), ParameterError);
  EXPECT_THROW(loader.estimate(Image(10, 6), 1), ParameterError);
}

}  // namespace
}  // namespace uika
