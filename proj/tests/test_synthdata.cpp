#include "uika/synthdata.hpp"

#include "uika/io.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

namespace uika {
namespace {

namespace fs = std::filesystem;

const HeadModel& toy() {
  static const HeadModel m = generate_toy_head({});
  return m;
}

/// Mean absolute difference between reprojected colors and the texture bake on hit texels.
double roundtrip_mae(const UvImage& uvimg, const Image& bake, int* hits = nullptr) {
  double err = 0;
  int n = 0;
  for (std::size_t k = 0; k < uvimg.hit_count.size(); ++k) {
    if (uvimg.hit_count[k] == 0) continue;
    for (int c = 0; c < 3; ++c) err += std::abs(uvimg.color(k, c) - bake.data[3 * k + c]);
    ++n;
  }
  if (hits) *hits = n;
  return err / (3.0 * n);
}

TEST(RingCameras, LayoutAndAim) {
  const auto cams = ring_cameras(9, 64, 48);
  ASSERT_EQ(cams.size(), 9u);
  const double deg = std::numbers::pi / 180;
  const std::array<double, 3> elevations = {-15.0, 0.0, 15.0};
  for (int v = 0; v < 9; ++v) {
    const Eigen::Vector3d eye = -cams[v].rotation.transpose() * cams[v].translation;
    EXPECT_NEAR(eye.norm(), 3.0, 1e-12);
    const double el = std::asin(eye.y() / eye.norm());
    const double az = std::atan2(eye.x(), eye.z());
    EXPECT_NEAR(el, elevations[v % 3] * deg, 1e-12);
    EXPECT_NEAR(az, (-90.0 + 22.5 * v) * deg, 1e-12);
    // The head center projects to the principal point.
    const Eigen::Vector3d c = cams[v].translation;
    EXPECT_NEAR(c.x(), 0.0, 1e-12);
    EXPECT_NEAR(c.y(), 0.0, 1e-12);
  }
  // Image "up" is world +y for the frontal view.
  const auto& front = cams[4];
  EXPECT_LT((front.rotation * Eigen::Vector3d::UnitY()).y(), 0.0);
}

TEST(Trajectory, DeterministicBoundedSmooth) {
  const VecXd shape = VecXd::Zero(toy().num_shape());
  const auto a = sample_trajectory(toy(), shape, 40, 2.0, 4, 99);
  const auto b = sample_trajectory(toy(), shape, 40, 2.0, 4, 99);
  ASSERT_EQ(a.size(), 40u);
  double max_step = 0;
  for (std::size_t f = 0; f < a.size(); ++f) {
    EXPECT_TRUE(a[f].expression == b[f].expression);
    EXPECT_LE(a[f].expression.cwiseAbs().maxCoeff(), 2.0);
    if (f > 0) max_step = std::max(max_step, (a[f].expression - a[f - 1].expression).cwiseAbs().maxCoeff());
  }
  EXPECT_GT(max_step, 0.0);
  EXPECT_LT(max_step, 2.5);
}

TEST(Texture, DeterministicAndIdentitySpecific) {
  const ProceduralTexture a(5, toy()), b(5, toy()), c(6, toy());
  const Image ia = a.bake(64), ib = b.bake(64), ic = c.bake(64);
  EXPECT_EQ(ia.data, ib.data);
  double diff = 0;
  for (std::size_t i = 0; i < ia.data.size(); ++i) diff = std::max(diff, std::abs(ia.data[i] - ic.data[i]));
  EXPECT_GT(diff, 0.1);
  for (double v : ia.data) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(RenderFrame, ReprojectionRecoversTexture) {
  const ProceduralTexture tex(11, toy());
  const Image bake = tex.bake(384);
  Rng rng(3);
  const auto cams = ring_cameras(9, 512, 512);
  for (int v : {4, 1, 7}) {
    const PoseExpr theta = test::random_pose(toy(), rng, 0.2);
    const RenderedFrame f = render_frame(toy(), theta, cams[v], tex, Eigen::Vector3d(1, 1, 1), 2);
    int hits = 0;
    const double mae = roundtrip_mae(reproject(f.image, f.uv, 384), bake, &hits);
    EXPECT_LT(mae, 0.02) << "view " << v;
    EXPECT_GT(hits, 10000);
  }
}

TEST(RenderFrame, ViewsAgreeInUvSpace) {
  const ProceduralTexture tex(12, toy());
  const auto cams = ring_cameras(9, 384, 384);
  Rng rng(4);
  const PoseExpr theta = test::random_pose(toy(), rng, 0.2);
  const UvImage a = reproject(render_frame(toy(), theta, cams[3], tex, Eigen::Vector3d::Zero(), 2).image,
                              render_frame(toy(), theta, cams[3], tex, Eigen::Vector3d::Zero(), 1).uv, 256);
  const RenderedFrame fb = render_frame(toy(), theta, cams[5], tex, Eigen::Vector3d::Zero(), 2);
  const UvImage b = reproject(fb.image, fb.uv, 256);
  double err = 0;
  int n = 0;
  for (int k = 0; k < 256 * 256; ++k) {
    if (!a.hit_count[k] || !b.hit_count[k]) continue;
    err += (a.color.row(k) - b.color.row(k)).cwiseAbs().sum() / 3;
    ++n;
  }
  EXPECT_GT(n, 2000);
  EXPECT_LT(err / n, 0.02);
}

TEST(RenderFrame, MaskEqualsUvValidity) {
  const ProceduralTexture tex(1, toy());
  const auto cams = ring_cameras(3, 80, 64);
  const RenderedFrame f = render_frame(toy(), PoseExpr::zero(toy()), cams[1], tex, Eigen::Vector3d(0.5, 0.5, 0.5), 3);
  EXPECT_EQ(f.mask, f.uv.valid);
  int fg = 0;
  for (int p = 0; p < 80 * 64; ++p) {
    fg += f.mask[p];
    if (!f.mask[p]) EXPECT_EQ(f.uv.uv.row(p), Eigen::RowVector2d(-1, -1));
  }
  EXPECT_GT(fg, 500);
  EXPECT_LT(fg, 80 * 64);
}

DatasetConfig tiny(int identities, int views, int frames) {
  DatasetConfig c;
  c.identities = identities;
  c.views = views;
  c.frames = frames;
  c.width = c.height = 16;
  c.supersample = 1;
  return c;
}

TEST(Dataset, FrameCountAndLoadRoundTrip) {
  const auto dir = test::scratch_dir("ds_count");
  const Dataset ds = generate_dataset(toy(), tiny(2, 9, 10), dir);
  EXPECT_EQ(ds.frames.size(), 180u);
  EXPECT_EQ(ds.manifest["frame_count"], 180);
  const Dataset back = load_dataset(dir);
  EXPECT_EQ(back.manifest, ds.manifest);
  ASSERT_EQ(back.frames.size(), ds.frames.size());
  for (std::size_t i = 0; i < ds.frames.size(); i += 17) {
    const auto& a = ds.frames[i];
    const auto& b = back.frames[i];
    EXPECT_EQ(a.image, b.image);
    EXPECT_TRUE(a.camera.rotation == b.camera.rotation);
    EXPECT_EQ(a.camera.fx, b.camera.fx);
    EXPECT_TRUE(a.theta.expression == b.theta.expression);
    EXPECT_TRUE(a.background == b.background);
    EXPECT_EQ(load_frame_mask(b), load_frame_uv(b).valid);
  }
  EXPECT_EQ(back.frame(1, 3, 4).identity, 1);
  EXPECT_EQ(back.frame(1, 3, 4).view, 3);
  EXPECT_EQ(back.frame(1, 3, 4).frame, 4);
}

TEST(Dataset, SameSeedIsByteIdentical) {
  const auto a = test::scratch_dir("ds_a"), b = test::scratch_dir("ds_b");
  generate_dataset(toy(), tiny(1, 3, 3), a);
  generate_dataset(toy(), tiny(1, 3, 3), b);
  int files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), a);
    ASSERT_TRUE(fs::exists(b / rel)) << rel;
    EXPECT_EQ(io::read_file(e.path()), io::read_file(b / rel)) << rel;
    ++files;
  }
  EXPECT_EQ(files, 2 + 9 * 5);  // manifest, model, 5 files per frame
}

TEST(Dataset, MissingUvFileNamesFrame) {
  const auto dir = test::scratch_dir("ds_missing");
  generate_dataset(toy(), tiny(1, 2, 2), dir);
  fs::remove(dir / "id_0/view_1/frame_0.uv.f32");
  try {
    load_dataset(dir);
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("id_0/view_1/frame_0.uv.f32"), std::string::npos) << msg;
    EXPECT_NE(msg.find("view 1, frame 0"), std::string::npos) << msg;
  }
}

TEST(Dataset, ModelHashMismatchRejected) {
  const auto dir = test::scratch_dir("ds_hash");
  generate_dataset(toy(), tiny(1, 1, 1), dir);
  ToyHeadConfig other;
  other.seed = 8;
  save_head_model(generate_toy_head(other), dir / "model.uikahm");
  EXPECT_THROW(load_dataset(dir), FormatError);
}

TEST(Dataset, RejectsInvalidCounts) {
  const auto dir = test::scratch_dir("ds_bad");
  EXPECT_THROW(generate_dataset(toy(), tiny(0, 1, 1), dir), ParameterError);
  EXPECT_THROW(load_dataset(dir / "nothing"), IoError);
}

}  // namespace
}  // namespace uika
