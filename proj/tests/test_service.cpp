#include "uika/service.hpp"

#include "uika/io.hpp"
#include "uika/serialize.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <bit>
#include <fstream>
#include <sstream>

namespace uika {
namespace {

using nlohmann::json;

std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

/// Splat set built from the shared vector's bit patterns.
GaussianSet<float> vector_splats(const json& doc) {
  const int M = doc.at("M").get<int>();
  GaussianSet<float> g;
  g.resize(M);
  auto fill = [&](const char* name, auto& m) {
    const auto& hex = doc.at("blocks").at(name);
    ASSERT_EQ(hex.size(), static_cast<std::size_t>(m.size())) << name;
    for (Eigen::Index k = 0; k < m.size(); ++k) {
      const auto bits = static_cast<std::uint32_t>(std::stoul(hex[k].get<std::string>(), nullptr, 16));
      m(k / m.cols(), k % m.cols()) = std::bit_cast<float>(bits);
    }
  };
  fill("positions", g.positions);
  fill("rotations", g.rotations);
  fill("scales", g.scales);
  fill("opacities", g.opacities);
  fill("colors", g.colors);
  return g;
}

template <typename A, typename B>
bool bit_equal(const A& a, const B& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index c = 0; c < a.cols(); ++c)
      if (std::bit_cast<std::uint32_t>(static_cast<float>(a(i, c))) != std::bit_cast<std::uint32_t>(static_cast<float>(b(i, c))))
        return false;
  return true;
}

TEST(SplatWire, SharedTestVectorRoundTripsBitExactly) {
  const std::filesystem::path dir = UIKA_TEST_DATA_DIR;
  const json doc = io::read_json(dir / "splat_vector.json");
  const std::string expected = read_bytes(dir / "splat_vector.bin");
  const GaussianSet<float> g = vector_splats(doc);
  ASSERT_EQ(expected.size(), doc.at("byte_length").get<std::size_t>());
  EXPECT_EQ(encode_splats(g), expected);

  const GaussianSet<float> back = decode_splats(expected, doc.at("M").get<int>());
  EXPECT_TRUE(bit_equal(back.positions, g.positions));
  EXPECT_TRUE(bit_equal(back.rotations, g.rotations));
  EXPECT_TRUE(bit_equal(back.scales, g.scales));
  EXPECT_TRUE(bit_equal(back.opacities, g.opacities));
  EXPECT_TRUE(bit_equal(back.colors, g.colors));
  // Negative zero survives.
  EXPECT_TRUE(std::signbit(back.positions(0, 1)));
}

TEST(SplatWire, DecodeRejectsWrongLength) {
  const std::string body(56 * 4 + 3, '\0');
  try {
    decode_splats(body, 4);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("expected 224 bytes"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("got 227"), std::string::npos) << e.what();
  }
  EXPECT_EQ(decode_splats("", 0).size(), 0);
}

TEST(SplatWire, DoubleInputRoundsToNearestFloat) {
  Rng rng(2);
  GaussianSet<double> g = test::random_scene(rng, 40);
  const GaussianSet<float> back = decode_splats(encode_splats(g), 40);
  EXPECT_TRUE(bit_equal(back.positions, g.positions.cast<float>().eval()));
  EXPECT_TRUE(bit_equal(back.colors, g.colors.cast<float>().eval()));
}

// ---------------------------------------------------------------------------

struct ServiceFixture : ::testing::Test {
  static const CanonicalAvatar& avatar() {
    static const CanonicalAvatar a = [] {
      const HeadModel m = generate_toy_head({});
      const int R = 32;
      const UvRasterization rast = rasterize_uv(m, R);
      UvAggregate ag;
      ag.resolution = R;
      ag.color = MatX3d::Constant(R * R, 3, 0.5);
      ag.confidence = VecXd::Zero(R * R);
      ag.total_hits.assign(R * R, 0);
      return assemble(UvAttributeMaps::initial(R), ag, bake_skinning(m, rast), rast, AvatarRig::from_model(m, "toy"));
    }();
    return a;
  }
};

TEST_F(ServiceFixture, MetaDescribesAvatarAndLayout) {
  const PoseService s(avatar());
  const json j = json::parse(s.meta().body);
  EXPECT_EQ(j.at("M").get<int>(), avatar().size());
  EXPECT_EQ(j.at("J").get<int>(), avatar().num_joints());
  EXPECT_EQ(j.at("E").get<int>(), avatar().num_expr());
  EXPECT_EQ(j.at("limits").at("expression").get<double>(), 3.0);
  EXPECT_EQ(j.at("layout").at("blocks").size(), 5u);
  int width = 0;
  for (const auto& b : j.at("layout").at("blocks")) width += b.at("width").get<int>();
  EXPECT_EQ(width, kSplatFloats);
}

TEST_F(ServiceFixture, ZeroThetaReturnsCanonicalGaussians) {
  const PoseService s(avatar());
  for (const char* body : {"{}", ""}) {
    const HttpReply r = s.pose(body);
    ASSERT_EQ(r.status, 200) << r.body;
    EXPECT_EQ(r.content_type, "application/octet-stream");
    ASSERT_EQ(r.headers.size(), 1u);
    EXPECT_EQ(r.headers[0].first, kSplatCountHeader);
    EXPECT_EQ(r.headers[0].second, std::to_string(avatar().size()));
    const GaussianSet<float> g = decode_splats(r.body, avatar().size());
    EXPECT_TRUE(bit_equal(g.positions, avatar().gaussians.positions.cast<float>().eval()));
    EXPECT_TRUE(bit_equal(g.opacities, avatar().gaussians.opacities.cast<float>().eval()));
  }
}

TEST_F(ServiceFixture, PoseMatchesAnimateAndIsDeterministic) {
  const PoseService s(avatar());
  Rng rng(4);
  const HeadModel m = generate_toy_head({});
  PoseExpr theta = test::random_pose(m, rng, 0.3, false);
  theta.shape.setZero();
  const std::string body = pose_to_json(theta).dump();
  const HttpReply a = s.pose(body), b = s.pose(body);
  ASSERT_EQ(a.status, 200) << a.body;
  EXPECT_EQ(a.body, b.body);
  EXPECT_EQ(a.body, encode_splats(animate(avatar(), theta)));
}

TEST_F(ServiceFixture, MalformedThetaNamesTheField) {
  const PoseService s(avatar());
  struct Case {
    std::string body, field;
  } cases[] = {
      {R"({"expression": [1, 2, 3]})", "theta.expression"},
      {R"({"joint_rotations": [[1, 0, 0, 0]]})", "theta.joint_rotations"},
      {R"({"translation": "up"})", "theta.translation"},
      {R"({"smile": 1})", "theta.smile"},
      {R"({"expression": )", "theta"},
      {R"([1, 2])", "theta"},
  };
  for (const auto& c : cases) {
    const HttpReply r = s.pose(c.body);
    EXPECT_EQ(r.status, 400) << c.body;
    const json j = json::parse(r.body);
    EXPECT_EQ(j.value("field", ""), c.field) << c.body << " -> " << r.body;
    EXPECT_FALSE(j.at("error").get<std::string>().empty());
  }
}

TEST_F(ServiceFixture, OversizedPayloadsGet413) {
  ServiceLimits small;
  small.max_request_bytes = 16;
  EXPECT_EQ(PoseService(avatar(), small).pose(std::string(17, ' ')).status, 413);
  ServiceLimits tiny_response;
  tiny_response.max_response_bytes = std::size_t(avatar().size()) * kSplatFloats * 4 - 1;
  const HttpReply r = PoseService(avatar(), tiny_response).pose("{}");
  EXPECT_EQ(r.status, 413);
  EXPECT_NE(r.body.find("M=" + std::to_string(avatar().size())), std::string::npos);
}

}  // namespace
}  // namespace uika
