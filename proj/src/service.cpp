#include "uika/service.hpp"

#include "uika/serialize.hpp"

#include <bit>
#include <cstring>

namespace uika {

using nlohmann::json;

namespace {

void put_f32(std::string& out, std::size_t& at, float v) {
  const auto u = std::bit_cast<std::uint32_t>(v);
  for (int b = 0; b < 4; ++b) out[at++] = static_cast<char>((u >> (8 * b)) & 0xffu);
}

float get_f32(std::string_view in, std::size_t& at) {
  std::uint32_t u = 0;
  for (int b = 0; b < 4; ++b) u |= std::uint32_t(static_cast<unsigned char>(in[at++])) << (8 * b);
  return std::bit_cast<float>(u);
}

template <typename Scalar>
std::string encode(const GaussianSet<Scalar>& g) {
  const std::size_t M = static_cast<std::size_t>(g.size());
  std::string out(M * kSplatFloats * 4, '\0');
  std::size_t at = 0;
  auto block = [&](const auto& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index c = 0; c < m.cols(); ++c) put_f32(out, at, static_cast<float>(m(i, c)));
  };
  block(g.positions);
  block(g.rotations);
  block(g.scales);
  block(g.opacities);
  block(g.colors);
  return out;
}

HttpReply error_reply(int status, const std::string& message, const std::string& field = {}) {
  HttpReply r;
  r.status = status;
  json j = {{"error", message}};
  if (!field.empty()) j["field"] = field;
  r.body = j.dump();
  return r;
}

}  // namespace

std::string encode_splats(const GaussianSet<double>& g) { return encode(g); }
std::string encode_splats(const GaussianSet<float>& g) { return encode(g); }

GaussianSet<float> decode_splats(std::string_view bytes, int count) {
  require(count >= 0, "decode_splats: negative count");
  const std::size_t expected = std::size_t(count) * kSplatFloats * 4;
  if (bytes.size() != expected)
    throw FormatError("splat buffer: expected " + std::to_string(expected) + " bytes for M=" + std::to_string(count) +
                      ", got " + std::to_string(bytes.size()));
  GaussianSet<float> g;
  g.resize(count);
  std::size_t at = 0;
  auto block = [&](auto& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(i, c) = get_f32(bytes, at);
  };
  block(g.positions);
  block(g.rotations);
  block(g.scales);
  block(g.opacities);
  block(g.colors);
  return g;
}

PoseService::PoseService(CanonicalAvatar avatar, ServiceLimits limits)
    : avatar_(std::move(avatar)), limits_(limits) {}

json PoseService::meta_json() const {
  return {{"M", avatar_.size()},
          {"J", avatar_.num_joints()},
          {"E", avatar_.num_expr()},
          {"S", avatar_.num_shape},
          {"resolution", avatar_.resolution},
          {"model_hash", avatar_.model_hash},
          {"joint_parents", avatar_.joint_parents},
          {"limits",
           {{"expression", limits_.pose.expression},
            {"joint_angle", limits_.pose.joint_angle},
            {"translation", limits_.pose.translation}}},
          {"layout",
           {{"endianness", "little"},
            {"dtype", "float32"},
            {"blocks", json::array({json{{"name", "positions"}, {"width", 3}},
                                    json{{"name", "rotations"}, {"width", 4}},
                                    json{{"name", "scales"}, {"width", 3}},
                                    json{{"name", "opacities"}, {"width", 1}},
                                    json{{"name", "colors"}, {"width", 3}}})},
            {"count_header", kSplatCountHeader}}}};
}

HttpReply PoseService::meta() const {
  HttpReply r;
  r.body = meta_json().dump();
  return r;
}

HttpReply PoseService::pose(std::string_view body) const {
  if (body.size() > limits_.max_request_bytes)
    return error_reply(413, "request body of " + std::to_string(body.size()) + " bytes exceeds the limit of " +
                                std::to_string(limits_.max_request_bytes));
  const std::size_t payload = std::size_t(avatar_.size()) * kSplatFloats * 4;
  if (payload > limits_.max_response_bytes)
    return error_reply(413, "response of " + std::to_string(payload) + " bytes for M=" + std::to_string(avatar_.size()) +
                                " exceeds the limit of " + std::to_string(limits_.max_response_bytes));
  json j;
  try {
    j = json::parse(body.empty() ? std::string_view("{}") : body);
  } catch (const json::parse_error& e) {
    return error_reply(400, std::string("theta: invalid JSON: ") + e.what(), "theta");
  }
  PoseExpr theta;
  try {
    theta = pose_from_json(j, avatar_.num_shape, avatar_.num_expr(), avatar_.num_joints());
  } catch (const ParameterError& e) {
    const std::string msg = e.what();
    const auto colon = msg.find(':');
    return error_reply(400, msg, colon == std::string::npos ? "theta" : msg.substr(0, colon));
  }
  HttpReply r;
  r.content_type = "application/octet-stream";
  r.body = encode_splats(animate(avatar_, theta));
  r.headers.emplace_back(kSplatCountHeader, std::to_string(avatar_.size()));
  return r;
}

}  // namespace uika
