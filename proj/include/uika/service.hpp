#pragma once

#include "uika/avatar.hpp"
#include "uika/splatter.hpp"

#include "json.hpp"

#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace uika {

/// Slider ranges advertised to clients. Not enforced on /pose.
struct PoseLimits {
  double expression = 3.0;   // |psi_k|
  double joint_angle = 0.6;  // radians per joint
  double translation = 0.2;  // scene units per axis
};

struct ServiceLimits {
  PoseLimits pose;
  std::size_t max_request_bytes = 1 << 20;
  std::size_t max_response_bytes = std::size_t(64) << 20;
};

/// Floats per Gaussian on the wire: position 3, rotation 4, scale 3, opacity 1, color 3.
inline constexpr int kSplatFloats = 14;
inline constexpr const char* kSplatCountHeader = "X-Uika-Count";

/// Little-endian float32 blocks [positions M x 3 | rotations M x 4 (w, x, y, z) |
/// scales M x 3 | opacities M | colors M x 3], each block row-major.
std::string encode_splats(const GaussianSet<double>& g);
std::string encode_splats(const GaussianSet<float>& g);

/// Inverse of encode_splats. Throws FormatError naming the expected and
/// actual byte counts when the length is not 56 * M.
GaussianSet<float> decode_splats(std::string_view bytes, int count);

struct HttpReply {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
  std::vector<std::pair<std::string, std::string>> headers;
};

/// Request handling for `serve`, independent of the HTTP transport. The
/// avatar is immutable; handlers may run concurrently.
class PoseService {
 public:
  explicit PoseService(CanonicalAvatar avatar, ServiceLimits limits = {});

  /// {"M","J","E","S","resolution","model_hash","joint_parents","limits","layout"}.
  nlohmann::json meta_json() const;
  HttpReply meta() const;

  /// Body: theta JSON (missing fields are zero). 400 with {"error","field"} on
  /// malformed input, 413 when the request or the response would exceed the limits.
  HttpReply pose(std::string_view body) const;

  const CanonicalAvatar& avatar() const { return avatar_; }
  const ServiceLimits& limits() const { return limits_; }

 private:
  CanonicalAvatar avatar_;
  ServiceLimits limits_;
};

}  // namespace uika
