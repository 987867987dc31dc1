#include "uika/serialize.hpp"

#include <cmath>

namespace uika {

using nlohmann::json;

namespace {

std::vector<double> numbers(const json& j, const std::string& field, std::size_t expected) {
  if (!j.is_array()) throw ParameterError(field + ": expected an array");
  if (j.size() != expected)
    throw ParameterError(field + ": expected " + std::to_string(expected) + " values, got " + std::to_string(j.size()));
  std::vector<double> out;
  out.reserve(expected);
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) throw ParameterError(field + "[" + std::to_string(i) + "]: not a number");
    const double v = j[i].get<double>();
    if (!std::isfinite(v)) throw ParameterError(field + "[" + std::to_string(i) + "]: not finite");
    out.push_back(v);
  }
  return out;
}

double number(const json& j, const char* key, double fallback) {
  if (!j.contains(key)) return fallback;
  if (!j[key].is_number()) throw ParameterError(std::string("camera.") + key + ": not a number");
  return j[key].get<double>();
}

}  // namespace

json camera_to_json(const Camera<double>& c) {
  json j;
  j["width"] = c.width;
  j["height"] = c.height;
  j["intrinsics"] = {c.fx, 0.0, c.cx, 0.0, c.fy, c.cy, 0.0, 0.0, 1.0};
  json ext = json::array();
  for (int r = 0; r < 3; ++r) {
    for (int k = 0; k < 3; ++k) ext.push_back(c.rotation(r, k));
    ext.push_back(c.translation[r]);
  }
  for (double v : {0.0, 0.0, 0.0, 1.0}) ext.push_back(v);
  j["extrinsics"] = ext;
  j["near"] = c.near_plane;
  j["far"] = c.far_plane;
  return j;
}

Camera<double> camera_from_json(const json& j) {
  if (!j.is_object()) throw ParameterError("camera: expected an object");
  Camera<double> c;
  if (!j.contains("width") || !j.contains("height")) throw ParameterError("camera: width and height are required");
  c.width = j["width"].get<int>();
  c.height = j["height"].get<int>();
  const auto K = numbers(j.value("intrinsics", json()), "camera.intrinsics", 9);
  c.fx = K[0];
  c.cx = K[2];
  c.fy = K[4];
  c.cy = K[5];
  const auto E = numbers(j.value("extrinsics", json()), "camera.extrinsics", 16);
  for (int r = 0; r < 3; ++r) {
    for (int k = 0; k < 3; ++k) c.rotation(r, k) = E[4 * r + k];
    c.translation[r] = E[4 * r + 3];
  }
  c.near_plane = number(j, "near", c.near_plane);
  c.far_plane = number(j, "far", c.far_plane);
  c.validate();
  return c;
}

json pose_to_json(const PoseExpr& theta) {
  json j;
  j["shape"] = std::vector<double>(theta.shape.data(), theta.shape.data() + theta.shape.size());
  j["expression"] = std::vector<double>(theta.expression.data(), theta.expression.data() + theta.expression.size());
  json rots = json::array();
  for (const auto& q : theta.joint_rotations) rots.push_back({q.w(), q.x(), q.y(), q.z()});
  j["joint_rotations"] = rots;
  j["translation"] = {theta.translation.x(), theta.translation.y(), theta.translation.z()};
  return j;
}

PoseExpr pose_from_json(const json& j, int num_shape, int num_expr, int num_joints) {
  if (!j.is_object()) throw ParameterError("theta: expected a JSON object");
  for (const auto& [key, _] : j.items())
    if (key != "shape" && key != "expression" && key != "joint_rotations" && key != "translation")
      throw ParameterError("theta." + key + ": unknown field");
  PoseExpr p = PoseExpr::zero(num_shape, num_expr, num_joints);
  if (j.contains("shape")) p.shape = Eigen::Map<const VecXd>(numbers(j["shape"], "theta.shape", num_shape).data(), num_shape);
  if (j.contains("expression"))
    p.expression = Eigen::Map<const VecXd>(numbers(j["expression"], "theta.expression", num_expr).data(), num_expr);
  if (j.contains("translation")) {
    const auto t = numbers(j["translation"], "theta.translation", 3);
    p.translation = Eigen::Vector3d(t[0], t[1], t[2]);
  }
  if (j.contains("joint_rotations")) {
    const json& rots = j["joint_rotations"];
    if (!rots.is_array() || static_cast<int>(rots.size()) != num_joints)
      throw ParameterError("theta.joint_rotations: expected " + std::to_string(num_joints) + " quaternions, got " +
                           (rots.is_array() ? std::to_string(rots.size()) : std::string("a non-array")));
    for (int k = 0; k < num_joints; ++k) {
      const std::string field = "theta.joint_rotations[" + std::to_string(k) + "]";
      const auto q = numbers(rots[k], field, 4);
      Eigen::Quaterniond quat(q[0], q[1], q[2], q[3]);
      const double n = quat.norm();
      if (!(n > 1e-12)) throw ParameterError(field + ": zero quaternion");
      quat.coeffs() /= n;
      p.joint_rotations[k] = quat;
    }
  }
  return p;
}

}  // namespace uika
