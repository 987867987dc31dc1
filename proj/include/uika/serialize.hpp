#pragma once

#include "uika/headmodel.hpp"
#include "uika/splatter.hpp"

#include "json.hpp"

namespace uika {

/// {"width","height","intrinsics": 9 row-major,"extrinsics": 16 row-major
/// world-to-camera,"near","far"}.
nlohmann::json camera_to_json(const Camera<double>& camera);
Camera<double> camera_from_json(const nlohmann::json& j);

/// {"shape","expression","joint_rotations": [[w,x,y,z],...],"translation"}.
nlohmann::json pose_to_json(const PoseExpr& theta);

/// Missing fields default to zero. Length or type problems throw
/// ParameterError naming the field, e.g. "theta.expression: expected 10 values, got 3".
/// Quaternions are normalized; zero or non-finite ones are rejected.
PoseExpr pose_from_json(const nlohmann::json& j, int num_shape, int num_expr, int num_joints);

}  // namespace uika
