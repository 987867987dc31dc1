#pragma once

#include "uika/common.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace uika {

/// Parametric head: template mesh, blendshapes, skeleton, skinning weights and
/// a per-vertex UV atlas. Blendshape bases are stored as (3V x K) matrices with
/// row 3*v + axis.
struct HeadModel {
  MatX3d vertices;         // V x 3
  MatX3i triangles;        // T x 3
  MatXd shape_dirs;        // 3V x S
  MatXd expr_dirs;         // 3V x E
  MatXd pose_dirs;         // 3V x P, P = 9 (J - 1)
  MatX3d joints;           // J x 3
  std::vector<int> joint_parents;  // root = -1, parents precede children
  MatXd lbs_weights;       // V x J
  MatX2d uv;               // V x 2

  int num_vertices() const { return static_cast<int>(vertices.rows()); }
  int num_triangles() const { return static_cast<int>(triangles.rows()); }
  int num_shape() const { return static_cast<int>(shape_dirs.cols()); }
  int num_expr() const { return static_cast<int>(expr_dirs.cols()); }
  int num_pose() const { return static_cast<int>(pose_dirs.cols()); }
  int num_joints() const { return static_cast<int>(joints.rows()); }

  /// Throws ParameterError on any violated structural invariant.
  void validate() const;
};

/// Pose and expression parameters for one frame.
struct PoseExpr {
  VecXd shape;
  VecXd expression;
  std::vector<Eigen::Quaterniond> joint_rotations;
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  static PoseExpr zero(const HeadModel& model);
  static PoseExpr zero(int num_shape, int num_expr, int num_joints);
  void check_against(int num_shape, int num_expr, int num_joints) const;
};

struct ToyHeadConfig {
  std::uint64_t seed = 7;
  int num_shape = 10;
  int num_expr = 10;
  int num_joints = 4;
  int subdivision = 3;
};

HeadModel generate_toy_head(const ToyHeadConfig& config);

/// Per-joint skinning transform x -> R x + t (rest pose removed), plus the
/// global translation that is added after blending.
struct SkinningTransforms {
  std::vector<Eigen::Matrix3d> rotation;
  std::vector<Eigen::Vector3d> translation;
  Eigen::Vector3d global_translation = Eigen::Vector3d::Zero();

  /// Blended linear part and offset for one weight row, expressed as deltas
  /// from identity so that the rest pose is reproduced exactly. Weights are
  /// divided by their sum (float32 assets only sum to 1 within ~1e-7).
  template <typename Weights>
  void blend(const Weights& w, Eigen::Matrix3d& delta_linear, Eigen::Vector3d& offset) const {
    delta_linear.setZero();
    offset.setZero();
    double total = 0.0;
    for (std::size_t j = 0; j < rotation.size(); ++j) total += w[static_cast<Eigen::Index>(j)];
    for (std::size_t j = 0; j < rotation.size(); ++j) {
      const double wj = w[static_cast<Eigen::Index>(j)] / total;
      if (wj == 0.0) continue;
      delta_linear.noalias() += wj * (rotation[j] - Eigen::Matrix3d::Identity());
      offset.noalias() += wj * translation[j];
    }
  }
};

SkinningTransforms skinning_transforms(const MatX3d& joints, const std::vector<int>& parents, const PoseExpr& theta);

/// Flattened (R_j - I) over non-root joints, 9 (J - 1) entries.
VecXd pose_feature(const PoseExpr& theta);

/// Linear blend skinning of the full mesh.
MatX3d pose_mesh(const HeadModel& model, const PoseExpr& theta);

/// Pose whose result equals the rigid motion (R, t) applied after `theta`.
PoseExpr compose_rigid(const HeadModel& model, const PoseExpr& theta, const Eigen::Matrix3d& R, const Eigen::Vector3d& t);
PoseExpr compose_rigid(const MatX3d& joints, const PoseExpr& theta, const Eigen::Matrix3d& R, const Eigen::Vector3d& t);

/// Texel (i, j) has center ((i + 0.5) / R, (j + 0.5) / R) and flat index j * R + i.
struct UvRasterization {
  int resolution = 0;
  std::vector<int> triangle_id;  // R*R, -1 where invalid
  MatX3d barycentric;            // R*R x 3
  std::vector<std::uint8_t> valid_mask;
  int degenerate_triangles = 0;

  int valid_count() const;
  std::vector<int> valid_texels() const;
};

UvRasterization rasterize_uv(const HeadModel& model, int resolution);

/// Per-valid-texel attributes interpolated from the texel's triangle.
struct SkinningBake {
  std::vector<int> texels;  // flat texel index of each row
  MatX3d rest;              // K x 3
  MatX3d normals;           // K x 3, unit face normals
  MatXd lbs_weights;        // K x J
  MatXd expr_dirs;          // 3K x E
  MatXd pose_dirs;          // 3K x P

  int size() const { return static_cast<int>(texels.size()); }
};

/// `shape` (optional) bakes an identity's shape blendshapes into the rest points.
SkinningBake bake_skinning(const HeadModel& model, const UvRasterization& rast,
                           const std::optional<VecXd>& shape = std::nullopt);

/// Skins a single point carrying its own blendshape slices.
Eigen::Vector3d skin_point(const SkinningTransforms& xf, const Eigen::Ref<const VecXd>& weights,
                           const Eigen::Vector3d& rest_plus_offsets);

void save_head_model(const HeadModel& model, const std::filesystem::path& path);
HeadModel load_head_model(const std::filesystem::path& path);

/// Rotation matrix from the nearest-orthogonal polar factor of `m`.
Eigen::Matrix3d polar_rotation(const Eigen::Matrix3d& m);

}  // namespace uika
