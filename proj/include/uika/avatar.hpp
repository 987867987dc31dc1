#pragma once

#include "uika/common.hpp"
#include "uika/correspondence.hpp"
#include "uika/headmodel.hpp"
#include "uika/splatter.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace uika {

inline constexpr double kOffsetRange = 0.2;
inline constexpr double kLogScaleMin = -8.0;
inline constexpr double kScaleMax = 0.01;
inline constexpr double kInitLogScale = -5.0;
inline constexpr double kInitOpacity = 0.1;

/// Pre-activation decoder outputs on the full R x R UV grid (row = texel j * R + i).
/// Activations: color and fuse weight sigmoid, opacity sigmoid, offset
/// kOffsetRange * tanh, scale exp clamped to [e^-8, kScaleMax], rotation normalized.
struct UvAttributeMaps {
  int resolution = 0;
  MatXd color;     // R^2 x 3
  VecXd fuse;      // R^2
  VecXd opacity;   // R^2 (logit)
  MatXd offset;    // R^2 x 3
  MatXd scale;     // R^2 x 3 (log scale)
  MatXd rotation;  // R^2 x 4 (w, x, y, z)

  /// Maps that assemble to the initial avatar: offset 0, scale e^-5, opacity
  /// 0.1, identity rotation, gray prediction, fuse weight 0.5.
  static UvAttributeMaps initial(int resolution);
  static UvAttributeMaps zeros(int resolution);

  void check() const;
  /// All parameters as one flat vector (color, fuse, opacity, offset, scale, rotation).
  VecXd flatten() const;
  void unflatten(const VecXd& values);
  Eigen::Index parameter_count() const;
};

/// Canonical Gaussians with their baked skinning rows.
struct CanonicalAvatar {
  int resolution = 0;             // R_a
  int num_shape = 0;              // theta.shape length accepted by animate (baked, ignored)
  std::string model_hash;
  GaussianSet<double> gaussians;  // rest pose
  MatX3d offsets;                 // delta mu, M x 3
  MatXd lbs_weights;              // M x J
  MatXd expr_dirs;                // 3M x E
  MatXd pose_dirs;                // 3M x P
  std::vector<std::uint32_t> texel_index;  // M
  MatX3d joints;                  // J x 3
  std::vector<int> joint_parents;

  int size() const { return static_cast<int>(gaussians.size()); }
  int num_joints() const { return static_cast<int>(joints.rows()); }
  int num_expr() const { return static_cast<int>(expr_dirs.cols()); }
  int num_pose() const { return static_cast<int>(pose_dirs.cols()); }

  /// Copy with every value rounded to float32, the precision of the asset file.
  CanonicalAvatar quantized() const;
};

/// Skeleton and shape count the avatar is animated with.
struct AvatarRig {
  MatX3d joints;
  std::vector<int> joint_parents;
  int num_shape = 0;
  std::string model_hash;

  static AvatarRig from_model(const HeadModel& model, std::string model_hash = "");
};

/// Fusion and activation per valid texel. Throws ParameterError when inputs
/// disagree on resolution or on the valid mask.
CanonicalAvatar assemble(const UvAttributeMaps& attrs, const UvAggregate& aggr, const SkinningBake& bake,
                         const UvRasterization& rast, const AvatarRig& rig);

/// Gradient of a loss with respect to the raw maps, given gradients on the
/// canonical Gaussians. Invalid texels receive zero.
UvAttributeMaps assemble_backward(const UvAttributeMaps& attrs, const UvAggregate& aggr, const SkinningBake& bake,
                                  const RenderGradients<double>& grad);

/// Posed Gaussians; scales, opacities and colors are carried over.
GaussianSet<double> animate(const CanonicalAvatar& avatar, const PoseExpr& theta);

/// Gradient on canonical positions and rotations from gradients on the posed
/// set; the other attributes pass through unchanged.
RenderGradients<double> animate_backward(const CanonicalAvatar& avatar, const PoseExpr& theta,
                                         const RenderGradients<double>& posed_grad);

void export_avatar(const CanonicalAvatar& avatar, const std::filesystem::path& path);
CanonicalAvatar import_avatar(const std::filesystem::path& path);

}  // namespace uika
