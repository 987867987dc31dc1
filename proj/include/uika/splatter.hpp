#pragma once

#include "uika/common.hpp"

#include <array>
#include <type_traits>
#include <vector>

namespace uika {

/// Struct-of-arrays Gaussian set. Rotations are (w, x, y, z) quaternions.
template <typename Scalar>
struct GaussianSet {
  MatX3<Scalar> positions;
  MatX4<Scalar> rotations;
  MatX3<Scalar> scales;
  VecX<Scalar> opacities;
  MatX3<Scalar> colors;

  Eigen::Index size() const { return positions.rows(); }

  void resize(Eigen::Index n) {
    positions.resize(n, 3);
    rotations.resize(n, 4);
    scales.resize(n, 3);
    opacities.resize(n);
    colors.resize(n, 3);
  }

  template <typename Other>
  GaussianSet<Other> cast() const {
    GaussianSet<Other> out;
    out.positions = positions.template cast<Other>();
    out.rotations = rotations.template cast<Other>();
    out.scales = scales.template cast<Other>();
    out.opacities = opacities.template cast<Other>();
    out.colors = colors.template cast<Other>();
    return out;
  }
};

/// Pinhole camera, OpenCV convention (x right, y down, z forward). Pixel
/// (x, y) has its center at image coordinate (x, y).
template <typename Scalar>
struct Camera {
  Scalar fx = 1, fy = 1, cx = 0, cy = 0;
  Mat3<Scalar> rotation = Mat3<Scalar>::Identity();  // world -> camera
  Vec3<Scalar> translation = Vec3<Scalar>::Zero();
  int width = 0;
  int height = 0;
  Scalar near_plane = Scalar(0.01);
  Scalar far_plane = Scalar(100);

  void validate() const;

  /// Camera at `eye` looking at `target`; `up` maps to image -y.
  static Camera look_at(const Vec3<Scalar>& eye, const Vec3<Scalar>& target, const Vec3<Scalar>& up, Scalar focal,
                        int width, int height);

  template <typename Other>
  Camera<Other> cast() const {
    Camera<Other> c;
    c.fx = Other(fx);
    c.fy = Other(fy);
    c.cx = Other(cx);
    c.cy = Other(cy);
    c.rotation = rotation.template cast<Other>();
    c.translation = translation.template cast<Other>();
    c.width = width;
    c.height = height;
    c.near_plane = Other(near_plane);
    c.far_plane = Other(far_plane);
    return c;
  }
};

struct RasterSettings {
  int tile_size = 16;
  double cutoff_sigma = 3.0;              // kernel support: Mahalanobis radius
  double min_transmittance = 1.0 / 255.0; // early termination threshold
  double cov_dilation = 0.3;              // px^2 added to the 2D covariance diagonal
  double frustum_margin = 1.3;
};

/// Projected Gaussian. `conic` is the inverse 2D covariance (a, b, c) with
/// q = a dx^2 + 2 b dx dy + c dy^2.
template <typename Scalar>
struct ScreenSplat {
  Scalar mean_x = 0, mean_y = 0;
  std::array<Scalar, 3> cov{};
  std::array<Scalar, 3> conic{};
  Scalar depth = 0;
  int x0 = 0, x1 = -1, y0 = 0, y1 = -1;  // inclusive pixel bounds of the support
  bool culled = true;
};

template <typename Scalar>
std::vector<ScreenSplat<Scalar>> project(const GaussianSet<Scalar>& gaussians, const Camera<Scalar>& camera,
                                         const RasterSettings& settings = {});

template <typename Scalar>
struct RenderOutput {
  int width = 0;
  int height = 0;
  std::vector<Scalar> color;  // H x W x 3
  std::vector<Scalar> alpha;  // H x W
  std::vector<int> contributors;

  Image to_image() const;
};

template <typename Scalar>
struct RenderGradients {
  MatX3<Scalar> positions;
  MatX4<Scalar> rotations;
  MatX3<Scalar> scales;
  VecX<Scalar> opacities;
  MatX3<Scalar> colors;
};

/// Tile-based front-to-back compositing. Throws InputError naming indices of
/// Gaussians with non-finite attributes.
template <typename Scalar>
RenderOutput<Scalar> render(const GaussianSet<Scalar>& gaussians, const Camera<Scalar>& camera,
                            const Vec3<std::type_identity_t<Scalar>>& background, const RasterSettings& settings = {});

/// Reference renderer: one global depth sort, every pixel against every Gaussian.
template <typename Scalar>
RenderOutput<Scalar> render_naive(const GaussianSet<Scalar>& gaussians, const Camera<Scalar>& camera,
                                  const Vec3<std::type_identity_t<Scalar>>& background, const RasterSettings& settings = {});

/// Gradients of a scalar loss given dL/d(color) (H x W x 3).
template <typename Scalar>
RenderGradients<Scalar> render_backward(const GaussianSet<Scalar>& gaussians, const Camera<Scalar>& camera,
                                        const Vec3<std::type_identity_t<Scalar>>& background, const std::vector<Scalar>& grad_color,
                                        const RasterSettings& settings = {});

/// Rotation matrix of the normalized (w, x, y, z) quaternion.
template <typename Scalar>
Mat3<Scalar> quat_to_matrix(const Vec4<Scalar>& q);

}  // namespace uika
