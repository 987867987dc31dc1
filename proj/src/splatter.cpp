#include "uika/splatter.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace uika {

namespace {

template <typename Scalar>
void check_finite(const GaussianSet<Scalar>& g) {
  const Eigen::Index n = g.size();
  if (g.rotations.rows() != n || g.scales.rows() != n || g.opacities.size() != n || g.colors.rows() != n)
    throw ParameterError("Gaussian attribute arrays have inconsistent lengths");
  std::vector<std::int64_t> bad;
  for (Eigen::Index i = 0; i < n; ++i) {
    const bool ok = g.positions.row(i).allFinite() && g.rotations.row(i).allFinite() && g.scales.row(i).allFinite() &&
                    std::isfinite(g.opacities[i]) && g.colors.row(i).allFinite();
    if (!ok) bad.push_back(i);
  }
  if (!bad.empty()) {
    std::string msg = "non-finite Gaussian attributes at indices:";
    for (std::size_t k = 0; k < bad.size() && k < 16; ++k) msg += " " + std::to_string(bad[k]);
    if (bad.size() > 16) msg += " ...";
    throw InputError(msg, std::move(bad));
  }
}

/// Non-culled splat indices ordered front to back, ties by index.
template <typename Scalar>
std::vector<int> depth_order(const std::vector<ScreenSplat<Scalar>>& splats) {
  std::vector<int> order;
  order.reserve(splats.size());
  for (std::size_t i = 0; i < splats.size(); ++i)
    if (!splats[i].culled) order.push_back(static_cast<int>(i));
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (splats[a].depth != splats[b].depth) return splats[a].depth < splats[b].depth;
    return a < b;
  });
  return order;
}

struct TileLists {
  int tiles_x = 0, tiles_y = 0;
  std::vector<int> offsets;  // tiles + 1
  std::vector<int> entries;  // splat indices, depth-ordered per tile
};

template <typename Scalar>
TileLists bin_tiles(const std::vector<ScreenSplat<Scalar>>& splats, const std::vector<int>& order, int width,
                    int height, int ts) {
  TileLists t;
  t.tiles_x = (width + ts - 1) / ts;
  t.tiles_y = (height + ts - 1) / ts;
  const int n_tiles = t.tiles_x * t.tiles_y;
  std::vector<int> counts(n_tiles + 1, 0);
  for (int g : order) {
    const auto& s = splats[g];
    for (int ty = s.y0 / ts; ty <= s.y1 / ts; ++ty)
      for (int tx = s.x0 / ts; tx <= s.x1 / ts; ++tx) ++counts[ty * t.tiles_x + tx];
  }
  t.offsets.assign(n_tiles + 1, 0);
  for (int i = 0; i < n_tiles; ++i) t.offsets[i + 1] = t.offsets[i] + counts[i];
  t.entries.resize(t.offsets[n_tiles]);
  std::vector<int> cursor(t.offsets.begin(), t.offsets.end() - 1);
  for (int g : order) {
    const auto& s = splats[g];
    for (int ty = s.y0 / ts; ty <= s.y1 / ts; ++ty)
      for (int tx = s.x0 / ts; tx <= s.x1 / ts; ++tx) t.entries[cursor[ty * t.tiles_x + tx]++] = g;
  }
  return t;
}

/// One pixel's compositing loop; `visit(g, alpha, T_before, kernel)` is called
/// for every contributing splat in order. Returns the final transmittance.
template <typename Scalar, typename Visit>
Scalar composite_pixel(const GaussianSet<Scalar>& gs, const std::vector<ScreenSplat<Scalar>>& splats,
                       const int* list, int count, Scalar px, Scalar py, Scalar cutoff2, Scalar min_t, Visit&& visit) {
  Scalar T = 1;
  for (int k = 0; k < count; ++k) {
    const int g = list[k];
    const auto& s = splats[g];
    const Scalar dx = px - s.mean_x, dy = py - s.mean_y;
    const Scalar q = s.conic[0] * dx * dx + Scalar(2) * s.conic[1] * dx * dy + s.conic[2] * dy * dy;
    if (q > cutoff2) continue;
    const Scalar kernel = std::exp(Scalar(-0.5) * q);
    const Scalar alpha = gs.opacities[g] * kernel;
    visit(k, g, alpha, T, kernel);
    T *= Scalar(1) - alpha;
    if (T < min_t) break;
  }
  return T;
}

}  // namespace

// ---------------------------------------------------------------------------

template <typename Scalar>
void Camera<Scalar>::validate() const {
  require(fx > 0 && fy > 0, "camera focal lengths must be positive");
  require(near_plane < far_plane, "camera near plane must be closer than far plane");
  require(width > 0 && height > 0, "camera image size must be positive");
}

template <typename Scalar>
Camera<Scalar> Camera<Scalar>::look_at(const Vec3<Scalar>& eye, const Vec3<Scalar>& target, const Vec3<Scalar>& up,
                                       Scalar focal, int width, int height) {
  Camera c;
  const Vec3<Scalar> z = (target - eye).normalized();
  const Vec3<Scalar> x = z.cross(up).normalized();  // image right
  const Vec3<Scalar> y = z.cross(x);                // image down
  c.rotation.row(0) = x.transpose();
  c.rotation.row(1) = y.transpose();
  c.rotation.row(2) = z.transpose();
  c.translation = -c.rotation * eye;
  c.fx = c.fy = focal;
  c.cx = Scalar(width - 1) / 2;
  c.cy = Scalar(height - 1) / 2;
  c.width = width;
  c.height = height;
  return c;
}

template <typename Scalar>
Mat3<Scalar> quat_to_matrix(const Vec4<Scalar>& q_in) {
  const Vec4<Scalar> q = q_in / q_in.norm();
  const Scalar w = q[0], x = q[1], y = q[2], z = q[3];
  Mat3<Scalar> R;
  R << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
       2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
       2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return R;
}

template <typename Scalar>
std::vector<ScreenSplat<Scalar>> project(const GaussianSet<Scalar>& gs, const Camera<Scalar>& cam,
                                         const RasterSettings& settings) {
  cam.validate();
  const Eigen::Index n = gs.size();
  std::vector<ScreenSplat<Scalar>> out(static_cast<std::size_t>(n));
  const Scalar tan_x = Scalar(settings.frustum_margin) * Scalar(cam.width) / (Scalar(2) * cam.fx);
  const Scalar tan_y = Scalar(settings.frustum_margin) * Scalar(cam.height) / (Scalar(2) * cam.fy);
  const Scalar cutoff = Scalar(settings.cutoff_sigma);
  const Scalar dilation = Scalar(settings.cov_dilation);

#pragma omp parallel for schedule(static)
  for (Eigen::Index i = 0; i < n; ++i) {
    ScreenSplat<Scalar>& s = out[static_cast<std::size_t>(i)];
    const Vec3<Scalar> t = cam.rotation * gs.positions.row(i).transpose() + cam.translation;
    if (t.z() < cam.near_plane || t.z() > cam.far_plane) continue;
    if (std::abs(t.x() / t.z()) > tan_x || std::abs(t.y() / t.z()) > tan_y) continue;

    const Mat3<Scalar> R = quat_to_matrix<Scalar>(gs.rotations.row(i).transpose());
    const Mat3<Scalar> M = R * gs.scales.row(i).transpose().asDiagonal();
    const Mat3<Scalar> cov3 = M * M.transpose();
    Eigen::Matrix<Scalar, 2, 3> J;
    const Scalar iz = Scalar(1) / t.z();
    J << cam.fx * iz, 0, -cam.fx * t.x() * iz * iz, 0, cam.fy * iz, -cam.fy * t.y() * iz * iz;
    const Eigen::Matrix<Scalar, 2, 3> P = J * cam.rotation;
    const Eigen::Matrix<Scalar, 2, 2> cov2 = P * cov3 * P.transpose();
    const Scalar a = cov2(0, 0) + dilation, b = cov2(0, 1), c = cov2(1, 1) + dilation;
    const Scalar det = a * c - b * b;
    if (!(det > 0)) continue;
    s.mean_x = cam.fx * t.x() * iz + cam.cx;
    s.mean_y = cam.fy * t.y() * iz + cam.cy;
    s.cov = {a, b, c};
    s.conic = {c / det, -b / det, a / det};
    s.depth = t.z();
    // Axis-aligned extent of the ellipse q <= cutoff^2 is cutoff * sqrt(cov_xx).
    const Scalar hx = cutoff * std::sqrt(a), hy = cutoff * std::sqrt(c);
    s.x0 = std::max(0, static_cast<int>(std::floor(s.mean_x - hx)));
    s.x1 = std::min(cam.width - 1, static_cast<int>(std::ceil(s.mean_x + hx)));
    s.y0 = std::max(0, static_cast<int>(std::floor(s.mean_y - hy)));
    s.y1 = std::min(cam.height - 1, static_cast<int>(std::ceil(s.mean_y + hy)));
    s.culled = s.x0 > s.x1 || s.y0 > s.y1;
  }
  return out;
}

template <typename Scalar>
Image RenderOutput<Scalar>::to_image() const {
  Image img(width, height);
  for (std::size_t i = 0; i < color.size(); ++i) img.data[i] = static_cast<double>(color[i]);
  return img;
}

template <typename Scalar>
RenderOutput<Scalar> render(const GaussianSet<Scalar>& gs, const Camera<Scalar>& cam, const Vec3<std::type_identity_t<Scalar>>& bg,
                            const RasterSettings& settings) {
  check_finite(gs);
  const auto splats = project(gs, cam, settings);
  const auto order = depth_order(splats);
  const int W = cam.width, H = cam.height, ts = settings.tile_size;
  const TileLists tiles = bin_tiles(splats, order, W, H, ts);
  const Scalar cutoff2 = Scalar(settings.cutoff_sigma * settings.cutoff_sigma);
  const Scalar min_t = Scalar(settings.min_transmittance);

  RenderOutput<Scalar> out;
  out.width = W;
  out.height = H;
  out.color.assign(std::size_t(W) * H * 3, Scalar(0));
  out.alpha.assign(std::size_t(W) * H, Scalar(0));
  out.contributors.assign(std::size_t(W) * H, 0);
  const int n_tiles = tiles.tiles_x * tiles.tiles_y;

#pragma omp parallel for schedule(dynamic, 4)
  for (int tile = 0; tile < n_tiles; ++tile) {
    const int tx = tile % tiles.tiles_x, ty = tile / tiles.tiles_x;
    const int* list = tiles.entries.data() + tiles.offsets[tile];
    const int count = tiles.offsets[tile + 1] - tiles.offsets[tile];
    for (int y = ty * ts; y < std::min(H, (ty + 1) * ts); ++y)
      for (int x = tx * ts; x < std::min(W, (tx + 1) * ts); ++x) {
        Vec3<Scalar> C = Vec3<Scalar>::Zero();
        int contributors = 0;
        const Scalar T = composite_pixel(gs, splats, list, count, Scalar(x), Scalar(y), cutoff2, min_t,
                                         [&](int, int g, Scalar alpha, Scalar Tb, Scalar) {
                                           C += gs.colors.row(g).transpose() * (alpha * Tb);
                                           ++contributors;
                                         });
        const std::size_t p = std::size_t(y) * W + x;
        for (int c = 0; c < 3; ++c) out.color[3 * p + c] = C[c] + T * bg[c];
        out.alpha[p] = Scalar(1) - T;
        out.contributors[p] = contributors;
      }
  }
  return out;
}

template <typename Scalar>
RenderOutput<Scalar> render_naive(const GaussianSet<Scalar>& gs, const Camera<Scalar>& cam, const Vec3<std::type_identity_t<Scalar>>& bg,
                                  const RasterSettings& settings) {
  check_finite(gs);
  const auto splats = project(gs, cam, settings);
  const auto order = depth_order(splats);
  const int W = cam.width, H = cam.height;
  const Scalar cutoff2 = Scalar(settings.cutoff_sigma * settings.cutoff_sigma);
  const Scalar min_t = Scalar(settings.min_transmittance);
  RenderOutput<Scalar> out;
  out.width = W;
  out.height = H;
  out.color.assign(std::size_t(W) * H * 3, Scalar(0));
  out.alpha.assign(std::size_t(W) * H, Scalar(0));
  out.contributors.assign(std::size_t(W) * H, 0);

#pragma omp parallel for schedule(dynamic, 1)
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      Vec3<Scalar> C = Vec3<Scalar>::Zero();
      int contributors = 0;
      const Scalar T = composite_pixel(gs, splats, order.data(), static_cast<int>(order.size()), Scalar(x),
                                       Scalar(y), cutoff2, min_t, [&](int, int g, Scalar alpha, Scalar Tb, Scalar) {
                                         C += gs.colors.row(g).transpose() * (alpha * Tb);
                                         ++contributors;
                                       });
      const std::size_t p = std::size_t(y) * W + x;
      for (int c = 0; c < 3; ++c) out.color[3 * p + c] = C[c] + T * bg[c];
      out.alpha[p] = Scalar(1) - T;
      out.contributors[p] = contributors;
    }
  return out;
}

// ---------------------------------------------------------------------------

template <typename Scalar>
RenderGradients<Scalar> render_backward(const GaussianSet<Scalar>& gs, const Camera<Scalar>& cam,
                                        const Vec3<std::type_identity_t<Scalar>>& bg, const std::vector<Scalar>& grad_color,
                                        const RasterSettings& settings) {
  check_finite(gs);
  const int W = cam.width, H = cam.height, ts = settings.tile_size;
  require(grad_color.size() == std::size_t(W) * H * 3, "upstream gradient must be H x W x 3");
  const auto splats = project(gs, cam, settings);
  const auto order = depth_order(splats);
  const TileLists tiles = bin_tiles(splats, order, W, H, ts);
  const Scalar cutoff2 = Scalar(settings.cutoff_sigma * settings.cutoff_sigma);
  const Scalar min_t = Scalar(settings.min_transmittance);
  const int n_tiles = tiles.tiles_x * tiles.tiles_y;

  // Per tile-list entry partials: mean (2), conic (3), opacity, color (3).
  constexpr int kRec = 9;
  std::vector<Scalar> records(tiles.entries.size() * kRec, Scalar(0));

  struct Contribution {
    int slot;
    int g;
    Scalar alpha, T, kernel;
  };

#pragma omp parallel
  {
    std::vector<Contribution> contribs;
#pragma omp for schedule(dynamic, 4)
    for (int tile = 0; tile < n_tiles; ++tile) {
      const int tx = tile % tiles.tiles_x, ty = tile / tiles.tiles_x;
      const int base = tiles.offsets[tile];
      const int* list = tiles.entries.data() + base;
      const int count = tiles.offsets[tile + 1] - base;
      for (int y = ty * ts; y < std::min(H, (ty + 1) * ts); ++y)
        for (int x = tx * ts; x < std::min(W, (tx + 1) * ts); ++x) {
          const std::size_t p = std::size_t(y) * W + x;
          const Vec3<Scalar> dC(grad_color[3 * p], grad_color[3 * p + 1], grad_color[3 * p + 2]);
          if (dC.isZero()) continue;
          contribs.clear();
          composite_pixel(gs, splats, list, count, Scalar(x), Scalar(y), cutoff2, min_t,
                          [&](int k, int g, Scalar alpha, Scalar Tb, Scalar kernel) {
                            contribs.push_back({base + k, g, alpha, Tb, kernel});
                          });
          // Back to front: U is the normalized color seen behind the current splat.
          Vec3<Scalar> U = bg;
          for (auto it = contribs.rbegin(); it != contribs.rend(); ++it) {
            const Vec3<Scalar> c = gs.colors.row(it->g).transpose();
            Scalar* rec = records.data() + std::size_t(it->slot) * kRec;
            const Scalar w = it->alpha * it->T;
            rec[6] += w * dC[0];
            rec[7] += w * dC[1];
            rec[8] += w * dC[2];
            const Scalar d_alpha = it->T * (c - U).dot(dC);
            U = c * it->alpha + (Scalar(1) - it->alpha) * U;
            const auto& s = splats[it->g];
            rec[5] += it->kernel * d_alpha;
            const Scalar d_q = Scalar(-0.5) * gs.opacities[it->g] * it->kernel * d_alpha;
            const Scalar dx = Scalar(x) - s.mean_x, dy = Scalar(y) - s.mean_y;
            // q = a dx^2 + 2 b dx dy + c dy^2, d = pixel - mean.
            rec[0] += d_q * Scalar(-2) * (s.conic[0] * dx + s.conic[1] * dy);
            rec[1] += d_q * Scalar(-2) * (s.conic[1] * dx + s.conic[2] * dy);
            rec[2] += d_q * dx * dx;
            rec[3] += d_q * Scalar(2) * dx * dy;
            rec[4] += d_q * dy * dy;
          }
        }
    }
  }

  // Deterministic reduction in tile order.
  const Eigen::Index n = gs.size();
  MatX<Scalar> screen = MatX<Scalar>::Zero(n, kRec);
  for (std::size_t e = 0; e < tiles.entries.size(); ++e) {
    const int g = tiles.entries[e];
    for (int r = 0; r < kRec; ++r) screen(g, r) += records[e * kRec + r];
  }

  RenderGradients<Scalar> grads;
  grads.positions = MatX3<Scalar>::Zero(n, 3);
  grads.rotations = MatX4<Scalar>::Zero(n, 4);
  grads.scales = MatX3<Scalar>::Zero(n, 3);
  grads.opacities = VecX<Scalar>::Zero(n);
  grads.colors = MatX3<Scalar>::Zero(n, 3);

#pragma omp parallel for schedule(static)
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& s = splats[static_cast<std::size_t>(i)];
    if (s.culled) continue;
    grads.opacities[i] = screen(i, 5);
    grads.colors.row(i) << screen(i, 6), screen(i, 7), screen(i, 8);

    const Vec3<Scalar> t = cam.rotation * gs.positions.row(i).transpose() + cam.translation;
    const Scalar iz = Scalar(1) / t.z();
    Eigen::Matrix<Scalar, 2, 3> J;
    J << cam.fx * iz, 0, -cam.fx * t.x() * iz * iz, 0, cam.fy * iz, -cam.fy * t.y() * iz * iz;
    const Eigen::Matrix<Scalar, 2, 3> P = J * cam.rotation;
    const Vec4<Scalar> q_raw = gs.rotations.row(i).transpose();
    const Scalar q_norm = q_raw.norm();
    const Vec4<Scalar> q = q_raw / q_norm;
    const Mat3<Scalar> R = quat_to_matrix<Scalar>(q);
    const Vec3<Scalar> scale = gs.scales.row(i).transpose();
    const Mat3<Scalar> M = R * scale.asDiagonal();
    const Mat3<Scalar> cov3 = M * M.transpose();

    // conic -> 2D covariance: dL/dSigma' = -Con G Con with G the symmetric split.
    Eigen::Matrix<Scalar, 2, 2> con, G;
    con << s.conic[0], s.conic[1], s.conic[1], s.conic[2];
    G << screen(i, 2), Scalar(0.5) * screen(i, 3), Scalar(0.5) * screen(i, 3), screen(i, 4);
    const Eigen::Matrix<Scalar, 2, 2> d_cov2 = -con * G * con;

    // Sigma' = P Sigma P^T + dilation I.
    const Mat3<Scalar> d_cov3 = P.transpose() * d_cov2 * P;
    const Eigen::Matrix<Scalar, 2, 3> d_P = Scalar(2) * d_cov2 * P * cov3;
    const Eigen::Matrix<Scalar, 2, 3> d_J = d_P * cam.rotation.transpose();

    // Camera-space position from the Jacobian and the projected mean.
    Vec3<Scalar> d_t = Vec3<Scalar>::Zero();
    const Scalar iz2 = iz * iz, iz3 = iz2 * iz;
    d_t.z() += d_J(0, 0) * (-cam.fx * iz2) + d_J(1, 1) * (-cam.fy * iz2) + d_J(0, 2) * (Scalar(2) * cam.fx * t.x() * iz3) +
               d_J(1, 2) * (Scalar(2) * cam.fy * t.y() * iz3);
    d_t.x() += d_J(0, 2) * (-cam.fx * iz2);
    d_t.y() += d_J(1, 2) * (-cam.fy * iz2);
    const Scalar d_mx = screen(i, 0), d_my = screen(i, 1);
    d_t.x() += d_mx * cam.fx * iz;
    d_t.y() += d_my * cam.fy * iz;
    d_t.z() += -d_mx * cam.fx * t.x() * iz2 - d_my * cam.fy * t.y() * iz2;
    grads.positions.row(i) = (cam.rotation.transpose() * d_t).transpose();

    // Sigma = M M^T, M = R diag(s).
    const Mat3<Scalar> d_M = Scalar(2) * d_cov3 * M;
    Vec3<Scalar> d_s;
    for (int k = 0; k < 3; ++k) d_s[k] = d_M.col(k).dot(R.col(k));
    grads.scales.row(i) = d_s.transpose();
    const Mat3<Scalar> d_R = d_M * scale.asDiagonal();
    const Scalar w = q[0], x = q[1], y = q[2], z = q[3];
    Mat3<Scalar> dRw, dRx, dRy, dRz;
    dRw << 0, -z, y, z, 0, -x, -y, x, 0;
    dRx << 0, y, z, y, -2 * x, -w, z, w, -2 * x;
    dRy << -2 * y, x, w, x, 0, z, -w, z, -2 * y;
    dRz << -2 * z, -w, x, w, -2 * z, y, x, y, 0;
    Vec4<Scalar> d_qn(Scalar(2) * (d_R.cwiseProduct(dRw)).sum(), Scalar(2) * (d_R.cwiseProduct(dRx)).sum(),
                      Scalar(2) * (d_R.cwiseProduct(dRy)).sum(), Scalar(2) * (d_R.cwiseProduct(dRz)).sum());
    grads.rotations.row(i) = ((d_qn - q * q.dot(d_qn)) / q_norm).transpose();
  }
  return grads;
}

#define UIKA_INSTANTIATE_SPLATTER(S)                                                                              \
  template struct Camera<S>;                                                                                      \
  template struct RenderOutput<S>;                                                                                \
  template Mat3<S> quat_to_matrix<S>(const Vec4<S>&);                                                             \
  template std::vector<ScreenSplat<S>> project<S>(const GaussianSet<S>&, const Camera<S>&, const RasterSettings&); \
  template RenderOutput<S> render<S>(const GaussianSet<S>&, const Camera<S>&, const Vec3<S>&, const RasterSettings&); \
  template RenderOutput<S> render_naive<S>(const GaussianSet<S>&, const Camera<S>&, const Vec3<S>&,               \
                                           const RasterSettings&);                                                \
  template RenderGradients<S> render_backward<S>(const GaussianSet<S>&, const Camera<S>&, const Vec3<S>&,         \
                                                 const std::vector<S>&, const RasterSettings&);

UIKA_INSTANTIATE_SPLATTER(float)
UIKA_INSTANTIATE_SPLATTER(double)

}  // namespace uika
