#include "uika/meshraster.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace uika {

MeshRaster rasterize_mesh(const MatX3d& vertices, const MatX3i& triangles, const Camera<double>& camera,
                          int supersample) {
  camera.validate();
  require(supersample >= 1, "supersample factor must be >= 1");
  const double S = supersample;
  const int W = camera.width * supersample, H = camera.height * supersample;
  const double fx = camera.fx * S, fy = camera.fy * S;
  const double cx = (camera.cx + 0.5) * S - 0.5, cy = (camera.cy + 0.5) * S - 0.5;

  const Eigen::Index V = vertices.rows();
  MatX3d screen(V, 3);  // x, y, z
  for (Eigen::Index v = 0; v < V; ++v) {
    const Eigen::Vector3d p = camera.rotation * vertices.row(v).transpose() + camera.translation;
    screen.row(v) << fx * p.x() / p.z() + cx, fy * p.y() / p.z() + cy, p.z();
  }

  MeshRaster out;
  out.width = W;
  out.height = H;
  out.triangle_id.assign(std::size_t(W) * H, -1);
  out.barycentric = MatX3d::Zero(std::size_t(W) * H, 3);
  out.depth.assign(std::size_t(W) * H, std::numeric_limits<double>::infinity());

  const int T = static_cast<int>(triangles.rows());
  constexpr int kBand = 16;
  const int bands = (H + kBand - 1) / kBand;

#pragma omp parallel for schedule(dynamic, 1)
  for (int band = 0; band < bands; ++band) {
    const int row0 = band * kBand, row1 = std::min(H, row0 + kBand) - 1;
    for (int t = 0; t < T; ++t) {
      const int i0 = triangles(t, 0), i1 = triangles(t, 1), i2 = triangles(t, 2);
      const double z0 = screen(i0, 2), z1 = screen(i1, 2), z2 = screen(i2, 2);
      if (z0 <= camera.near_plane || z1 <= camera.near_plane || z2 <= camera.near_plane) continue;
      const double x0 = screen(i0, 0), y0 = screen(i0, 1);
      const double x1 = screen(i1, 0), y1 = screen(i1, 1);
      const double x2 = screen(i2, 0), y2 = screen(i2, 1);
      const double area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0);
      if (std::abs(area) < 1e-14) continue;
      const int bx0 = std::max(0, static_cast<int>(std::ceil(std::min({x0, x1, x2}))));
      const int bx1 = std::min(W - 1, static_cast<int>(std::floor(std::max({x0, x1, x2}))));
      const int by0 = std::max(row0, static_cast<int>(std::ceil(std::min({y0, y1, y2}))));
      const int by1 = std::min(row1, static_cast<int>(std::floor(std::max({y0, y1, y2}))));
      for (int y = by0; y <= by1; ++y)
        for (int x = bx0; x <= bx1; ++x) {
          const double b0 = ((x1 - x) * (y2 - y) - (x2 - x) * (y1 - y)) / area;
          const double b1 = ((x2 - x) * (y0 - y) - (x0 - x) * (y2 - y)) / area;
          const double b2 = 1.0 - b0 - b1;
          if (b0 < 0 || b1 < 0 || b2 < 0) continue;
          const double w0 = b0 / z0, w1 = b1 / z1, w2 = b2 / z2;
          const double inv_z = w0 + w1 + w2;
          const double z = 1.0 / inv_z;
          const std::size_t p = std::size_t(y) * W + x;
          if (!(z < out.depth[p])) continue;
          out.depth[p] = z;
          out.triangle_id[p] = t;
          out.barycentric.row(p) << w0 / inv_z, w1 / inv_z, w2 / inv_z;
        }
    }
  }
  return out;
}

}  // namespace uika
