#pragma once

#include "uika/common.hpp"
#include "uika/splatter.hpp"

#include <vector>

namespace uika {

/// Depth-tested triangle coverage at pixel centers.
struct MeshRaster {
  int width = 0;
  int height = 0;
  std::vector<int> triangle_id;  // H*W, -1 = background
  MatX3d barycentric;            // H*W x 3, perspective-correct
  std::vector<double> depth;     // camera z, +inf on background
};

/// With supersample S > 1 the result is (S W) x (S H) and subpixel (sx, sy) of
/// pixel (x, y) sits at (x + (sx + 0.5) / S - 0.5, y + (sy + 0.5) / S - 0.5).
/// Triangles touching the near plane are skipped; depth ties keep the lower
/// triangle index.
MeshRaster rasterize_mesh(const MatX3d& vertices, const MatX3i& triangles, const Camera<double>& camera,
                          int supersample = 1);

}  // namespace uika
