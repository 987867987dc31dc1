#pragma once

#include "uika/common.hpp"
#include "uika/headmodel.hpp"
#include "uika/splatter.hpp"

#include <filesystem>
#include <memory>
#include <vector>

namespace uika {

/// Per-pixel UV coordinates; invalid pixels hold (-1, -1).
struct UvCoordMap {
  int width = 0;
  int height = 0;
  MatX2d uv;                        // H*W x 2
  std::vector<std::uint8_t> valid;  // H*W

  int valid_count() const;
};

class CorrespondenceEstimator {
 public:
  virtual ~CorrespondenceEstimator() = default;
  /// `index` is the image's position in the input list.
  virtual UvCoordMap estimate(const Image& image, std::size_t index) const = 0;
};

/// One map per image, in input order. Throws ParameterError on an empty list or
/// mixed resolutions.
std::vector<UvCoordMap> estimate_correspondence(const std::vector<Image>& images,
                                                const CorrespondenceEstimator& estimator);

/// Depth-tested UV rendering of an already posed mesh.
UvCoordMap render_uv_map(const HeadModel& model, const MatX3d& posed_vertices, const Camera<double>& camera);

/// Renders the mesh UV through each view's known camera and pose.
class GroundTruthOracle : public CorrespondenceEstimator {
 public:
  struct View {
    Camera<double> camera;
    PoseExpr theta;
  };

  GroundTruthOracle(std::shared_ptr<const HeadModel> model, std::vector<View> views);
  UvCoordMap estimate(const Image& image, std::size_t index) const override;

 private:
  std::shared_ptr<const HeadModel> model_;
  std::vector<View> views_;
};

/// Reads precomputed (H, W, 2) float32 maps, one file per input image.
class ExternalMapLoader : public CorrespondenceEstimator {
 public:
  explicit ExternalMapLoader(std::vector<std::filesystem::path> paths);
  UvCoordMap estimate(const Image& image, std::size_t index) const override;

 private:
  std::vector<std::filesystem::path> paths_;
};

void save_uv_map(const std::filesystem::path& path, const UvCoordMap& map);
UvCoordMap load_uv_map(const std::filesystem::path& path);

/// Screen colors scattered into an R x R texel grid (flat index j * R + i).
struct UvImage {
  int resolution = 0;
  MatX3d color;                 // R*R x 3, zero where hit_count == 0
  std::vector<int> hit_count;   // contributing screen pixels per texel
};

/// Nearest-texel scatter; colliding pixels are averaged.
UvImage reproject(const Image& image, const UvCoordMap& uvmap, int resolution);

struct UvAggregate {
  int resolution = 0;
  MatX3d color;                 // I_aggr, R*R x 3
  VecXd confidence;             // gamma in [0, 1]
  std::vector<int> total_hits;  // views with at least one hit per texel
};

/// Hit-weighted mean over views and log-count confidence
/// gamma = log(1 + n) / log(1 + max n). Exact under permutation of `views`.
UvAggregate aggregate(const std::vector<UvImage>& views);

}  // namespace uika
