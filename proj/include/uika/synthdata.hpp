#pragma once

#include "uika/correspondence.hpp"
#include "uika/headmodel.hpp"
#include "uika/splatter.hpp"

#include "json.hpp"

#include <filesystem>
#include <vector>

namespace uika {

/// Per-identity UV texture: layered value noise over a skin tone plus soft
/// decals at the UVs of eye and mouth landmarks.
class ProceduralTexture {
 public:
  ProceduralTexture(std::uint64_t seed, const HeadModel& model);

  Eigen::Vector3d operator()(double u, double v) const;

  /// Texture sampled at texel centers; pixel (i, j) is texel j * R + i.
  Image bake(int resolution) const;

 private:
  struct Octave {
    int cells = 0;
    double amplitude = 0;
    std::vector<Eigen::Vector3d> lattice;  // (cells + 1)^2
  };
  struct Decal {
    Eigen::Vector2d center;
    Eigen::Vector2d radii;
    Eigen::Vector3d color;
  };

  Eigen::Vector3d base_;
  std::vector<Octave> octaves_;
  std::vector<Decal> decals_;
};

/// `views` cameras on a ring around the origin: azimuth evenly spaced over
/// [-90, 90] degrees (0 faces the head), elevation cycling -15, 0, 15 degrees.
std::vector<Camera<double>> ring_cameras(int views, int width, int height, double distance = 3.0,
                                         double focal_scale = 1.3);

struct DatasetConfig {
  int identities = 2;
  int views = 9;
  int frames = 10;
  int width = 64;
  int height = 64;
  std::uint64_t seed = 1;
  int supersample = 4;          // image anti-aliasing; masks and UV maps use pixel centers
  double expression_range = 2.0;
  int keyframe_spacing = 4;     // frames between trajectory keypoints
};

struct DatasetFrame {
  int identity = 0;
  int view = 0;
  int frame = 0;
  std::filesystem::path image;
  std::filesystem::path mask;
  std::filesystem::path uv;
  std::filesystem::path meta;
  Camera<double> camera;
  PoseExpr theta;
  Eigen::Vector3d background = Eigen::Vector3d::Zero();
};

struct IdentityInfo {
  std::uint64_t texture_seed = 0;
  VecXd shape;
};

struct Dataset {
  std::filesystem::path root;
  DatasetConfig config;
  HeadModel model;
  std::string model_hash;
  std::vector<IdentityInfo> identities;
  std::vector<DatasetFrame> frames;  // ordered by identity, view, frame
  nlohmann::json manifest;

  const DatasetFrame& frame(int identity, int view, int frame) const;
  ProceduralTexture texture(int identity) const { return ProceduralTexture(identities.at(identity).texture_seed, model); }
};

struct RenderedFrame {
  Image image;
  std::vector<std::uint8_t> mask;
  UvCoordMap uv;
};

/// Flat-shaded textured render of the posed mesh; mask and UV map are exact
/// pixel-center coverage, the image is averaged over supersample^2 samples.
RenderedFrame render_frame(const HeadModel& model, const PoseExpr& theta, const Camera<double>& camera,
                           const ProceduralTexture& texture, const Eigen::Vector3d& background, int supersample);

/// Pose/expression trajectory of one identity, `frames` long.
std::vector<PoseExpr> sample_trajectory(const HeadModel& model, const VecXd& shape, int frames, double range,
                                        int keyframe_spacing, std::uint64_t seed);

Dataset generate_dataset(const HeadModel& model, const DatasetConfig& config, const std::filesystem::path& out_dir);

/// Throws IoError listing every missing file, FormatError on a hash mismatch.
Dataset load_dataset(const std::filesystem::path& dir);

Image load_frame_image(const DatasetFrame& frame);
std::vector<std::uint8_t> load_frame_mask(const DatasetFrame& frame);
UvCoordMap load_frame_uv(const DatasetFrame& frame);

}  // namespace uika
