#include "uika/correspondence.hpp"

#include "uika/io.hpp"
#include "uika/meshraster.hpp"

#include <algorithm>
#include <cmath>

namespace uika {

namespace {

/// Correctly rounded floating-point sum (Shewchuk's partials), so the result
/// does not depend on the order of the terms.
class ExactSum {
 public:
  void add(double x) {
    std::size_t i = 0;
    for (double y : partials_) {
      if (std::abs(x) < std::abs(y)) std::swap(x, y);
      const double hi = x + y;
      const double lo = y - (hi - x);
      if (lo != 0.0) partials_[i++] = lo;
      x = hi;
    }
    partials_.resize(i);
    partials_.push_back(x);
  }

  double value() const {
    if (partials_.empty()) return 0.0;
    std::size_t n = partials_.size();
    double hi = partials_[--n];
    double lo = 0.0;
    while (n > 0) {
      const double x = hi;
      const double y = partials_[--n];
      hi = x + y;
      lo = y - (hi - x);
      if (lo != 0.0) break;
    }
    // Round-half-even correction when the remaining partials push past a tie.
    if (n > 0 && ((lo < 0 && partials_[n - 1] < 0) || (lo > 0 && partials_[n - 1] > 0))) {
      const double y = lo * 2.0;
      const double x = hi + y;
      if (y == x - hi) hi = x;
    }
    return hi;
  }

 private:
  std::vector<double> partials_;
};

}  // namespace

int UvCoordMap::valid_count() const {
  return static_cast<int>(std::count(valid.begin(), valid.end(), std::uint8_t(1)));
}

std::vector<UvCoordMap> estimate_correspondence(const std::vector<Image>& images,
                                                const CorrespondenceEstimator& estimator) {
  require(!images.empty(), "estimate_correspondence needs at least one image");
  for (const auto& im : images)
    require(im.width == images[0].width && im.height == images[0].height,
            "all input images must share one resolution");
  std::vector<UvCoordMap> out;
  out.reserve(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) out.push_back(estimator.estimate(images[i], i));
  return out;
}

UvCoordMap render_uv_map(const HeadModel& model, const MatX3d& posed, const Camera<double>& camera) {
  const MeshRaster r = rasterize_mesh(posed, model.triangles, camera);
  UvCoordMap map;
  map.width = r.width;
  map.height = r.height;
  map.uv = MatX2d::Constant(std::size_t(r.width) * r.height, 2, -1.0);
  map.valid.assign(std::size_t(r.width) * r.height, 0);
  for (std::size_t p = 0; p < r.triangle_id.size(); ++p) {
    const int t = r.triangle_id[p];
    if (t < 0) continue;
    Eigen::RowVector2d uv = Eigen::RowVector2d::Zero();
    for (int k = 0; k < 3; ++k) uv += r.barycentric(p, k) * model.uv.row(model.triangles(t, k));
    map.uv.row(p) = uv.cwiseMax(0.0).cwiseMin(1.0);
    map.valid[p] = 1;
  }
  return map;
}

GroundTruthOracle::GroundTruthOracle(std::shared_ptr<const HeadModel> model, std::vector<View> views)
    : model_(std::move(model)), views_(std::move(views)) {
  require(model_ != nullptr, "GroundTruthOracle needs a head model");
}

UvCoordMap GroundTruthOracle::estimate(const Image& image, std::size_t index) const {
  require(index < views_.size(), "GroundTruthOracle has no view " + std::to_string(index));
  const View& v = views_[index];
  require(v.camera.width == image.width && v.camera.height == image.height,
          "GroundTruthOracle camera size differs from the image");
  return render_uv_map(*model_, pose_mesh(*model_, v.theta), v.camera);
}

ExternalMapLoader::ExternalMapLoader(std::vector<std::filesystem::path> paths) : paths_(std::move(paths)) {}

UvCoordMap ExternalMapLoader::estimate(const Image& image, std::size_t index) const {
  require(index < paths_.size(), "ExternalMapLoader has no map for image " + std::to_string(index));
  UvCoordMap map = load_uv_map(paths_[index]);
  if (map.width != image.width || map.height != image.height)
    throw ParameterError("UV map " + paths_[index].string() + " is " + std::to_string(map.width) + "x" +
                         std::to_string(map.height) + " but the image is " + std::to_string(image.width) + "x" +
                         std::to_string(image.height));
  return map;
}

void save_uv_map(const std::filesystem::path& path, const UvCoordMap& map) {
  const auto values = io::to_f32(map.uv.data(), static_cast<std::size_t>(map.uv.size()));
  io::write_tensor(path, {map.height, map.width, 2}, values);
}

UvCoordMap load_uv_map(const std::filesystem::path& path) {
  const io::Tensor t = io::read_tensor(path);
  if (t.shape.size() != 3 || t.shape[2] != 2)
    throw FormatError("UV map " + path.string() + " must have shape (H, W, 2)");
  UvCoordMap map;
  map.height = static_cast<int>(t.shape[0]);
  map.width = static_cast<int>(t.shape[1]);
  const std::size_t n = std::size_t(map.width) * map.height;
  map.uv.resize(n, 2);
  map.valid.assign(n, 0);
  for (std::size_t p = 0; p < n; ++p) {
    const double u = t.values[2 * p], v = t.values[2 * p + 1];
    if (u >= 0 && v >= 0 && u <= 1 && v <= 1) {
      map.uv.row(p) << u, v;
      map.valid[p] = 1;
    } else {
      map.uv.row(p) << -1, -1;
    }
  }
  return map;
}

UvImage reproject(const Image& image, const UvCoordMap& uvmap, int R) {
  require(R > 0, "UV resolution must be positive");
  require(image.width == uvmap.width && image.height == uvmap.height, "image and UV map sizes differ");
  const std::size_t n_pix = image.pixel_count();
  std::vector<int> target(n_pix, -1);

#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t p = 0; p < static_cast<std::ptrdiff_t>(n_pix); ++p) {
    if (!uvmap.valid[p]) continue;
    const int i = std::clamp(static_cast<int>(std::floor(uvmap.uv(p, 0) * R)), 0, R - 1);
    const int j = std::clamp(static_cast<int>(std::floor(uvmap.uv(p, 1) * R)), 0, R - 1);
    target[p] = j * R + i;
  }

  // Bucket pixels by texel, keeping pixel order inside each bucket so the sums
  // match a sequential scan.
  const std::size_t n_tex = std::size_t(R) * R;
  std::vector<int> start(n_tex + 1, 0);
  for (int t : target)
    if (t >= 0) ++start[t + 1];
  for (std::size_t k = 0; k < n_tex; ++k) start[k + 1] += start[k];
  std::vector<int> order(start[n_tex]);
  std::vector<int> cursor(start.begin(), start.end() - 1);
  for (std::size_t p = 0; p < n_pix; ++p)
    if (target[p] >= 0) order[cursor[target[p]]++] = static_cast<int>(p);

  UvImage out;
  out.resolution = R;
  out.color = MatX3d::Zero(n_tex, 3);
  out.hit_count.assign(n_tex, 0);

#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t k = 0; k < static_cast<std::ptrdiff_t>(n_tex); ++k) {
    const int n = start[k + 1] - start[k];
    if (n == 0) continue;
    Eigen::RowVector3d sum = Eigen::RowVector3d::Zero();
    for (int e = start[k]; e < start[k + 1]; ++e)
      for (int c = 0; c < 3; ++c) sum[c] += image.data[3 * std::size_t(order[e]) + c];
    out.color.row(k) = sum / n;
    out.hit_count[k] = n;
  }
  return out;
}

UvAggregate aggregate(const std::vector<UvImage>& views) {
  require(!views.empty(), "aggregate needs at least one UV image");
  const int R = views[0].resolution;
  for (const auto& v : views) require(v.resolution == R, "UV images have different resolutions");
  const std::size_t n_tex = std::size_t(R) * R;

  UvAggregate out;
  out.resolution = R;
  out.color = MatX3d::Zero(n_tex, 3);
  out.confidence = VecXd::Zero(n_tex);
  out.total_hits.assign(n_tex, 0);

#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t k = 0; k < static_cast<std::ptrdiff_t>(n_tex); ++k) {
    ExactSum sum[3];
    long samples = 0;
    int n_views = 0;
    for (const auto& v : views) {
      const int h = v.hit_count[k];
      if (h == 0) continue;
      ++n_views;
      samples += h;
      for (int c = 0; c < 3; ++c) sum[c].add(v.color(k, c) * h);
    }
    out.total_hits[k] = n_views;
    if (samples > 0)
      for (int c = 0; c < 3; ++c) out.color(k, c) = sum[c].value() / static_cast<double>(samples);
  }

  const int max_hits = *std::max_element(out.total_hits.begin(), out.total_hits.end());
  if (max_hits > 0) {
    const double denom = std::log(1.0 + max_hits);
    for (std::size_t k = 0; k < n_tex; ++k)
      if (out.total_hits[k] > 0) out.confidence[k] = std::log(1.0 + out.total_hits[k]) / denom;
  }
  return out;
}

}  // namespace uika
