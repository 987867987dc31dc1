#include "uika/synthdata.hpp"

#include "uika/io.hpp"
#include "uika/meshraster.hpp"
#include "uika/random.hpp"
#include "uika/serialize.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

namespace uika {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

double smoothstep(double e0, double e1, double x) {
  const double t = std::clamp((x - e0) / (e1 - e0), 0.0, 1.0);
  return t * t * (3 - 2 * t);
}

double fade(double t) { return t * t * t * (t * (t * 6 - 15) + 10); }

/// UV of the template vertex whose direction from the origin is closest to `dir`.
Eigen::Vector2d landmark_uv(const HeadModel& model, const Eigen::Vector3d& dir) {
  const Eigen::Vector3d d = dir.normalized();
  std::set<int> referenced(model.triangles.data(), model.triangles.data() + model.triangles.size());
  int best = *referenced.begin();
  double best_dot = -2;
  for (int v : referenced) {
    const double c = model.vertices.row(v).normalized().dot(d.transpose());
    if (c > best_dot) {
      best_dot = c;
      best = v;
    }
  }
  return model.uv.row(best).transpose();
}

double laplace(Rng& rng, double scale) {
  double u = rng.uniform() - 0.5;
  while (u == -0.5) u = rng.uniform() - 0.5;
  return -scale * (u < 0 ? -1.0 : 1.0) * std::log(1 - 2 * std::abs(u));
}

double catmull_rom(double p0, double p1, double p2, double p3, double t) {
  const double t2 = t * t, t3 = t2 * t;
  return 0.5 * (2 * p1 + (-p0 + p2) * t + (2 * p0 - 5 * p1 + 4 * p2 - p3) * t2 + (-p0 + 3 * p1 - 3 * p2 + p3) * t3);
}

std::string frame_stem(int identity, int view, int frame) {
  return "id_" + std::to_string(identity) + "/view_" + std::to_string(view) + "/frame_" + std::to_string(frame);
}

const std::array<double, 3> kBackgrounds = {0.0, 1.0, 0.5};  // black, white, gray

json config_to_json(const DatasetConfig& c) {
  return {{"identities", c.identities},
          {"views", c.views},
          {"frames", c.frames},
          {"width", c.width},
          {"height", c.height},
          {"seed", c.seed},
          {"supersample", c.supersample},
          {"expression_range", c.expression_range},
          {"keyframe_spacing", c.keyframe_spacing}};
}

DatasetConfig config_from_json(const json& j) {
  DatasetConfig c;
  c.identities = j.at("identities").get<int>();
  c.views = j.at("views").get<int>();
  c.frames = j.at("frames").get<int>();
  c.width = j.at("width").get<int>();
  c.height = j.at("height").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.supersample = j.at("supersample").get<int>();
  c.expression_range = j.at("expression_range").get<double>();
  c.keyframe_spacing = j.at("keyframe_spacing").get<int>();
  return c;
}

}  // namespace

// ---------------------------------------------------------------------------

ProceduralTexture::ProceduralTexture(std::uint64_t seed, const HeadModel& model) {
  Rng rng(seed);
  base_ = Eigen::Vector3d(rng.uniform(0.55, 0.85), rng.uniform(0.4, 0.65), rng.uniform(0.3, 0.55));
  for (auto [cells, amp] : {std::pair{4, 0.14}, std::pair{8, 0.08}, std::pair{16, 0.04}}) {
    Octave o;
    o.cells = cells;
    o.amplitude = amp;
    o.lattice.resize(std::size_t(cells + 1) * (cells + 1));
    for (auto& c : o.lattice) {
      const double lum = rng.uniform(-1, 1);
      c = Eigen::Vector3d(lum + 0.3 * rng.uniform(-1, 1), lum + 0.3 * rng.uniform(-1, 1), lum + 0.3 * rng.uniform(-1, 1));
    }
    octaves_.push_back(std::move(o));
  }
  const Eigen::Vector3d iris(rng.uniform(0.05, 0.35), rng.uniform(0.05, 0.3), rng.uniform(0.03, 0.25));
  for (double side : {-1.0, 1.0})
    decals_.push_back({landmark_uv(model, {side * 0.27, 0.22, 0.6}), {0.03, 0.02}, iris});
  decals_.push_back({landmark_uv(model, {0.0, -0.28, 0.62}), {0.06, 0.018},
                     Eigen::Vector3d(rng.uniform(0.45, 0.7), rng.uniform(0.12, 0.25), rng.uniform(0.15, 0.3))});
  const int marks = rng.uniform_int(2, 4);
  for (int k = 0; k < marks; ++k) {
    const double r = rng.uniform(0.02, 0.05);
    decals_.push_back({{rng.uniform(0.15, 0.85), rng.uniform(0.15, 0.85)},
                       {r, r * rng.uniform(0.6, 1.0)},
                       Eigen::Vector3d(rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9))});
  }
}

Eigen::Vector3d ProceduralTexture::operator()(double u, double v) const {
  Eigen::Vector3d c = base_;
  for (const Octave& o : octaves_) {
    const double x = std::clamp(u, 0.0, 1.0) * o.cells, y = std::clamp(v, 0.0, 1.0) * o.cells;
    const int i = std::min(static_cast<int>(x), o.cells - 1), j = std::min(static_cast<int>(y), o.cells - 1);
    const double fx = fade(x - i), fy = fade(y - j);
    const int stride = o.cells + 1;
    const Eigen::Vector3d a = o.lattice[j * stride + i] * (1 - fx) + o.lattice[j * stride + i + 1] * fx;
    const Eigen::Vector3d b = o.lattice[(j + 1) * stride + i] * (1 - fx) + o.lattice[(j + 1) * stride + i + 1] * fx;
    c += o.amplitude * (a * (1 - fy) + b * fy);
  }
  for (const Decal& d : decals_) {
    const double r = Eigen::Vector2d((u - d.center.x()) / d.radii.x(), (v - d.center.y()) / d.radii.y()).norm();
    const double t = 1.0 - smoothstep(0.7, 1.2, r);
    if (t > 0) c = c * (1 - t) + d.color * t;
  }
  return c.cwiseMax(0.0).cwiseMin(1.0);
}

Image ProceduralTexture::bake(int R) const {
  Image img(R, R);
  for (int j = 0; j < R; ++j)
    for (int i = 0; i < R; ++i) {
      const Eigen::Vector3d c = (*this)((i + 0.5) / R, (j + 0.5) / R);
      for (int k = 0; k < 3; ++k) img.at(i, j, k) = c[k];
    }
  return img;
}

std::vector<Camera<double>> ring_cameras(int views, int width, int height, double distance, double focal_scale) {
  require(views >= 1, "need at least one view");
  const double deg = std::numbers::pi / 180.0;
  const std::array<double, 3> elevations = {-15.0, 0.0, 15.0};
  std::vector<Camera<double>> cams;
  for (int v = 0; v < views; ++v) {
    const double az = views == 1 ? 0.0 : (-90.0 + 180.0 * v / (views - 1)) * deg;
    const double el = elevations[v % 3] * deg;
    const Eigen::Vector3d eye(distance * std::sin(az) * std::cos(el), distance * std::sin(el),
                              distance * std::cos(az) * std::cos(el));
    cams.push_back(Camera<double>::look_at(eye, Eigen::Vector3d::Zero(), Eigen::Vector3d::UnitY(),
                                           focal_scale * width, width, height));
  }
  return cams;
}

RenderedFrame render_frame(const HeadModel& model, const PoseExpr& theta, const Camera<double>& camera,
                           const ProceduralTexture& texture, const Eigen::Vector3d& background, int supersample) {
  const MatX3d posed = pose_mesh(model, theta);
  RenderedFrame out;
  out.uv = render_uv_map(model, posed, camera);
  out.mask = out.uv.valid;

  const MeshRaster r = rasterize_mesh(posed, model.triangles, camera, supersample);
  const int W = camera.width, H = camera.height, S = supersample;
  out.image = Image(W, H);
#pragma omp parallel for schedule(static)
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      Eigen::Vector3d acc = Eigen::Vector3d::Zero();
      for (int sy = 0; sy < S; ++sy)
        for (int sx = 0; sx < S; ++sx) {
          const std::size_t p = std::size_t(y * S + sy) * r.width + (x * S + sx);
          const int t = r.triangle_id[p];
          if (t < 0) {
            acc += background;
            continue;
          }
          Eigen::Vector2d uv = Eigen::Vector2d::Zero();
          for (int k = 0; k < 3; ++k) uv += r.barycentric(p, k) * model.uv.row(model.triangles(t, k)).transpose();
          acc += texture(uv.x(), uv.y());
        }
      acc /= double(S * S);
      for (int k = 0; k < 3; ++k) out.image.at(x, y, k) = acc[k];
    }
  return out;
}

std::vector<PoseExpr> sample_trajectory(const HeadModel& model, const VecXd& shape, int frames, double range,
                                        int spacing, std::uint64_t seed) {
  require(frames >= 1 && spacing >= 1, "trajectory needs frames >= 1 and keyframe spacing >= 1");
  Rng rng(seed);
  const int E = model.num_expr(), J = model.num_joints();
  const int keys = (frames - 1) / spacing + 2;
  // Channels: E expressions, jaw opening, neck yaw, neck pitch.
  const int C = E + 3;
  MatXd key(keys, C);
  for (int k = 0; k < keys; ++k) {
    for (int e = 0; e < E; ++e) key(k, e) = std::clamp(laplace(rng, 0.35 * range), -range, range);
    key(k, E) = rng.uniform(0.0, 0.35);
    key(k, E + 1) = rng.uniform(-0.25, 0.25);
    key(k, E + 2) = rng.uniform(-0.15, 0.15);
  }
  std::vector<PoseExpr> out;
  for (int f = 0; f < frames; ++f) {
    const double s = double(f) / spacing;
    const int k = static_cast<int>(s);
    const double t = s - k;
    auto at = [&](int i, int c) { return key(std::clamp(i, 0, keys - 1), c); };
    VecXd value(C);
    for (int c = 0; c < C; ++c) value[c] = catmull_rom(at(k - 1, c), at(k, c), at(k + 1, c), at(k + 2, c), t);
    PoseExpr p = PoseExpr::zero(model);
    p.shape = shape;
    p.expression = value.head(E).cwiseMax(-range).cwiseMin(range);
    if (J > 1)
      p.joint_rotations[1] = Eigen::AngleAxisd(value[E + 1], Eigen::Vector3d::UnitY()) *
                             Eigen::AngleAxisd(value[E + 2], Eigen::Vector3d::UnitX());
    if (J > 2) p.joint_rotations[2] = Eigen::AngleAxisd(std::max(0.0, value[E]), Eigen::Vector3d::UnitX());
    out.push_back(std::move(p));
  }
  return out;
}

// ---------------------------------------------------------------------------

const DatasetFrame& Dataset::frame(int identity, int view, int f) const {
  require(identity >= 0 && identity < config.identities && view >= 0 && view < config.views && f >= 0 &&
              f < config.frames,
          "frame index out of range");
  return frames[(std::size_t(identity) * config.views + view) * config.frames + f];
}

Dataset generate_dataset(const HeadModel& model, const DatasetConfig& config, const fs::path& out_dir) {
  require(config.identities >= 1 && config.views >= 1 && config.frames >= 1, "dataset counts must be >= 1");
  require(config.width >= 8 && config.height >= 8, "image size must be at least 8x8");
  require(config.supersample >= 1, "supersample must be >= 1");
  model.validate();
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  Dataset ds;
  ds.root = out_dir;
  ds.config = config;
  ds.model = model;
  save_head_model(model, out_dir / "model.uikahm");
  ds.model_hash = io::file_hash(out_dir / "model.uikahm");

  Rng master(config.seed);
  const auto cams = ring_cameras(config.views, config.width, config.height);
  std::vector<std::vector<PoseExpr>> trajectories;
  for (int k = 0; k < config.identities; ++k) {
    Rng id_rng = master.fork(k + 1);
    IdentityInfo info;
    info.texture_seed = id_rng.next();
    info.shape = VecXd(model.num_shape());
    for (int s = 0; s < model.num_shape(); ++s) info.shape[s] = std::clamp(0.7 * id_rng.normal(), -2.0, 2.0);
    trajectories.push_back(
        sample_trajectory(model, info.shape, config.frames, config.expression_range, config.keyframe_spacing, id_rng.next()));
    ds.identities.push_back(std::move(info));
  }

  Rng bg_rng = master.fork(0xb6);
  for (int k = 0; k < config.identities; ++k)
    for (int v = 0; v < config.views; ++v)
      for (int f = 0; f < config.frames; ++f) {
        DatasetFrame fr;
        fr.identity = k;
        fr.view = v;
        fr.frame = f;
        const std::string stem = frame_stem(k, v, f);
        fr.image = out_dir / (stem + ".png");
        fr.mask = out_dir / (stem + ".mask.png");
        fr.uv = out_dir / (stem + ".uv.f32");
        fr.meta = out_dir / (stem + ".meta.json");
        fr.camera = cams[v];
        fr.theta = trajectories[k][f];
        fr.background.setConstant(kBackgrounds[bg_rng.uniform_int(0, 2)]);
        ds.frames.push_back(std::move(fr));
      }
  for (int k = 0; k < config.identities; ++k)
    for (int v = 0; v < config.views; ++v) fs::create_directories(out_dir / ("id_" + std::to_string(k)) / ("view_" + std::to_string(v)));

  std::vector<ProceduralTexture> textures;
  for (int k = 0; k < config.identities; ++k) textures.push_back(ds.texture(k));

  // Frames are independent; the manifest is written last as the commit marker.
  std::vector<std::string> errors(ds.frames.size());
#pragma omp parallel for schedule(dynamic, 1)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(ds.frames.size()); ++i) {
    const DatasetFrame& fr = ds.frames[i];
    try {
      const RenderedFrame r = render_frame(model, fr.theta, fr.camera, textures[fr.identity], fr.background,
                                           config.supersample);
      io::write_png(fr.image, r.image);
      std::vector<std::uint8_t> mask(r.mask.size());
      for (std::size_t p = 0; p < mask.size(); ++p) mask[p] = r.mask[p] ? 255 : 0;
      io::write_png_gray(fr.mask, config.width, config.height, mask);
      save_uv_map(fr.uv, r.uv);
      json meta = {{"identity", fr.identity},
                   {"view", fr.view},
                   {"frame", fr.frame},
                   {"camera", camera_to_json(fr.camera)},
                   {"theta", pose_to_json(fr.theta)},
                   {"background", {fr.background.x(), fr.background.y(), fr.background.z()}}};
      io::write_text_atomic(fr.meta, meta.dump(2) + "\n");
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  }
  for (const auto& e : errors)
    if (!e.empty()) throw IoError("dataset generation failed: " + e);

  json ids = json::array();
  for (std::size_t k = 0; k < ds.identities.size(); ++k) {
    const auto& s = ds.identities[k].shape;
    ids.push_back({{"id", k},
                   {"texture_seed", ds.identities[k].texture_seed},
                   {"shape", std::vector<double>(s.data(), s.data() + s.size())}});
  }
  json table = json::array();
  for (const auto& fr : ds.frames) {
    const std::string stem = frame_stem(fr.identity, fr.view, fr.frame);
    table.push_back({{"identity", fr.identity},
                     {"view", fr.view},
                     {"frame", fr.frame},
                     {"image", stem + ".png"},
                     {"mask", stem + ".mask.png"},
                     {"uv", stem + ".uv.f32"},
                     {"meta", stem + ".meta.json"}});
  }
  ds.manifest = {{"format", "uika-dataset"},
                 {"version", 1},
                 {"model", "model.uikahm"},
                 {"model_hash", ds.model_hash},
                 {"config", config_to_json(config)},
                 {"background_policy", {"black", "white", "gray"}},
                 {"identities", ids},
                 {"frame_count", ds.frames.size()},
                 {"frames", table}};
  io::write_text_atomic(out_dir / "manifest.json", ds.manifest.dump(2) + "\n");
  return ds;
}

Dataset load_dataset(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path)) throw IoError("no manifest.json in " + dir.string());
  Dataset ds;
  ds.root = dir;
  ds.manifest = io::read_json(manifest_path);
  const json& m = ds.manifest;
  try {
    if (m.at("format") != "uika-dataset") throw FormatError("not a uika dataset manifest: " + manifest_path.string());
    if (m.at("version") != 1)
      throw FormatError("unsupported dataset version " + m.at("version").dump() + " in " + manifest_path.string());
    ds.config = config_from_json(m.at("config"));
    const fs::path model_path = dir / m.at("model").get<std::string>();
    if (!fs::exists(model_path)) throw IoError("dataset model file missing: " + model_path.string());
    ds.model_hash = io::file_hash(model_path);
    if (ds.model_hash != m.at("model_hash").get<std::string>())
      throw FormatError("model hash mismatch: manifest says " + m.at("model_hash").get<std::string>() + ", " +
                        model_path.string() + " hashes to " + ds.model_hash);
    ds.model = load_head_model(model_path);
    for (const auto& id : m.at("identities")) {
      IdentityInfo info;
      info.texture_seed = id.at("texture_seed").get<std::uint64_t>();
      const auto s = id.at("shape").get<std::vector<double>>();
      info.shape = Eigen::Map<const VecXd>(s.data(), static_cast<Eigen::Index>(s.size()));
      ds.identities.push_back(std::move(info));
    }

    std::vector<std::string> missing;
    for (const auto& e : m.at("frames")) {
      DatasetFrame fr;
      fr.identity = e.at("identity").get<int>();
      fr.view = e.at("view").get<int>();
      fr.frame = e.at("frame").get<int>();
      fr.image = dir / e.at("image").get<std::string>();
      fr.mask = dir / e.at("mask").get<std::string>();
      fr.uv = dir / e.at("uv").get<std::string>();
      fr.meta = dir / e.at("meta").get<std::string>();
      const std::string where = " (identity " + std::to_string(fr.identity) + ", view " + std::to_string(fr.view) +
                                ", frame " + std::to_string(fr.frame) + ")";
      for (const fs::path& p : {fr.image, fr.mask, fr.uv, fr.meta})
        if (!fs::exists(p)) missing.push_back(fs::relative(p, dir).string() + where);
      if (fs::exists(fr.meta)) {
        const json meta = io::read_json(fr.meta);
        fr.camera = camera_from_json(meta.at("camera"));
        fr.theta = pose_from_json(meta.at("theta"), ds.model.num_shape(), ds.model.num_expr(), ds.model.num_joints());
        const auto bg = meta.at("background").get<std::vector<double>>();
        if (bg.size() != 3) throw FormatError("background must have 3 components in " + fr.meta.string());
        fr.background = Eigen::Vector3d(bg[0], bg[1], bg[2]);
      }
      ds.frames.push_back(std::move(fr));
    }
    if (!missing.empty()) {
      std::string msg = "dataset " + dir.string() + " is missing " + std::to_string(missing.size()) + " file(s):";
      for (std::size_t i = 0; i < missing.size() && i < 20; ++i) msg += "\n  " + missing[i];
      if (missing.size() > 20) msg += "\n  ...";
      throw IoError(msg);
    }
    if (ds.frames.size() != std::size_t(ds.config.identities) * ds.config.views * ds.config.frames)
      throw FormatError("frame table is not identities x views x frames");
    for (std::size_t i = 0; i < ds.frames.size(); ++i) {
      const auto& fr = ds.frames[i];
      if (&ds.frame(fr.identity, fr.view, fr.frame) != &ds.frames[i])
        throw FormatError("frame table is not ordered by identity, view, frame");
    }
  } catch (const json::exception& e) {
    throw FormatError("malformed manifest " + manifest_path.string() + ": " + e.what());
  }
  return ds;
}

Image load_frame_image(const DatasetFrame& frame) { return io::read_png(frame.image); }

std::vector<std::uint8_t> load_frame_mask(const DatasetFrame& frame) {
  int w = 0, h = 0;
  auto px = io::read_png_gray(frame.mask, w, h);
  for (auto& v : px) v = v >= 128 ? 1 : 0;
  return px;
}

UvCoordMap load_frame_uv(const DatasetFrame& frame) { return load_uv_map(frame.uv); }

}  // namespace uika
