#include "uika/avatar.hpp"

#include "uika/io.hpp"

#include <cmath>

namespace uika {

namespace {

constexpr int kAvatarVersion = 1;

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Left multiplication by quaternion a: (a * r) = Q(a) r, both (w, x, y, z).
Eigen::Matrix4d left_mul(const Eigen::Quaterniond& a) {
  Eigen::Matrix4d Q;
  Q << a.w(), -a.x(), -a.y(), -a.z(),
       a.x(), a.w(), -a.z(), a.y(),
       a.y(), a.z(), a.w(), -a.x(),
       a.z(), -a.y(), a.x(), a.w();
  return Q;
}

template <typename M>
void quantize(M& m) {
  m = m.template cast<float>().template cast<double>();
}

/// Per-Gaussian blended transform pieces shared by animate and its backward.
struct Blend {
  Eigen::Matrix3d delta;
  Eigen::Vector3d offset;
  Eigen::Matrix4d rot;
};

Blend blend_for(const CanonicalAvatar& a, const SkinningTransforms& xf, int m) {
  Blend b;
  xf.blend(a.lbs_weights.row(m).transpose(), b.delta, b.offset);
  const Eigen::Matrix3d A = Eigen::Matrix3d::Identity() + b.delta;
  b.rot = left_mul(Eigen::Quaterniond(polar_rotation(A)));
  return b;
}

void check_theta(const CanonicalAvatar& a, const PoseExpr& theta) {
  theta.check_against(a.num_shape, a.num_expr(), a.num_joints());
}

}  // namespace

// ---------------------------------------------------------------------------

UvAttributeMaps UvAttributeMaps::zeros(int R) {
  require(R > 0, "attribute map resolution must be positive");
  UvAttributeMaps m;
  const Eigen::Index n = Eigen::Index(R) * R;
  m.resolution = R;
  m.color = MatXd::Zero(n, 3);
  m.fuse = VecXd::Zero(n);
  m.opacity = VecXd::Zero(n);
  m.offset = MatXd::Zero(n, 3);
  m.scale = MatXd::Zero(n, 3);
  m.rotation = MatXd::Zero(n, 4);
  return m;
}

UvAttributeMaps UvAttributeMaps::initial(int R) {
  UvAttributeMaps m = zeros(R);
  m.opacity.setConstant(std::log(kInitOpacity / (1 - kInitOpacity)));
  m.scale.setConstant(kInitLogScale);
  m.rotation.col(0).setOnes();
  return m;
}

void UvAttributeMaps::check() const {
  const Eigen::Index n = Eigen::Index(resolution) * resolution;
  require(resolution > 0, "attribute map resolution must be positive");
  require(color.rows() == n && color.cols() == 3, "color map must be R^2 x 3");
  require(fuse.size() == n, "fuse map must have R^2 entries");
  require(opacity.size() == n, "opacity map must have R^2 entries");
  require(offset.rows() == n && offset.cols() == 3, "offset map must be R^2 x 3");
  require(scale.rows() == n && scale.cols() == 3, "scale map must be R^2 x 3");
  require(rotation.rows() == n && rotation.cols() == 4, "rotation map must be R^2 x 4");
}

Eigen::Index UvAttributeMaps::parameter_count() const { return Eigen::Index(resolution) * resolution * 15; }

VecXd UvAttributeMaps::flatten() const {
  VecXd out(parameter_count());
  Eigen::Index at = 0;
  auto put = [&](const auto& m) {
    std::copy(m.data(), m.data() + m.size(), out.data() + at);
    at += m.size();
  };
  put(color);
  put(fuse);
  put(opacity);
  put(offset);
  put(scale);
  put(rotation);
  return out;
}

void UvAttributeMaps::unflatten(const VecXd& values) {
  require(values.size() == parameter_count(), "flat parameter vector has the wrong length");
  Eigen::Index at = 0;
  auto get = [&](auto& m) {
    std::copy(values.data() + at, values.data() + at + m.size(), m.data());
    at += m.size();
  };
  get(color);
  get(fuse);
  get(opacity);
  get(offset);
  get(scale);
  get(rotation);
}

CanonicalAvatar CanonicalAvatar::quantized() const {
  CanonicalAvatar q = *this;
  quantize(q.gaussians.positions);
  quantize(q.gaussians.rotations);
  quantize(q.gaussians.scales);
  quantize(q.gaussians.opacities);
  quantize(q.gaussians.colors);
  quantize(q.offsets);
  quantize(q.lbs_weights);
  quantize(q.expr_dirs);
  quantize(q.pose_dirs);
  quantize(q.joints);
  return q;
}

AvatarRig AvatarRig::from_model(const HeadModel& model, std::string model_hash) {
  return {model.joints, model.joint_parents, model.num_shape(), std::move(model_hash)};
}

// ---------------------------------------------------------------------------

CanonicalAvatar assemble(const UvAttributeMaps& attrs, const UvAggregate& aggr, const SkinningBake& bake,
                         const UvRasterization& rast, const AvatarRig& rig) {
  attrs.check();
  const int R = rast.resolution;
  require(attrs.resolution == R, "attribute maps and rasterization differ in resolution");
  require(aggr.resolution == R, "UV aggregate and rasterization differ in resolution");
  if (bake.texels != rast.valid_texels()) throw ParameterError("skinning bake does not match the UV valid mask");
  require(bake.lbs_weights.cols() == rig.joints.rows(), "bake and rig disagree on joint count");

  const int M = bake.size();
  CanonicalAvatar a;
  a.resolution = R;
  a.num_shape = rig.num_shape;
  a.model_hash = rig.model_hash;
  a.gaussians.resize(M);
  a.offsets.resize(M, 3);
  a.lbs_weights = bake.lbs_weights;
  a.expr_dirs = bake.expr_dirs;
  a.pose_dirs = bake.pose_dirs;
  a.joints = rig.joints;
  a.joint_parents = rig.joint_parents;
  a.texel_index.resize(M);

#pragma omp parallel for schedule(static)
  for (int m = 0; m < M; ++m) {
    const int k = bake.texels[m];
    a.texel_index[m] = static_cast<std::uint32_t>(k);
    const double w = sigmoid(attrs.fuse[k]);
    const bool seen = aggr.confidence[k] > 0;
    for (int c = 0; c < 3; ++c) {
      const double pred = sigmoid(attrs.color(k, c));
      a.gaussians.colors(m, c) = seen ? w * pred + (1 - w) * aggr.color(k, c) : pred;
    }
    a.gaussians.opacities[m] = sigmoid(attrs.opacity[k]);
    for (int c = 0; c < 3; ++c) {
      a.offsets(m, c) = kOffsetRange * std::tanh(attrs.offset(k, c));
      a.gaussians.positions(m, c) = bake.rest(m, c) + a.offsets(m, c);
      a.gaussians.scales(m, c) = std::clamp(std::exp(attrs.scale(k, c)), std::exp(kLogScaleMin), kScaleMax);
    }
    const Eigen::Vector4d r = attrs.rotation.row(k).transpose();
    const double n = r.norm();
    a.gaussians.rotations.row(m) = n > 0 ? (r / n).transpose() : Eigen::RowVector4d(1, 0, 0, 0);
  }
  return a;
}

UvAttributeMaps assemble_backward(const UvAttributeMaps& attrs, const UvAggregate& aggr, const SkinningBake& bake,
                                  const RenderGradients<double>& g) {
  UvAttributeMaps d = UvAttributeMaps::zeros(attrs.resolution);
  const int M = bake.size();
  require(g.positions.rows() == M, "gradient size does not match the avatar");
  const double log_max = std::log(kScaleMax);

#pragma omp parallel for schedule(static)
  for (int m = 0; m < M; ++m) {
    const int k = bake.texels[m];
    const double w = sigmoid(attrs.fuse[k]);
    const bool seen = aggr.confidence[k] > 0;
    double d_w = 0;
    for (int c = 0; c < 3; ++c) {
      const double pred = sigmoid(attrs.color(k, c));
      const double dc = g.colors(m, c);
      d.color(k, c) = dc * (seen ? w : 1.0) * pred * (1 - pred);
      if (seen) d_w += dc * (pred - aggr.color(k, c));
    }
    d.fuse[k] = d_w * w * (1 - w);
    const double o = sigmoid(attrs.opacity[k]);
    d.opacity[k] = g.opacities[m] * o * (1 - o);
    for (int c = 0; c < 3; ++c) {
      const double t = std::tanh(attrs.offset(k, c));
      d.offset(k, c) = g.positions(m, c) * kOffsetRange * (1 - t * t);
      const double ls = attrs.scale(k, c);
      d.scale(k, c) = (ls < kLogScaleMin || ls > log_max) ? 0.0 : g.scales(m, c) * std::exp(ls);
    }
    const Eigen::Vector4d raw = attrs.rotation.row(k).transpose();
    const double n = raw.norm();
    if (n > 0) {
      const Eigen::Vector4d r = raw / n;
      const Eigen::Vector4d gr = g.rotations.row(m).transpose();
      d.rotation.row(k) = ((gr - r * r.dot(gr)) / n).transpose();
    }
  }
  return d;
}

// ---------------------------------------------------------------------------

GaussianSet<double> animate(const CanonicalAvatar& a, const PoseExpr& theta) {
  check_theta(a, theta);
  const SkinningTransforms xf = skinning_transforms(a.joints, a.joint_parents, theta);
  const VecXd pf = pose_feature(theta);
  const int M = a.size();
  GaussianSet<double> out = a.gaussians;

#pragma omp parallel for schedule(static)
  for (int m = 0; m < M; ++m) {
    const Eigen::Vector3d x = a.gaussians.positions.row(m).transpose() +
                              a.expr_dirs.middleRows<3>(3 * m) * theta.expression +
                              a.pose_dirs.middleRows<3>(3 * m) * pf;
    const Blend b = blend_for(a, xf, m);
    out.positions.row(m) = (x + (b.delta * x + b.offset) + xf.global_translation).transpose();
    out.rotations.row(m) = (b.rot * a.gaussians.rotations.row(m).transpose()).transpose();
  }
  return out;
}

RenderGradients<double> animate_backward(const CanonicalAvatar& a, const PoseExpr& theta,
                                         const RenderGradients<double>& g) {
  check_theta(a, theta);
  const SkinningTransforms xf = skinning_transforms(a.joints, a.joint_parents, theta);
  const int M = a.size();
  require(g.positions.rows() == M, "gradient size does not match the avatar");
  RenderGradients<double> out = g;

#pragma omp parallel for schedule(static)
  for (int m = 0; m < M; ++m) {
    const Blend b = blend_for(a, xf, m);
    const Eigen::Vector3d gp = g.positions.row(m).transpose();
    out.positions.row(m) = (gp + b.delta.transpose() * gp).transpose();
    out.rotations.row(m) = (b.rot.transpose() * g.rotations.row(m).transpose()).transpose();
  }
  return out;
}

// ---------------------------------------------------------------------------

void export_avatar(const CanonicalAvatar& a, const std::filesystem::path& path) {
  const std::int64_t M = a.size(), J = a.num_joints(), E = a.num_expr(), P = a.num_pose();
  io::BlobWriter w;
  auto add = [&](const char* name, const auto& m, std::vector<std::int64_t> shape) {
    w.add(name, io::to_f32(m.data(), static_cast<std::size_t>(m.size())), shape);
  };
  // Row-major storage already matches the on-disk layout.
  add("positions", a.gaussians.positions, {M, 3});
  add("rotations", a.gaussians.rotations, {M, 4});
  add("scales", a.gaussians.scales, {M, 3});
  add("opacities", a.gaussians.opacities, {M});
  add("colors", a.gaussians.colors, {M, 3});
  add("lbs_weights", a.lbs_weights, {M, J});
  add("expr_dirs", a.expr_dirs, {M, 3, E});
  add("pose_dirs", a.pose_dirs, {M, 3, P});
  add("offsets", a.offsets, {M, 3});
  w.add_u32("texel_index", a.texel_index);

  std::vector<double> joints(a.joints.data(), a.joints.data() + a.joints.size());
  for (auto& v : joints) v = static_cast<float>(v);
  io::json header = {{"format", "uika-avatar"},
                     {"version", kAvatarVersion},
                     {"M", M},
                     {"J", J},
                     {"E", E},
                     {"P", P},
                     {"S", a.num_shape},
                     {"resolution", a.resolution},
                     {"model_hash", a.model_hash},
                     {"joints", joints},
                     {"joint_parents", a.joint_parents}};
  w.write(path, io::magic("UIKAAV1"), header);
}

CanonicalAvatar import_avatar(const std::filesystem::path& path) {
  const io::BlobReader r(path, io::magic("UIKAAV1"));
  const io::json& h = r.header();
  const int version = h.value("version", -1);
  if (version != kAvatarVersion)
    throw FormatError(path.string() + ": unsupported avatar version " + std::to_string(version) + " (expected " +
                      std::to_string(kAvatarVersion) + ")");
  CanonicalAvatar a;
  std::int64_t M = 0, J = 0, E = 0, P = 0;
  try {
    M = h.at("M").get<std::int64_t>();
    J = h.at("J").get<std::int64_t>();
    E = h.at("E").get<std::int64_t>();
    P = h.at("P").get<std::int64_t>();
    a.num_shape = h.at("S").get<int>();
    a.resolution = h.at("resolution").get<int>();
    a.model_hash = h.at("model_hash").get<std::string>();
    a.joint_parents = h.at("joint_parents").get<std::vector<int>>();
    const auto joints = h.at("joints").get<std::vector<double>>();
    if (static_cast<std::int64_t>(joints.size()) != 3 * J || static_cast<std::int64_t>(a.joint_parents.size()) != J)
      throw FormatError(path.string() + ": joint arrays do not match J");
    a.joints = Eigen::Map<const MatX3d>(joints.data(), J, 3);
  } catch (const io::json::exception& e) {
    throw FormatError(path.string() + ": corrupt avatar header: " + e.what());
  }
  auto load = [&](const char* name, auto& m, Eigen::Index rows, Eigen::Index cols) {
    const auto v = r.floats(name);
    if (static_cast<Eigen::Index>(v.size()) != rows * cols)
      throw FormatError(path.string() + ": block '" + name + "' has " + std::to_string(v.size()) + " values, expected " +
                        std::to_string(rows * cols));
    m.resize(rows, cols);
    for (Eigen::Index i = 0; i < rows * cols; ++i) m.data()[i] = v[i];
  };
  a.gaussians.resize(M);
  load("positions", a.gaussians.positions, M, 3);
  load("rotations", a.gaussians.rotations, M, 4);
  load("scales", a.gaussians.scales, M, 3);
  load("opacities", a.gaussians.opacities, M, 1);
  load("colors", a.gaussians.colors, M, 3);
  load("lbs_weights", a.lbs_weights, M, J);
  load("expr_dirs", a.expr_dirs, 3 * M, E);
  load("pose_dirs", a.pose_dirs, 3 * M, P);
  load("offsets", a.offsets, M, 3);
  a.texel_index = r.u32("texel_index");
  if (static_cast<std::int64_t>(a.texel_index.size()) != M)
    throw FormatError(path.string() + ": texel_index length does not match M");
  return a;
}

}  // namespace uika
