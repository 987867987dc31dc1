#include "uika/headmodel.hpp"

#include "uika/io.hpp"
#include "uika/random.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>

namespace uika {

namespace {

constexpr double kBlendshapeAmplitude = 0.05;
constexpr double kPoseCorrectiveAmplitude = 0.01;
constexpr double kHoleAngle = 0.62;  // radians, neck opening around kHoleDir

const Eigen::Vector3d kHoleDir = Eigen::Vector3d(0.0, -0.78, -0.62).normalized();

struct Icosphere {
  std::vector<Eigen::Vector3d> points;
  std::vector<Eigen::Vector3i> faces;
};

Icosphere make_icosphere(int level) {
  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  Icosphere s;
  s.points = {{-1, t, 0}, {1, t, 0}, {-1, -t, 0}, {1, -t, 0}, {0, -1, t}, {0, 1, t},
              {0, -1, -t}, {0, 1, -t}, {t, 0, -1}, {t, 0, 1}, {-t, 0, -1}, {-t, 0, 1}};
  for (auto& p : s.points) p.normalize();
  s.faces = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11}, {1, 5, 9}, {5, 11, 4},
             {11, 10, 2}, {10, 7, 6}, {7, 1, 8},  {3, 9, 4},  {3, 4, 2},   {3, 2, 6}, {3, 6, 8},
             {3, 8, 9},  {4, 9, 5},  {2, 4, 11}, {6, 2, 10}, {8, 6, 7},   {9, 8, 1}};
  for (int l = 0; l < level; ++l) {
    std::map<std::pair<int, int>, int> cache;
    auto midpoint = [&](int a, int b) {
      const auto key = std::minmax(a, b);
      auto it = cache.find(key);
      if (it != cache.end()) return it->second;
      s.points.push_back((s.points[a] + s.points[b]).normalized());
      const int id = static_cast<int>(s.points.size()) - 1;
      cache.emplace(key, id);
      return id;
    };
    std::vector<Eigen::Vector3i> next;
    next.reserve(s.faces.size() * 4);
    for (const auto& f : s.faces) {
      const int a = midpoint(f[0], f[1]);
      const int b = midpoint(f[1], f[2]);
      const int c = midpoint(f[2], f[0]);
      next.emplace_back(f[0], a, c);
      next.emplace_back(f[1], b, a);
      next.emplace_back(f[2], c, b);
      next.emplace_back(a, b, c);
    }
    s.faces = std::move(next);
  }
  return s;
}

/// Smooth field: sum of a few Gaussian bumps on the base sphere, each pushing
/// along its own direction, rescaled to the given peak amplitude.
VecXd smooth_field(const std::vector<Eigen::Vector3d>& sphere, Rng& rng, const Eigen::Vector3d& bias,
                   double bias_weight, double amplitude) {
  const int bumps = 3;
  std::vector<Eigen::Vector3d> centers, dirs;
  std::vector<double> widths;
  for (int b = 0; b < bumps; ++b) {
    Eigen::Vector3d c(rng.normal(), rng.normal(), rng.normal());
    c = (c.normalized() + bias_weight * bias).normalized();
    Eigen::Vector3d d(rng.normal(), rng.normal(), rng.normal());
    centers.push_back(c);
    dirs.push_back(d.normalized());
    widths.push_back(rng.uniform(0.3, 0.6));
  }
  VecXd field = VecXd::Zero(3 * static_cast<Eigen::Index>(sphere.size()));
  double peak = 0.0;
  for (std::size_t v = 0; v < sphere.size(); ++v) {
    Eigen::Vector3d acc = Eigen::Vector3d::Zero();
    for (int b = 0; b < bumps; ++b) {
      const double d2 = (sphere[v] - centers[b]).squaredNorm();
      acc += std::exp(-d2 / (2.0 * widths[b] * widths[b])) * dirs[b];
    }
    field.segment<3>(3 * static_cast<Eigen::Index>(v)) = acc;
    peak = std::max(peak, acc.norm());
  }
  if (peak > 0.0) field *= amplitude / peak;
  return field;
}

double to_f32_grid(double x) { return static_cast<double>(static_cast<float>(x)); }

template <typename Derived>
void round_to_f32(Eigen::DenseBase<Derived>& m) {
  m = m.unaryExpr([](double x) { return to_f32_grid(x); });
}

}  // namespace

// ---------------------------------------------------------------------------

void HeadModel::validate() const {
  const int V = num_vertices();
  const int J = num_joints();
  require(V > 0 && num_triangles() > 0, "head model has no geometry");
  require(shape_dirs.rows() == 3 * V && expr_dirs.rows() == 3 * V && pose_dirs.rows() == 3 * V,
          "blendshape bases must have 3V rows");
  require(pose_dirs.cols() == 9 * (J - 1), "pose_dirs must have 9 (J - 1) columns");
  require(static_cast<int>(joint_parents.size()) == J, "joint_parents size mismatch");
  require(lbs_weights.rows() == V && lbs_weights.cols() == J, "lbs_weights must be V x J");
  require(uv.rows() == V, "uv must be V x 2");
  require(J >= 1 && joint_parents[0] == -1, "joint 0 must be the root");
  for (int j = 1; j < J; ++j)
    require(joint_parents[j] >= 0 && joint_parents[j] < j, "joint parents must precede children");
  for (int t = 0; t < num_triangles(); ++t)
    for (int k = 0; k < 3; ++k)
      require(triangles(t, k) >= 0 && triangles(t, k) < V, "triangle index out of range");
  for (int v = 0; v < V; ++v) {
    require((lbs_weights.row(v).array() >= 0.0).all(), "negative skinning weight at vertex " + std::to_string(v));
    require(std::abs(lbs_weights.row(v).sum() - 1.0) <= 1e-6, "skinning weights must sum to 1 at vertex " + std::to_string(v));
    require(uv(v, 0) >= 0.0 && uv(v, 0) <= 1.0 && uv(v, 1) >= 0.0 && uv(v, 1) <= 1.0, "uv out of [0,1]");
  }
}

PoseExpr PoseExpr::zero(int num_shape, int num_expr, int num_joints) {
  PoseExpr p;
  p.shape = VecXd::Zero(num_shape);
  p.expression = VecXd::Zero(num_expr);
  p.joint_rotations.assign(static_cast<std::size_t>(num_joints), Eigen::Quaterniond::Identity());
  return p;
}

PoseExpr PoseExpr::zero(const HeadModel& model) {
  return zero(model.num_shape(), model.num_expr(), model.num_joints());
}

void PoseExpr::check_against(int num_shape, int num_expr, int num_joints) const {
  if (shape.size() != num_shape)
    throw ParameterError("shape has " + std::to_string(shape.size()) + " coefficients, expected " + std::to_string(num_shape));
  if (expression.size() != num_expr)
    throw ParameterError("expression has " + std::to_string(expression.size()) + " coefficients, expected " +
                         std::to_string(num_expr));
  if (static_cast<int>(joint_rotations.size()) != num_joints)
    throw ParameterError("joint_rotations has " + std::to_string(joint_rotations.size()) + " entries, expected " +
                         std::to_string(num_joints));
  for (std::size_t j = 0; j < joint_rotations.size(); ++j)
    if (std::abs(joint_rotations[j].norm() - 1.0) > 1e-6)
      throw ParameterError("joint_rotations[" + std::to_string(j) + "] is not a unit quaternion");
}

// ---------------------------------------------------------------------------

HeadModel generate_toy_head(const ToyHeadConfig& cfg) {
  if (cfg.num_shape < 1 || cfg.num_expr < 1) throw ParameterError("S and E must be >= 1");
  if (cfg.num_joints < 2) throw ParameterError("J must be >= 2");
  if (cfg.subdivision < 0 || cfg.subdivision > 5) throw ParameterError("subdivision must be in [0, 5]");

  Rng rng(cfg.seed);
  const Icosphere sphere = make_icosphere(cfg.subdivision);
  const int V = static_cast<int>(sphere.points.size());

  HeadModel m;
  const Eigen::Vector3d proportions(0.72 * rng.uniform(0.97, 1.03), 0.9 * rng.uniform(0.97, 1.03),
                                    0.8 * rng.uniform(0.97, 1.03));
  const Eigen::Vector3d nose_dir = Eigen::Vector3d(0.0, -0.05, 1.0).normalized();
  m.vertices.resize(V, 3);
  for (int v = 0; v < V; ++v) {
    const Eigen::Vector3d& p = sphere.points[v];
    Eigen::Vector3d x = p.cwiseProduct(proportions);
    x += 0.12 * std::exp(-(p - nose_dir).squaredNorm() / 0.02) * nose_dir;
    m.vertices.row(v) = x.transpose();
  }

  // Open the mesh around the neck so the UV atlas can be a disc.
  std::vector<bool> in_hole(V);
  for (int v = 0; v < V; ++v) in_hole[v] = std::acos(std::clamp(sphere.points[v].dot(kHoleDir), -1.0, 1.0)) < kHoleAngle;
  std::vector<Eigen::Vector3i> faces;
  for (const auto& f : sphere.faces)
    if (!in_hole[f[0]] && !in_hole[f[1]] && !in_hole[f[2]]) faces.push_back(f);
  m.triangles.resize(static_cast<Eigen::Index>(faces.size()), 3);
  for (std::size_t t = 0; t < faces.size(); ++t) m.triangles.row(static_cast<Eigen::Index>(t)) = faces[t].transpose();

  // Azimuthal projection about the face center, radially rescaled so the
  // opening's rim lands on the circle of radius 1/2.
  const Eigen::Vector3d center = -kHoleDir;
  const Eigen::Vector3d e1 = (Eigen::Vector3d::UnitX() - Eigen::Vector3d::UnitX().dot(center) * center).normalized();
  const Eigen::Vector3d e2 = center.cross(e1);
  std::vector<double> theta(V), phi(V);
  for (int v = 0; v < V; ++v) {
    const Eigen::Vector3d& p = sphere.points[v];
    theta[v] = std::acos(std::clamp(p.dot(center), -1.0, 1.0));
    phi[v] = std::atan2(p.dot(e2), p.dot(e1));
  }
  std::map<std::pair<int, int>, int> edge_use;
  for (const auto& f : faces)
    for (int k = 0; k < 3; ++k) ++edge_use[std::minmax(f[k], f[(k + 1) % 3])];
  std::vector<std::pair<double, double>> rim;  // (phi, theta)
  std::vector<bool> on_rim(V, false);
  for (const auto& [edge, uses] : edge_use) {
    if (uses != 1) continue;
    for (int v : {edge.first, edge.second}) {
      if (on_rim[v]) continue;
      on_rim[v] = true;
      rim.emplace_back(phi[v], theta[v]);
    }
  }
  std::sort(rim.begin(), rim.end());
  auto rim_theta = [&](double ph) {
    if (rim.empty()) return std::numbers::pi;
    auto hi = std::lower_bound(rim.begin(), rim.end(), std::make_pair(ph, -1.0));
    const auto& b = hi == rim.end() ? rim.front() : *hi;
    const auto& a = hi == rim.begin() ? rim.back() : *(hi - 1);
    double span = b.first - a.first;
    double off = ph - a.first;
    if (span <= 0.0) span += 2.0 * std::numbers::pi;
    if (off < 0.0) off += 2.0 * std::numbers::pi;
    const double s = span > 0.0 ? std::clamp(off / span, 0.0, 1.0) : 0.0;
    return (1.0 - s) * a.second + s * b.second;
  };
  m.uv.resize(V, 2);
  for (int v = 0; v < V; ++v) {
    const double r = on_rim[v] ? 0.5 : std::min(0.5, 0.5 * theta[v] / rim_theta(phi[v]));
    m.uv(v, 0) = std::clamp(0.5 + r * std::cos(phi[v]), 0.0, 1.0);
    m.uv(v, 1) = std::clamp(0.5 - r * std::sin(phi[v]), 0.0, 1.0);
  }

  // Skeleton: root -> neck -> {jaw, eyes, extras}.
  const int J = cfg.num_joints;
  m.joints.resize(J, 3);
  m.joint_parents.assign(J, 1);
  m.joint_parents[0] = -1;
  m.joint_parents[1] = 0;
  m.joints.row(0) << 0.0, -0.6, -0.15;
  m.joints.row(1) << 0.0, -0.3, -0.1;
  std::vector<Eigen::Vector3d> anchors = {{0.0, -0.8, -0.3}, {0.0, 0.0, 0.0}};
  std::vector<double> sigmas = {0.25, 0.0};
  if (J > 2) {
    m.joints.row(2) << 0.0, -0.15, 0.15;
    anchors.emplace_back(0.0, -0.55, 0.45);
    sigmas.push_back(0.22);
  }
  if (J > 3) {
    m.joints.row(3) << 0.0, 0.2, 0.35;
    anchors.emplace_back(0.0, 0.15, 0.72);
    sigmas.push_back(0.12);
  }
  for (int j = 4; j < J; ++j) {
    Eigen::Vector3d p(rng.normal(), rng.normal(), rng.normal());
    p = p.normalized().cwiseProduct(proportions);
    m.joints.row(j) = (0.5 * p).transpose();
    anchors.push_back(p);
    sigmas.push_back(0.2);
  }
  m.lbs_weights.resize(V, J);
  for (int v = 0; v < V; ++v) {
    const Eigen::Vector3d x = m.vertices.row(v).transpose();
    double total = 0.0;
    for (int j = 0; j < J; ++j) {
      double w = j == 1 ? 0.6 : std::exp(-(x - anchors[j]).squaredNorm() / (2.0 * sigmas[j] * sigmas[j]));
      if (j == 2) w *= 1.5;
      m.lbs_weights(v, j) = w;
      total += w;
    }
    m.lbs_weights.row(v) /= total;
  }

  auto basis = [&](int count, const Eigen::Vector3d& bias, double bias_weight, double amplitude) {
    MatXd out(3 * V, count);
    for (int k = 0; k < count; ++k) out.col(k) = smooth_field(sphere.points, rng, bias, bias_weight, amplitude);
    return out;
  };
  m.shape_dirs = basis(cfg.num_shape, Eigen::Vector3d::Zero(), 0.0, kBlendshapeAmplitude);
  m.expr_dirs = basis(cfg.num_expr, Eigen::Vector3d(0.0, -0.4, 1.0).normalized(), 1.0, kBlendshapeAmplitude);
  m.pose_dirs = basis(9 * (J - 1), Eigen::Vector3d::Zero(), 0.0, kPoseCorrectiveAmplitude);

  // Store float32-representable values so the on-disk format round-trips.
  round_to_f32(m.vertices);
  round_to_f32(m.shape_dirs);
  round_to_f32(m.expr_dirs);
  round_to_f32(m.pose_dirs);
  round_to_f32(m.joints);
  round_to_f32(m.lbs_weights);
  round_to_f32(m.uv);
  m.validate();
  return m;
}

// ---------------------------------------------------------------------------

SkinningTransforms skinning_transforms(const MatX3d& joints, const std::vector<int>& parents, const PoseExpr& theta) {
  const int J = static_cast<int>(joints.rows());
  require(static_cast<int>(theta.joint_rotations.size()) == J, "joint rotation count mismatch");
  SkinningTransforms xf;
  xf.rotation.resize(J);
  xf.translation.resize(J);
  for (int j = 0; j < J; ++j) {
    const Eigen::Matrix3d Rj = theta.joint_rotations[j].normalized().toRotationMatrix();
    const Eigen::Vector3d cj = joints.row(j).transpose();
    // Local rotation about the joint: x -> Rj (x - cj) + cj.
    const Eigen::Vector3d local_t = cj - Rj * cj;
    if (parents[j] < 0) {
      xf.rotation[j] = Rj;
      xf.translation[j] = local_t;
    } else {
      const int p = parents[j];
      xf.rotation[j] = xf.rotation[p] * Rj;
      xf.translation[j] = xf.rotation[p] * local_t + xf.translation[p];
    }
  }
  xf.global_translation = theta.translation;
  return xf;
}

VecXd pose_feature(const PoseExpr& theta) {
  const int J = static_cast<int>(theta.joint_rotations.size());
  VecXd f(9 * std::max(J - 1, 0));
  for (int j = 1; j < J; ++j) {
    const Eigen::Matrix3d d = theta.joint_rotations[j].normalized().toRotationMatrix() - Eigen::Matrix3d::Identity();
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) f[9 * (j - 1) + 3 * r + c] = d(r, c);
  }
  return f;
}

Eigen::Vector3d skin_point(const SkinningTransforms& xf, const Eigen::Ref<const VecXd>& weights,
                           const Eigen::Vector3d& x) {
  Eigen::Matrix3d delta;
  Eigen::Vector3d offset;
  xf.blend(weights, delta, offset);
  return x + (delta * x + offset) + xf.global_translation;
}

MatX3d pose_mesh(const HeadModel& model, const PoseExpr& theta) {
  theta.check_against(model.num_shape(), model.num_expr(), model.num_joints());
  const int V = model.num_vertices();
  VecXd offsets = model.shape_dirs * theta.shape + model.expr_dirs * theta.expression +
                  model.pose_dirs * pose_feature(theta);
  const SkinningTransforms xf = skinning_transforms(model.joints, model.joint_parents, theta);
  MatX3d out(V, 3);
  for (int v = 0; v < V; ++v) {
    const Eigen::Vector3d x = model.vertices.row(v).transpose() + offsets.segment<3>(3 * v);
    out.row(v) = skin_point(xf, model.lbs_weights.row(v).transpose(), x).transpose();
  }
  return out;
}

PoseExpr compose_rigid(const MatX3d& joints, const PoseExpr& theta, const Eigen::Matrix3d& R, const Eigen::Vector3d& t) {
  require(!theta.joint_rotations.empty(), "pose has no joints");
  PoseExpr out = theta;
  const Eigen::Quaterniond qR(R);
  out.joint_rotations[0] = (qR * theta.joint_rotations[0]).normalized();
  const Eigen::Vector3d root = joints.row(0).transpose();
  out.translation = R * root - root + R * theta.translation + t;
  return out;
}

PoseExpr compose_rigid(const HeadModel& model, const PoseExpr& theta, const Eigen::Matrix3d& R, const Eigen::Vector3d& t) {
  return compose_rigid(model.joints, theta, R, t);
}

Eigen::Matrix3d polar_rotation(const Eigen::Matrix3d& m) {
  Eigen::Matrix3d q = m;
  for (int it = 0; it < 50; ++it) {
    const double det = q.determinant();
    if (!(det > 1e-12)) break;
    const Eigen::Matrix3d next = 0.5 * (q + q.inverse().transpose());
    const double change = (next - q).cwiseAbs().maxCoeff();
    q = next;
    if (change < 1e-15) return q;
  }
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d u = svd.matrixU();
  if ((u * svd.matrixV().transpose()).determinant() < 0.0) u.col(2) *= -1.0;
  return u * svd.matrixV().transpose();
}

// ---------------------------------------------------------------------------

int UvRasterization::valid_count() const {
  return static_cast<int>(std::count(valid_mask.begin(), valid_mask.end(), std::uint8_t{1}));
}

std::vector<int> UvRasterization::valid_texels() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < valid_mask.size(); ++i)
    if (valid_mask[i]) out.push_back(static_cast<int>(i));
  return out;
}

UvRasterization rasterize_uv(const HeadModel& model, int R) {
  if (R < 16) throw ParameterError("UV resolution must be >= 16");
  UvRasterization out;
  out.resolution = R;
  const std::size_t n = std::size_t(R) * R;
  out.triangle_id.assign(n, -1);
  out.barycentric = MatX3d::Zero(static_cast<Eigen::Index>(n), 3);
  out.valid_mask.assign(n, 0);

  const int T = model.num_triangles();
  struct Tri {
    Eigen::Vector2d a, b, c;
    double area2;
    int i0, i1, j0, j1;
    bool skip;
  };
  std::vector<Tri> tris(T);
  for (int t = 0; t < T; ++t) {
    Tri& tr = tris[t];
    tr.a = model.uv.row(model.triangles(t, 0)).transpose();
    tr.b = model.uv.row(model.triangles(t, 1)).transpose();
    tr.c = model.uv.row(model.triangles(t, 2)).transpose();
    const Eigen::Vector2d ab = tr.b - tr.a, ac = tr.c - tr.a;
    tr.area2 = ab.x() * ac.y() - ab.y() * ac.x();
    tr.skip = std::abs(tr.area2) * 0.5 < 1e-12;
    if (tr.skip) {
      ++out.degenerate_triangles;
      continue;
    }
    const double umin = std::min({tr.a.x(), tr.b.x(), tr.c.x()}), umax = std::max({tr.a.x(), tr.b.x(), tr.c.x()});
    const double vmin = std::min({tr.a.y(), tr.b.y(), tr.c.y()}), vmax = std::max({tr.a.y(), tr.b.y(), tr.c.y()});
    tr.i0 = std::max(0, static_cast<int>(std::floor(umin * R - 0.5)));
    tr.i1 = std::min(R - 1, static_cast<int>(std::ceil(umax * R - 0.5)));
    tr.j0 = std::max(0, static_cast<int>(std::floor(vmin * R - 0.5)));
    tr.j1 = std::min(R - 1, static_cast<int>(std::ceil(vmax * R - 0.5)));
  }

  // Rows are independent; triangles are visited in ascending order so the
  // lowest index wins on shared edges regardless of scheduling.
#pragma omp parallel for schedule(static)
  for (int j = 0; j < R; ++j) {
    const double v = (j + 0.5) / R;
    for (int t = 0; t < T; ++t) {
      const Tri& tr = tris[t];
      if (tr.skip || j < tr.j0 || j > tr.j1) continue;
      for (int i = tr.i0; i <= tr.i1; ++i) {
        const std::size_t idx = std::size_t(j) * R + i;
        if (out.triangle_id[idx] >= 0) continue;
        const Eigen::Vector2d p((i + 0.5) / R, v);
        const Eigen::Vector2d pa = tr.a - p, pb = tr.b - p, pc = tr.c - p;
        const double w0 = (pb.x() * pc.y() - pb.y() * pc.x()) / tr.area2;
        const double w1 = (pc.x() * pa.y() - pc.y() * pa.x()) / tr.area2;
        const double w2 = (pa.x() * pb.y() - pa.y() * pb.x()) / tr.area2;
        constexpr double eps = 1e-12;
        if (w0 < -eps || w1 < -eps || w2 < -eps) continue;
        const double s = w0 + w1 + w2;
        out.triangle_id[idx] = t;
        out.valid_mask[idx] = 1;
        out.barycentric.row(static_cast<Eigen::Index>(idx)) << w0 / s, w1 / s, w2 / s;
      }
    }
  }
  return out;
}

SkinningBake bake_skinning(const HeadModel& model, const UvRasterization& rast, const std::optional<VecXd>& shape) {
  require(static_cast<int>(rast.triangle_id.size()) == rast.resolution * rast.resolution, "rasterization size mismatch");
  const int E = model.num_expr(), P = model.num_pose(), J = model.num_joints();
  VecXd shape_offsets = VecXd::Zero(3 * model.num_vertices());
  if (shape) {
    require(shape->size() == model.num_shape(), "shape coefficient count mismatch");
    shape_offsets = model.shape_dirs * *shape;
  }
  SkinningBake bake;
  bake.texels = rast.valid_texels();
  const int K = bake.size();
  bake.rest.resize(K, 3);
  bake.normals.resize(K, 3);
  bake.lbs_weights.resize(K, J);
  bake.expr_dirs.resize(3 * K, E);
  bake.pose_dirs.resize(3 * K, P);
  for (int k = 0; k < K; ++k) {
    const int texel = bake.texels[k];
    const int t = rast.triangle_id[texel];
    require(t >= 0 && t < model.num_triangles(), "rasterization does not belong to this model");
    const Eigen::Vector3d w = rast.barycentric.row(texel).transpose();
    Eigen::Vector3d corner[3];
    Eigen::Vector3d rest = Eigen::Vector3d::Zero();
    bake.lbs_weights.row(k).setZero();
    bake.expr_dirs.middleRows(3 * k, 3).setZero();
    bake.pose_dirs.middleRows(3 * k, 3).setZero();
    for (int c = 0; c < 3; ++c) {
      const int v = model.triangles(t, c);
      corner[c] = model.vertices.row(v).transpose() + shape_offsets.segment<3>(3 * v);
      rest += w[c] * corner[c];
      bake.lbs_weights.row(k) += w[c] * model.lbs_weights.row(v);
      bake.expr_dirs.middleRows(3 * k, 3) += w[c] * model.expr_dirs.middleRows(3 * v, 3);
      bake.pose_dirs.middleRows(3 * k, 3) += w[c] * model.pose_dirs.middleRows(3 * v, 3);
    }
    bake.rest.row(k) = rest.transpose();
    bake.normals.row(k) = (corner[1] - corner[0]).cross(corner[2] - corner[0]).normalized().transpose();
    const double total = bake.lbs_weights.row(k).sum();
    if (std::abs(total - 1.0) > 1e-6) bake.lbs_weights.row(k) /= total;
  }
  return bake;
}

// ---------------------------------------------------------------------------

namespace {
const auto kHeadMagic = io::magic("UIKAHM1");
constexpr int kHeadVersion = 1;

template <typename Derived>
std::vector<float> flat_f32(const Eigen::DenseBase<Derived>& m) {
  std::vector<float> out;
  out.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) out.push_back(static_cast<float>(m(r, c)));
  return out;
}

template <typename Mat>
void fill_from(Mat& m, const std::vector<float>& v, Eigen::Index rows, Eigen::Index cols, const std::string& name) {
  if (static_cast<Eigen::Index>(v.size()) != rows * cols) throw FormatError("block '" + name + "' has wrong size");
  m.resize(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = static_cast<typename Mat::Scalar>(v[r * cols + c]);
}
}  // namespace

void save_head_model(const HeadModel& model, const std::filesystem::path& path) {
  model.validate();
  const std::int64_t V = model.num_vertices(), T = model.num_triangles(), S = model.num_shape(),
                     E = model.num_expr(), P = model.num_pose(), J = model.num_joints();
  io::BlobWriter w;
  w.add("vertices", flat_f32(model.vertices), {V, 3});
  w.add("triangles", flat_f32(model.triangles.cast<double>()), {T, 3});
  w.add("shape_dirs", flat_f32(model.shape_dirs), {3 * V, S});
  w.add("expr_dirs", flat_f32(model.expr_dirs), {3 * V, E});
  w.add("pose_dirs", flat_f32(model.pose_dirs), {3 * V, P});
  w.add("joints", flat_f32(model.joints), {J, 3});
  w.add("lbs_weights", flat_f32(model.lbs_weights), {V, J});
  w.add("uv", flat_f32(model.uv), {V, 2});
  io::json header = {{"format", "uika-head-model"}, {"version", kHeadVersion}, {"V", V}, {"T", T}, {"S", S},
                     {"E", E}, {"P", P}, {"J", J}, {"joint_parents", model.joint_parents}};
  w.write(path, kHeadMagic, header);
}

HeadModel load_head_model(const std::filesystem::path& path) {
  io::BlobReader r(path, kHeadMagic);
  const auto& h = r.header();
  const int version = h.value("version", -1);
  if (version != kHeadVersion)
    throw FormatError(path.string() + ": unsupported head model version " + std::to_string(version));
  const Eigen::Index V = h.at("V"), T = h.at("T"), S = h.at("S"), E = h.at("E"), P = h.at("P"), J = h.at("J");
  HeadModel m;
  fill_from(m.vertices, r.floats("vertices"), V, 3, "vertices");
  MatXd tri;
  fill_from(tri, r.floats("triangles"), T, 3, "triangles");
  m.triangles = tri.cast<int>();
  fill_from(m.shape_dirs, r.floats("shape_dirs"), 3 * V, S, "shape_dirs");
  fill_from(m.expr_dirs, r.floats("expr_dirs"), 3 * V, E, "expr_dirs");
  fill_from(m.pose_dirs, r.floats("pose_dirs"), 3 * V, P, "pose_dirs");
  fill_from(m.joints, r.floats("joints"), J, 3, "joints");
  fill_from(m.lbs_weights, r.floats("lbs_weights"), V, J, "lbs_weights");
  fill_from(m.uv, r.floats("uv"), V, 2, "uv");
  m.joint_parents = h.at("joint_parents").get<std::vector<int>>();
  m.validate();
  return m;
}

}  // namespace uika
