#include "uika/fitting.hpp"

#include "uika/io.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <numeric>
#include <ostream>

namespace uika {

using nlohmann::json;

namespace {

constexpr int kSsimRadius = 5;
constexpr double kSsimSigma = 1.5;
constexpr double kSsimC1 = 0.01 * 0.01;
constexpr double kSsimC2 = 0.03 * 0.03;

void check_pair(const Image& pred, const Image& gt) {
  require(pred.width == gt.width && pred.height == gt.height, "loss: image sizes differ");
  require(pred.data.size() == pred.pixel_count() * 3 && gt.data.size() == gt.pixel_count() * 3,
          "loss: image buffers have the wrong length");
}

std::array<double, 2 * kSsimRadius + 1> ssim_window() {
  std::array<double, 2 * kSsimRadius + 1> w{};
  double sum = 0;
  for (int i = -kSsimRadius; i <= kSsimRadius; ++i) sum += w[i + kSsimRadius] = std::exp(-0.5 * i * i / (kSsimSigma * kSsimSigma));
  for (double& v : w) v /= sum;
  return w;
}

/// Separable zero-padded Gaussian filter of one H x W plane. Self-adjoint.
std::vector<double> blur(const std::vector<double>& in, int W, int H) {
  static const auto w = ssim_window();
  std::vector<double> tmp(in.size(), 0.0), out(in.size(), 0.0);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double s = 0;
      for (int k = -kSsimRadius; k <= kSsimRadius; ++k)
        if (x + k >= 0 && x + k < W) s += w[k + kSsimRadius] * in[std::size_t(y) * W + x + k];
      tmp[std::size_t(y) * W + x] = s;
    }
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double s = 0;
      for (int k = -kSsimRadius; k <= kSsimRadius; ++k)
        if (y + k >= 0 && y + k < H) s += w[k + kSsimRadius] * tmp[std::size_t(y + k) * W + x];
      out[std::size_t(y) * W + x] = s;
    }
  return out;
}

json precision_json(Precision p) { return p == Precision::kFloat ? "float" : "double"; }

Precision precision_from_json(const json& j) {
  const std::string s = j.get<std::string>();
  if (s == "float") return Precision::kFloat;
  if (s == "double") return Precision::kDouble;
  throw ParameterError("precision must be \"float\" or \"double\", got \"" + s + "\"");
}

/// Rejects keys not in `known`.
void check_keys(const json& j, std::initializer_list<const char*> known, const std::string& what) {
  require(j.is_object(), what + ": expected a JSON object");
  for (const auto& [key, _] : j.items())
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; }))
      throw ParameterError(what + ": unknown field '" + key + "'");
}

void add_into(RenderGradients<double>& acc, const RenderGradients<double>& g, double s) {
  if (acc.positions.size() == 0) {
    acc.positions = g.positions * s;
    acc.rotations = g.rotations * s;
    acc.scales = g.scales * s;
    acc.opacities = g.opacities * s;
    acc.colors = g.colors * s;
    return;
  }
  acc.positions += g.positions * s;
  acc.rotations += g.rotations * s;
  acc.scales += g.scales * s;
  acc.opacities += g.opacities * s;
  acc.colors += g.colors * s;
}

RenderGradients<double> zero_gradients(int M) {
  RenderGradients<double> g;
  g.positions = MatX3d::Zero(M, 3);
  g.rotations = MatX4<double>::Zero(M, 4);
  g.scales = MatX3d::Zero(M, 3);
  g.opacities = VecXd::Zero(M);
  g.colors = MatX3d::Zero(M, 3);
  return g;
}

template <typename Scalar>
std::pair<Image, std::vector<Scalar>> render_as(const GaussianSet<double>& g, const Camera<double>& cam,
                                                const Eigen::Vector3d& bg) {
  const RenderOutput<Scalar> r = render(g.cast<Scalar>(), cam.cast<Scalar>(), bg.cast<Scalar>().eval());
  return {r.to_image(), r.color};
}

RenderGradients<double> backward_as(Precision p, const GaussianSet<double>& g, const Camera<double>& cam,
                                    const Eigen::Vector3d& bg, const std::vector<double>& grad) {
  if (p == Precision::kDouble) return render_backward(g, cam, bg, grad);
  const std::vector<float> gf(grad.begin(), grad.end());
  const RenderGradients<float> r = render_backward(g.cast<float>(), cam.cast<float>(), bg.cast<float>().eval(), gf);
  RenderGradients<double> out;
  out.positions = r.positions.cast<double>();
  out.rotations = r.rotations.cast<double>();
  out.scales = r.scales.cast<double>();
  out.opacities = r.opacities.cast<double>();
  out.colors = r.colors.cast<double>();
  return out;
}

/// Rounds every entry to the nearest float32.
void round_to_float(MatXd& m) { m = m.cast<float>().cast<double>(); }

std::vector<int> sample_distinct(Rng& rng, const std::vector<int>& pool, int n) {
  std::vector<int> p = pool;
  n = std::min<int>(n, static_cast<int>(p.size()));
  for (int i = 0; i < n; ++i) std::swap(p[i], p[rng.uniform_int(i, static_cast<int>(p.size()) - 1)]);
  p.resize(n);
  return p;
}

double elapsed_ms(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

// ---------------------------------------------------------------------------

void LossWeights::validate() const {
  require(l1 >= 0 && lpips >= 0 && ssim >= 0 && reg >= 0, "loss weights must be non-negative");
  require(epsilon > 0, "loss epsilon must be positive");
}

json LossWeights::to_json() const {
  return {{"l1", l1}, {"lpips", lpips}, {"ssim", ssim}, {"reg", reg}, {"epsilon", epsilon}, {"literal_reg", literal_reg}};
}

LossWeights LossWeights::from_json(const json& j) {
  check_keys(j, {"l1", "lpips", "ssim", "reg", "epsilon", "literal_reg"}, "weights");
  LossWeights w;
  w.l1 = j.value("l1", w.l1);
  w.lpips = j.value("lpips", w.lpips);
  w.ssim = j.value("ssim", w.ssim);
  w.reg = j.value("reg", w.reg);
  w.epsilon = j.value("epsilon", w.epsilon);
  w.literal_reg = j.value("literal_reg", w.literal_reg);
  w.validate();
  return w;
}

LossValue loss_l1(const Image& pred, const Image& gt, const std::vector<std::uint8_t>* mask) {
  check_pair(pred, gt);
  require(!mask || mask->size() == pred.pixel_count(), "loss_l1: mask size differs from the image");
  LossValue out;
  out.grad.assign(pred.data.size(), 0.0);
  std::size_t count = 0;
  for (std::size_t p = 0; p < pred.pixel_count(); ++p)
    if (!mask || (*mask)[p]) ++count;
  if (count == 0) return out;
  const double inv = 1.0 / (3.0 * static_cast<double>(count));
  for (std::size_t p = 0; p < pred.pixel_count(); ++p) {
    if (mask && !(*mask)[p]) continue;
    for (int c = 0; c < 3; ++c) {
      const double d = pred.data[3 * p + c] - gt.data[3 * p + c];
      out.value += std::abs(d);
      out.grad[3 * p + c] = d > 0 ? inv : (d < 0 ? -inv : 0.0);
    }
  }
  out.value *= inv;
  return out;
}

LossValue loss_ssim(const Image& pred, const Image& gt) {
  check_pair(pred, gt);
  const int W = pred.width, H = pred.height;
  const std::size_t n = pred.pixel_count();
  LossValue out;
  out.grad.assign(pred.data.size(), 0.0);
  const double inv = 1.0 / (3.0 * static_cast<double>(n));
  double ssim_sum = 0;
  for (int c = 0; c < 3; ++c) {
    std::vector<double> x(n), y(n), xx(n), yy(n), xy(n);
    for (std::size_t p = 0; p < n; ++p) {
      x[p] = pred.data[3 * p + c];
      y[p] = gt.data[3 * p + c];
      xx[p] = x[p] * x[p];
      yy[p] = y[p] * y[p];
      xy[p] = x[p] * y[p];
    }
    const auto mx = blur(x, W, H), my = blur(y, W, H), exx = blur(xx, W, H), eyy = blur(yy, W, H),
               exy = blur(xy, W, H);
    // Per-pixel partials of -S / count with respect to mu_x, sigma_x^2, sigma_xy.
    std::vector<double> d_mu(n), d_var(n), d_cov(n);
    for (std::size_t p = 0; p < n; ++p) {
      const double vx = exx[p] - mx[p] * mx[p], vy = eyy[p] - my[p] * my[p], cxy = exy[p] - mx[p] * my[p];
      const double A = 2 * mx[p] * my[p] + kSsimC1, B = 2 * cxy + kSsimC2;
      const double C = mx[p] * mx[p] + my[p] * my[p] + kSsimC1, D = vx + vy + kSsimC2;
      const double S = A * B / (C * D);
      ssim_sum += S;
      const double dS_dmu = 2 * my[p] * B / (C * D) - S * 2 * mx[p] / C;
      const double dS_dvar = -S / D;
      const double dS_dcov = 2 * A / (C * D);
      // Chain through vx = E[x^2] - mu_x^2 and cxy = E[xy] - mu_x mu_y.
      d_mu[p] = -inv * (dS_dmu - 2 * mx[p] * dS_dvar - my[p] * dS_dcov);
      d_var[p] = -inv * dS_dvar;
      d_cov[p] = -inv * dS_dcov;
    }
    const auto g_mu = blur(d_mu, W, H), g_var = blur(d_var, W, H), g_cov = blur(d_cov, W, H);
    for (std::size_t p = 0; p < n; ++p) out.grad[3 * p + c] = g_mu[p] + 2 * x[p] * g_var[p] + y[p] * g_cov[p];
  }
  out.value = 1.0 - ssim_sum * inv;
  return out;
}

RegValue loss_reg(const MatX3d& offsets, double epsilon, bool literal) {
  require(epsilon > 0, "loss_reg: epsilon must be positive");
  RegValue out;
  out.grad = MatX3d::Zero(offsets.rows(), 3);
  const Eigen::ArrayXXd a = literal ? offsets.array().eval() : offsets.array().abs().eval();
  const Eigen::ArrayXXd v = a.max(epsilon);
  out.value = std::sqrt(v.square().sum());
  if (out.value == 0.0) return out;
  for (Eigen::Index i = 0; i < offsets.rows(); ++i)
    for (int c = 0; c < 3; ++c) {
      if (!(a(i, c) > epsilon)) continue;
      const double sign = literal ? 1.0 : (offsets(i, c) > 0 ? 1.0 : -1.0);
      out.grad(i, c) = sign * v(i, c) / out.value;
    }
  return out;
}

LossValue PerceptualLoss::evaluate(const Image& pred, const Image&) const {
  return LossValue{0.0, std::vector<double>(pred.data.size(), 0.0)};
}

LossBreakdown image_loss(const Image& pred, const Image& gt, const LossWeights& w, const PerceptualLoss* perceptual) {
  w.validate();
  static const PerceptualLoss none;
  const LossValue l1 = loss_l1(pred, gt);
  const LossValue ss = loss_ssim(pred, gt);
  const LossValue lp = (perceptual ? perceptual : &none)->evaluate(pred, gt);
  require(lp.grad.size() == pred.data.size(), "perceptual loss returned a gradient of the wrong size");
  LossBreakdown out;
  out.l1 = l1.value;
  out.ssim = ss.value;
  out.lpips = lp.value;
  out.total = w.l1 * l1.value + w.lpips * lp.value + w.ssim * ss.value;
  out.grad_image.resize(pred.data.size());
  for (std::size_t i = 0; i < out.grad_image.size(); ++i)
    out.grad_image[i] = w.l1 * l1.grad[i] + w.lpips * lp.grad[i] + w.ssim * ss.grad[i];
  return out;
}

LossBreakdown total_loss(const Image& pred, const Image& gt, const MatX3d& offsets, const LossWeights& w,
                         const PerceptualLoss* perceptual) {
  LossBreakdown out = image_loss(pred, gt, w, perceptual);
  const RegValue r = loss_reg(offsets, w.epsilon, w.literal_reg);
  out.reg = r.value;
  out.total += w.reg * r.value;
  out.grad_offsets = w.reg * r.grad;
  return out;
}

double psnr(const Image& a, const Image& b) {
  check_pair(a, b);
  double mse = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) mse += (a.data[i] - b.data[i]) * (a.data[i] - b.data[i]);
  mse /= static_cast<double>(a.data.size());
  return mse == 0.0 ? std::numeric_limits<double>::infinity() : -10.0 * std::log10(mse);
}

// ---------------------------------------------------------------------------

double cosine_warmup_lr(double base, long step, long total, long warmup) {
  require(total > 0 && warmup >= 0, "learning-rate schedule needs total > 0 and warmup >= 0");
  if (step < warmup) return base * static_cast<double>(step + 1) / static_cast<double>(warmup);
  if (total <= warmup) return base;
  const double t = std::clamp(static_cast<double>(step - warmup) / static_cast<double>(total - warmup), 0.0, 1.0);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

void Adam::step(const std::vector<MatXd*>& params, const std::vector<MatXd>& grads, double lr) {
  require(params.size() == grads.size(), "Adam: one gradient per parameter required");
  if (state_.first_moment.empty()) {
    for (const MatXd* p : params) {
      state_.first_moment.push_back(MatXd::Zero(p->rows(), p->cols()));
      state_.second_moment.push_back(MatXd::Zero(p->rows(), p->cols()));
    }
  }
  require(state_.first_moment.size() == params.size(), "Adam: parameter count changed between steps");
  ++state_.step;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(state_.step));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(state_.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    require(grads[i].rows() == params[i]->rows() && grads[i].cols() == params[i]->cols(),
            "Adam: gradient shape differs from its parameter");
    MatXd& m = state_.first_moment[i];
    MatXd& v = state_.second_moment[i];
    m = config_.beta1 * m + (1.0 - config_.beta1) * grads[i];
    v = config_.beta2 * v + (1.0 - config_.beta2) * grads[i].cwiseAbs2();
    params[i]->array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + config_.epsilon);
  }
}

// ---------------------------------------------------------------------------

void FitConfig::validate() const {
  require(iterations >= 1, "fit: iterations must be >= 1");
  require(learning_rate > 0, "fit: learning_rate must be positive");
  require(warmup_fraction >= 0 && warmup_fraction < 1, "fit: warmup_fraction must be in [0, 1)");
  require(n_ref >= 1 && n_d >= 1, "fit: n_ref and n_d must be >= 1");
  require(attr_resolution >= 1, "fit: attr_resolution must be >= 1");
  weights.validate();
}

json FitConfig::to_json() const {
  return {{"iterations", iterations},
          {"learning_rate", learning_rate},
          {"warmup_fraction", warmup_fraction},
          {"n_ref", n_ref},
          {"n_d", n_d},
          {"seed", seed},
          {"identity", identity},
          {"views", views},
          {"frames", frames},
          {"attr_resolution", attr_resolution},
          {"precision", precision_json(precision)},
          {"weights", weights.to_json()}};
}

FitConfig FitConfig::from_json(const json& j) {
  check_keys(j,
             {"iterations", "learning_rate", "warmup_fraction", "n_ref", "n_d", "seed", "identity", "views", "frames",
              "attr_resolution", "precision", "weights"},
             "fit config");
  FitConfig c;
  c.iterations = j.value("iterations", c.iterations);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.warmup_fraction = j.value("warmup_fraction", c.warmup_fraction);
  c.n_ref = j.value("n_ref", c.n_ref);
  c.n_d = j.value("n_d", c.n_d);
  c.seed = j.value("seed", c.seed);
  c.identity = j.value("identity", c.identity);
  c.views = j.value("views", c.views);
  c.frames = j.value("frames", c.frames);
  c.attr_resolution = j.value("attr_resolution", c.attr_resolution);
  if (j.contains("precision")) c.precision = precision_from_json(j["precision"]);
  if (j.contains("weights")) c.weights = LossWeights::from_json(j["weights"]);
  c.validate();
  return c;
}

json TraceEntry::to_json() const {
  return {{"step", step}, {"loss", loss}, {"l1", l1},   {"ssim", ssim},       {"lpips", lpips},   {"reg", reg},
          {"psnr", psnr}, {"lr", lr},     {"sources", sources}, {"frames", frames}, {"wall_ms", wall_ms}};
}

// ---------------------------------------------------------------------------

Image render_avatar(const CanonicalAvatar& avatar, const PoseExpr& theta, const Camera<double>& camera,
                    const Eigen::Vector3d& background, Precision precision) {
  const GaussianSet<double> posed = animate(avatar, theta);
  return precision == Precision::kFloat ? render_as<float>(posed, camera, background).first
                                        : render_as<double>(posed, camera, background).first;
}

FrameResult supervise_frame(const CanonicalAvatar& avatar, const FrameTarget& target, const LossWeights& w,
                            Precision precision, double scale, RenderGradients<double>* canonical_grad,
                            const PerceptualLoss* perceptual) {
  const GaussianSet<double> posed = animate(avatar, target.theta);
  FrameResult out;
  out.render = precision == Precision::kFloat ? render_as<float>(posed, target.camera, target.background).first
                                              : render_as<double>(posed, target.camera, target.background).first;
  out.loss = image_loss(out.render, target.image, w, perceptual);
  out.psnr = psnr(out.render, target.image);
  if (canonical_grad) {
    const RenderGradients<double> gp = backward_as(precision, posed, target.camera, target.background, out.loss.grad_image);
    add_into(*canonical_grad, animate_backward(avatar, target.theta, gp), scale);
  }
  return out;
}

FrameTarget load_target(const DatasetFrame& f) { return {f.camera, f.theta, load_frame_image(f), f.background}; }

namespace {

/// Everything a step needs to turn maps into a loss and map gradients.
struct IdentityContext {
  const UvRasterization* rast = nullptr;
  SkinningBake bake;
  AvatarRig rig;
};

struct StepOutcome {
  TraceEntry entry;
  UvAttributeMaps grad;
  CanonicalAvatar avatar;
};

StepOutcome supervised_step(const UvAttributeMaps& maps, const UvAggregate& aggr, const IdentityContext& ctx,
                            const std::vector<const FrameTarget*>& targets, const LossWeights& w, Precision precision) {
  StepOutcome out;
  out.avatar = assemble(maps, aggr, ctx.bake, *ctx.rast, ctx.rig);
  RenderGradients<double> g = zero_gradients(out.avatar.size());
  const double scale = 1.0 / static_cast<double>(targets.size());
  for (const FrameTarget* t : targets) {
    const FrameResult r = supervise_frame(out.avatar, *t, w, precision, scale, &g);
    out.entry.loss += scale * r.loss.total;
    out.entry.l1 += scale * r.loss.l1;
    out.entry.ssim += scale * r.loss.ssim;
    out.entry.lpips += scale * r.loss.lpips;
    out.entry.psnr += scale * r.psnr;
  }
  const RegValue reg = loss_reg(out.avatar.offsets, w.epsilon, w.literal_reg);
  out.entry.reg = reg.value;
  out.entry.loss += w.reg * reg.value;
  g.positions += w.reg * reg.grad;  // positions = rest + offset
  out.grad = assemble_backward(maps, aggr, ctx.bake, g);
  return out;
}

void emit(std::ostream* os, const TraceEntry& e) {
  if (os) (*os) << e.to_json().dump() << '\n' << std::flush;
}

}  // namespace

FitResult fit_avatar(const Dataset& ds, const HeadModel& model, const FitConfig& cfg, std::ostream* trace_out) {
  cfg.validate();
  require(cfg.identity >= 0 && cfg.identity < static_cast<int>(ds.identities.size()),
          "fit: identity " + std::to_string(cfg.identity) + " is not in the dataset");
  FitResult result;
  for (std::size_t i = 0; i < ds.frames.size(); ++i) {
    const DatasetFrame& f = ds.frames[i];
    if (f.identity != cfg.identity) continue;
    if (!cfg.views.empty() && std::find(cfg.views.begin(), cfg.views.end(), f.view) == cfg.views.end()) continue;
    if (!cfg.frames.empty() && std::find(cfg.frames.begin(), cfg.frames.end(), f.frame) == cfg.frames.end()) continue;
    result.training.push_back(static_cast<int>(i));
  }
  require(static_cast<int>(result.training.size()) >= cfg.n_ref + cfg.n_d,
          "fit: " + std::to_string(result.training.size()) + " eligible frames, need n_ref + n_d = " +
              std::to_string(cfg.n_ref + cfg.n_d));

  std::vector<FrameTarget> targets;
  for (int i : result.training) targets.push_back(load_target(ds.frames[i]));

  Rng rng(cfg.seed);
  result.sources = sample_distinct(rng, result.training, cfg.n_ref);
  std::sort(result.sources.begin(), result.sources.end());
  std::vector<UvImage> uv;
  for (int i : result.sources)
    uv.push_back(reproject(load_frame_image(ds.frames[i]), load_frame_uv(ds.frames[i]), cfg.attr_resolution));
  result.aggregate = aggregate(uv);

  const UvRasterization rast = rasterize_uv(model, cfg.attr_resolution);
  IdentityContext ctx{&rast, bake_skinning(model, rast, ds.identities[cfg.identity].shape),
                      AvatarRig::from_model(model, ds.model_hash)};

  UvAttributeMaps maps = UvAttributeMaps::initial(cfg.attr_resolution);
  MatXd flat = maps.flatten();
  Adam adam;
  const long warmup = static_cast<long>(std::lround(cfg.warmup_fraction * cfg.iterations));
  const auto start = std::chrono::steady_clock::now();
  for (long step = 0; step < cfg.iterations; ++step) {
    Rng srng = Rng(cfg.seed).fork(static_cast<std::uint64_t>(step) + 1);
    std::vector<int> slots(result.training.size());
    std::iota(slots.begin(), slots.end(), 0);
    const std::vector<int> pick = sample_distinct(srng, slots, cfg.n_d);
    std::vector<const FrameTarget*> batch;
    for (int s : pick) batch.push_back(&targets[s]);

    maps.unflatten(flat.col(0));
    StepOutcome o = supervised_step(maps, result.aggregate, ctx, batch, cfg.weights, cfg.precision);
    if (!std::isfinite(o.entry.loss)) throw InputError("fit: non-finite loss at iteration " + std::to_string(step), {step});
    o.entry.step = step;
    o.entry.lr = cosine_warmup_lr(cfg.learning_rate, step, cfg.iterations, warmup);
    o.entry.sources = static_cast<int>(result.sources.size());
    for (int s : pick) o.entry.frames.push_back(result.training[s]);
    MatXd g = o.grad.flatten();
    adam.step({&flat}, {g}, o.entry.lr);
    o.entry.wall_ms = elapsed_ms(start);
    emit(trace_out, o.entry);
    result.trace.push_back(std::move(o.entry));
  }
  maps.unflatten(flat.col(0));
  result.maps = maps;
  result.avatar = assemble(maps, result.aggregate, ctx.bake, rast, ctx.rig);
  result.avatar.model_hash = ds.model_hash;
  return result;
}

// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  network.validate();
  require(steps >= 1, "train: steps must be >= 1");
  require(learning_rate > 0, "train: learning_rate must be positive");
  require(warmup_fraction >= 0 && warmup_fraction < 1, "train: warmup_fraction must be in [0, 1)");
  require(n_ref >= 1 && n_d >= 1, "train: n_ref and n_d must be >= 1");
  require(n_ref <= network.max_views, "train: n_ref exceeds the network's max_views");
  require(checkpoint_every >= 0 && stop_after >= 0, "train: checkpoint_every and stop_after must be >= 0");
  weights.validate();
}

json TrainConfig::to_json() const {
  return {{"network", network.to_json()},
          {"steps", steps},
          {"learning_rate", learning_rate},
          {"warmup_fraction", warmup_fraction},
          {"n_ref", n_ref},
          {"n_d", n_d},
          {"seed", seed},
          {"precision", precision_json(precision)},
          {"weights", weights.to_json()},
          {"checkpoint_every", checkpoint_every},
          {"stop_after", stop_after}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  check_keys(j,
             {"network", "steps", "learning_rate", "warmup_fraction", "n_ref", "n_d", "seed", "precision", "weights",
              "checkpoint_every", "stop_after"},
             "train config");
  TrainConfig c;
  if (j.contains("network")) c.network = NeuralConfig::from_json(j["network"]);
  c.steps = j.value("steps", c.steps);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.warmup_fraction = j.value("warmup_fraction", c.warmup_fraction);
  c.n_ref = j.value("n_ref", c.n_ref);
  c.n_d = j.value("n_d", c.n_d);
  c.seed = j.value("seed", c.seed);
  if (j.contains("precision")) c.precision = precision_from_json(j["precision"]);
  if (j.contains("weights")) c.weights = LossWeights::from_json(j["weights"]);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.stop_after = j.value("stop_after", c.stop_after);
  c.validate();
  return c;
}

TrainResult train_feedforward(const std::vector<Dataset>& datasets, const TrainConfig& cfg,
                              const std::filesystem::path& checkpoint, const std::filesystem::path& resume_from,
                              std::ostream* trace_out) {
  cfg.validate();
  require(!datasets.empty(), "train: no datasets");
  for (const auto& d : datasets)
    require(d.model_hash == datasets[0].model_hash, "train: datasets use different head models");

  TrainResult result;
  if (!resume_from.empty()) {
    result.model = load_checkpoint(resume_from, &result.optimizer);
    require(result.model.config.to_json() == cfg.network.to_json(),
            "train: checkpoint network config differs from the requested one");
  } else {
    result.model = NeuralModel::create(cfg.network);
    for (std::size_t i = 0; i < result.model.params.size(); ++i) round_to_float(result.model.params.value(i));
  }
  const HeadModel& model = datasets[0].model;
  const int R = cfg.network.attr_resolution;
  const UvRasterization rast = rasterize_uv(model, R);
  const AvatarRig rig = AvatarRig::from_model(model, datasets[0].model_hash);

  // Identity pools with preloaded frames.
  struct Pool {
    IdentityContext ctx;
    std::vector<FrameTarget> targets;
    std::vector<UvCoordMap> uv;
  };
  std::vector<Pool> pools;
  for (const auto& d : datasets)
    for (std::size_t id = 0; id < d.identities.size(); ++id) {
      Pool p;
      p.ctx = IdentityContext{&rast, bake_skinning(model, rast, d.identities[id].shape), rig};
      for (const auto& f : d.frames) {
        if (f.identity != static_cast<int>(id)) continue;
        p.targets.push_back(load_target(f));
        p.uv.push_back(load_frame_uv(f));
      }
      require(static_cast<int>(p.targets.size()) >= cfg.n_ref + cfg.n_d,
              "train: identity " + std::to_string(id) + " has fewer than n_ref + n_d frames");
      pools.push_back(std::move(p));
    }

  Adam adam;
  adam.state() = result.optimizer;
  std::vector<MatXd*> params;
  for (std::size_t i = 0; i < result.model.params.size(); ++i) params.push_back(&result.model.params.value(i));
  const long warmup = static_cast<long>(std::lround(cfg.warmup_fraction * cfg.steps));
  const long end = cfg.stop_after > 0 ? std::min<long>(cfg.stop_after, cfg.steps) : cfg.steps;
  const auto start = std::chrono::steady_clock::now();
  auto save = [&](long step) {
    if (checkpoint.empty()) return;
    save_checkpoint(checkpoint, result.model, &adam.state(), {{"train", cfg.to_json()}, {"next_step", step}});
  };

  for (long step = adam.state().step; step < end; ++step) {
    Rng rng = Rng(cfg.seed).fork(static_cast<std::uint64_t>(step) + 1);
    const Pool& pool = pools[rng.uniform_int(0, static_cast<int>(pools.size()) - 1)];
    const int n = rng.uniform_int(1, cfg.n_ref);
    std::vector<int> slots(pool.targets.size());
    std::iota(slots.begin(), slots.end(), 0);
    const std::vector<int> src = sample_distinct(rng, slots, n);
    const std::vector<int> dst = sample_distinct(rng, slots, cfg.n_d);

    std::vector<Image> images;
    std::vector<UvCoordMap> uvs;
    for (int s : src) {
      images.push_back(pool.targets[s].image);
      uvs.push_back(pool.uv[s]);
    }
    ForwardPass pass = forward_model(result.model, images, uvs, rast);
    std::vector<const FrameTarget*> batch;
    for (int s : dst) batch.push_back(&pool.targets[s]);
    StepOutcome o = supervised_step(pass.maps, pass.aggregate, pool.ctx, batch, cfg.weights, cfg.precision);
    if (!std::isfinite(o.entry.loss)) throw InputError("train: non-finite loss at step " + std::to_string(step), {step});
    const std::vector<MatXd> grads = pass.backward(o.grad);

    o.entry.step = step;
    o.entry.lr = cosine_warmup_lr(cfg.learning_rate, step, cfg.steps, warmup);
    o.entry.sources = n;
    o.entry.frames = dst;
    adam.step(params, grads, o.entry.lr);
    for (std::size_t i = 0; i < params.size(); ++i) {
      round_to_float(*params[i]);
      round_to_float(adam.state().first_moment[i]);
      round_to_float(adam.state().second_moment[i]);
    }
    o.entry.wall_ms = elapsed_ms(start);
    emit(trace_out, o.entry);
    result.trace.push_back(std::move(o.entry));
    if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) save(step + 1);
  }
  save(adam.state().step);
  result.optimizer = adam.state();
  return result;
}

}  // namespace uika
