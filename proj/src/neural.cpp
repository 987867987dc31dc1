#include "uika/neural.hpp"

#include "uika/io.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

namespace uika {

using nlohmann::json;

namespace {

constexpr int kCheckpointVersion = 1;
constexpr int kMlpExpansion = 4;

struct HeadSpec {
  const char* name;
  int channels;
};
constexpr HeadSpec kHeads[] = {{"color", 3}, {"fuse", 1}, {"opacity", 1}, {"offset", 3}, {"scale", 3}, {"rotation", 4}};

int upsample_stages(const NeuralConfig& c) {
  int n = 0;
  for (int s = c.token_grid; s * 2 <= c.attr_resolution; s *= 2) ++n;
  return n;
}

void fill_normal(MatXd& m, Rng& rng, double stddev) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * rng.normal();
}

void add_linear(ParameterSet& p, const std::string& name, Eigen::Index in, Eigen::Index out, Rng& rng,
                double gain = 1.0) {
  fill_normal(p.add(name + ".w", in, out), rng, gain / std::sqrt(static_cast<double>(in)));
  p.add(name + ".b", 1, out);
}

void add_norm(ParameterSet& p, const std::string& name, Eigen::Index dim) {
  p.add(name + ".g", 1, dim).setOnes();
  p.add(name + ".b", 1, dim);
}

void add_mlp(ParameterSet& p, const std::string& name, Eigen::Index dim, Rng& rng) {
  add_norm(p, name + ".ln", dim);
  add_linear(p, name + ".fc1", dim, kMlpExpansion * dim, rng);
  add_linear(p, name + ".fc2", kMlpExpansion * dim, dim, rng);
}

ad::Var linear(ParameterBinder& bind, const std::string& name, ad::Var x) {
  return bind.tape().linear(x, bind(name + ".w"), bind(name + ".b"));
}

ad::Var norm(ParameterBinder& bind, const std::string& name, ad::Var x) {
  return bind.tape().layer_norm(x, bind(name + ".g"), bind(name + ".b"));
}

ad::Var mlp(ParameterBinder& bind, const std::string& name, ad::Var x) {
  ad::Tape& t = bind.tape();
  return linear(bind, name + ".fc2", t.silu(linear(bind, name + ".fc1", norm(bind, name + ".ln", x))));
}

/// Joint attention over [Z; F]; returns (dZ, dF).
std::pair<ad::Var, ad::Var> joint_attention(ParameterBinder& bind, const std::string& p, ad::Var z, ad::Var f,
                                            int heads, MatXd* probs) {
  ad::Tape& t = bind.tape();
  const ad::Var zn = norm(bind, p + ".ln_z", z);
  const ad::Var fn = norm(bind, p + ".ln_f", f);
  auto proj = [&](const char* which) {
    return t.concat_rows({linear(bind, p + ".z_" + which, zn), linear(bind, p + ".f_" + which, fn)});
  };
  const ad::Var o = t.attention(proj("q"), proj("k"), proj("v"), heads, probs);
  const Eigen::Index lz = t.value(z).rows(), lf = t.value(f).rows();
  return {linear(bind, p + ".z_out", t.slice_rows(o, 0, lz)), linear(bind, p + ".f_out", t.slice_rows(o, lz, lf))};
}

MatXd view_pixels(const Image& img) {
  MatXd m(static_cast<Eigen::Index>(img.pixel_count()), 3);
  std::copy(img.data.begin(), img.data.end(), m.data());
  return m;
}

}  // namespace

// ---------------------------------------------------------------------------

std::vector<int> NeuralConfig::decoder_depths() const {
  std::set<int> d;
  for (int k = 1; k <= 4; ++k) d.insert(std::max(1, (k * blocks) / 4));
  return {d.begin(), d.end()};
}

void NeuralConfig::validate() const {
  require(dim > 0 && heads > 0 && dim % heads == 0, "neural config: dim must be a positive multiple of heads");
  require(blocks >= 1, "neural config: blocks must be >= 1");
  require(token_grid >= 1 && attr_resolution >= token_grid, "neural config: attr_resolution must be >= token_grid");
  require(patch >= 1 && uv_patch >= 1, "neural config: patch sizes must be >= 1");
  require(uv_input_resolution >= uv_patch && uv_input_resolution % uv_patch == 0,
          "neural config: uv_input_resolution must be divisible by uv_patch");
  require(decoder_channels >= 1 && head_hidden >= 1, "neural config: decoder widths must be >= 1");
  require(max_views >= 1, "neural config: max_views must be >= 1");
}

json NeuralConfig::to_json() const {
  return {{"dim", dim},
          {"heads", heads},
          {"blocks", blocks},
          {"token_grid", token_grid},
          {"patch", patch},
          {"uv_input_resolution", uv_input_resolution},
          {"uv_patch", uv_patch},
          {"attr_resolution", attr_resolution},
          {"decoder_channels", decoder_channels},
          {"head_hidden", head_hidden},
          {"max_views", max_views},
          {"seed", seed}};
}

NeuralConfig NeuralConfig::from_json(const json& j) {
  NeuralConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "dim") c.dim = value.get<int>();
    else if (key == "heads") c.heads = value.get<int>();
    else if (key == "blocks") c.blocks = value.get<int>();
    else if (key == "token_grid") c.token_grid = value.get<int>();
    else if (key == "patch") c.patch = value.get<int>();
    else if (key == "uv_input_resolution") c.uv_input_resolution = value.get<int>();
    else if (key == "uv_patch") c.uv_patch = value.get<int>();
    else if (key == "attr_resolution") c.attr_resolution = value.get<int>();
    else if (key == "decoder_channels") c.decoder_channels = value.get<int>();
    else if (key == "head_hidden") c.head_hidden = value.get<int>();
    else if (key == "max_views") c.max_views = value.get<int>();
    else if (key == "seed") c.seed = value.get<std::uint64_t>();
    else throw ParameterError("neural config: unknown field '" + key + "'");
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

MatXd& ParameterSet::add(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
  require(!contains(name), "parameter '" + name + "' registered twice");
  index_[name] = static_cast<int>(values_.size());
  names_.push_back(name);
  values_.push_back(MatXd::Zero(rows, cols));
  return values_.back();
}

int ParameterSet::index(const std::string& name) const {
  const auto it = index_.find(name);
  require(it != index_.end(), "unknown parameter '" + name + "'");
  return it->second;
}

Eigen::Index ParameterSet::count() const {
  Eigen::Index n = 0;
  for (const auto& v : values_) n += v.size();
  return n;
}

VecXd ParameterSet::flatten() const {
  VecXd out(count());
  Eigen::Index o = 0;
  for (const auto& v : values_) {
    std::copy(v.data(), v.data() + v.size(), out.data() + o);
    o += v.size();
  }
  return out;
}

void ParameterSet::unflatten(const VecXd& flat) {
  require(flat.size() == count(), "parameter vector has the wrong length");
  Eigen::Index o = 0;
  for (auto& v : values_) {
    std::copy(flat.data() + o, flat.data() + o + v.size(), v.data());
    o += v.size();
  }
}

std::vector<MatXd> ParameterSet::zeros_like() const {
  std::vector<MatXd> out;
  out.reserve(values_.size());
  for (const auto& v : values_) out.push_back(MatXd::Zero(v.rows(), v.cols()));
  return out;
}

ad::Var ParameterBinder::operator()(const std::string& name) {
  const int i = params_.index(name);
  const auto it = bound_.find(i);
  if (it != bound_.end()) return it->second;
  const ad::Var v = tape_.leaf(params_.value(i), grads_ ? &(*grads_)[i] : nullptr);
  bound_[i] = v;
  return v;
}

// ---------------------------------------------------------------------------

MatXd frozen_patch_projection(int channels, int patch, int dim, std::uint64_t seed) {
  Rng rng = Rng(seed).fork(0x70726f6aULL + static_cast<std::uint64_t>(channels));
  MatXd m(channels * patch * patch, dim);
  fill_normal(m, rng, 1.0 / std::sqrt(static_cast<double>(m.rows())));
  return m;
}

MatXd positional_encoding(const MatX2d& coords, int dim) {
  const int nf = dim / 4;
  MatXd pe = MatXd::Zero(coords.rows(), dim);
  for (int k = 0; k < nf; ++k) {
    // Frequencies from pi to 64 pi, geometric.
    const double f = std::numbers::pi * std::pow(64.0, nf > 1 ? double(k) / (nf - 1) : 0.0);
    for (Eigen::Index r = 0; r < coords.rows(); ++r) {
      pe(r, k) = std::sin(f * coords(r, 0));
      pe(r, nf + k) = std::cos(f * coords(r, 0));
      pe(r, 2 * nf + k) = std::sin(f * coords(r, 1));
      pe(r, 3 * nf + k) = std::cos(f * coords(r, 1));
    }
  }
  return pe;
}

MatX2d grid_centers(int cols, int rows) {
  MatX2d c(Eigen::Index(cols) * rows, 2);
  for (int y = 0; y < rows; ++y)
    for (int x = 0; x < cols; ++x) c.row(Eigen::Index(y) * cols + x) << (x + 0.5) / cols, (y + 0.5) / rows;
  return c;
}

FeatureSequence embed_views(ParameterBinder& bind, const std::string& prefix, const ViewStack& stack, int patch,
                            const MatXd& frozen) {
  require(!stack.views.empty(), "embed_views: no views");
  require(patch >= 1 && stack.width % patch == 0 && stack.height % patch == 0,
          "embed_views: resolution " + std::to_string(stack.width) + "x" + std::to_string(stack.height) +
              " is not divisible by patch size " + std::to_string(patch));
  const int C = stack.channels;
  require(frozen.rows() == Eigen::Index(C) * patch * patch, "embed_views: frozen projection does not match patches");
  const int gw = stack.width / patch, gh = stack.height / patch, P = gw * gh;
  const Eigen::Index N = static_cast<Eigen::Index>(stack.views.size());

  MatXd patches(N * P, Eigen::Index(C) * patch * patch);
  for (Eigen::Index n = 0; n < N; ++n) {
    const MatXd& v = stack.views[n];
    require(v.rows() == Eigen::Index(stack.width) * stack.height && v.cols() == C,
            "embed_views: view " + std::to_string(n) + " has the wrong shape");
    for (int py = 0; py < gh; ++py)
      for (int px = 0; px < gw; ++px) {
        auto row = patches.row(n * P + py * gw + px);
        for (int dy = 0; dy < patch; ++dy)
          for (int dx = 0; dx < patch; ++dx)
            row.segment((dy * patch + dx) * C, C) = v.row(Eigen::Index(py * patch + dy) * stack.width + px * patch + dx);
      }
  }
  const MatXd pe = positional_encoding(grid_centers(gw, gh), static_cast<int>(frozen.cols()));
  ad::Tape& t = bind.tape();
  const ad::Var projected = t.linear(t.constant(patches * frozen), bind(prefix + ".w"), bind(prefix + ".b"));
  FeatureSequence out;
  out.tokens = t.add(projected, t.constant(pe.replicate(N, 1)));
  out.views = static_cast<int>(N);
  out.tokens_per_view = P;
  return out;
}

// ---------------------------------------------------------------------------

void add_block_parameters(ParameterSet& p, const std::string& prefix, int dim, Rng& rng) {
  for (const char* stream : {"screen", "uv"}) {
    const std::string s = prefix + "." + stream;
    add_norm(p, s + ".ln_z", dim);
    add_norm(p, s + ".ln_f", dim);
    for (const char* side : {"z", "f"})
      for (const char* which : {"q", "k", "v", "out"}) add_linear(p, s + "." + side + "_" + which, dim, dim, rng);
  }
  add_mlp(p, prefix + ".mlp_z", dim, rng);
  add_mlp(p, prefix + ".mlp_screen", dim, rng);
  add_mlp(p, prefix + ".mlp_uv", dim, rng);
}

BlockState dual_attention_block(ParameterBinder& bind, const std::string& prefix, const BlockState& in, int heads,
                                BlockTrace* trace) {
  ad::Tape& t = bind.tape();
  const Eigen::Index D = t.value(in.z).cols();
  require(t.value(in.f_screen).cols() == D && t.value(in.f_uv).cols() == D,
          "dual_attention_block: token widths differ");
  require(D % heads == 0, "dual_attention_block: width not divisible by heads");
  const auto [dz_s, df_s] =
      joint_attention(bind, prefix + ".screen", in.z, in.f_screen, heads, trace ? &trace->screen_probs : nullptr);
  const auto [dz_uv, df_uv] =
      joint_attention(bind, prefix + ".uv", in.z, in.f_uv, heads, trace ? &trace->uv_probs : nullptr);
  if (trace) {
    trace->delta_z_screen = dz_s;
    trace->delta_z_uv = dz_uv;
  }
  BlockState out;
  out.z = t.add(in.z, mlp(bind, prefix + ".mlp_z", t.add({in.z, dz_s, dz_uv})));
  out.f_screen = t.add(in.f_screen, mlp(bind, prefix + ".mlp_screen", t.add(in.f_screen, df_s)));
  out.f_uv = t.add(in.f_uv, mlp(bind, prefix + ".mlp_uv", t.add(in.f_uv, df_uv)));
  return out;
}

// ---------------------------------------------------------------------------

NeuralModel NeuralModel::create(const NeuralConfig& config) {
  config.validate();
  NeuralModel m;
  m.config = config;
  const int D = config.dim, C = config.decoder_channels, H = config.head_hidden;
  Rng rng = Rng(config.seed).fork(0x696e6974ULL);
  ParameterSet& p = m.params;

  fill_normal(p.add("uv_tokens", config.token_count(), D), rng, 0.1);
  add_linear(p, "embed_screen", D, D, rng);
  add_linear(p, "embed_uv", D, D, rng);
  for (int l = 0; l < config.blocks; ++l) add_block_parameters(p, "block" + std::to_string(l), D, rng);

  const auto depths = config.decoder_depths();
  for (std::size_t k = 0; k < depths.size(); ++k) add_linear(p, "dec.proj" + std::to_string(k), D, C, rng);
  for (int k = 0; k < upsample_stages(config); ++k) add_linear(p, "dec.up" + std::to_string(k), 9 * C, C, rng);
  add_linear(p, "dec.fuse", 9 * (C + 4), C, rng);
  add_linear(p, "dec.fc1", C, H, rng);
  add_linear(p, "dec.fc2", H, H, rng);
  for (const auto& h : kHeads) {
    const std::string n = std::string("head.") + h.name;
    add_linear(p, n + ".fc1", H, H, rng);
    add_linear(p, n + ".fc2", H, h.channels, rng, 0.1);
  }
  // Heads start at the initial attribute values.
  const UvAttributeMaps init = UvAttributeMaps::initial(1);
  p["head.color.fc2.b"] = init.color.row(0);
  p["head.fuse.fc2.b"](0, 0) = init.fuse[0];
  p["head.opacity.fc2.b"](0, 0) = init.opacity[0];
  p["head.offset.fc2.b"] = init.offset.row(0);
  p["head.scale.fc2.b"] = init.scale.row(0);
  p["head.rotation.fc2.b"] = init.rotation.row(0);

  m.screen_projection = frozen_patch_projection(3, config.patch, D, config.seed);
  m.uv_projection = frozen_patch_projection(4, config.uv_patch, D, config.seed);
  return m;
}

ViewStack screen_view_stack(const std::vector<Image>& images) {
  require(!images.empty(), "no input images");
  ViewStack s{images[0].width, images[0].height, 3, {}};
  for (std::size_t i = 0; i < images.size(); ++i) {
    require(images[i].width == s.width && images[i].height == s.height,
            "input image " + std::to_string(i) + " has a different resolution");
    s.views.push_back(view_pixels(images[i]));
  }
  return s;
}

ViewStack uv_view_stack(const std::vector<UvImage>& views) {
  require(!views.empty(), "no UV views");
  const int R = views[0].resolution;
  ViewStack s{R, R, 4, {}};
  for (const auto& v : views) {
    require(v.resolution == R, "UV views have different resolutions");
    MatXd m(Eigen::Index(R) * R, 4);
    m.leftCols(3) = v.color;
    for (Eigen::Index k = 0; k < m.rows(); ++k) m(k, 3) = v.hit_count[k] > 0 ? 1.0 : 0.0;
    s.views.push_back(std::move(m));
  }
  return s;
}

// ---------------------------------------------------------------------------

ForwardPass forward_model(const NeuralModel& model, const std::vector<Image>& images,
                          const CorrespondenceEstimator& estimator, const UvRasterization& rast) {
  require(!images.empty(), "forward_model: no input images");
  return forward_model(model, images, estimate_correspondence(images, estimator), rast);
}

ForwardPass forward_model(const NeuralModel& model, const std::vector<Image>& images,
                          const std::vector<UvCoordMap>& correspondences, const UvRasterization& rast) {
  const NeuralConfig& cfg = model.config;
  const int N = static_cast<int>(images.size());
  require(N >= 1, "forward_model: no input images");
  require(N <= cfg.max_views,
          "forward_model: " + std::to_string(N) + " views exceed max_views " + std::to_string(cfg.max_views));
  require(correspondences.size() == images.size(), "forward_model: one correspondence map per image required");
  require(rast.resolution == cfg.attr_resolution, "forward_model: UV rasterization is not at attr_resolution");
  const int R = cfg.attr_resolution, G = cfg.token_grid, C = cfg.decoder_channels;

  ForwardPass out;
  out.correspondences = correspondences;
  std::vector<UvImage> uv_in, uv_attr;
  for (int i = 0; i < N; ++i) {
    require(correspondences[i].width == images[i].width && correspondences[i].height == images[i].height,
            "forward_model: correspondence " + std::to_string(i) + " does not match its image");
    uv_in.push_back(reproject(images[i], correspondences[i], cfg.uv_input_resolution));
    uv_attr.push_back(reproject(images[i], correspondences[i], R));
  }
  out.aggregate = aggregate(uv_attr);

  out.tape_ = std::make_shared<ad::Tape>();
  out.grads_ = std::make_shared<std::vector<MatXd>>(model.params.size());
  ad::Tape& t = *out.tape_;
  ParameterBinder bind(t, model.params, out.grads_.get());

  BlockState s;
  s.z = t.add(bind("uv_tokens"), t.constant(positional_encoding(grid_centers(G, G), cfg.dim)));
  s.f_screen = embed_views(bind, "embed_screen", screen_view_stack(images), cfg.patch, model.screen_projection).tokens;
  s.f_uv = embed_views(bind, "embed_uv", uv_view_stack(uv_in), cfg.uv_patch, model.uv_projection).tokens;

  const auto depths = cfg.decoder_depths();
  std::vector<ad::Var> collected;
  for (int l = 0; l < cfg.blocks; ++l) {
    BlockTrace trace;
    s = dual_attention_block(bind, "block" + std::to_string(l), s, cfg.heads, &trace);
    out.traces.push_back(std::move(trace));
    if (std::find(depths.begin(), depths.end(), l + 1) != depths.end()) {
      collected.push_back(s.z);
      out.depth_tokens.push_back(t.value(s.z));
    }
  }

  // Decoder: fuse depths on the token grid, upsample to R_a, join the aggregate.
  std::vector<ad::Var> proj;
  for (std::size_t k = 0; k < collected.size(); ++k) proj.push_back(linear(bind, "dec.proj" + std::to_string(k), collected[k]));
  ad::Var x = t.add(proj);
  int side = G;
  for (int k = 0; k < upsample_stages(cfg); ++k) {
    x = t.resize_bilinear(x, side, side, side * 2, side * 2);
    side *= 2;
    const std::string n = "dec.up" + std::to_string(k);
    x = t.silu(t.conv3x3(x, side, side, bind(n + ".w"), bind(n + ".b")));
  }
  if (side != R) x = t.resize_bilinear(x, side, side, R, R);
  MatXd aux(Eigen::Index(R) * R, 4);
  aux.leftCols(3) = out.aggregate.color;
  aux.col(3) = out.aggregate.confidence;
  x = t.concat_cols({x, t.constant(std::move(aux))});
  x = t.silu(t.conv3x3(x, R, R, bind("dec.fuse.w"), bind("dec.fuse.b")));
  require(t.value(x).cols() == C, "decoder width mismatch");

  out.valid_ = rast.valid_texels();
  x = t.gather_rows(x, out.valid_);
  x = t.silu(linear(bind, "dec.fc1", x));
  x = t.silu(linear(bind, "dec.fc2", x));
  out.maps = UvAttributeMaps::initial(R);
  MatXd* targets[] = {&out.maps.color, nullptr, nullptr, &out.maps.offset, &out.maps.scale, &out.maps.rotation};
  VecXd* vtargets[] = {nullptr, &out.maps.fuse, &out.maps.opacity, nullptr, nullptr, nullptr};
  for (std::size_t h = 0; h < std::size(kHeads); ++h) {
    const std::string n = std::string("head.") + kHeads[h].name;
    const ad::Var y = linear(bind, n + ".fc2", t.silu(linear(bind, n + ".fc1", x)));
    out.heads_.push_back(y);
    const MatXd& v = t.value(y);
    for (std::size_t m = 0; m < out.valid_.size(); ++m) {
      if (targets[h]) targets[h]->row(out.valid_[m]) = v.row(static_cast<Eigen::Index>(m));
      else (*vtargets[h])[out.valid_[m]] = v(static_cast<Eigen::Index>(m), 0);
    }
  }
  for (std::size_t i = 0; i < model.params.size(); ++i)
    out.shapes_.emplace_back(model.params.value(i).rows(), model.params.value(i).cols());
  return out;
}

std::vector<MatXd> ForwardPass::backward(const UvAttributeMaps& grad) {
  require(!consumed_, "ForwardPass::backward called twice");
  require(grad.resolution == maps.resolution, "ForwardPass::backward: gradient resolution differs");
  consumed_ = true;
  const Eigen::Index M = static_cast<Eigen::Index>(valid_.size());
  std::vector<std::pair<ad::Var, MatXd>> seeds;
  const MatXd* sources[] = {&grad.color, nullptr, nullptr, &grad.offset, &grad.scale, &grad.rotation};
  const VecXd* vsources[] = {nullptr, &grad.fuse, &grad.opacity, nullptr, nullptr, nullptr};
  for (std::size_t h = 0; h < heads_.size(); ++h) {
    MatXd g(M, kHeads[h].channels);
    for (Eigen::Index m = 0; m < M; ++m) {
      if (sources[h]) g.row(m) = sources[h]->row(valid_[m]);
      else g(m, 0) = (*vsources[h])[valid_[m]];
    }
    seeds.emplace_back(heads_[h], std::move(g));
  }
  tape_->backward(seeds);
  std::vector<MatXd> out = std::move(*grads_);
  for (std::size_t i = 0; i < out.size(); ++i)
    if (out[i].size() == 0) out[i] = MatXd::Zero(shapes_[i].first, shapes_[i].second);
  tape_.reset();
  return out;
}

// ---------------------------------------------------------------------------

void save_checkpoint(const std::filesystem::path& path, const NeuralModel& model, const OptimizerState* optimizer,
                     const json& extra) {
  io::BlobWriter w;
  json registry = json::array();
  auto add = [&](const std::string& name, const MatXd& m) {
    w.add(name, io::to_f32(m.data(), static_cast<std::size_t>(m.size())), {m.rows(), m.cols()});
  };
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    const MatXd& v = model.params.value(i);
    registry.push_back({{"name", model.params.name(i)}, {"shape", {v.rows(), v.cols()}}});
    add("param/" + model.params.name(i), v);
  }
  json header = {{"format", "uika-neural"},
                 {"version", kCheckpointVersion},
                 {"config", model.config.to_json()},
                 {"parameters", registry},
                 {"parameter_count", model.params.count()}};
  if (optimizer && !optimizer->empty()) {
    require(optimizer->first_moment.size() == model.params.size() &&
                optimizer->second_moment.size() == model.params.size(),
            "optimizer state does not match the parameter registry");
    for (std::size_t i = 0; i < model.params.size(); ++i) {
      add("adam_m/" + model.params.name(i), optimizer->first_moment[i]);
      add("adam_v/" + model.params.name(i), optimizer->second_moment[i]);
    }
    header["optimizer"] = {{"step", optimizer->step}};
  }
  if (!extra.is_null()) header["extra"] = extra;
  w.write(path, io::magic("UIKANN1"), header);
}

NeuralModel load_checkpoint(const std::filesystem::path& path, OptimizerState* optimizer, json* extra) {
  const io::BlobReader r(path, io::magic("UIKANN1"));
  const json& h = r.header();
  if (h.value("format", "") != "uika-neural")
    throw FormatError(path.string() + ": not a network checkpoint");
  const int version = h.value("version", -1);
  if (version != kCheckpointVersion)
    throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  NeuralConfig cfg;
  try {
    cfg = NeuralConfig::from_json(h.at("config"));
  } catch (const std::exception& e) {
    throw FormatError(path.string() + ": bad config: " + e.what());
  }
  NeuralModel m = NeuralModel::create(cfg);
  auto read = [&](const std::string& block, const MatXd& like) {
    if (!r.has(block)) throw FormatError(path.string() + ": missing block '" + block + "'");
    const auto f = r.floats(block);
    if (static_cast<Eigen::Index>(f.size()) != like.size())
      throw FormatError(path.string() + ": block '" + block + "' has " + std::to_string(f.size()) +
                        " values, expected " + std::to_string(like.size()));
    MatXd out(like.rows(), like.cols());
    std::copy(f.begin(), f.end(), out.data());
    return out;
  };
  for (std::size_t i = 0; i < m.params.size(); ++i) m.params.value(i) = read("param/" + m.params.name(i), m.params.value(i));
  if (optimizer) {
    *optimizer = OptimizerState{};
    if (h.contains("optimizer")) {
      optimizer->step = h["optimizer"].value("step", 0L);
      for (std::size_t i = 0; i < m.params.size(); ++i) {
        optimizer->first_moment.push_back(read("adam_m/" + m.params.name(i), m.params.value(i)));
        optimizer->second_moment.push_back(read("adam_v/" + m.params.name(i), m.params.value(i)));
      }
    }
  }
  if (extra) *extra = h.value("extra", json());
  return m;
}

}  // namespace uika
