#pragma once

#include "uika/autodiff.hpp"
#include "uika/avatar.hpp"
#include "uika/common.hpp"
#include "uika/correspondence.hpp"
#include "uika/headmodel.hpp"
#include "uika/random.hpp"

#include "json.hpp"

#include <filesystem>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

namespace uika {

/// Network sizes. Defaults are the desk-scale model; the paper-scale one is
/// dim 1024, heads 16, blocks 12, token_grid 96, attr_resolution 384.
struct NeuralConfig {
  int dim = 64;               // D
  int heads = 4;              // h
  int blocks = 4;             // L
  int token_grid = 16;        // G_z, L_z = G_z^2
  int patch = 8;              // screen patch side
  int uv_input_resolution = 64;  // per-view reprojection fed to the UV encoder
  int uv_patch = 8;
  int attr_resolution = 96;   // R_a
  int decoder_channels = 32;
  int head_hidden = 64;       // width of the per-texel MLPs
  int max_views = 16;
  std::uint64_t seed = 1;     // initialization and frozen projections

  int token_count() const { return token_grid * token_grid; }
  /// Blocks whose outputs feed the decoder: L/4, L/2, 3L/4, L (1-based, deduplicated).
  std::vector<int> decoder_depths() const;
  void validate() const;
  nlohmann::json to_json() const;
  static NeuralConfig from_json(const nlohmann::json& j);
};

/// Named trainable tensors in registration order.
class ParameterSet {
 public:
  MatXd& add(const std::string& name, Eigen::Index rows, Eigen::Index cols);
  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  int index(const std::string& name) const;
  MatXd& operator[](const std::string& name) { return values_[index(name)]; }
  const MatXd& operator[](const std::string& name) const { return values_[index(name)]; }

  std::size_t size() const { return values_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  MatXd& value(std::size_t i) { return values_[i]; }
  const MatXd& value(std::size_t i) const { return values_[i]; }

  Eigen::Index count() const;
  VecXd flatten() const;
  void unflatten(const VecXd& flat);
  /// Zero tensors with the same shapes, for gradients and optimizer moments.
  std::vector<MatXd> zeros_like() const;

 private:
  std::vector<std::string> names_;
  std::vector<MatXd> values_;
  std::unordered_map<std::string, int> index_;
};

/// Binds parameters as tape leaves on first use. Gradients land in `grads`
/// (one tensor per parameter, same order), when given.
class ParameterBinder {
 public:
  ParameterBinder(ad::Tape& tape, const ParameterSet& params, std::vector<MatXd>* grads = nullptr)
      : tape_(tape), params_(params), grads_(grads) {}
  ad::Var operator()(const std::string& name);
  ad::Tape& tape() { return tape_; }

 private:
  ad::Tape& tape_;
  const ParameterSet& params_;
  std::vector<MatXd>* grads_;
  std::unordered_map<int, ad::Var> bound_;
};

// ---------------------------------------------------------------------------
// Encoder stand-in

/// Fixed random projection of flattened patches (C * patch^2) to D channels.
MatXd frozen_patch_projection(int channels, int patch, int dim, std::uint64_t seed);

/// 2D sinusoidal encoding of normalized coordinates (rows of `coords`, in [0,1]^2).
MatXd positional_encoding(const MatX2d& coords, int dim);

/// Token-grid cell centers in row-major order, matching UV texel order.
MatX2d grid_centers(int cols, int rows);

/// Views with `channels` interleaved channels in an H x W grid, one row per pixel.
struct ViewStack {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<MatXd> views;  // H*W x channels each
};

struct FeatureSequence {
  ad::Var tokens = -1;            // (N * P) x D
  int views = 0;
  int tokens_per_view = 0;
};

/// Patchify, frozen projection, trainable per-patch linear layer (`prefix`.w,
/// `prefix`.b), then per-view positional encodings; views concatenated in
/// input order. Throws ParameterError if the resolution is not divisible by
/// `patch` or the stack is empty.
FeatureSequence embed_views(ParameterBinder& bind, const std::string& prefix, const ViewStack& stack, int patch,
                            const MatXd& frozen);

// ---------------------------------------------------------------------------
// Dual screen/UV attention

/// Registers one block's parameters under `prefix`.
void add_block_parameters(ParameterSet& params, const std::string& prefix, int dim, Rng& rng);

struct BlockState {
  ad::Var z = -1;
  ad::Var f_screen = -1;
  ad::Var f_uv = -1;
};

/// Diagnostics from one block.
struct BlockTrace {
  MatXd screen_probs;  // heads * (Lz + Ns) x (Lz + Ns)
  MatXd uv_probs;
  ad::Var delta_z_screen = -1;
  ad::Var delta_z_uv = -1;
};

/// Joint attention of [Z; F_j] per stream with paired outputs, then
/// Z' = Z + MLP(Z + dZ_s + dZ_uv) and F_j' = F_j + MLP_j(F_j + dF_j).
/// Pre-norm on attention and MLP inputs.
BlockState dual_attention_block(ParameterBinder& bind, const std::string& prefix, const BlockState& in, int heads,
                                BlockTrace* trace = nullptr);

// ---------------------------------------------------------------------------

struct NeuralModel {
  NeuralConfig config;
  ParameterSet params;
  MatXd screen_projection;  // frozen, derived from config.seed
  MatXd uv_projection;

  static NeuralModel create(const NeuralConfig& config);
};

/// Reprojected views at the UV encoder's resolution: RGB plus a hit mask.
ViewStack uv_view_stack(const std::vector<UvImage>& views);
ViewStack screen_view_stack(const std::vector<Image>& images);

/// One forward evaluation, kept so gradients can be pulled back through it.
class ForwardPass {
 public:
  UvAttributeMaps maps;
  UvAggregate aggregate;              // at attr_resolution
  std::vector<UvCoordMap> correspondences;
  std::vector<MatXd> depth_tokens;    // Z^l for each decoder depth
  std::vector<BlockTrace> traces;

  /// d loss / d parameters (ParameterSet order) for a gradient on the raw maps.
  /// Valid once per pass.
  std::vector<MatXd> backward(const UvAttributeMaps& grad);

  /// Every intermediate value; null after backward().
  const ad::Tape* tape() const { return tape_.get(); }

 private:
  friend ForwardPass forward_model(const NeuralModel&, const std::vector<Image>&, const std::vector<UvCoordMap>&,
                                   const UvRasterization&);
  std::shared_ptr<ad::Tape> tape_;
  std::shared_ptr<std::vector<MatXd>> grads_;  // bound by address on the tape
  std::vector<ad::Var> heads_;        // color, fuse, opacity, offset, scale, rotation
  std::vector<int> valid_;
  std::vector<std::pair<Eigen::Index, Eigen::Index>> shapes_;
  bool consumed_ = false;
};

/// Correspondence, reprojection and aggregation, both token streams, L blocks
/// and the UV decoder. `rast` must be at config.attr_resolution.
ForwardPass forward_model(const NeuralModel& model, const std::vector<Image>& images,
                          const CorrespondenceEstimator& estimator, const UvRasterization& rast);
ForwardPass forward_model(const NeuralModel& model, const std::vector<Image>& images,
                          const std::vector<UvCoordMap>& correspondences, const UvRasterization& rast);

/// Optional optimizer state stored alongside the weights.
struct OptimizerState {
  long step = 0;
  std::vector<MatXd> first_moment;
  std::vector<MatXd> second_moment;
  bool empty() const { return first_moment.empty(); }
};

void save_checkpoint(const std::filesystem::path& path, const NeuralModel& model,
                     const OptimizerState* optimizer = nullptr, const nlohmann::json& extra = {});
NeuralModel load_checkpoint(const std::filesystem::path& path, OptimizerState* optimizer = nullptr,
                            nlohmann::json* extra = nullptr);

}  // namespace uika
