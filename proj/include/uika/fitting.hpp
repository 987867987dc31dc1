#pragma once

#include "uika/avatar.hpp"
#include "uika/common.hpp"
#include "uika/neural.hpp"
#include "uika/splatter.hpp"
#include "uika/synthdata.hpp"

#include "json.hpp"

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <vector>

namespace uika {

struct LossWeights {
  double l1 = 1.0;
  double lpips = 1.0;
  double ssim = 0.1;
  double reg = 0.1;
  double epsilon = 1e-8;
  bool literal_reg = false;  // max(dmu, eps) on signed components instead of max(|dmu|, eps)

  void validate() const;
  nlohmann::json to_json() const;
  static LossWeights from_json(const nlohmann::json& j);
};

/// Scalar loss and its gradient with respect to the image data (H x W x 3).
struct LossValue {
  double value = 0.0;
  std::vector<double> grad;
};

/// Mean absolute error over the pixels where mask != 0 (all pixels without a
/// mask), averaged over channels.
LossValue loss_l1(const Image& pred, const Image& gt, const std::vector<std::uint8_t>* mask = nullptr);

/// 1 - SSIM, 11x11 Gaussian window (sigma 1.5), zero padding, per-channel mean.
LossValue loss_ssim(const Image& pred, const Image& gt);

struct RegValue {
  double value = 0.0;
  MatX3d grad;
};

/// || max(|dmu|, eps) ||_2 over all components.
RegValue loss_reg(const MatX3d& offsets, double epsilon, bool literal = false);

/// Perceptual term slot. The default contributes nothing.
class PerceptualLoss {
 public:
  virtual ~PerceptualLoss() = default;
  virtual LossValue evaluate(const Image& pred, const Image& gt) const;
};

struct LossBreakdown {
  double total = 0.0;
  double l1 = 0.0;
  double lpips = 0.0;
  double ssim = 0.0;
  double reg = 0.0;
  std::vector<double> grad_image;
  MatX3d grad_offsets;
};

/// Image terms only; grad_offsets is left empty.
LossBreakdown image_loss(const Image& pred, const Image& gt, const LossWeights& w,
                         const PerceptualLoss* perceptual = nullptr);
LossBreakdown total_loss(const Image& pred, const Image& gt, const MatX3d& offsets, const LossWeights& w,
                         const PerceptualLoss* perceptual = nullptr);

double psnr(const Image& a, const Image& b);

// ---------------------------------------------------------------------------

/// Linear warm-up over `warmup` steps, then cosine decay to zero at `total`.
double cosine_warmup_lr(double base, long step, long total, long warmup);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}
  /// One update of every tensor; moments are created on the first call.
  void step(const std::vector<MatXd*>& params, const std::vector<MatXd>& grads, double lr);
  OptimizerState& state() { return state_; }
  const OptimizerState& state() const { return state_; }

 private:
  AdamConfig config_;
  OptimizerState state_;
};

// ---------------------------------------------------------------------------

enum class Precision { kFloat, kDouble };

struct FitConfig {
  int iterations = 2000;
  double learning_rate = 1e-2;
  double warmup_fraction = 0.05;
  int n_ref = 16;   // source frames aggregated for the fusion input
  int n_d = 4;      // supervised frames per step
  std::uint64_t seed = 1;
  int identity = 0;
  std::vector<int> views;   // training views; empty means all
  std::vector<int> frames;  // training frames; empty means all
  int attr_resolution = 96;
  Precision precision = Precision::kDouble;
  LossWeights weights;

  void validate() const;
  nlohmann::json to_json() const;
  static FitConfig from_json(const nlohmann::json& j);
};

struct TraceEntry {
  long step = 0;
  double loss = 0.0;
  double l1 = 0.0;
  double ssim = 0.0;
  double lpips = 0.0;
  double reg = 0.0;
  double psnr = 0.0;
  double lr = 0.0;
  double wall_ms = 0.0;
  int sources = 0;
  std::vector<int> frames;  // dataset frame indices supervised at this step

  nlohmann::json to_json() const;
};

/// Everything one supervised frame needs.
struct FrameTarget {
  Camera<double> camera;
  PoseExpr theta;
  Image image;
  Eigen::Vector3d background = Eigen::Vector3d::Zero();
};

struct FrameResult {
  LossBreakdown loss;  // image terms
  double psnr = 0.0;
  Image render;
};

/// Renders the posed avatar against one target and adds the gradient of
/// scale * image loss on the canonical Gaussians into `canonical_grad`
/// (allocated on first use).
FrameResult supervise_frame(const CanonicalAvatar& avatar, const FrameTarget& target, const LossWeights& w,
                            Precision precision, double scale, RenderGradients<double>* canonical_grad,
                            const PerceptualLoss* perceptual = nullptr);

Image render_avatar(const CanonicalAvatar& avatar, const PoseExpr& theta, const Camera<double>& camera,
                    const Eigen::Vector3d& background, Precision precision = Precision::kDouble);

FrameTarget load_target(const DatasetFrame& frame);

struct FitResult {
  CanonicalAvatar avatar;
  UvAttributeMaps maps;
  UvAggregate aggregate;
  std::vector<TraceEntry> trace;
  std::vector<int> sources;  // dataset frame indices aggregated
  std::vector<int> training;  // dataset frame indices eligible for supervision
};

/// Direct optimization of the UV attribute maps for one identity: n_ref
/// seeded source frames build the aggregate, each step supervises n_d frames
/// drawn from all eligible ones. Writes one JSON line per step to `trace_out`
/// when given. Throws ParameterError with fewer than n_ref + n_d eligible
/// frames, InputError naming the iteration on a non-finite loss.
FitResult fit_avatar(const Dataset& dataset, const HeadModel& model, const FitConfig& config,
                     std::ostream* trace_out = nullptr);

// ---------------------------------------------------------------------------

struct TrainConfig {
  NeuralConfig network;
  int steps = 500;
  double learning_rate = 1e-4;
  double warmup_fraction = 0.05;
  int n_ref = 4;
  int n_d = 2;
  std::uint64_t seed = 1;
  Precision precision = Precision::kDouble;
  LossWeights weights;
  int checkpoint_every = 0;  // 0: only at the end
  long stop_after = 0;       // stop early at this step (0: run to `steps`)

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct TrainResult {
  NeuralModel model;
  OptimizerState optimizer;
  std::vector<TraceEntry> trace;
};

/// Trains the network on every identity of `datasets` (which must share one
/// head model). Weights and Adam moments are kept at float32 precision after
/// each step so a run resumed from a checkpoint continues bit-identically.
TrainResult train_feedforward(const std::vector<Dataset>& datasets, const TrainConfig& config,
                              const std::filesystem::path& checkpoint = {},
                              const std::filesystem::path& resume_from = {}, std::ostream* trace_out = nullptr);

}  // namespace uika
