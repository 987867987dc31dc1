#pragma once

#include "uika/common.hpp"

#include <functional>
#include <vector>

// Reverse-mode differentiation over dense row-major matrices. Just the ops the
// neural module needs; every op's backward is hand-written.

namespace uika::ad {

using Var = int;

class Tape {
 public:
  /// Input that never receives a gradient.
  Var constant(MatXd value);
  /// Differentiable leaf. Its gradient is added into `*sink` by backward(), so
  /// `sink` must outlive that call; pass nullptr to keep it on the tape only.
  Var leaf(MatXd value, MatXd* sink = nullptr);

  const MatXd& value(Var v) const { return nodes_[v].value; }
  /// Accumulated gradient after backward(); empty if none flowed.
  const MatXd& grad(Var v) const { return nodes_[v].grad; }
  bool requires_grad(Var v) const { return nodes_[v].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Seeds d loss / d var for each pair, then propagates to the leaves.
  void backward(const std::vector<std::pair<Var, MatXd>>& seeds);

  Var matmul(Var a, Var b);
  /// x W + b, with b a 1 x cols row broadcast over rows.
  Var linear(Var x, Var w, Var b);
  Var add(Var a, Var b);
  Var add(const std::vector<Var>& terms);
  Var scale(Var a, double s);
  Var silu(Var a);
  /// Per-row normalization with 1 x D gain and bias.
  Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
  /// Multi-head scaled dot-product attention. q is n x D, k and v are m x D,
  /// D divisible by `heads`. If `probs` is given it receives the per-head
  /// probabilities stacked vertically (heads * n x m).
  Var attention(Var q, Var k, Var v, int heads, MatXd* probs = nullptr);
  Var concat_rows(const std::vector<Var>& parts);
  Var concat_cols(const std::vector<Var>& parts);
  Var slice_rows(Var a, Eigen::Index start, Eigen::Index count);
  Var gather_rows(Var a, const std::vector<int>& rows);
  /// 3x3 zero-padded convolution on an H x W grid stored as (H*W) x Cin rows.
  /// `weight` is (9*Cin) x Cout with row (ky*3 + kx) * Cin + c; bias is 1 x Cout.
  Var conv3x3(Var x, int height, int width, Var weight, Var bias);
  /// Bilinear resize with half-pixel centers and edge clamping.
  Var resize_bilinear(Var x, int height, int width, int out_height, int out_width);

 private:
  using Backward = std::function<void(Tape&, Var)>;
  struct Node {
    MatXd value;
    MatXd grad;
    MatXd* sink = nullptr;
    bool requires_grad = false;
    Backward backward;
  };

  Var push(MatXd value, std::initializer_list<Var> inputs, Backward backward);
  Var push(MatXd value, const std::vector<Var>& inputs, Backward backward);
  /// Adds `g` into the gradient of `v` when it needs one.
  void accumulate(Var v, const MatXd& g);
  template <typename Expr>
  void accumulate_expr(Var v, const Expr& g);

  std::vector<Node> nodes_;
};

}  // namespace uika::ad
