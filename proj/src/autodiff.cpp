#include "uika/autodiff.hpp"

#include <Eigen/SparseCore>

#include <algorithm>
#include <cmath>

namespace uika::ad {

Var Tape::constant(MatXd value) {
  nodes_.push_back(Node{std::move(value), {}, nullptr, false, {}});
  return static_cast<Var>(nodes_.size() - 1);
}

Var Tape::leaf(MatXd value, MatXd* sink) {
  nodes_.push_back(Node{std::move(value), {}, sink, true, {}});
  return static_cast<Var>(nodes_.size() - 1);
}

Var Tape::push(MatXd value, const std::vector<Var>& inputs, Backward backward) {
  bool req = false;
  for (Var v : inputs) req = req || nodes_[v].requires_grad;
  nodes_.push_back(Node{std::move(value), {}, nullptr, req, req ? std::move(backward) : Backward{}});
  return static_cast<Var>(nodes_.size() - 1);
}

Var Tape::push(MatXd value, std::initializer_list<Var> inputs, Backward backward) {
  return push(std::move(value), std::vector<Var>(inputs), std::move(backward));
}

void Tape::accumulate(Var v, const MatXd& g) { accumulate_expr(v, g); }

template <typename Expr>
void Tape::accumulate_expr(Var v, const Expr& g) {
  Node& n = nodes_[v];
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) n.grad = g;
  else n.grad += g;
}

void Tape::backward(const std::vector<std::pair<Var, MatXd>>& seeds) {
  for (const auto& [v, g] : seeds) {
    require(g.rows() == nodes_[v].value.rows() && g.cols() == nodes_[v].value.cols(),
            "backward seed shape does not match its variable");
    accumulate(v, g);
  }
  for (Var v = static_cast<Var>(nodes_.size()) - 1; v >= 0; --v) {
    Node& n = nodes_[v];
    if (n.grad.size() == 0) continue;
    if (n.backward) n.backward(*this, v);
    if (n.sink) {
      if (n.sink->size() == 0) *n.sink = MatXd::Zero(n.grad.rows(), n.grad.cols());
      *n.sink += n.grad;
    }
  }
}

// ---------------------------------------------------------------------------

Var Tape::matmul(Var a, Var b) {
  require(value(a).cols() == value(b).rows(), "matmul: inner dimensions differ");
  MatXd out = value(a) * value(b);
  return push(std::move(out), {a, b}, [a, b](Tape& t, Var self) {
    const MatXd& g = t.nodes_[self].grad;
    if (t.requires_grad(a)) t.accumulate(a, g * t.value(b).transpose());
    if (t.requires_grad(b)) t.accumulate(b, t.value(a).transpose() * g);
  });
}

Var Tape::linear(Var x, Var w, Var b) {
  require(value(x).cols() == value(w).rows(), "linear: input width does not match weight rows");
  require(value(b).rows() == 1 && value(b).cols() == value(w).cols(), "linear: bias must be 1 x out");
  MatXd out = value(x) * value(w);
  out.rowwise() += value(b).row(0);
  return push(std::move(out), {x, w, b}, [x, w, b](Tape& t, Var self) {
    const MatXd& g = t.nodes_[self].grad;
    if (t.requires_grad(x)) t.accumulate(x, g * t.value(w).transpose());
    if (t.requires_grad(w)) t.accumulate(w, t.value(x).transpose() * g);
    if (t.requires_grad(b)) t.accumulate(b, g.colwise().sum());
  });
}

Var Tape::add(Var a, Var b) { return add(std::vector<Var>{a, b}); }

Var Tape::add(const std::vector<Var>& terms) {
  require(!terms.empty(), "add: no terms");
  MatXd out = value(terms[0]);
  for (std::size_t i = 1; i < terms.size(); ++i) {
    require(value(terms[i]).rows() == out.rows() && value(terms[i]).cols() == out.cols(), "add: shape mismatch");
    out += value(terms[i]);
  }
  return push(std::move(out), terms, [terms](Tape& t, Var self) {
    for (Var v : terms) t.accumulate(v, t.nodes_[self].grad);
  });
}

Var Tape::scale(Var a, double s) {
  return push(value(a) * s, {a}, [a, s](Tape& t, Var self) { t.accumulate_expr(a, t.nodes_[self].grad * s); });
}

Var Tape::silu(Var a) {
  const MatXd& x = value(a);
  MatXd out = x.array() / (1.0 + (-x.array()).exp());
  return push(std::move(out), {a}, [a](Tape& t, Var self) {
    const auto x = t.value(a).array();
    const Eigen::ArrayXXd s = 1.0 / (1.0 + (-x).exp());
    t.accumulate_expr(a, (t.nodes_[self].grad.array() * s * (1.0 + x * (1.0 - s))).matrix());
  });
}

Var Tape::layer_norm(Var x, Var gain, Var bias, double eps) {
  const MatXd& in = value(x);
  const Eigen::Index D = in.cols();
  require(value(gain).rows() == 1 && value(gain).cols() == D, "layer_norm: gain must be 1 x D");
  require(value(bias).rows() == 1 && value(bias).cols() == D, "layer_norm: bias must be 1 x D");
  MatXd xhat(in.rows(), D);
  VecXd inv_std(in.rows());
  for (Eigen::Index r = 0; r < in.rows(); ++r) {
    const double mean = in.row(r).mean();
    const double var = (in.row(r).array() - mean).square().mean();
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (in.row(r).array() - mean) * inv_std[r];
  }
  MatXd out = xhat.array().rowwise() * value(gain).row(0).array();
  out.rowwise() += value(bias).row(0);
  return push(std::move(out), {x, gain, bias}, [x, gain, bias, xhat, inv_std](Tape& t, Var self) {
    const MatXd& g = t.nodes_[self].grad;
    if (t.requires_grad(gain)) t.accumulate(gain, (g.array() * xhat.array()).colwise().sum().matrix());
    if (t.requires_grad(bias)) t.accumulate(bias, g.colwise().sum());
    if (!t.requires_grad(x)) return;
    const MatXd dxhat = g.array().rowwise() * t.value(gain).row(0).array();
    MatXd dx(g.rows(), g.cols());
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      const double m1 = dxhat.row(r).mean();
      const double m2 = dxhat.row(r).dot(xhat.row(r)) / static_cast<double>(g.cols());
      dx.row(r) = inv_std[r] * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
    }
    t.accumulate(x, dx);
  });
}

namespace {

/// Row softmax of scale * Q K^T for one head.
MatXd head_probs(const MatXd& q, const MatXd& k, Eigen::Index c0, Eigen::Index hd, double s) {
  MatXd p = (q.middleCols(c0, hd) * k.middleCols(c0, hd).transpose()) * s;
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    const double mx = p.row(r).maxCoeff();
    p.row(r) = (p.row(r).array() - mx).exp();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}

}  // namespace

Var Tape::attention(Var q, Var k, Var v, int heads, MatXd* probs) {
  const MatXd& Q = value(q);
  const MatXd& K = value(k);
  const MatXd& V = value(v);
  const Eigen::Index D = Q.cols();
  require(heads > 0 && D % heads == 0, "attention: width must be divisible by the head count");
  require(K.cols() == D && V.cols() == D && K.rows() == V.rows(), "attention: q/k/v shapes disagree");
  const Eigen::Index hd = D / heads;
  const double s = 1.0 / std::sqrt(static_cast<double>(hd));
  MatXd out(Q.rows(), D);
  if (probs) probs->resize(heads * Q.rows(), K.rows());
  for (int h = 0; h < heads; ++h) {
    const MatXd p = head_probs(Q, K, h * hd, hd, s);
    out.middleCols(h * hd, hd) = p * V.middleCols(h * hd, hd);
    if (probs) probs->middleRows(h * Q.rows(), Q.rows()) = p;
  }
  // Probabilities are recomputed in backward rather than kept on the tape.
  return push(std::move(out), {q, k, v}, [q, k, v, heads, hd, s](Tape& t, Var self) {
    const MatXd& g = t.nodes_[self].grad;
    const MatXd& Q = t.value(q);
    const MatXd& K = t.value(k);
    const MatXd& V = t.value(v);
    MatXd dq = MatXd::Zero(Q.rows(), Q.cols()), dk = MatXd::Zero(K.rows(), K.cols()),
          dv = MatXd::Zero(V.rows(), V.cols());
    for (int h = 0; h < heads; ++h) {
      const Eigen::Index c0 = h * hd;
      const MatXd p = head_probs(Q, K, c0, hd, s);
      const auto go = g.middleCols(c0, hd);
      dv.middleCols(c0, hd) = p.transpose() * go;
      const MatXd dp = go * V.middleCols(c0, hd).transpose();
      const VecXd rowdot = (dp.array() * p.array()).rowwise().sum();
      const MatXd ds = (p.array() * (dp.colwise() - rowdot).array()) * s;
      dq.middleCols(c0, hd) = ds * K.middleCols(c0, hd);
      dk.middleCols(c0, hd) = ds.transpose() * Q.middleCols(c0, hd);
    }
    t.accumulate(q, dq);
    t.accumulate(k, dk);
    t.accumulate(v, dv);
  });
}

Var Tape::concat_rows(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_rows: no parts");
  Eigen::Index rows = 0;
  const Eigen::Index cols = value(parts[0]).cols();
  for (Var p : parts) {
    require(value(p).cols() == cols, "concat_rows: column counts differ");
    rows += value(p).rows();
  }
  MatXd out(rows, cols);
  Eigen::Index r = 0;
  for (Var p : parts) {
    out.middleRows(r, value(p).rows()) = value(p);
    r += value(p).rows();
  }
  return push(std::move(out), parts, [parts](Tape& t, Var self) {
    Eigen::Index r = 0;
    for (Var p : parts) {
      const Eigen::Index n = t.value(p).rows();
      t.accumulate_expr(p, t.nodes_[self].grad.middleRows(r, n));
      r += n;
    }
  });
}

Var Tape::concat_cols(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_cols: no parts");
  Eigen::Index cols = 0;
  const Eigen::Index rows = value(parts[0]).rows();
  for (Var p : parts) {
    require(value(p).rows() == rows, "concat_cols: row counts differ");
    cols += value(p).cols();
  }
  MatXd out(rows, cols);
  Eigen::Index c = 0;
  for (Var p : parts) {
    out.middleCols(c, value(p).cols()) = value(p);
    c += value(p).cols();
  }
  return push(std::move(out), parts, [parts](Tape& t, Var self) {
    Eigen::Index c = 0;
    for (Var p : parts) {
      const Eigen::Index n = t.value(p).cols();
      t.accumulate_expr(p, t.nodes_[self].grad.middleCols(c, n));
      c += n;
    }
  });
}

Var Tape::slice_rows(Var a, Eigen::Index start, Eigen::Index count) {
  require(start >= 0 && count >= 0 && start + count <= value(a).rows(), "slice_rows: range out of bounds");
  MatXd out = value(a).middleRows(start, count);
  return push(std::move(out), {a}, [a, start, count](Tape& t, Var self) {
    MatXd g = MatXd::Zero(t.value(a).rows(), t.value(a).cols());
    g.middleRows(start, count) = t.nodes_[self].grad;
    t.accumulate(a, g);
  });
}

Var Tape::gather_rows(Var a, const std::vector<int>& rows) {
  const MatXd& in = value(a);
  MatXd out(static_cast<Eigen::Index>(rows.size()), in.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] >= 0 && rows[i] < in.rows(), "gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = in.row(rows[i]);
  }
  return push(std::move(out), {a}, [a, rows](Tape& t, Var self) {
    const MatXd& g = t.nodes_[self].grad;
    MatXd d = MatXd::Zero(t.value(a).rows(), t.value(a).cols());
    for (std::size_t i = 0; i < rows.size(); ++i) d.row(rows[i]) += g.row(static_cast<Eigen::Index>(i));
    t.accumulate(a, d);
  });
}

namespace {

/// im2col for a 3x3 zero-padded stencil: (H*W) x (9*C).
MatXd im2col3(const MatXd& x, int H, int W) {
  const Eigen::Index C = x.cols();
  MatXd cols = MatXd::Zero(x.rows(), 9 * C);
  for (int y = 0; y < H; ++y)
    for (int xx = 0; xx < W; ++xx) {
      const Eigen::Index p = Eigen::Index(y) * W + xx;
      for (int ky = 0; ky < 3; ++ky) {
        const int sy = y + ky - 1;
        if (sy < 0 || sy >= H) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int sx = xx + kx - 1;
          if (sx < 0 || sx >= W) continue;
          cols.block(p, (ky * 3 + kx) * C, 1, C) = x.row(Eigen::Index(sy) * W + sx);
        }
      }
    }
  return cols;
}

MatXd col2im3(const MatXd& cols, int H, int W, Eigen::Index C) {
  MatXd x = MatXd::Zero(Eigen::Index(H) * W, C);
  for (int y = 0; y < H; ++y)
    for (int xx = 0; xx < W; ++xx) {
      const Eigen::Index p = Eigen::Index(y) * W + xx;
      for (int ky = 0; ky < 3; ++ky) {
        const int sy = y + ky - 1;
        if (sy < 0 || sy >= H) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int sx = xx + kx - 1;
          if (sx < 0 || sx >= W) continue;
          x.row(Eigen::Index(sy) * W + sx) += cols.block(p, (ky * 3 + kx) * C, 1, C);
        }
      }
    }
  return x;
}

using SparseMat = Eigen::SparseMatrix<double, Eigen::RowMajor>;

/// Interpolation weights along one axis.
void axis_taps(int n, int out_n, int o, int& i0, int& i1, double& f) {
  double src = (o + 0.5) * n / out_n - 0.5;
  src = std::clamp(src, 0.0, double(n - 1));
  i0 = static_cast<int>(std::floor(src));
  i1 = std::min(i0 + 1, n - 1);
  f = src - i0;
}

SparseMat resize_matrix(int h, int w, int H, int W) {
  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(std::size_t(H) * W * 4);
  for (int y = 0; y < H; ++y) {
    int y0, y1;
    double fy;
    axis_taps(h, H, y, y0, y1, fy);
    for (int x = 0; x < W; ++x) {
      int x0, x1;
      double fx;
      axis_taps(w, W, x, x0, x1, fx);
      const int row = y * W + x;
      trip.emplace_back(row, y0 * w + x0, (1 - fy) * (1 - fx));
      trip.emplace_back(row, y0 * w + x1, (1 - fy) * fx);
      trip.emplace_back(row, y1 * w + x0, fy * (1 - fx));
      trip.emplace_back(row, y1 * w + x1, fy * fx);
    }
  }
  SparseMat m(Eigen::Index(H) * W, Eigen::Index(h) * w);
  m.setFromTriplets(trip.begin(), trip.end());  // duplicates at clamped edges are summed
  return m;
}

}  // namespace

Var Tape::conv3x3(Var x, int height, int width, Var weight, Var bias) {
  const MatXd& in = value(x);
  require(in.rows() == Eigen::Index(height) * width, "conv3x3: row count is not height * width");
  require(value(weight).rows() == 9 * in.cols(), "conv3x3: weight rows must be 9 * input channels");
  require(value(bias).rows() == 1 && value(bias).cols() == value(weight).cols(), "conv3x3: bias must be 1 x out");
  MatXd cols = im2col3(in, height, width);
  MatXd out = cols * value(weight);
  out.rowwise() += value(bias).row(0);
  return push(std::move(out), {x, weight, bias},
              [x, weight, bias, height, width, cols = std::move(cols)](Tape& t, Var self) {
                const MatXd& g = t.nodes_[self].grad;
                if (t.requires_grad(weight)) t.accumulate(weight, cols.transpose() * g);
                if (t.requires_grad(bias)) t.accumulate(bias, g.colwise().sum());
                if (t.requires_grad(x))
                  t.accumulate(x, col2im3(g * t.value(weight).transpose(), height, width, t.value(x).cols()));
              });
}

Var Tape::resize_bilinear(Var x, int height, int width, int out_height, int out_width) {
  require(value(x).rows() == Eigen::Index(height) * width, "resize_bilinear: row count is not height * width");
  require(out_height > 0 && out_width > 0, "resize_bilinear: empty output");
  SparseMat m = resize_matrix(height, width, out_height, out_width);
  MatXd out = m * value(x);
  return push(std::move(out), {x}, [x, m = std::move(m)](Tape& t, Var self) {
    t.accumulate(x, MatXd(m.transpose() * t.nodes_[self].grad));
  });
}

}  // namespace uika::ad
