#pragma once

// Matrix-level reverse-mode automatic differentiation.
//
// A Tape records every operation of one forward evaluation as a node holding
// its value and, when any input needs a gradient, a closure that pushes the
// node's adjoint back to its inputs. Batched activations are stacked
// vertically: a batch of B samples with T rows each is a (B*T) x C matrix,
// and ops that need the grouping take the per-sample row count explicitly.

#include <algorithm>
#include <functional>
#include <utility>
#include <vector>

#include "humancm/common.hpp"

namespace humancm::ad {

using Var = int;

enum class Distance { SquaredL2, PseudoHuber };

class Tape {
 public:
  explicit Tape(bool track_gradients = true) : track_(track_gradients) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value) { return push(std::move(value), false); }

  /// Leaf bound to an external array; the array must outlive the tape.
  Var parameter(const Matrix& value, int slot) {
    Node node;
    node.ref = &value;
    node.needs_grad = track_;
    node.slot = slot;
    nodes_.push_back(std::move(node));
    return static_cast<Var>(nodes_.size() - 1);
  }

  const Matrix& value(Var v) const {
    const Node& n = nodes_[static_cast<std::size_t>(v)];
    return n.ref != nullptr ? *n.ref : n.value;
  }

  bool needs_grad(Var v) const { return nodes_[static_cast<std::size_t>(v)].needs_grad; }

  /// Adjoint of `v`, zero-initialised on first access.
  Matrix& grad(Var v) {
    Node& n = nodes_[static_cast<std::size_t>(v)];
    if (n.grad.size() == 0) {
      const Matrix& val = value(v);
      n.grad = Matrix::Zero(val.rows(), val.cols());
    }
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

  // ---- linear algebra -----------------------------------------------------

  Var matmul(Var a, Var b) {
    Var out = push(value(a) * value(b), needs_grad(a) || needs_grad(b));
    on_backward(out, [this, a, b, out] {
      const Matrix& g = grad(out);
      if (needs_grad(a)) grad(a).noalias() += g * value(b).transpose();
      if (needs_grad(b)) grad(b).noalias() += value(a).transpose() * g;
    });
    return out;
  }

  /// x * W + b, with b a 1 x out row broadcast over rows.
  Var linear(Var x, Var weight, Var bias) {
    Matrix y = value(x) * value(weight);
    y.rowwise() += value(bias).row(0);
    Var out = push(std::move(y), needs_grad(x) || needs_grad(weight) || needs_grad(bias));
    on_backward(out, [this, x, weight, bias, out] {
      const Matrix& g = grad(out);
      if (needs_grad(x)) grad(x).noalias() += g * value(weight).transpose();
      if (needs_grad(weight)) grad(weight).noalias() += value(x).transpose() * g;
      if (needs_grad(bias)) grad(bias) += g.colwise().sum();
    });
    return out;
  }

  Var add(Var a, Var b) {
    require(value(a).rows() == value(b).rows() && value(a).cols() == value(b).cols(),
            "Tape::add: shape mismatch");
    Var out = push(value(a) + value(b), needs_grad(a) || needs_grad(b));
    on_backward(out, [this, a, b, out] {
      if (needs_grad(a)) grad(a) += grad(out);
      if (needs_grad(b)) grad(b) += grad(out);
    });
    return out;
  }

  /// Adds the T x C `block` to every consecutive T-row group of `a`.
  Var add_tiled(Var a, Var block) {
    const Eigen::Index t = value(block).rows();
    require(t > 0 && value(a).rows() % t == 0 && value(a).cols() == value(block).cols(),
            "Tape::add_tiled: shape mismatch");
    Matrix y = value(a);
    const Eigen::Index groups = y.rows() / t;
    for (Eigen::Index g = 0; g < groups; ++g) y.middleRows(g * t, t) += value(block);
    Var out = push(std::move(y), needs_grad(a) || needs_grad(block));
    on_backward(out, [this, a, block, t, groups, out] {
      const Matrix& g = grad(out);
      if (needs_grad(a)) grad(a) += g;
      if (needs_grad(block)) {
        Matrix& gb = grad(block);
        for (Eigen::Index i = 0; i < groups; ++i) gb += g.middleRows(i * t, t);
      }
    });
    return out;
  }

  /// Adds row i of `rows` (G x C) to the i-th group of `group` rows of `a`.
  Var add_grouped(Var a, Var rows, Eigen::Index group) {
    const Eigen::Index groups = value(rows).rows();
    require(value(a).rows() == groups * group && value(a).cols() == value(rows).cols(),
            "Tape::add_grouped: shape mismatch");
    Matrix y = value(a);
    for (Eigen::Index i = 0; i < groups; ++i)
      y.middleRows(i * group, group).rowwise() += value(rows).row(i);
    Var out = push(std::move(y), needs_grad(a) || needs_grad(rows));
    on_backward(out, [this, a, rows, group, groups, out] {
      const Matrix& g = grad(out);
      if (needs_grad(a)) grad(a) += g;
      if (needs_grad(rows)) {
        Matrix& gr = grad(rows);
        for (Eigen::Index i = 0; i < groups; ++i)
          gr.row(i) += g.middleRows(i * group, group).colwise().sum();
      }
    });
    return out;
  }

  Var gather_rows(Var src, std::vector<Eigen::Index> index) {
    Matrix y(static_cast<Eigen::Index>(index.size()), value(src).cols());
    for (std::size_t i = 0; i < index.size(); ++i)
      y.row(static_cast<Eigen::Index>(i)) = value(src).row(index[i]);
    Var out = push(std::move(y), needs_grad(src));
    on_backward(out, [this, src, index = std::move(index), out] {
      const Matrix& g = grad(out);
      Matrix& gs = grad(src);
      for (std::size_t i = 0; i < index.size(); ++i)
        gs.row(index[i]) += g.row(static_cast<Eigen::Index>(i));
    });
    return out;
  }

  /// Keeps the first `count` rows of every `period`-row group.
  Var take_leading_rows(Var a, Eigen::Index period, Eigen::Index count) {
    const Matrix& x = value(a);
    require(period > 0 && count <= period && x.rows() % period == 0,
            "Tape::take_leading_rows: shape mismatch");
    const Eigen::Index groups = x.rows() / period;
    Matrix y(groups * count, x.cols());
    for (Eigen::Index g = 0; g < groups; ++g)
      y.middleRows(g * count, count) = x.middleRows(g * period, count);
    Var out = push(std::move(y), needs_grad(a));
    on_backward(out, [this, a, period, count, groups, out] {
      const Matrix& g = grad(out);
      Matrix& ga = grad(a);
      for (Eigen::Index i = 0; i < groups; ++i)
        ga.middleRows(i * period, count) += g.middleRows(i * count, count);
    });
    return out;
  }

  /// Per group i: scale[i] * a_i + offset_i, with `offset` a constant.
  Var scale_shift_groups(Var a, std::vector<double> scale, Matrix offset) {
    const Matrix& x = value(a);
    const auto groups = static_cast<Eigen::Index>(scale.size());
    require(groups > 0 && x.rows() % groups == 0, "Tape::scale_shift_groups: bad grouping");
    require(offset.rows() == x.rows() && offset.cols() == x.cols(),
            "Tape::scale_shift_groups: offset shape mismatch");
    const Eigen::Index rows = x.rows() / groups;
    Matrix y = std::move(offset);
    for (Eigen::Index g = 0; g < groups; ++g)
      y.middleRows(g * rows, rows) += scale[static_cast<std::size_t>(g)] * x.middleRows(g * rows, rows);
    Var out = push(std::move(y), needs_grad(a));
    on_backward(out, [this, a, scale = std::move(scale), rows, out] {
      const Matrix& g = grad(out);
      Matrix& ga = grad(a);
      for (std::size_t i = 0; i < scale.size(); ++i) {
        const auto r0 = static_cast<Eigen::Index>(i) * rows;
        ga.middleRows(r0, rows) += scale[i] * g.middleRows(r0, rows);
      }
    });
    return out;
  }

  /// Interleaves per-sample token blocks: for sample b the first `lead` rows
  /// come from `lead_rows`, the next `tail` rows from `tail_rows` or, where
  /// use_fill[b] is set, from the 1 x C `fill` row repeated.
  Var assemble_tokens(const Matrix& lead_rows, Eigen::Index lead, const Matrix& tail_rows,
                      Eigen::Index tail, const std::vector<bool>& use_fill, Var fill) {
    const auto batch = static_cast<Eigen::Index>(use_fill.size());
    const Eigen::Index cols = lead_rows.cols();
    require(lead_rows.rows() == batch * lead, "Tape::assemble_tokens: lead rows mismatch");
    require(tail_rows.rows() == batch * tail && tail_rows.cols() == cols,
            "Tape::assemble_tokens: tail rows mismatch");
    require(value(fill).rows() == 1 && value(fill).cols() == cols,
            "Tape::assemble_tokens: fill row mismatch");
    const Eigen::Index period = lead + tail;
    Matrix y(batch * period, cols);
    for (Eigen::Index b = 0; b < batch; ++b) {
      y.middleRows(b * period, lead) = lead_rows.middleRows(b * lead, lead);
      if (use_fill[static_cast<std::size_t>(b)])
        y.middleRows(b * period + lead, tail) = value(fill).replicate(tail, 1);
      else
        y.middleRows(b * period + lead, tail) = tail_rows.middleRows(b * tail, tail);
    }
    const bool any_fill = std::find(use_fill.begin(), use_fill.end(), true) != use_fill.end();
    Var out = push(std::move(y), any_fill && needs_grad(fill));
    on_backward(out, [this, fill, use_fill, lead, tail, period, out] {
      const Matrix& g = grad(out);
      Matrix& gf = grad(fill);
      for (std::size_t b = 0; b < use_fill.size(); ++b)
        if (use_fill[b])
          gf += g.middleRows(static_cast<Eigen::Index>(b) * period + lead, tail).colwise().sum();
    });
    return out;
  }

  // ---- nonlinearities -----------------------------------------------------

  Var silu(Var a) {
    const Matrix& x = value(a);
    const Matrix sig = (1.0 + (-x.array()).exp()).inverse().matrix();
    Var out = push((x.array() * sig.array()).matrix(), needs_grad(a));
    on_backward(out, [this, a, sig, out] {
      const auto x = value(a).array();
      grad(a).array() += grad(out).array() * (sig.array() * (1.0 + x * (1.0 - sig.array())));
    });
    return out;
  }

  static constexpr double kGeluScale = 0.7978845608028654;  // sqrt(2 / pi)
  static constexpr double kGeluCubic = 0.044715;

  /// Tanh-approximated GELU.
  Var gelu(Var a) {
    const double k0 = kGeluScale;
    const double k1 = kGeluCubic;
    const auto x = value(a).array();
    const Matrix th = (k0 * (x + k1 * x.cube())).tanh().matrix();
    Var out = push((0.5 * x * (1.0 + th.array())).matrix(), needs_grad(a));
    on_backward(out, [this, a, th, k0, k1, out] {
      const auto x = value(a).array();
      const auto t = th.array();
      const auto d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t.square()) * k0 * (1.0 + 3.0 * k1 * x.square());
      grad(a).array() += grad(out).array() * d;
    });
    return out;
  }

  /// Row-wise layer normalisation with 1 x C gain and bias.
  Var layer_norm(Var a, Var gain, Var bias, double eps = 1e-5) {
    const Matrix& x = value(a);
    const Eigen::Index cols = x.cols();
    const Vector mean = x.rowwise().mean();
    Matrix centered = x.colwise() - mean;
    const Vector inv_std =
        ((centered.array().square().rowwise().sum() / static_cast<double>(cols)) + eps).rsqrt();
    Matrix xhat = centered.array().colwise() * inv_std.array();
    Matrix y = xhat.array().rowwise() * value(gain).row(0).array();
    y.rowwise() += value(bias).row(0);
    Var out = push(std::move(y), needs_grad(a) || needs_grad(gain) || needs_grad(bias));
    on_backward(out, [this, a, gain, bias, xhat = std::move(xhat), inv_std, cols, out] {
      const Matrix& g = grad(out);
      if (needs_grad(gain)) grad(gain) += (g.array() * xhat.array()).colwise().sum().matrix();
      if (needs_grad(bias)) grad(bias) += g.colwise().sum();
      if (needs_grad(a)) {
        const Matrix dxhat = g.array().rowwise() * value(gain).row(0).array();
        const Vector m1 = dxhat.rowwise().mean();
        const Vector m2 = (dxhat.array() * xhat.array()).rowwise().sum() / static_cast<double>(cols);
        Matrix dx = dxhat.colwise() - m1;
        dx -= (xhat.array().colwise() * m2.array()).matrix();
        grad(a) += (dx.array().colwise() * inv_std.array()).matrix();
      }
    });
    return out;
  }

  /// Multi-head scaled dot-product self-attention within each `seq`-row group.
  /// q, k, v are (B*seq) x D with D split evenly across `heads`.
  Var attention(Var q, Var k, Var v, Eigen::Index seq, Eigen::Index heads) {
    const Matrix& Q = value(q);
    const Matrix& K = value(k);
    const Matrix& V = value(v);
    const Eigen::Index dim = Q.cols();
    require(heads > 0 && dim % heads == 0, "Tape::attention: width not divisible by heads");
    require(seq > 0 && Q.rows() % seq == 0, "Tape::attention: rows not divisible by seq");
    const Eigen::Index dh = dim / heads;
    const Eigen::Index batch = Q.rows() / seq;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    std::vector<Matrix> probs(static_cast<std::size_t>(batch * heads));
    Matrix y(Q.rows(), dim);
    for (Eigen::Index b = 0; b < batch; ++b) {
      for (Eigen::Index h = 0; h < heads; ++h) {
        Matrix s = scale * (Q.block(b * seq, h * dh, seq, dh) *
                            K.block(b * seq, h * dh, seq, dh).transpose());
        s.colwise() -= s.rowwise().maxCoeff();
        s = s.array().exp().matrix();
        s.array().colwise() /= s.rowwise().sum().array();
        y.block(b * seq, h * dh, seq, dh).noalias() = s * V.block(b * seq, h * dh, seq, dh);
        probs[static_cast<std::size_t>(b * heads + h)] = std::move(s);
      }
    }
    Var out = push(std::move(y), needs_grad(q) || needs_grad(k) || needs_grad(v));
    on_backward(out, [this, q, k, v, seq, heads, dh, batch, scale, probs = std::move(probs), out] {
      const Matrix& g = grad(out);
      const Matrix& Qv = value(q);
      const Matrix& Kv = value(k);
      const Matrix& Vv = value(v);
      Matrix& gq = grad(q);
      Matrix& gk = grad(k);
      Matrix& gv = grad(v);
      for (Eigen::Index b = 0; b < batch; ++b) {
        for (Eigen::Index h = 0; h < heads; ++h) {
          const Matrix& p = probs[static_cast<std::size_t>(b * heads + h)];
          const auto go = g.block(b * seq, h * dh, seq, dh);
          gv.block(b * seq, h * dh, seq, dh).noalias() += p.transpose() * go;
          const Matrix dp = go * Vv.block(b * seq, h * dh, seq, dh).transpose();
          const Vector row_dot = (dp.array() * p.array()).rowwise().sum();
          const Matrix ds = scale * (p.array() * (dp.array().colwise() - row_dot.array())).matrix();
          gq.block(b * seq, h * dh, seq, dh).noalias() += ds * Kv.block(b * seq, h * dh, seq, dh);
          gk.block(b * seq, h * dh, seq, dh).noalias() += ds.transpose() * Qv.block(b * seq, h * dh, seq, dh);
        }
      }
    });
    return out;
  }

  // ---- reductions ---------------------------------------------------------

  Var sum_squares(Var a) {
    Matrix y(1, 1);
    y(0, 0) = value(a).squaredNorm();
    Var out = push(std::move(y), needs_grad(a));
    on_backward(out, [this, a, out] { grad(a) += 2.0 * grad(out)(0, 0) * value(a); });
    return out;
  }

  /// sum_i weight[i] * d(a_i, target_i) over consecutive row groups, where d is
  /// the element-mean squared error or the pseudo-Huber distance
  /// sqrt(|a_i - target_i|^2 + c^2) - c.
  Var distance(Var a, const Matrix& target, const std::vector<double>& weight, Distance kind,
               double huber_c = 1e-3) {
    const Matrix& x = value(a);
    const auto groups = static_cast<Eigen::Index>(weight.size());
    require(target.rows() == x.rows() && target.cols() == x.cols(),
            "Tape::distance: target shape mismatch");
    require(groups > 0 && x.rows() % groups == 0, "Tape::distance: bad grouping");
    const Eigen::Index rows = x.rows() / groups;
    const double numel = static_cast<double>(rows * x.cols());
    Matrix diff = x - target;
    std::vector<double> coef(weight.size());
    double total = 0.0;
    for (Eigen::Index g = 0; g < groups; ++g) {
      const double sq = diff.middleRows(g * rows, rows).squaredNorm();
      const double w = weight[static_cast<std::size_t>(g)];
      if (kind == Distance::SquaredL2) {
        total += w * sq / numel;
        coef[static_cast<std::size_t>(g)] = 2.0 * w / numel;
      } else {
        const double root = std::sqrt(sq + huber_c * huber_c);
        total += w * (root - huber_c);
        coef[static_cast<std::size_t>(g)] = w / root;
      }
    }
    Matrix y(1, 1);
    y(0, 0) = total;
    Var out = push(std::move(y), needs_grad(a));
    on_backward(out, [this, a, diff = std::move(diff), coef = std::move(coef), rows, out] {
      const double up = grad(out)(0, 0);
      Matrix& ga = grad(a);
      for (std::size_t g = 0; g < coef.size(); ++g) {
        const auto r0 = static_cast<Eigen::Index>(g) * rows;
        ga.middleRows(r0, rows) += (up * coef[g]) * diff.middleRows(r0, rows);
      }
    });
    return out;
  }

  // ---- backward -----------------------------------------------------------

  /// Propagates d(root)/d(node) for a 1 x 1 root.
  void backward(Var root) {
    require(value(root).size() == 1, "Tape::backward: root must be a scalar");
    if (!needs_grad(root)) return;
    grad(root)(0, 0) += 1.0;
    for (auto i = static_cast<std::size_t>(root) + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.back && n.grad.size() != 0) n.back();
    }
  }

  /// Adds parameter-leaf adjoints into `grads`, indexed by slot.
  void accumulate_parameter_grads(std::vector<Matrix>& grads) const {
    for (const Node& n : nodes_) {
      if (n.slot < 0 || n.grad.size() == 0) continue;
      Matrix& dst = grads[static_cast<std::size_t>(n.slot)];
      if (dst.size() == 0) dst = Matrix::Zero(n.grad.rows(), n.grad.cols());
      dst += n.grad;
    }
  }

 private:
  struct Node {
    Matrix value;
    const Matrix* ref = nullptr;
    Matrix grad;
    bool needs_grad = false;
    int slot = -1;
    std::function<void()> back;
  };

  Var push(Matrix value, bool needs_grad) {
    Node node;
    node.value = std::move(value);
    node.needs_grad = needs_grad;
    nodes_.push_back(std::move(node));
    return static_cast<Var>(nodes_.size() - 1);
  }

  template <class F>
  void on_backward(Var v, F&& fn) {
    Node& n = nodes_[static_cast<std::size_t>(v)];
    if (n.needs_grad) n.back = std::forward<F>(fn);
  }

  bool track_;
  std::vector<Node> nodes_;
};

/// Loss value and gradient w.r.t. every array in `params`. `loss_fn` receives
/// the tape and one leaf per array and returns a scalar node.
template <class LossFn>
std::pair<double, std::vector<Matrix>> value_and_grad(const std::vector<Matrix>& params,
                                                      LossFn&& loss_fn) {
  Tape tape(true);
  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i)
    leaves.push_back(tape.parameter(params[i], static_cast<int>(i)));
  const Var loss = loss_fn(tape, leaves);
  const double value = tape.value(loss)(0, 0);
  if (!std::isfinite(value)) throw NumericalError("non-finite loss value");
  tape.backward(loss);
  std::vector<Matrix> grads(params.size());
  tape.accumulate_parameter_grads(grads);
  for (std::size_t i = 0; i < params.size(); ++i)
    if (grads[i].size() == 0) grads[i] = Matrix::Zero(params[i].rows(), params[i].cols());
  return {value, std::move(grads)};
}

}  // namespace humancm::ad
