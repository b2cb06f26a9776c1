#pragma once

// Reverse-mode differentiation over dense Eigen matrices.
//
// A Tape records every operation of one forward pass. Values are stored in
// double precision; gradients are accumulated lazily and only for nodes that
// depend on at least one leaf created with `variable`.

#include "metapns/common.hpp"

#include <cmath>
#include <deque>
#include <functional>
#include <vector>

namespace metapns::ad {

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Mat& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
  bool valid() const { return tape_ != nullptr; }

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Mat& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Mat value) { return push(std::move(value), false, nullptr); }
  Var variable(Mat value) { return push(std::move(value), true, nullptr); }

  /// Records a result. `backward` runs only if some input needs a gradient.
  Var record(Mat value, std::initializer_list<Var> inputs, Backward backward) {
    bool needs = false;
    for (const Var& v : inputs) needs = needs || node(v).needs_grad;
    return push(std::move(value), needs, needs ? std::move(backward) : nullptr);
  }
  Var record(Mat value, const std::vector<Var>& inputs, Backward backward) {
    bool needs = false;
    for (const Var& v : inputs) needs = needs || node(v).needs_grad;
    return push(std::move(value), needs, needs ? std::move(backward) : nullptr);
  }

  const Mat& value(const Var& v) const { return nodes_[v.id()].value; }
  bool needs_grad(const Var& v) const { return nodes_[v.id()].needs_grad; }

  void accumulate(const Var& v, const Mat& g) {
    Node& n = nodes_[v.id()];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }
  template <typename Expr>
  void accumulate_expr(const Var& v, const Expr& g) {
    Node& n = nodes_[v.id()];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  /// Seeds d(root)/d(root) = 1 for a 1x1 root and propagates.
  void backward(const Var& root) {
    require(root.rows() == 1 && root.cols() == 1, "backward root must be scalar");
    backward({{root, Mat::Ones(1, 1)}});
  }

  /// Propagates from several outputs with explicit upstream gradients.
  void backward(const std::vector<std::pair<Var, Mat>>& seeds) {
    std::size_t top = 0;
    for (const auto& [v, g] : seeds) {
      require(g.rows() == v.rows() && g.cols() == v.cols(), "seed gradient shape mismatch");
      accumulate(v, g);
      top = std::max(top, v.id() + 1);
    }
    for (std::size_t i = top; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.size() == 0) continue;
      // The closure may accumulate into earlier nodes only, so `n` stays valid.
      n.backward(*this, n.grad);
    }
  }

  /// Gradient of a node after backward; zeros if nothing flowed into it.
  Mat grad(const Var& v) const {
    const Node& n = nodes_[v.id()];
    if (n.grad.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool needs_grad = false;
    Backward backward;
  };

  const Node& node(const Var& v) const {
    require(v.tape() == this, "variable belongs to a different tape");
    return nodes_[v.id()];
  }

  Var push(Mat value, bool needs, Backward backward) {
    nodes_.push_back(Node{std::move(value), Mat(), needs, std::move(backward)});
    return Var(this, nodes_.size() - 1);
  }

  std::deque<Node> nodes_;
};

inline const Mat& Var::value() const { return tape_->value(*this); }

// ---------------------------------------------------------------------------
// Elementwise and linear-algebra operations.

inline void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    fail(cat(op, ": shape mismatch ", a.rows(), "x", a.cols(), " vs ", b.rows(), "x", b.cols()));
}

inline Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  return a.tape()->record(a.value() + b.value(), {a, b}, [a, b](Tape& t, const Mat& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

inline Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  return a.tape()->record(a.value() - b.value(), {a, b}, [a, b](Tape& t, const Mat& g) {
    t.accumulate(a, g);
    t.accumulate_expr(b, -g);
  });
}

inline Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  return a.tape()->record(a.value().cwiseProduct(b.value()), {a, b}, [a, b](Tape& t, const Mat& g) {
    t.accumulate_expr(a, g.cwiseProduct(b.value()));
    t.accumulate_expr(b, g.cwiseProduct(a.value()));
  });
}

inline Var div(const Var& a, const Var& b) {
  check_same_shape(a, b, "div");
  return a.tape()->record(a.value().cwiseQuotient(b.value()), {a, b}, [a, b](Tape& t, const Mat& g) {
    const Mat& bv = b.value();
    t.accumulate_expr(a, g.cwiseQuotient(bv));
    t.accumulate_expr(b, -(g.cwiseProduct(a.value()).cwiseQuotient(bv.cwiseProduct(bv))));
  });
}

inline Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows())
    fail(cat("matmul: inner dimension mismatch ", a.cols(), " vs ", b.rows()));
  Mat out;
  out.noalias() = a.value() * b.value();
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape& t, const Mat& g) {
    if (t.needs_grad(a)) t.accumulate_expr(a, g * b.value().transpose());
    if (t.needs_grad(b)) t.accumulate_expr(b, a.value().transpose() * g);
  });
}

/// a (n x c) + row (1 x c) broadcast over rows.
inline Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols())
    fail(cat("add_row: expected 1x", a.cols(), " row, got ", row.rows(), "x", row.cols()));
  Mat out = a.value().rowwise() + row.value().row(0);
  return a.tape()->record(std::move(out), {a, row}, [a, row](Tape& t, const Mat& g) {
    t.accumulate(a, g);
    t.accumulate_expr(row, g.colwise().sum());
  });
}

inline Var scale(const Var& a, double s) {
  return a.tape()->record(a.value() * s, {a}, [a, s](Tape& t, const Mat& g) { t.accumulate_expr(a, g * s); });
}

/// s * a + offset, elementwise.
inline Var affine(const Var& a, double s, double offset) {
  Mat out = (a.value().array() * s + offset).matrix();
  return a.tape()->record(std::move(out), {a}, [a, s](Tape& t, const Mat& g) { t.accumulate_expr(a, g * s); });
}

inline Var sigmoid(const Var& a) {
  Mat out = a.value().unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
  return a.tape()->record(out, {a}, [a, y = out](Tape& t, const Mat& g) {
    t.accumulate_expr(a, g.cwiseProduct((y.array() * (1.0 - y.array())).matrix()));
  });
}

inline Var tanh(const Var& a) {
  Mat out = a.value().array().tanh().matrix();
  return a.tape()->record(out, {a}, [a, y = out](Tape& t, const Mat& g) {
    t.accumulate_expr(a, g.cwiseProduct((1.0 - y.array().square()).matrix()));
  });
}

inline Var elu(const Var& a) {
  Mat out = a.value().unaryExpr([](double x) { return x > 0.0 ? x : std::expm1(x); });
  return a.tape()->record(std::move(out), {a}, [a](Tape& t, const Mat& g) {
    Mat d = a.value().unaryExpr([](double x) { return x > 0.0 ? 1.0 : std::exp(x); });
    t.accumulate_expr(a, g.cwiseProduct(d));
  });
}

inline double softplus_scalar(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

inline Var softplus(const Var& a) {
  Mat out = a.value().unaryExpr(&softplus_scalar);
  return a.tape()->record(std::move(out), {a}, [a](Tape& t, const Mat& g) {
    Mat d = a.value().unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
    t.accumulate_expr(a, g.cwiseProduct(d));
  });
}

inline Var log(const Var& a) {
  Mat out = a.value().array().log().matrix();
  return a.tape()->record(std::move(out), {a}, [a](Tape& t, const Mat& g) {
    t.accumulate_expr(a, g.cwiseQuotient(a.value()));
  });
}

inline Var square(const Var& a) {
  Mat out = a.value().array().square().matrix();
  return a.tape()->record(std::move(out), {a}, [a](Tape& t, const Mat& g) {
    t.accumulate_expr(a, 2.0 * g.cwiseProduct(a.value()));
  });
}

inline Var sum(const Var& a) {
  Mat out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape()->record(std::move(out), {a}, [a](Tape& t, const Mat& g) {
    t.accumulate_expr(a, Mat::Constant(a.rows(), a.cols(), g(0, 0)));
  });
}

/// Column means over rows: (n x c) -> (1 x c).
inline Var mean_rows(const Var& a) {
  const double inv = 1.0 / static_cast<double>(a.rows());
  Mat out = a.value().colwise().sum() * inv;
  return a.tape()->record(std::move(out), {a}, [a, inv](Tape& t, const Mat& g) {
    t.accumulate_expr(a, (g * inv).replicate(a.rows(), 1));
  });
}

/// (1 x c) -> (n x c).
inline Var broadcast_rows(const Var& row, Index n) {
  require(row.rows() == 1, "broadcast_rows expects a row vector");
  Mat out = row.value().replicate(n, 1);
  return row.tape()->record(std::move(out), {row}, [row](Tape& t, const Mat& g) {
    t.accumulate_expr(row, g.colwise().sum());
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_rows of nothing");
  const Index cols = parts.front().cols();
  Index rows = 0;
  for (const Var& p : parts) {
    require(p.cols() == cols, "concat_rows: column mismatch");
    rows += p.rows();
  }
  Mat out(rows, cols);
  Index at = 0;
  for (const Var& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return parts.front().tape()->record(std::move(out), parts, [parts](Tape& t, const Mat& g) {
    Index off = 0;
    for (const Var& p : parts) {
      if (t.needs_grad(p)) t.accumulate_expr(p, g.middleRows(off, p.rows()));
      off += p.rows();
    }
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_cols of nothing");
  const Index rows = parts.front().rows();
  Index cols = 0;
  for (const Var& p : parts) {
    require(p.rows() == rows, "concat_cols: row mismatch");
    cols += p.cols();
  }
  Mat out(rows, cols);
  Index at = 0;
  for (const Var& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return parts.front().tape()->record(std::move(out), parts, [parts](Tape& t, const Mat& g) {
    Index off = 0;
    for (const Var& p : parts) {
      if (t.needs_grad(p)) t.accumulate_expr(p, g.middleCols(off, p.cols()));
      off += p.cols();
    }
  });
}

inline Var slice_rows(const Var& a, Index start, Index n) {
  require(start >= 0 && start + n <= a.rows(), "slice_rows out of range");
  Mat out = a.value().middleRows(start, n);
  return a.tape()->record(std::move(out), {a}, [a, start, n](Tape& t, const Mat& g) {
    Mat full = Mat::Zero(a.rows(), a.cols());
    full.middleRows(start, n) = g;
    t.accumulate(a, full);
  });
}

inline Var slice_cols(const Var& a, Index start, Index n) {
  require(start >= 0 && start + n <= a.cols(), "slice_cols out of range");
  Mat out = a.value().middleCols(start, n);
  return a.tape()->record(std::move(out), {a}, [a, start, n](Tape& t, const Mat& g) {
    Mat full = Mat::Zero(a.rows(), a.cols());
    full.middleCols(start, n) = g;
    t.accumulate(a, full);
  });
}

namespace detail {
inline Mat reshape_row_major(const Mat& a, Index rows, Index cols) {
  using RM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  RM tmp = a;
  return Eigen::Map<const RM>(tmp.data(), rows, cols);
}
}  // namespace detail

/// Reinterprets the row-major element order of `a` as a rows x cols matrix.
inline Var reshape(const Var& a, Index rows, Index cols) {
  require(rows * cols == a.rows() * a.cols(), "reshape: size mismatch");
  Mat out = detail::reshape_row_major(a.value(), rows, cols);
  return a.tape()->record(std::move(out), {a}, [a](Tape& t, const Mat& g) {
    t.accumulate(a, detail::reshape_row_major(g, a.rows(), a.cols()));
  });
}

// ---------------------------------------------------------------------------
// Sparse operators acting on frame-stacked node features.
//
// A feature matrix with `frames` stacked blocks has rows b*n + i for frame b
// and node i. Each block is transformed independently by the same operator.

struct SparseOp {
  SpMat fwd;  // n_out x n_in
  SpMat bwd;  // transpose of fwd

  SparseOp() = default;
  explicit SparseOp(SpMat m) : fwd(std::move(m)), bwd(fwd.transpose()) {}
  Index rows() const { return fwd.rows(); }
  Index cols() const { return fwd.cols(); }
};

namespace detail {
inline Mat apply_blocks(const SpMat& op, const Mat& x, Index frames) {
  const Index n_in = op.cols();
  const Index n_out = op.rows();
  Mat out(n_out * frames, x.cols());
  for (Index b = 0; b < frames; ++b) out.middleRows(b * n_out, n_out).noalias() = op * x.middleRows(b * n_in, n_in);
  return out;
}
}  // namespace detail

inline Index frames_of(const Var& x, Index n_in, const char* op) {
  if (n_in == 0 || x.rows() % n_in != 0) fail(cat(op, ": ", x.rows(), " rows is not a multiple of node count ", n_in));
  return x.rows() / n_in;
}

inline Var sparse_apply(const Var& x, std::shared_ptr<const SparseOp> op) {
  const Index frames = frames_of(x, op->cols(), "sparse_apply");
  Mat out = detail::apply_blocks(op->fwd, x.value(), frames);
  return x.tape()->record(std::move(out), {x}, [x, op, frames](Tape& t, const Mat& g) {
    t.accumulate(x, detail::apply_blocks(op->bwd, g, frames));
  });
}

/// Applies K operators and concatenates the results column-wise:
/// out[:, k*C:(k+1)*C] = op_k x. Used for continuous-kernel graph convolution.
inline Var sparse_gather(const Var& x, std::shared_ptr<const std::vector<SparseOp>> ops) {
  require(!ops->empty(), "sparse_gather with no operators");
  const Index n = ops->front().cols();
  const Index frames = frames_of(x, n, "sparse_gather");
  const Index c = x.cols();
  const Index k_count = static_cast<Index>(ops->size());
  Mat out(ops->front().rows() * frames, c * k_count);
  for (Index k = 0; k < k_count; ++k) {
    const SpMat& op = (*ops)[k].fwd;
    for (Index b = 0; b < frames; ++b)
      out.block(b * op.rows(), k * c, op.rows(), c).noalias() = op * x.value().middleRows(b * n, n);
  }
  return x.tape()->record(std::move(out), {x}, [x, ops, frames, c, n](Tape& t, const Mat& g) {
    Mat gx = Mat::Zero(x.rows(), c);
    for (std::size_t k = 0; k < ops->size(); ++k) {
      const SpMat& op = (*ops)[k].bwd;
      const Index n_out = op.cols();
      for (Index b = 0; b < frames; ++b)
        gx.middleRows(b * n, n).noalias() += op * g.block(b * n_out, static_cast<Index>(k) * c, n_out, c);
    }
    t.accumulate(x, gx);
  });
}

}  // namespace metapns::ad
