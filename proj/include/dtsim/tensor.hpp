#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dtsim/rng.hpp"

namespace dtsim {

struct Shape {
  int rows = 0;
  int cols = 0;
  int numel() const { return rows * cols; }
  bool operator==(const Shape&) const = default;
};

/// Broadcast mode of the second operand in a binary elementwise op.
///   None:   same shape as first operand
///   Row:    1 x C, replicated down the rows
///   Col:    R x 1, replicated across the columns
///   Scalar: 1 x 1, replicated everywhere
enum class Broadcast { None, Row, Col, Scalar };

constexpr int kAxisRows = 0;  // reduce over rows -> 1 x C
constexpr int kAxisCols = 1;  // reduce over cols -> R x 1
constexpr int kAxisAll = 2;   // reduce everything -> 1 x 1

class Tape;
using Buf = std::shared_ptr<const std::vector<double>>;

/// Dense 2-D tensor of doubles. Values are immutable after creation.
/// A tensor is either a constant (no tape) or the output of a recorded
/// node on some tape; gradients only flow through recorded nodes.
class Tensor {
 public:
  Tensor() = default;

  static Tensor full(Shape s, double value);
  static Tensor zeros(Shape s) { return full(s, 0.0); }
  static Tensor ones(Shape s) { return full(s, 1.0); }
  static Tensor from(std::vector<double> v, Shape s);
  static Tensor scalar_of(double v) { return full({1, 1}, v); }

  Shape shape() const { return shape_; }
  int rows() const { return shape_.rows; }
  int cols() const { return shape_.cols; }
  int numel() const { return shape_.numel(); }
  bool empty() const { return data_ == nullptr; }

  const std::vector<double>& vals() const { return *data_; }
  double at(int r, int c) const { return (*data_)[r * shape_.cols + c]; }
  double operator[](int i) const { return (*data_)[i]; }
  double scalar() const;

  bool on_tape() const { return tape_ != nullptr; }
  int node() const { return node_; }
  Tape* tape() const { return tape_; }
  Buf buf() const { return data_; }

 private:
  friend class Tape;
  friend Tensor detail_make(Buf d, Shape s, Tape* t, int n);
  Tensor(Buf d, Shape s, Tape* t, int n)
      : data_(std::move(d)), shape_(s), tape_(t), node_(n) {}

  Buf data_;
  Shape shape_;
  Tape* tape_ = nullptr;
  int node_ = -1;
};

// ---- differentiable operations -------------------------------------------

Tensor add(const Tensor& a, const Tensor& b, Broadcast bc = Broadcast::None);
Tensor sub(const Tensor& a, const Tensor& b, Broadcast bc = Broadcast::None);
Tensor mul(const Tensor& a, const Tensor& b, Broadcast bc = Broadcast::None);
Tensor divide(const Tensor& a, const Tensor& b, Broadcast bc = Broadcast::None);
/// Elementwise min/max; on ties the first operand's gradient path wins.
Tensor emin(const Tensor& a, const Tensor& b, Broadcast bc = Broadcast::None);
Tensor emax(const Tensor& a, const Tensor& b, Broadcast bc = Broadcast::None);

Tensor neg(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);  // input must be strictly positive
Tensor scale(const Tensor& a, double k);
Tensor add_scalar(const Tensor& a, double k);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

/// Reductions. Min/max route the gradient to the first (lowest-index)
/// extremal element.
Tensor reduce_sum(const Tensor& a, int axis);
Tensor reduce_min(const Tensor& a, int axis);
Tensor reduce_max(const Tensor& a, int axis);

/// Numerically stabilized softmax / log-softmax along `axis`
/// (kAxisCols: each row sums to one; kAxisRows: each column).
Tensor softmax(const Tensor& a, int axis);
Tensor log_softmax(const Tensor& a, int axis);

/// Element gather over the row-major flattening of `a`; result is k x 1.
Tensor gather(const Tensor& a, const std::vector<int>& idx);
/// out[idx[k]] = src[k]; remaining entries take `fill`. Each target index
/// may appear at most once.
Tensor scatter_to(const Tensor& src, const std::vector<int>& idx, int out_len,
                  double fill);
/// Same, scattering into the row-major flattening of an out_shape tensor.
Tensor scatter_to(const Tensor& src, const std::vector<int>& idx,
                  Shape out_shape, double fill);

Tensor col(const Tensor& m, int j);                    // N x L -> N x 1
Tensor hstack_cols(const std::vector<Tensor>& cols);   // L columns -> N x L
Tensor vconcat(const std::vector<Tensor>& parts);      // column vectors -> one
Tensor gather_rows(const Tensor& m, const std::vector<int>& idx);  // k x L
/// Copy of `m` with row idx[k] replaced by row k of `rows` (k x L).
Tensor replace_rows(const Tensor& m, const std::vector<int>& idx,
                    const Tensor& rows);

/// Forward value identical, zero gradient to the argument.
Tensor stop_gradient(const Tensor& a);
/// Discontinuous-update helper: forward value is bit-equal to v_new while
/// the backward pass sends the incoming gradient unscaled into BOTH v_new
/// and v_old. Equivalent to v_new + v_old - stop_gradient(v_old) without
/// the floating-point round trip.
Tensor graft(const Tensor& v_new, const Tensor& v_old);

// ---- constants (zero-gradient producers) ----------------------------------

Tensor indicator_ge(const Tensor& a, double thr);
Tensor indicator_lt(const Tensor& a, double thr);
Tensor indicator_eq(const Tensor& a, double v);
Tensor indicator_ge(const Tensor& a, const Tensor& b,
                    Broadcast bc = Broadcast::None);
Tensor indicator_gt(const Tensor& a, const Tensor& b,
                    Broadcast bc = Broadcast::None);

/// Per-row one-hot of the argmax (ties -> lowest column index).
Tensor onehot_argmax_rows(const Tensor& a);

/// Stable descending argsort of a column vector; ties keep ascending
/// original index. The result carries no gradient.
std::vector<int> argsort_desc(const Tensor& v);

/// i.i.d. Gumbel(0,1) noise, keyed by (key, row, col) draws from `rng`;
/// registered as a constant.
Tensor gumbel_sample(Shape s, const RngStream& rng, std::uint64_t key);
/// Same distribution with explicit per-row / per-column key remapping, so a
/// sub-tensor draws exactly the noise its rows and columns would receive in
/// the full tensor.
Tensor gumbel_sample_keys(Shape s, const RngStream& rng, std::uint64_t key,
                          const std::vector<int>* row_keys,
                          const std::vector<int>* col_keys);

// ---- tape ------------------------------------------------------------------

struct GradSeed {
  int node = -1;
  std::vector<double> grad;
};

class GradMap {
 public:
  /// Gradient of the swept function w.r.t. `t` (zeros if untouched).
  std::vector<double> of(const Tensor& t) const;
  /// Move the gradient buffer out (for hot paths).
  std::vector<double> take(const Tensor& t);

 private:
  friend class Tape;
  std::shared_ptr<std::vector<std::vector<double>>> g_;
  const Tape* tape_ = nullptr;
};

/// Append-only record of operations for reverse-mode differentiation.
/// Recording order is the program order; backward walks it in reverse,
/// which is a valid reverse topological order by construction.
class Tape {
 public:
  struct Node {
    int op = 0;
    Shape shape;
    int in0 = -1, in1 = -1;
    std::vector<int> in_many;
    Broadcast bc = Broadcast::None;
    int axis = -1;
    double k = 0.0;
    Buf out;
    Buf s0, s1;
    std::shared_ptr<const std::vector<int>> idx;
    std::shared_ptr<const std::vector<std::uint8_t>> pick;
    Shape in_shape0, in_shape1;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Register a differentiable leaf (parameter or state input).
  Tensor leaf(std::vector<double> v, Shape s);
  Tensor leaf(const Tensor& value_source);

  std::size_t node_count() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  /// Reverse sweep seeded with dL/d(output) for one or more outputs.
  GradMap vjp(std::vector<GradSeed> seeds) const;
  /// Reverse sweep from a scalar loss (seed 1.0).
  GradMap backward(const Tensor& loss) const;

  const Node& node_at(int i) const { return nodes_[i]; }
  int push_node(Node&& n);

 private:
  std::vector<Node> nodes_;
};

}  // namespace dtsim
