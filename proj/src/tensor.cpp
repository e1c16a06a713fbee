#include "dtsim/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace dtsim {

namespace {

enum OpKind : int {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kMin,
  kMax,
  kNeg,
  kSigmoid,
  kExp,
  kLog,
  kScale,
  kAddScalar,
  kMatMul,
  kTranspose,
  kSum,
  kRMin,
  kRMax,
  kSoftmax,
  kLogSoftmax,
  kGather,
  kScatter,
  kCol,
  kStackCols,
  kStopGrad,
  kGraft,
  kVConcat,
  kGatherRows,
  kReplaceRows,
};

[[noreturn]] void fail(const std::string& msg) {
  throw std::invalid_argument("dtsim tensor: " + msg);
}

Buf make_buf(std::vector<double> v) {
  return std::make_shared<const std::vector<double>>(std::move(v));
}

void check_b_shape(const char* op, const Tensor& a, const Tensor& b,
                   Broadcast bc) {
  bool ok = false;
  switch (bc) {
    case Broadcast::None:
      ok = b.shape() == a.shape();
      break;
    case Broadcast::Row:
      ok = b.rows() == 1 && b.cols() == a.cols();
      break;
    case Broadcast::Col:
      ok = b.cols() == 1 && b.rows() == a.rows();
      break;
    case Broadcast::Scalar:
      ok = b.rows() == 1 && b.cols() == 1;
      break;
  }
  if (!ok)
    fail(std::string(op) + ": operand shapes " + std::to_string(a.rows()) +
         "x" + std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) +
         "x" + std::to_string(b.cols()) + " incompatible for broadcast mode");
}

inline int bindex(Broadcast bc, int r, int c, int cols) {
  switch (bc) {
    case Broadcast::None:
      return r * cols + c;
    case Broadcast::Row:
      return c;
    case Broadcast::Col:
      return r;
    default:
      return 0;
  }
}

Tape* common_tape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.on_tape() && b.on_tape() && a.tape() != b.tape())
    fail(std::string(op) + ": operands recorded on different tapes");
  return a.on_tape() ? a.tape() : b.tape();
}

}  // namespace

Tensor detail_make(Buf d, Shape s, Tape* t, int n) {
  return Tensor(std::move(d), s, t, n);
}

Tensor Tensor::full(Shape s, double value) {
  if (s.rows < 0 || s.cols < 0) fail("full: negative shape");
  return detail_make(make_buf(std::vector<double>(s.numel(), value)), s,
                     nullptr, -1);
}

Tensor Tensor::from(std::vector<double> v, Shape s) {
  if (static_cast<int>(v.size()) != s.numel())
    fail("from: value count does not match shape");
  return detail_make(make_buf(std::move(v)), s, nullptr, -1);
}

double Tensor::scalar() const {
  if (numel() != 1) fail("scalar: tensor is not 1x1");
  return (*data_)[0];
}

int Tape::push_node(Node&& n) {
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

Tensor Tape::leaf(std::vector<double> v, Shape s) {
  if (static_cast<int>(v.size()) != s.numel())
    fail("leaf: value count does not match shape");
  Buf b = make_buf(std::move(v));
  Node n;
  n.op = kLeaf;
  n.shape = s;
  int id = push_node(std::move(n));
  return detail_make(std::move(b), s, this, id);
}

Tensor Tape::leaf(const Tensor& value_source) {
  return leaf(value_source.vals(), value_source.shape());
}

namespace {

/// Register a node if any input lives on a tape; otherwise the result is a
/// plain constant and nothing is recorded.
Tensor emit(Tape* tape, Tape::Node&& n, Buf out, Shape s) {
  if (tape == nullptr) return detail_make(std::move(out), s, nullptr, -1);
  n.shape = s;
  int id = tape->push_node(std::move(n));
  return detail_make(std::move(out), s, tape, id);
}

Tensor binary_op(const char* name, int op, const Tensor& a, const Tensor& b,
                 Broadcast bc) {
  check_b_shape(name, a, b, bc);
  const int R = a.rows(), C = a.cols();
  const auto& av = a.vals();
  const auto& bv = b.vals();
  std::vector<double> out(a.numel());
  std::vector<std::uint8_t> pick;
  if (op == kMin || op == kMax) pick.resize(a.numel());
  for (int r = 0; r < R; ++r) {
    for (int c = 0; c < C; ++c) {
      const int i = r * C + c;
      const double x = av[i];
      const double y = bv[bindex(bc, r, c, C)];
      switch (op) {
        case kAdd:
          out[i] = x + y;
          break;
        case kSub:
          out[i] = x - y;
          break;
        case kMul:
          out[i] = x * y;
          break;
        case kDiv:
          out[i] = x / y;
          break;
        case kMin:
          pick[i] = (x <= y);
          out[i] = pick[i] ? x : y;
          break;
        case kMax:
          pick[i] = (x >= y);
          out[i] = pick[i] ? x : y;
          break;
      }
    }
  }
  Tape* tape = common_tape(name, a, b);
  Tape::Node n;
  n.op = op;
  n.in0 = a.on_tape() ? a.node() : -1;
  n.in1 = b.on_tape() ? b.node() : -1;
  n.bc = bc;
  n.in_shape0 = a.shape();
  n.in_shape1 = b.shape();
  if (tape && (op == kMul || op == kDiv)) {
    n.s0 = a.buf();
    n.s1 = b.buf();
  }
  if (tape && !pick.empty())
    n.pick = std::make_shared<const std::vector<std::uint8_t>>(std::move(pick));
  return emit(tape, std::move(n), make_buf(std::move(out)), a.shape());
}

Tensor unary_op(const char* name, int op, const Tensor& a, double k = 0.0) {
  const auto& av = a.vals();
  std::vector<double> out(a.numel());
  for (int i = 0; i < a.numel(); ++i) {
    const double x = av[i];
    switch (op) {
      case kNeg:
        out[i] = -x;
        break;
      case kSigmoid:
        out[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                          : std::exp(x) / (1.0 + std::exp(x));
        break;
      case kExp:
        out[i] = std::exp(x);
        break;
      case kLog:
        if (!(x > 0.0)) fail(std::string(name) + ": non-positive input");
        out[i] = std::log(x);
        break;
      case kScale:
        out[i] = x * k;
        break;
      case kAddScalar:
        out[i] = x + k;
        break;
    }
  }
  Tape::Node n;
  n.op = op;
  n.in0 = a.on_tape() ? a.node() : -1;
  n.k = k;
  n.in_shape0 = a.shape();
  Buf ob = make_buf(std::move(out));
  if (a.on_tape()) {
    if (op == kSigmoid || op == kExp) n.out = ob;
    if (op == kLog) n.s0 = a.buf();
  }
  return emit(a.tape(), std::move(n), std::move(ob), a.shape());
}

struct SliceView {
  int nslice, slen, C;
  int axis;
  int index(int s, int t) const {
    return axis == kAxisCols ? s * C + t : t * C + s;
  }
};

SliceView slices(const Tensor& a, int axis) {
  if (axis != kAxisRows && axis != kAxisCols) fail("invalid axis");
  SliceView v;
  v.axis = axis;
  v.C = a.cols();
  v.nslice = axis == kAxisCols ? a.rows() : a.cols();
  v.slen = axis == kAxisCols ? a.cols() : a.rows();
  return v;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b, Broadcast bc) {
  return binary_op("add", kAdd, a, b, bc);
}
Tensor sub(const Tensor& a, const Tensor& b, Broadcast bc) {
  return binary_op("sub", kSub, a, b, bc);
}
Tensor mul(const Tensor& a, const Tensor& b, Broadcast bc) {
  return binary_op("mul", kMul, a, b, bc);
}
Tensor divide(const Tensor& a, const Tensor& b, Broadcast bc) {
  return binary_op("divide", kDiv, a, b, bc);
}
Tensor emin(const Tensor& a, const Tensor& b, Broadcast bc) {
  return binary_op("emin", kMin, a, b, bc);
}
Tensor emax(const Tensor& a, const Tensor& b, Broadcast bc) {
  return binary_op("emax", kMax, a, b, bc);
}

Tensor neg(const Tensor& a) { return unary_op("neg", kNeg, a); }
Tensor sigmoid(const Tensor& a) { return unary_op("sigmoid", kSigmoid, a); }
Tensor exp(const Tensor& a) { return unary_op("exp", kExp, a); }
Tensor log(const Tensor& a) { return unary_op("log", kLog, a); }
Tensor scale(const Tensor& a, double k) {
  return unary_op("scale", kScale, a, k);
}
Tensor add_scalar(const Tensor& a, double k) {
  return unary_op("add_scalar", kAddScalar, a, k);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) fail("matmul: inner dimensions disagree");
  const int R = a.rows(), K = a.cols(), C = b.cols();
  const auto& av = a.vals();
  const auto& bv = b.vals();
  std::vector<double> out(static_cast<std::size_t>(R) * C, 0.0);
  for (int i = 0; i < R; ++i) {
    for (int k = 0; k < K; ++k) {
      const double aik = av[i * K + k];
      if (aik == 0.0) continue;
      const double* brow = bv.data() + static_cast<std::size_t>(k) * C;
      double* orow = out.data() + static_cast<std::size_t>(i) * C;
      for (int j = 0; j < C; ++j) orow[j] += aik * brow[j];
    }
  }
  Tape* tape = common_tape("matmul", a, b);
  Tape::Node n;
  n.op = kMatMul;
  n.in0 = a.on_tape() ? a.node() : -1;
  n.in1 = b.on_tape() ? b.node() : -1;
  n.in_shape0 = a.shape();
  n.in_shape1 = b.shape();
  if (tape) {
    n.s0 = a.buf();
    n.s1 = b.buf();
  }
  return emit(tape, std::move(n), make_buf(std::move(out)), Shape{R, C});
}

Tensor transpose(const Tensor& a) {
  const int R = a.rows(), C = a.cols();
  const auto& av = a.vals();
  std::vector<double> out(a.numel());
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c) out[c * R + r] = av[r * C + c];
  Tape::Node n;
  n.op = kTranspose;
  n.in0 = a.on_tape() ? a.node() : -1;
  n.in_shape0 = a.shape();
  return emit(a.tape(), std::move(n), make_buf(std::move(out)), Shape{C, R});
}

namespace {

Tensor reduce_op(const char* name, int op, const Tensor& a, int axis) {
  const auto& av = a.vals();
  std::vector<double> out;
  std::vector<int> arg;
  Shape os;
  if (axis == kAxisAll) {
    os = {1, 1};
    if (op == kSum) {
      double s = 0.0;
      for (double x : av) s += x;
      out = {s};
    } else {
      int best = 0;
      for (int i = 1; i < a.numel(); ++i) {
        if (op == kRMin ? av[i] < av[best] : av[i] > av[best]) best = i;
      }
      out = {av.empty() ? 0.0 : av[best]};
      arg = {best};
    }
  } else {
    SliceView v = slices(a, axis);
    os = axis == kAxisCols ? Shape{a.rows(), 1} : Shape{1, a.cols()};
    out.resize(v.nslice);
    if (op != kSum) arg.resize(v.nslice);
    for (int s = 0; s < v.nslice; ++s) {
      if (op == kSum) {
        double acc = 0.0;
        for (int t = 0; t < v.slen; ++t) acc += av[v.index(s, t)];
        out[s] = acc;
      } else {
        int best = 0;
        double bv = av[v.index(s, 0)];
        for (int t = 1; t < v.slen; ++t) {
          const double x = av[v.index(s, t)];
          if (op == kRMin ? x < bv : x > bv) {
            bv = x;
            best = t;
          }
        }
        out[s] = bv;
        arg[s] = best;
      }
    }
  }
  Tape::Node n;
  n.op = op;
  n.in0 = a.on_tape() ? a.node() : -1;
  n.axis = axis;
  n.in_shape0 = a.shape();
  if (!arg.empty())
    n.idx = std::make_shared<const std::vector<int>>(std::move(arg));
  (void)name;
  return emit(a.tape(), std::move(n), make_buf(std::move(out)), os);
}

}  // namespace

Tensor reduce_sum(const Tensor& a, int axis) {
  return reduce_op("reduce_sum", kSum, a, axis);
}
Tensor reduce_min(const Tensor& a, int axis) {
  return reduce_op("reduce_min", kRMin, a, axis);
}
Tensor reduce_max(const Tensor& a, int axis) {
  return reduce_op("reduce_max", kRMax, a, axis);
}

namespace {

Tensor softmax_like(const char* name, int op, const Tensor& a, int axis) {
  SliceView v = slices(a, axis);
  const auto& av = a.vals();
  std::vector<double> out(a.numel());
  for (int s = 0; s < v.nslice; ++s) {
    double m = av[v.index(s, 0)];
    for (int t = 1; t < v.slen; ++t) m = std::max(m, av[v.index(s, t)]);
    double z = 0.0;
    for (int t = 0; t < v.slen; ++t) z += std::exp(av[v.index(s, t)] - m);
    if (op == kSoftmax) {
      for (int t = 0; t < v.slen; ++t)
        out[v.index(s, t)] = std::exp(av[v.index(s, t)] - m) / z;
    } else {
      const double lz = std::log(z) + m;
      for (int t = 0; t < v.slen; ++t) out[v.index(s, t)] = av[v.index(s, t)] - lz;
    }
  }
  Tape::Node n;
  n.op = op;
  n.in0 = a.on_tape() ? a.node() : -1;
  n.axis = axis;
  n.in_shape0 = a.shape();
  Buf ob = make_buf(std::move(out));
  n.out = ob;
  (void)name;
  return emit(a.tape(), std::move(n), std::move(ob), a.shape());
}

}  // namespace

Tensor softmax(const Tensor& a, int axis) {
  return softmax_like("softmax", kSoftmax, a, axis);
}
Tensor log_softmax(const Tensor& a, int axis) {
  return softmax_like("log_softmax", kLogSoftmax, a, axis);
}

Tensor gather(const Tensor& a, const std::vector<int>& idx) {
  std::vector<double> out(idx.size());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] < 0 || idx[k] >= a.numel()) fail("gather: index out of range");
    out[k] = a.vals()[idx[k]];
  }
  Tape::Node n;
  n.op = kGather;
  n.in0 = a.on_tape() ? a.node() : -1;
  n.in_shape0 = a.shape();
  n.idx = std::make_shared<const std::vector<int>>(idx);
  return emit(a.tape(), std::move(n), make_buf(std::move(out)),
              Shape{static_cast<int>(idx.size()), 1});
}

Tensor scatter_to(const Tensor& src, const std::vector<int>& idx,
                  Shape out_shape, double fill) {
  if (src.cols() != 1) fail("scatter_to: expects a column vector");
  if (static_cast<int>(idx.size()) != src.rows())
    fail("scatter_to: index count does not match source length");
  const int total = out_shape.numel();
  std::vector<double> out(total, fill);
  std::vector<std::uint8_t> seen(total, 0);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] < 0 || idx[k] >= total) fail("scatter_to: index out of range");
    if (seen[idx[k]]) fail("scatter_to: duplicate target index");
    seen[idx[k]] = 1;
    out[idx[k]] = src.vals()[k];
  }
  Tape::Node n;
  n.op = kScatter;
  n.in0 = src.on_tape() ? src.node() : -1;
  n.in_shape0 = src.shape();
  n.idx = std::make_shared<const std::vector<int>>(idx);
  return emit(src.tape(), std::move(n), make_buf(std::move(out)), out_shape);
}

Tensor scatter_to(const Tensor& src, const std::vector<int>& idx, int out_len,
                  double fill) {
  return scatter_to(src, idx, Shape{out_len, 1}, fill);
}

Tensor vconcat(const std::vector<Tensor>& parts) {
  if (parts.empty()) fail("vconcat: no parts");
  int total = 0;
  Tape* tape = nullptr;
  for (const auto& p : parts) {
    if (p.cols() != 1) fail("vconcat: expects column vectors");
    total += p.rows();
    if (p.on_tape()) {
      if (tape && tape != p.tape()) fail("vconcat: mixed tapes");
      tape = p.tape();
    }
  }
  std::vector<double> out;
  out.reserve(total);
  for (const auto& p : parts)
    out.insert(out.end(), p.vals().begin(), p.vals().end());
  Tape::Node n;
  n.op = kVConcat;
  n.in_many.resize(parts.size());
  std::vector<int> sizes(parts.size());
  for (std::size_t i = 0; i < parts.size(); ++i) {
    n.in_many[i] = parts[i].on_tape() ? parts[i].node() : -1;
    sizes[i] = parts[i].rows();
  }
  n.idx = std::make_shared<const std::vector<int>>(std::move(sizes));
  return emit(tape, std::move(n), make_buf(std::move(out)), Shape{total, 1});
}

Tensor gather_rows(const Tensor& m, const std::vector<int>& idx) {
  const int C = m.cols();
  std::vector<double> out(idx.size() * static_cast<std::size_t>(C));
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] < 0 || idx[k] >= m.rows())
      fail("gather_rows: index out of range");
    const double* src = m.vals().data() + static_cast<std::size_t>(idx[k]) * C;
    std::copy(src, src + C, out.begin() + k * C);
  }
  Tape::Node n;
  n.op = kGatherRows;
  n.in0 = m.on_tape() ? m.node() : -1;
  n.in_shape0 = m.shape();
  n.idx = std::make_shared<const std::vector<int>>(idx);
  return emit(m.tape(), std::move(n), make_buf(std::move(out)),
              Shape{static_cast<int>(idx.size()), C});
}

Tensor replace_rows(const Tensor& m, const std::vector<int>& idx,
                    const Tensor& rows) {
  const int C = m.cols();
  if (rows.cols() != C || rows.rows() != static_cast<int>(idx.size()))
    fail("replace_rows: replacement shape mismatch");
  std::vector<double> out = m.vals();
  std::vector<std::uint8_t> seen(m.rows(), 0);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] < 0 || idx[k] >= m.rows())
      fail("replace_rows: index out of range");
    if (seen[idx[k]]) fail("replace_rows: duplicate target row");
    seen[idx[k]] = 1;
    const double* src = rows.vals().data() + k * C;
    std::copy(src, src + C, out.begin() + static_cast<std::size_t>(idx[k]) * C);
  }
  Tape* tape = common_tape("replace_rows", m, rows);
  Tape::Node n;
  n.op = kReplaceRows;
  n.in0 = m.on_tape() ? m.node() : -1;
  n.in1 = rows.on_tape() ? rows.node() : -1;
  n.in_shape0 = m.shape();
  n.in_shape1 = rows.shape();
  n.idx = std::make_shared<const std::vector<int>>(idx);
  return emit(tape, std::move(n), make_buf(std::move(out)), m.shape());
}

Tensor col(const Tensor& m, int j) {
  if (j < 0 || j >= m.cols()) fail("col: column index out of range");
  const int R = m.rows(), C = m.cols();
  std::vector<double> out(R);
  for (int r = 0; r < R; ++r) out[r] = m.vals()[r * C + j];
  Tape::Node n;
  n.op = kCol;
  n.in0 = m.on_tape() ? m.node() : -1;
  n.axis = j;
  n.in_shape0 = m.shape();
  return emit(m.tape(), std::move(n), make_buf(std::move(out)), Shape{R, 1});
}

Tensor hstack_cols(const std::vector<Tensor>& cols) {
  if (cols.empty()) fail("hstack_cols: no columns");
  const int R = cols[0].rows();
  const int C = static_cast<int>(cols.size());
  Tape* tape = nullptr;
  for (const auto& c : cols) {
    if (c.cols() != 1 || c.rows() != R)
      fail("hstack_cols: all columns must be equally sized R x 1");
    if (c.on_tape()) {
      if (tape && tape != c.tape()) fail("hstack_cols: mixed tapes");
      tape = c.tape();
    }
  }
  std::vector<double> out(static_cast<std::size_t>(R) * C);
  for (int j = 0; j < C; ++j)
    for (int r = 0; r < R; ++r) out[r * C + j] = cols[j].vals()[r];
  Tape::Node n;
  n.op = kStackCols;
  n.in_many.resize(C);
  for (int j = 0; j < C; ++j)
    n.in_many[j] = cols[j].on_tape() ? cols[j].node() : -1;
  return emit(tape, std::move(n), make_buf(std::move(out)), Shape{R, C});
}

Tensor stop_gradient(const Tensor& a) {
  if (!a.on_tape()) return a;
  Tape::Node n;
  n.op = kStopGrad;
  n.in0 = -1;  // deliberately detached
  n.in_shape0 = a.shape();
  return emit(a.tape(), std::move(n), a.buf(), a.shape());
}

Tensor graft(const Tensor& v_new, const Tensor& v_old) {
  if (!(v_new.shape() == v_old.shape())) fail("graft: shape mismatch");
  Tape* tape = common_tape("graft", v_new, v_old);
  if (tape == nullptr) return v_new;
  Tape::Node n;
  n.op = kGraft;
  n.in0 = v_new.on_tape() ? v_new.node() : -1;
  n.in1 = v_old.on_tape() ? v_old.node() : -1;
  n.in_shape0 = v_new.shape();
  n.in_shape1 = v_old.shape();
  return emit(tape, std::move(n), v_new.buf(), v_new.shape());
}

// ---- constants --------------------------------------------------------------

namespace {

Tensor cmp_scalar(const Tensor& a, double v, int mode) {
  std::vector<double> out(a.numel());
  for (int i = 0; i < a.numel(); ++i) {
    const double x = a.vals()[i];
    out[i] = (mode == 0 ? x >= v : mode == 1 ? x < v : x == v) ? 1.0 : 0.0;
  }
  return Tensor::from(std::move(out), a.shape());
}

}  // namespace

Tensor indicator_ge(const Tensor& a, double thr) { return cmp_scalar(a, thr, 0); }
Tensor indicator_lt(const Tensor& a, double thr) { return cmp_scalar(a, thr, 1); }
Tensor indicator_eq(const Tensor& a, double v) { return cmp_scalar(a, v, 2); }

namespace {

Tensor cmp_pair(const Tensor& a, const Tensor& b, Broadcast bc, bool strict) {
  check_b_shape("indicator", a, b, bc);
  const int R = a.rows(), C = a.cols();
  std::vector<double> out(a.numel());
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c) {
      const double x = a.vals()[r * C + c];
      const double y = b.vals()[bindex(bc, r, c, C)];
      out[r * C + c] = (strict ? x > y : x >= y) ? 1.0 : 0.0;
    }
  return Tensor::from(std::move(out), a.shape());
}

}  // namespace

Tensor indicator_ge(const Tensor& a, const Tensor& b, Broadcast bc) {
  return cmp_pair(a, b, bc, false);
}
Tensor indicator_gt(const Tensor& a, const Tensor& b, Broadcast bc) {
  return cmp_pair(a, b, bc, true);
}

Tensor onehot_argmax_rows(const Tensor& a) {
  const int R = a.rows(), C = a.cols();
  std::vector<double> out(a.numel(), 0.0);
  for (int r = 0; r < R; ++r) {
    int best = 0;
    for (int c = 1; c < C; ++c)
      if (a.vals()[r * C + c] > a.vals()[r * C + best]) best = c;
    out[r * C + best] = 1.0;
  }
  return Tensor::from(std::move(out), a.shape());
}

std::vector<int> argsort_desc(const Tensor& v) {
  if (v.cols() != 1) fail("argsort_desc: expects a column vector");
  std::vector<int> idx(v.rows());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int i, int j) {
    return v.vals()[i] > v.vals()[j];
  });
  return idx;
}

Tensor gumbel_sample_keys(Shape s, const RngStream& rng, std::uint64_t key,
                          const std::vector<int>* row_keys,
                          const std::vector<int>* col_keys) {
  std::vector<double> out(s.numel());
  for (int r = 0; r < s.rows; ++r) {
    const std::uint64_t rk =
        row_keys ? static_cast<std::uint64_t>((*row_keys)[r])
                 : static_cast<std::uint64_t>(r);
    for (int c = 0; c < s.cols; ++c) {
      const std::uint64_t ck =
          col_keys ? static_cast<std::uint64_t>((*col_keys)[c])
                   : static_cast<std::uint64_t>(c);
      const double u = rng.uniform(key, rk, ck);
      out[r * s.cols + c] = -std::log(-std::log(u));
    }
  }
  return Tensor::from(std::move(out), s);
}

Tensor gumbel_sample(Shape s, const RngStream& rng, std::uint64_t key) {
  return gumbel_sample_keys(s, rng, key, nullptr, nullptr);
}

// ---- reverse sweep -----------------------------------------------------------

namespace {

void acc_init(std::vector<double>& g, int n) {
  if (g.empty()) g.assign(n, 0.0);
}

}  // namespace

GradMap Tape::vjp(std::vector<GradSeed> seeds) const {
  auto table = std::make_shared<std::vector<std::vector<double>>>(nodes_.size());
  auto& G = *table;
  for (auto& s : seeds) {
    if (s.node < 0 || s.node >= static_cast<int>(nodes_.size()))
      fail("vjp: seed node out of range");
    if (static_cast<int>(s.grad.size()) != nodes_[s.node].shape.numel())
      fail("vjp: seed gradient size mismatch");
    acc_init(G[s.node], nodes_[s.node].shape.numel());
    for (std::size_t i = 0; i < s.grad.size(); ++i) G[s.node][i] += s.grad[i];
  }

  for (int ni = static_cast<int>(nodes_.size()) - 1; ni >= 0; --ni) {
    if (G[ni].empty()) continue;
    const Node& n = nodes_[ni];
    const std::vector<double>& g = G[ni];
    auto give = [&](int in, const Shape& s) -> std::vector<double>* {
      if (in < 0) return nullptr;
      acc_init(G[in], s.numel());
      return &G[in];
    };
    const int R = n.in_shape0.rows, C = n.in_shape0.cols;
    switch (n.op) {
      case kLeaf:
      case kStopGrad:
        break;
      case kAdd:
      case kSub: {
        if (auto* da = give(n.in0, n.in_shape0))
          for (int i = 0; i < R * C; ++i) (*da)[i] += g[i];
        if (auto* db = give(n.in1, n.in_shape1)) {
          const double sgn = n.op == kSub ? -1.0 : 1.0;
          for (int r = 0; r < R; ++r)
            for (int c = 0; c < C; ++c)
              (*db)[bindex(n.bc, r, c, C)] += sgn * g[r * C + c];
        }
        break;
      }
      case kMul: {
        if (auto* da = give(n.in0, n.in_shape0))
          for (int r = 0; r < R; ++r)
            for (int c = 0; c < C; ++c)
              (*da)[r * C + c] += g[r * C + c] * (*n.s1)[bindex(n.bc, r, c, C)];
        if (auto* db = give(n.in1, n.in_shape1))
          for (int r = 0; r < R; ++r)
            for (int c = 0; c < C; ++c)
              (*db)[bindex(n.bc, r, c, C)] += g[r * C + c] * (*n.s0)[r * C + c];
        break;
      }
      case kDiv: {
        if (auto* da = give(n.in0, n.in_shape0))
          for (int r = 0; r < R; ++r)
            for (int c = 0; c < C; ++c)
              (*da)[r * C + c] += g[r * C + c] / (*n.s1)[bindex(n.bc, r, c, C)];
        if (auto* db = give(n.in1, n.in_shape1))
          for (int r = 0; r < R; ++r)
            for (int c = 0; c < C; ++c) {
              const double y = (*n.s1)[bindex(n.bc, r, c, C)];
              (*db)[bindex(n.bc, r, c, C)] -=
                  g[r * C + c] * (*n.s0)[r * C + c] / (y * y);
            }
        break;
      }
      case kMin:
      case kMax: {
        if (auto* da = give(n.in0, n.in_shape0))
          for (int i = 0; i < R * C; ++i)
            if ((*n.pick)[i]) (*da)[i] += g[i];
        if (auto* db = give(n.in1, n.in_shape1))
          for (int r = 0; r < R; ++r)
            for (int c = 0; c < C; ++c)
              if (!(*n.pick)[r * C + c])
                (*db)[bindex(n.bc, r, c, C)] += g[r * C + c];
        break;
      }
      case kNeg:
        if (auto* da = give(n.in0, n.in_shape0))
          for (int i = 0; i < R * C; ++i) (*da)[i] -= g[i];
        break;
      case kSigmoid:
        if (auto* da = give(n.in0, n.in_shape0))
          for (int i = 0; i < R * C; ++i) {
            const double y = (*n.out)[i];
            (*da)[i] += g[i] * y * (1.0 - y);
          }
        break;
      case kExp:
        if (auto* da = give(n.in0, n.in_shape0))
          for (int i = 0; i < R * C; ++i) (*da)[i] += g[i] * (*n.out)[i];
        break;
      case kLog:
        if (auto* da = give(n.in0, n.in_shape0))
          for (int i = 0; i < R * C; ++i) (*da)[i] += g[i] / (*n.s0)[i];
        break;
      case kScale:
        if (auto* da = give(n.in0, n.in_shape0))
          for (int i = 0; i < R * C; ++i) (*da)[i] += g[i] * n.k;
        break;
      case kAddScalar:
        if (auto* da = give(n.in0, n.in_shape0))
          for (int i = 0; i < R * C; ++i) (*da)[i] += g[i];
        break;
      case kMatMul: {
        const int K = n.in_shape0.cols;
        const int OC = n.in_shape1.cols;
        if (auto* da = give(n.in0, n.in_shape0)) {
          // dA[i,k] += sum_j g[i,j] * B[k,j]
          for (int i = 0; i < R; ++i)
            for (int k = 0; k < K; ++k) {
              double s = 0.0;
              const double* gr = g.data() + static_cast<std::size_t>(i) * OC;
              const double* br = n.s1->data() + static_cast<std::size_t>(k) * OC;
              for (int j = 0; j < OC; ++j) s += gr[j] * br[j];
              (*da)[i * K + k] += s;
            }
        }
        if (auto* db = give(n.in1, n.in_shape1)) {
          // dB[k,j] += sum_i A[i,k] * g[i,j]
          for (int i = 0; i < R; ++i)
            for (int k = 0; k < K; ++k) {
              const double aik = (*n.s0)[i * K + k];
              if (aik == 0.0) continue;
              const double* gr = g.data() + static_cast<std::size_t>(i) * OC;
              double* dr = db->data() + static_cast<std::size_t>(k) * OC;
              for (int j = 0; j < OC; ++j) dr[j] += aik * gr[j];
            }
        }
        break;
      }
      case kTranspose:
        if (auto* da = give(n.in0, n.in_shape0))
          for (int r = 0; r < R; ++r)
            for (int c = 0; c < C; ++c) (*da)[r * C + c] += g[c * R + r];
        break;
      case kSum: {
        if (auto* da = give(n.in0, n.in_shape0)) {
          if (n.axis == kAxisAll) {
            for (int i = 0; i < R * C; ++i) (*da)[i] += g[0];
          } else if (n.axis == kAxisCols) {
            for (int r = 0; r < R; ++r)
              for (int c = 0; c < C; ++c) (*da)[r * C + c] += g[r];
          } else {
            for (int r = 0; r < R; ++r)
              for (int c = 0; c < C; ++c) (*da)[r * C + c] += g[c];
          }
        }
        break;
      }
      case kRMin:
      case kRMax: {
        if (auto* da = give(n.in0, n.in_shape0)) {
          const auto& arg = *n.idx;
          if (n.axis == kAxisAll) {
            (*da)[arg[0]] += g[0];
          } else if (n.axis == kAxisCols) {
            for (int r = 0; r < R; ++r) (*da)[r * C + arg[r]] += g[r];
          } else {
            for (int c = 0; c < C; ++c) (*da)[arg[c] * C + c] += g[c];
          }
        }
        break;
      }
      case kSoftmax: {
        if (auto* da = give(n.in0, n.in_shape0)) {
          SliceView v{0, 0, C, n.axis};
          v.nslice = n.axis == kAxisCols ? R : C;
          v.slen = n.axis == kAxisCols ? C : R;
          for (int s = 0; s < v.nslice; ++s) {
            double dot = 0.0;
            for (int t = 0; t < v.slen; ++t) {
              const int i = v.index(s, t);
              dot += g[i] * (*n.out)[i];
            }
            for (int t = 0; t < v.slen; ++t) {
              const int i = v.index(s, t);
              (*da)[i] += (*n.out)[i] * (g[i] - dot);
            }
          }
        }
        break;
      }
      case kLogSoftmax: {
        if (auto* da = give(n.in0, n.in_shape0)) {
          SliceView v{0, 0, C, n.axis};
          v.nslice = n.axis == kAxisCols ? R : C;
          v.slen = n.axis == kAxisCols ? C : R;
          for (int s = 0; s < v.nslice; ++s) {
            double gs = 0.0;
            for (int t = 0; t < v.slen; ++t) gs += g[v.index(s, t)];
            for (int t = 0; t < v.slen; ++t) {
              const int i = v.index(s, t);
              (*da)[i] += g[i] - std::exp((*n.out)[i]) * gs;
            }
          }
        }
        break;
      }
      case kGather:
        if (auto* da = give(n.in0, n.in_shape0))
          for (std::size_t k = 0; k < n.idx->size(); ++k)
            (*da)[(*n.idx)[k]] += g[k];
        break;
      case kScatter:
        if (auto* da = give(n.in0, n.in_shape0))
          for (std::size_t k = 0; k < n.idx->size(); ++k)
            (*da)[k] += g[(*n.idx)[k]];
        break;
      case kCol:
        if (auto* da = give(n.in0, n.in_shape0))
          for (int r = 0; r < R; ++r) (*da)[r * C + n.axis] += g[r];
        break;
      case kStackCols: {
        const int OC = static_cast<int>(n.in_many.size());
        const int OR = n.shape.rows;
        for (int j = 0; j < OC; ++j) {
          const int in = n.in_many[j];
          if (in < 0) continue;
          acc_init(G[in], OR);
          for (int r = 0; r < OR; ++r) G[in][r] += g[r * OC + j];
        }
        break;
      }
      case kGraft: {
        if (auto* da = give(n.in0, n.in_shape0))
          for (int i = 0; i < n.shape.numel(); ++i) (*da)[i] += g[i];
        if (auto* db = give(n.in1, n.in_shape1))
          for (int i = 0; i < n.shape.numel(); ++i) (*db)[i] += g[i];
        break;
      }
      case kVConcat: {
        const auto& sizes = *n.idx;
        int offset = 0;
        for (std::size_t p = 0; p < n.in_many.size(); ++p) {
          const int in = n.in_many[p];
          if (in >= 0) {
            acc_init(G[in], sizes[p]);
            for (int r = 0; r < sizes[p]; ++r) G[in][r] += g[offset + r];
          }
          offset += sizes[p];
        }
        break;
      }
      case kGatherRows: {
        if (auto* da = give(n.in0, n.in_shape0)) {
          const int IC = n.in_shape0.cols;
          for (std::size_t k = 0; k < n.idx->size(); ++k)
            for (int c = 0; c < IC; ++c)
              (*da)[static_cast<std::size_t>((*n.idx)[k]) * IC + c] +=
                  g[k * IC + c];
        }
        break;
      }
      case kReplaceRows: {
        const int IC = n.in_shape0.cols;
        if (auto* da = give(n.in0, n.in_shape0)) {
          std::vector<std::uint8_t> replaced(n.in_shape0.rows, 0);
          for (int r : *n.idx) replaced[r] = 1;
          for (int r = 0; r < n.in_shape0.rows; ++r) {
            if (replaced[r]) continue;
            for (int c = 0; c < IC; ++c)
              (*da)[static_cast<std::size_t>(r) * IC + c] +=
                  g[static_cast<std::size_t>(r) * IC + c];
          }
        }
        if (auto* db = give(n.in1, n.in_shape1)) {
          for (std::size_t k = 0; k < n.idx->size(); ++k)
            for (int c = 0; c < IC; ++c)
              (*db)[k * IC + c] +=
                  g[static_cast<std::size_t>((*n.idx)[k]) * IC + c];
        }
        break;
      }
      default:
        fail("vjp: unknown op");
    }
  }

  GradMap m;
  m.g_ = table;
  m.tape_ = this;
  return m;
}

GradMap Tape::backward(const Tensor& loss) const {
  if (!loss.on_tape() || loss.tape() != this)
    fail("backward: loss is not on this tape");
  if (loss.numel() != 1) fail("backward: loss must be scalar");
  return vjp({GradSeed{loss.node(), {1.0}}});
}

std::vector<double> GradMap::of(const Tensor& t) const {
  if (!t.on_tape() || t.tape() != tape_)
    fail("GradMap: tensor is not on the swept tape");
  const auto& g = (*g_)[t.node()];
  if (g.empty()) return std::vector<double>(t.numel(), 0.0);
  return g;
}

std::vector<double> GradMap::take(const Tensor& t) {
  if (!t.on_tape() || t.tape() != tape_)
    fail("GradMap: tensor is not on the swept tape");
  auto& g = (*g_)[t.node()];
  if (g.empty()) return std::vector<double>(t.numel(), 0.0);
  return std::move(g);
}

}  // namespace dtsim
