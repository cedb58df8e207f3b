#include "core/graph.hpp"

#include <cmath>
#include <cstring>
#include <string>

#include "core/errors.hpp"

namespace latdyn::ad {

namespace {

std::string op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Const: return "const";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Neg: return "neg";
    case Op::AddScalar: return "add_scalar";
    case Op::MulScalar: return "mul_scalar";
    case Op::Square: return "square";
    case Op::Tanh: return "tanh";
    case Op::Relu: return "relu";
    case Op::Sin: return "sin";
    case Op::Cos: return "cos";
    case Op::Log: return "log";
    case Op::Sqrt: return "sqrt";
    case Op::Recip: return "reciprocal";
    case Op::Matmul: return "matmul";
    case Op::MatmulTN: return "matmul_tn";
    case Op::MatmulNT: return "matmul_nt";
    case Op::Affine: return "affine";
    case Op::TanhAffine: return "tanh_affine";
    case Op::TanhPrimeMul: return "tanh_prime_mul";
    case Op::Transpose: return "transpose";
    case Op::Outer: return "outer";
    case Op::Concat: return "concat";
    case Op::Slice: return "slice";
    case Op::PadSlice: return "pad_slice";
    case Op::Reshape: return "reshape";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::SumAxis0: return "sum_axis0";
    case Op::SumAxis1: return "sum_axis1";
    case Op::BroadcastScalar: return "broadcast_scalar";
    case Op::BroadcastRow: return "broadcast_row";
    case Op::BroadcastCol: return "broadcast_col";
    case Op::AddRowVec: return "add_rowvec";
    case Op::ScaleRows: return "scale_rows";
    case Op::ScaleCols: return "scale_cols";
    case Op::Detach: return "detach";
  }
  return "?";
}

[[noreturn]] void shape_fail(Op op, const Tensor& a, const Tensor& b) {
  throw ShapeError("op " + op_name(op) + ": incompatible shapes " + a.shape_str() + " and " +
                   b.shape_str());
}

[[noreturn]] void shape_fail(Op op, const Tensor& a) {
  throw ShapeError("op " + op_name(op) + ": invalid operand shape " + a.shape_str());
}

Tensor map_unary(const Tensor& a, double (*fn)(double)) {
  Tensor out = a;
  for (double& v : out.vec()) v = fn(v);
  return out;
}

// C += A(m,k) * B(k,n). Rows of A are processed four at a time so every
// streamed row of B feeds four accumulation streams.
void mm_acc(const double* __restrict a, const double* __restrict b, double* __restrict c,
            std::size_t m, std::size_t k, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    const double* a0 = a + i * k;
    const double* a1 = a0 + k;
    const double* a2 = a1 + k;
    const double* a3 = a2 + k;
    double* c0 = c + i * n;
    double* c1 = c0 + n;
    double* c2 = c1 + n;
    double* c3 = c2 + n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double* brow = b + kk * n;
      const double v0 = a0[kk], v1 = a1[kk], v2 = a2[kk], v3 = a3[kk];
      for (std::size_t j = 0; j < n; ++j) {
        const double bj = brow[j];
        c0[j] += v0 * bj;
        c1[j] += v1 * bj;
        c2[j] += v2 * bj;
        c3[j] += v3 * bj;
      }
    }
  }
  for (; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      const double* brow = b + kk * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

Tensor matmul_val(const Tensor& A, const Tensor& B) {
  const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
  Tensor C = Tensor::zeros({m, n});
  mm_acc(A.data(), B.data(), C.data(), m, k, n);
  return C;
}

}  // namespace

const Tensor& Value::tensor() const { return g->value(id); }
const std::vector<std::size_t>& Value::shape() const { return tensor().shape(); }

void Graph::check_same_graph(Value v) const {
  if (v.g != this || v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size())
    throw ConfigError("graph: value does not belong to this graph");
}

bool Graph::parent_grad(const std::vector<std::int32_t>& ps) const {
  for (auto p : ps) {
    if (nodes_[p].requires_grad) return true;
  }
  return false;
}

Value Graph::push(Node&& n) {
  if (n.op != Op::Leaf && n.op != Op::Const) {
    n.requires_grad = (n.op == Op::Detach) ? false : parent_grad(n.parents);
  }
  // depth records the order of the gradient pass that created the node
  // (0 for ordinary forward construction). Forward ops do not inherit it:
  // using a gradient result in later computation does not deepen anything
  // until somebody differentiates through it again.
  n.depth = forced_depth_ > 0 ? forced_depth_ : 0;
  nodes_.push_back(std::move(n));
  return Value{this, static_cast<std::int32_t>(nodes_.size() - 1)};
}

Value Graph::leaf(Tensor t, bool requires_grad) {
  Node n;
  n.op = Op::Leaf;
  n.value = std::move(t);
  n.requires_grad = requires_grad;
  return push(std::move(n));
}

Value Graph::constant(Tensor t) {
  Node n;
  n.op = Op::Const;
  n.value = std::move(t);
  return push(std::move(n));
}

Value Graph::zeros(std::vector<std::size_t> shape) { return constant(Tensor::zeros(std::move(shape))); }

Value Graph::add(Value a, Value b) {
  check_same_graph(a);
  check_same_graph(b);
  const Tensor& ta = a.tensor();
  const Tensor& tb = b.tensor();
  if (!ta.same_shape(tb)) shape_fail(Op::Add, ta, tb);
  Tensor out = ta;
  const double* pb = tb.data();
  double* po = out.data();
  for (std::size_t i = 0; i < out.numel(); ++i) po[i] += pb[i];
  Node n;
  n.op = Op::Add;
  n.parents = {a.id, b.id};
  n.value = std::move(out);
  return push(std::move(n));
}

Value Graph::sub(Value a, Value b) {
  check_same_graph(a);
  check_same_graph(b);
  const Tensor& ta = a.tensor();
  const Tensor& tb = b.tensor();
  if (!ta.same_shape(tb)) shape_fail(Op::Sub, ta, tb);
  Tensor out = ta;
  const double* pb = tb.data();
  double* po = out.data();
  for (std::size_t i = 0; i < out.numel(); ++i) po[i] -= pb[i];
  Node n;
  n.op = Op::Sub;
  n.parents = {a.id, b.id};
  n.value = std::move(out);
  return push(std::move(n));
}

Value Graph::mul(Value a, Value b) {
  check_same_graph(a);
  check_same_graph(b);
  const Tensor& ta = a.tensor();
  const Tensor& tb = b.tensor();
  if (!ta.same_shape(tb)) shape_fail(Op::Mul, ta, tb);
  Tensor out = ta;
  const double* pb = tb.data();
  double* po = out.data();
  for (std::size_t i = 0; i < out.numel(); ++i) po[i] *= pb[i];
  Node n;
  n.op = Op::Mul;
  n.parents = {a.id, b.id};
  n.value = std::move(out);
  return push(std::move(n));
}

Value Graph::neg(Value a) {
  check_same_graph(a);
  Tensor out = a.tensor();
  for (double& v : out.vec()) v = -v;
  Node n;
  n.op = Op::Neg;
  n.parents = {a.id};
  n.value = std::move(out);
  return push(std::move(n));
}

Value Graph::add_scalar(Value a, double c) {
  check_same_graph(a);
  Tensor out = a.tensor();
  for (double& v : out.vec()) v += c;
  Node n;
  n.op = Op::AddScalar;
  n.parents = {a.id};
  n.scalar = c;
  n.value = std::move(out);
  return push(std::move(n));
}

Value Graph::mul_scalar(Value a, double c) {
  check_same_graph(a);
  Tensor out = a.tensor();
  for (double& v : out.vec()) v *= c;
  Node n;
  n.op = Op::MulScalar;
  n.parents = {a.id};
  n.scalar = c;
  n.value = std::move(out);
  return push(std::move(n));
}

Value Graph::square(Value a) {
  check_same_graph(a);
  Tensor out = a.tensor();
  for (double& v : out.vec()) v *= v;
  Node n;
  n.op = Op::Square;
  n.parents = {a.id};
  n.value = std::move(out);
  return push(std::move(n));
}

#define LATDYN_UNARY(NAME, OP, FN)                \
  Value Graph::NAME(Value a) {                    \
    check_same_graph(a);                          \
    Node n;                                       \
    n.op = OP;                                    \
    n.parents = {a.id};                           \
    n.value = map_unary(a.tensor(), FN);          \
    return push(std::move(n));                    \
  }

LATDYN_UNARY(tanh, Op::Tanh, +[](double v) { return std::tanh(v); })
LATDYN_UNARY(relu, Op::Relu, +[](double v) { return v > 0.0 ? v : 0.0; })
LATDYN_UNARY(sin, Op::Sin, +[](double v) { return std::sin(v); })
LATDYN_UNARY(cos, Op::Cos, +[](double v) { return std::cos(v); })
LATDYN_UNARY(log, Op::Log, +[](double v) { return std::log(v); })
LATDYN_UNARY(sqrt, Op::Sqrt, +[](double v) { return std::sqrt(v); })
LATDYN_UNARY(recip, Op::Recip, +[](double v) { return 1.0 / v; })

#undef LATDYN_UNARY

Value Graph::matmul(Value a, Value b) {
  check_same_graph(a);
  check_same_graph(b);
  const Tensor& ta = a.tensor();
  const Tensor& tb = b.tensor();
  if (ta.rank() != 2 || tb.rank() != 2 || ta.dim(1) != tb.dim(0)) shape_fail(Op::Matmul, ta, tb);
  Node n;
  n.op = Op::Matmul;
  n.parents = {a.id, b.id};
  n.value = matmul_val(ta, tb);
  return push(std::move(n));
}

Value Graph::matmul_tn(Value a, Value b) {
  check_same_graph(a);
  check_same_graph(b);
  const Tensor& ta = a.tensor();  // p x m
  const Tensor& tb = b.tensor();  // p x n
  if (ta.rank() != 2 || tb.rank() != 2 || ta.dim(0) != tb.dim(0)) shape_fail(Op::MatmulTN, ta, tb);
  const std::size_t p = ta.dim(0), m = ta.dim(1), nn = tb.dim(1);
  Tensor out = Tensor::zeros({m, nn});
  const double* pa = ta.data();
  const double* pb = tb.data();
  double* po = out.data();
  // Stream four k-rows per sweep: each output row gets four fused updates
  // per pass over B.
  std::size_t k = 0;
  for (; k + 4 <= p; k += 4) {
    const double* a0 = pa + k * m;
    const double* a1 = a0 + m;
    const double* a2 = a1 + m;
    const double* a3 = a2 + m;
    const double* b0 = pb + k * nn;
    const double* b1 = b0 + nn;
    const double* b2 = b1 + nn;
    const double* b3 = b2 + nn;
    for (std::size_t i = 0; i < m; ++i) {
      const double v0 = a0[i], v1 = a1[i], v2 = a2[i], v3 = a3[i];
      double* crow = po + i * nn;
      for (std::size_t j = 0; j < nn; ++j)
        crow[j] += v0 * b0[j] + v1 * b1[j] + v2 * b2[j] + v3 * b3[j];
    }
  }
  for (; k < p; ++k) {
    const double* arow = pa + k * m;
    const double* brow = pb + k * nn;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      double* crow = po + i * nn;
      for (std::size_t j = 0; j < nn; ++j) crow[j] += av * brow[j];
    }
  }
  Node n;
  n.op = Op::MatmulTN;
  n.parents = {a.id, b.id};
  n.value = std::move(out);
  return push(std::move(n));
}

Value Graph::matmul_nt(Value a, Value b) {
  check_same_graph(a);
  check_same_graph(b);
  const Tensor& ta = a.tensor();  // m x k
  const Tensor& tb = b.tensor();  // n x k
  if (ta.rank() != 2 || tb.rank() != 2 || ta.dim(1) != tb.dim(1)) shape_fail(Op::MatmulNT, ta, tb);
  const std::size_t m = ta.dim(0), k = ta.dim(1), nn = tb.dim(0);
  Tensor out = Tensor::zeros({m, nn});
  const double* pa = ta.data();
  const double* pb = tb.data();
  double* po = out.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = pa + i * k;
    double* crow = po + i * nn;
    for (std::size_t j = 0; j < nn; ++j) {
      const double* brow = pb + j * k;
      double acc0 = 0.0, acc1 = 0.0;
      std::size_t kk = 0;
      for (; kk + 2 <= k; kk += 2) {
        acc0 += arow[kk] * brow[kk];
        acc1 += arow[kk + 1] * brow[kk + 1];
      }
      if (kk < k) acc0 += arow[kk] * brow[kk];
      crow[j] = acc0 + acc1;
    }
  }
  Node n;
  n.op = Op::MatmulNT;
  n.parents = {a.id, b.id};
  n.value = std::move(out);
  return push(std::move(n));
}

Value Graph::affine(Value x, Value w, Value b) {
  check_same_graph(x);
  check_same_graph(w);
  check_same_graph(b);
  const Tensor& tx = x.tensor();
  const Tensor& tw = w.tensor();
  const Tensor& tb = b.tensor();
  if (tx.rank() != 2 || tw.rank() != 2 || tx.dim(1) != tw.dim(0)) shape_fail(Op::Affine, tx, tw);
  if (tb.rank() != 1 || tb.dim(0) != tw.dim(1)) shape_fail(Op::Affine, tw, tb);
  const std::size_t m = tx.dim(0), k = tx.dim(1), nn = tw.dim(1);
  Tensor out = Tensor::zeros({m, nn});
  double* po = out.data();
  for (std::size_t i = 0; i < m; ++i)
    std::memcpy(po + i * nn, tb.data(), nn * sizeof(double));
  mm_acc(tx.data(), tw.data(), po, m, k, nn);
  Node n;
  n.op = Op::Affine;
  n.parents = {x.id, w.id, b.id};
  n.value = std::move(out);
  return push(std::move(n));
}

Value Graph::tanh_affine(Value x, Value w, Value b) {
  check_same_graph(x);
  check_same_graph(w);
  check_same_graph(b);
  const Tensor& tx = x.tensor();
  const Tensor& tw = w.tensor();
  const Tensor& tb = b.tensor();
  if (tx.rank() != 2 || tw.rank() != 2 || tx.dim(1) != tw.dim(0))
    shape_fail(Op::TanhAffine, tx, tw);
  if (tb.rank() != 1 || tb.dim(0) != tw.dim(1)) shape_fail(Op::TanhAffine, tw, tb);
  const std::size_t m = tx.dim(0), k = tx.dim(1), nn = tw.dim(1);
  Tensor out = Tensor::zeros({m, nn});
  double* po = out.data();
  for (std::size_t i = 0; i < m; ++i)
    std::memcpy(po + i * nn, tb.data(), nn * sizeof(double));
  mm_acc(tx.data(), tw.data(), po, m, k, nn);
  for (std::size_t i = 0; i < m * nn; ++i) po[i] = std::tanh(po[i]);
  Node n;
  n.op = Op::TanhAffine;
  n.parents = {x.id, w.id, b.id};
  n.value = std::move(out);
  return push(std::move(n));
}

Value Graph::tanh_prime_mul(Value gv, Value y) {
  check_same_graph(gv);
  check_same_graph(y);
  const Tensor& tg = gv.tensor();
  const Tensor& ty = y.tensor();
  if (!tg.same_shape(ty)) shape_fail(Op::TanhPrimeMul, tg, ty);
  Tensor out = tg;
  const double* py = ty.data();
  double* po = out.data();
  for (std::size_t i = 0; i < out.numel(); ++i) po[i] *= 1.0 - py[i] * py[i];
  Node n;
  n.op = Op::TanhPrimeMul;
  n.parents = {gv.id, y.id};
  n.value = std::move(out);
  return push(std::move(n));
}

Value Graph::transpose(Value a) {
  check_same_graph(a);
  const Tensor& ta = a.tensor();
  if (ta.rank() != 2) shape_fail(Op::Transpose, ta);
  const std::size_t m = ta.dim(0), nn = ta.dim(1);
  Tensor out = Tensor::zeros({nn, m});
  const double* pa = ta.data();
  double* po = out.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < nn; ++j) po[j * m + i] = pa[i * nn + j];
  Node n;
  n.op = Op::Transpose;
  n.parents = {a.id};
  n.value = std::move(out);
  return push(std::move(n));
}

Value Graph::outer(Value u, Value v) {
  check_same_graph(u);
  check_same_graph(v);
  const Tensor& tu = u.tensor();
  const Tensor& tv = v.tensor();
  if (tu.rank() != 1 || tv.rank() != 1) shape_fail(Op::Outer, tu, tv);
  const std::size_t m = tu.dim(0), nn = tv.dim(0);
  Tensor out = Tensor::zeros({m, nn});
  double* po = out.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double ui = tu.at(i);
    for (std::size_t j = 0; j < nn; ++j) po[i * nn + j] = ui * tv.at(j);
  }
  Node n;
  n.op = Op::Outer;
  n.parents = {u.id, v.id};
  n.value = std::move(out);
  return push(std::move(n));
}

Value Graph::concat(const std::vector<Value>& parts, int axis) {
  if (parts.empty()) throw ShapeError("op concat: no operands");
  for (Value p : parts) check_same_graph(p);
  const Tensor& t0 = parts[0].tensor();
  Node n;
  n.op = Op::Concat;
  n.ints[0] = axis;
  for (Value p : parts) n.parents.push_back(p.id);
  if (t0.rank() == 1) {
    if (axis != 0) throw ShapeError("op concat: axis out of range for rank-1 operand");
    std::size_t total = 0;
    for (Value p : parts) {
      if (p.tensor().rank() != 1) shape_fail(Op::Concat, t0, p.tensor());
      total += p.tensor().numel();
    }
    Tensor out = Tensor::zeros({total});
    std::size_t off = 0;
    for (Value p : parts) {
      const Tensor& tp = p.tensor();
      std::memcpy(out.data() + off, tp.data(), tp.numel() * sizeof(double));
      off += tp.numel();
    }
    n.value = std::move(out);
    return push(std::move(n));
  }
  if (t0.rank() != 2 || (axis != 0 && axis != 1)) shape_fail(Op::Concat, t0);
  std::size_t rows = t0.dim(0), cols = t0.dim(1);
  if (axis == 0) {
    rows = 0;
    for (Value p : parts) {
      const Tensor& tp = p.tensor();
      if (tp.rank() != 2 || tp.dim(1) != cols) shape_fail(Op::Concat, t0, tp);
      rows += tp.dim(0);
    }
    Tensor out = Tensor::zeros({rows, cols});
    std::size_t r = 0;
    for (Value p : parts) {
      const Tensor& tp = p.tensor();
      std::memcpy(out.data() + r * cols, tp.data(), tp.numel() * sizeof(double));
      r += tp.dim(0);
    }
    n.value = std::move(out);
  } else {
    cols = 0;
    for (Value p : parts) {
      const Tensor& tp = p.tensor();
      if (tp.rank() != 2 || tp.dim(0) != rows) shape_fail(Op::Concat, t0, tp);
      cols += tp.dim(1);
    }
    Tensor out = Tensor::zeros({rows, cols});
    std::size_t c = 0;
    for (Value p : parts) {
      const Tensor& tp = p.tensor();
      const std::size_t pc = tp.dim(1);
      for (std::size_t i = 0; i < rows; ++i)
        std::memcpy(out.data() + i * cols + c, tp.data() + i * pc, pc * sizeof(double));
      c += pc;
    }
    n.value = std::move(out);
  }
  return push(std::move(n));
}

Value Graph::slice(Value a, std::int64_t off, std::int64_t len) {
  check_same_graph(a);
  const Tensor& ta = a.tensor();
  if (ta.rank() != 1 || off < 0 || len < 0 ||
      static_cast<std::size_t>(off + len) > ta.dim(0))
    throw ShapeError("op slice: range [" + std::to_string(off) + "," + std::to_string(off + len) +
                     ") out of bounds for shape " + ta.shape_str());
  Tensor out = Tensor::zeros({static_cast<std::size_t>(len)});
  std::memcpy(out.data(), ta.data() + off, len * sizeof(double));
  Node n;
  n.op = Op::Slice;
  n.parents = {a.id};
  n.ints = {off, len, 0, 1};
  n.shape_attr = ta.shape();
  n.value = std::move(out);
  return push(std::move(n));
}

Value Graph::slice(Value a, std::int64_t r0, std::int64_t nrows, std::int64_t c0,
                   std::int64_t ncols) {
  check_same_graph(a);
  const Tensor& ta = a.tensor();
  if (ta.rank() != 2 || r0 < 0 || c0 < 0 || nrows < 0 || ncols < 0 ||
      static_cast<std::size_t>(r0 + nrows) > ta.dim(0) ||
      static_cast<std::size_t>(c0 + ncols) > ta.dim(1))
    throw ShapeError("op slice: window out of bounds for shape " + ta.shape_str());
  Tensor out = Tensor::zeros({static_cast<std::size_t>(nrows), static_cast<std::size_t>(ncols)});
  const std::size_t cols = ta.dim(1);
  for (std::int64_t i = 0; i < nrows; ++i)
    std::memcpy(out.data() + i * ncols, ta.data() + (r0 + i) * cols + c0, ncols * sizeof(double));
  Node n;
  n.op = Op::Slice;
  n.parents = {a.id};
  n.ints = {r0, nrows, c0, ncols};
  n.shape_attr = ta.shape();
  n.value = std::move(out);
  return push(std::move(n));
}

// Inverse of slice: embed `inner` into zeros of shape `target` at (r0, c0).
Value Graph::embed(Value inner, std::int64_t r0, std::int64_t c0,
                   std::vector<std::size_t> target) {
  const Tensor& ti = inner.tensor();
  Tensor out = Tensor::zeros(target);
  if (ti.rank() == 1) {
    std::memcpy(out.data() + r0, ti.data(), ti.numel() * sizeof(double));
  } else {
    const std::size_t cols = target[1];
    for (std::size_t i = 0; i < ti.dim(0); ++i)
      std::memcpy(out.data() + (r0 + i) * cols + c0, ti.data() + i * ti.dim(1),
                  ti.dim(1) * sizeof(double));
  }
  Node n;
  n.op = Op::PadSlice;
  n.parents = {inner.id};
  n.ints = {r0, static_cast<std::int64_t>(ti.rows()), c0,
            static_cast<std::int64_t>(ti.rank() == 2 ? ti.dim(1) : 1)};
  n.shape_attr = std::move(target);
  n.value = std::move(out);
  return push(std::move(n));
}

Value Graph::reshape(Value a, std::vector<std::size_t> shape) {
  check_same_graph(a);
  const Tensor& ta = a.tensor();
  if (shape_numel(shape) != ta.numel())
    throw ShapeError("op reshape: " + ta.shape_str() + " to " + Tensor::shape_str(shape) +
                     " changes element count");
  Node n;
  n.op = Op::Reshape;
  n.parents = {a.id};
  n.shape_attr = ta.shape();
  n.value = Tensor(std::move(shape), ta.vec());
  return push(std::move(n));
}

Value Graph::sum(Value a) {
  check_same_graph(a);
  double s = 0.0;
  for (double v : a.tensor().vec()) s += v;
  Node n;
  n.op = Op::Sum;
  n.parents = {a.id};
  n.shape_attr = a.tensor().shape();
  n.value = Tensor::scalar(s);
  return push(std::move(n));
}

Value Graph::mean(Value a) {
  check_same_graph(a);
  const std::size_t m = a.tensor().numel();
  if (m == 0) throw ShapeError("op mean: empty operand");
  double s = 0.0;
  for (double v : a.tensor().vec()) s += v;
  Node n;
  n.op = Op::Mean;
  n.parents = {a.id};
  n.shape_attr = a.tensor().shape();
  n.value = Tensor::scalar(s / static_cast<double>(m));
  return push(std::move(n));
}

Value Graph::sum_axis0(Value a) {
  check_same_graph(a);
  const Tensor& ta = a.tensor();
  if (ta.rank() != 2) shape_fail(Op::SumAxis0, ta);
  const std::size_t m = ta.dim(0), nn = ta.dim(1);
  Tensor out = Tensor::zeros({nn});
  const double* pa = ta.data();
  double* po = out.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < nn; ++j) po[j] += pa[i * nn + j];
  Node n;
  n.op = Op::SumAxis0;
  n.parents = {a.id};
  n.value = std::move(out);
  return push(std::move(n));
}

Value Graph::sum_axis1(Value a) {
  check_same_graph(a);
  const Tensor& ta = a.tensor();
  if (ta.rank() != 2) shape_fail(Op::SumAxis1, ta);
  const std::size_t m = ta.dim(0), nn = ta.dim(1);
  Tensor out = Tensor::zeros({m, 1});
  const double* pa = ta.data();
  double* po = out.data();
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < nn; ++j) s += pa[i * nn + j];
    po[i] = s;
  }
  Node n;
  n.op = Op::SumAxis1;
  n.parents = {a.id};
  n.value = std::move(out);
  return push(std::move(n));
}

Value Graph::broadcast_scalar(Value s, std::vector<std::size_t> shape) {
  check_same_graph(s);
  if (s.tensor().numel() != 1) shape_fail(Op::BroadcastScalar, s.tensor());
  Node n;
  n.op = Op::BroadcastScalar;
  n.parents = {s.id};
  n.value = Tensor::full(std::move(shape), s.tensor().item());
  return push(std::move(n));
}

Value Graph::broadcast_row(Value v, std::size_t m) {
  check_same_graph(v);
  const Tensor& tv = v.tensor();
  if (tv.rank() != 1) shape_fail(Op::BroadcastRow, tv);
  const std::size_t nn = tv.dim(0);
  Tensor out = Tensor::zeros({m, nn});
  for (std::size_t i = 0; i < m; ++i)
    std::memcpy(out.data() + i * nn, tv.data(), nn * sizeof(double));
  Node n;
  n.op = Op::BroadcastRow;
  n.parents = {v.id};
  n.ints[0] = static_cast<std::int64_t>(m);
  n.value = std::move(out);
  return push(std::move(n));
}

Value Graph::broadcast_col(Value c, std::size_t nn) {
  check_same_graph(c);
  const Tensor& tc = c.tensor();
  if (tc.rank() != 2 || tc.dim(1) != 1) shape_fail(Op::BroadcastCol, tc);
  const std::size_t m = tc.dim(0);
  Tensor out = Tensor::zeros({m, nn});
  double* po = out.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double v = tc.at(i);
    for (std::size_t j = 0; j < nn; ++j) po[i * nn + j] = v;
  }
  Node n;
  n.op = Op::BroadcastCol;
  n.parents = {c.id};
  n.ints[0] = static_cast<std::int64_t>(nn);
  n.value = std::move(out);
  return push(std::move(n));
}

Value Graph::add_rowvec(Value x, Value v) {
  check_same_graph(x);
  check_same_graph(v);
  const Tensor& tx = x.tensor();
  const Tensor& tv = v.tensor();
  if (tx.rank() != 2 || tv.rank() != 1 || tx.dim(1) != tv.dim(0)) shape_fail(Op::AddRowVec, tx, tv);
  Tensor out = tx;
  const std::size_t m = tx.dim(0), nn = tx.dim(1);
  double* po = out.data();
  const double* pv = tv.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < nn; ++j) po[i * nn + j] += pv[j];
  Node n;
  n.op = Op::AddRowVec;
  n.parents = {x.id, v.id};
  n.value = std::move(out);
  return push(std::move(n));
}

Value Graph::scale_rows(Value x, Value c) {
  check_same_graph(x);
  check_same_graph(c);
  const Tensor& tx = x.tensor();
  const Tensor& tc = c.tensor();
  if (tx.rank() != 2 || tc.rank() != 2 || tc.dim(1) != 1 || tc.dim(0) != tx.dim(0))
    shape_fail(Op::ScaleRows, tx, tc);
  Tensor out = tx;
  const std::size_t m = tx.dim(0), nn = tx.dim(1);
  double* po = out.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double v = tc.at(i);
    for (std::size_t j = 0; j < nn; ++j) po[i * nn + j] *= v;
  }
  Node n;
  n.op = Op::ScaleRows;
  n.parents = {x.id, c.id};
  n.value = std::move(out);
  return push(std::move(n));
}

Value Graph::scale_cols(Value x, Value d) {
  check_same_graph(x);
  check_same_graph(d);
  const Tensor& tx = x.tensor();
  const Tensor& td = d.tensor();
  if (tx.rank() != 2 || td.rank() != 1 || td.dim(0) != tx.dim(1)) shape_fail(Op::ScaleCols, tx, td);
  Tensor out = tx;
  const std::size_t m = tx.dim(0), nn = tx.dim(1);
  double* po = out.data();
  const double* pd = td.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < nn; ++j) po[i * nn + j] *= pd[j];
  Node n;
  n.op = Op::ScaleCols;
  n.parents = {x.id, d.id};
  n.value = std::move(out);
  return push(std::move(n));
}

Value Graph::detach(Value a) {
  check_same_graph(a);
  Node n;
  n.op = Op::Detach;
  n.parents = {a.id};
  n.value = a.tensor();
  return push(std::move(n));
}

std::vector<Value> Graph::gradient(Value out, const std::vector<Value>& wrt, bool create_graph) {
  check_same_graph(out);
  for (Value w : wrt) check_same_graph(w);
  if (out.tensor().numel() != 1)
    throw ShapeError("gradient: output must be scalar, got shape " + out.tensor().shape_str());

  const std::int32_t top = out.id;
  std::vector<std::uint8_t> is_wrt(top + 1, 0);
  for (Value w : wrt)
    if (w.id <= top) is_wrt[w.id] = 1;

  // reach[i]: some wrt node is an ancestor of i through differentiable edges.
  std::vector<std::uint8_t> reach(top + 1, 0);
  for (std::int32_t i = 0; i <= top; ++i) {
    if (is_wrt[i]) {
      reach[i] = 1;
      continue;
    }
    const Node& n = nodes_[i];
    if (n.op == Op::Leaf || n.op == Op::Const || n.op == Op::Detach) continue;
    for (auto p : n.parents) {
      if (reach[p] && nodes_[p].requires_grad) {
        reach[i] = 1;
        break;
      }
    }
  }

  // The order of this pass is one more than the deepest gradient-created
  // node on the out -> wrt path. Differentiation stops at the wrt nodes, so
  // earlier passes buried below them (e.g. previous inner-loop updates) do
  // not deepen the count.
  std::vector<std::uint8_t> onpath(top + 1, 0);
  std::int8_t new_depth = 1;
  if (reach[top]) onpath[top] = 1;
  for (std::int32_t i = top; i >= 0; --i) {
    if (!onpath[i]) continue;
    const Node& n = nodes_[i];
    if (n.depth + 1 > new_depth) new_depth = n.depth + 1;
    if (is_wrt[i]) continue;
    if (n.op == Op::Leaf || n.op == Op::Const || n.op == Op::Detach) continue;
    for (auto p : n.parents)
      if (reach[p] && nodes_[p].requires_grad) onpath[p] = 1;
  }
  if (new_depth > kMaxGradDepth)
    throw NumericError("gradient: nesting depth " + std::to_string(int(new_depth)) +
                       " exceeds the supported depth of " + std::to_string(kMaxGradDepth));

  std::vector<std::int32_t> adj(top + 1, -1);
  const std::int8_t saved_depth = forced_depth_;
  forced_depth_ = new_depth;

  auto accumulate = [&](std::int32_t node_id, Value contrib) {
    if (adj[node_id] < 0)
      adj[node_id] = contrib.id;
    else
      adj[node_id] = add(Value{this, adj[node_id]}, contrib).id;
  };

  adj[top] = constant(Tensor::full(out.tensor().shape(), 1.0)).id;
  if (!reach[top]) {
    // output does not depend on any wrt node; fall through to zero fill
  }

  // Node metadata is copied up front: vjp builders push new nodes and may
  // reallocate the arena, invalidating references into it.
  struct NodeMeta {
    Op op;
    std::vector<std::int32_t> parents;
    double scalar;
    std::array<std::int64_t, 4> ints;
    std::vector<std::size_t> shape_attr;
  };
  for (std::int32_t i = top; i >= 0; --i) {
    if (adj[i] < 0 || !reach[i]) continue;
    if (is_wrt[i]) continue;  // wrt nodes are independent inputs of this pass
    if (nodes_[i].op == Op::Leaf || nodes_[i].op == Op::Const || nodes_[i].op == Op::Detach)
      continue;
    const NodeMeta n{nodes_[i].op, nodes_[i].parents, nodes_[i].scalar, nodes_[i].ints,
                     nodes_[i].shape_attr};
    Value g{this, adj[i]};
    Value self{this, i};
    auto flows = [&](int pi) {
      const auto p = n.parents[pi];
      return reach[p] && nodes_[p].requires_grad;
    };
    auto parent = [&](int pi) { return Value{this, n.parents[pi]}; };
    switch (n.op) {
      case Op::Add:
        if (flows(0)) accumulate(n.parents[0], g);
        if (flows(1)) accumulate(n.parents[1], g);
        break;
      case Op::Sub:
        if (flows(0)) accumulate(n.parents[0], g);
        if (flows(1)) accumulate(n.parents[1], neg(g));
        break;
      case Op::Mul:
        if (flows(0)) accumulate(n.parents[0], mul(g, parent(1)));
        if (flows(1)) accumulate(n.parents[1], mul(g, parent(0)));
        break;
      case Op::Neg:
        if (flows(0)) accumulate(n.parents[0], neg(g));
        break;
      case Op::AddScalar:
        if (flows(0)) accumulate(n.parents[0], g);
        break;
      case Op::MulScalar:
        if (flows(0)) accumulate(n.parents[0], mul_scalar(g, n.scalar));
        break;
      case Op::Square:
        if (flows(0)) accumulate(n.parents[0], mul(g, mul_scalar(parent(0), 2.0)));
        break;
      case Op::Tanh:
        if (flows(0)) accumulate(n.parents[0], tanh_prime_mul(g, self));
        break;
      case Op::TanhPrimeMul:
        // t = g0 * (1 - y^2): dt/dg0 = (1 - y^2), dt/dy = -2 g0 y.
        if (flows(0)) accumulate(n.parents[0], tanh_prime_mul(g, parent(1)));
        if (flows(1))
          accumulate(n.parents[1], mul_scalar(mul(mul(g, parent(0)), parent(1)), -2.0));
        break;
      case Op::Relu: {
        if (flows(0)) {
          Tensor mask = parent(0).tensor();
          for (double& v : mask.vec()) v = v > 0.0 ? 1.0 : 0.0;
          accumulate(n.parents[0], mul(g, constant(std::move(mask))));
        }
        break;
      }
      case Op::Sin:
        if (flows(0)) accumulate(n.parents[0], mul(g, cos(parent(0))));
        break;
      case Op::Cos:
        if (flows(0)) accumulate(n.parents[0], neg(mul(g, sin(parent(0)))));
        break;
      case Op::Log:
        if (flows(0)) accumulate(n.parents[0], mul(g, recip(parent(0))));
        break;
      case Op::Sqrt:
        if (flows(0)) accumulate(n.parents[0], mul(g, mul_scalar(recip(self), 0.5)));
        break;
      case Op::Recip:
        if (flows(0)) accumulate(n.parents[0], neg(mul(g, square(self))));
        break;
      case Op::Matmul:
        // The second operand is small (a weight) in every hot path, so its
        // transpose is cheap; dW avoids materializing the big X^T.
        if (flows(0)) accumulate(n.parents[0], matmul(g, transpose(parent(1))));
        if (flows(1)) accumulate(n.parents[1], matmul_tn(parent(0), g));
        break;
      case Op::MatmulTN:  // c = a^T b
        if (flows(0)) accumulate(n.parents[0], matmul_nt(parent(1), g));
        if (flows(1)) accumulate(n.parents[1], matmul(parent(0), g));
        break;
      case Op::MatmulNT:  // c = a b^T
        if (flows(0)) accumulate(n.parents[0], matmul(g, parent(1)));
        if (flows(1)) accumulate(n.parents[1], matmul_tn(g, parent(0)));
        break;
      case Op::Affine: {  // y = x w + b
        if (flows(0)) {
          // Transposing a small weight feeds the fast kernel; a wide map
          // (the hypernetwork) skips the transpose temporary instead.
          Value w = parent(1);
          accumulate(n.parents[0], w.tensor().numel() > 16384 ? matmul_nt(g, w)
                                                              : matmul(g, transpose(w)));
        }
        if (flows(1)) accumulate(n.parents[1], matmul_tn(parent(0), g));
        if (flows(2)) accumulate(n.parents[2], sum_axis0(g));
        break;
      }
      case Op::TanhAffine: {  // y = tanh(x w + b)
        if (!flows(0) && !flows(1) && !flows(2)) break;
        Value dpre = tanh_prime_mul(g, self);
        if (flows(0)) {
          Value w = parent(1);
          accumulate(n.parents[0], w.tensor().numel() > 16384 ? matmul_nt(dpre, w)
                                                              : matmul(dpre, transpose(w)));
        }
        if (flows(1)) accumulate(n.parents[1], matmul_tn(parent(0), dpre));
        if (flows(2)) accumulate(n.parents[2], sum_axis0(dpre));
        break;
      }
      case Op::Transpose:
        if (flows(0)) accumulate(n.parents[0], transpose(g));
        break;
      case Op::Outer: {
        const std::size_t m = parent(0).tensor().dim(0);
        const std::size_t nn = parent(1).tensor().dim(0);
        if (flows(0))
          accumulate(n.parents[0],
                     reshape(matmul(g, reshape(parent(1), {nn, 1})), {m}));
        if (flows(1))
          accumulate(n.parents[1],
                     reshape(matmul(transpose(g), reshape(parent(0), {m, 1})), {nn}));
        break;
      }
      case Op::Concat: {
        const int axis = static_cast<int>(n.ints[0]);
        std::int64_t off = 0;
        for (std::size_t pi = 0; pi < n.parents.size(); ++pi) {
          // dims copied first: slice() below may grow the arena
          const auto pshape = nodes_[n.parents[pi]].value.shape();
          const auto rank = pshape.size();
          const auto d0 = static_cast<std::int64_t>(pshape[0]);
          const auto d1 = rank == 2 ? static_cast<std::int64_t>(pshape[1]) : 0;
          if (rank == 1) {
            if (flows(static_cast<int>(pi))) accumulate(n.parents[pi], slice(g, off, d0));
            off += d0;
          } else if (axis == 0) {
            if (flows(static_cast<int>(pi)))
              accumulate(n.parents[pi], slice(g, off, d0, 0, d1));
            off += d0;
          } else {
            if (flows(static_cast<int>(pi)))
              accumulate(n.parents[pi], slice(g, 0, d0, off, d1));
            off += d1;
          }
        }
        break;
      }
      case Op::Slice:
        if (flows(0)) accumulate(n.parents[0], embed(g, n.ints[0], n.ints[2], n.shape_attr));
        break;
      case Op::PadSlice:
        if (flows(0)) {
          const auto prank = parent(0).tensor().rank();
          if (prank == 1)
            accumulate(n.parents[0], slice(g, n.ints[0], n.ints[1]));
          else
            accumulate(n.parents[0], slice(g, n.ints[0], n.ints[1], n.ints[2], n.ints[3]));
        }
        break;
      case Op::Reshape:
        if (flows(0)) accumulate(n.parents[0], reshape(g, n.shape_attr));
        break;
      case Op::Sum:
        if (flows(0)) accumulate(n.parents[0], broadcast_scalar(g, n.shape_attr));
        break;
      case Op::Mean:
        if (flows(0)) {
          const double inv = 1.0 / static_cast<double>(shape_numel(n.shape_attr));
          accumulate(n.parents[0], broadcast_scalar(mul_scalar(g, inv), n.shape_attr));
        }
        break;
      case Op::SumAxis0:
        if (flows(0)) accumulate(n.parents[0], broadcast_row(g, parent(0).tensor().dim(0)));
        break;
      case Op::SumAxis1:
        if (flows(0)) accumulate(n.parents[0], broadcast_col(g, parent(0).tensor().dim(1)));
        break;
      case Op::BroadcastScalar:
        if (flows(0)) accumulate(n.parents[0], reshape(sum(g), parent(0).tensor().shape()));
        break;
      case Op::BroadcastRow:
        if (flows(0)) accumulate(n.parents[0], sum_axis0(g));
        break;
      case Op::BroadcastCol:
        if (flows(0)) accumulate(n.parents[0], sum_axis1(g));
        break;
      case Op::AddRowVec:
        if (flows(0)) accumulate(n.parents[0], g);
        if (flows(1)) accumulate(n.parents[1], sum_axis0(g));
        break;
      case Op::ScaleRows:
        if (flows(0)) accumulate(n.parents[0], scale_rows(g, parent(1)));
        if (flows(1)) accumulate(n.parents[1], sum_axis1(mul(g, parent(0))));
        break;
      case Op::ScaleCols:
        if (flows(0)) accumulate(n.parents[0], scale_cols(g, parent(1)));
        if (flows(1)) accumulate(n.parents[1], sum_axis0(mul(g, parent(0))));
        break;
      case Op::Leaf:
      case Op::Const:
      case Op::Detach:
        break;
    }
  }

  forced_depth_ = saved_depth;

  std::vector<Value> result;
  result.reserve(wrt.size());
  for (Value w : wrt) {
    if (w.id <= top && adj[w.id] >= 0) {
      Value gv{this, adj[w.id]};
      result.push_back(create_graph ? gv : detach(gv));
    } else {
      result.push_back(constant(Tensor::zeros(w.tensor().shape())));
    }
  }
  return result;
}

double check_gradient(const std::function<Value(Graph&, Value)>& build, const Tensor& point,
                      double h) {
  if (!(h > 0.0)) throw ConfigError("check_gradient: step must be positive");
  auto eval = [&](const Tensor& x) {
    Graph g;
    Value v = build(g, g.leaf(x, true));
    double y = v.tensor().item();
    if (!std::isfinite(y)) throw NumericError("check_gradient: non-finite value near point");
    return y;
  };

  Graph g;
  Value x = g.leaf(point, true);
  Value y = build(g, x);
  if (y.tensor().numel() != 1) throw ShapeError("check_gradient: builder must produce a scalar");
  Tensor analytic = g.gradient(y, {x}, false)[0].tensor();

  double max_rel = 0.0;
  Tensor probe = point;
  for (std::size_t i = 0; i < point.numel(); ++i) {
    const double saved = probe.vec()[i];
    probe.vec()[i] = saved + h;
    const double fp = eval(probe);
    probe.vec()[i] = saved - h;
    const double fm = eval(probe);
    probe.vec()[i] = saved;
    const double numeric = (fp - fm) / (2.0 * h);
    const double a = analytic.vec()[i];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-12});
    max_rel = std::max(max_rel, std::abs(a - numeric) / denom);
  }
  return max_rel;
}

}  // namespace latdyn::ad
