#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <vector>

#include "core/tensor.hpp"

namespace latdyn::ad {

using latdyn::Tensor;

enum class Op : std::uint8_t {
  Leaf,
  Const,
  Add,
  Sub,
  Mul,
  Neg,
  AddScalar,
  MulScalar,
  Square,
  Tanh,
  Relu,
  Sin,
  Cos,
  Log,
  Sqrt,
  Recip,
  Matmul,
  MatmulTN,
  MatmulNT,
  Affine,
  TanhAffine,
  TanhPrimeMul,
  Transpose,
  Outer,
  Concat,
  Slice,
  PadSlice,
  Reshape,
  Sum,
  Mean,
  SumAxis0,
  SumAxis1,
  BroadcastScalar,
  BroadcastRow,
  BroadcastCol,
  AddRowVec,
  ScaleRows,
  ScaleCols,
  Detach,
};

class Graph;

// Lightweight handle into a Graph's node arena.
struct Value {
  Graph* g = nullptr;
  std::int32_t id = -1;

  bool valid() const { return g != nullptr && id >= 0; }
  const Tensor& tensor() const;
  const std::vector<std::size_t>& shape() const;
  double item() const { return tensor().item(); }
};

struct Node {
  Op op = Op::Const;
  std::vector<std::int32_t> parents;
  Tensor value;
  double scalar = 0.0;                  // AddScalar / MulScalar operand
  std::array<std::int64_t, 4> ints{};   // slice offsets/extents, concat axis, broadcast extent
  std::vector<std::size_t> shape_attr;  // Reshape / PadSlice target shape
  bool requires_grad = false;
  std::int8_t depth = 0;
};

// One graph per loss evaluation. Values are computed eagerly at construction;
// gradient() walks the recorded graph in reverse. With create_graph the
// adjoints are themselves graph nodes, which is what makes second- and
// third-order differentiation work (nesting is capped at depth 3).
class Graph {
 public:
  static constexpr int kMaxGradDepth = 3;

  Value leaf(Tensor t, bool requires_grad = true);
  Value constant(Tensor t);
  Value zeros(std::vector<std::size_t> shape);

  Value add(Value a, Value b);
  Value sub(Value a, Value b);
  Value mul(Value a, Value b);
  Value neg(Value a);
  Value add_scalar(Value a, double c);
  Value mul_scalar(Value a, double c);
  Value square(Value a);
  Value tanh(Value a);
  Value relu(Value a);
  Value sin(Value a);
  Value cos(Value a);
  Value log(Value a);
  Value sqrt(Value a);
  Value recip(Value a);
  Value matmul(Value a, Value b);
  Value matmul_tn(Value a, Value b);  // a^T * b without materializing a^T
  Value matmul_nt(Value a, Value b);  // a * b^T without materializing b^T
  Value affine(Value x, Value w, Value b);  // x*w + row-broadcast b
  Value tanh_affine(Value x, Value w, Value b);  // tanh(x*w + b)
  Value tanh_prime_mul(Value g, Value y);   // g * (1 - y^2), y = tanh output
  Value transpose(Value a);
  Value outer(Value u, Value v);
  Value concat(const std::vector<Value>& parts, int axis);
  // Rank-1: slice(a, off, len). Rank-2: slice(a, r0, nrows, c0, ncols).
  Value slice(Value a, std::int64_t off, std::int64_t len);
  Value slice(Value a, std::int64_t r0, std::int64_t nrows, std::int64_t c0, std::int64_t ncols);
  Value reshape(Value a, std::vector<std::size_t> shape);
  Value sum(Value a);
  Value mean(Value a);
  Value sum_axis0(Value a);                                   // [m,n] -> [n]
  Value sum_axis1(Value a);                                   // [m,n] -> [m,1]
  Value broadcast_scalar(Value s, std::vector<std::size_t> shape);
  Value broadcast_row(Value v, std::size_t m);                // [n] -> [m,n]
  Value broadcast_col(Value c, std::size_t n);                // [m,1] -> [m,n]
  Value add_rowvec(Value x, Value v);                         // [m,n] + [n]
  Value scale_rows(Value x, Value c);                         // [m,n] * [m,1]
  Value scale_cols(Value x, Value d);                         // [m,n] * [n]
  Value detach(Value a);

  // d(out)/d(wrt[i]) for a scalar out. Leaves not reachable from out get an
  // exact-zero gradient. With create_graph the results are differentiable.
  std::vector<Value> gradient(Value out, const std::vector<Value>& wrt, bool create_graph);

  const Tensor& value(std::int32_t id) const { return nodes_[id].value; }
  const Node& node(std::int32_t id) const { return nodes_[id]; }
  std::size_t size() const { return nodes_.size(); }
  void reserve(std::size_t n) { nodes_.reserve(n); }

 private:
  Value push(Node&& n);
  Value embed(Value inner, std::int64_t r0, std::int64_t c0, std::vector<std::size_t> target);
  void check_same_graph(Value v) const;
  bool parent_grad(const std::vector<std::int32_t>& ps) const;

  std::vector<Node> nodes_;
  std::int8_t forced_depth_ = -1;  // set while gradient() builds adjoint nodes
};

// Convenience operators (elementwise, same graph).
inline Value operator+(Value a, Value b) { return a.g->add(a, b); }
inline Value operator-(Value a, Value b) { return a.g->sub(a, b); }
inline Value operator*(Value a, Value b) { return a.g->mul(a, b); }
inline Value operator-(Value a) { return a.g->neg(a); }

// Max relative error between the reverse-mode gradient of a scalar-valued
// builder and central finite differences at `point` (step h). The builder is
// re-invoked on a fresh graph for every probe, so it stays independent of any
// cached state. Denominator: max(|analytic|, |numeric|, 1e-12).
double check_gradient(const std::function<Value(Graph&, Value)>& build, const Tensor& point,
                      double h);

}  // namespace latdyn::ad
