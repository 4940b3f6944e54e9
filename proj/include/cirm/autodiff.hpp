#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "cirm/tensor.hpp"

namespace cirm::ad {

/// Handle to a node in a Graph. Only meaningful for the graph that created it.
struct Var {
  std::uint32_t id = 0;
};

enum class Op : std::uint8_t {
  Leaf,
  Add,
  Sub,
  Mul,
  Scale,
  AddScalar,
  MatMul,
  AddBias,
  SumRows,
  BroadcastRows,
  SumCols,
  BroadcastCols,
  Sum,
  Expand,
  Reshape,
  Elu,
  MinZero,
  Exp,
  Log,
  Softplus,
  Sigmoid,
  Reciprocal,
  Square,
  LogSumExpRows,
};

std::string_view op_name(Op op);

/// Define-by-run tape with reverse-mode differentiation.
///
/// Every primitive records its forward value. `grad` records the backward pass
/// itself as graph nodes, so its results can be differentiated again; `backward`
/// computes plain values and discards the nodes it appended. Nodes are appended
/// in evaluation order, which is therefore a topological order.
///
/// A Graph is single-writer; independent graphs may live on different threads.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  Var variable(Tensor value);
  Var constant(Tensor value);

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double c);
  Var add_scalar(Var a, double c);
  /// op(a) * op(b) where op transposes when the flag is set. Operands are matrices.
  Var matmul(Var a, Var b, bool transpose_a = false, bool transpose_b = false);
  /// x[n x m] + b[m] added to every row.
  Var add_bias(Var x, Var bias);
  Var sum_rows(Var x);
  Var broadcast_rows(Var v, std::size_t rows);
  Var sum_cols(Var x);
  Var broadcast_cols(Var v, std::size_t cols);
  Var sum(Var x);
  Var mean(Var x);
  Var expand(Var scalar, const Shape& shape);
  Var reshape(Var x, const Shape& shape);
  Var elu(Var x);
  Var min_zero(Var x);
  Var exp(Var x);
  Var log(Var x);
  Var softplus(Var x);
  Var sigmoid(Var x);
  Var reciprocal(Var x);
  Var square(Var x);
  Var logsumexp_rows(Var x);

  // Composite primitives.
  Var neg(Var a) { return scale(a, -1.0); }
  Var squared_l2(Var x) { return sum(square(x)); }
  /// Scalar variable times a tensor.
  Var scale_by(Var tensor, Var scalar);
  /// Mean binary cross-entropy of logits [n] or [n x 1] against 0/1 targets.
  Var bce_with_logits(Var logits, const Tensor& targets);
  /// Mean softmax cross-entropy of logits [n x k] against integer class labels.
  Var softmax_cross_entropy(Var logits, std::span<const int> labels);
  Var mse(Var prediction, const Tensor& target);
  /// Element-wise product with a fixed keep mask already scaled by 1/(1-p).
  Var apply_mask(Var x, const Tensor& mask);

  /// Gradients of the scalar `root` recorded on the tape (differentiable again).
  /// Inputs that do not influence `root` receive a zero constant.
  std::vector<Var> grad(Var root, std::span<const Var> wrt);
  /// Gradient values of the scalar `root`; the tape is left as it was.
  std::vector<Tensor> backward(Var root, std::span<const Var> wrt);

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  double scalar(Var v) const { return nodes_[v.id].value.item(); }
  const Shape& shape(Var v) const { return nodes_[v.id].value.shape(); }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  Op op(Var v) const { return nodes_[v.id].op; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Op op = Op::Leaf;
    std::uint32_t a = 0;
    std::uint32_t b = 0;
    std::uint8_t arity = 0;
    bool requires_grad = false;
    bool flag_a = false;
    bool flag_b = false;
    double scalar = 0.0;
    Tensor value;
  };

  Var push(Node node);
  Var unary(Op op, Var a, Tensor value, double scalar = 0.0);
  Var binary(Op op, Var a, Var b, Tensor value);
  const Node& node(Var v) const { return nodes_[v.id]; }
  std::vector<Var> reverse_pass(Var root, std::span<const Var> wrt);
  void vjp(std::uint32_t id, Var upstream, std::vector<std::int64_t>& adjoint,
           const std::vector<bool>& relevant);

  std::vector<Node> nodes_;
};

}  // namespace cirm::ad
