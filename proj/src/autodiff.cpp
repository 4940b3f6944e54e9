#include "cirm/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>

namespace cirm::ad {
namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

double softplus_value(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid_value(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

template <class F>
Tensor map_unary(const Tensor& x, F f) {
  Tensor out(x.shape());
  const double* in = x.data();
  double* o = out.data();
  for (std::size_t i = 0, n = x.size(); i < n; ++i) o[i] = f(in[i]);
  return out;
}

template <class F>
Tensor map_binary(const Tensor& x, const Tensor& y, F f) {
  Tensor out(x.shape());
  const double* a = x.data();
  const double* b = y.data();
  double* o = out.data();
  for (std::size_t i = 0, n = x.size(); i < n; ++i) o[i] = f(a[i], b[i]);
  return out;
}

void require_matrix(const char* primitive, const Tensor& t) {
  if (t.rank() != 2) throw ShapeError(primitive, "expected a matrix, got " + shape_string(t.shape()));
}

}  // namespace

std::string_view op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Scale: return "scale";
    case Op::AddScalar: return "add_scalar";
    case Op::MatMul: return "matmul";
    case Op::AddBias: return "add_bias";
    case Op::SumRows: return "sum_rows";
    case Op::BroadcastRows: return "broadcast_rows";
    case Op::SumCols: return "sum_cols";
    case Op::BroadcastCols: return "broadcast_cols";
    case Op::Sum: return "sum";
    case Op::Expand: return "expand";
    case Op::Reshape: return "reshape";
    case Op::Elu: return "elu";
    case Op::MinZero: return "min_zero";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Softplus: return "softplus";
    case Op::Sigmoid: return "sigmoid";
    case Op::Reciprocal: return "reciprocal";
    case Op::Square: return "square";
    case Op::LogSumExpRows: return "logsumexp_rows";
  }
  return "unknown";
}

Var Graph::push(Node node) {
  if (!node.value.all_finite()) {
    throw NumericError(std::string(op_name(node.op)) + " produced a non-finite value");
  }
  nodes_.push_back(std::move(node));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Graph::unary(Op op, Var a, Tensor value, double scalar) {
  Node n;
  n.op = op;
  n.a = a.id;
  n.arity = 1;
  n.requires_grad = node(a).requires_grad;
  n.scalar = scalar;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Graph::binary(Op op, Var a, Var b, Tensor value) {
  Node n;
  n.op = op;
  n.a = a.id;
  n.b = b.id;
  n.arity = 2;
  n.requires_grad = node(a).requires_grad || node(b).requires_grad;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Graph::variable(Tensor value) {
  Node n;
  n.requires_grad = true;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Graph::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Graph::add(Var a, Var b) {
  const Tensor& x = value(a);
  const Tensor& y = value(b);
  if (x.shape() != y.shape()) throw ShapeError("add", x.shape(), y.shape());
  return binary(Op::Add, a, b, map_binary(x, y, [](double p, double q) { return p + q; }));
}

Var Graph::sub(Var a, Var b) {
  const Tensor& x = value(a);
  const Tensor& y = value(b);
  if (x.shape() != y.shape()) throw ShapeError("sub", x.shape(), y.shape());
  return binary(Op::Sub, a, b, map_binary(x, y, [](double p, double q) { return p - q; }));
}

Var Graph::mul(Var a, Var b) {
  const Tensor& x = value(a);
  const Tensor& y = value(b);
  if (x.shape() != y.shape()) throw ShapeError("mul", x.shape(), y.shape());
  return binary(Op::Mul, a, b, map_binary(x, y, [](double p, double q) { return p * q; }));
}

Var Graph::scale(Var a, double c) {
  return unary(Op::Scale, a, map_unary(value(a), [c](double p) { return c * p; }), c);
}

Var Graph::add_scalar(Var a, double c) {
  return unary(Op::AddScalar, a, map_unary(value(a), [c](double p) { return c + p; }), c);
}

Var Graph::matmul(Var a, Var b, bool transpose_a, bool transpose_b) {
  const Tensor& x = value(a);
  const Tensor& y = value(b);
  require_matrix("matmul", x);
  require_matrix("matmul", y);
  const std::size_t m = transpose_a ? x.shape()[1] : x.shape()[0];
  const std::size_t k = transpose_a ? x.shape()[0] : x.shape()[1];
  const std::size_t k2 = transpose_b ? y.shape()[1] : y.shape()[0];
  const std::size_t n = transpose_b ? y.shape()[0] : y.shape()[1];
  if (k != k2) throw ShapeError("matmul", x.shape(), y.shape());
  Tensor out(Shape{m, n});
  ConstMap xa(x.data(), x.shape()[0], x.shape()[1]);
  ConstMap yb(y.data(), y.shape()[0], y.shape()[1]);
  MutMap o(out.data(), m, n);
  if (!transpose_a && !transpose_b) {
    o.noalias() = xa * yb;
  } else if (!transpose_a) {
    o.noalias() = xa * yb.transpose();
  } else if (!transpose_b) {
    o.noalias() = xa.transpose() * yb;
  } else {
    o.noalias() = xa.transpose() * yb.transpose();
  }
  Node nd;
  nd.op = Op::MatMul;
  nd.a = a.id;
  nd.b = b.id;
  nd.arity = 2;
  nd.requires_grad = node(a).requires_grad || node(b).requires_grad;
  nd.flag_a = transpose_a;
  nd.flag_b = transpose_b;
  nd.value = std::move(out);
  return push(std::move(nd));
}

Var Graph::add_bias(Var x, Var bias) {
  const Tensor& xv = value(x);
  const Tensor& bv = value(bias);
  require_matrix("add_bias", xv);
  if (bv.rank() != 1 || bv.size() != xv.shape()[1]) throw ShapeError("add_bias", xv.shape(), bv.shape());
  Tensor out = xv;
  const std::size_t rows = xv.shape()[0];
  const std::size_t cols = xv.shape()[1];
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = out.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) row[c] += bv[c];
  }
  return binary(Op::AddBias, x, bias, std::move(out));
}

Var Graph::sum_rows(Var x) {
  const Tensor& xv = value(x);
  require_matrix("sum_rows", xv);
  const std::size_t rows = xv.shape()[0];
  const std::size_t cols = xv.shape()[1];
  Tensor out(Shape{cols});
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) out[c] += row[c];
  }
  return unary(Op::SumRows, x, std::move(out));
}

Var Graph::broadcast_rows(Var v, std::size_t rows) {
  const Tensor& vv = value(v);
  if (vv.rank() != 1) throw ShapeError("broadcast_rows", "expected a vector, got " + shape_string(vv.shape()));
  const std::size_t cols = vv.size();
  Tensor out(Shape{rows, cols});
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(vv.data(), cols, out.data() + r * cols);
  return unary(Op::BroadcastRows, v, std::move(out));
}

Var Graph::sum_cols(Var x) {
  const Tensor& xv = value(x);
  require_matrix("sum_cols", xv);
  const std::size_t rows = xv.shape()[0];
  const std::size_t cols = xv.shape()[1];
  Tensor out(Shape{rows});
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * cols;
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += row[c];
    out[r] = s;
  }
  return unary(Op::SumCols, x, std::move(out));
}

Var Graph::broadcast_cols(Var v, std::size_t cols) {
  const Tensor& vv = value(v);
  if (vv.rank() != 1) throw ShapeError("broadcast_cols", "expected a vector, got " + shape_string(vv.shape()));
  const std::size_t rows = vv.size();
  Tensor out(Shape{rows, cols});
  for (std::size_t r = 0; r < rows; ++r) std::fill_n(out.data() + r * cols, cols, vv[r]);
  return unary(Op::BroadcastCols, v, std::move(out));
}

Var Graph::sum(Var x) {
  double s = 0.0;
  for (double v : value(x).values()) s += v;
  return unary(Op::Sum, x, Tensor::scalar(s));
}

Var Graph::mean(Var x) {
  const std::size_t n = value(x).size();
  if (n == 0) throw ShapeError("mean", "empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

Var Graph::expand(Var s, const Shape& shape) {
  const Tensor& sv = value(s);
  if (sv.size() != 1) throw ShapeError("expand", "expected a scalar, got " + shape_string(sv.shape()));
  Node n;
  n.op = Op::Expand;
  n.a = s.id;
  n.arity = 1;
  n.requires_grad = node(s).requires_grad;
  n.value = Tensor(shape, sv[0]);
  return push(std::move(n));
}

Var Graph::reshape(Var x, const Shape& shape) {
  return unary(Op::Reshape, x, value(x).reshaped(shape));
}

Var Graph::elu(Var x) {
  return unary(Op::Elu, x, map_unary(value(x), [](double p) { return p > 0.0 ? p : std::expm1(p); }));
}

Var Graph::min_zero(Var x) {
  return unary(Op::MinZero, x, map_unary(value(x), [](double p) { return p < 0.0 ? p : 0.0; }));
}

Var Graph::exp(Var x) {
  return unary(Op::Exp, x, map_unary(value(x), [](double p) { return std::exp(p); }));
}

Var Graph::log(Var x) {
  return unary(Op::Log, x, map_unary(value(x), [](double p) { return std::log(p); }));
}

Var Graph::softplus(Var x) { return unary(Op::Softplus, x, map_unary(value(x), softplus_value)); }

Var Graph::sigmoid(Var x) { return unary(Op::Sigmoid, x, map_unary(value(x), sigmoid_value)); }

Var Graph::reciprocal(Var x) {
  return unary(Op::Reciprocal, x, map_unary(value(x), [](double p) { return 1.0 / p; }));
}

Var Graph::square(Var x) {
  return unary(Op::Square, x, map_unary(value(x), [](double p) { return p * p; }));
}

Var Graph::logsumexp_rows(Var x) {
  const Tensor& xv = value(x);
  require_matrix("logsumexp_rows", xv);
  const std::size_t rows = xv.shape()[0];
  const std::size_t cols = xv.shape()[1];
  Tensor out(Shape{rows});
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * cols;
    const double m = *std::max_element(row, row + cols);
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += std::exp(row[c] - m);
    out[r] = m + std::log(s);
  }
  return unary(Op::LogSumExpRows, x, std::move(out));
}

Var Graph::scale_by(Var tensor, Var scalar) { return mul(tensor, expand(scalar, shape(tensor))); }

Var Graph::bce_with_logits(Var logits, const Tensor& targets) {
  const std::size_t n = value(logits).size();
  if (targets.size() != n) throw ShapeError("bce_with_logits", shape(logits), targets.shape());
  Var flat = value(logits).rank() == 1 ? logits : reshape(logits, Shape{n});
  Var y = constant(targets.reshaped(Shape{n}));
  return mean(sub(softplus(flat), mul(flat, y)));
}

Var Graph::softmax_cross_entropy(Var logits, std::span<const int> labels) {
  const Tensor& lv = value(logits);
  require_matrix("softmax_cross_entropy", lv);
  const std::size_t rows = lv.shape()[0];
  const std::size_t k = lv.shape()[1];
  if (labels.size() != rows) {
    throw ShapeError("softmax_cross_entropy", lv.shape(), Shape{labels.size()});
  }
  Tensor onehot(Shape{rows, k});
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= k) {
      throw ShapeError("softmax_cross_entropy", "label out of range");
    }
    onehot.at(r, static_cast<std::size_t>(labels[r])) = 1.0;
  }
  Var picked = sum_cols(mul(logits, constant(std::move(onehot))));
  return mean(sub(logsumexp_rows(logits), picked));
}

Var Graph::mse(Var prediction, const Tensor& target) {
  if (value(prediction).size() != target.size()) throw ShapeError("mse", shape(prediction), target.shape());
  Var t = constant(target.reshaped(shape(prediction)));
  return mean(square(sub(prediction, t)));
}

Var Graph::apply_mask(Var x, const Tensor& mask) {
  if (mask.shape() != shape(x)) throw ShapeError("dropout", shape(x), mask.shape());
  return mul(x, constant(mask));
}

void Graph::vjp(std::uint32_t id, Var g, std::vector<std::int64_t>& adjoint,
                const std::vector<bool>& relevant) {
  // Copy what we need: pushing nodes may reallocate the tape.
  const Op op = nodes_[id].op;
  const Var a{nodes_[id].a};
  const Var b{nodes_[id].b};
  const bool ta = nodes_[id].flag_a;
  const bool tb = nodes_[id].flag_b;
  const double c = nodes_[id].scalar;
  const Var self{id};
  const bool need_a = relevant[a.id];
  const bool need_b = nodes_[id].arity == 2 && relevant[b.id];

  auto accumulate = [&](Var target, Var contribution) {
    auto& slot = adjoint[target.id];
    if (slot < 0) {
      slot = contribution.id;
    } else {
      slot = add(Var{static_cast<std::uint32_t>(slot)}, contribution).id;
    }
  };

  switch (op) {
    case Op::Leaf:
      return;
    case Op::Add:
      if (need_a) accumulate(a, g);
      if (need_b) accumulate(b, g);
      return;
    case Op::Sub:
      if (need_a) accumulate(a, g);
      if (need_b) accumulate(b, neg(g));
      return;
    case Op::Mul:
      if (need_a) accumulate(a, mul(g, b));
      if (need_b) accumulate(b, mul(g, a));
      return;
    case Op::Scale:
      if (need_a) accumulate(a, scale(g, c));
      return;
    case Op::AddScalar:
      if (need_a) accumulate(a, g);
      return;
    case Op::MatMul:
      if (!ta && !tb) {
        if (need_a) accumulate(a, matmul(g, b, false, true));
        if (need_b) accumulate(b, matmul(a, g, true, false));
      } else if (!ta && tb) {
        if (need_a) accumulate(a, matmul(g, b, false, false));
        if (need_b) accumulate(b, matmul(g, a, true, false));
      } else if (ta && !tb) {
        if (need_a) accumulate(a, matmul(b, g, false, true));
        if (need_b) accumulate(b, matmul(a, g, false, false));
      } else {
        if (need_a) accumulate(a, matmul(b, g, true, true));
        if (need_b) accumulate(b, matmul(g, a, true, true));
      }
      return;
    case Op::AddBias:
      if (need_a) accumulate(a, g);
      if (need_b) accumulate(b, sum_rows(g));
      return;
    case Op::SumRows:
      if (need_a) accumulate(a, broadcast_rows(g, shape(a)[0]));
      return;
    case Op::BroadcastRows:
      if (need_a) accumulate(a, sum_rows(g));
      return;
    case Op::SumCols:
      if (need_a) accumulate(a, broadcast_cols(g, shape(a)[1]));
      return;
    case Op::BroadcastCols:
      if (need_a) accumulate(a, sum_cols(g));
      return;
    case Op::Sum:
      if (need_a) accumulate(a, expand(g, Shape(shape(a))));
      return;
    case Op::Expand:
      if (need_a) accumulate(a, reshape(sum(g), Shape(shape(a))));
      return;
    case Op::Reshape:
      if (need_a) accumulate(a, reshape(g, Shape(shape(a))));
      return;
    case Op::Elu:
      // elu'(x) = 1 + min(elu(x), 0)
      if (need_a) accumulate(a, mul(g, add_scalar(min_zero(self), 1.0)));
      return;
    case Op::MinZero:
      if (need_a) {
        Tensor mask = map_unary(value(a), [](double p) { return p < 0.0 ? 1.0 : 0.0; });
        accumulate(a, mul(g, constant(std::move(mask))));
      }
      return;
    case Op::Exp:
      if (need_a) accumulate(a, mul(g, self));
      return;
    case Op::Log:
      if (need_a) accumulate(a, mul(g, reciprocal(a)));
      return;
    case Op::Softplus:
      if (need_a) accumulate(a, mul(g, sigmoid(a)));
      return;
    case Op::Sigmoid:
      if (need_a) accumulate(a, mul(g, mul(self, add_scalar(neg(self), 1.0))));
      return;
    case Op::Reciprocal:
      if (need_a) accumulate(a, mul(g, scale(square(self), -1.0)));
      return;
    case Op::Square:
      if (need_a) accumulate(a, mul(g, scale(a, 2.0)));
      return;
    case Op::LogSumExpRows:
      if (need_a) {
        const std::size_t k = shape(a)[1];
        Var softmax = exp(sub(a, broadcast_cols(self, k)));
        accumulate(a, mul(broadcast_cols(g, k), softmax));
      }
      return;
  }
}

std::vector<Var> Graph::reverse_pass(Var root, std::span<const Var> wrt) {
  if (value(root).size() != 1) {
    throw ShapeError("backward", "root must be scalar, got " + shape_string(shape(root)));
  }
  const std::size_t n0 = nodes_.size();
  std::vector<bool> relevant(n0, false);
  for (Var w : wrt) relevant[w.id] = true;
  for (std::uint32_t i = 0; i <= root.id; ++i) {
    const Node& nd = nodes_[i];
    if (relevant[i] || !nd.requires_grad || nd.arity == 0) continue;
    relevant[i] = relevant[nd.a] || (nd.arity == 2 && relevant[nd.b]);
  }

  std::vector<std::int64_t> adjoint(n0, -1);
  if (relevant[root.id]) adjoint[root.id] = constant(Tensor(Shape(shape(root)), 1.0)).id;
  for (std::int64_t i = root.id; i >= 0; --i) {
    const auto id = static_cast<std::uint32_t>(i);
    if (adjoint[id] < 0 || nodes_[id].arity == 0) continue;
    vjp(id, Var{static_cast<std::uint32_t>(adjoint[id])}, adjoint, relevant);
  }

  std::vector<Var> out;
  out.reserve(wrt.size());
  for (Var w : wrt) {
    if (adjoint[w.id] >= 0) {
      out.push_back(Var{static_cast<std::uint32_t>(adjoint[w.id])});
    } else {
      out.push_back(constant(Tensor(Shape(shape(w)), 0.0)));
    }
  }
  return out;
}

std::vector<Var> Graph::grad(Var root, std::span<const Var> wrt) { return reverse_pass(root, wrt); }

std::vector<Tensor> Graph::backward(Var root, std::span<const Var> wrt) {
  const std::size_t n0 = nodes_.size();
  std::vector<Var> grads = reverse_pass(root, wrt);
  std::vector<Tensor> out;
  out.reserve(grads.size());
  for (Var g : grads) out.push_back(value(g));
  nodes_.erase(nodes_.begin() + static_cast<std::ptrdiff_t>(n0), nodes_.end());
  return out;
}

}  // namespace cirm::ad
