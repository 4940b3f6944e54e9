#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "cirm/autodiff.hpp"
#include "cirm/oracle.hpp"
#include "cirm/params.hpp"
#include "cirm/rng.hpp"

using namespace cirm;
using cirm::ad::Graph;
using cirm::ad::Var;

namespace {

// Evaluates a scalar function of one tensor through the graph, both value and gradient.
using UnaryBuilder = std::function<Var(Graph&, Var)>;

double eval_value(const UnaryBuilder& f, const Tensor& x) {
  Graph g;
  return g.scalar(f(g, g.variable(x)));
}

Tensor eval_grad(const UnaryBuilder& f, const Tensor& x) {
  Graph g;
  Var v = g.variable(x);
  Var y = f(g, v);
  std::vector<Var> wrt{v};
  return g.backward(y, wrt)[0];
}

double fd_check(const UnaryBuilder& f, const Tensor& x) {
  auto scalar_fn = [&](std::span<const double> p) {
    return eval_value(f, Tensor(x.shape(), std::vector<double>(p.begin(), p.end())));
  };
  const auto fd = oracle::finite_diff_grad(scalar_fn, x.values(), 1e-4);
  const Tensor ad = eval_grad(f, x);
  return oracle::max_relative_error(fd, ad.values());
}

}  // namespace

TEST(Primitives, EluClosedForm) {
  Graph g;
  Var x = g.constant(Tensor::vector({0.0, 1.0, -1.0}));
  const Tensor& y = g.value(g.elu(x));
  EXPECT_DOUBLE_EQ(y[0], 0.0);
  EXPECT_DOUBLE_EQ(y[1], 1.0);
  EXPECT_NEAR(y[2], std::exp(-1.0) - 1.0, 1e-15);
  EXPECT_NEAR(y[2], -0.632121, 1e-6);
}

TEST(Primitives, ShapeMismatchNamesPrimitiveAndShapes) {
  Graph g;
  Var a = g.constant(Tensor(Shape{2, 3}));
  Var b = g.constant(Tensor(Shape{2, 2}));
  try {
    g.matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos);
    EXPECT_NE(msg.find("[2, 3]"), std::string::npos);
    EXPECT_NE(msg.find("[2, 2]"), std::string::npos);
  }
  EXPECT_THROW(g.add(a, b), ShapeError);
}

TEST(Primitives, NonFiniteIsAnError) {
  Graph g;
  Var x = g.variable(Tensor::vector({-1.0}));
  EXPECT_THROW(g.log(x), NumericError);
}

TEST(Backward, PolynomialAndConstant) {
  const UnaryBuilder square = [](Graph& g, Var x) { return g.sum(g.square(x)); };
  EXPECT_DOUBLE_EQ(eval_grad(square, Tensor::scalar(3.0))[0], 6.0);

  Graph g;
  Var x = g.variable(Tensor::scalar(3.0));
  Var c = g.constant(Tensor::scalar(5.0));
  std::vector<Var> wrt{x};
  EXPECT_EQ(g.backward(c, wrt)[0][0], 0.0);
}

TEST(Backward, RootMustBeScalar) {
  Graph g;
  Var x = g.variable(Tensor::vector({1.0, 2.0}));
  std::vector<Var> wrt{x};
  EXPECT_THROW(g.backward(g.square(x), wrt), ShapeError);
}

TEST(Backward, NonParticipatingParameterGetsExactZero) {
  Graph g;
  Var x = g.variable(Tensor::vector({1.0, 2.0}));
  Var unused = g.variable(Tensor::matrix(2, 2, {1, 2, 3, 4}));
  std::vector<Var> wrt{x, unused};
  const auto grads = g.backward(g.sum(g.square(x)), wrt);
  EXPECT_EQ(grads[1], Tensor(Shape{2, 2}, 0.0));
}

TEST(Backward, TwoLayerEluNetMatchesFiniteDifferences) {
  RandomStream rng(11);
  const Tensor x = rng.normal_tensor({5, 4});
  const Tensor y = Tensor::vector({0, 1, 1, 0, 1});
  ParamSet params;
  params.add("w0", rng.normal_tensor({4, 6}), Partition::Feature);
  params.add("b0", rng.normal_tensor({6}), Partition::Feature);
  params.add("w1", rng.normal_tensor({6, 1}), Partition::Classifier);
  params.add("b1", rng.normal_tensor({1}), Partition::Classifier);

  auto loss_of = [&](const ParamSet& p, Graph& g, std::vector<Var>& vars) {
    vars = p.bind(g);
    Var h = g.elu(g.add_bias(g.matmul(g.constant(x), vars[0]), vars[1]));
    Var out = g.add_bias(g.matmul(h, vars[2]), vars[3]);
    return g.bce_with_logits(out, y);
  };

  Graph g;
  std::vector<Var> vars;
  Var loss = loss_of(params, g, vars);
  const auto grads = g.backward(loss, vars);

  for (std::size_t k = 0; k < params.size(); ++k) {
    auto f = [&](std::span<const double> v) {
      ParamSet p = params;
      p[k].value = Tensor(p[k].value.shape(), std::vector<double>(v.begin(), v.end()));
      Graph gg;
      std::vector<Var> vv;
      return gg.scalar(loss_of(p, gg, vv));
    };
    const auto fd = oracle::finite_diff_grad(f, params[k].value.values(), 1e-4);
    EXPECT_LT(oracle::max_relative_error(fd, grads[k].values()), 1e-5) << params[k].name;
  }
}

TEST(Backward, EveryPrimitiveAgreesWithFiniteDifferences) {
  RandomStream rng(2024);
  const Tensor fixed = rng.normal_tensor({3, 4});
  const Tensor tall = rng.normal_tensor({4, 3});
  const Tensor bias = rng.normal_tensor({4});
  const std::vector<int> labels{0, 3, 1};
  const Tensor targets = Tensor::vector({1.0, 0.0, 1.0});

  const std::vector<std::pair<std::string, UnaryBuilder>> cases = {
      {"add", [&](Graph& g, Var x) { return g.sum(g.square(g.add(x, g.constant(fixed)))); }},
      {"sub", [&](Graph& g, Var x) { return g.sum(g.square(g.sub(g.constant(fixed), x))); }},
      {"mul", [&](Graph& g, Var x) { return g.sum(g.mul(x, g.mul(x, g.constant(fixed)))); }},
      {"scale", [&](Graph& g, Var x) { return g.sum(g.square(g.scale(x, -2.5))); }},
      {"add_scalar", [&](Graph& g, Var x) { return g.sum(g.square(g.add_scalar(x, 0.7))); }},
      {"matmul", [&](Graph& g, Var x) { return g.sum(g.square(g.matmul(x, g.constant(fixed), false, true))); }},
      {"matmul_tn", [&](Graph& g, Var x) { return g.sum(g.square(g.matmul(x, g.constant(fixed), true, false))); }},
      {"matmul_tt", [&](Graph& g, Var x) { return g.sum(g.square(g.matmul(g.constant(tall), x, true, true))); }},
      {"add_bias", [&](Graph& g, Var x) { return g.sum(g.square(g.add_bias(x, g.constant(bias)))); }},
      {"sum_rows", [&](Graph& g, Var x) { return g.sum(g.square(g.sum_rows(x))); }},
      {"sum_cols", [&](Graph& g, Var x) { return g.sum(g.square(g.sum_cols(x))); }},
      {"broadcast", [&](Graph& g, Var x) {
         return g.sum(g.square(g.add(g.broadcast_rows(g.sum_rows(x), 3), g.broadcast_cols(g.sum_cols(x), 4))));
       }},
      {"elu", [&](Graph& g, Var x) { return g.sum(g.mul(g.elu(x), g.constant(fixed))); }},
      {"exp", [&](Graph& g, Var x) { return g.sum(g.exp(g.scale(x, 0.5))); }},
      {"log", [&](Graph& g, Var x) { return g.sum(g.log(g.add_scalar(g.square(x), 1.0))); }},
      {"softplus", [&](Graph& g, Var x) { return g.sum(g.mul(g.softplus(x), g.constant(fixed))); }},
      {"sigmoid", [&](Graph& g, Var x) { return g.sum(g.mul(g.sigmoid(x), g.constant(fixed))); }},
      {"reciprocal", [&](Graph& g, Var x) { return g.sum(g.reciprocal(g.add_scalar(g.square(x), 0.5))); }},
      {"logsumexp", [&](Graph& g, Var x) { return g.sum(g.logsumexp_rows(x)); }},
      {"softmax_ce", [&](Graph& g, Var x) { return g.softmax_cross_entropy(x, labels); }},
      {"bce", [&](Graph& g, Var x) { return g.bce_with_logits(g.sum_cols(x), targets); }},
      {"mse", [&](Graph& g, Var x) { return g.mse(x, fixed); }},
      {"squared_l2", [&](Graph& g, Var x) { return g.squared_l2(x); }},
      {"dropout", [&](Graph& g, Var x) {
         Tensor mask(Shape{3, 4}, 4.0);
         mask[1] = 0.0;
         mask[7] = 0.0;
         return g.sum(g.square(g.apply_mask(x, mask)));
       }},
      {"scale_by", [&](Graph& g, Var x) {
         Var s = g.sum(g.reshape(x, Shape{12}));
         return g.sum(g.square(g.scale_by(g.constant(fixed), s)));
       }},
  };

  for (const auto& [name, f] : cases) {
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      const Tensor x = rng.normal_tensor({3, 4});
      worst = std::max(worst, fd_check(f, x));
    }
    EXPECT_LT(worst, 1e-4) << name;
  }
}

TEST(Backward, DeterministicAcrossRuns) {
  auto run = [] {
    RandomStream rng(5);
    Graph g;
    Var w = g.variable(rng.normal_tensor({8, 3}));
    Var x = g.constant(rng.normal_tensor({16, 8}));
    Var loss = g.sum(g.elu(g.matmul(x, w)));
    std::vector<Var> wrt{w};
    return g.backward(loss, wrt)[0];
  };
  EXPECT_EQ(run(), run());
}

TEST(Backward, BackwardLeavesTapeUntouched) {
  Graph g;
  Var x = g.variable(Tensor::vector({1.0, -2.0}));
  Var y = g.sum(g.elu(x));
  const std::size_t before = g.size();
  std::vector<Var> wrt{x};
  g.backward(y, wrt);
  EXPECT_EQ(g.size(), before);
}

TEST(SecondOrder, NestedGradientOfEluIsExact) {
  // d/dx (d/dx sum elu(x))^2 = 2 elu'(x) elu''(x); elu'' = e^x for x < 0, 0 otherwise
  Graph g;
  Var x = g.variable(Tensor::vector({-0.5, 0.3}));
  std::vector<Var> wrt{x};
  Var first = g.grad(g.sum(g.elu(x)), wrt)[0];
  const auto second = g.backward(g.squared_l2(first), wrt)[0];
  EXPECT_NEAR(second[0], 2.0 * std::exp(-0.5) * std::exp(-0.5), 1e-14);
  EXPECT_NEAR(second[1], 0.0, 1e-14);
}

TEST(GradPenaltyGrad, QuadraticClosedForm) {
  ParamSet params;
  params.add("w", Tensor::scalar(1.0), Partition::Classifier);
  const std::vector<std::size_t> wrt{0};
  const PenalizedLossBuilder builder = [](Graph& g, std::span<const Var> v) {
    PenalizedLoss loss{g.constant(Tensor::scalar(0.0)), {}};
    loss.penalties.push_back({g.square(v[0]), 1.0, {}});
    return loss;
  };
  for (auto mode : {SecondOrderMode::Nested, SecondOrderMode::FiniteDifference}) {
    const auto out = grad_penalty_grad(builder, params, wrt, mode);
    EXPECT_EQ(out.mode, mode);
    EXPECT_NEAR(out.penalty, 4.0, 1e-12);
    EXPECT_NEAR(out.grads[0][0], 8.0, mode == SecondOrderMode::Nested ? 1e-12 : 1e-6);
  }
}

TEST(GradPenaltyGrad, ConstantLossHasNoPenalty) {
  ParamSet params;
  params.add("w", Tensor::scalar(0.3), Partition::Classifier);
  const std::vector<std::size_t> wrt{0};
  const PenalizedLossBuilder builder = [](Graph& g, std::span<const Var>) {
    Var c = g.constant(Tensor::scalar(2.0));
    return PenalizedLoss{c, {{c, 1.0, {}}}};
  };
  for (auto mode : {SecondOrderMode::Nested, SecondOrderMode::FiniteDifference}) {
    const auto out = grad_penalty_grad(builder, params, wrt, mode);
    EXPECT_EQ(out.penalty, 0.0);
    EXPECT_EQ(out.grads[0][0], 0.0);
  }
}

TEST(GradPenaltyGrad, LinearCrossEntropyMatchesDoubleFiniteDifferences) {
  RandomStream rng(77);
  const Tensor x = rng.normal_tensor({20, 3});
  Tensor y(Shape{20});
  for (double& v : y.values()) v = rng.bernoulli(0.5) ? 1.0 : 0.0;

  ParamSet params;
  params.add("theta", rng.normal_tensor({3, 1}), Partition::Feature);
  params.add("w", Tensor::scalar(1.0), Partition::Classifier);
  const std::vector<std::size_t> wrt{1};

  const PenalizedLossBuilder builder = [&](Graph& g, std::span<const Var> v) {
    Var logits = g.scale_by(g.matmul(g.constant(x), v[0]), v[1]);
    Var risk = g.bce_with_logits(logits, y);
    return PenalizedLoss{g.constant(Tensor::scalar(0.0)), {{risk, 1.0, {}}}};
  };
  // penalty(theta, w) = (dR/dw)^2 with dR/dw itself by finite differences
  auto penalty = [&](std::span<const double> p) {
    auto risk_at = [&](double w) {
      Graph g;
      Var logits = g.scale(g.matmul(g.constant(x), g.constant(Tensor({3, 1}, {p[0], p[1], p[2]}))), w);
      return g.scalar(g.bce_with_logits(logits, y));
    };
    const double h = 1e-5;
    const double d = (risk_at(p[3] + h) - risk_at(p[3] - h)) / (2 * h);
    return d * d;
  };
  const std::vector<double> point{params[0].value[0], params[0].value[1], params[0].value[2], 1.0};
  const auto fd = oracle::finite_diff_grad(penalty, point, 1e-4);

  for (auto mode : {SecondOrderMode::Nested, SecondOrderMode::FiniteDifference}) {
    const auto out = grad_penalty_grad(builder, params, wrt, mode);
    std::vector<double> got{out.grads[0][0], out.grads[0][1], out.grads[0][2], out.grads[1][0]};
    EXPECT_LT(oracle::max_relative_error(fd, got), 1e-3);
  }
}

TEST(GradPenaltyGrad, NestedAndFiniteDifferenceAgreeOnRandomQuadratics) {
  RandomStream rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor a = rng.normal_tensor({4, 4});
    const Tensor b = rng.normal_tensor({4});
    ParamSet params;
    params.add("x", rng.normal_tensor({2}), Partition::Feature);
    params.add("w", rng.normal_tensor({2}), Partition::Classifier);
    const std::vector<std::size_t> wrt{1};
    Tensor shift = rng.normal_tensor({2});
    const PenalizedLossBuilder builder = [&](Graph& g, std::span<const Var> v) {
      // L = z^T A^T A z / 2 + b.z with z = (x, w)
      Var z = g.reshape(g.add(g.matmul(g.reshape(v[0], {1, 2}), g.constant(Tensor({2, 4}, {1, 0, 0, 0, 0, 1, 0, 0}))),
                              g.matmul(g.reshape(v[1], {1, 2}), g.constant(Tensor({2, 4}, {0, 0, 1, 0, 0, 0, 0, 1})))),
                        {1, 4});
      Var az = g.matmul(z, g.constant(a), false, true);
      Var loss = g.add(g.scale(g.squared_l2(az), 0.5), g.sum(g.mul(g.reshape(z, {4}), g.constant(b))));
      return PenalizedLoss{loss, {{loss, 0.7, {shift}}}};
    };
    const auto nested = grad_penalty_grad(builder, params, wrt, SecondOrderMode::Nested);
    const auto fd = grad_penalty_grad(builder, params, wrt, SecondOrderMode::FiniteDifference);
    EXPECT_NEAR(nested.penalty, fd.penalty, 1e-12);
    for (std::size_t k = 0; k < 2; ++k) {
      EXPECT_LT(oracle::max_relative_error(nested.grads[k].values(), fd.grads[k].values()), 1e-2);
    }
  }
}

TEST(Sgd, Examples) {
  ParamSet p;
  p.add("a", Tensor::scalar(1.0), Partition::Feature);
  std::vector<Tensor> g{Tensor::scalar(1.0)};
  sgd_step(p, g, 0.5, 0.0);
  EXPECT_DOUBLE_EQ(p[0].value[0], 0.5);

  g[0] = Tensor::scalar(0.0);
  sgd_step(p, g, 0.5, 0.0);
  EXPECT_DOUBLE_EQ(p[0].value[0], 0.5);

  ParamSet q;
  q.add("b", Tensor::scalar(2.0), Partition::Feature);
  sgd_step(q, g, 0.1, 0.00125);
  EXPECT_NEAR(q[0].value[0], 1.99975, 1e-15);

  EXPECT_THROW(sgd_step(q, g, 0.0, 0.0), std::invalid_argument);
  EXPECT_THROW(sgd_step(q, g, 0.1, -1.0), std::invalid_argument);
}

TEST(ParamSetTest, PartitionsAreDisjointAndCover) {
  ParamSet p;
  p.add("phi", Tensor::scalar(1.0), Partition::Feature);
  p.add("w", Tensor::scalar(1.0), Partition::Classifier);
  EXPECT_THROW(p.add("w", Tensor::scalar(0.0), Partition::Feature), std::invalid_argument);
  auto f = p.indices(Partition::Feature);
  auto c = p.indices(Partition::Classifier);
  EXPECT_EQ(f.size() + c.size(), p.size());
  EXPECT_EQ(f[0], 0u);
  EXPECT_EQ(c[0], 1u);
}
