#include "cirm/validation.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <set>
#include <sstream>

#include "cirm/admm.hpp"
#include "cirm/autodiff.hpp"
#include "cirm/methods.hpp"
#include "cirm/oracle.hpp"
#include "cirm/rng.hpp"
#include "cirm/variational.hpp"

namespace cirm::validation {

namespace {

using ad::Graph;
using ad::Var;
using Builder = std::function<Var(Graph&, std::span<const Var>)>;

// Worst relative error between backward and central differences over every input tensor.
double fd_gap(const Builder& f, const std::vector<Tensor>& inputs) {
  Graph g;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(g.variable(t));
  const auto grads = g.backward(f(g, vars), vars);
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const auto value_at = [&](std::span<const double> p) {
      Graph h;
      std::vector<Var> hv;
      for (std::size_t j = 0; j < inputs.size(); ++j) {
        hv.push_back(j == k ? h.variable(Tensor(inputs[k].shape(), std::vector<double>(p.begin(), p.end())))
                            : h.variable(inputs[j]));
      }
      return h.scalar(f(h, hv));
    };
    const auto fd = oracle::finite_diff_grad(value_at, inputs[k].values(), 1e-4);
    worst = std::max(worst, oracle::max_relative_error(fd, grads[k].values()));
  }
  return worst;
}

Check finish(std::string name, std::size_t cases, double worst, double tol) {
  Check c;
  c.name = std::move(name);
  c.cases = cases;
  c.worst = worst;
  c.passed = worst <= tol;
  std::ostringstream os;
  os << "worst " << worst << " over " << cases << " cases (tol " << tol << ")";
  c.detail = os.str();
  return c;
}

Tensor random_labels(RandomStream& rng, std::size_t n) {
  Tensor y({n});
  for (std::size_t i = 0; i < n; ++i) y[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
  return y;
}

GaussianVariable random_gaussian(RandomStream& rng, std::size_t n) {
  Tensor mu = rng.normal_tensor({n});
  Tensor sigma({n});
  for (double& s : sigma.values()) s = 0.2 + 2.0 * rng.uniform();
  return GaussianVariable::from_sigma(std::move(mu), sigma);
}

}  // namespace

std::vector<Check> primitive_gradients(std::size_t cases, std::uint64_t seed, double tol) {
  RandomStream rng(seed);
  const Tensor fixed = rng.normal_tensor({3, 4});
  const Tensor tall = rng.normal_tensor({4, 3});
  const Tensor bias = rng.normal_tensor({4});
  const std::vector<int> labels{0, 3, 1};
  const Tensor targets = Tensor::vector({1.0, 0.0, 1.0});
  Tensor mask(Shape{3, 4}, 4.0);
  mask[1] = 0.0;
  mask[7] = 0.0;

  using Unary = std::function<Var(Graph&, Var)>;
  const std::vector<std::pair<std::string, Unary>> prims = {
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
      {"mean", [&](Graph& g, Var x) { return g.square(g.mean(x)); }},
      {"reshape", [&](Graph& g, Var x) { return g.sum(g.mul(g.reshape(x, Shape{4, 3}), g.constant(tall))); }},
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
      {"dropout", [&](Graph& g, Var x) { return g.sum(g.square(g.apply_mask(x, mask))); }},
      {"scale_by", [&](Graph& g, Var x) {
         return g.sum(g.square(g.scale_by(g.constant(fixed), g.sum(g.reshape(x, Shape{12})))));
       }},
  };

  std::vector<Check> out;
  for (const auto& [name, f] : prims) {
    const Builder b = [&f](Graph& g, std::span<const Var> v) { return f(g, v[0]); };
    double worst = 0.0;
    for (std::size_t t = 0; t < cases; ++t) worst = std::max(worst, fd_gap(b, {rng.normal_tensor({3, 4})}));
    out.push_back(finish("grad/" + name, cases, worst, tol));
  }
  return out;
}

Check kl_gradients(std::size_t cases, std::uint64_t seed, double tol) {
  RandomStream rng(seed);
  double worst = 0.0;
  for (std::size_t t = 0; t < cases; ++t) {
    const auto q = random_gaussian(rng, 5);
    const auto p = random_gaussian(rng, 5);
    const auto analytic = cirm::kl_gradients(q, p);
    const auto by_mu = [&](std::span<const double> m) {
      return kl_gaussian_diag({Tensor::vector({m.begin(), m.end()}), q.rho}, p);
    };
    const auto by_rho = [&](std::span<const double> r) {
      return kl_gaussian_diag({q.mu, Tensor::vector({r.begin(), r.end()})}, p);
    };
    worst = std::max(worst, oracle::max_relative_error(oracle::finite_diff_grad(by_mu, q.mu.values()),
                                                       analytic.mu.values()));
    worst = std::max(worst, oracle::max_relative_error(oracle::finite_diff_grad(by_rho, q.rho.values()),
                                                       analytic.rho.values()));
    // the in-graph KL must give the same gradients
    Graph g;
    Var mu = g.variable(q.mu);
    Var rho = g.variable(q.rho);
    const std::vector<Var> wrt{mu, rho};
    const auto grads = g.backward(kl_gaussian_diag(g, mu, g.softplus(rho), p), wrt);
    worst = std::max(worst, oracle::max_relative_error(grads[0].values(), analytic.mu.values()));
    worst = std::max(worst, oracle::max_relative_error(grads[1].values(), analytic.rho.values()));
  }
  return finish("grad/kl", cases, worst, tol);
}

Check reparam_gradients(std::size_t cases, std::uint64_t seed, double tol) {
  RandomStream rng(seed);
  double worst = 0.0;
  for (std::size_t t = 0; t < cases; ++t) {
    const std::size_t d = 4;
    const Tensor x = rng.normal_tensor({12, d});
    const Tensor y = random_labels(rng, 12);
    const Tensor eps = rng.normal_tensor({d, 1});
    const Builder f = [&](Graph& g, std::span<const Var> v) {
      Var w = sample_reparam(g, v[0], g.softplus(v[1]), eps);
      return g.add(g.bce_with_logits(g.matmul(g.constant(x), w), y), g.sum(g.elu(w)));
    };
    const Tensor mu = rng.normal_tensor({d, 1});
    Tensor rho = rng.normal_tensor({d, 1});
    worst = std::max(worst, fd_gap(f, {mu, rho}));
  }
  return finish("grad/reparam", cases, worst, tol);
}

Check irmv1_gradients(std::size_t cases, std::uint64_t seed, double tol) {
  RandomStream rng(seed);
  double worst = 0.0;
  for (std::size_t t = 0; t < cases; ++t) {
    const std::size_t d = 3;
    std::vector<Tensor> xs;
    std::vector<Tensor> ys;
    for (int e = 0; e < 2; ++e) {
      xs.push_back(rng.normal_tensor({10, d}));
      ys.push_back(random_labels(rng, 10));
    }
    const double lambda = 0.1 + 10.0 * rng.uniform();
    const Builder f = [&](Graph& g, std::span<const Var> v) {
      std::vector<Var> logits;
      for (const auto& x : xs) logits.push_back(g.matmul(g.elu(g.matmul(g.constant(x), v[0])), v[1]));
      return methods::irmv1_loss(g, logits, ys, lambda, nn::LossKind::BinaryCrossEntropy);
    };
    worst = std::max(worst, fd_gap(f, {rng.normal_tensor({d, 4}), rng.normal_tensor({4, 1})}));
  }
  return finish("grad/irmv1", cases, worst, tol);
}

Check bayes_recursion(std::size_t min_chain, std::size_t max_chain, std::uint64_t seed, double tol) {
  RandomStream rng(seed);
  const int d = 3;
  const double noise = 0.09;
  double worst = 0.0;
  std::size_t chains = 0;
  for (std::size_t chain = min_chain; chain <= max_chain; ++chain, ++chains) {
    methods::LinearGaussianVcl q{Eigen::VectorXd::Zero(d), Eigen::MatrixXd::Identity(d, d)};
    Eigen::MatrixXd all_X(0, d);
    Eigen::VectorXd all_y(0);
    for (std::size_t t = 0; t < chain; ++t) {
      Eigen::MatrixXd X(8, d);
      Eigen::VectorXd y(8);
      for (int i = 0; i < 8; ++i) {
        for (int j = 0; j < d; ++j) X(i, j) = rng.normal();
        y[i] = X(i, 0) - X(i, 1) + 0.3 * rng.normal();
      }
      q = methods::vcl_linear_gaussian_step(q, X, y, noise);
      all_X.conservativeResize(all_X.rows() + 8, d);
      all_X.bottomRows(8) = X;
      all_y.conservativeResize(all_y.size() + 8);
      all_y.tail(8) = y;
    }
    const auto batch = oracle::conjugate_posterior({Eigen::VectorXd::Zero(d), Eigen::MatrixXd::Identity(d, d)},
                                                   all_X, all_y, noise);
    worst = std::max(worst, (q.mean - batch.mean).cwiseAbs().maxCoeff());
    worst = std::max(worst, (q.covariance - batch.covariance).cwiseAbs().maxCoeff());
  }
  return finish("bayes_recursion", chains, worst, tol);
}

Check info_projection(std::size_t cases, std::uint64_t seed) {
  RandomStream rng(seed);
  std::size_t bad = 0;
  double worst = 0.0;
  for (std::size_t trial = 0; trial < cases; ++trial) {
    const std::size_t n = 2 + rng.index(5);
    std::vector<double> w(n);
    double total = 0.0;
    for (auto& v : w) {
      v = rng.bernoulli(0.25) ? 0.0 : 0.05 + rng.uniform();
      total += v;
    }
    if (total == 0.0) {
      w[0] = 1.0;
      total = 1.0;
    }
    for (auto& v : w) v /= total;
    const oracle::DiscreteDistribution q(w);
    std::set<std::size_t> family;
    for (std::size_t i = 0; i < n; ++i) {
      if (rng.bernoulli(0.6)) family.insert(i);
    }
    family.insert(*q.support().begin());
    const double res = oracle::default_grid_resolution(family.size());
    const auto p = oracle::info_projection(q, family);
    const auto bf = oracle::info_projection_brute_force(q, family, res);
    bool ok = oracle::kl_divergence(p, q) <= oracle::kl_divergence(bf, q) + 1e-12;
    for (std::size_t i = 0; i < n; ++i) {
      const double gap = std::abs(bf[i] - p[i]) / res;
      worst = std::max(worst, gap);
      ok = ok && gap <= 1.0;
    }
    for (auto i : p.support()) ok = ok && family.count(i) && q[i] > 0.0;
    if (!ok) ++bad;
  }
  Check c;
  c.name = "info_projection";
  c.cases = cases;
  c.worst = worst;
  c.passed = bad == 0;
  c.detail = std::to_string(bad) + " of " + std::to_string(cases) + " cases disagree with grid search";
  return c;
}

Check support_shrinkage(std::size_t cases, std::uint64_t seed) {
  RandomStream rng(seed);
  std::size_t bad = 0;
  for (std::size_t trial = 0; trial < cases; ++trial) {
    const std::size_t n = 3 + rng.index(4);
    std::vector<double> w(n);
    double total = 0.0;
    for (auto& v : w) {
      v = 0.1 + rng.uniform();
      total += v;
    }
    for (auto& v : w) v /= total;
    const oracle::DiscreteDistribution q(w);
    const std::size_t keep = rng.index(n);
    std::vector<std::set<std::size_t>> families;
    for (int f = 0; f < 3; ++f) {
      std::set<std::size_t> s{keep};
      for (std::size_t i = 0; i < n; ++i) {
        if (rng.bernoulli(0.5)) s.insert(i);
      }
      families.push_back(s);
    }
    const auto chain = oracle::sequential_projection(q, families);
    bool ok = true;
    std::set<std::size_t> inter;
    for (std::size_t i = 0; i < n; ++i) inter.insert(i);
    for (std::size_t k = 0; k < chain.size(); ++k) {
      std::set<std::size_t> next;
      for (auto j : inter) {
        if (families[k].count(j)) next.insert(j);
      }
      inter = next;
      for (auto j : chain[k].support()) ok = ok && inter.count(j);
      if (k > 0) {
        for (auto j : chain[k].support()) ok = ok && chain[k - 1].support().count(j);
      }
    }
    if (!ok) ++bad;
  }
  Check c;
  c.name = "support_shrinkage";
  c.cases = cases;
  c.passed = bad == 0;
  c.detail = std::to_string(bad) + " of " + std::to_string(cases) + " chains leave the intersection";
  return c;
}

Check admm_quadratic_toy() {
  using admm::AdmmState;
  const std::vector<double> a{1.0, 3.0};
  const admm::BlockMinimizer minimize = [&a](std::size_t e, const AdmmState& s) {
    admm::Vector x(1);
    x[0] = (2.0 * a[e] + s.rho0 * (s.consensus[0] - s.u[e][0])) / (2.0 + s.rho0);
    return x;
  };
  auto state = AdmmState::make(2, admm::Vector::Zero(1), 0, 10.0, 10.0);
  std::size_t iterations = 0;
  while (iterations < 200) {
    admm::gadmm_step(state, minimize, {});
    ++iterations;
    if (std::abs(state.consensus[0] - 2.0) < 1e-3 && admm::converged(admm::residuals(state), 1e-3)) break;
  }
  Check c;
  c.name = "admm_quadratic_toy";
  c.cases = iterations;
  c.worst = std::abs(state.consensus[0] - 2.0);
  c.passed = c.worst < 1e-3 && iterations <= 200;
  c.detail = "|omega - 2| = " + std::to_string(c.worst) + " after " + std::to_string(iterations) + " iterations";
  return c;
}

Check admm_serial_parallel() {
  using admm::AdmmState;
  using admm::Vector;
  const std::size_t dim = 6;
  const admm::BlockMinimizer noisy = [dim](std::size_t e, const AdmmState& s) {
    RandomStream rng(42, {e, s.iteration});
    Vector x = s.blocks[e];
    const Vector target = Vector::Constant(static_cast<Eigen::Index>(dim), static_cast<double>(e + 1));
    for (int step = 0; step < 20; ++step) {
      Vector grad = 2.0 * (x - target) + s.rho0 * (x - s.consensus + s.u[e]) + s.rho1 * (x + s.v[e]);
      for (Eigen::Index i = 0; i < grad.size(); ++i) grad[i] += 0.1 * rng.normal();
      x -= 0.01 * grad;
    }
    return x;
  };
  const admm::ConstraintMap g = [](std::size_t e, const Vector& x) -> Vector { return x * (0.5 + e); };
  auto serial = AdmmState::make(4, Vector::Zero(dim), dim, 10.0, 1.0);
  auto parallel = serial;
  for (int i = 0; i < 30; ++i) {
    admm::gadmm_step(serial, noisy, g, admm::Execution::Serial);
    admm::gadmm_step(parallel, noisy, g, admm::Execution::Parallel);
  }
  bool same = serial.consensus == parallel.consensus;
  for (std::size_t e = 0; e < serial.size(); ++e) {
    same = same && serial.blocks[e] == parallel.blocks[e] && serial.u[e] == parallel.u[e] &&
           serial.v[e] == parallel.v[e];
  }
  Check c;
  c.name = "admm_serial_parallel";
  c.cases = 30;
  c.passed = same;
  c.detail = same ? "bit-identical after 30 iterations" : "states differ";
  return c;
}

std::vector<Check> oracle_suite() {
  auto out = primitive_gradients();
  out.push_back(kl_gradients());
  out.push_back(reparam_gradients());
  out.push_back(irmv1_gradients());
  out.push_back(bayes_recursion());
  out.push_back(info_projection());
  out.push_back(support_shrinkage());
  out.push_back(admm_quadratic_toy());
  out.push_back(admm_serial_parallel());
  return out;
}

}  // namespace cirm::validation
