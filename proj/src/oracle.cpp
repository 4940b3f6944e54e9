#include "cirm/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace cirm::oracle {

std::vector<double> finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                                     std::span<const double> x, double h) {
  std::vector<double> point(x.begin(), x.end());
  std::vector<double> grad(x.size());
  for (std::size_t j = 0; j < x.size(); ++j) {
    const double orig = point[j];
    point[j] = orig + h;
    const double up = f(point);
    point[j] = orig - h;
    const double down = f(point);
    point[j] = orig;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("finite_diff_grad: non-finite evaluation at coordinate " + std::to_string(j));
    }
    grad[j] = (up - down) / (2.0 * h);
  }
  return grad;
}

double max_relative_error(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("max_relative_error", Shape{a.size()}, Shape{b.size()});
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double scale = std::max({1.0, std::abs(a[i]), std::abs(b[i])});
    worst = std::max(worst, std::abs(a[i] - b[i]) / scale);
  }
  return worst;
}

DiscreteDistribution::DiscreteDistribution(std::vector<double> probabilities) : p_(std::move(probabilities)) {
  if (p_.empty()) throw std::invalid_argument("distribution needs at least one outcome");
  double total = 0.0;
  for (double v : p_) {
    if (!(v >= 0.0)) throw std::invalid_argument("probabilities must be non-negative");
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("probabilities must sum to 1");
}

DiscreteDistribution DiscreteDistribution::uniform_on(std::size_t n, const std::set<std::size_t>& support) {
  if (support.empty()) throw std::invalid_argument("empty support");
  std::vector<double> p(n, 0.0);
  for (auto i : support) p.at(i) = 1.0 / static_cast<double>(support.size());
  return DiscreteDistribution(std::move(p));
}

std::set<std::size_t> DiscreteDistribution::support() const {
  std::set<std::size_t> s;
  for (std::size_t i = 0; i < p_.size(); ++i) {
    if (p_[i] > 0.0) s.insert(i);
  }
  return s;
}

double kl_divergence(const DiscreteDistribution& p, const DiscreteDistribution& q) {
  if (p.outcomes() != q.outcomes()) throw ShapeError("kl_divergence", Shape{p.outcomes()}, Shape{q.outcomes()});
  double kl = 0.0;
  for (std::size_t i = 0; i < p.outcomes(); ++i) {
    if (p[i] == 0.0) continue;
    if (q[i] == 0.0) return std::numeric_limits<double>::infinity();
    kl += p[i] * std::log(p[i] / q[i]);
  }
  return kl;
}

DiscreteDistribution info_projection(const DiscreteDistribution& q, const std::set<std::size_t>& family_support) {
  std::vector<double> p(q.outcomes(), 0.0);
  double mass = 0.0;
  for (auto i : family_support) {
    if (i < q.outcomes() && q[i] > 0.0) {
      p[i] = q[i];
      mass += q[i];
    }
  }
  if (mass == 0.0) throw DisjointSupport();
  for (double& v : p) v /= mass;
  // renormalisation can leave the sum one ulp away from 1
  const double total = std::accumulate(p.begin(), p.end(), 0.0);
  for (double& v : p) v /= total;
  return DiscreteDistribution(std::move(p));
}

double default_grid_resolution(std::size_t free_outcomes) { return free_outcomes <= 4 ? 0.01 : 0.05; }

namespace {

void enumerate_simplex(std::size_t dims, int steps, std::vector<int>& current, std::size_t depth, int remaining,
                       const std::function<void(const std::vector<int>&)>& visit) {
  if (depth + 1 == dims) {
    current[depth] = remaining;
    visit(current);
    return;
  }
  for (int k = 0; k <= remaining; ++k) {
    current[depth] = k;
    enumerate_simplex(dims, steps, current, depth + 1, remaining - k, visit);
  }
}

}  // namespace

DiscreteDistribution info_projection_brute_force(const DiscreteDistribution& q,
                                                 const std::set<std::size_t>& family_support, double resolution) {
  std::vector<std::size_t> free;
  for (auto i : family_support) {
    if (i < q.outcomes()) free.push_back(i);
  }
  bool overlap = false;
  for (auto i : free) overlap = overlap || q[i] > 0.0;
  if (!overlap) throw DisjointSupport();

  const int steps = static_cast<int>(std::lround(1.0 / resolution));
  double best = std::numeric_limits<double>::infinity();
  std::vector<double> best_p;
  std::vector<int> current(free.size(), 0);
  enumerate_simplex(free.size(), steps, current, 0, steps, [&](const std::vector<int>& counts) {
    double kl = 0.0;
    for (std::size_t j = 0; j < free.size(); ++j) {
      if (counts[j] == 0) continue;
      const double pj = static_cast<double>(counts[j]) / steps;
      const double qj = q[free[j]];
      if (qj == 0.0) return;
      kl += pj * std::log(pj / qj);
    }
    if (kl < best) {
      best = kl;
      best_p.assign(q.outcomes(), 0.0);
      for (std::size_t j = 0; j < free.size(); ++j) best_p[free[j]] = static_cast<double>(counts[j]) / steps;
    }
  });
  const double total = std::accumulate(best_p.begin(), best_p.end(), 0.0);
  for (double& v : best_p) v /= total;
  return DiscreteDistribution(std::move(best_p));
}

std::vector<DiscreteDistribution> sequential_projection(const DiscreteDistribution& q,
                                                        std::span<const std::set<std::size_t>> families) {
  std::vector<DiscreteDistribution> out;
  const DiscreteDistribution* current = &q;
  for (const auto& family : families) {
    out.push_back(info_projection(*current, family));
    current = &out.back();
  }
  return out;
}

Gaussian conjugate_posterior(const Gaussian& prior, const Eigen::MatrixXd& design, const Eigen::VectorXd& targets,
                             double noise_variance) {
  if (design.rows() != targets.size() || design.cols() != prior.mean.size()) {
    throw ShapeError("conjugate_posterior", "design, targets and prior dimensions disagree");
  }
  const Eigen::MatrixXd prior_precision = prior.covariance.inverse();
  const Eigen::MatrixXd precision = prior_precision + design.transpose() * design / noise_variance;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(precision);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive() ||
      ldlt.vectorD().minCoeff() <= 1e-14 * std::max(1.0, ldlt.vectorD().maxCoeff())) {
    throw std::domain_error("conjugate_posterior: singular precision");
  }
  Gaussian post;
  post.covariance = ldlt.solve(Eigen::MatrixXd::Identity(precision.rows(), precision.cols()));
  post.mean = ldlt.solve(prior_precision * prior.mean + design.transpose() * targets / noise_variance);
  return post;
}

OlsSolution ols_solve(const Eigen::MatrixXd& design, const Eigen::MatrixXd& targets) {
  if (design.rows() != targets.rows()) throw ShapeError("ols_solve", "design and targets row counts differ");
  Eigen::MatrixXd gram = design.transpose() * design;
  const Eigen::MatrixXd rhs = design.transpose() * targets;
  OlsSolution out;
  Eigen::FullPivLU<Eigen::MatrixXd> lu(gram);
  if (lu.rank() < gram.rows()) {
    gram += 1e-8 * Eigen::MatrixXd::Identity(gram.rows(), gram.cols());
    out.ridge_fallback = true;
    out.coefficients = gram.ldlt().solve(rhs);
  } else {
    out.coefficients = lu.solve(rhs);
  }
  return out;
}

Eigen::MatrixXd to_eigen(const Tensor& t) {
  Eigen::MatrixXd m(t.rows(), t.cols());
  for (std::size_t r = 0; r < t.rows(); ++r) {
    for (std::size_t c = 0; c < t.cols(); ++c) m(r, c) = t[r * t.cols() + c];
  }
  return m;
}

}  // namespace cirm::oracle
