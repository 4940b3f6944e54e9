#pragma once

#include <functional>
#include <set>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "cirm/tensor.hpp"

/// Independent numerical references used to check the optimizers and
/// objectives: finite differences, discrete information projection,
/// conjugate Gaussian posteriors and ordinary least squares.
namespace cirm::oracle {

/// Central-difference gradient of a scalar function, one coordinate at a time.
std::vector<double> finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                                     std::span<const double> x, double h = 1e-4);

/// Relative error |a - b| / max(1, |a|, |b|) maximised over components.
double max_relative_error(std::span<const double> a, std::span<const double> b);

class DisjointSupport : public std::domain_error {
 public:
  DisjointSupport() : std::domain_error("support of q does not meet the constraint family") {}
};

/// Probability vector over outcomes 0..n-1.
class DiscreteDistribution {
 public:
  explicit DiscreteDistribution(std::vector<double> probabilities);
  static DiscreteDistribution uniform_on(std::size_t n, const std::set<std::size_t>& support);

  std::size_t outcomes() const { return p_.size(); }
  double operator[](std::size_t i) const { return p_[i]; }
  std::span<const double> probabilities() const { return p_; }
  std::set<std::size_t> support() const;

 private:
  std::vector<double> p_;
};

/// KL(p || q); +infinity when p puts mass where q has none.
double kl_divergence(const DiscreteDistribution& p, const DiscreteDistribution& q);

/// argmin over distributions supported on `family_support` of KL(p || q):
/// q restricted to the intersection of supports and renormalised.
DiscreteDistribution info_projection(const DiscreteDistribution& q,
                                     const std::set<std::size_t>& family_support);

/// Same projection by exhaustive search over a simplex grid with the given step.
DiscreteDistribution info_projection_brute_force(const DiscreteDistribution& q,
                                                 const std::set<std::size_t>& family_support,
                                                 double resolution);

/// Grid step used for brute force: 0.01 up to 4 free outcomes, 0.05 up to 6.
double default_grid_resolution(std::size_t free_outcomes);

/// p_1 = projection of q onto S_1, p_{i+1} = projection of p_i onto S_{i+1}.
std::vector<DiscreteDistribution> sequential_projection(const DiscreteDistribution& q,
                                                        std::span<const std::set<std::size_t>> families);

struct Gaussian {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;
};

/// Posterior of theta ~ prior given y = X theta + noise, noise ~ N(0, noise_variance I).
/// Throws std::domain_error when the posterior precision is singular.
Gaussian conjugate_posterior(const Gaussian& prior, const Eigen::MatrixXd& design,
                             const Eigen::VectorXd& targets, double noise_variance);

struct OlsSolution {
  Eigen::MatrixXd coefficients;  // [features x outputs]
  bool ridge_fallback = false;
};

/// (X^T X)^{-1} X^T Y, adding 1e-8 I to X^T X when it is not invertible.
OlsSolution ols_solve(const Eigen::MatrixXd& design, const Eigen::MatrixXd& targets);

Eigen::MatrixXd to_eigen(const Tensor& t);

}  // namespace cirm::oracle
