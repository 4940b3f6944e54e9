#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace cirm::validation {

struct Check {
  std::string name;
  bool passed = false;
  std::string detail;
  std::size_t cases = 0;
  double worst = 0.0;
};

/// Every autodiff primitive against central differences, `cases` random inputs each.
std::vector<Check> primitive_gradients(std::size_t cases = 100, std::uint64_t seed = 2024, double tol = 1e-3);
/// Closed-form KL gradients (mu and rho) against central differences.
Check kl_gradients(std::size_t cases = 100, std::uint64_t seed = 7, double tol = 1e-3);
/// Gradient of a loss through w = mu + softplus(rho) * eps with eps held fixed.
Check reparam_gradients(std::size_t cases = 100, std::uint64_t seed = 8, double tol = 1e-3);
/// Gradient of the IRMv1 objective (risk + lambda * penalty) with respect to model weights.
Check irmv1_gradients(std::size_t cases = 100, std::uint64_t seed = 9, double tol = 1e-3);

/// Sequential VCL on conjugate linear-Gaussian data against the batch posterior.
Check bayes_recursion(std::size_t min_chain = 2, std::size_t max_chain = 10, std::uint64_t seed = 31,
                      double tol = 1e-6);

/// Closed-form information projection against grid search on random cases.
Check info_projection(std::size_t cases = 50, std::uint64_t seed = 2024);
/// Sequentially projected supports stay inside the running intersection.
Check support_shrinkage(std::size_t cases = 50, std::uint64_t seed = 77);

/// Scalar consensus toy reaches the mean within 1e-3 in at most 200 iterations.
Check admm_quadratic_toy();
/// Serial and parallel block execution with per-block streams give identical states.
Check admm_serial_parallel();

/// All of the above.
std::vector<Check> oracle_suite();

}  // namespace cirm::validation
