#pragma once

#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace cirm::admm {

using Vector = Eigen::VectorXd;

class AdmmError : public std::runtime_error {
 public:
  AdmmError(std::size_t block, const std::string& what)
      : std::runtime_error("admm block " + std::to_string(block) + ": " + what), block_(block) {}
  std::size_t block() const { return block_; }

 private:
  std::size_t block_;
};

/// Scaled consensus ADMM with per-block constraint duals.
struct AdmmState {
  std::vector<Vector> blocks;  // omega_e
  std::vector<Vector> u;       // scaled consensus duals
  std::vector<Vector> v;       // constraint duals, shaped like g_e
  Vector consensus;            // omega
  Vector previous_consensus;
  /// When set the consensus also averages in this fixed vector:
  /// omega = (sum_e (omega_e + u_e) + anchor) / (|E| + 1).
  std::optional<Vector> anchor;
  double rho0 = 10.0;
  double rho1 = 10.0;
  std::size_t iteration = 0;

  /// Every block, dual and the consensus start at `init`; v_e starts at zero of size `constraint_dim`.
  static AdmmState make(std::size_t n_blocks, const Vector& init, std::size_t constraint_dim, double rho0,
                        double rho1);
  std::size_t size() const { return blocks.size(); }
};

struct Residuals {
  double primal = 0.0;      // max_e ||omega_e - omega||
  double dual = 0.0;        // rho0 ||omega+ - omega-||
  double constraint = 0.0;  // max_e ||g_e(omega_e)||
};

/// Returns the new omega_e, approximately minimising
/// f_e(x) + rho0/2 ||x - omega + u_e||^2 + rho1/2 ||g_e(x) + v_e||^2.
using BlockMinimizer = std::function<Vector(std::size_t e, const AdmmState& state)>;
/// g_e(x). An empty function means no constraint.
using ConstraintMap = std::function<Vector(std::size_t e, const Vector& x)>;

enum class Execution { Serial, Parallel };

/// One iteration: block updates, consensus, u update, v update.
void gadmm_step(AdmmState& state, const BlockMinimizer& minimize, const ConstraintMap& constraint,
                Execution exec = Execution::Serial);

/// Residuals after the last step. Constraint residual needs g; pass an empty map for none.
Residuals residuals(const AdmmState& state, const ConstraintMap& constraint = {});

/// rho1 for the given epoch: initial value before total_epochs / 2, initial + delta_rho from then on.
double scheduled_rho1(double initial_rho1, double delta_rho, std::size_t epoch, std::size_t total_epochs);
void rho_schedule(AdmmState& state, double initial_rho1, double delta_rho, std::size_t epoch,
                  std::size_t total_epochs);

bool converged(const Residuals& r, double tol = 1e-4);

}  // namespace cirm::admm
