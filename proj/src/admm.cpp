#include "cirm/admm.hpp"

#include <exception>
#include <thread>

namespace cirm::admm {

namespace {

void check_finite(std::size_t e, const Vector& x, const char* what) {
  if (!x.allFinite()) throw AdmmError(e, std::string("non-finite values after ") + what);
}

}  // namespace

AdmmState AdmmState::make(std::size_t n_blocks, const Vector& init, std::size_t constraint_dim, double rho0,
                          double rho1) {
  if (n_blocks == 0) throw std::invalid_argument("admm: at least one block required");
  if (!(rho0 > 0.0) || !(rho1 >= 0.0)) throw std::invalid_argument("admm: need rho0 > 0 and rho1 >= 0");
  AdmmState s;
  s.blocks.assign(n_blocks, init);
  s.u.assign(n_blocks, Vector::Zero(init.size()));
  s.v.assign(n_blocks, Vector::Zero(static_cast<Eigen::Index>(constraint_dim)));
  s.consensus = init;
  s.previous_consensus = init;
  s.rho0 = rho0;
  s.rho1 = rho1;
  return s;
}

void gadmm_step(AdmmState& state, const BlockMinimizer& minimize, const ConstraintMap& constraint, Execution exec) {
  const std::size_t n = state.size();
  std::vector<Vector> updated(n);
  if (exec == Execution::Parallel && n > 1) {
    std::vector<std::exception_ptr> errors(n);
    std::vector<std::thread> workers;
    workers.reserve(n);
    const AdmmState& snapshot = state;
    for (std::size_t e = 0; e < n; ++e) {
      workers.emplace_back([&, e] {
        try {
          updated[e] = minimize(e, snapshot);
        } catch (...) {
          errors[e] = std::current_exception();
        }
      });
    }
    for (auto& w : workers) w.join();
    for (std::size_t e = 0; e < n; ++e) {
      if (errors[e]) {
        try {
          std::rethrow_exception(errors[e]);
        } catch (const AdmmError&) {
          throw;
        } catch (const std::exception& ex) {
          throw AdmmError(e, ex.what());
        }
      }
    }
  } else {
    for (std::size_t e = 0; e < n; ++e) {
      try {
        updated[e] = minimize(e, state);
      } catch (const AdmmError&) {
        throw;
      } catch (const std::exception& ex) {
        throw AdmmError(e, ex.what());
      }
    }
  }
  for (std::size_t e = 0; e < n; ++e) {
    if (updated[e].size() != state.blocks[e].size()) throw AdmmError(e, "block minimizer changed the dimension");
    check_finite(e, updated[e], "block update");
    state.blocks[e] = std::move(updated[e]);
  }

  state.previous_consensus = state.consensus;
  Vector sum = Vector::Zero(state.consensus.size());
  for (std::size_t e = 0; e < n; ++e) sum += state.blocks[e] + state.u[e];
  double count = static_cast<double>(n);
  if (state.anchor) {
    sum += *state.anchor;
    count += 1.0;
  }
  state.consensus = sum / count;

  for (std::size_t e = 0; e < n; ++e) {
    state.u[e] += state.blocks[e] - state.consensus;
    check_finite(e, state.u[e], "u update");
  }
  if (constraint) {
    for (std::size_t e = 0; e < n; ++e) {
      const Vector g = constraint(e, state.blocks[e]);
      if (g.size() != state.v[e].size()) throw AdmmError(e, "constraint dimension differs from v");
      state.v[e] += g;
      check_finite(e, state.v[e], "v update");
    }
  }
  ++state.iteration;
}

Residuals residuals(const AdmmState& state, const ConstraintMap& constraint) {
  Residuals r;
  for (std::size_t e = 0; e < state.size(); ++e) {
    r.primal = std::max(r.primal, (state.blocks[e] - state.consensus).norm());
    if (constraint) r.constraint = std::max(r.constraint, constraint(e, state.blocks[e]).norm());
  }
  r.dual = state.rho0 * (state.consensus - state.previous_consensus).norm();
  return r;
}

double scheduled_rho1(double initial_rho1, double delta_rho, std::size_t epoch, std::size_t total_epochs) {
  return 2 * epoch >= total_epochs ? initial_rho1 + delta_rho : initial_rho1;
}

void rho_schedule(AdmmState& state, double initial_rho1, double delta_rho, std::size_t epoch,
                  std::size_t total_epochs) {
  state.rho1 = scheduled_rho1(initial_rho1, delta_rho, epoch, total_epochs);
}

bool converged(const Residuals& r, double tol) { return r.primal < tol && r.dual < tol && r.constraint < tol; }

}  // namespace cirm::admm
