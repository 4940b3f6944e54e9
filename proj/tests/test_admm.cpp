#include <gtest/gtest.h>

#include <cmath>

#include "cirm/admm.hpp"
#include "cirm/rng.hpp"

using namespace cirm;
using namespace cirm::admm;

namespace {

// argmin_x (x - a)^2 + rho0/2 (x - z + u)^2
BlockMinimizer exact_quadratic(std::vector<double> a) {
  return [a](std::size_t e, const AdmmState& s) {
    Vector x(1);
    x[0] = (2.0 * a[e] + s.rho0 * (s.consensus[0] - s.u[e][0])) / (2.0 + s.rho0);
    return x;
  };
}

Vector scalar(double v) {
  Vector x(1);
  x[0] = v;
  return x;
}

// Noisy SGD on a vector quadratic, seeded per (block, iteration).
BlockMinimizer noisy_sgd(std::size_t dim) {
  return [dim](std::size_t e, const AdmmState& s) {
    RandomStream rng(42, {e, s.iteration});
    Vector x = s.blocks[e];
    Vector target = Vector::Constant(static_cast<Eigen::Index>(dim), static_cast<double>(e + 1));
    for (int step = 0; step < 20; ++step) {
      Vector grad = 2.0 * (x - target) + s.rho0 * (x - s.consensus + s.u[e]) + s.rho1 * (x + s.v[e]);
      for (Eigen::Index i = 0; i < grad.size(); ++i) grad[i] += 0.1 * rng.normal();
      x -= 0.01 * grad;
    }
    return x;
  };
}

}  // namespace

TEST(Gadmm, QuadraticToyConvergesToMean) {
  auto state = AdmmState::make(2, scalar(0.0), 0, 10.0, 10.0);
  const auto minimize = exact_quadratic({1.0, 3.0});
  int iterations = 0;
  while (iterations < 200) {
    gadmm_step(state, minimize, {});
    ++iterations;
    if (std::abs(state.consensus[0] - 2.0) < 1e-3 && converged(residuals(state), 1e-3)) break;
  }
  EXPECT_LE(iterations, 200);
  EXPECT_NEAR(state.consensus[0], 2.0, 1e-3);
  const auto r = residuals(state);
  EXPECT_LT(r.primal, 1e-3);
  EXPECT_LT(r.dual, 1e-3);
  EXPECT_LT(r.constraint, 1e-3);
}

TEST(Gadmm, FirstIterationMatchesHandStep) {
  auto state = AdmmState::make(2, scalar(0.0), 0, 10.0, 10.0);
  gadmm_step(state, exact_quadratic({1.0, 3.0}), {});
  // x1 = 2/12, x2 = 6/12, z = 1/3, u = (-1/6, 1/6)
  EXPECT_NEAR(state.blocks[0][0], 1.0 / 6.0, 1e-15);
  EXPECT_NEAR(state.blocks[1][0], 0.5, 1e-15);
  EXPECT_NEAR(state.consensus[0], 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(state.u[0][0], -1.0 / 6.0, 1e-15);
  EXPECT_NEAR(state.u[1][0], 1.0 / 6.0, 1e-15);
  EXPECT_NEAR(residuals(state).primal, 1.0 / 6.0, 1e-15);
  EXPECT_NEAR(residuals(state).dual, 10.0 / 3.0, 1e-14);
}

TEST(Gadmm, SingleBlockReachesMinimizer) {
  auto state = AdmmState::make(1, scalar(0.0), 0, 10.0, 10.0);
  for (int i = 0; i < 200; ++i) gadmm_step(state, exact_quadratic({-4.0}), {});
  EXPECT_NEAR(state.consensus[0], -4.0, 1e-6);
  EXPECT_NEAR(state.blocks[0][0], -4.0, 1e-6);
}

TEST(Gadmm, FixedPointIsStationary) {
  auto state = AdmmState::make(2, scalar(2.0), 0, 10.0, 10.0);
  state.u[0][0] = -0.2;  // 2 (x - a) + rho0 u = 0 at x = z = 2
  state.u[1][0] = 0.2;
  const auto before = state;
  gadmm_step(state, exact_quadratic({1.0, 3.0}), {});
  for (std::size_t e = 0; e < 2; ++e) {
    EXPECT_NEAR(state.blocks[e][0], 2.0, 1e-14);
    EXPECT_NEAR(state.u[e][0], before.u[e][0], 1e-14);
  }
  EXPECT_NEAR(state.consensus[0], 2.0, 1e-14);
}

TEST(Gadmm, DualSumStaysZero) {
  auto state = AdmmState::make(3, Vector::Zero(4), 4, 10.0, 10.0);
  const ConstraintMap g = [](std::size_t, const Vector& x) -> Vector { return 0.1 * x; };
  for (int i = 0; i < 50; ++i) {
    gadmm_step(state, noisy_sgd(4), g);
    Vector sum = Vector::Zero(4);
    for (const auto& u : state.u) sum += u;
    EXPECT_LT(sum.cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Gadmm, SerialAndParallelAreBitIdentical) {
  const ConstraintMap g = [](std::size_t e, const Vector& x) -> Vector { return x * (0.5 + e); };
  auto serial = AdmmState::make(4, Vector::Zero(6), 6, 10.0, 1.0);
  auto parallel = serial;
  for (int i = 0; i < 30; ++i) {
    gadmm_step(serial, noisy_sgd(6), g, Execution::Serial);
    gadmm_step(parallel, noisy_sgd(6), g, Execution::Parallel);
  }
  for (std::size_t e = 0; e < 4; ++e) {
    EXPECT_EQ(serial.blocks[e], parallel.blocks[e]);
    EXPECT_EQ(serial.u[e], parallel.u[e]);
    EXPECT_EQ(serial.v[e], parallel.v[e]);
  }
  EXPECT_EQ(serial.consensus, parallel.consensus);
}

TEST(Gadmm, AnchoredConsensusAveragesWithAnchor) {
  auto state = AdmmState::make(1, scalar(0.0), 0, 10.0, 10.0);
  state.anchor = scalar(1.0);
  const BlockMinimizer fixed = [](std::size_t, const AdmmState&) { return scalar(3.0); };
  gadmm_step(state, fixed, {});
  EXPECT_DOUBLE_EQ(state.consensus[0], 2.0);  // (3 + 0 + 1) / 2
  EXPECT_DOUBLE_EQ(state.u[0][0], 1.0);
}

TEST(Gadmm, NanReportsBlock) {
  auto state = AdmmState::make(3, scalar(0.0), 0, 10.0, 10.0);
  const BlockMinimizer bad = [](std::size_t e, const AdmmState&) { return scalar(e == 1 ? std::nan("") : 0.0); };
  for (auto exec : {Execution::Serial, Execution::Parallel}) {
    try {
      gadmm_step(state, bad, {}, exec);
      FAIL() << "expected AdmmError";
    } catch (const AdmmError& err) {
      EXPECT_EQ(err.block(), 1u);
    }
  }
  const BlockMinimizer throws = [](std::size_t e, const AdmmState&) -> Vector {
    if (e == 2) throw std::runtime_error("boom");
    return scalar(0.0);
  };
  try {
    gadmm_step(state, throws, {}, Execution::Parallel);
    FAIL() << "expected AdmmError";
  } catch (const AdmmError& err) {
    EXPECT_EQ(err.block(), 2u);
  }
}

TEST(RhoSchedule, AdditiveStepAtHalfEpochs) {
  EXPECT_EQ(scheduled_rho1(10.0, 100.0, 0, 100), 10.0);
  EXPECT_EQ(scheduled_rho1(10.0, 100.0, 49, 100), 10.0);
  EXPECT_EQ(scheduled_rho1(10.0, 100.0, 50, 100), 110.0);
  EXPECT_EQ(scheduled_rho1(10.0, 100.0, 99, 100), 110.0);
  EXPECT_EQ(scheduled_rho1(10.0, 0.0, 99, 100), 10.0);
  auto state = AdmmState::make(1, scalar(0.0), 0, 10.0, 10.0);
  rho_schedule(state, 10.0, 100.0, 60, 100);
  EXPECT_EQ(state.rho1, 110.0);
  EXPECT_EQ(state.rho0, 10.0);
}

TEST(Gadmm, RejectsBadSetup) {
  EXPECT_THROW(AdmmState::make(0, scalar(0.0), 0, 10.0, 10.0), std::invalid_argument);
  EXPECT_THROW(AdmmState::make(1, scalar(0.0), 0, 0.0, 10.0), std::invalid_argument);
}
