#include <gtest/gtest.h>

#include <cmath>

#include "cirm/envgen.hpp"
#include "cirm/oracle.hpp"
#include "cirm/rng.hpp"

using namespace cirm;
using namespace cirm::oracle;

TEST(FiniteDiff, Examples) {
  const auto sq = [](std::span<const double> x) { return x[0] * x[0]; };
  const double x3[] = {3.0};
  EXPECT_NEAR(finite_diff_grad(sq, x3, 1e-4)[0], 6.0, 1e-6);
  const auto constant = [](std::span<const double>) { return 4.2; };
  const double pt[] = {1.0, -2.0};
  for (double g : finite_diff_grad(constant, pt)) EXPECT_EQ(g, 0.0);
  const double h = 1e-3;
  const double x0[] = {0.0};
  const auto s = [](std::span<const double> x) { return std::sin(x[0]); };
  EXPECT_NEAR(finite_diff_grad(s, x0, h)[0], 1.0, h * h);
  const auto bad = [](std::span<const double> x) { return x[0] > 0 ? std::log(-1.0) : 0.0; };
  EXPECT_THROW(finite_diff_grad(bad, x0, h), NumericError);
}

TEST(InfoProjection, UniformOntoShiftedSupport) {
  const auto q = DiscreteDistribution::uniform_on(5, {1, 2, 3});
  const auto p = info_projection(q, {2, 3, 4});
  EXPECT_NEAR(p[2], 0.5, 1e-15);
  EXPECT_NEAR(p[3], 0.5, 1e-15);
  EXPECT_EQ(p.support(), (std::set<std::size_t>{2, 3}));
  const auto bf = info_projection_brute_force(q, {2, 3, 4}, 0.01);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(bf[i], p[i], 0.01);
}

TEST(InfoProjection, FeasibleQIsItsOwnProjection) {
  const DiscreteDistribution q({0.1, 0.6, 0.3, 0.0});
  const auto p = info_projection(q, {0, 1, 2, 3});
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(p[i], q[i]);
  EXPECT_EQ(kl_divergence(p, q), 0.0);
}

TEST(InfoProjection, DisjointSupportIsRejected) {
  const auto q = DiscreteDistribution::uniform_on(4, {0, 1});
  EXPECT_THROW(info_projection(q, {2, 3}), DisjointSupport);
  EXPECT_THROW(info_projection_brute_force(q, {2, 3}, 0.05), DisjointSupport);
}

TEST(InfoProjection, ClosedFormMatchesBruteForceOnRandomCases) {
  RandomStream rng(2024);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + rng.index(5);  // 2..6 outcomes
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
    const DiscreteDistribution q(w);
    std::set<std::size_t> family;
    for (std::size_t i = 0; i < n; ++i) {
      if (rng.bernoulli(0.6)) family.insert(i);
    }
    family.insert(*q.support().begin());
    const double res = default_grid_resolution(family.size());
    const auto p = info_projection(q, family);
    const auto bf = info_projection_brute_force(q, family, res);
    for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(bf[i], p[i], res) << "trial " << trial;
    EXPECT_LE(kl_divergence(p, q), kl_divergence(bf, q) + 1e-12) << "trial " << trial;
    for (auto i : p.support()) {
      EXPECT_TRUE(family.count(i) && q[i] > 0.0);
    }
  }
}

TEST(InfoProjection, SequentialSupportShrinks) {
  const auto q = DiscreteDistribution::uniform_on(5, {1, 2, 3, 4});
  const std::vector<std::set<std::size_t>> families = {{1, 2, 3}, {2, 3}, {3, 4}};
  const auto chain = sequential_projection(q, families);
  ASSERT_EQ(chain.size(), 3u);
  EXPECT_EQ(chain[0].support(), (std::set<std::size_t>{1, 2, 3}));
  EXPECT_EQ(chain[1].support(), (std::set<std::size_t>{2, 3}));
  EXPECT_EQ(chain.back().support(), (std::set<std::size_t>{3}));
  EXPECT_EQ(chain.back()[3], 1.0);
}

TEST(InfoProjection, SequentialSupportStaysInIntersectionOnRandomCases) {
  RandomStream rng(77);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 3 + rng.index(4);
    std::vector<double> w(n);
    for (auto& v : w) v = 0.1 + rng.uniform();
    double total = 0.0;
    for (double v : w) total += v;
    for (auto& v : w) v /= total;
    const DiscreteDistribution q(w);
    std::vector<std::set<std::size_t>> families;
    std::set<std::size_t> common;
    for (std::size_t i = 0; i < n; ++i) common.insert(i);
    const std::size_t keep = rng.index(n);
    for (int f = 0; f < 3; ++f) {
      std::set<std::size_t> s{keep};
      for (std::size_t i = 0; i < n; ++i) {
        if (rng.bernoulli(0.5)) s.insert(i);
      }
      families.push_back(s);
    }
    const auto chain = sequential_projection(q, families);
    for (std::size_t i = 0; i < chain.size(); ++i) {
      std::set<std::size_t> inter;
      for (auto j : common) {
        bool all = true;
        for (std::size_t k = 0; k <= i; ++k) all = all && families[k].count(j);
        if (all) inter.insert(j);
      }
      for (auto j : chain[i].support()) EXPECT_TRUE(inter.count(j)) << "trial " << trial;
    }
  }
}

TEST(Conjugate, NoObservationsKeepsPrior) {
  const Gaussian prior{Eigen::Vector2d(0.5, -1.0), Eigen::Matrix2d{{2.0, 0.1}, {0.1, 1.0}}};
  const auto post = conjugate_posterior(prior, Eigen::MatrixXd(0, 2), Eigen::VectorXd(0), 1.0);
  EXPECT_LT((post.mean - prior.mean).norm(), 1e-15);
  EXPECT_LT((post.covariance - prior.covariance).norm(), 1e-14);
}

TEST(Conjugate, SingleDirectObservation) {
  const Gaussian prior{Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Identity(1, 1)};
  const auto post = conjugate_posterior(prior, Eigen::MatrixXd::Ones(1, 1), Eigen::VectorXd::Ones(1), 1.0);
  EXPECT_NEAR(post.mean[0], 0.5, 1e-15);
  EXPECT_NEAR(post.covariance(0, 0), 0.5, 1e-15);
}

TEST(Conjugate, SequentialEqualsBatch) {
  RandomStream rng(5);
  const int d = 3;
  const Gaussian prior{Eigen::VectorXd::Zero(d), Eigen::MatrixXd::Identity(d, d)};
  for (int chain = 2; chain <= 10; ++chain) {
    Gaussian seq = prior;
    Eigen::MatrixXd X_all(0, d);
    Eigen::VectorXd y_all(0);
    for (int t = 0; t < chain; ++t) {
      Eigen::MatrixXd X(5, d);
      Eigen::VectorXd y(5);
      for (int i = 0; i < 5; ++i) {
        for (int j = 0; j < d; ++j) X(i, j) = rng.normal();
        y[i] = rng.normal();
      }
      seq = conjugate_posterior(seq, X, y, 0.5);
      X_all.conservativeResize(X_all.rows() + 5, d);
      X_all.bottomRows(5) = X;
      y_all.conservativeResize(y_all.size() + 5);
      y_all.tail(5) = y;
    }
    const auto batch = conjugate_posterior(prior, X_all, y_all, 0.5);
    EXPECT_LT((seq.mean - batch.mean).cwiseAbs().maxCoeff(), 1e-12) << chain;
    EXPECT_LT((seq.covariance - batch.covariance).cwiseAbs().maxCoeff(), 1e-12) << chain;
  }
}

TEST(Conjugate, SingularPrecisionIsRejected) {
  const Gaussian prior{Eigen::VectorXd::Zero(2), Eigen::MatrixXd::Zero(2, 2)};
  EXPECT_THROW(conjugate_posterior(prior, Eigen::MatrixXd::Ones(1, 2), Eigen::VectorXd::Ones(1), 1.0),
               std::domain_error);
}

TEST(Ols, OrthonormalDesignRecoversCoefficients) {
  Eigen::MatrixXd X = Eigen::MatrixXd::Random(6, 3);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(X);
  const Eigen::MatrixXd Q = qr.householderQ() * Eigen::MatrixXd::Identity(6, 3);
  const Eigen::Vector3d c(1.5, -2.0, 0.25);
  const auto sol = ols_solve(Q, Q * c);
  EXPECT_LT((sol.coefficients - c).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_FALSE(sol.ridge_fallback);
}

TEST(Ols, HandFixture) {
  Eigen::MatrixXd X(2, 2);
  X << 1.0, 0.0, 0.0, 2.0;
  Eigen::MatrixXd Y(2, 1);
  Y << 1.0, 4.0;
  const auto sol = ols_solve(X, Y);
  EXPECT_NEAR(sol.coefficients(0, 0), 1.0, 1e-14);
  EXPECT_NEAR(sol.coefficients(1, 0), 2.0, 1e-14);
}

TEST(Ols, RankDeficientUsesRidgeFallback) {
  Eigen::MatrixXd X(3, 2);
  X << 1, 1, 2, 2, 3, 3;
  const auto sol = ols_solve(X, Eigen::MatrixXd::Ones(3, 1));
  EXPECT_TRUE(sol.ridge_fallback);
  EXPECT_TRUE(sol.coefficients.allFinite());
}

TEST(Ols, SemSpuriousBlockGrowsWithNoise) {
  const auto lo = env::synth_sem(4000, 0.1, 1.0, 1);
  const auto hi = env::synth_sem(4000, 3.0, 1.0, 2);
  const auto fit = [](const env::EnvironmentData& e) {
    return ols_solve(to_eigen(e.features), to_eigen(e.targets)).coefficients;
  };
  const Eigen::MatrixXd c_lo = fit(lo);
  const Eigen::MatrixXd c_hi = fit(hi);
  EXPECT_GT(c_hi.bottomRows(4).norm(), c_lo.bottomRows(4).norm());
  EXPECT_GT(c_hi.bottomRows(4).norm(), c_hi.topRows(4).norm());
}
