#include <cmath>
#include <numbers>
#include <stdexcept>

#include "cirm/methods.hpp"

namespace cirm::methods {

double linear_stationarity_check(const Eigen::MatrixXd& Phi, const Eigen::MatrixXd& w, const Eigen::MatrixXd& X,
                                 const Eigen::MatrixXd& Y) {
  if (X.rows() == 0 || X.rows() != Y.rows()) throw std::invalid_argument("linear_stationarity_check: bad data");
  if (Phi.cols() != X.cols() || w.rows() != Phi.rows() || w.cols() != Y.cols()) {
    throw std::invalid_argument("linear_stationarity_check: dimension mismatch");
  }
  const double n = static_cast<double>(X.rows());
  const Eigen::MatrixXd sxx = X.transpose() * X / n;
  const Eigen::MatrixXd sxy = X.transpose() * Y / n;
  return (Phi * sxx * Phi.transpose() * w - Phi * sxy).norm();
}

LinearGaussianVcl vcl_linear_gaussian_step(const LinearGaussianVcl& prior, const Eigen::MatrixXd& X,
                                           const Eigen::VectorXd& y, double noise_var) {
  if (!(noise_var > 0.0)) throw std::invalid_argument("vcl_linear_gaussian_step: noise variance must be > 0");
  if (X.rows() != y.size() || X.cols() != prior.mean.size()) {
    throw std::invalid_argument("vcl_linear_gaussian_step: dimension mismatch");
  }
  // dF/dS = X^T X / (2 s^2) + P^-1 / 2 - S^-1 / 2 = 0
  // dF/dm = -X^T (y - X m) / s^2 + P^-1 (m - m_p) = 0
  const Eigen::MatrixXd prior_inv = prior.covariance.llt().solve(Eigen::MatrixXd::Identity(X.cols(), X.cols()));
  const Eigen::MatrixXd a = X.transpose() * X / noise_var + prior_inv;
  Eigen::LLT<Eigen::MatrixXd> llt(a);
  if (llt.info() != Eigen::Success) throw std::domain_error("vcl_linear_gaussian_step: indefinite precision");
  LinearGaussianVcl q;
  q.covariance = llt.solve(Eigen::MatrixXd::Identity(X.cols(), X.cols()));
  q.mean = llt.solve(X.transpose() * y / noise_var + prior_inv * prior.mean);
  return q;
}

double vcl_linear_gaussian_objective(const LinearGaussianVcl& q, const LinearGaussianVcl& prior,
                                     const Eigen::MatrixXd& X, const Eigen::VectorXd& y, double noise_var) {
  const double n = static_cast<double>(X.rows());
  const double d = static_cast<double>(q.mean.size());
  const Eigen::VectorXd r = y - X * q.mean;
  const double expected_nll = 0.5 * n * std::log(2.0 * std::numbers::pi * noise_var) +
                              (r.squaredNorm() + (X.transpose() * X * q.covariance).trace()) / (2.0 * noise_var);
  const Eigen::LLT<Eigen::MatrixXd> lp(prior.covariance);
  const Eigen::LLT<Eigen::MatrixXd> lq(q.covariance);
  if (lp.info() != Eigen::Success || lq.info() != Eigen::Success) {
    throw std::domain_error("vcl_linear_gaussian_objective: covariance not positive definite");
  }
  const Eigen::VectorXd dm = q.mean - prior.mean;
  const double logdet_p = 2.0 * Eigen::MatrixXd(lp.matrixL()).diagonal().array().log().sum();
  const double logdet_q = 2.0 * Eigen::MatrixXd(lq.matrixL()).diagonal().array().log().sum();
  const double kl = 0.5 * (lp.solve(q.covariance).trace() + dm.dot(lp.solve(dm)) - d + logdet_p - logdet_q);
  return expected_nll + kl;
}

EiilResult eiil_infer(const Tensor& reference_logits, const Tensor& targets, nn::LossKind kind,
                      const EiilConfig& cfg) {
  const std::size_t n = reference_logits.size();
  if (n == 0 || targets.size() != n) throw std::invalid_argument("eiil_infer: logits and targets must match");
  if (kind == nn::LossKind::SoftmaxCrossEntropy) throw std::invalid_argument("eiil_infer: single-output losses only");

  // d_i = d loss_i(s * z_i) / ds at s = 1
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double z = reference_logits[i];
    const double y = targets[i];
    d[i] = kind == nn::LossKind::BinaryCrossEntropy ? (1.0 / (1.0 + std::exp(-z)) - y) * z : 2.0 * (z - y) * z;
  }

  ParamSet logits;
  RandomStream rng(cfg.seed, {1});
  Tensor a(Shape{n});
  for (double& v : a.values()) v = 1e-3 * rng.normal();
  logits.add("eiil.logits", std::move(a), Partition::Feature);
  Optimizer opt({OptimizerKind::Adam, cfg.lr, 0.0});
  const double inv_n = 1.0 / static_cast<double>(n);

  const auto evaluate = [&](Tensor* grad) {
    const Tensor& av = logits[0].value;
    double ga = 0.0;
    double gb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double w = 1.0 / (1.0 + std::exp(-av[i]));
      ga += w * d[i] * inv_n;
      gb += (1.0 - w) * d[i] * inv_n;
    }
    if (grad) {
      for (std::size_t i = 0; i < n; ++i) {
        const double w = 1.0 / (1.0 + std::exp(-av[i]));
        // ascent on ga^2 + gb^2, so the optimizer sees the negated gradient
        (*grad)[i] = -(2.0 * ga - 2.0 * gb) * d[i] * inv_n * w * (1.0 - w);
      }
    }
    return ga * ga + gb * gb;
  };

  Tensor grad(Shape{n});
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    evaluate(&grad);
    const Tensor g[] = {grad};
    opt.step(logits, g);
  }

  EiilResult out;
  out.penalty = evaluate(nullptr);
  std::size_t in_a = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double w = 1.0 / (1.0 + std::exp(-logits[0].value[i]));
    out.weights.push_back(w);
    out.group.push_back(w >= 0.5 ? 0 : 1);
    in_a += w >= 0.5 ? 1 : 0;
  }
  out.degenerate = in_a == 0 || in_a == n;
  return out;
}

}  // namespace cirm::methods
