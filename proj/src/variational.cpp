#include "cirm/variational.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace cirm {

double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double softplus_inverse(double y) {
  if (!(y > 0.0)) throw NumericError("softplus_inverse: argument must be positive");
  return y > 30.0 ? y + std::log(-std::expm1(-y)) : std::log(std::expm1(y));
}

GaussianVariable GaussianVariable::from_sigma(Tensor mu, const Tensor& sigma) {
  if (mu.shape() != sigma.shape()) throw ShapeError("from_sigma", mu.shape(), sigma.shape());
  Tensor rho(sigma.shape());
  for (std::size_t i = 0; i < rho.size(); ++i) rho[i] = softplus_inverse(sigma[i]);
  return {std::move(mu), std::move(rho)};
}

GaussianVariable GaussianVariable::standard(const Shape& shape) {
  return from_sigma(Tensor(shape, 0.0), Tensor(shape, 1.0));
}

Tensor GaussianVariable::sigma() const {
  Tensor s(rho.shape());
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = softplus(rho[i]);
  return s;
}

Tensor sample_reparam(const GaussianVariable& gv, const Tensor& epsilon) {
  if (gv.mu.shape() != gv.rho.shape()) throw ShapeError("sample_reparam", gv.mu.shape(), gv.rho.shape());
  if (epsilon.shape() != gv.mu.shape()) throw ShapeError("sample_reparam", gv.mu.shape(), epsilon.shape());
  const Tensor sigma = gv.sigma();
  Tensor out(gv.mu.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = gv.mu[i] + epsilon[i] * sigma[i];
  return out;
}

ad::Var sample_reparam(ad::Graph& g, ad::Var mu, ad::Var sigma, const Tensor& epsilon) {
  if (epsilon.shape() != g.shape(mu)) throw ShapeError("sample_reparam", g.shape(mu), epsilon.shape());
  return g.add(mu, g.mul(sigma, g.constant(epsilon)));
}

namespace {

void check_pair(const GaussianVariable& q, const GaussianVariable& p) {
  if (q.mu.shape() != q.rho.shape()) throw ShapeError("kl_gaussian_diag", q.mu.shape(), q.rho.shape());
  if (p.mu.shape() != p.rho.shape()) throw ShapeError("kl_gaussian_diag", p.mu.shape(), p.rho.shape());
  if (q.mu.shape() != p.mu.shape()) throw ShapeError("kl_gaussian_diag", q.mu.shape(), p.mu.shape());
}

void check_positive(const Tensor& sigma) {
  for (double s : sigma.values()) {
    if (!(s > 0.0)) throw NumericError("kl_gaussian_diag: non-positive sigma");
  }
}

}  // namespace

double kl_gaussian_diag(const GaussianVariable& q, const GaussianVariable& p) {
  check_pair(q, p);
  const Tensor sq = q.sigma();
  const Tensor sp = p.sigma();
  check_positive(sq);
  check_positive(sp);
  double kl = 0.0;
  for (std::size_t j = 0; j < sq.size(); ++j) {
    const double d = q.mu[j] - p.mu[j];
    kl += std::log(sp[j] / sq[j]) + (sq[j] * sq[j] + d * d) / (2.0 * sp[j] * sp[j]) - 0.5;
  }
  return kl;
}

double kl_gaussian_diag(std::span<const GaussianVariable> q, std::span<const GaussianVariable> p) {
  if (q.size() != p.size()) {
    throw ShapeError("kl_gaussian_diag", "variable counts " + std::to_string(q.size()) + " and " +
                                             std::to_string(p.size()));
  }
  double kl = 0.0;
  for (std::size_t k = 0; k < q.size(); ++k) kl += kl_gaussian_diag(q[k], p[k]);
  return kl;
}

ad::Var kl_gaussian_diag(ad::Graph& g, ad::Var mu_q, ad::Var sigma_q, const GaussianVariable& p) {
  if (g.shape(mu_q) != p.mu.shape()) throw ShapeError("kl_gaussian_diag", g.shape(mu_q), p.mu.shape());
  const Tensor sp = p.sigma();
  check_positive(sp);
  Tensor inv_two_var(sp.shape());
  double const_part = 0.0;
  for (std::size_t j = 0; j < sp.size(); ++j) {
    inv_two_var[j] = 1.0 / (2.0 * sp[j] * sp[j]);
    const_part += std::log(sp[j]) - 0.5;
  }
  ad::Var diff = g.sub(mu_q, g.constant(p.mu));
  ad::Var quad = g.mul(g.add(g.square(sigma_q), g.square(diff)), g.constant(inv_two_var));
  ad::Var total = g.sub(g.sum(quad), g.sum(g.log(sigma_q)));
  return g.add_scalar(total, const_part);
}

KlGradient kl_gradients(const GaussianVariable& q, const GaussianVariable& p) {
  check_pair(q, p);
  const Tensor sq = q.sigma();
  const Tensor sp = p.sigma();
  check_positive(sq);
  check_positive(sp);
  KlGradient out{Tensor(q.mu.shape()), Tensor(q.mu.shape())};
  for (std::size_t j = 0; j < sq.size(); ++j) {
    const double var_p = sp[j] * sp[j];
    out.mu[j] = (q.mu[j] - p.mu[j]) / var_p;
    const double d_sigma = -1.0 / sq[j] + sq[j] / var_p;
    const double d_rho = 1.0 / (1.0 + std::exp(-q.rho[j]));
    out.rho[j] = d_sigma * d_rho;
  }
  return out;
}

VariationalModel::VariationalModel(nn::Architecture arch, RandomStream& rng, double initial_sigma)
    : arch_(std::move(arch)) {
  auto init = nn::initial_tensors(arch_, rng);
  const double rho0 = softplus_inverse(initial_sigma);
  std::size_t k = 0;
  for (std::size_t i = 0; i < arch_.layer_count(); ++i) {
    const Partition part = i + 1 == arch_.layer_count() ? Partition::Classifier : Partition::Feature;
    const std::string prefix = "fc" + std::to_string(i);
    const char* kinds[] = {".w", ".b"};
    for (std::size_t t = 0; t < arch_.tensors_per_layer(); ++t) {
      Tensor mu = std::move(init[k++]);
      Tensor rho(mu.shape(), rho0);
      params_.add(prefix + kinds[t] + ".mu", std::move(mu), part);
      params_.add(prefix + kinds[t] + ".rho", std::move(rho), part);
    }
  }
}

std::vector<std::size_t> VariationalModel::feature_tensors() const {
  std::vector<std::size_t> out;
  const std::size_t n = arch_.feature_layer_count() * arch_.tensors_per_layer();
  for (std::size_t k = 0; k < n; ++k) out.push_back(k);
  return out;
}

std::vector<std::size_t> VariationalModel::classifier_tensors() const {
  std::vector<std::size_t> out;
  for (std::size_t k = arch_.feature_layer_count() * arch_.tensors_per_layer(); k < tensor_count(); ++k) {
    out.push_back(k);
  }
  return out;
}

GaussianVariable VariationalModel::variable(std::size_t k) const {
  return {params_[2 * k].value, params_[2 * k + 1].value};
}

void VariationalModel::set_variable(std::size_t k, const GaussianVariable& gv) {
  if (gv.mu.shape() != params_[2 * k].value.shape()) {
    throw ShapeError("set_variable", params_[2 * k].value.shape(), gv.mu.shape());
  }
  if (gv.rho.shape() != gv.mu.shape()) throw ShapeError("set_variable", gv.mu.shape(), gv.rho.shape());
  params_[2 * k].value = gv.mu;
  params_[2 * k + 1].value = gv.rho;
}

std::vector<GaussianVariable> VariationalModel::posterior() const {
  std::vector<GaussianVariable> out;
  for (std::size_t k = 0; k < tensor_count(); ++k) out.push_back(variable(k));
  return out;
}

std::vector<GaussianVariable> VariationalModel::standard_prior() const {
  std::vector<GaussianVariable> out;
  for (std::size_t k = 0; k < tensor_count(); ++k) out.push_back(GaussianVariable::standard(params_[2 * k].value.shape()));
  return out;
}

std::vector<Tensor> VariationalModel::mean_tensors() const {
  std::vector<Tensor> out;
  for (std::size_t k = 0; k < tensor_count(); ++k) out.push_back(params_[2 * k].value);
  return out;
}

Tensor VariationalModel::mean_logits(const Tensor& x) const { return nn::evaluate(arch_, mean_tensors(), x); }

BoundVariational bind_variational(ad::Graph& g, std::span<const ad::Var> vars) {
  if (vars.size() % 2 != 0) throw ShapeError("bind_variational", "odd number of variational parameters");
  BoundVariational b;
  for (std::size_t k = 0; k < vars.size() / 2; ++k) {
    b.mu.push_back(vars[2 * k]);
    b.sigma.push_back(g.softplus(vars[2 * k + 1]));
  }
  return b;
}

std::vector<ad::Var> sample_tensors(ad::Graph& g, const BoundVariational& b, std::span<const std::size_t> which,
                                    RandomStream& rng) {
  std::vector<ad::Var> out;
  for (std::size_t k : which) {
    out.push_back(sample_reparam(g, b.mu[k], b.sigma[k], rng.normal_tensor(g.shape(b.mu[k]))));
  }
  return out;
}

std::vector<ad::Var> sample_all(ad::Graph& g, const BoundVariational& b, RandomStream& rng) {
  std::vector<std::size_t> all(b.mu.size());
  for (std::size_t k = 0; k < all.size(); ++k) all[k] = k;
  return sample_tensors(g, b, all, rng);
}

ad::Var kl_to_prior(ad::Graph& g, const BoundVariational& b, std::span<const GaussianVariable> prior,
                    std::span<const std::size_t> which) {
  if (prior.size() != b.mu.size()) {
    throw ShapeError("kl_to_prior", "prior has " + std::to_string(prior.size()) + " tensors, model has " +
                                        std::to_string(b.mu.size()));
  }
  ad::Var total = g.constant(Tensor::scalar(0.0));
  for (std::size_t k : which) total = g.add(total, kl_gaussian_diag(g, b.mu[k], b.sigma[k], prior[k]));
  return total;
}

ad::Var mc_expected_risk(ad::Graph& g, const VariationalModel& model, const BoundVariational& b, const Tensor& x,
                         const Tensor& targets, std::size_t n_samples, RandomStream& rng, nn::LossKind kind) {
  if (x.size() == 0 || x.rank() == 0 || x.shape()[0] == 0) throw std::invalid_argument("mc_expected_risk: empty batch");
  if (n_samples == 0) throw std::invalid_argument("mc_expected_risk: n_samples must be at least 1");
  ad::Var input = g.constant(x);
  ad::Var total{};
  for (std::size_t i = 0; i < n_samples; ++i) {
    const auto w = sample_all(g, b, rng);
    const auto layers = nn::group_layers(model.arch(), w);
    ad::Var out = nn::forward_head(g, layers.back(), nn::forward_features(g, model.arch(), layers, input));
    ad::Var r = nn::risk(g, out, targets, kind);
    total = i == 0 ? r : g.add(total, r);
  }
  return n_samples == 1 ? total : g.scale(total, 1.0 / static_cast<double>(n_samples));
}

}  // namespace cirm
