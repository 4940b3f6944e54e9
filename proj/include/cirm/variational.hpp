#pragma once

#include <span>
#include <vector>

#include "cirm/autodiff.hpp"
#include "cirm/nn.hpp"
#include "cirm/params.hpp"
#include "cirm/rng.hpp"

namespace cirm {

double softplus(double x);
double softplus_inverse(double y);

/// Diagonal Gaussian over a tensor of weights; sigma = softplus(rho).
struct GaussianVariable {
  Tensor mu;
  Tensor rho;

  static GaussianVariable from_sigma(Tensor mu, const Tensor& sigma);
  static GaussianVariable standard(const Shape& shape);
  Tensor sigma() const;
  bool operator==(const GaussianVariable&) const = default;
};

Tensor sample_reparam(const GaussianVariable& gv, const Tensor& epsilon);
ad::Var sample_reparam(ad::Graph& g, ad::Var mu, ad::Var sigma, const Tensor& epsilon);

double kl_gaussian_diag(const GaussianVariable& q, const GaussianVariable& p);
double kl_gaussian_diag(std::span<const GaussianVariable> q, std::span<const GaussianVariable> p);
/// In-graph KL(q || p) for a trainable q and a fixed p.
ad::Var kl_gaussian_diag(ad::Graph& g, ad::Var mu_q, ad::Var sigma_q, const GaussianVariable& p);

struct KlGradient {
  Tensor mu;
  Tensor rho;
};
KlGradient kl_gradients(const GaussianVariable& q, const GaussianVariable& p);

/// Mean-field network. Parameters are stored as "<tensor>.mu", "<tensor>.rho"
/// pairs, tensor k at indices 2k and 2k + 1.
class VariationalModel {
 public:
  VariationalModel() = default;
  VariationalModel(nn::Architecture arch, RandomStream& rng, double initial_sigma = 0.01);

  const nn::Architecture& arch() const { return arch_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

  std::size_t tensor_count() const { return params_.size() / 2; }
  /// Tensor indices of the phi part and the w part.
  std::vector<std::size_t> feature_tensors() const;
  std::vector<std::size_t> classifier_tensors() const;

  GaussianVariable variable(std::size_t k) const;
  void set_variable(std::size_t k, const GaussianVariable& gv);
  std::vector<GaussianVariable> posterior() const;
  std::vector<GaussianVariable> standard_prior() const;

  std::vector<Tensor> mean_tensors() const;
  Tensor mean_logits(const Tensor& x) const;

 private:
  nn::Architecture arch_;
  ParamSet params_;
};

/// Graph handles for one model: mu and sigma per tensor.
struct BoundVariational {
  std::vector<ad::Var> mu;
  std::vector<ad::Var> sigma;
};

BoundVariational bind_variational(ad::Graph& g, std::span<const ad::Var> vars);

/// Reparametrised draws for the listed tensors, fresh epsilon per tensor.
std::vector<ad::Var> sample_tensors(ad::Graph& g, const BoundVariational& b, std::span<const std::size_t> which,
                                    RandomStream& rng);
/// Draws for every tensor, ready for nn::group_layers.
std::vector<ad::Var> sample_all(ad::Graph& g, const BoundVariational& b, RandomStream& rng);

/// Sum of KL(q_k || prior_k) over the listed tensors.
ad::Var kl_to_prior(ad::Graph& g, const BoundVariational& b, std::span<const GaussianVariable> prior,
                    std::span<const std::size_t> which);

/// (1/n) sum_i R(w_i) with fresh epsilon per sample.
ad::Var mc_expected_risk(ad::Graph& g, const VariationalModel& model, const BoundVariational& b, const Tensor& x,
                         const Tensor& targets, std::size_t n_samples, RandomStream& rng, nn::LossKind kind);

}  // namespace cirm
