#pragma once

#include <memory>
#include <vector>

#include "cirm/methods.hpp"

namespace cirm::methods::detail {

std::vector<std::size_t> range(std::size_t begin, std::size_t end);
/// ParamSet indices (mu, rho) of the given variational tensors.
std::vector<std::size_t> variational_indices(std::span<const std::size_t> tensors);
/// Divides the whole objective by lambda once lambda exceeds 1.
void scale_objective(PenalizedLoss& loss, ad::Graph& g, double lambda);

/// Shared state of the mean-field learners: model, carried prior, optimizer.
class VariationalLearnerBase : public Learner {
 public:
  VariationalLearnerBase(MethodConfig cfg, const nn::Architecture& arch);

  TrainedPredictor predictor() const override;
  Tensor mc_logits(const Tensor& x, std::size_t samples, std::uint64_t seed) const override;

  std::vector<GaussianVariable> posterior() const override { return model_.posterior(); }
  std::vector<GaussianVariable> next_prior() const override { return prior_; }

 protected:
  VariationalModel model_;
  std::vector<GaussianVariable> prior_;
  Optimizer opt_;
};

std::unique_ptr<Learner> make_admm_learner(const MethodConfig& cfg, const nn::Architecture& arch);

}  // namespace cirm::methods::detail
