#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cirm/autodiff.hpp"
#include "cirm/tensor.hpp"

namespace cirm {

/// Which half of a composed predictor w o phi a parameter belongs to.
enum class Partition { Feature, Classifier };

struct Param {
  std::string name;
  Tensor value;
  Partition partition = Partition::Feature;
};

/// Named model parameters split into feature-extractor and classifier parts.
class ParamSet {
 public:
  ParamSet() = default;

  std::size_t add(std::string name, Tensor value, Partition partition);

  std::size_t size() const { return params_.size(); }
  bool empty() const { return params_.empty(); }
  Param& operator[](std::size_t i) { return params_[i]; }
  const Param& operator[](std::size_t i) const { return params_[i]; }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  /// Index of the named parameter; throws std::out_of_range when absent.
  std::size_t index_of(const std::string& name) const;
  const Tensor& value(const std::string& name) const { return params_[index_of(name)].value; }

  std::vector<std::size_t> indices(Partition partition) const;
  std::vector<std::size_t> all_indices() const;

  /// Leaf variables for every parameter, in order.
  std::vector<ad::Var> bind(ad::Graph& graph) const;

  bool operator==(const ParamSet& other) const;

 private:
  std::vector<Param> params_;
};

/// p <- p - lr * (g + weight_decay * p), element-wise, for the listed parameters.
void sgd_step(ParamSet& params, std::span<const Tensor> grads, double lr, double weight_decay);
void sgd_step(ParamSet& params, std::span<const std::size_t> which, std::span<const Tensor> grads,
              double lr, double weight_decay);

enum class SecondOrderMode { Nested, FiniteDifference };

/// weight * || d(inner)/d(wrt) + shift ||^2, summed over the wrt parameters.
struct GradientPenalty {
  ad::Var inner;
  double weight = 1.0;
  std::vector<Tensor> shift;  // empty, or one tensor per wrt parameter
};

struct PenalizedLoss {
  ad::Var base;
  std::vector<GradientPenalty> penalties;
};

/// Builds the objective on a fresh graph from bound parameters. Must be
/// deterministic: any noise or masks are drawn before the builder is created.
using PenalizedLossBuilder = std::function<PenalizedLoss(ad::Graph&, std::span<const ad::Var>)>;

struct PenaltyGradient {
  double base = 0.0;
  double penalty = 0.0;
  std::vector<Tensor> grads;  // one per parameter in the set
  SecondOrderMode mode = SecondOrderMode::Nested;
};

/// Gradient of base + sum_k weight_k * ||grad_wrt inner_k + shift_k||^2 with
/// respect to every parameter.
///
/// Nested mode differentiates the recorded backward pass. Finite-difference
/// mode evaluates the Hessian-vector product (d/dwrt grad_all inner) . v with
/// central differences of step h = 1e-4 * (1 + ||wrt||_inf) along the unit
/// direction of v, which needs only first-order gradients.
PenaltyGradient grad_penalty_grad(const PenalizedLossBuilder& builder, const ParamSet& params,
                                  std::span<const std::size_t> wrt, SecondOrderMode mode);

}  // namespace cirm
