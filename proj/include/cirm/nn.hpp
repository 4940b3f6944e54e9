#pragma once

#include <span>
#include <vector>

#include "cirm/autodiff.hpp"
#include "cirm/params.hpp"
#include "cirm/rng.hpp"

namespace cirm::nn {

enum class Activation { Elu, Identity };
enum class FeatureInit { UniformFanIn, Identity };
enum class LossKind { BinaryCrossEntropy, SoftmaxCrossEntropy, SquaredError };

/// Fully connected stack. The last layer is the classifier w, everything
/// before it is the feature extractor phi.
struct Architecture {
  std::vector<std::size_t> widths;  // input, hidden..., output
  Activation activation = Activation::Elu;
  bool bias = true;
  FeatureInit feature_init = FeatureInit::UniformFanIn;

  std::size_t layer_count() const { return widths.size() - 1; }
  std::size_t feature_layer_count() const { return layer_count() - 1; }
  std::size_t tensors_per_layer() const { return bias ? 2 : 1; }
  std::size_t feature_dim() const { return widths[widths.size() - 2]; }
  std::size_t output_dim() const { return widths.back(); }
};

/// Two ELU hidden layers and a linear head, as used for the colored-image tasks.
Architecture colored_mlp(std::size_t inputs, std::size_t hidden = 100, std::size_t hidden_layers = 2,
                         std::size_t outputs = 1);
/// Linear phi (square, identity-initialised, no bias) followed by a linear head.
Architecture linear_regression(std::size_t inputs, std::size_t outputs);

struct LayerWeights {
  ad::Var w;
  ad::Var b;
  bool has_bias = false;
};

/// Groups a flat list of per-tensor vars (w, b, w, b, ...) into layers.
std::vector<LayerWeights> group_layers(const Architecture& arch, std::span<const ad::Var> tensors);

/// phi(x). Masks, when given, hold one inverted-dropout mask per hidden layer.
ad::Var forward_features(ad::Graph& g, const Architecture& arch, std::span<const LayerWeights> layers, ad::Var x,
                         const std::vector<Tensor>* masks = nullptr);
/// w(h) for the classifier layer.
ad::Var forward_head(ad::Graph& g, const LayerWeights& head, ad::Var h);

ad::Var risk(ad::Graph& g, ad::Var logits, const Tensor& targets, LossKind kind);

/// Shapes of the tensors of layer `i` in (w, b) order.
std::vector<Shape> layer_shapes(const Architecture& arch, std::size_t i);

/// Initial values for every tensor, uniform(+-1/sqrt(fan_in)) unless the
/// feature layers are identity-initialised.
std::vector<Tensor> initial_tensors(const Architecture& arch, RandomStream& rng);

/// Deterministic network with named parameters "fc<i>.w", "fc<i>.b".
class Mlp {
 public:
  Mlp() = default;
  Mlp(Architecture arch, RandomStream& rng);

  const Architecture& arch() const { return arch_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

  std::vector<LayerWeights> layers(std::span<const ad::Var> vars) const { return group_layers(arch_, vars); }
  std::vector<Shape> dropout_shapes(std::size_t batch) const;

  /// Evaluation-mode output (no dropout), [n x outputs].
  Tensor logits(const Tensor& x) const;
  /// Evaluation-mode phi(x).
  Tensor features(const Tensor& x) const;

 private:
  Architecture arch_;
  ParamSet params_;
};

/// Output of an arbitrary set of layer values on x, evaluation mode.
Tensor evaluate(const Architecture& arch, std::span<const Tensor> tensors, const Tensor& x);

/// Index of the predicted class per row (threshold 0 for a single logit).
std::vector<int> predicted_labels(const Tensor& logits);
double accuracy(const Tensor& logits, const Tensor& labels);

}  // namespace cirm::nn
