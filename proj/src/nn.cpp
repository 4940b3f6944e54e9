#include "cirm/nn.hpp"

#include <cmath>
#include <string>

namespace cirm::nn {

Architecture colored_mlp(std::size_t inputs, std::size_t hidden, std::size_t hidden_layers, std::size_t outputs) {
  Architecture a;
  a.widths.push_back(inputs);
  for (std::size_t i = 0; i < hidden_layers; ++i) a.widths.push_back(hidden);
  a.widths.push_back(outputs);
  return a;
}

Architecture linear_regression(std::size_t inputs, std::size_t outputs) {
  Architecture a;
  a.widths = {inputs, inputs, outputs};
  a.activation = Activation::Identity;
  a.bias = false;
  a.feature_init = FeatureInit::Identity;
  return a;
}

std::vector<LayerWeights> group_layers(const Architecture& arch, std::span<const ad::Var> tensors) {
  const std::size_t per = arch.tensors_per_layer();
  if (tensors.size() != arch.layer_count() * per) {
    throw ShapeError("group_layers", "expected " + std::to_string(arch.layer_count() * per) + " tensors, got " +
                                         std::to_string(tensors.size()));
  }
  std::vector<LayerWeights> out(arch.layer_count());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].w = tensors[i * per];
    if (arch.bias) {
      out[i].b = tensors[i * per + 1];
      out[i].has_bias = true;
    }
  }
  return out;
}

namespace {

ad::Var affine(ad::Graph& g, const LayerWeights& layer, ad::Var x) {
  ad::Var y = g.matmul(x, layer.w);
  return layer.has_bias ? g.add_bias(y, layer.b) : y;
}

}  // namespace

ad::Var forward_features(ad::Graph& g, const Architecture& arch, std::span<const LayerWeights> layers, ad::Var x,
                         const std::vector<Tensor>* masks) {
  ad::Var h = x;
  for (std::size_t i = 0; i < arch.feature_layer_count(); ++i) {
    h = affine(g, layers[i], h);
    if (arch.activation == Activation::Elu) h = g.elu(h);
    if (masks && i < masks->size()) h = g.apply_mask(h, (*masks)[i]);
  }
  return h;
}

ad::Var forward_head(ad::Graph& g, const LayerWeights& head, ad::Var h) { return affine(g, head, h); }

ad::Var risk(ad::Graph& g, ad::Var logits, const Tensor& targets, LossKind kind) {
  switch (kind) {
    case LossKind::BinaryCrossEntropy:
      return g.bce_with_logits(logits, targets);
    case LossKind::SoftmaxCrossEntropy: {
      std::vector<int> labels(targets.size());
      for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(targets[i]);
      return g.softmax_cross_entropy(logits, labels);
    }
    case LossKind::SquaredError:
      return g.mse(logits, targets);
  }
  throw std::logic_error("unknown loss kind");
}

std::vector<Shape> layer_shapes(const Architecture& arch, std::size_t i) {
  std::vector<Shape> s{{arch.widths[i], arch.widths[i + 1]}};
  if (arch.bias) s.push_back({arch.widths[i + 1]});
  return s;
}

std::vector<Tensor> initial_tensors(const Architecture& arch, RandomStream& rng) {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < arch.layer_count(); ++i) {
    const bool feature = i < arch.feature_layer_count();
    const double bound = 1.0 / std::sqrt(static_cast<double>(arch.widths[i]));
    for (const auto& shape : layer_shapes(arch, i)) {
      Tensor t(shape);
      if (feature && arch.feature_init == FeatureInit::Identity) {
        if (shape.size() == 2) {
          for (std::size_t d = 0; d < std::min(shape[0], shape[1]); ++d) t.at(d, d) = 1.0;
        }
      } else {
        for (double& v : t.values()) v = (2.0 * rng.uniform() - 1.0) * bound;
      }
      out.push_back(std::move(t));
    }
  }
  return out;
}

Mlp::Mlp(Architecture arch, RandomStream& rng) : arch_(std::move(arch)) {
  auto init = initial_tensors(arch_, rng);
  std::size_t k = 0;
  for (std::size_t i = 0; i < arch_.layer_count(); ++i) {
    const Partition part = i + 1 == arch_.layer_count() ? Partition::Classifier : Partition::Feature;
    const std::string prefix = "fc" + std::to_string(i);
    params_.add(prefix + ".w", std::move(init[k++]), part);
    if (arch_.bias) params_.add(prefix + ".b", std::move(init[k++]), part);
  }
}

std::vector<Shape> Mlp::dropout_shapes(std::size_t batch) const {
  std::vector<Shape> out;
  for (std::size_t i = 0; i < arch_.feature_layer_count(); ++i) out.push_back({batch, arch_.widths[i + 1]});
  return out;
}

Tensor evaluate(const Architecture& arch, std::span<const Tensor> tensors, const Tensor& x) {
  ad::Graph g;
  std::vector<ad::Var> vars;
  for (const auto& t : tensors) vars.push_back(g.constant(t));
  const auto layers = group_layers(arch, vars);
  ad::Var h = forward_features(g, arch, layers, g.constant(x));
  return g.value(forward_head(g, layers.back(), h));
}

Tensor Mlp::logits(const Tensor& x) const {
  std::vector<Tensor> tensors;
  for (const auto& p : params_) tensors.push_back(p.value);
  return evaluate(arch_, tensors, x);
}

Tensor Mlp::features(const Tensor& x) const {
  ad::Graph g;
  std::vector<ad::Var> vars;
  for (const auto& p : params_) vars.push_back(g.constant(p.value));
  return g.value(forward_features(g, arch_, group_layers(arch_, vars), g.constant(x)));
}

std::vector<int> predicted_labels(const Tensor& logits) {
  const std::size_t rows = logits.rank() == 2 ? logits.shape()[0] : logits.size();
  const std::size_t cols = logits.rank() == 2 ? logits.shape()[1] : 1;
  std::vector<int> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    if (cols == 1) {
      out[r] = logits[r] > 0.0 ? 1 : 0;
    } else {
      std::size_t best = 0;
      for (std::size_t c = 1; c < cols; ++c) {
        if (logits[r * cols + c] > logits[r * cols + best]) best = c;
      }
      out[r] = static_cast<int>(best);
    }
  }
  return out;
}

double accuracy(const Tensor& logits, const Tensor& labels) {
  const auto pred = predicted_labels(logits);
  if (pred.size() != labels.size()) throw ShapeError("accuracy", logits.shape(), labels.shape());
  if (pred.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == static_cast<int>(labels[i]);
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

}  // namespace cirm::nn
