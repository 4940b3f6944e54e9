#pragma once

#include <span>
#include <string>
#include <vector>

#include "cirm/params.hpp"

namespace cirm {

enum class OptimizerKind { Sgd, Adam };

std::string to_string(OptimizerKind k);
OptimizerKind optimizer_from_string(const std::string& id);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Adam;
  double lr = 1e-3;
  double weight_decay = 0.0;  // L2 term added to the gradient
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First-order optimizer with per-parameter state keyed by index in a ParamSet.
class Optimizer {
 public:
  Optimizer() = default;
  explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg) {}

  /// Updates params[which[i]] with grads[i].
  void step(ParamSet& params, std::span<const std::size_t> which, std::span<const Tensor> grads);
  /// Updates every parameter; grads has one tensor per parameter.
  void step(ParamSet& params, std::span<const Tensor> grads);

  const OptimizerConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }
  void reset();

 private:
  struct Slot {
    Tensor m;
    Tensor v;
    std::size_t t = 0;
  };
  OptimizerConfig cfg_;
  std::vector<Slot> slots_;
};

}  // namespace cirm
