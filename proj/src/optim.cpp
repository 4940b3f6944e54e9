#include "cirm/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace cirm {

std::string to_string(OptimizerKind k) { return k == OptimizerKind::Sgd ? "sgd" : "adam"; }

OptimizerKind optimizer_from_string(const std::string& id) {
  if (id == "sgd") return OptimizerKind::Sgd;
  if (id == "adam") return OptimizerKind::Adam;
  throw std::invalid_argument("unknown optimizer '" + id + "'");
}

void Optimizer::step(ParamSet& params, std::span<const std::size_t> which, std::span<const Tensor> grads) {
  if (which.size() != grads.size()) throw std::invalid_argument("optimizer: one gradient per parameter required");
  if (slots_.size() < params.size()) slots_.resize(params.size());
  for (std::size_t i = 0; i < which.size(); ++i) {
    Tensor& p = params[which[i]].value;
    const Tensor& g = grads[i];
    if (g.size() != p.size()) throw ShapeError("optimizer", p.shape(), g.shape());
    if (cfg_.kind == OptimizerKind::Sgd) {
      for (std::size_t j = 0; j < p.size(); ++j) p[j] -= cfg_.lr * (g[j] + cfg_.weight_decay * p[j]);
      continue;
    }
    Slot& s = slots_[which[i]];
    if (s.m.size() != p.size()) {
      s.m = zeros_like(p);
      s.v = zeros_like(p);
      s.t = 0;
    }
    ++s.t;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(s.t));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(s.t));
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = g[j] + cfg_.weight_decay * p[j];
      s.m[j] = cfg_.beta1 * s.m[j] + (1.0 - cfg_.beta1) * gj;
      s.v[j] = cfg_.beta2 * s.v[j] + (1.0 - cfg_.beta2) * gj * gj;
      p[j] -= cfg_.lr * (s.m[j] / c1) / (std::sqrt(s.v[j] / c2) + cfg_.eps);
    }
  }
}

void Optimizer::step(ParamSet& params, std::span<const Tensor> grads) {
  const auto all = params.all_indices();
  step(params, all, grads);
}

void Optimizer::reset() { slots_.clear(); }

}  // namespace cirm
