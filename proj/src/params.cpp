#include "cirm/params.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace cirm {

std::size_t ParamSet::add(std::string name, Tensor value, Partition partition) {
  for (const auto& p : params_) {
    if (p.name == name) throw std::invalid_argument("duplicate parameter name: " + name);
  }
  params_.push_back(Param{std::move(name), std::move(value), partition});
  return params_.size() - 1;
}

std::size_t ParamSet::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].name == name) return i;
  }
  throw std::out_of_range("no parameter named " + name);
}

std::vector<std::size_t> ParamSet::indices(Partition partition) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].partition == partition) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> ParamSet::all_indices() const {
  std::vector<std::size_t> out(params_.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = i;
  return out;
}

std::vector<ad::Var> ParamSet::bind(ad::Graph& graph) const {
  std::vector<ad::Var> vars;
  vars.reserve(params_.size());
  for (const auto& p : params_) vars.push_back(graph.variable(p.value));
  return vars;
}

bool ParamSet::operator==(const ParamSet& other) const {
  if (params_.size() != other.params_.size()) return false;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& a = params_[i];
    const auto& b = other.params_[i];
    if (a.name != b.name || a.partition != b.partition || !(a.value == b.value)) return false;
  }
  return true;
}

void sgd_step(ParamSet& params, std::span<const std::size_t> which, std::span<const Tensor> grads,
              double lr, double weight_decay) {
  if (!(lr > 0.0)) throw std::invalid_argument("sgd_step: learning rate must be positive");
  if (weight_decay < 0.0) throw std::invalid_argument("sgd_step: weight decay must be non-negative");
  if (which.size() != grads.size()) throw ShapeError("sgd_step", "parameter and gradient counts differ");
  for (std::size_t k = 0; k < which.size(); ++k) {
    Tensor& p = params[which[k]].value;
    const Tensor& g = grads[k];
    if (p.shape() != g.shape()) throw ShapeError("sgd_step", p.shape(), g.shape());
    double* pv = p.data();
    const double* gv = g.data();
    for (std::size_t i = 0, n = p.size(); i < n; ++i) pv[i] -= lr * (gv[i] + weight_decay * pv[i]);
  }
}

void sgd_step(ParamSet& params, std::span<const Tensor> grads, double lr, double weight_decay) {
  const auto all = params.all_indices();
  sgd_step(params, all, grads, lr, weight_decay);
}

namespace {

std::vector<ad::Var> select(std::span<const ad::Var> vars, std::span<const std::size_t> which) {
  std::vector<ad::Var> out;
  out.reserve(which.size());
  for (auto i : which) out.push_back(vars[i]);
  return out;
}

void check_penalty(const GradientPenalty& pen, std::size_t n_wrt) {
  if (!pen.shift.empty() && pen.shift.size() != n_wrt) {
    throw ShapeError("grad_penalty_grad", "shift must have one tensor per differentiated parameter");
  }
}

PenaltyGradient nested(const PenalizedLossBuilder& builder, const ParamSet& params,
                       std::span<const std::size_t> wrt) {
  ad::Graph g;
  const auto vars = params.bind(g);
  PenalizedLoss loss = builder(g, vars);
  const auto wrt_vars = select(vars, wrt);
  PenaltyGradient out;
  out.mode = SecondOrderMode::Nested;
  out.base = g.scalar(loss.base);
  ad::Var total = loss.base;
  for (const auto& pen : loss.penalties) {
    check_penalty(pen, wrt.size());
    const auto inner_grads = g.grad(pen.inner, wrt_vars);
    ad::Var norm{};
    for (std::size_t j = 0; j < inner_grads.size(); ++j) {
      ad::Var d = inner_grads[j];
      if (!pen.shift.empty()) d = g.add(d, g.constant(pen.shift[j]));
      ad::Var sq = g.squared_l2(d);
      norm = j == 0 ? sq : g.add(norm, sq);
    }
    if (inner_grads.empty()) continue;
    out.penalty += pen.weight * g.scalar(norm);
    total = g.add(total, g.scale(norm, pen.weight));
  }
  out.grads = g.backward(total, vars);
  return out;
}

PenaltyGradient finite_difference(const PenalizedLossBuilder& builder, const ParamSet& params,
                                  std::span<const std::size_t> wrt) {
  PenaltyGradient out;
  out.mode = SecondOrderMode::FiniteDifference;

  std::vector<std::vector<Tensor>> directions;
  std::vector<double> weights;
  {
    ad::Graph g;
    const auto vars = params.bind(g);
    PenalizedLoss loss = builder(g, vars);
    const auto wrt_vars = select(vars, wrt);
    out.base = g.scalar(loss.base);
    out.grads = g.backward(loss.base, vars);
    for (const auto& pen : loss.penalties) {
      check_penalty(pen, wrt.size());
      auto v = g.backward(pen.inner, wrt_vars);
      if (!pen.shift.empty()) {
        for (std::size_t j = 0; j < v.size(); ++j) {
          for (std::size_t i = 0; i < v[j].size(); ++i) v[j][i] += pen.shift[j][i];
        }
      }
      double sq = 0.0;
      for (const auto& t : v) sq += squared_norm(t);
      out.penalty += pen.weight * sq;
      directions.push_back(std::move(v));
      weights.push_back(pen.weight);
    }
  }

  double wrt_inf = 0.0;
  for (auto i : wrt) wrt_inf = std::max(wrt_inf, max_abs(params[i].value));
  const double h = 1e-4 * (1.0 + wrt_inf);

  for (std::size_t k = 0; k < directions.size(); ++k) {
    double norm = 0.0;
    for (const auto& t : directions[k]) norm += squared_norm(t);
    norm = std::sqrt(norm);
    if (norm == 0.0) continue;

    auto inner_grad_at = [&](double step) {
      ParamSet shifted = params;
      for (std::size_t j = 0; j < wrt.size(); ++j) {
        Tensor& p = shifted[wrt[j]].value;
        const Tensor& d = directions[k][j];
        for (std::size_t i = 0; i < p.size(); ++i) p[i] += step * d[i] / norm;
      }
      ad::Graph g;
      const auto vars = shifted.bind(g);
      PenalizedLoss loss = builder(g, vars);
      if (k >= loss.penalties.size()) throw std::logic_error("grad_penalty_grad: builder is not deterministic");
      return g.backward(loss.penalties[k].inner, vars);
    };
    const auto plus = inner_grad_at(h);
    const auto minus = inner_grad_at(-h);
    const double factor = 2.0 * weights[k] * norm / (2.0 * h);
    for (std::size_t p = 0; p < out.grads.size(); ++p) {
      for (std::size_t i = 0; i < out.grads[p].size(); ++i) {
        out.grads[p][i] += factor * (plus[p][i] - minus[p][i]);
      }
    }
  }
  for (const auto& t : out.grads) {
    if (!t.all_finite()) throw NumericError("grad_penalty_grad: non-finite finite-difference gradient");
  }
  return out;
}

}  // namespace

PenaltyGradient grad_penalty_grad(const PenalizedLossBuilder& builder, const ParamSet& params,
                                  std::span<const std::size_t> wrt, SecondOrderMode mode) {
  if (mode == SecondOrderMode::Nested) return nested(builder, params, wrt);
  return finite_difference(builder, params, wrt);
}

}  // namespace cirm
