#include <array>
#include <cmath>
#include <utility>

#include "cirm/methods.hpp"

namespace cirm::methods {

namespace {

constexpr std::array<std::pair<Method, const char*>, 9> kNames{{
    {Method::Erm, "erm"},
    {Method::Irmv1, "irmv1"},
    {Method::Irmg, "irmg"},
    {Method::Birm, "birm"},
    {Method::Bvirm, "bvirm"},
    {Method::CBvirm, "c_bvirm"},
    {Method::Vcl, "vcl"},
    {Method::CVirmv1, "c_virmv1"},
    {Method::CVirmg, "c_virmg"},
}};

void require(bool ok, const std::string& path, const std::string& what) {
  if (!ok) throw ConfigError(path, what);
}

}  // namespace

std::string to_string(Method m) {
  for (const auto& [id, name] : kNames) {
    if (id == m) return name;
  }
  throw std::logic_error("unknown method");
}

Method method_from_string(const std::string& id) {
  for (const auto& [m, name] : kNames) {
    if (id == name) return m;
  }
  throw std::invalid_argument("unknown method '" + id + "'");
}

bool is_variational(Method m) {
  return m == Method::Bvirm || m == Method::CBvirm || m == Method::Vcl || m == Method::CVirmv1 ||
         m == Method::CVirmg;
}

void MethodConfig::validate(const std::string& prefix) const {
  const auto at = [&](const char* field) { return prefix + "." + field; };
  const auto nonneg = [&](double v, const char* field) {
    require(std::isfinite(v) && v >= 0.0, at(field), "must be a finite value >= 0");
  };
  nonneg(lambda, "lambda");
  nonneg(beta, "beta");
  nonneg(lr, "lr");
  nonneg(rho0, "rho0");
  nonneg(rho1, "rho1");
  nonneg(delta_rho, "delta_rho");
  nonneg(weight_decay, "weight_decay");
  require(epochs >= 1, at("epochs"), "must be >= 1");
  require(batch_size >= 1, at("batch_size"), "must be >= 1");
  require(inner_iterations >= 1, at("inner_iterations"), "must be >= 1");
  require(n_mc >= 1, at("n_mc"), "must be >= 1");
  require(dropout >= 0.0 && dropout < 1.0, at("dropout"), "must be in [0, 1)");
  require(termination_accuracy >= 0.0 && termination_accuracy <= 1.0, at("termination_accuracy"),
          "must be in [0, 1]");
  require(std::isfinite(initial_sigma) && initial_sigma > 0.0, at("initial_sigma"), "must be > 0");
  if (method == Method::Bvirm || method == Method::CBvirm || method == Method::Birm) {
    require(rho0 > 0.0, at("rho0"), "ADMM needs rho0 > 0");
  }
}

MethodConfig default_config(Method m) {
  MethodConfig c;
  c.method = m;
  switch (m) {
    case Method::Erm:
      c.lr = 1e-3;
      c.dropout = 0.75;
      c.weight_decay = 0.00125;
      c.lambda = 0.0;
      break;
    case Method::Irmv1:
      c.lr = 2.5e-4;
      c.lambda = 91257.0;
      break;
    case Method::Irmg:
      c.lr = 2.5e-4;
      c.dropout = 0.75;
      c.weight_decay = 0.00125;
      c.lambda = 0.0;
      break;
    case Method::Vcl:
      c.lr = 5e-3;
      c.lambda = 0.0;
      break;
    case Method::Birm:
      c.lr = 1e-3;
      c.lambda = 0.0;
      c.weight_decay = 0.00125;
      break;
    case Method::Bvirm:
    case Method::CBvirm:
    case Method::CVirmg:
      c.lr = 1e-3;
      c.lambda = 0.0;
      c.weight_decay = 0.00125;
      break;
    case Method::CVirmv1:
      c.lr = 1e-3;
      c.lambda = 91257.0;
      c.weight_decay = 0.00125;
      break;
  }
  return c;
}

double penalty_weight(const MethodConfig& cfg, std::size_t epoch) {
  if (cfg.lambda == 0.0) return 0.0;
  return epoch < cfg.anneal_epoch() ? 1.0 : cfg.lambda;
}

}  // namespace cirm::methods
