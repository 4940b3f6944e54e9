#include <cmath>
#include <stdexcept>

#include "cirm/admm.hpp"
#include "cirm/methods.hpp"
#include "learners.hpp"
#include "training.hpp"

namespace cirm::methods {

BvirmObjectives bvirm_objectives(ad::Graph& g, const VariationalModel& model, const BoundVariational& bound,
                                 const Tensor& x, const Tensor& targets, std::span<const GaussianVariable> prior,
                                 double beta, std::size_t n_mc, RandomStream& rng, nn::LossKind kind) {
  if (!(beta >= 0.0)) throw std::invalid_argument("bvirm_objectives: beta must be >= 0");
  BvirmObjectives out;
  out.risk = mc_expected_risk(g, model, bound, x, targets, n_mc, rng, kind);
  const auto phi = model.feature_tensors();
  const auto head = model.classifier_tensors();
  ad::Var kl_w = kl_to_prior(g, bound, prior, head);
  ad::Var kl_phi = kl_to_prior(g, bound, prior, phi);
  out.q_w = g.add(out.risk, g.scale(kl_w, beta));
  out.q_phi = g.add(out.q_w, g.scale(kl_phi, beta));
  return out;
}

namespace detail {

namespace {

using admm::Vector;

Vector flatten(const ParamSet& params, std::span<const std::size_t> which) {
  std::size_t n = 0;
  for (std::size_t i : which) n += params[i].value.size();
  Vector out(static_cast<Eigen::Index>(n));
  Eigen::Index at = 0;
  for (std::size_t i : which) {
    for (double v : params[i].value.values()) out[at++] = v;
  }
  return out;
}

void unflatten(const Vector& flat, ParamSet& params, std::span<const std::size_t> which) {
  Eigen::Index at = 0;
  for (std::size_t i : which) {
    for (double& v : params[i].value.values()) v = flat[at++];
  }
}

std::vector<Tensor> split_like(const Vector& flat, const ParamSet& params) {
  std::vector<Tensor> out;
  Eigen::Index at = 0;
  for (const auto& p : params) {
    Tensor t(p.value.shape());
    for (double& v : t.values()) v = flat[at++];
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace

// Bilevel IRM by consensus ADMM. phi (theta) is trained by SGD on the summed
// environment objectives at the consensus classifier; each environment owns a
// classifier block omega_e updated on the augmented Lagrangian
//   Q_w^e + rho0/2 ||omega_e - omega + u_e||^2 + rho1/2 ||grad_omega Q_w^e + v_e||^2.
// Deterministic parameters give BIRM; mean-field parameters give BVIRM, and
// the continual variant anchors the consensus on the previous classifier.
class AdmmLearner : public Learner {
 public:
  AdmmLearner(MethodConfig cfg, const nn::Architecture& arch)
      : Learner(std::move(cfg)), arch_(arch), variational_(cfg_.method != Method::Birm) {
    RandomStream rng(cfg_.seed, {kInit});
    const std::size_t per_layer = arch_.tensors_per_layer();
    const std::size_t tensors = arch_.layer_count() * per_layer;
    const auto phi_tensors = range(0, tensors - per_layer);
    const auto head_tensors = range(tensors - per_layer, tensors);
    if (variational_) {
      model_ = VariationalModel(arch_, rng, cfg_.initial_sigma);
      params_ = model_.params();
      prior_ = model_.standard_prior();
      phi_idx_ = variational_indices(phi_tensors);
      head_idx_ = variational_indices(head_tensors);
    } else {
      params_ = nn::Mlp(arch_, rng).params();
      phi_idx_ = phi_tensors;
      head_idx_ = head_tensors;
    }
    head_tensors_ = head_tensors;
    opt_ = Optimizer(cfg_.optimizer_config());
  }

  TrainedPredictor predictor() const override {
    TrainedPredictor p;
    p.arch = arch_;
    p.method = cfg_.method;
    const std::size_t stride = variational_ ? 2 : 1;
    const std::size_t tensors = params_.size() / stride;
    std::vector<Tensor> head;
    for (std::size_t k = 0; k < tensors; ++k) {
      const Tensor& t = params_[stride * k].value;
      (k < head_tensors_.front() ? p.phi : head).push_back(t);
    }
    p.heads.push_back(std::move(head));
    return p;
  }

  std::vector<GaussianVariable> posterior() const override {
    if (!variational_) return {};
    std::vector<GaussianVariable> out;
    for (std::size_t k = 0; k < params_.size() / 2; ++k) out.push_back({params_[2 * k].value, params_[2 * k + 1].value});
    return out;
  }
  std::vector<GaussianVariable> next_prior() const override { return variational_ ? prior_ : std::vector<GaussianVariable>{}; }

  Tensor mc_logits(const Tensor& x, std::size_t samples, std::uint64_t seed) const override {
    if (!variational_) return logits(x);
    VariationalModel m = model_;
    m.params() = params_;
    RandomStream rng(seed, {kEval});
    Tensor out;
    for (std::size_t s = 0; s < std::max<std::size_t>(1, samples); ++s) {
      std::vector<Tensor> draw;
      for (std::size_t k = 0; k < m.tensor_count(); ++k) {
        const auto gv = m.variable(k);
        draw.push_back(sample_reparam(gv, rng.normal_tensor(gv.mu.shape())));
      }
      Tensor o = nn::evaluate(arch_, draw, x);
      if (out.empty()) {
        out = std::move(o);
      } else {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += o[i];
      }
    }
    for (double& v : out.values()) v /= static_cast<double>(std::max<std::size_t>(1, samples));
    return out;
  }

 protected:
  void fit(Envs envs) override {
    const std::size_t n_env = envs.size();
    const double klw = variational_ ? kl_weight(cfg_, total_size(envs)) : 0.0;
    const std::size_t draws = variational_ ? cfg_.n_mc : 1;
    const bool continual = cfg_.method == Method::CBvirm;

    ParamSet head_template;
    for (std::size_t i : head_idx_) head_template.add(params_[i].name, params_[i].value, Partition::Classifier);
    auto state = admm::AdmmState::make(n_env, flatten(params_, head_idx_), flatten(params_, head_idx_).size(),
                                       cfg_.rho0, cfg_.rho1);
    if (continual && !(phases_ == 0 && cfg_.skip_first_anchor)) {
      state.anchor = anchor_.size() > 0 ? anchor_ : Vector::Zero(state.consensus.size());
    }
    std::vector<Optimizer> block_opt(n_env, Optimizer(cfg_.optimizer_config()));
    std::vector<std::vector<Tensor>> features(n_env);

    // Q_w^e on rows `rows` of environment e given the head parameters `hv`.
    const auto head_objective = [&](ad::Graph& g, std::span<const ad::Var> hv, std::size_t e,
                                    std::span<const std::size_t> rows, RandomStream& eps) {
      const auto kind = loss_kind(*envs[e]);
      const Tensor y = rows.empty() ? envs[e]->targets : envs[e]->targets.gather_rows(rows);
      BoundVariational bound;
      if (variational_) bound = bind_variational(g, hv);
      ad::Var risk{};
      for (std::size_t s = 0; s < draws; ++s) {
        const Tensor& h_all = features[e][s];
        ad::Var h = g.constant(rows.empty() ? h_all : h_all.gather_rows(rows));
        nn::LayerWeights layer;
        layer.has_bias = arch_.bias;
        if (variational_) {
          layer.w = sample_reparam(g, bound.mu[0], bound.sigma[0], eps.normal_tensor(g.shape(bound.mu[0])));
          if (arch_.bias) layer.b = sample_reparam(g, bound.mu[1], bound.sigma[1], eps.normal_tensor(g.shape(bound.mu[1])));
        } else {
          layer.w = hv[0];
          if (arch_.bias) layer.b = hv[1];
        }
        ad::Var r = nn::risk(g, nn::forward_head(g, layer, h), y, kind);
        risk = s == 0 ? r : g.add(risk, r);
      }
      if (draws > 1) risk = g.scale(risk, 1.0 / static_cast<double>(draws));
      if (!variational_ || klw == 0.0) return risk;
      ad::Var kl{};
      for (std::size_t j = 0; j < head_tensors_.size(); ++j) {
        ad::Var term = kl_gaussian_diag(g, bound.mu[j], bound.sigma[j], prior_[head_tensors_[j]]);
        kl = j == 0 ? term : g.add(kl, term);
      }
      return g.add(risk, g.scale(kl, klw));
    };

    const auto constraint_at = [&](std::size_t e, const Vector& x, std::uint64_t tag) -> Vector {
      ParamSet hp = head_template;
      unflatten(x, hp, range(0, hp.size()));
      ad::Graph g;
      const auto hv = hp.bind(g);
      RandomStream eps(cfg_.seed, {kConstraint, phases_, tag, e});
      ad::Var q = head_objective(g, hv, e, {}, eps);
      const auto grads = g.backward(q, hv);
      ParamSet flat = head_template;
      for (std::size_t i = 0; i < flat.size(); ++i) flat[i].value = grads[i];
      return flatten(flat, range(0, flat.size()));
    };

    for (std::size_t epoch = 0; epoch < cfg_.epochs; ++epoch) {
      admm::rho_schedule(state, cfg_.rho1, cfg_.delta_rho, epoch, cfg_.epochs);
      unflatten(state.consensus, params_, head_idx_);
      const double epoch_loss = theta_epoch(envs, epoch, klw, draws, state);
      log_.epoch_loss.push_back(epoch_loss);
      compute_features(envs, epoch, draws, features);

      const admm::BlockMinimizer minimize = [&](std::size_t e, const admm::AdmmState& s) -> Vector {
        ParamSet hp = head_template;
        unflatten(s.blocks[e], hp, range(0, hp.size()));
        const auto target = split_like(s.consensus - s.u[e], hp);
        const auto shift = split_like(s.v[e], hp);
        const env::EnvironmentData* one[] = {envs[e]};
        EpochPlan plan(one, cfg_.batch_size, cfg_.seed, phases_, (epoch << 20) + s.iteration + 1);
        for (std::size_t step = 0; step < plan.steps(); ++step) {
          const auto rows = plan.indices(0, step);
          const PenalizedLossBuilder builder = [&](ad::Graph& g, std::span<const ad::Var> hv) {
            RandomStream eps(cfg_.seed, {kEps, phases_, epoch, s.iteration, e, step});
            PenalizedLoss loss;
            ad::Var q = head_objective(g, hv, e, rows, eps);
            ad::Var prox{};
            for (std::size_t j = 0; j < hv.size(); ++j) {
              ad::Var sq = g.squared_l2(g.sub(hv[j], g.constant(target[j])));
              prox = j == 0 ? sq : g.add(prox, sq);
            }
            loss.base = g.add(q, g.scale(prox, 0.5 * s.rho0));
            if (s.rho1 > 0.0) loss.penalties.push_back({q, 0.5 * s.rho1, shift});
            return loss;
          };
          const auto all = range(0, hp.size());
          const auto pg = grad_penalty_grad(builder, hp, all, cfg_.second_order);
          block_opt[e].step(hp, pg.grads);
        }
        return flatten(hp, range(0, hp.size()));
      };
      const admm::ConstraintMap constraint = [&](std::size_t e, const Vector& x) -> Vector {
        return constraint_at(e, x, (epoch << 20) + state.iteration);
      };
      for (std::size_t k = 0; k < cfg_.inner_iterations; ++k) {
        admm::gadmm_step(state, minimize, cfg_.rho1 > 0.0 || cfg_.delta_rho > 0.0 ? constraint : admm::ConstraintMap{});
      }
      unflatten(state.consensus, params_, head_idx_);
      double worst = 0.0;
      for (std::size_t e = 0; e < n_env; ++e) {
        worst = std::max(worst, constraint_at(e, state.consensus, (epoch << 20) + 0xFFFFF).norm());
      }
      log_.constraint_norm.push_back(worst);
    }

    if (continual) anchor_ = state.blocks.front();
    if (variational_) {
      model_.params() = params_;
      if (continual) prior_ = posterior();
    }
  }

 private:
  // One epoch of theta updates on sum_e Q_phi^e at the current consensus head.
  double theta_epoch(Envs envs, std::size_t epoch, double klw, std::size_t draws, const admm::AdmmState& state) {
    EpochPlan plan(envs, cfg_.batch_size, cfg_.seed, phases_, epoch);
    const std::size_t tensors = variational_ ? params_.size() / 2 : params_.size();
    double total = 0.0;
    for (std::size_t step = 0; step < plan.steps(); ++step) {
      std::vector<EnvBatch> batches;
      for (std::size_t e = 0; e < envs.size(); ++e) batches.push_back(plan.batch(e, step));
      const PenalizedLossBuilder builder = [&](ad::Graph& g, std::span<const ad::Var> vars) {
        RandomStream eps(cfg_.seed, {kEps, phases_, epoch, step, 0xFFFF});
        PenalizedLoss loss;
        BoundVariational bound;
        if (variational_) bound = bind_variational(g, vars);
        for (std::size_t e = 0; e < envs.size(); ++e) {
          ad::Var x = g.constant(batches[e].x);
          ad::Var risk{};
          for (std::size_t s = 0; s < draws; ++s) {
            std::vector<ad::Var> w;
            if (variational_) {
              w = sample_all(g, bound, eps);
            } else {
              w.assign(vars.begin(), vars.end());
            }
            const auto layers = nn::group_layers(arch_, std::span<const ad::Var>(w).first(tensors));
            ad::Var out = nn::forward_head(g, layers.back(), nn::forward_features(g, arch_, layers, x));
            ad::Var r = nn::risk(g, out, batches[e].y, loss_kind(*envs[e]));
            risk = s == 0 ? r : g.add(risk, r);
          }
          if (draws > 1) risk = g.scale(risk, 1.0 / static_cast<double>(draws));
          if (variational_ && klw > 0.0) {
            risk = g.add(risk, g.scale(kl_to_prior(g, bound, prior_, head_tensors_), klw));
          }
          loss.base = e == 0 ? risk : g.add(loss.base, risk);
          if (cfg_.phi_constraint_terms && state.rho1 > 0.0) {
            loss.penalties.push_back({risk, 0.5 * state.rho1, split_like(state.v[e], head_params())});
          }
        }
        if (variational_ && klw > 0.0) {
          const auto phi_tensors = range(0, head_tensors_.front());
          loss.base = g.add(loss.base, g.scale(kl_to_prior(g, bound, prior_, phi_tensors), klw));
        }
        return loss;
      };
      const auto pg = grad_penalty_grad(builder, params_, head_idx_, cfg_.second_order);
      std::vector<Tensor> grads;
      for (std::size_t i : phi_idx_) grads.push_back(pg.grads[i]);
      opt_.step(params_, phi_idx_, grads);
      const double value = pg.base + pg.penalty;
      log_.step_loss.push_back(value);
      total += value / static_cast<double>(plan.steps());
    }
    return total;
  }

  ParamSet head_params() const {
    ParamSet hp;
    for (std::size_t i : head_idx_) hp.add(params_[i].name, params_[i].value, Partition::Classifier);
    return hp;
  }

  // phi draws of every sample of each environment, fixed for the ADMM iterations of an epoch.
  void compute_features(Envs envs, std::size_t epoch, std::size_t draws, std::vector<std::vector<Tensor>>& out) {
    const std::size_t tensors = variational_ ? params_.size() / 2 : params_.size();
    for (std::size_t e = 0; e < envs.size(); ++e) {
      out[e].clear();
      RandomStream eps(cfg_.seed, {kEps, phases_, epoch, e, 0xFFFE});
      for (std::size_t s = 0; s < draws; ++s) {
        ad::Graph g;
        std::vector<ad::Var> w;
        for (std::size_t k = 0; k < tensors; ++k) {
          if (variational_) {
            GaussianVariable gv{params_[2 * k].value, params_[2 * k + 1].value};
            w.push_back(g.constant(k < head_tensors_.front() ? sample_reparam(gv, eps.normal_tensor(gv.mu.shape()))
                                                             : gv.mu));
          } else {
            w.push_back(g.constant(params_[k].value));
          }
        }
        const auto layers = nn::group_layers(arch_, w);
        out[e].push_back(g.value(nn::forward_features(g, arch_, layers, g.constant(envs[e]->features))));
      }
    }
  }

  nn::Architecture arch_;
  bool variational_;
  VariationalModel model_;
  ParamSet params_;
  std::vector<GaussianVariable> prior_;
  std::vector<std::size_t> phi_idx_;
  std::vector<std::size_t> head_idx_;
  std::vector<std::size_t> head_tensors_;
  Optimizer opt_;
  admm::Vector anchor_;
};

std::unique_ptr<Learner> make_admm_learner(const MethodConfig& cfg, const nn::Architecture& arch) {
  return std::make_unique<AdmmLearner>(cfg, arch);
}

}  // namespace detail

TrainedPredictor birm_admm_train(std::span<const env::EnvironmentData* const> envs, const MethodConfig& cfg,
                                 const nn::Architecture& arch, TrainingLog* log) {
  MethodConfig c = cfg;
  c.method = Method::Birm;
  auto learner = make_learner(c, arch);
  learner->train(envs);
  if (log) *log = learner->log();
  return learner->predictor();
}

TrainedPredictor bvirm_admm_train(std::span<const env::EnvironmentData* const> envs, const MethodConfig& cfg,
                                  const nn::Architecture& arch, TrainingLog* log) {
  MethodConfig c = cfg;
  c.method = Method::Bvirm;
  auto learner = make_learner(c, arch);
  learner->train(envs);
  if (log) *log = learner->log();
  return learner->predictor();
}

}  // namespace cirm::methods
