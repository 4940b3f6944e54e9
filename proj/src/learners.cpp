#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "cirm/methods.hpp"
#include "learners.hpp"
#include "training.hpp"

namespace cirm::methods {

using detail::Envs;

Tensor TrainedPredictor::logits(const Tensor& x) const {
  if (heads.empty()) throw std::logic_error("predictor has no classifier");
  Tensor out;
  for (const auto& head : heads) {
    std::vector<Tensor> tensors = phi;
    tensors.insert(tensors.end(), head.begin(), head.end());
    Tensor h = nn::evaluate(arch, tensors, x);
    if (out.empty()) {
      out = std::move(h);
    } else {
      for (std::size_t i = 0; i < out.size(); ++i) out[i] += h[i];
    }
  }
  if (heads.size() > 1) {
    const double inv = 1.0 / static_cast<double>(heads.size());
    for (double& v : out.values()) v *= inv;
  }
  return out;
}

void Learner::train(std::span<const env::EnvironmentData* const> envs) {
  if (envs.empty()) throw std::invalid_argument("train: at least one environment required");
  for (const auto* e : envs) {
    if (e == nullptr) throw std::invalid_argument("train: null environment");
    e->require_access();
    if (e->test_only) throw TaintError("train: test-only environment passed to a learner");
    if (e->size() == 0) throw std::invalid_argument("train: empty environment");
  }
  fit(envs);
  ++phases_;
}

void Learner::train(const env::EnvironmentData& env) {
  const env::EnvironmentData* one[] = {&env};
  train(std::span<const env::EnvironmentData* const>(one));
}

Tensor Learner::mc_logits(const Tensor& x, std::size_t, std::uint64_t) const { return logits(x); }

nn::LossKind loss_kind(const env::EnvironmentData& env) {
  return env.meta.kind == env::EnvKind::Regression ? nn::LossKind::SquaredError : nn::LossKind::BinaryCrossEntropy;
}

ad::Var irmv1_loss(ad::Graph& g, std::span<const ad::Var> logits, std::span<const Tensor> targets, double lambda,
                   nn::LossKind kind) {
  if (logits.empty()) throw std::invalid_argument("irmv1_loss: at least one environment required");
  if (logits.size() != targets.size()) throw std::invalid_argument("irmv1_loss: one target per environment");
  ad::Var total{};
  for (std::size_t e = 0; e < logits.size(); ++e) {
    ad::Var r;
    if (lambda == 0.0) {
      r = nn::risk(g, logits[e], targets[e], kind);
    } else {
      ad::Var w = g.variable(Tensor::scalar(1.0));
      r = nn::risk(g, g.scale_by(logits[e], w), targets[e], kind);
      const ad::Var wv[] = {w};
      const auto dw = g.grad(r, wv);
      r = g.add(r, g.scale(g.square(dw[0]), lambda));
    }
    total = e == 0 ? r : g.add(total, r);
  }
  return total;
}

double irmv1_penalty(const Tensor& logits, const Tensor& targets, nn::LossKind kind) {
  ad::Graph g;
  ad::Var w = g.variable(Tensor::scalar(1.0));
  ad::Var r = nn::risk(g, g.scale_by(g.constant(logits), w), targets, kind);
  const ad::Var wv[] = {w};
  const double d = g.backward(r, wv)[0].item();
  return d * d;
}

namespace detail {

std::vector<std::size_t> range(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> out;
  for (std::size_t i = begin; i < end; ++i) out.push_back(i);
  return out;
}

std::vector<std::size_t> variational_indices(std::span<const std::size_t> tensors) {
  std::vector<std::size_t> out;
  for (std::size_t k : tensors) {
    out.push_back(2 * k);
    out.push_back(2 * k + 1);
  }
  return out;
}

void scale_objective(PenalizedLoss& loss, ad::Graph& g, double lambda) {
  if (lambda <= 1.0) return;
  loss.base = g.scale(loss.base, 1.0 / lambda);
  for (auto& p : loss.penalties) p.weight /= lambda;
}

// ERM and IRMv1: one deterministic network trained on the per-environment
// mean of risk plus the annealed penalty.
class DeterministicLearner : public Learner {
 public:
  DeterministicLearner(MethodConfig cfg, const nn::Architecture& arch) : Learner(std::move(cfg)) {
    RandomStream rng(cfg_.seed, {kInit});
    net_ = nn::Mlp(arch, rng);
    opt_ = Optimizer(cfg_.optimizer_config());
  }

  TrainedPredictor predictor() const override {
    TrainedPredictor p;
    p.arch = net_.arch();
    p.method = cfg_.method;
    const std::size_t nf = p.arch.feature_layer_count() * p.arch.tensors_per_layer();
    std::vector<Tensor> head;
    for (std::size_t i = 0; i < net_.params().size(); ++i) {
      (i < nf ? p.phi : head).push_back(net_.params()[i].value);
    }
    p.heads.push_back(std::move(head));
    return p;
  }

 protected:
  void fit(Envs envs) override {
    const auto& arch = net_.arch();
    const std::size_t n_model = net_.params().size();
    const double inv_envs = 1.0 / static_cast<double>(envs.size());
    for (std::size_t epoch = 0; epoch < cfg_.epochs; ++epoch) {
      const double lam = cfg_.method == Method::Erm ? 0.0 : penalty_weight(cfg_, epoch);
      EpochPlan plan(envs, cfg_.batch_size, cfg_.seed, phases_, epoch);
      double epoch_loss = 0.0;
      for (std::size_t step = 0; step < plan.steps(); ++step) {
        std::vector<EnvBatch> batches;
        std::vector<std::vector<Tensor>> masks;
        for (std::size_t e = 0; e < envs.size(); ++e) {
          batches.push_back(plan.batch(e, step));
          RandomStream mrng(cfg_.seed, {kMask, phases_, epoch, step, e});
          masks.push_back(dropout_masks(arch, batches.back().x.rows(), cfg_.dropout, mrng));
        }
        ParamSet work = net_.params();
        const std::size_t dummy = work.add("irm.scale", Tensor::scalar(1.0), Partition::Classifier);
        const PenalizedLossBuilder builder = [&](ad::Graph& g, std::span<const ad::Var> vars) {
          const auto layers = nn::group_layers(arch, vars.first(n_model));
          PenalizedLoss loss;
          for (std::size_t e = 0; e < envs.size(); ++e) {
            const auto kind = loss_kind(*envs[e]);
            ad::Var h = nn::forward_features(g, arch, layers, g.constant(batches[e].x),
                                             masks[e].empty() ? nullptr : &masks[e]);
            ad::Var out = nn::forward_head(g, layers.back(), h);
            if (lam > 0.0) out = g.scale_by(out, vars[dummy]);
            ad::Var r = g.scale(nn::risk(g, out, batches[e].y, kind), inv_envs);
            loss.base = e == 0 ? r : g.add(loss.base, r);
            if (lam > 0.0) loss.penalties.push_back({r, lam / inv_envs, {}});
          }
          scale_objective(loss, g, lam);
          return loss;
        };
        const std::size_t wrt[] = {dummy};
        const auto pg = grad_penalty_grad(builder, work, wrt, cfg_.second_order);
        opt_.step(net_.params(), std::span<const Tensor>(pg.grads).first(n_model));
        const double value = pg.base + pg.penalty;
        log_.step_loss.push_back(value);
        epoch_loss += value / static_cast<double>(plan.steps());
      }
      log_.epoch_loss.push_back(epoch_loss);
    }
  }

 private:
  nn::Mlp net_;
  Optimizer opt_;
};

// Ensemble of per-environment heads on a shared phi. Heads of past phases stay frozen.
class IrmgLearner : public Learner {
 public:
  IrmgLearner(MethodConfig cfg, const nn::Architecture& arch) : Learner(std::move(cfg)), arch_(arch) {
    RandomStream rng(cfg_.seed, {kInit});
    auto init = nn::initial_tensors(arch_, rng);
    const std::size_t nf = arch_.feature_layer_count() * arch_.tensors_per_layer();
    for (std::size_t i = 0; i < nf; ++i) params_.add("phi." + std::to_string(i), std::move(init[i]), Partition::Feature);
    opt_ = Optimizer(cfg_.optimizer_config());
  }

  TrainedPredictor predictor() const override {
    TrainedPredictor p;
    p.arch = arch_;
    p.method = cfg_.method;
    for (std::size_t i = 0; i < feature_count(); ++i) p.phi.push_back(params_[i].value);
    for (std::size_t h = 0; h < heads_; ++h) {
      std::vector<Tensor> head;
      for (std::size_t j = 0; j < arch_.tensors_per_layer(); ++j) head.push_back(params_[head_index(h) + j].value);
      p.heads.push_back(std::move(head));
    }
    return p;
  }

  std::size_t steps_taken() const { return global_step_; }

 protected:
  void fit(Envs envs) override {
    const std::size_t first_new = heads_;
    for (std::size_t e = 0; e < envs.size(); ++e) {
      RandomStream rng(cfg_.seed, {kHead, heads_});
      const auto init = nn::initial_tensors(arch_, rng);
      const std::size_t nf = feature_count();
      for (std::size_t j = 0; j < arch_.tensors_per_layer(); ++j) {
        params_.add("head" + std::to_string(heads_) + "." + std::to_string(j), init[nf + j], Partition::Classifier);
      }
      ++heads_;
    }
    const auto phi_idx = range(0, feature_count());
    const double inv_envs = 1.0 / static_cast<double>(envs.size());
    const double inv_heads = 1.0 / static_cast<double>(heads_);

    for (std::size_t epoch = 0; epoch < cfg_.epochs; ++epoch) {
      EpochPlan plan(envs, cfg_.batch_size, cfg_.seed, phases_, epoch);
      double epoch_loss = 0.0;
      for (std::size_t step = 0; step < plan.steps(); ++step) {
        ad::Graph g;
        const auto vars = params_.bind(g);
        const auto phi_layers = nn::group_layers(arch_, ensemble_vars(vars, 0));
        ad::Var total{};
        std::vector<ad::Var> risks;
        for (std::size_t e = 0; e < envs.size(); ++e) {
          const auto b = plan.batch(e, step);
          RandomStream mrng(cfg_.seed, {kMask, phases_, epoch, step, e});
          const auto masks = dropout_masks(arch_, b.x.rows(), cfg_.dropout, mrng);
          ad::Var h = nn::forward_features(g, arch_, phi_layers, g.constant(b.x), masks.empty() ? nullptr : &masks);
          ad::Var mean_out{};
          for (std::size_t k = 0; k < heads_; ++k) {
            const auto layers = nn::group_layers(arch_, ensemble_vars(vars, k));
            ad::Var o = nn::forward_head(g, layers.back(), h);
            mean_out = k == 0 ? o : g.add(mean_out, o);
          }
          if (heads_ > 1) mean_out = g.scale(mean_out, inv_heads);
          ad::Var r = nn::risk(g, mean_out, b.y, loss_kind(*envs[e]));
          risks.push_back(r);
          ad::Var rs = g.scale(r, inv_envs);
          total = e == 0 ? rs : g.add(total, rs);
        }
        const bool warm = global_step_ < cfg_.warm_start;
        const bool update_phi = warm || global_step_ % 2 == 1;
        const bool update_heads = warm || global_step_ % 2 == 0;
        if (update_phi) {
          const auto grads = g.backward(total, subset(vars, phi_idx));
          opt_.step(params_, phi_idx, grads);
        }
        if (update_heads) {
          for (std::size_t e = 0; e < envs.size(); ++e) {
            const auto idx = range(head_index(first_new + e), head_index(first_new + e) + arch_.tensors_per_layer());
            const auto grads = g.backward(risks[e], subset(vars, idx));
            opt_.step(params_, idx, grads);
          }
        }
        ++global_step_;
        const double value = g.scalar(total);
        log_.step_loss.push_back(value);
        epoch_loss += value / static_cast<double>(plan.steps());
      }
      log_.epoch_loss.push_back(epoch_loss);
      if (global_step_ >= cfg_.warm_start && train_accuracy(envs) < cfg_.termination_accuracy) {
        log_.notes.push_back("irmg: phase " + std::to_string(phases_) + " terminated after epoch " +
                             std::to_string(epoch) + " (train accuracy below threshold)");
        break;
      }
    }
  }

 private:
  std::size_t feature_count() const { return arch_.feature_layer_count() * arch_.tensors_per_layer(); }
  std::size_t head_index(std::size_t h) const { return feature_count() + h * arch_.tensors_per_layer(); }

  std::vector<ad::Var> ensemble_vars(std::span<const ad::Var> vars, std::size_t head) const {
    std::vector<ad::Var> out(vars.begin(), vars.begin() + static_cast<std::ptrdiff_t>(feature_count()));
    for (std::size_t j = 0; j < arch_.tensors_per_layer(); ++j) out.push_back(vars[head_index(head) + j]);
    return out;
  }

  double train_accuracy(Envs envs) const {
    const auto p = predictor();
    double acc = 0.0;
    for (const auto* e : envs) acc += nn::accuracy(p.logits(e->features), e->targets);
    return acc / static_cast<double>(envs.size());
  }

  nn::Architecture arch_;
  ParamSet params_;
  Optimizer opt_;
  std::size_t heads_ = 0;
  std::size_t global_step_ = 0;
};

VariationalLearnerBase::VariationalLearnerBase(MethodConfig cfg, const nn::Architecture& arch)
    : Learner(std::move(cfg)) {
  RandomStream rng(cfg_.seed, {kInit});
  model_ = VariationalModel(arch, rng, cfg_.initial_sigma);
  prior_ = model_.standard_prior();
  opt_ = Optimizer(cfg_.optimizer_config());
}

TrainedPredictor VariationalLearnerBase::predictor() const {
  TrainedPredictor p;
  p.arch = model_.arch();
  p.method = cfg_.method;
  const auto means = model_.mean_tensors();
  const std::size_t nf = model_.feature_tensors().size();
  p.phi.assign(means.begin(), means.begin() + static_cast<std::ptrdiff_t>(nf));
  p.heads.emplace_back(means.begin() + static_cast<std::ptrdiff_t>(nf), means.end());
  return p;
}

Tensor VariationalLearnerBase::mc_logits(const Tensor& x, std::size_t samples, std::uint64_t seed) const {
  RandomStream rng(seed, {kEval});
  Tensor out;
  for (std::size_t s = 0; s < std::max<std::size_t>(1, samples); ++s) {
    std::vector<Tensor> draw;
    for (std::size_t k = 0; k < model_.tensor_count(); ++k) {
      const auto gv = model_.variable(k);
      draw.push_back(sample_reparam(gv, rng.normal_tensor(gv.mu.shape())));
    }
    Tensor o = nn::evaluate(model_.arch(), draw, x);
    if (out.empty()) {
      out = std::move(o);
    } else {
      for (std::size_t i = 0; i < out.size(); ++i) out[i] += o[i];
    }
  }
  for (double& v : out.values()) v /= static_cast<double>(std::max<std::size_t>(1, samples));
  return out;
}

// VCL and C-VIRMv1: E_q[R + lambda * penalty] + beta KL(q || q_{t-1}) per phase.
class VariationalLearner : public VariationalLearnerBase {
 public:
  using VariationalLearnerBase::VariationalLearnerBase;

 protected:
  void fit(Envs envs) override {
    const auto& arch = model_.arch();
    const std::size_t n_model = model_.params().size();
    const auto all = range(0, model_.tensor_count());
    const double inv_envs = 1.0 / static_cast<double>(envs.size());
    const double inv_mc = 1.0 / static_cast<double>(cfg_.n_mc);
    const double klw = kl_weight(cfg_, total_size(envs));
    for (std::size_t epoch = 0; epoch < cfg_.epochs; ++epoch) {
      const double lam = cfg_.method == Method::Vcl ? 0.0 : penalty_weight(cfg_, epoch);
      EpochPlan plan(envs, cfg_.batch_size, cfg_.seed, phases_, epoch);
      double epoch_loss = 0.0;
      for (std::size_t step = 0; step < plan.steps(); ++step) {
        std::vector<EnvBatch> batches;
        for (std::size_t e = 0; e < envs.size(); ++e) batches.push_back(plan.batch(e, step));
        ParamSet work = model_.params();
        const std::size_t dummy = work.add("irm.scale", Tensor::scalar(1.0), Partition::Classifier);
        const PenalizedLossBuilder builder = [&](ad::Graph& g, std::span<const ad::Var> vars) {
          const auto bound = bind_variational(g, vars.first(n_model));
          RandomStream eps(cfg_.seed, {kEps, phases_, epoch, step});
          PenalizedLoss loss;
          bool first = true;
          for (std::size_t e = 0; e < envs.size(); ++e) {
            const auto kind = loss_kind(*envs[e]);
            ad::Var x = g.constant(batches[e].x);
            for (std::size_t s = 0; s < cfg_.n_mc; ++s) {
              const auto w = sample_all(g, bound, eps);
              const auto layers = nn::group_layers(arch, w);
              ad::Var out = nn::forward_head(g, layers.back(), nn::forward_features(g, arch, layers, x));
              if (lam > 0.0) out = g.scale_by(out, vars[dummy]);
              ad::Var r = g.scale(nn::risk(g, out, batches[e].y, kind), inv_envs * inv_mc);
              loss.base = first ? r : g.add(loss.base, r);
              first = false;
              if (lam > 0.0) loss.penalties.push_back({r, lam / (inv_envs * inv_mc), {}});
            }
          }
          loss.base = g.add(loss.base, g.scale(kl_to_prior(g, bound, prior_, all), klw));
          scale_objective(loss, g, lam);
          return loss;
        };
        const std::size_t wrt[] = {dummy};
        const auto pg = grad_penalty_grad(builder, work, wrt, cfg_.second_order);
        opt_.step(model_.params(), std::span<const Tensor>(pg.grads).first(n_model));
        const double value = pg.base + pg.penalty;
        log_.step_loss.push_back(value);
        epoch_loss += value / static_cast<double>(plan.steps());
      }
      log_.epoch_loss.push_back(epoch_loss);
    }
    prior_ = model_.posterior();
  }
};

// C-VIRMG: classifier w_bar = (w + w_{t-1}) / 2 with w_{t-1} drawn from the
// frozen previous head posterior (zero in the first phase). Each step is a
// best response of q_w followed by an update of q_phi.
class CVirmgLearner : public VariationalLearnerBase {
 public:
  using VariationalLearnerBase::VariationalLearnerBase;

  TrainedPredictor predictor() const override {
    TrainedPredictor p = VariationalLearnerBase::predictor();
    if (partner_head_.empty()) {
      std::vector<Tensor> zero;
      for (const auto& t : p.heads.front()) zero.push_back(zeros_like(t));
      p.heads.push_back(std::move(zero));
    } else {
      p.heads.push_back(partner_head_);
    }
    return p;
  }

  Tensor mc_logits(const Tensor& x, std::size_t, std::uint64_t) const override { return logits(x); }

 protected:
  void fit(Envs envs) override {
    const auto& arch = model_.arch();
    const auto head_tensors = model_.classifier_tensors();
    const auto phi_tensors = model_.feature_tensors();
    const auto head_idx = variational_indices(head_tensors);
    const auto phi_idx = variational_indices(phi_tensors);
    const double inv_envs = 1.0 / static_cast<double>(envs.size());
    const double inv_mc = 1.0 / static_cast<double>(cfg_.n_mc);
    const double klw = kl_weight(cfg_, total_size(envs));

    const auto objective = [&](ad::Graph& g, std::span<const ad::Var> vars, const std::vector<EnvBatch>& batches,
                               RandomStream& eps, std::span<const std::size_t> kl_part) {
      const auto bound = bind_variational(g, vars);
      ad::Var total{};
      bool first = true;
      for (std::size_t e = 0; e < envs.size(); ++e) {
        ad::Var x = g.constant(batches[e].x);
        for (std::size_t s = 0; s < cfg_.n_mc; ++s) {
          auto w = sample_all(g, bound, eps);
          for (std::size_t j = 0; j < head_tensors.size(); ++j) {
            const std::size_t k = head_tensors[j];
            Tensor prev = previous_head_.empty()
                              ? Tensor(g.shape(w[k]), 0.0)
                              : sample_reparam(previous_head_[j], eps.normal_tensor(previous_head_[j].mu.shape()));
            w[k] = g.scale(g.add(w[k], g.constant(prev)), 0.5);
          }
          const auto layers = nn::group_layers(arch, w);
          ad::Var out = nn::forward_head(g, layers.back(), nn::forward_features(g, arch, layers, x));
          ad::Var r = g.scale(nn::risk(g, out, batches[e].y, loss_kind(*envs[e])), inv_envs * inv_mc);
          total = first ? r : g.add(total, r);
          first = false;
        }
      }
      return g.add(total, g.scale(kl_to_prior(g, bound, prior_, kl_part), klw));
    };

    for (std::size_t epoch = 0; epoch < cfg_.epochs; ++epoch) {
      EpochPlan plan(envs, cfg_.batch_size, cfg_.seed, phases_, epoch);
      double epoch_loss = 0.0;
      for (std::size_t step = 0; step < plan.steps(); ++step) {
        std::vector<EnvBatch> batches;
        for (std::size_t e = 0; e < envs.size(); ++e) batches.push_back(plan.batch(e, step));
        {
          ad::Graph g;
          const auto vars = model_.params().bind(g);
          RandomStream eps(cfg_.seed, {kEps, phases_, epoch, step, 0});
          ad::Var q_w = objective(g, vars, batches, eps, head_tensors);
          opt_.step(model_.params(), head_idx, g.backward(q_w, subset(vars, head_idx)));
        }
        ad::Graph g;
        const auto vars = model_.params().bind(g);
        RandomStream eps(cfg_.seed, {kEps, phases_, epoch, step, 1});
        ad::Var q_phi = objective(g, vars, batches, eps, phi_tensors);
        opt_.step(model_.params(), phi_idx, g.backward(q_phi, subset(vars, phi_idx)));
        const double value = g.scalar(q_phi);
        log_.step_loss.push_back(value);
        epoch_loss += value / static_cast<double>(plan.steps());
      }
      log_.epoch_loss.push_back(epoch_loss);
    }
    prior_ = model_.posterior();
    partner_head_.clear();
    for (const auto& gv : previous_head_) partner_head_.push_back(gv.mu);
    previous_head_.clear();
    for (std::size_t k : head_tensors) previous_head_.push_back(model_.variable(k));
  }

 private:
  std::vector<GaussianVariable> previous_head_;
  std::vector<Tensor> partner_head_;  // w_{t-1} mean of the last trained ensemble
};

}  // namespace detail

std::unique_ptr<Learner> make_learner(const MethodConfig& cfg, const nn::Architecture& arch) {
  cfg.validate();
  switch (cfg.method) {
    case Method::Erm:
    case Method::Irmv1:
      return std::make_unique<detail::DeterministicLearner>(cfg, arch);
    case Method::Irmg:
      return std::make_unique<detail::IrmgLearner>(cfg, arch);
    case Method::Vcl:
    case Method::CVirmv1:
      return std::make_unique<detail::VariationalLearner>(cfg, arch);
    case Method::CVirmg:
      return std::make_unique<detail::CVirmgLearner>(cfg, arch);
    case Method::Birm:
    case Method::Bvirm:
    case Method::CBvirm:
      return detail::make_admm_learner(cfg, arch);
  }
  throw std::logic_error("unknown method");
}

TrainedPredictor erm_train(std::span<const env::EnvironmentData* const> envs, const MethodConfig& cfg,
                           const nn::Architecture& arch) {
  MethodConfig c = cfg;
  c.method = Method::Erm;
  auto learner = make_learner(c, arch);
  learner->train(envs);
  return learner->predictor();
}

}  // namespace cirm::methods
