#pragma once

#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cirm/autodiff.hpp"
#include "cirm/envgen.hpp"
#include "cirm/nn.hpp"
#include "cirm/optim.hpp"
#include "cirm/params.hpp"
#include "cirm/variational.hpp"

namespace cirm::methods {

enum class Method { Erm, Irmv1, Irmg, Birm, Bvirm, CBvirm, Vcl, CVirmv1, CVirmg };

std::string to_string(Method m);
Method method_from_string(const std::string& id);
bool is_variational(Method m);

/// How the KL term is weighted against the mean risk of a minibatch:
/// Batch uses beta * KL, Dataset uses beta * KL / n_env.
enum class KlScale { Batch, Dataset };

class ConfigError : public std::invalid_argument {
 public:
  ConfigError(const std::string& path, const std::string& what)
      : std::invalid_argument(path + ": " + what), path_(path) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

struct MethodConfig {
  Method method = Method::Erm;
  double lambda = 91257.0;
  double beta = 1.0;
  double lr = 1e-3;
  OptimizerKind optimizer = OptimizerKind::Adam;
  std::size_t epochs = 100;
  std::size_t batch_size = 256;
  std::size_t inner_iterations = 1;  // K
  std::size_t n_mc = 5;
  double rho0 = 10.0;
  double rho1 = 10.0;
  double delta_rho = 100.0;
  std::optional<std::size_t> penalty_anneal_epoch;  // default epochs / 2
  double dropout = 0.0;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  std::size_t warm_start = 300;
  double termination_accuracy = 0.6;
  bool skip_first_anchor = false;
  KlScale kl_scale = KlScale::Dataset;
  double initial_sigma = 0.01;
  bool mc_eval = false;
  bool phi_constraint_terms = false;
  SecondOrderMode second_order = SecondOrderMode::Nested;

  std::size_t anneal_epoch() const { return penalty_anneal_epoch.value_or(epochs / 2); }
  OptimizerConfig optimizer_config() const { return {optimizer, lr, weight_decay}; }
  /// Throws ConfigError with `prefix.field` paths.
  void validate(const std::string& prefix = "method") const;
  bool operator==(const MethodConfig&) const = default;
};

/// Hyperparameters listed for each method.
MethodConfig default_config(Method m);

/// IRMv1 weight for an epoch: 1 before the anneal epoch and lambda after (0 stays 0).
double penalty_weight(const MethodConfig& cfg, std::size_t epoch);

struct TrainingLog {
  std::vector<double> step_loss;
  std::vector<double> epoch_loss;
  std::vector<double> constraint_norm;  // max_e ||grad_w Q^e|| after each outer iteration
  std::vector<std::string> notes;
};

/// Evaluation-time predictor: mean over heads of head(phi(x)).
struct TrainedPredictor {
  nn::Architecture arch;
  std::vector<Tensor> phi;                 // feature-layer tensors
  std::vector<std::vector<Tensor>> heads;  // classifier-layer tensors
  Method method = Method::Erm;

  Tensor logits(const Tensor& x) const;
};

/// A method that learns from one phase of environments at a time. Offline
/// training passes every environment in a single call; the continual harness
/// passes one environment per call and never the same one twice.
class Learner {
 public:
  explicit Learner(MethodConfig cfg) : cfg_(std::move(cfg)) {}
  virtual ~Learner() = default;

  /// Trains on the given environments. Rejects test-only data.
  void train(std::span<const env::EnvironmentData* const> envs);
  void train(const env::EnvironmentData& env);

  virtual TrainedPredictor predictor() const = 0;
  virtual Tensor logits(const Tensor& x) const { return predictor().logits(x); }
  /// Averaged sampled outputs for variational models; the mean-weight output otherwise.
  virtual Tensor mc_logits(const Tensor& x, std::size_t samples, std::uint64_t seed) const;

  /// Current mean-field posterior and the prior the next phase will use;
  /// empty for deterministic methods.
  virtual std::vector<GaussianVariable> posterior() const { return {}; }
  virtual std::vector<GaussianVariable> next_prior() const { return {}; }

  const MethodConfig& config() const { return cfg_; }
  const TrainingLog& log() const { return log_; }
  std::size_t phases() const { return phases_; }

 protected:
  virtual void fit(std::span<const env::EnvironmentData* const> envs) = 0;

  MethodConfig cfg_;
  TrainingLog log_;
  std::size_t phases_ = 0;
};

class TaintError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

std::unique_ptr<Learner> make_learner(const MethodConfig& cfg, const nn::Architecture& arch);

nn::LossKind loss_kind(const env::EnvironmentData& env);

/// sum_e R^e + lambda * sum_e (dR^e(w * logits_e)/dw at w = 1)^2, built with a
/// differentiable inner gradient so the result supports backward.
ad::Var irmv1_loss(ad::Graph& g, std::span<const ad::Var> logits, std::span<const Tensor> targets, double lambda,
                   nn::LossKind kind);
/// (dR(w * logits)/dw at w = 1)^2 for one environment, as a value.
double irmv1_penalty(const Tensor& logits, const Tensor& targets, nn::LossKind kind);

/// Q_phi^e and Q_w^e from one shared set of draws.
struct BvirmObjectives {
  ad::Var q_phi;
  ad::Var q_w;
  ad::Var risk;
};
BvirmObjectives bvirm_objectives(ad::Graph& g, const VariationalModel& model, const BoundVariational& bound,
                                 const Tensor& x, const Tensor& targets, std::span<const GaussianVariable> prior,
                                 double beta, std::size_t n_mc, RandomStream& rng, nn::LossKind kind);

/// ||Phi E[x x^T] Phi^T w - Phi E[x y^T]||_F with empirical moments; Phi is
/// [d_phi x d_x] applied as Phi x, w is [d_phi x k].
double linear_stationarity_check(const Eigen::MatrixXd& Phi, const Eigen::MatrixXd& w, const Eigen::MatrixXd& X,
                                 const Eigen::MatrixXd& Y);

/// Offline trainers on all environments at once.
TrainedPredictor erm_train(std::span<const env::EnvironmentData* const> envs, const MethodConfig& cfg,
                           const nn::Architecture& arch);
TrainedPredictor birm_admm_train(std::span<const env::EnvironmentData* const> envs, const MethodConfig& cfg,
                                 const nn::Architecture& arch, TrainingLog* log = nullptr);
TrainedPredictor bvirm_admm_train(std::span<const env::EnvironmentData* const> envs, const MethodConfig& cfg,
                                  const nn::Architecture& arch, TrainingLog* log = nullptr);

/// Gaussian over linear-regression weights.
struct LinearGaussianVcl {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;
};
/// Minimiser over Gaussians q of E_q[-log p(D | theta)] + KL(q || prior) for
/// y = X theta + N(0, noise_var), from the stationarity conditions of that objective.
LinearGaussianVcl vcl_linear_gaussian_step(const LinearGaussianVcl& prior, const Eigen::MatrixXd& X,
                                           const Eigen::VectorXd& y, double noise_var);
/// The objective minimised above, in closed form.
double vcl_linear_gaussian_objective(const LinearGaussianVcl& q, const LinearGaussianVcl& prior,
                                     const Eigen::MatrixXd& X, const Eigen::VectorXd& y, double noise_var);

struct EiilResult {
  std::vector<double> weights;  // soft assignment to group A
  std::vector<int> group;       // hardened at 0.5
  double penalty = 0.0;
  bool degenerate = false;
};
struct EiilConfig {
  std::size_t iterations = 10000;
  double lr = 1e-2;
  std::uint64_t seed = 0;
};
/// Soft two-group split of pooled data maximising the summed IRMv1 penalties
/// of the reference predictor's logits under the weighted split.
EiilResult eiil_infer(const Tensor& reference_logits, const Tensor& targets, nn::LossKind kind,
                      const EiilConfig& cfg);

}  // namespace cirm::methods
