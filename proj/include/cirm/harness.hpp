#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "cirm/envgen.hpp"
#include "cirm/methods.hpp"

namespace cirm::harness {

enum class DatasetKind { Colored, Sem };

std::string to_string(DatasetKind k);
DatasetKind dataset_kind_from_string(const std::string& s);

/// Where base images come from. Without both IDX paths (or when they do not
/// exist) the synthetic-pattern fallback is used.
struct DatasetSource {
  DatasetKind kind = DatasetKind::Colored;
  std::string name = "mnist";
  std::optional<std::string> idx_images;
  std::optional<std::string> idx_labels;
  std::size_t fallback_size = 12000;
  env::BinarizeRule binarize = env::BinarizeRule::Parity;

  bool operator==(const DatasetSource&) const = default;
};

struct ExperimentPlan {
  std::string name = "experiment";
  DatasetSource dataset;
  std::size_t n_envs = 2;
  env::ColorScheme scheme = env::ColorScheme::B01;
  std::vector<double> p_c;  // colored: one per environment
  double label_flip = env::kLabelFlip;
  double test_p_c = env::kTestPc;
  std::vector<double> sigma_e;  // sem: one per environment
  double sigma_1 = 1.0;
  double test_sigma_e = 1.0;
  std::size_t samples_per_env = 1000;
  std::size_t test_samples = 1000;
  std::vector<methods::MethodConfig> methods;
  std::size_t repetitions = 5;
  std::vector<std::uint64_t> seeds;  // empty: 0 .. repetitions-1
  std::uint64_t data_seed = 2024;
  bool sequential = true;  // false: every environment in one training call
  std::size_t hidden = 100;
  std::size_t eval_samples = 0;  // > 0: Monte Carlo evaluation of variational methods

  /// Throws methods::ConfigError with the offending field path.
  void validate() const;
  std::vector<std::uint64_t> run_seeds() const;
  bool operator==(const ExperimentPlan&) const = default;
};

enum class Phase { Train, Test };
std::string to_string(Phase p);

struct MetricsRecord {
  std::string experiment;
  std::string method;
  std::uint64_t seed = 0;
  std::size_t env_index = 0;
  Phase phase = Phase::Test;
  std::string metric;
  double value = 0.0;
  double wall_time_ms = 0.0;

  bool operator==(const MetricsRecord&) const = default;
};

/// A failure inside a method, tagged with the environment it was training on.
class PhaseError : public std::runtime_error {
 public:
  PhaseError(std::size_t env_index, const std::string& what)
      : std::runtime_error("environment " + std::to_string(env_index) + ": " + what), env_index_(env_index) {}
  std::size_t env_index() const { return env_index_; }

 private:
  std::size_t env_index_;
};

using LearnerFactory =
    std::function<std::unique_ptr<methods::Learner>(const methods::MethodConfig&, const nn::Architecture&)>;

/// Shared per-plan state: base images and the fixed test environment.
class Experiment {
 public:
  explicit Experiment(ExperimentPlan plan);

  const ExperimentPlan& plan() const { return plan_; }
  bool uses_fallback() const { return fallback_; }
  const env::EnvironmentData& test_env() const { return test_; }
  /// Training environment i for a seed (generated on demand).
  env::EnvironmentData train_env(std::size_t i, std::uint64_t seed) const;
  nn::Architecture architecture(const methods::MethodConfig& cfg) const;

 private:
  ExperimentPlan plan_;
  env::BaseImages base_;
  bool fallback_ = false;
  env::EnvironmentData test_;
};

/// Streams the environments of one seed to a fresh learner, revoking each
/// environment's data after its phase, and evaluates after every phase.
std::vector<MetricsRecord> run_sequence(const Experiment& exp, const methods::MethodConfig& method,
                                        std::uint64_t seed, const LearnerFactory& factory = {});

/// Runs every (method, seed) pair with up to `jobs` worker threads. `sink` is
/// called under a lock with each finished run's records.
void run_plan(const Experiment& exp, std::size_t jobs,
              const std::function<void(const std::vector<MetricsRecord>&)>& sink);

struct SummaryRow {
  std::string experiment;
  std::string method;
  Phase phase = Phase::Test;
  std::size_t env_index = 0;
  std::string metric;
  double mean = 0.0;
  double stddev = 0.0;  // n-1 denominator; 0 for a single record
  std::size_t count = 0;
  bool single = false;
};

/// Sample mean and standard deviation per (experiment, method, phase, env, metric).
std::vector<SummaryRow> aggregate(const std::vector<MetricsRecord>& records);

/// "46.0 (2.1)" with values scaled to percent.
std::string format_cell(double mean, double stddev, double scale = 100.0);

/// Environments inferred from pooled data: a reference model is trained on
/// the pool and its logits drive eiil_infer; group 0 comes first.
struct InferredEnvironments {
  std::vector<env::EnvironmentData> envs;
  methods::EiilResult inference;
};
InferredEnvironments infer_environments(const env::EnvironmentData& pooled, const methods::MethodConfig& reference,
                                        const nn::Architecture& arch, const methods::EiilConfig& cfg);

/// Noncausal and causal coefficient errors of a linear predictor on the
/// two-block SEM: ||C_x1 - I||^2 / N and ||C_x2||^2 / N with C = Phi^T W.
struct SemErrors {
  double causal = 0.0;
  double noncausal = 0.0;
};
SemErrors sem_errors(const methods::TrainedPredictor& p);

}  // namespace cirm::harness
