#include "cirm/harness.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <map>
#include <mutex>
#include <thread>
#include <tuple>

#include "cirm/oracle.hpp"

namespace cirm::harness {

namespace {

enum : std::uint64_t { kTrainEnv = 1, kTestEnv, kEvalDraws };

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

double mse(const Tensor& pred, const Tensor& targets) {
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - targets[i]) * (pred[i] - targets[i]);
  return s / static_cast<double>(pred.size());
}

bool idx_available(const DatasetSource& d) {
  return d.idx_images && d.idx_labels && std::filesystem::exists(*d.idx_images) &&
         std::filesystem::exists(*d.idx_labels);
}

void revoke(env::EnvironmentData& e) {
  if (e.lease) e.lease->active.store(false);
  e.features = Tensor();
  e.targets = Tensor();
  e.clean_labels.clear();
  e.colors.clear();
}

}  // namespace

std::string to_string(DatasetKind k) { return k == DatasetKind::Colored ? "colored" : "sem"; }

DatasetKind dataset_kind_from_string(const std::string& s) {
  if (s == "colored") return DatasetKind::Colored;
  if (s == "sem") return DatasetKind::Sem;
  throw std::invalid_argument("unknown dataset kind '" + s + "'");
}

std::string to_string(Phase p) { return p == Phase::Train ? "train" : "test"; }

void ExperimentPlan::validate() const {
  using methods::ConfigError;
  if (n_envs == 0) throw ConfigError("n_envs", "must be >= 1");
  if (dataset.kind == DatasetKind::Colored && p_c.size() != n_envs) {
    throw ConfigError("p_c", "needs one value per environment (" + std::to_string(n_envs) + ")");
  }
  for (std::size_t i = 0; i < p_c.size(); ++i) {
    if (!(p_c[i] >= 0.0 && p_c[i] <= 1.0)) throw ConfigError("p_c[" + std::to_string(i) + "]", "must be in [0, 1]");
  }
  if (dataset.kind == DatasetKind::Sem && sigma_e.size() != n_envs) {
    throw ConfigError("sigma_e", "needs one value per environment (" + std::to_string(n_envs) + ")");
  }
  for (std::size_t i = 0; i < sigma_e.size(); ++i) {
    if (!(sigma_e[i] > 0.0)) throw ConfigError("sigma_e[" + std::to_string(i) + "]", "must be > 0");
  }
  if (!(sigma_1 > 0.0)) throw ConfigError("sigma_1", "must be > 0");
  if (!(test_sigma_e > 0.0)) throw ConfigError("test_sigma_e", "must be > 0");
  if (!(label_flip >= 0.0 && label_flip <= 1.0)) throw ConfigError("label_flip", "must be in [0, 1]");
  if (!(test_p_c >= 0.0 && test_p_c <= 1.0)) throw ConfigError("test_p_c", "must be in [0, 1]");
  if (samples_per_env == 0) throw ConfigError("samples_per_env", "must be >= 1");
  if (test_samples == 0) throw ConfigError("test_samples", "must be >= 1");
  if (repetitions == 0) throw ConfigError("repetitions", "must be >= 1");
  if (!seeds.empty() && seeds.size() != repetitions) {
    throw ConfigError("seeds", "needs one seed per repetition (" + std::to_string(repetitions) + ")");
  }
  if (methods.empty()) throw ConfigError("methods", "at least one method required");
  for (std::size_t i = 0; i < methods.size(); ++i) methods[i].validate("methods[" + std::to_string(i) + "]");
  if (hidden == 0) throw ConfigError("hidden", "must be >= 1");
}

std::vector<std::uint64_t> ExperimentPlan::run_seeds() const {
  if (!seeds.empty()) return seeds;
  std::vector<std::uint64_t> out;
  for (std::size_t r = 0; r < repetitions; ++r) out.push_back(r);
  return out;
}

Experiment::Experiment(ExperimentPlan plan) : plan_(std::move(plan)) {
  plan_.validate();
  if (plan_.dataset.kind == DatasetKind::Colored) {
    if (idx_available(plan_.dataset)) {
      base_ = env::load_idx(*plan_.dataset.idx_images, *plan_.dataset.idx_labels);
    } else {
      fallback_ = true;
      base_ = env::synthetic_pattern_fallback(plan_.dataset.fallback_size, plan_.data_seed);
    }
    test_ = env::make_colored_env(base_, plan_.label_flip, plan_.test_p_c, plan_.scheme, plan_.dataset.binarize,
                                  plan_.test_samples, derive_seed(plan_.data_seed, {kTestEnv}));
  } else {
    test_ = env::synth_sem(plan_.test_samples, plan_.test_sigma_e, plan_.sigma_1,
                           derive_seed(plan_.data_seed, {kTestEnv}));
  }
  test_.test_only = true;
}

env::EnvironmentData Experiment::train_env(std::size_t i, std::uint64_t seed) const {
  if (i >= plan_.n_envs) throw std::out_of_range("train_env: environment index out of range");
  const std::uint64_t s = derive_seed(plan_.data_seed, {kTrainEnv, seed, i});
  if (plan_.dataset.kind == DatasetKind::Colored) {
    return env::make_colored_env(base_, plan_.label_flip, plan_.p_c[i], plan_.scheme, plan_.dataset.binarize,
                                 plan_.samples_per_env, s);
  }
  return env::synth_sem(plan_.samples_per_env, plan_.sigma_e[i], plan_.sigma_1, s);
}

nn::Architecture Experiment::architecture(const methods::MethodConfig&) const {
  if (plan_.dataset.kind == DatasetKind::Sem) return nn::linear_regression(test_.features.cols(), test_.targets.cols());
  return nn::colored_mlp(test_.features.cols(), plan_.hidden);
}

std::vector<MetricsRecord> run_sequence(const Experiment& exp, const methods::MethodConfig& method,
                                        std::uint64_t seed, const LearnerFactory& factory) {
  const auto& plan = exp.plan();
  const auto start = Clock::now();
  methods::MethodConfig cfg = method;
  cfg.seed = derive_seed(seed, {method.seed});
  const auto arch = exp.architecture(cfg);
  auto learner = factory ? factory(cfg, arch) : methods::make_learner(cfg, arch);
  const bool sem = plan.dataset.kind == DatasetKind::Sem;
  const bool mc = plan.eval_samples > 0 && methods::is_variational(cfg.method);

  std::vector<MetricsRecord> out;
  const auto record = [&](std::size_t env_index, Phase phase, const std::string& metric, double value) {
    out.push_back({plan.name, methods::to_string(cfg.method), seed, env_index, phase, metric, value,
                   elapsed_ms(start)});
  };
  const auto outputs = [&](const Tensor& x, std::size_t env_index) {
    if (mc) return learner->mc_logits(x, plan.eval_samples, derive_seed(seed, {kEvalDraws, env_index}));
    return learner->logits(x);
  };
  const auto score = [&](const env::EnvironmentData& e, std::size_t env_index) {
    const Tensor y = outputs(e.features, env_index);
    return sem ? mse(y, e.targets) : nn::accuracy(y, e.targets);
  };
  const std::string metric = sem ? "mse" : "accuracy";

  const auto train_phase = [&](std::vector<env::EnvironmentData>& data, std::size_t env_index) {
    std::vector<const env::EnvironmentData*> ptrs;
    for (auto& d : data) {
      d.lease = std::make_shared<env::DataLease>();
      ptrs.push_back(&d);
    }
    try {
      learner->train(ptrs);
    } catch (const env::IsolationError& e) {
      throw env::IsolationError("environment " + std::to_string(env_index) + ": " + e.what());
    } catch (const methods::TaintError&) {
      throw;
    } catch (const std::exception& e) {
      throw PhaseError(env_index, e.what());
    }
    double train = 0.0;
    for (const auto& d : data) train += score(d, env_index);
    record(env_index, Phase::Train, metric, train / static_cast<double>(data.size()));
    for (auto& d : data) revoke(d);
    record(env_index, Phase::Test, metric, score(exp.test_env(), env_index));
    if (sem) {
      const auto err = sem_errors(learner->predictor());
      record(env_index, Phase::Test, "causal_error", err.causal);
      record(env_index, Phase::Test, "noncausal_error", err.noncausal);
    }
  };

  if (plan.sequential) {
    for (std::size_t i = 0; i < plan.n_envs; ++i) {
      std::vector<env::EnvironmentData> one;
      one.push_back(exp.train_env(i, seed));
      train_phase(one, i);
    }
  } else {
    std::vector<env::EnvironmentData> all;
    for (std::size_t i = 0; i < plan.n_envs; ++i) all.push_back(exp.train_env(i, seed));
    train_phase(all, plan.n_envs - 1);
  }
  return out;
}

void run_plan(const Experiment& exp, std::size_t jobs,
              const std::function<void(const std::vector<MetricsRecord>&)>& sink) {
  struct Task {
    const methods::MethodConfig* method;
    std::uint64_t seed;
  };
  std::vector<Task> tasks;
  const auto seeds = exp.plan().run_seeds();
  for (const auto& m : exp.plan().methods) {
    for (std::uint64_t s : seeds) tasks.push_back({&m, s});
  }
  std::atomic<std::size_t> next{0};
  std::mutex lock;
  std::exception_ptr failure;
  const auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= tasks.size()) return;
      {
        std::lock_guard<std::mutex> g(lock);
        if (failure) return;
      }
      try {
        auto records = run_sequence(exp, *tasks[i].method, tasks[i].seed);
        std::lock_guard<std::mutex> g(lock);
        sink(records);
      } catch (...) {
        std::lock_guard<std::mutex> g(lock);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(jobs, tasks.size()));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
}

std::vector<SummaryRow> aggregate(const std::vector<MetricsRecord>& records) {
  if (records.empty()) throw std::invalid_argument("aggregate: no records");
  using Key = std::tuple<std::string, std::string, int, std::size_t, std::string>;
  std::map<Key, std::vector<double>> groups;
  for (const auto& r : records) {
    groups[{r.experiment, r.method, static_cast<int>(r.phase), r.env_index, r.metric}].push_back(r.value);
  }
  std::vector<SummaryRow> out;
  for (const auto& [key, values] : groups) {
    SummaryRow row;
    row.experiment = std::get<0>(key);
    row.method = std::get<1>(key);
    row.phase = static_cast<Phase>(std::get<2>(key));
    row.env_index = std::get<3>(key);
    row.metric = std::get<4>(key);
    row.count = values.size();
    double sum = 0.0;
    for (double v : values) sum += v;
    row.mean = sum / static_cast<double>(values.size());
    if (values.size() > 1) {
      double ss = 0.0;
      for (double v : values) ss += (v - row.mean) * (v - row.mean);
      row.stddev = std::sqrt(ss / static_cast<double>(values.size() - 1));
    } else {
      row.single = true;
    }
    out.push_back(row);
  }
  return out;
}

std::string format_cell(double mean, double stddev, double scale) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.1f (%.1f)", mean * scale, stddev * scale);
  return buf;
}

InferredEnvironments infer_environments(const env::EnvironmentData& pooled, const methods::MethodConfig& reference,
                                        const nn::Architecture& arch, const methods::EiilConfig& cfg) {
  auto ref = methods::make_learner(reference, arch);
  ref->train(pooled);
  InferredEnvironments out;
  out.inference = methods::eiil_infer(ref->logits(pooled.features), pooled.targets, methods::loss_kind(pooled), cfg);
  if (out.inference.degenerate) throw std::runtime_error("infer_environments: degenerate split");
  const std::size_t width = pooled.features.cols();
  for (int g = 0; g < 2; ++g) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < pooled.size(); ++i) {
      if (out.inference.group[i] == g) rows.push_back(i);
    }
    env::EnvironmentData e;
    e.meta = pooled.meta;
    e.features = Tensor({rows.size(), width});
    e.targets = Tensor({rows.size()});
    for (std::size_t r = 0; r < rows.size(); ++r) {
      std::copy_n(pooled.features.data() + rows[r] * width, width, e.features.data() + r * width);
      e.targets[r] = pooled.targets[rows[r]];
      if (!pooled.clean_labels.empty()) e.clean_labels.push_back(pooled.clean_labels[rows[r]]);
      if (!pooled.colors.empty()) e.colors.push_back(pooled.colors[rows[r]]);
    }
    out.envs.push_back(std::move(e));
  }
  return out;
}

SemErrors sem_errors(const methods::TrainedPredictor& p) {
  if (p.phi.size() != 1 || p.heads.empty() || p.arch.bias) {
    throw std::invalid_argument("sem_errors: needs a bias-free linear phi and head");
  }
  Eigen::MatrixXd c = Eigen::MatrixXd::Zero(p.phi[0].rows(), p.heads[0][0].cols());
  for (const auto& head : p.heads) c += oracle::to_eigen(p.phi[0]) * oracle::to_eigen(head[0]);
  c /= static_cast<double>(p.heads.size());
  const Eigen::Index n = c.cols();
  if (c.rows() != 2 * n) throw std::invalid_argument("sem_errors: expected two feature blocks of the target width");
  SemErrors e;
  e.causal = (c.topRows(n) - Eigen::MatrixXd::Identity(n, n)).squaredNorm() / static_cast<double>(n);
  e.noncausal = c.bottomRows(n).squaredNorm() / static_cast<double>(n);
  return e;
}

}  // namespace cirm::harness
