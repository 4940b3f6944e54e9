#include <gtest/gtest.h>

#include <algorithm>

#include "cirm/harness.hpp"

using namespace cirm;
using namespace cirm::harness;

namespace {

ExperimentPlan small_plan(std::size_t n_envs = 2) {
  ExperimentPlan p;
  p.name = "small";
  p.dataset.fallback_size = 1500;
  p.n_envs = n_envs;
  p.p_c = env::default_p_c_schedule(n_envs);
  p.samples_per_env = 120;
  p.test_samples = 200;
  p.hidden = 8;
  p.repetitions = 2;
  auto m = methods::default_config(methods::Method::Erm);
  m.epochs = 2;
  m.batch_size = 64;
  p.methods = {m};
  return p;
}

std::vector<MetricsRecord> without_time(std::vector<MetricsRecord> r) {
  for (auto& x : r) x.wall_time_ms = 0.0;
  return r;
}

MetricsRecord rec(const std::string& method, double v) {
  MetricsRecord r;
  r.experiment = "x";
  r.method = method;
  r.metric = "accuracy";
  r.value = v;
  return r;
}

// Keeps every environment it sees and retrains on all of them.
class HoardingLearner : public methods::Learner {
 public:
  HoardingLearner(const methods::MethodConfig& cfg, const nn::Architecture& arch)
      : Learner(cfg), inner_(methods::make_learner(cfg, arch)) {}
  methods::TrainedPredictor predictor() const override { return inner_->predictor(); }

 protected:
  void fit(std::span<const env::EnvironmentData* const> envs) override {
    for (const auto* e : envs) kept_.push_back(*e);
    std::vector<const env::EnvironmentData*> all;
    for (const auto& e : kept_) all.push_back(&e);
    inner_->train(all);
  }

 private:
  std::unique_ptr<methods::Learner> inner_;
  std::vector<env::EnvironmentData> kept_;
};

class PeekingLearner : public methods::Learner {
 public:
  PeekingLearner(const methods::MethodConfig& cfg, const nn::Architecture& arch, const env::EnvironmentData& test)
      : Learner(cfg), inner_(methods::make_learner(cfg, arch)), test_(test) {}
  methods::TrainedPredictor predictor() const override { return inner_->predictor(); }

 protected:
  void fit(std::span<const env::EnvironmentData* const>) override { inner_->train(test_); }

 private:
  std::unique_ptr<methods::Learner> inner_;
  const env::EnvironmentData& test_;
};

class FailingLearner : public methods::Learner {
 public:
  FailingLearner(const methods::MethodConfig& cfg, const nn::Architecture& arch)
      : Learner(cfg), inner_(methods::make_learner(cfg, arch)) {}
  methods::TrainedPredictor predictor() const override { return inner_->predictor(); }

 protected:
  void fit(std::span<const env::EnvironmentData* const> envs) override {
    if (phases_ == 1) throw std::runtime_error("diverged");
    inner_->train(envs);
  }

 private:
  std::unique_ptr<methods::Learner> inner_;
};

}  // namespace

TEST(Plan, ValidationNamesField) {
  auto p = small_plan();
  p.p_c = {0.2};
  try {
    p.validate();
    FAIL();
  } catch (const methods::ConfigError& e) {
    EXPECT_EQ(e.path(), "p_c");
  }
  p = small_plan();
  p.repetitions = 0;
  EXPECT_THROW(p.validate(), methods::ConfigError);
  p = small_plan();
  p.methods[0].lr = -1.0;
  try {
    p.validate();
    FAIL();
  } catch (const methods::ConfigError& e) {
    EXPECT_EQ(e.path(), "methods[0].lr");
  }
  p = small_plan();
  p.dataset.kind = DatasetKind::Sem;
  EXPECT_THROW(p.validate(), methods::ConfigError);
  EXPECT_EQ(small_plan().run_seeds(), (std::vector<std::uint64_t>{0, 1}));
}

TEST(Aggregate, MeanAndSampleStd) {
  const auto rows = aggregate({rec("erm", 0.2), rec("erm", 0.4)});
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_NEAR(rows[0].mean, 0.3, 1e-15);
  EXPECT_NEAR(rows[0].stddev, 0.1414213562373095, 1e-12);
  EXPECT_FALSE(rows[0].single);
}

TEST(Aggregate, SingleRecordIsFlagged) {
  const auto rows = aggregate({rec("erm", 0.7)});
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].stddev, 0.0);
  EXPECT_TRUE(rows[0].single);
}

TEST(Aggregate, IdenticalRecordsHaveZeroSpread) {
  std::vector<MetricsRecord> r(5, rec("vcl", 0.5));
  const auto rows = aggregate(r);
  EXPECT_EQ(rows[0].mean, 0.5);
  EXPECT_EQ(rows[0].stddev, 0.0);
  EXPECT_EQ(rows[0].count, 5u);
  EXPECT_THROW(aggregate({}), std::invalid_argument);
}

TEST(Aggregate, GroupsByMethod) {
  const auto rows = aggregate({rec("erm", 0.1), rec("vcl", 0.3), rec("erm", 0.3)});
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].method, "erm");
  EXPECT_NEAR(rows[0].mean, 0.2, 1e-15);
  EXPECT_EQ(rows[1].count, 1u);
}

TEST(Report, CellFormat) {
  EXPECT_EQ(format_cell(0.46, 0.021), "46.0 (2.1)");
  EXPECT_EQ(format_cell(0.1234, 0.0), "12.3 (0.0)");
}

TEST(Sequence, DeterministicPerSeed) {
  const Experiment exp(small_plan());
  EXPECT_TRUE(exp.uses_fallback());
  const auto a = run_sequence(exp, exp.plan().methods[0], 3);
  const auto b = run_sequence(exp, exp.plan().methods[0], 3);
  EXPECT_EQ(without_time(a), without_time(b));
  ASSERT_EQ(a.size(), 4u);
  EXPECT_EQ(a[0].phase, Phase::Train);
  EXPECT_EQ(a[1].phase, Phase::Test);
  EXPECT_EQ(a[3].env_index, 1u);
  for (const auto& r : a) {
    EXPECT_GE(r.value, 0.0);
    EXPECT_LE(r.value, 1.0);
  }
  const auto c = run_sequence(exp, exp.plan().methods[0], 4);
  EXPECT_NE(without_time(a), without_time(c));
}

TEST(Sequence, SingleEnvironmentMatchesOfflineTraining) {
  auto plan = small_plan(1);
  const Experiment seq(plan);
  plan.sequential = false;
  const Experiment off(plan);
  const auto a = run_sequence(seq, plan.methods[0], 1);
  const auto b = run_sequence(off, plan.methods[0], 1);
  EXPECT_EQ(without_time(a), without_time(b));

  methods::MethodConfig cfg = plan.methods[0];
  cfg.seed = derive_seed(1, {plan.methods[0].seed});
  auto learner = methods::make_learner(cfg, seq.architecture(cfg));
  learner->train(seq.train_env(0, 1));
  EXPECT_EQ(nn::accuracy(learner->logits(seq.test_env().features), seq.test_env().targets), a[1].value);
}

TEST(Sequence, TestEnvironmentIsTainted) {
  const Experiment exp(small_plan());
  EXPECT_TRUE(exp.test_env().test_only);
  const LearnerFactory peek = [&](const methods::MethodConfig& c, const nn::Architecture& a) {
    return std::make_unique<PeekingLearner>(c, a, exp.test_env());
  };
  EXPECT_THROW(run_sequence(exp, exp.plan().methods[0], 0, peek), methods::TaintError);
}

TEST(Sequence, RetainedDataFailsIsolationAudit) {
  const Experiment exp(small_plan());
  const LearnerFactory hoard = [](const methods::MethodConfig& c, const nn::Architecture& a) {
    return std::make_unique<HoardingLearner>(c, a);
  };
  try {
    run_sequence(exp, exp.plan().methods[0], 0, hoard);
    FAIL();
  } catch (const env::IsolationError& e) {
    EXPECT_NE(std::string(e.what()).find("environment 1"), std::string::npos);
  }
}

TEST(Sequence, MethodFailureCarriesEnvironmentIndex) {
  const Experiment exp(small_plan());
  const LearnerFactory failing = [](const methods::MethodConfig& c, const nn::Architecture& a) {
    return std::make_unique<FailingLearner>(c, a);
  };
  try {
    run_sequence(exp, exp.plan().methods[0], 0, failing);
    FAIL();
  } catch (const PhaseError& e) {
    EXPECT_EQ(e.env_index(), 1u);
  }
}

TEST(Sequence, ParallelRunsMatchSerial) {
  auto plan = small_plan();
  auto vcl = methods::default_config(methods::Method::Vcl);
  vcl.epochs = 1;
  vcl.batch_size = 64;
  vcl.n_mc = 1;
  plan.methods.push_back(vcl);
  const Experiment exp(plan);
  std::vector<MetricsRecord> serial;
  std::vector<MetricsRecord> parallel;
  run_plan(exp, 1, [&](const auto& r) { serial.insert(serial.end(), r.begin(), r.end()); });
  run_plan(exp, 3, [&](const auto& r) { parallel.insert(parallel.end(), r.begin(), r.end()); });
  const auto key = [](const MetricsRecord& a, const MetricsRecord& b) {
    return std::tie(a.method, a.seed, a.env_index, a.phase, a.metric) <
           std::tie(b.method, b.seed, b.env_index, b.phase, b.metric);
  };
  serial = without_time(serial);
  parallel = without_time(parallel);
  std::sort(serial.begin(), serial.end(), key);
  std::sort(parallel.begin(), parallel.end(), key);
  EXPECT_EQ(serial.size(), 16u);
  EXPECT_EQ(serial, parallel);
}

TEST(Sem, CoefficientErrors) {
  methods::TrainedPredictor p;
  p.arch = nn::linear_regression(4, 2);
  p.phi = {Tensor::matrix(4, 4, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1})};
  p.heads = {{Tensor::matrix(4, 2, {1, 0, 0, 1, 0, 0, 0, 0})}};
  auto e = sem_errors(p);
  EXPECT_EQ(e.causal, 0.0);
  EXPECT_EQ(e.noncausal, 0.0);
  p.heads = {{Tensor::matrix(4, 2, {1, 0, 0, 0.5, 1, 0, 0, 0})}};
  e = sem_errors(p);
  EXPECT_NEAR(e.causal, 0.125, 1e-15);
  EXPECT_NEAR(e.noncausal, 0.5, 1e-15);
}

TEST(Sem, PlanRecordsCoefficientErrors) {
  ExperimentPlan p;
  p.name = "sem";
  p.dataset.kind = DatasetKind::Sem;
  p.sigma_e = {0.1, 1.5};
  p.sequential = false;
  p.samples_per_env = 200;
  p.repetitions = 1;
  auto m = methods::default_config(methods::Method::Erm);
  m.dropout = 0.0;
  m.epochs = 2;
  p.methods = {m};
  const Experiment exp(p);
  const auto r = run_sequence(exp, m, 0);
  ASSERT_EQ(r.size(), 4u);
  EXPECT_EQ(r[0].metric, "mse");
  EXPECT_EQ(r[2].metric, "causal_error");
  EXPECT_EQ(r[3].metric, "noncausal_error");
}
