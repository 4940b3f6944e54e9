#pragma once

#include <span>
#include <vector>

#include "cirm/envgen.hpp"
#include "cirm/methods.hpp"
#include "cirm/rng.hpp"

namespace cirm::methods::detail {

enum StreamTag : std::uint64_t { kInit = 1, kShuffle, kMask, kEps, kHead, kConstraint, kEval };

using Envs = std::span<const env::EnvironmentData* const>;

struct EnvBatch {
  Tensor x;
  Tensor y;
};

/// Shuffled minibatch indices for every environment of a phase; environments
/// with fewer batches cycle through theirs.
class EpochPlan {
 public:
  EpochPlan(Envs envs, std::size_t batch_size, std::uint64_t seed, std::uint64_t phase, std::uint64_t epoch);
  std::size_t steps() const { return steps_; }
  EnvBatch batch(std::size_t env, std::size_t step) const;
  std::span<const std::size_t> indices(std::size_t env, std::size_t step) const;

 private:
  Envs envs_;
  std::vector<std::vector<std::vector<std::size_t>>> batches_;
  std::size_t steps_ = 0;
};

/// Inverted-dropout masks for the hidden layers of `arch`, one per layer.
std::vector<Tensor> dropout_masks(const nn::Architecture& arch, std::size_t rows, double drop, RandomStream& rng);

std::size_t total_size(Envs envs);

/// beta weight applied to the summed KL for a phase.
double kl_weight(const MethodConfig& cfg, std::size_t phase_samples);

std::vector<ad::Var> subset(std::span<const ad::Var> vars, std::span<const std::size_t> which);

}  // namespace cirm::methods::detail
