#include "training.hpp"

#include <algorithm>
#include <stdexcept>

namespace cirm::methods::detail {

EpochPlan::EpochPlan(Envs envs, std::size_t batch_size, std::uint64_t seed, std::uint64_t phase,
                     std::uint64_t epoch)
    : envs_(envs) {
  for (std::size_t e = 0; e < envs.size(); ++e) {
    envs[e]->require_access();
    const std::size_t n = envs[e]->size();
    if (n == 0) throw std::invalid_argument("environment " + std::to_string(e) + " has no samples");
    RandomStream rng(seed, {kShuffle, phase, epoch, e});
    const auto perm = rng.permutation(n);
    std::vector<std::vector<std::size_t>> chunks;
    for (std::size_t b = 0; b < n; b += batch_size) {
      chunks.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(b),
                          perm.begin() + static_cast<std::ptrdiff_t>(std::min(n, b + batch_size)));
    }
    steps_ = std::max(steps_, chunks.size());
    batches_.push_back(std::move(chunks));
  }
}

std::span<const std::size_t> EpochPlan::indices(std::size_t env, std::size_t step) const {
  const auto& chunks = batches_[env];
  return chunks[step % chunks.size()];
}

EnvBatch EpochPlan::batch(std::size_t env, std::size_t step) const {
  const auto idx = indices(env, step);
  return {envs_[env]->features.gather_rows(idx), envs_[env]->targets.gather_rows(idx)};
}

std::vector<Tensor> dropout_masks(const nn::Architecture& arch, std::size_t rows, double drop, RandomStream& rng) {
  std::vector<Tensor> masks;
  if (drop <= 0.0) return masks;
  for (std::size_t i = 0; i < arch.feature_layer_count(); ++i) {
    masks.push_back(rng.dropout_mask({rows, arch.widths[i + 1]}, drop));
  }
  return masks;
}

std::size_t total_size(Envs envs) {
  std::size_t n = 0;
  for (const auto* e : envs) n += e->size();
  return n;
}

double kl_weight(const MethodConfig& cfg, std::size_t phase_samples) {
  if (cfg.kl_scale == KlScale::Batch) return cfg.beta;
  return cfg.beta / static_cast<double>(std::max<std::size_t>(1, phase_samples));
}

std::vector<ad::Var> subset(std::span<const ad::Var> vars, std::span<const std::size_t> which) {
  std::vector<ad::Var> out;
  out.reserve(which.size());
  for (std::size_t i : which) out.push_back(vars[i]);
  return out;
}

}  // namespace cirm::methods::detail
