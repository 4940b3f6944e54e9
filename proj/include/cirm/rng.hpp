#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

#include "cirm/tensor.hpp"

namespace cirm {

/// Seed for an independent stream identified by a base seed and a path of tags
/// (environment index, sample index, ...). Equal paths give equal streams, so
/// work can be split across threads without changing results.
std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> path);

class RandomStream {
 public:
  explicit RandomStream(std::uint64_t seed) : engine_(seed) {}
  RandomStream(std::uint64_t base, std::initializer_list<std::uint64_t> path)
      : engine_(derive_seed(base, path)) {}

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double normal() { return normal_(engine_); }
  bool bernoulli(double p) { return uniform() < p; }
  std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_); }
  std::uint64_t next() { return engine_(); }

  Tensor normal_tensor(const Shape& shape);
  /// Inverted-dropout keep mask: 0 with probability `drop`, else 1 / (1 - drop).
  Tensor dropout_mask(const Shape& shape, double drop);
  std::vector<std::size_t> permutation(std::size_t n);

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace cirm
