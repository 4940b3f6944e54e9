#include "cirm/rng.hpp"

#include <algorithm>
#include <numeric>

namespace cirm {

namespace {
// splitmix64 finaliser
std::uint64_t mix(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}
}  // namespace

std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> path) {
  std::uint64_t h = mix(base);
  for (auto tag : path) h = mix(h ^ mix(tag + 0x632be59bd9b4e019ULL));
  return h;
}

Tensor RandomStream::normal_tensor(const Shape& shape) {
  Tensor t(shape);
  for (double& v : t.values()) v = normal();
  return t;
}

Tensor RandomStream::dropout_mask(const Shape& shape, double drop) {
  Tensor t(shape, 1.0);
  if (drop <= 0.0) return t;
  const double keep_scale = 1.0 / (1.0 - drop);
  for (double& v : t.values()) v = uniform() < drop ? 0.0 : keep_scale;
  return t;
}

std::vector<std::size_t> RandomStream::permutation(std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::shuffle(idx.begin(), idx.end(), engine_);
  return idx;
}

}  // namespace cirm
