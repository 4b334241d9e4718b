#pragma once

#include <cstdint>
#include <random>

#include "recttt/common.hpp"
#include "recttt/tensor.hpp"

namespace recttt {

// Seeded deterministic PRNG.
//
// Engine: std::mt19937_64, whose output sequence is fully specified by the
// C++ standard, seeded through one SplitMix64 scramble of the user seed.
// Distributions are implemented here rather than with <random> distribution
// classes (whose output is implementation-defined):
//   - uniform doubles take the top 53 bits of one engine output,
//   - normals use the Box-Muller transform with a cached spare.
// The same seed therefore yields the same sequence on every platform.
// Independent substreams come from split(), which scrambles (seed, stream)
// into a fresh seed; the split rule is part of the reproducibility contract.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(splitmix64(seed)) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  float uniform(float lo, float hi) {
    if (lo > hi) throw ShapeError("uniform: lo > hi");
    return static_cast<float>(lo + (static_cast<double>(hi) - lo) * uniform());
  }

  // Integer in [lo, hi], inclusive. Uses rejection-free modulo of a 64-bit
  // draw; bias is negligible for the small ranges used here and the result
  // is platform-stable.
  int uniform_int(int lo, int hi) {
    if (lo > hi) throw ShapeError("uniform_int: lo > hi");
    const std::uint64_t span = static_cast<std::uint64_t>(hi) - lo + 1;
    return lo + static_cast<int>(next_u64() % span);
  }

  float normal(float mean, float std) {
    if (std < 0.0f) throw ShapeError("normal: negative std");
    if (std == 0.0f) return mean;
    if (have_spare_) {
      have_spare_ = false;
      return static_cast<float>(mean + std * spare_);
    }
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.141592653589793238462643383279502884 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return static_cast<float>(mean + std * r * std::cos(theta));
  }

  Tensor normal_tensor(std::vector<int> shape, float mean, float std) {
    Tensor t(std::move(shape));
    for (float& v : t.data) v = normal(mean, std);
    return t;
  }

  Tensor uniform_tensor(std::vector<int> shape, float lo, float hi) {
    Tensor t(std::move(shape));
    for (float& v : t.data) v = uniform(lo, hi);
    return t;
  }

  // Derives an independent deterministic substream, e.g. one per data split
  // or per evaluation scenario.
  Rng split(std::uint64_t stream) const {
    return Rng(splitmix64(splitmix64(seed_) + 0x9e3779b97f4a7c15ull * (stream + 1)));
  }

  static std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace recttt
