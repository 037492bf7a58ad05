#pragma once

#include <cstdint>

#include "odrt/tensor.hpp"

namespace odrt {

// Counter-based splittable generator: output i of a stream is a pure function
// of (key, i), and split(id) derives an independent stream key. Platform
// independent, so seeds reproduce bit-identical draws everywhere.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  Rng split(std::uint64_t stream) const;
  std::uint64_t key() const { return key_; }

  std::uint64_t next_u64();
  double uniform();  // [0, 1)
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  std::uint64_t below(std::uint64_t n);

  Tensor normal_tensor(Shape shape, double stddev = 1.0);

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

std::uint64_t mix64(std::uint64_t x);

}  // namespace odrt
