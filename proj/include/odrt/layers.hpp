#pragma once

#include <string>
#include <vector>

#include "odrt/rng.hpp"
#include "odrt/tensor.hpp"

namespace odrt {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct Linear {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out]

  static Linear init(std::size_t in, std::size_t out, Rng& rng, double stddev = 0.02);
  Tensor operator()(const Tensor& x) const;
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;
};

struct LayerNormParams {
  Tensor gain;
  Tensor bias;

  static LayerNormParams init(std::size_t width);
  Tensor operator()(const Tensor& x) const;
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;
};

inline constexpr double kLayerNormEps = 1e-5;

// Pre-norm attention residual: returns out_proj(MHA(q = LN(h), kv = ctx)).
// Self-attention passes an empty context and attends over LN(h) itself.
struct AttentionWeights {
  LayerNormParams norm;
  Linear query, key, value, out;

  static AttentionWeights init(std::size_t width, Rng& rng);
  Tensor residual(const Tensor& h, const Tensor& context, std::size_t heads, std::size_t batch) const;
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;
};

struct FeedForwardWeights {
  LayerNormParams norm;
  Linear up, down;

  static FeedForwardWeights init(std::size_t width, std::size_t hidden, Rng& rng);
  Tensor residual(const Tensor& h) const;
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;
};

// Repeats `block` (rows x d) `times` times along the row axis.
Tensor tile_rows(const Tensor& block, std::size_t times);

std::size_t count_parameters(const std::vector<NamedTensor>& params);

}  // namespace odrt
