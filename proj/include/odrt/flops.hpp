#pragma once

#include <cstdint>

#include "odrt/dit_policy.hpp"

namespace odrt {

// Analytic FLOPs: every matrix product contributes 2 * (multiply-adds).
// Elementwise work (norms, activations, softmax) is not counted.
struct FlopsModel {
  std::uint64_t sa = 0;           // one SA block, one forward
  std::uint64_t ca = 0;           // one CA block
  std::uint64_t ffn = 0;          // one FFN block
  std::uint64_t embed_head = 0;   // action embedding + noise head per forward
  std::uint64_t encoder_row = 0;  // condition encoder for one (o, k) row

  static FlopsModel from(const DiTConfig& cfg);

  std::uint64_t block(BlockKind kind) const;
  std::uint64_t block(int b) const { return block(kind_of_block(b)); }
  std::uint64_t decoder_step_dense(int num_blocks) const;
};

inline constexpr std::uint64_t matmul_flops(std::uint64_t m, std::uint64_t k, std::uint64_t n) {
  return 2 * m * k * n;
}

// Per-diffusion FLOPs, split by phase.
struct FlopsTally {
  std::uint64_t encoder = 0;
  std::uint64_t pruner = 0;
  std::uint64_t blocks = 0;
  std::uint64_t embed_head = 0;

  std::uint64_t decoder() const { return blocks + embed_head; }
  std::uint64_t total() const { return encoder + pruner + decoder(); }
  FlopsTally& operator+=(const FlopsTally& o);
  bool operator==(const FlopsTally&) const = default;
};

// Dense reference: encoder once per step plus every block at every step.
FlopsTally dense_diffusion_flops(const DiTConfig& cfg, int steps);

}  // namespace odrt
