#pragma once

#include <cstdint>
#include <string>

namespace odrt {

// Residual blocks are ordered SA, CA, FFN inside every layer; b is 1-based.
enum class BlockKind : std::uint8_t { SelfAttention = 0, CrossAttention = 1, FeedForward = 2 };

constexpr BlockKind kind_of_block(int b) { return static_cast<BlockKind>((b - 1) % 3); }
constexpr int layer_of_block(int b) { return (b - 1) / 3; }
const char* block_kind_name(BlockKind kind);

// Position of a residual in the (block, denoising step, rollout iteration)
// lattice. All three indices are 1-based.
struct LatticeCoord {
  int b = 0;
  int k = 0;
  int r = 0;

  bool operator==(const LatticeCoord&) const = default;
};

std::string to_string(const LatticeCoord& c);

// Per-cell gate outcome: compute, or reuse along the forward (block) axis,
// the timestep axis, or the rollout axis.
enum class BlockChoice : std::uint8_t { Compute = 0, Forward = 1, Timestep = 2, Rollout = 3 };

char choice_letter(BlockChoice c);
const char* direction_name(BlockChoice c);

}  // namespace odrt
