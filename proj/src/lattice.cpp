#include "odrt/lattice.hpp"

namespace odrt {

const char* block_kind_name(BlockKind kind) {
  switch (kind) {
    case BlockKind::SelfAttention: return "SA";
    case BlockKind::CrossAttention: return "CA";
    case BlockKind::FeedForward: return "FFN";
  }
  return "?";
}

std::string to_string(const LatticeCoord& c) {
  return "(b=" + std::to_string(c.b) + ", k=" + std::to_string(c.k) + ", r=" + std::to_string(c.r) + ")";
}

char choice_letter(BlockChoice c) {
  switch (c) {
    case BlockChoice::Compute: return 'C';
    case BlockChoice::Forward: return 'F';
    case BlockChoice::Timestep: return 'T';
    case BlockChoice::Rollout: return 'R';
  }
  return '?';
}

const char* direction_name(BlockChoice c) {
  switch (c) {
    case BlockChoice::Compute: return "compute";
    case BlockChoice::Forward: return "forward";
    case BlockChoice::Timestep: return "timestep";
    case BlockChoice::Rollout: return "rollout";
  }
  return "?";
}

}  // namespace odrt
