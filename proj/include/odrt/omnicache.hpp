#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "odrt/checkpoint.hpp"
#include "odrt/dit_policy.hpp"
#include "odrt/flops.hpp"

namespace odrt {

struct CacheSlot {
  Tensor value;
  LatticeCoord source;

  bool populated() const { return value.defined(); }
};

// Three reuse buffers over the (b, k, r) lattice.
//   forward  : one slot per block kind, most recent residual of that kind in
//              the current forward pass (cleared by begin_forward)
//   timestep : one slot per block, most recent residual of block b in the
//              current rollout iteration
//   rollout  : one slot per (b, k), most recent residual ever computed there
// Every stored value is detached from any tape.
class OmniCache {
 public:
  OmniCache(int num_blocks, int steps);

  int num_blocks() const { return num_blocks_; }
  int steps() const { return steps_; }
  int iteration() const { return r_; }
  int current_k() const { return k_; }
  bool init_done() const { return init_done_; }

  // Clears the forward and timestep buffers, keeps the rollout buffer.
  void begin_rollout_iteration(int r);
  // Starts the forward at lattice step k; clears the forward buffer.
  void begin_forward(int k);
  void mark_init_done() { init_done_ = true; }

  const CacheSlot& forward_slot(BlockKind kind) const;
  const CacheSlot& timestep_slot(int b) const;
  const CacheSlot& rollout_slot(int b, int k) const;

  bool available(BlockChoice dir, int b, int k) const;
  // Cached value for a reuse at `anchor`. Throws CacheMiss when the slot is
  // empty and Contract when the stored source breaks the one-index rule.
  const Tensor& serve(BlockChoice dir, const LatticeCoord& anchor) const;
  // Refreshes all three directions with a freshly computed residual.
  void store(const Tensor& d, const LatticeCoord& coord);

  // populated flags of the rollout buffer, index (k-1)*B + (b-1)
  std::vector<std::uint8_t> rollout_snapshot() const;

  std::uint64_t serves() const { return serves_; }
  std::uint64_t stores() const { return stores_; }

 private:
  std::size_t cell(int b, int k) const;
  void check_block(int b) const;

  int num_blocks_;
  int steps_;
  int r_ = 0;
  int k_ = 0;
  bool init_done_ = false;
  std::array<CacheSlot, 3> forward_;
  std::vector<CacheSlot> timestep_;
  std::vector<CacheSlot> rollout_;
  mutable std::uint64_t serves_ = 0;
  std::uint64_t stores_ = 0;
};

// Residuals computed during one diffusion (or several), in compute order.
using ResidualLog = std::vector<BlockResidual>;

struct BlockUpdate {
  Tensor h;
  std::optional<BlockResidual> computed;
};

// One cell of the masked residual update. C computes the block and refreshes
// every direction; F/T/R add the cached value and touch no weights or buffers.
BlockUpdate sparse_block_update(const DiTPolicy& policy, const Tensor& h, const LatticeCoord& coord,
                                BlockChoice choice, OmniCache& cache, const ConditionEmbedding& cond);

struct SparseForward {
  Tensor eps_hat;
  FlopsTally flops;  // blocks computed + embedding/head
  int computed = 0;
};

// Decoder pass at lattice step k with mask_row[b-1] choosing each block.
// Until the cache has seen its initialization forward in this iteration,
// F and T entries are cache misses.
SparseForward sparse_forward(const DiTPolicy& policy, const Tensor& a_k, const ConditionEmbedding& cond,
                             std::span<const BlockChoice> mask_row, OmniCache& cache, int k,
                             ResidualLog* log = nullptr);

// Served reuse values, recorded once and replayed so that finite-difference
// runs see the same cache contents as the run being differentiated.
struct ServeTrace {
  enum class Mode { Off, Record, Replay };
  Mode mode = Mode::Off;
  std::vector<std::array<Tensor, 3>> served;  // F, T, R per gated cell
  std::vector<BlockChoice> choices;
  std::size_t cursor = 0;
};

// Training-time pass. Every cell computes d_new; cells listed in `gated`
// go through the pass-through gate against the cached candidates using the
// confidence row `prob_rows[b-1]` of `probs`. Cache refresh follows the
// discrete choice, storing detached values.
struct GatedRow {
  std::span<const BlockChoice> choices;
  std::span<const std::uint8_t> gated;  // per block: 0 = ungated (forced compute)
  std::size_t first_prob_row = 0;
};

Tensor gated_sparse_forward(const DiTPolicy& policy, const Tensor& a_k, const ConditionEmbedding& cond,
                            const GatedRow& row, const Tensor& probs, OmniCache& cache, int k, bool soft,
                            ServeTrace* trace = nullptr);

// Cosine similarity of residuals at matching (b, k): returns [B x K] with
// entry (b-1, k-1). Both logs must cover the same cells with equal shapes.
Tensor rollout_feature_similarity(const ResidualLog& a, const ResidualLog& b, int num_blocks, int steps);

// Blob names "r{r}/k{k}/b{b}/{SA|CA|FFN}".
Section residual_log_section(const ResidualLog& log);
ResidualLog residual_log_from_section(const Section& section);

}  // namespace odrt
