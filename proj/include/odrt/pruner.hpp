#pragma once

#include <array>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "odrt/checkpoint.hpp"
#include "odrt/dit_policy.hpp"
#include "odrt/flops.hpp"

namespace odrt {

// Reuse directions a pruner may choose besides compute.
struct DirectionSet {
  bool forward = true;
  bool timestep = true;
  bool rollout = true;

  static DirectionSet all() { return {}; }
  // "FTR", "T", "F,R", ... ; an empty set is a config error.
  static DirectionSet parse(const std::string& text);
  std::string str() const;
  bool allows(BlockChoice c) const;
  bool operator==(const DirectionSet&) const = default;
};

struct PrunerConfig {
  int width = 32;
  int heads = 4;
  int ffn_hidden = 32;
  double compute_bias = 1.0;  // initial logit offset of the compute branch

  void validate(const DiTConfig& policy) const;
  bool operator==(const PrunerConfig&) const = default;
};

// Row b (0-based) is sinusoidal_embed(b, width).
Tensor block_queries(int num_blocks, int width);

struct PrunerWeights {
  Linear cond_proj;  // d_model -> width
  AttentionWeights self_attn;
  AttentionWeights cross_attn;
  FeedForwardWeights ffn;
  Linear head;  // width -> 4 logits (C, F, T, R)

  std::vector<NamedTensor> parameters() const;
};

struct PrunerFlops {
  std::uint64_t per_pass = 0;  // query-side work shared by every row
  std::uint64_t per_row = 0;

  std::uint64_t pass(std::size_t rows) const { return per_pass + rows * per_row; }
};

// One decoder block over fixed block queries, cross-attending to condition
// tokens from the policy's encoder.
class Pruner {
 public:
  Pruner(const PrunerConfig& cfg, const DiTConfig& policy_cfg, Rng& init_rng);

  const PrunerConfig& config() const { return cfg_; }
  const DiTConfig& policy_config() const { return policy_cfg_; }
  const PrunerWeights& weights() const { return w_; }
  PrunerWeights& mutable_weights() { return w_; }
  std::vector<NamedTensor> parameters() const { return w_.parameters(); }
  std::size_t parameter_count() const;
  PrunerFlops flops() const;

  // cond_tokens [rows*cond_tokens x d_model] -> logits [rows*B x 4].
  Tensor logits(const Tensor& cond_tokens, std::size_t rows) const;
  // Masked softmax of logits; `enabled` is [rows*B x 4].
  Tensor confidences(const Tensor& cond_tokens, std::size_t rows, std::span<const std::uint8_t> enabled) const;

 private:
  PrunerConfig cfg_;
  DiTConfig policy_cfg_;
  PrunerWeights w_;
  Tensor queries_;
};

// Direction availability for every cell of one diffusion, rows in plan-step
// order: row i covers lattice step k = K - i, entry (i*B + b-1)*4 + choice.
//   C  always
//   F  b > 3 (a same-kind block precedes it) and k < K
//   T  k < K
//   R  k < K and the rollout slot (b, k) was populated when the iteration began
// The k = K row allows only C.
std::vector<std::uint8_t> availability(int num_blocks, int steps, int r, const DirectionSet& dirs,
                                       std::span<const std::uint8_t> rollout_populated);

// Confidences of one (b, k) cell over (C, F, T, R).
using GatingVector = std::array<double, 4>;

// argmax with tie priority C > F > T > R over enabled entries; `forced`
// overrides the result.
BlockChoice discretize(const GatingVector& p, std::optional<BlockChoice> forced = std::nullopt,
                       const std::array<std::uint8_t, 4>& enabled = {1, 1, 1, 1});

struct MaskPlan {
  int num_blocks = 0;
  int steps = 0;
  int r = 0;
  Tensor confidences;  // [steps*B x 4], plan-step order (see availability)
  std::vector<std::uint8_t> enabled;
  std::vector<BlockChoice> choices;
  std::vector<std::uint8_t> forced;

  std::size_t cell(int b, int k) const;
  BlockChoice choice(int b, int k) const { return choices[cell(b, k)]; }
  GatingVector probs(int b, int k) const;
  bool is_forced(int b, int k) const { return forced[cell(b, k)] != 0; }
  std::span<const BlockChoice> row(int k) const;
  std::span<const std::uint8_t> forced_row(int k) const;
  int compute_count() const;
  double sparsity() const;
};

// Discretizes confidences row by row. The k = K row is forced to C. A cell
// whose argmax is F with no computed same-kind block earlier in its row falls
// back to the best remaining enabled direction and is marked forced.
MaskPlan discretize_plan(const Tensor& confidences, std::vector<std::uint8_t> enabled, int num_blocks, int steps,
                         int r);

// Every cell C; used for dense runs and as the k = K row.
MaskPlan dense_plan(int num_blocks, int steps, int r);

// Single-observation pass for one condition embedding: [B x 4] confidences.
Tensor prune_single(const Pruner& pruner, const ConditionEmbedding& cond, std::span<const std::uint8_t> enabled);

// | mean_c p_C - (1 - rho) | over every row of `confidences`.
Tensor sparsity_loss(const Tensor& confidences, double rho);
Tensor sparsity_loss(const MaskPlan& plan, double rho);

Section pruner_section(const Pruner& pruner);
void load_pruner_weights(const Section& section, Pruner& pruner);
// Pruner hyperparameters travel in envelope metadata under "pruner.*".
void write_pruner_metadata(const PrunerConfig& cfg, std::map<std::string, std::string>& metadata);
PrunerConfig read_pruner_metadata(const std::map<std::string, std::string>& metadata);

}  // namespace odrt
