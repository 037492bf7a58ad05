#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "odrt/lattice.hpp"
#include "odrt/layers.hpp"
#include "odrt/schedule.hpp"

namespace odrt {

struct DiTConfig {
  int d_model = 64;
  int n_layers = 4;
  int n_heads = 4;
  int d_ff = 256;
  int horizon = 8;  // action tokens per chunk
  int action_dim = 2;
  int obs_dim = 4;
  int obs_tokens = 2;
  int diffusion_steps = 50;
  ScheduleKind schedule = ScheduleKind::Cosine;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  bool clip_sample = true;
  double clip_range = 1.0;

  void validate() const;
  int num_blocks() const { return 3 * n_layers; }
  int cond_tokens() const { return obs_tokens + 1; }
  ScheduleParams schedule_params() const;
  std::string canonical() const;
  bool operator==(const DiTConfig&) const = default;
};

std::uint64_t fnv1a64(std::string_view bytes);
std::uint64_t config_hash(const DiTConfig& cfg);

// Interleaved sin/cos at geometric frequencies: [sin(p w_0), cos(p w_0), ...],
// w_i = 10000^(-2i/dim).
Tensor sinusoidal_embed(int pos, int dim);

// Encoded (observation, timestep) pair: obs_tokens MLP tokens followed by one
// timestep token, plus learned positional encodings. [cond_tokens x d_model]
struct ConditionEmbedding {
  Tensor tokens;
  int k = 0;
};

struct BlockResidual {
  Tensor value;  // [horizon x d_model]
  LatticeCoord coord;
  BlockKind kind = BlockKind::SelfAttention;
};

struct DecoderLayerWeights {
  AttentionWeights self_attn;
  AttentionWeights cross_attn;
  FeedForwardWeights ffn;
};

struct PolicyWeights {
  Linear obs_in;
  Linear obs_out;
  Linear time_proj;
  Tensor cond_pos;  // [cond_tokens x d_model]
  Linear action_in;
  Tensor action_pos;  // [horizon x d_model]
  std::vector<DecoderLayerWeights> layers;
  LayerNormParams final_norm;
  Linear head;

  std::vector<NamedTensor> parameters() const;
};

struct DenseForward {
  Tensor eps_hat;
  Tensor input_embedding;
  Tensor final_hidden;
  std::vector<BlockResidual> residuals;
};

// Conditional diffusion transformer: observation/timestep encoder, L decoder
// layers of SA -> CA -> FFN residual blocks, noise-prediction head.
// Weights are read-only after construction; every method is a pure function
// of its inputs and the weights.
class DiTPolicy {
 public:
  DiTPolicy(const DiTConfig& cfg, Rng& init_rng);
  DiTPolicy(const DiTConfig& cfg, PolicyWeights weights);

  const DiTConfig& config() const { return cfg_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  const PolicyWeights& weights() const { return w_; }
  PolicyWeights& mutable_weights() { return w_; }
  std::vector<NamedTensor> parameters() const { return w_.parameters(); }
  std::size_t decoder_parameter_count() const;

  // Encoder over rows of (observation, timestep): obs_rows [rows x obs_dim].
  // Returns [rows*cond_tokens x d_model]; each row is computed independently.
  Tensor encode_rows(const Tensor& obs_rows, std::span<const int> timesteps) const;
  ConditionEmbedding encode_condition(std::span<const double> obs, int k) const;

  // actions [batch*horizon x action_dim] -> [batch*horizon x d_model]
  Tensor embed_actions(const Tensor& actions, std::size_t batch) const;
  // Residual of block b (1-based) for hidden h [batch*horizon x d_model].
  Tensor block_residual(int b, const Tensor& h, const Tensor& cond_tokens, std::size_t batch) const;
  Tensor predict_noise(const Tensor& h) const;

  DenseForward decoder_forward_dense(const Tensor& a_k, const ConditionEmbedding& cond, int k_lattice,
                                     int r = 1) const;
  // Batched noise prediction for training: a_k [batch*horizon x action_dim].
  Tensor forward_batch(const Tensor& a_k, const Tensor& cond_tokens, std::size_t batch) const;

 private:
  DiTConfig cfg_;
  NoiseSchedule schedule_;
  PolicyWeights w_;
};

struct DiffusionResult {
  Tensor action;  // [horizon x action_dim], normalized action space
  std::vector<BlockResidual> residual_log;
};

// Dense reference sampler: a^K ~ N(0, I) from `diffusion_rng`, then one
// decoder forward per planned step with no caching.
DiffusionResult diffuse_action(const DiTPolicy& policy, std::span<const double> obs,
                               const SamplerPlan& plan, const Rng& diffusion_rng, int r = 1,
                               bool keep_residuals = false);

}  // namespace odrt
