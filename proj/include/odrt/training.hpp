#pragma once

#include <functional>
#include <string>
#include <vector>

#include "odrt/agents.hpp"
#include "odrt/env.hpp"
#include "odrt/pipeline.hpp"

namespace odrt {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled
};

class Adam {
 public:
  Adam(std::vector<NamedTensor> params, const AdamConfig& cfg);

  void zero_grad();
  // Global L2 norm of the current gradients.
  double grad_norm() const;
  // Rescales gradients so their global norm is at most max_norm.
  void clip_grad_norm(double max_norm);
  void step(double lr_scale = 1.0);
  const std::vector<NamedTensor>& params() const { return params_; }

 private:
  std::vector<NamedTensor> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

// Supervised pairs (observation, normalized action chunk).
struct DemoSet {
  std::vector<std::vector<double>> obs;
  std::vector<Tensor> actions;  // [horizon x action_dim]

  std::size_t size() const { return obs.size(); }
};

// Expert episodes re-planned at every env step so each visited state
// contributes one pair. Episodes continue for settle_steps after the first
// success so states around the goal are covered too.
std::vector<TrajectoryRecord> record_expert_demos(const EnvConfig& env, int horizon, int episodes,
                                                  std::uint64_t seed, int settle_steps = 16);
DemoSet demos_from_records(const std::vector<TrajectoryRecord>& records);

struct DenseTrainConfig {
  int epochs = 30;
  double lr = 1e-3;
  int batch = 32;
  int demo_episodes = 100;
  std::uint64_t seed = 0;
  double grad_clip = 1.0;
};

struct DenseTrainReport {
  std::vector<double> epoch_loss;
  int steps = 0;
};

using ProgressFn = std::function<void(const std::string&)>;

// Noise-prediction training: random k and eps per sample, MSE(eps_hat, eps).
// Cosine learning-rate decay over the run.
DenseTrainReport train_dense_policy(DiTPolicy& policy, const DemoSet& demos, const DenseTrainConfig& cfg,
                                    const ProgressFn& progress = {});

struct PrunerTrainConfig {
  double rho = 0.95;
  int epochs = 30;
  double lr = 3e-3;
  double weight_decay = 1e-4;
  int trajectories = 2;
  DirectionSet directions;
  bool per_step_backprop = false;  // backprop after every denoising step
  std::uint64_t seed = 0;

  void validate() const;
};

struct PrunerTrainLogRow {
  int epoch = 0;
  int trajectory = 0;
  int r = 0;
  double l_f = 0.0;
  double l_s = 0.0;
  double loss = 0.0;
  double p_c_mean = 0.0;
  double grad_norm = 0.0;
  double sparsity = 0.0;
};

struct PrunerTrainReport {
  std::vector<PrunerTrainLogRow> log;
  std::string csv() const;  // epoch,trajectory,r,L_f,L_s,L,p_c_mean,grad_norm,sparsity
};

// Output of one gated (STE) diffusion at the cache's current iteration.
struct GatedDiffusion {
  Tensor action;
  Tensor confidences;
  MaskPlan plan;
};

// Training-time sparse diffusion: batched pruning with gradients, gated
// residual updates, caches refreshed with detached values.
GatedDiffusion gated_diffusion(const DiTPolicy& policy, const Pruner& pruner, std::span<const double> obs,
                               OmniCache& cache, const SamplerPlan& plan, const Rng& diffusion_rng,
                               const DirectionSet& dirs, bool soft, ServeTrace* trace = nullptr);

// L = mean squared (a_hat - a_ref) + | mean p_C - (1 - rho) |
struct PrunerLoss {
  Tensor total;
  Tensor fidelity;
  Tensor sparsity;
};
PrunerLoss pruner_loss(const GatedDiffusion& out, const Tensor& reference, double rho);

// Trains `pruner` by replaying reference trajectories recorded from the
// dense policy. The policy is read-only.
PrunerTrainReport train_pruner(const DiTPolicy& policy, Pruner& pruner, const std::vector<TrajectoryRecord>& dref,
                               const PrunerTrainConfig& cfg, const SamplerPlan& plan,
                               const ProgressFn& progress = {});

struct VariantMetrics {
  std::string directions;
  double success_rate = -1.0;  // -1 when no live episodes were run
  double sparsity = 0.0;
  double flops_ratio = 0.0;
  double decoder_flops_ratio = 0.0;
  double replay_fidelity = 0.0;  // mean L_f over held-out replays
  int diffusions = 0;
};

struct VariantEvalConfig {
  int episodes = 0;  // live episodes for success rate
  std::uint64_t seed = 0;
  EnvConfig env;
  PipelineMode mode = PipelineMode::Sequential;
};

// Replays held-out records and, optionally, runs live episodes with the
// pruner restricted to `dirs`.
VariantMetrics evaluate_variant(const DiTPolicy& policy, const Pruner& pruner, const DirectionSet& dirs,
                                const std::vector<TrajectoryRecord>& held_out, const SamplerPlan& plan,
                                const VariantEvalConfig& cfg);

// Success rate of live episodes for any agent.
std::vector<TrajectoryRecord> run_episodes(Agent& agent, const EnvConfig& env, int horizon, int episodes,
                                           std::uint64_t seed, bool as_reference = false,
                                           const std::string& config_hash = {});

}  // namespace odrt
