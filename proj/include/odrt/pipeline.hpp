#pragma once

#include <chrono>
#include <condition_variable>
#include <functional>
#include <future>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "odrt/omnicache.hpp"
#include "odrt/pruner.hpp"

namespace odrt {

enum class PipelineMode { Sequential, Async };
const char* mode_name(PipelineMode m);
PipelineMode parse_mode(const std::string& s);

// Condition embeddings for every step of one diffusion; row i belongs to
// plan step i (timestep plan.timesteps[i]).
struct ConditionBuffer {
  Tensor tokens;  // [steps*cond_tokens x d_model]
  std::vector<int> timesteps;
  int cond_tokens = 0;

  std::size_t size() const { return timesteps.size(); }
  ConditionEmbedding row(std::size_t i) const;
};

// One encoder pass over all steps of `plan` (the observation is repeated
// along the batch axis).
ConditionBuffer encode_condition_batch(const DiTPolicy& policy, std::span<const double> obs, const SamplerPlan& plan);

// One pruner pass over every row of the buffer, then discretization.
MaskPlan prune_batched(const Pruner& pruner, const ConditionBuffer& cond, int r, const DirectionSet& dirs,
                       std::span<const std::uint8_t> rollout_populated);

// Single-writer handoff of one MaskPlan. wait() blocks until publish().
class MaskBuffer {
 public:
  MaskBuffer();
  void publish(MaskPlan plan);
  void fail(std::exception_ptr error);
  bool ready() const;
  const MaskPlan& wait() const;

 private:
  std::promise<std::shared_ptr<const MaskPlan>> promise_;
  std::shared_future<std::shared_ptr<const MaskPlan>> future_;
  std::once_flag once_;
};

enum class PipelineEvent : std::uint8_t {
  EncodeDone,
  PruneBegin,
  MaskPublished,
  DecodeStep,
  MaskObserved,
  MaskRowRead,
};
const char* event_name(PipelineEvent e);

// Thread-safe ordering log; `k` is the lattice step for decoder events.
class OrderingLog {
 public:
  struct Entry {
    PipelineEvent event;
    int k;
  };
  void push(PipelineEvent e, int k = 0);
  std::vector<Entry> entries() const;
  void clear();

 private:
  mutable std::mutex mu_;
  std::vector<Entry> entries_;
};

// Worker thread hosting pruner tasks for async diffusions.
class PrunerWorker {
 public:
  PrunerWorker();
  ~PrunerWorker();
  PrunerWorker(const PrunerWorker&) = delete;
  PrunerWorker& operator=(const PrunerWorker&) = delete;

  std::future<void> submit(std::function<void()> task);

 private:
  void run();

  std::mutex mu_;
  std::condition_variable cv_;
  std::vector<std::packaged_task<void()>> queue_;
  bool stop_ = false;
  std::thread thread_;
};

struct LatencyRecord {
  double t_encode_us = 0.0;
  double t_prune_us = 0.0;
  std::vector<double> t_decode_us;  // per plan step, waits included
  double t_mask_wait_us = 0.0;
  double t_total_us = 0.0;

  double decode_total_us() const;
  // Pruner time that did not extend the end-to-end duration.
  double overlap_hidden_us() const;
};

struct SparseDiffusionOptions {
  PipelineMode mode = PipelineMode::Sequential;
  DirectionSet directions;
  bool all_compute = false;  // override every mask row with C
  std::chrono::microseconds pruner_delay{0};
  PrunerWorker* worker = nullptr;  // async mode spawns a thread when null
  OrderingLog* ordering = nullptr;
  ResidualLog* residuals = nullptr;
};

struct SparseDiffusionStats {
  MaskPlan plan;
  FlopsTally flops;
  LatencyRecord latency;
  int encoder_invocations = 0;
  int pruner_invocations = 0;
};

struct SparseDiffusion {
  Tensor action;
  SparseDiffusionStats stats;
};

// Sparse diffusion at the cache's current rollout iteration. Sequential mode
// encodes, prunes, then decodes. Async mode runs the pruner on a second task
// while the decoder performs the k = K step, which needs no mask; the decoder
// blocks on the mask buffer before reading any row with k < K.
SparseDiffusion diffuse_sparse(const DiTPolicy& policy, const Pruner* pruner, std::span<const double> obs,
                               OmniCache& cache, const SamplerPlan& plan, const Rng& diffusion_rng,
                               const SparseDiffusionOptions& options = {});

struct LatencyReport {
  std::string mode;
  std::uint64_t seed = 0;
  double sparsity = 0.0;
  std::uint64_t flops_dense = 0;
  std::uint64_t flops_sparse = 0;
  LatencyRecord latency;
};

// key=value lines: mode, seed, sparsity, flops_dense, flops_sparse,
// flops_ratio, t_encode_us, t_prune_us, t_decode_us (comma list),
// t_mask_wait_us, t_overlap_hidden_us, t_total_us.
std::string report_latency(const LatencyReport& report);

}  // namespace odrt
