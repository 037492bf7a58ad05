#pragma once

#include <memory>
#include <optional>

#include "odrt/env.hpp"
#include "odrt/pipeline.hpp"

namespace odrt {

// Scripted demonstrator; reads the privileged goal.
class ExpertAgent : public Agent {
 public:
  ExpertAgent(const EnvConfig& env, int horizon) : env_(env), horizon_(horizon) {}
  void begin_episode(std::uint64_t) override {}
  PolicyStep act(const Observation& obs, int r) override;

 private:
  EnvConfig env_;
  int horizon_;
};

class ZeroAgent : public Agent {
 public:
  explicit ZeroAgent(int horizon) : horizon_(horizon) {}
  void begin_episode(std::uint64_t) override {}
  PolicyStep act(const Observation&, int) override;

 private:
  int horizon_;
};

// Dense reference sampling with per-iteration noise iteration_rng(seed, r).
class DenseAgent : public Agent {
 public:
  DenseAgent(const DiTPolicy& policy, SamplerPlan plan) : policy_(policy), plan_(std::move(plan)) {}
  void begin_episode(std::uint64_t seed) override { seed_ = seed; }
  PolicyStep act(const Observation& obs, int r) override;

 private:
  const DiTPolicy& policy_;
  SamplerPlan plan_;
  std::uint64_t seed_ = 0;
};

// Pruned sampling through the pipeline; owns one cache per episode.
class SparseAgent : public Agent {
 public:
  SparseAgent(const DiTPolicy& policy, const Pruner* pruner, SamplerPlan plan, SparseDiffusionOptions options = {})
      : policy_(policy), pruner_(pruner), plan_(std::move(plan)), options_(options) {}
  void begin_episode(std::uint64_t seed) override;
  PolicyStep act(const Observation& obs, int r) override;

  const OmniCache& cache() const { return *cache_; }
  const SparseDiffusionStats& last_stats() const { return last_; }
  SparseDiffusionOptions& options() { return options_; }

 private:
  const DiTPolicy& policy_;
  const Pruner* pruner_;
  SamplerPlan plan_;
  SparseDiffusionOptions options_;
  std::uint64_t seed_ = 0;
  std::optional<OmniCache> cache_;
  SparseDiffusionStats last_;
};

}  // namespace odrt
