#include "odrt/agents.hpp"

#include "odrt/error.hpp"
#include "odrt/ops.hpp"

namespace odrt {

PolicyStep ExpertAgent::act(const Observation& obs, int) {
  const Tensor raw = expert_action(obs.position, obs.goal, env_.expert_gain, env_.v_max, horizon_);
  return PolicyStep{ops::scale(raw, 1.0 / env_.v_max), std::nullopt, {}};
}

PolicyStep ZeroAgent::act(const Observation&, int) {
  return PolicyStep{Tensor(Shape{static_cast<std::size_t>(horizon_), 2}), std::nullopt, {}};
}

PolicyStep DenseAgent::act(const Observation& obs, int r) {
  DiffusionResult res = diffuse_action(policy_, obs.values, plan_, iteration_rng(seed_, r), r);
  return PolicyStep{res.action, std::nullopt, dense_diffusion_flops(policy_.config(), plan_.size())};
}

void SparseAgent::begin_episode(std::uint64_t seed) {
  seed_ = seed;
  cache_.emplace(policy_.config().num_blocks(), plan_.size());
}

PolicyStep SparseAgent::act(const Observation& obs, int r) {
  require(cache_.has_value(), ErrorKind::Contract, "SparseAgent::act before begin_episode");
  cache_->begin_rollout_iteration(r);
  SparseDiffusion res = diffuse_sparse(policy_, pruner_, obs.values, *cache_, plan_, iteration_rng(seed_, r), options_);
  last_ = res.stats;
  return PolicyStep{res.action, res.stats.plan, res.stats.flops};
}

}  // namespace odrt
