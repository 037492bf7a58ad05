#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "odrt/checkpoint.hpp"
#include "odrt/flops.hpp"
#include "odrt/pruner.hpp"

namespace odrt {

using Vec2 = std::array<double, 2>;

struct EnvConfig {
  double step_noise = 0.01;
  double success_radius = 0.05;
  int max_steps = 80;
  int exec_horizon = 4;
  double expert_gain = 0.5;
  double v_max = 0.05;
  bool hidden_goal = false;  // observation carries zeros instead of the goal
  std::array<Vec2, 2> goals{{{0.6, 0.6}, {-0.6, 0.6}}};
  Vec2 start_lo{-0.4, -0.8};
  Vec2 start_hi{0.4, -0.4};

  void validate(int horizon) const;
  bool operator==(const EnvConfig&) const = default;
};

struct Observation {
  std::vector<double> values;  // (x, y, goal_x, goal_y)
  Vec2 position{};
  Vec2 goal{};  // privileged; only the scripted expert reads it
};

// Point mass in [-1, 1]^2 driven by velocity commands.
class PointReachEnv {
 public:
  explicit PointReachEnv(const EnvConfig& cfg);

  // Start position and goal drawn from the episode stream.
  void reset(const Rng& episode_rng);
  void step(const Vec2& velocity);
  Observation observe() const;
  bool success() const;
  bool done() const { return success() || steps_ >= cfg_.max_steps; }

  const Vec2& position() const { return pos_; }
  const Vec2& goal() const { return goal_; }
  int steps() const { return steps_; }
  const EnvConfig& config() const { return cfg_; }

 private:
  EnvConfig cfg_;
  Vec2 pos_{};
  Vec2 goal_{};
  int steps_ = 0;
  Rng noise_{0};
};

// Proportional controller toward `goal`, velocity norm clipped to v_max,
// rolled out for `horizon` steps on the noiseless dynamics. Rows are raw
// velocities [horizon x 2].
Tensor expert_action(const Vec2& position, const Vec2& goal, double gain, double v_max, int horizon);

struct PolicyStep {
  Tensor action;  // [horizon x 2], velocities divided by v_max
  std::optional<MaskPlan> mask;
  FlopsTally flops;
};

// A policy closure with per-episode state. begin_episode() receives the
// episode seed; act() is called with r = 1, 2, ...
class Agent {
 public:
  virtual ~Agent() = default;
  virtual void begin_episode(std::uint64_t seed) = 0;
  virtual PolicyStep act(const Observation& obs, int r) = 0;
};

struct IterationRecord {
  int r = 0;
  std::vector<double> obs;
  Tensor reference;  // a*_r, may be undefined
  Tensor executed;   // the chunk the policy produced
  std::optional<MaskPlan> mask;
  FlopsTally flops;
  bool success = false;
};

struct TrajectoryRecord {
  std::uint64_t seed = 0;
  Vec2 goal{};
  std::string config_hash;
  bool success = false;
  int env_steps = 0;
  std::vector<IterationRecord> iterations;
};

// Receding-horizon episode: diffuse a chunk, execute its first T_e steps,
// observe, repeat until success (checked after each chunk) or max_steps.
// With `as_reference`, each executed chunk is also stored as a*_r.
TrajectoryRecord rollout(Agent& agent, const EnvConfig& env, int horizon, std::uint64_t seed,
                         bool as_reference = false, const std::string& config_hash = {});

struct ReplayStep {
  Tensor action;
  double fidelity = 0.0;   // mean squared error against a*_r
  double distance = 0.0;   // L2 norm of the difference
  std::optional<MaskPlan> mask;
  FlopsTally flops;
};

// Feeds the recorded observations back through `agent` (episode seed taken
// from the record); the environment is not stepped.
std::vector<ReplayStep> replay_rollout(const TrajectoryRecord& record, Agent& agent);
void validate_record(const TrajectoryRecord& record, bool need_reference);

double success_rate(const std::vector<TrajectoryRecord>& records);

// Episode seeds are derived from a run seed so episode i is reproducible alone.
std::uint64_t episode_seed(std::uint64_t run_seed, std::size_t episode);
// Diffusion noise stream of rollout iteration r within an episode.
Rng iteration_rng(std::uint64_t episode_seed, int r);

Section trajectory_section(const TrajectoryRecord& record, std::size_t index);
TrajectoryRecord trajectory_from_section(const Section& section);
Envelope trajectory_envelope(const std::vector<TrajectoryRecord>& records, const DiTConfig& cfg,
                             std::map<std::string, std::string> metadata = {});
std::vector<TrajectoryRecord> trajectories_from_envelope(const Envelope& env);
// Columns: episode, r, o..., ref..., exec..., flops, success.
std::string trajectories_csv(const std::vector<TrajectoryRecord>& records);

}  // namespace odrt
