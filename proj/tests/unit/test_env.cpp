#include <cmath>

#include "doctest.h"
#include "fixtures.hpp"
#include "odrt/agents.hpp"

using namespace odrt;

namespace {

// Replays a fixed list of velocities; anything after the list is zero.
class ScriptAgent : public Agent {
 public:
  explicit ScriptAgent(int horizon) : horizon_(horizon) {}
  void begin_episode(std::uint64_t) override {}
  PolicyStep act(const Observation&, int) override {
    PolicyStep s;
    s.action = Tensor(Shape{static_cast<std::size_t>(horizon_), 2}, 10.0);  // far beyond the arena
    return s;
  }

 private:
  int horizon_;
};

class FailingAgent : public Agent {
 public:
  void begin_episode(std::uint64_t) override {}
  PolicyStep act(const Observation&, int r) override {
    if (r == 3) fail(ErrorKind::Numeric, "diverged");
    PolicyStep s;
    s.action = Tensor(Shape{8, 2}, 0.0);
    return s;
  }
};

}  // namespace

TEST_SUITE("env") {
  TEST_CASE("expert law examples") {
    const Tensor a = expert_action({0.0, 0.0}, {1.0, 0.0}, 0.5, 1.0, 4);
    CHECK(a.at(0, 0) == 0.5);
    CHECK(a.at(0, 1) == 0.0);
    CHECK(a.at(1, 0) == 0.25);  // halfway again from 0.5
    const Tensor z = expert_action({0.3, -0.2}, {0.3, -0.2}, 0.5, 0.05, 8);
    for (double v : z.values()) CHECK(v == 0.0);
    // clipped to v_max
    const Tensor c = expert_action({-1.0, -1.0}, {1.0, 1.0}, 0.5, 0.05, 2);
    CHECK(std::hypot(c.at(0, 0), c.at(0, 1)) == doctest::Approx(0.05).epsilon(1e-12));
  }

  TEST_CASE("expert succeeds on every one of 100 episodes") {
    const EnvConfig cfg;
    ExpertAgent expert(cfg, 8);
    std::vector<TrajectoryRecord> recs;
    for (std::size_t i = 0; i < 100; ++i) recs.push_back(rollout(expert, cfg, 8, episode_seed(1, i)));
    CHECK(success_rate(recs) == 1.0);
    for (const auto& r : recs) CHECK(r.env_steps <= cfg.max_steps);
  }

  TEST_CASE("zero agent never succeeds") {
    const EnvConfig cfg;
    ZeroAgent zero(8);
    for (std::size_t i = 0; i < 20; ++i) {
      const TrajectoryRecord r = rollout(zero, cfg, 8, episode_seed(2, i));
      CHECK(!r.success);
      CHECK(r.env_steps == cfg.max_steps);
    }
  }

  TEST_CASE("receding horizon accounting and arena clamp") {
    EnvConfig cfg;
    cfg.max_steps = 30;
    ScriptAgent push(8);
    const TrajectoryRecord r = rollout(push, cfg, 8, 5);
    CHECK(r.env_steps == 30);
    // 30 steps in chunks of 4: 8 iterations, the last executes 2 steps
    CHECK(r.iterations.size() == 8);
    for (const auto& it : r.iterations) {
      CHECK(std::abs(it.obs[0]) <= 1.0);
      CHECK(std::abs(it.obs[1]) <= 1.0);
    }
    EnvConfig def;
    ZeroAgent zero(8);
    const TrajectoryRecord z = rollout(zero, def, 8, 6);
    CHECK(static_cast<int>(z.iterations.size()) * def.exec_horizon == z.env_steps);

    PointReachEnv env(cfg);
    env.reset(Rng(3));
    for (int i = 0; i < 5; ++i) env.step({1.0, -1.0});
    CHECK(std::abs(env.position()[0]) <= 1.0);
    CHECK(std::abs(env.position()[1]) <= 1.0);
    CHECK(env.position()[0] == 1.0);
    CHECK(env.position()[1] == -1.0);
  }

  TEST_CASE("config validation") {
    EnvConfig cfg;
    CHECK(fx::error_kind_of([&] { cfg.validate(2); }) == ErrorKind::Config);
    cfg.exec_horizon = 0;
    CHECK(fx::error_kind_of([&] { cfg.validate(8); }) == ErrorKind::Config);
  }

  TEST_CASE("identical seeds give byte-identical records") {
    const DiTPolicy policy = fx::make_policy(fx::small_config());
    EnvConfig cfg;
    cfg.max_steps = 24;
    DenseAgent a(policy, SamplerPlan::ddpm(10));
    DenseAgent b(policy, SamplerPlan::ddpm(10));
    const TrajectoryRecord r1 = rollout(a, cfg, 8, 42, true, "abc");
    const TrajectoryRecord r2 = rollout(b, cfg, 8, 42, true, "abc");
    const std::string e1 = encode_envelope(trajectory_envelope({r1}, policy.config()));
    const std::string e2 = encode_envelope(trajectory_envelope({r2}, policy.config()));
    CHECK(e1 == e2);
    const TrajectoryRecord r3 = rollout(a, cfg, 8, 43, true, "abc");
    CHECK(encode_envelope(trajectory_envelope({r3}, policy.config())) != e1);
  }

  TEST_CASE("replay: self-replay is exact and all-C sparse replay matches dense") {
    const DiTPolicy policy = fx::make_policy(fx::small_config());
    const Pruner pruner = fx::make_pruner(policy.config(), fx::small_pruner_config());
    EnvConfig cfg;
    cfg.max_steps = 24;
    DenseAgent dense(policy, SamplerPlan::ddpm(10));
    const TrajectoryRecord rec = rollout(dense, cfg, 8, 7, true);
    REQUIRE(rec.iterations.size() == 6);
    const auto self = replay_rollout(rec, dense);
    for (std::size_t i = 0; i < self.size(); ++i) {
      CHECK(bit_equal(self[i].action, rec.iterations[i].reference));
      CHECK(self[i].fidelity == 0.0);
      CHECK(self[i].distance == 0.0);
    }
    for (PipelineMode mode : {PipelineMode::Sequential, PipelineMode::Async}) {
      SparseDiffusionOptions opt;
      opt.mode = mode;
      opt.all_compute = true;
      SparseAgent sparse(policy, &pruner, SamplerPlan::ddpm(10), opt);
      const auto rep = replay_rollout(rec, sparse);
      REQUIRE(rep.size() == self.size());
      for (std::size_t i = 0; i < rep.size(); ++i) CHECK(bit_equal(rep[i].action, self[i].action));
    }
  }

  TEST_CASE("truncated and reference-less records are rejected") {
    const DiTPolicy policy = fx::make_policy(fx::small_config());
    EnvConfig cfg;
    cfg.max_steps = 20;
    DenseAgent dense(policy, SamplerPlan::ddpm(10));
    TrajectoryRecord rec = rollout(dense, cfg, 8, 8, true);
    REQUIRE(rec.iterations.size() == 5);
    TrajectoryRecord gap = rec;
    gap.iterations.erase(gap.iterations.begin() + 2);
    try {
      replay_rollout(gap, dense);
      FAIL("expected a data error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Data);
      CHECK(std::string(e.what()).find("r=3") != std::string::npos);
    }
    TrajectoryRecord noref = rollout(dense, cfg, 8, 8, false);
    CHECK(fx::error_kind_of([&] { replay_rollout(noref, dense); }) == ErrorKind::Data);
    TrajectoryRecord empty = rec;
    empty.iterations.clear();
    CHECK(fx::error_kind_of([&] { validate_record(empty, false); }) == ErrorKind::Data);
  }

  TEST_CASE("policy failures carry the iteration index") {
    FailingAgent agent;
    try {
      rollout(agent, EnvConfig{}, 8, 1);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Numeric);
      CHECK(std::string(e.what()).find("r=3") != std::string::npos);
    }
    ZeroAgent wrong(6);
    CHECK(fx::error_kind_of([&] { rollout(wrong, EnvConfig{}, 8, 1); }) == ErrorKind::Shape);
  }

  TEST_CASE("success rate") {
    std::vector<TrajectoryRecord> recs(50);
    CHECK(success_rate(recs) == 0.0);
    for (std::size_t i = 0; i < 37; ++i) recs[i].success = true;
    CHECK(success_rate(recs) == doctest::Approx(0.74).epsilon(1e-15));
    for (auto& r : recs) r.success = true;
    CHECK(success_rate(recs) == 1.0);
    CHECK(fx::error_kind_of([] { success_rate({}); }) == ErrorKind::Usage);
  }

  TEST_CASE("trajectory round trip through envelope and csv") {
    const DiTPolicy policy = fx::make_policy(fx::small_config());
    const Pruner pruner = fx::make_pruner(policy.config(), fx::small_pruner_config());
    EnvConfig cfg;
    cfg.max_steps = 16;
    SparseAgent sparse(policy, &pruner, SamplerPlan::ddpm(10));
    std::vector<TrajectoryRecord> recs;
    recs.push_back(rollout(sparse, cfg, 8, 11, true, "h1"));
    recs.push_back(rollout(sparse, cfg, 8, 12, false, "h1"));
    const auto dir = fx::temp_dir("traj");
    write_envelope(dir / "t.odrt", trajectory_envelope(recs, policy.config(), {{"producer", "test"}}));
    const Envelope env = read_envelope(dir / "t.odrt");
    CHECK(env.metadata.at("producer") == "test");
    const auto back = trajectories_from_envelope(env);
    REQUIRE(back.size() == 2);
    for (std::size_t t = 0; t < 2; ++t) {
      CHECK(back[t].seed == recs[t].seed);
      CHECK(back[t].goal == recs[t].goal);
      CHECK(back[t].config_hash == "h1");
      CHECK(back[t].success == recs[t].success);
      CHECK(back[t].env_steps == recs[t].env_steps);
      REQUIRE(back[t].iterations.size() == recs[t].iterations.size());
      for (std::size_t i = 0; i < recs[t].iterations.size(); ++i) {
        const auto& a = recs[t].iterations[i];
        const auto& b = back[t].iterations[i];
        CHECK(a.r == b.r);
        CHECK(a.obs == b.obs);
        CHECK(bit_equal(a.executed, b.executed));
        CHECK(a.reference.defined() == b.reference.defined());
        CHECK(a.flops == b.flops);
        REQUIRE(b.mask.has_value());
        CHECK(a.mask->choices == b.mask->choices);
        CHECK(bit_equal(a.mask->confidences, b.mask->confidences));
      }
    }
    const std::string csv = trajectories_csv(recs);
    std::size_t lines = 0;
    for (char c : csv) lines += c == '\n' ? 1 : 0;
    CHECK(lines == 1 + recs[0].iterations.size() + recs[1].iterations.size());
    CHECK(csv.rfind("episode,r,", 0) == 0);
  }

  TEST_CASE("episode streams") {
    CHECK(episode_seed(1, 0) == episode_seed(1, 0));
    CHECK(episode_seed(1, 0) != episode_seed(1, 1));
    CHECK(episode_seed(1, 0) != episode_seed(2, 0));
    CHECK(bit_equal(iteration_rng(5, 2).normal_tensor(Shape{3}), iteration_rng(5, 2).normal_tensor(Shape{3})));
    CHECK(!bit_equal(iteration_rng(5, 2).normal_tensor(Shape{3}), iteration_rng(5, 3).normal_tensor(Shape{3})));
  }
}
