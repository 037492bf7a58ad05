#include "odrt/env.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "odrt/error.hpp"

namespace odrt {

void EnvConfig::validate(int horizon) const {
  if (exec_horizon < 1 || exec_horizon > horizon) {
    fail(ErrorKind::Config, "exec_horizon=" + std::to_string(exec_horizon) + " must lie in [1, horizon=" +
                                std::to_string(horizon) + "]");
  }
  if (max_steps < 1) fail(ErrorKind::Config, "max_steps must be positive");
  if (v_max <= 0.0 || success_radius <= 0.0 || step_noise < 0.0) {
    fail(ErrorKind::Config, "v_max and success_radius must be positive, step_noise non-negative");
  }
}

PointReachEnv::PointReachEnv(const EnvConfig& cfg) : cfg_(cfg) {}

void PointReachEnv::reset(const Rng& episode_rng) {
  Rng init = episode_rng.split(0);
  pos_ = {init.uniform(cfg_.start_lo[0], cfg_.start_hi[0]), init.uniform(cfg_.start_lo[1], cfg_.start_hi[1])};
  goal_ = cfg_.goals[init.below(cfg_.goals.size())];
  noise_ = episode_rng.split(1);
  steps_ = 0;
}

void PointReachEnv::step(const Vec2& v) {
  for (int i = 0; i < 2; ++i) {
    const auto j = static_cast<std::size_t>(i);
    pos_[j] = std::clamp(pos_[j] + v[j] + cfg_.step_noise * noise_.normal(), -1.0, 1.0);
  }
  ++steps_;
}

Observation PointReachEnv::observe() const {
  Observation o;
  o.position = pos_;
  o.goal = goal_;
  if (cfg_.hidden_goal) {
    o.values = {pos_[0], pos_[1], 0.0, 0.0};
  } else {
    o.values = {pos_[0], pos_[1], goal_[0], goal_[1]};
  }
  return o;
}

bool PointReachEnv::success() const {
  return std::hypot(pos_[0] - goal_[0], pos_[1] - goal_[1]) <= cfg_.success_radius;
}

Tensor expert_action(const Vec2& position, const Vec2& goal, double gain, double v_max, int horizon) {
  Tensor out(Shape{static_cast<std::size_t>(horizon), 2});
  auto a = out.mutable_values();
  Vec2 p = position;
  for (int t = 0; t < horizon; ++t) {
    double vx = gain * (goal[0] - p[0]);
    double vy = gain * (goal[1] - p[1]);
    const double n = std::hypot(vx, vy);
    if (n > v_max) {
      vx *= v_max / n;
      vy *= v_max / n;
    }
    a[static_cast<std::size_t>(2 * t)] = vx;
    a[static_cast<std::size_t>(2 * t + 1)] = vy;
    p = {std::clamp(p[0] + vx, -1.0, 1.0), std::clamp(p[1] + vy, -1.0, 1.0)};
  }
  return out;
}

std::uint64_t episode_seed(std::uint64_t run_seed, std::size_t episode) {
  return mix64(run_seed ^ mix64(0x9e3779b97f4a7c15ULL + episode));
}

Rng iteration_rng(std::uint64_t seed, int r) { return Rng(seed).split(2).split(static_cast<std::uint64_t>(r)); }

TrajectoryRecord rollout(Agent& agent, const EnvConfig& cfg, int horizon, std::uint64_t seed, bool as_reference,
                         const std::string& config_hash) {
  cfg.validate(horizon);
  PointReachEnv env(cfg);
  env.reset(Rng(seed).split(1));
  agent.begin_episode(seed);
  TrajectoryRecord rec;
  rec.seed = seed;
  rec.goal = env.goal();
  rec.config_hash = config_hash;
  for (int r = 1; !env.done(); ++r) {
    const Observation obs = env.observe();
    PolicyStep step;
    try {
      step = agent.act(obs, r);
    } catch (const Error& e) {
      fail(e.kind(), "rollout iteration r=" + std::to_string(r) + ": " + e.what());
    }
    if (step.action.rank() != 2 || step.action.dim(0) != static_cast<std::size_t>(horizon) || step.action.dim(1) != 2) {
      fail(ErrorKind::Shape, "rollout iteration r=" + std::to_string(r) + ": policy returned " +
                                 shape_str(step.action.shape()));
    }
    auto a = step.action.values();
    for (int j = 0; j < cfg.exec_horizon && env.steps() < cfg.max_steps; ++j) {
      const auto i = static_cast<std::size_t>(2 * j);
      env.step({a[i] * cfg.v_max, a[i + 1] * cfg.v_max});
    }
    IterationRecord it;
    it.r = r;
    it.obs = obs.values;
    it.executed = step.action;
    if (as_reference) it.reference = step.action;
    it.mask = std::move(step.mask);
    it.flops = step.flops;
    it.success = env.success();
    rec.iterations.push_back(std::move(it));
  }
  rec.success = env.success();
  rec.env_steps = env.steps();
  return rec;
}

void validate_record(const TrajectoryRecord& record, bool need_reference) {
  for (std::size_t i = 0; i < record.iterations.size(); ++i) {
    const auto& it = record.iterations[i];
    const int expected = static_cast<int>(i) + 1;
    if (it.r != expected) {
      fail(ErrorKind::Data, "trajectory " + std::to_string(record.seed) + " is missing iteration r=" +
                                std::to_string(expected));
    }
    if (need_reference && !it.reference.defined()) {
      fail(ErrorKind::Data, "trajectory " + std::to_string(record.seed) + " iteration r=" + std::to_string(it.r) +
                                " has no reference action");
    }
  }
  if (record.iterations.empty()) fail(ErrorKind::Data, "trajectory " + std::to_string(record.seed) + " is empty");
}

std::vector<ReplayStep> replay_rollout(const TrajectoryRecord& record, Agent& agent) {
  validate_record(record, true);
  agent.begin_episode(record.seed);
  std::vector<ReplayStep> out;
  for (const auto& it : record.iterations) {
    Observation obs;
    obs.values = it.obs;
    obs.position = {it.obs[0], it.obs[1]};
    obs.goal = record.goal;
    PolicyStep step = agent.act(obs, it.r);
    ReplayStep rs;
    double sq = 0.0;
    auto x = step.action.values();
    auto y = it.reference.values();
    require(x.size() == y.size(), ErrorKind::Shape, "replayed action shape differs from the reference");
    for (std::size_t i = 0; i < x.size(); ++i) sq += (x[i] - y[i]) * (x[i] - y[i]);
    rs.fidelity = sq / static_cast<double>(x.size());
    rs.distance = std::sqrt(sq);
    rs.action = step.action;
    rs.mask = std::move(step.mask);
    rs.flops = step.flops;
    out.push_back(std::move(rs));
  }
  return out;
}

double success_rate(const std::vector<TrajectoryRecord>& records) {
  if (records.empty()) fail(ErrorKind::Usage, "success_rate of an empty record list");
  std::size_t n = 0;
  for (const auto& r : records) n += r.success ? 1 : 0;
  return static_cast<double>(n) / static_cast<double>(records.size());
}

namespace {

Tensor vec(std::vector<double> v) { return Tensor::vector(std::move(v)); }

std::string key(int r, const char* what) { return "r" + std::to_string(r) + "/" + what; }

const Tensor& need(const Section& s, const std::string& name) {
  const Blob* b = s.find(name);
  if (!b) fail(ErrorKind::Data, "section '" + s.name + "' lacks blob '" + name + "'");
  return b->value;
}

}  // namespace

Section trajectory_section(const TrajectoryRecord& rec, std::size_t index) {
  Section s{"trajectory/" + std::to_string(index), {}};
  s.blobs.push_back({"meta", vec({static_cast<double>(rec.seed >> 32), static_cast<double>(rec.seed & 0xffffffffULL),
                                  rec.goal[0], rec.goal[1], rec.success ? 1.0 : 0.0,
                                  static_cast<double>(rec.env_steps),
                                  static_cast<double>(rec.iterations.size())})});
  for (const auto& it : rec.iterations) {
    s.blobs.push_back({key(it.r, "obs"), vec(it.obs)});
    s.blobs.push_back({key(it.r, "exec"), it.executed.detach()});
    if (it.reference.defined()) s.blobs.push_back({key(it.r, "ref"), it.reference.detach()});
    s.blobs.push_back({key(it.r, "flops"),
                       vec({static_cast<double>(it.flops.encoder), static_cast<double>(it.flops.pruner),
                            static_cast<double>(it.flops.blocks), static_cast<double>(it.flops.embed_head)})});
    s.blobs.push_back({key(it.r, "success"), vec({it.success ? 1.0 : 0.0})});
    if (it.mask) {
      const MaskPlan& m = *it.mask;
      std::vector<double> choices(m.choices.size()), forced(m.forced.size()), enabled(m.enabled.size());
      for (std::size_t i = 0; i < m.choices.size(); ++i) choices[i] = static_cast<double>(m.choices[i]);
      for (std::size_t i = 0; i < m.forced.size(); ++i) forced[i] = m.forced[i];
      for (std::size_t i = 0; i < m.enabled.size(); ++i) enabled[i] = m.enabled[i];
      s.blobs.push_back({key(it.r, "mask/shape"), vec({static_cast<double>(m.num_blocks),
                                                       static_cast<double>(m.steps), static_cast<double>(m.r)})});
      s.blobs.push_back({key(it.r, "mask/confidences"), m.confidences.detach()});
      s.blobs.push_back({key(it.r, "mask/choices"), vec(std::move(choices))});
      s.blobs.push_back({key(it.r, "mask/forced"), vec(std::move(forced))});
      s.blobs.push_back({key(it.r, "mask/enabled"), vec(std::move(enabled))});
    }
  }
  return s;
}

TrajectoryRecord trajectory_from_section(const Section& s) {
  const Tensor& meta = need(s, "meta");
  require(meta.size() == 7, ErrorKind::Data, "trajectory meta blob has " + std::to_string(meta.size()) + " entries");
  auto m = meta.values();
  TrajectoryRecord rec;
  rec.seed = (static_cast<std::uint64_t>(m[0]) << 32) | static_cast<std::uint64_t>(m[1]);
  rec.goal = {m[2], m[3]};
  rec.success = m[4] != 0.0;
  rec.env_steps = static_cast<int>(m[5]);
  const int n = static_cast<int>(m[6]);
  for (int r = 1; r <= n; ++r) {
    IterationRecord it;
    it.r = r;
    const Tensor& o = need(s, key(r, "obs"));
    it.obs.assign(o.values().begin(), o.values().end());
    it.executed = need(s, key(r, "exec"));
    if (const Blob* b = s.find(key(r, "ref"))) it.reference = b->value;
    auto f = need(s, key(r, "flops")).values();
    require(f.size() == 4, ErrorKind::Data, "flops blob must hold 4 entries");
    it.flops = FlopsTally{static_cast<std::uint64_t>(f[0]), static_cast<std::uint64_t>(f[1]),
                          static_cast<std::uint64_t>(f[2]), static_cast<std::uint64_t>(f[3])};
    it.success = need(s, key(r, "success")).item() != 0.0;
    if (const Blob* shape = s.find(key(r, "mask/shape"))) {
      MaskPlan plan;
      auto sh = shape->value.values();
      plan.num_blocks = static_cast<int>(sh[0]);
      plan.steps = static_cast<int>(sh[1]);
      plan.r = static_cast<int>(sh[2]);
      plan.confidences = need(s, key(r, "mask/confidences"));
      for (double c : need(s, key(r, "mask/choices")).values()) plan.choices.push_back(static_cast<BlockChoice>(c));
      for (double c : need(s, key(r, "mask/forced")).values()) plan.forced.push_back(c != 0.0 ? 1 : 0);
      for (double c : need(s, key(r, "mask/enabled")).values()) plan.enabled.push_back(c != 0.0 ? 1 : 0);
      it.mask = std::move(plan);
    }
    rec.iterations.push_back(std::move(it));
  }
  return rec;
}

Envelope trajectory_envelope(const std::vector<TrajectoryRecord>& records, const DiTConfig& cfg,
                             std::map<std::string, std::string> metadata) {
  Envelope env;
  env.config = cfg;
  env.metadata = std::move(metadata);
  env.metadata[kConfigHashKey] = hash_hex(config_hash(cfg));
  env.metadata["trajectories"] = std::to_string(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    env.sections.push_back(trajectory_section(records[i], i));
    if (!records[i].config_hash.empty()) env.metadata[env.sections.back().name + ".config_hash"] = records[i].config_hash;
  }
  return env;
}

std::vector<TrajectoryRecord> trajectories_from_envelope(const Envelope& env) {
  std::vector<TrajectoryRecord> out;
  for (const auto& s : env.sections) {
    if (s.name.rfind("trajectory/", 0) != 0) continue;
    out.push_back(trajectory_from_section(s));
    // records without their own hash inherit the envelope's
    auto it = env.metadata.find(s.name + ".config_hash");
    if (it == env.metadata.end()) it = env.metadata.find(kConfigHashKey);
    if (it != env.metadata.end()) out.back().config_hash = it->second;
  }
  if (out.empty()) fail(ErrorKind::Data, "dataset holds no trajectories");
  return out;
}

std::string trajectories_csv(const std::vector<TrajectoryRecord>& records) {
  std::string out;
  char buf[64];
  bool header = false;
  for (std::size_t e = 0; e < records.size(); ++e) {
    for (const auto& it : records[e].iterations) {
      if (!header) {
        out += "episode,r";
        for (std::size_t i = 0; i < it.obs.size(); ++i) out += ",o" + std::to_string(i);
        for (std::size_t i = 0; i < it.executed.size(); ++i) out += ",ref" + std::to_string(i);
        for (std::size_t i = 0; i < it.executed.size(); ++i) out += ",exec" + std::to_string(i);
        out += ",flops,success\n";
        header = true;
      }
      out += std::to_string(e) + "," + std::to_string(it.r);
      for (double v : it.obs) {
        std::snprintf(buf, sizeof buf, ",%.17g", v);
        out += buf;
      }
      for (std::size_t i = 0; i < it.executed.size(); ++i) {
        if (it.reference.defined()) {
          std::snprintf(buf, sizeof buf, ",%.17g", it.reference[i]);
          out += buf;
        } else {
          out += ",";
        }
      }
      for (double v : it.executed.values()) {
        std::snprintf(buf, sizeof buf, ",%.17g", v);
        out += buf;
      }
      out += "," + std::to_string(it.flops.total()) + "," + (it.success ? "1" : "0") + "\n";
    }
  }
  return out;
}

}  // namespace odrt
