#include "odrt/run_config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "odrt/error.hpp"

namespace odrt {

using nlohmann::json;

SamplerPlan SamplerConfig::plan(int train_steps) const {
  return kind == SamplerKind::Ddim ? SamplerPlan::ddim(train_steps, ddim_steps) : SamplerPlan::ddpm(train_steps);
}

void RunConfig::validate() const {
  policy.validate();
  env.validate(policy.horizon);
  pruner.validate(policy);
  pruner_training.validate();
  if (dense.epochs < 1 || dense.batch < 1 || !(dense.lr > 0.0) || dense.demo_episodes < 1) {
    fail(ErrorKind::Config, "dense_training: epochs, batch, lr and demo_episodes must be positive");
  }
  if (episodes < 0) fail(ErrorKind::Config, "episodes must be >= 0");
  if (held_out < 0) fail(ErrorKind::Config, "held_out must be >= 0");
  (void)sampler.plan(policy.diffusion_steps);
}

namespace {

const char* schedule_name(ScheduleKind k) { return k == ScheduleKind::Linear ? "linear" : "cosine"; }
const char* sampler_name(SamplerKind k) { return k == SamplerKind::Ddim ? "ddim" : "ddpm"; }

ScheduleKind parse_schedule(const std::string& s) {
  if (s == "cosine") return ScheduleKind::Cosine;
  if (s == "linear") return ScheduleKind::Linear;
  fail(ErrorKind::Config, "policy.schedule: unknown value '" + s + "' (expected cosine or linear)");
}

SamplerKind parse_sampler(const std::string& s) {
  if (s == "ddpm") return SamplerKind::Ddpm;
  if (s == "ddim") return SamplerKind::Ddim;
  fail(ErrorKind::Config, "unknown sampler '" + s + "' (expected ddpm or ddim)");
}

// Object reader that remembers which keys were consumed so leftovers can be
// reported as unknown.
class Reader {
 public:
  Reader(const json& j, std::string prefix) : j_(j), prefix_(std::move(prefix)) {
    if (!j_.is_object()) fail(ErrorKind::Config, where() + " must be an object");
  }

  void get(const char* key, int& out) {
    if (const json* v = take(key)) {
      if (!v->is_number_integer()) bad(key, "an integer");
      out = v->get<int>();
    }
  }
  void get(const char* key, std::uint64_t& out) {
    if (const json* v = take(key)) {
      if (!v->is_number_unsigned()) bad(key, "a non-negative integer");
      out = v->get<std::uint64_t>();
    }
  }
  void get(const char* key, double& out) {
    if (const json* v = take(key)) {
      if (!v->is_number()) bad(key, "a number");
      out = v->get<double>();
    }
  }
  void get(const char* key, bool& out) {
    if (const json* v = take(key)) {
      if (!v->is_boolean()) bad(key, "true or false");
      out = v->get<bool>();
    }
  }
  void get(const char* key, std::string& out) {
    if (const json* v = take(key)) {
      if (!v->is_string()) bad(key, "a string");
      out = v->get<std::string>();
    }
  }
  void get(const char* key, Vec2& out) {
    if (const json* v = take(key)) {
      if (!v->is_array() || v->size() != 2 || !(*v)[0].is_number() || !(*v)[1].is_number()) {
        bad(key, "a pair of numbers");
      }
      out = {(*v)[0].get<double>(), (*v)[1].get<double>()};
    }
  }
  void get(const char* key, std::filesystem::path& out) {
    std::string s;
    get(key, s);
    if (!s.empty()) out = s;
  }

  const json* object(const char* key) { return take(key); }
  std::string child(const char* key) const { return prefix_.empty() ? key : prefix_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) fail(ErrorKind::Config, "unknown key '" + child(it.key().c_str()) + "'");
    }
  }

 private:
  const json* take(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  [[noreturn]] void bad(const char* key, const char* what) const {
    fail(ErrorKind::Config, child(key) + ": expected " + what);
  }
  std::string where() const { return prefix_.empty() ? "config" : prefix_; }

  const json& j_;
  std::string prefix_;
  std::set<std::string> seen_;
};

template <class F>
void section(Reader& parent, const char* key, F&& body) {
  if (const json* v = parent.object(key)) {
    Reader r(*v, parent.child(key));
    body(r);
    r.finish();
  }
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    fail(ErrorKind::Config, std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig c;
  Reader top(j, "");
  top.get("seed", c.seed);
  top.get("episodes", c.episodes);
  top.get("held_out", c.held_out);
  section(top, "policy", [&](Reader& r) {
    DiTConfig& p = c.policy;
    r.get("d_model", p.d_model);
    r.get("n_layers", p.n_layers);
    r.get("n_heads", p.n_heads);
    r.get("d_ff", p.d_ff);
    r.get("horizon", p.horizon);
    r.get("action_dim", p.action_dim);
    r.get("obs_dim", p.obs_dim);
    r.get("obs_tokens", p.obs_tokens);
    r.get("diffusion_steps", p.diffusion_steps);
    std::string sched = schedule_name(p.schedule);
    r.get("schedule", sched);
    p.schedule = parse_schedule(sched);
    r.get("beta_start", p.beta_start);
    r.get("beta_end", p.beta_end);
    r.get("clip_sample", p.clip_sample);
    r.get("clip_range", p.clip_range);
  });
  section(top, "sampler", [&](Reader& r) {
    std::string kind = sampler_name(c.sampler.kind);
    r.get("kind", kind);
    c.sampler.kind = parse_sampler(kind);
    r.get("ddim_steps", c.sampler.ddim_steps);
  });
  section(top, "env", [&](Reader& r) {
    EnvConfig& e = c.env;
    r.get("step_noise", e.step_noise);
    r.get("success_radius", e.success_radius);
    r.get("max_steps", e.max_steps);
    r.get("exec_horizon", e.exec_horizon);
    r.get("expert_gain", e.expert_gain);
    r.get("v_max", e.v_max);
    r.get("hidden_goal", e.hidden_goal);
    r.get("goal_a", e.goals[0]);
    r.get("goal_b", e.goals[1]);
    r.get("start_lo", e.start_lo);
    r.get("start_hi", e.start_hi);
  });
  section(top, "dense_training", [&](Reader& r) {
    r.get("epochs", c.dense.epochs);
    r.get("lr", c.dense.lr);
    r.get("batch", c.dense.batch);
    r.get("demo_episodes", c.dense.demo_episodes);
    r.get("grad_clip", c.dense.grad_clip);
  });
  section(top, "pruner", [&](Reader& r) {
    r.get("width", c.pruner.width);
    r.get("heads", c.pruner.heads);
    r.get("ffn_hidden", c.pruner.ffn_hidden);
    r.get("compute_bias", c.pruner.compute_bias);
  });
  section(top, "pruner_training", [&](Reader& r) {
    PrunerTrainConfig& t = c.pruner_training;
    r.get("rho", t.rho);
    r.get("epochs", t.epochs);
    r.get("lr", t.lr);
    r.get("weight_decay", t.weight_decay);
    r.get("trajectories", t.trajectories);
    std::string dirs = t.directions.str();
    r.get("directions", dirs);
    t.directions = DirectionSet::parse(dirs);
    r.get("per_step_backprop", t.per_step_backprop);
  });
  section(top, "pipeline", [&](Reader& r) {
    std::string mode = mode_name(c.mode);
    r.get("mode", mode);
    c.mode = parse_mode(mode);
  });
  section(top, "paths", [&](Reader& r) {
    r.get("out", c.paths.out);
    r.get("demos", c.paths.demos);
    r.get("dref", c.paths.dref);
    r.get("policy", c.paths.policy);
    r.get("pruner", c.paths.pruner);
  });
  top.finish();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Usage, "cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

void apply_overrides(RunConfig& cfg, const RunOverrides& o) {
  if (o.seed) cfg.seed = *o.seed;
  if (o.rho) cfg.pruner_training.rho = *o.rho;
  if (o.mode) cfg.mode = parse_mode(*o.mode);
  if (o.episodes) cfg.episodes = *o.episodes;
  if (o.out) cfg.paths.out = *o.out;
  if (o.directions) cfg.pruner_training.directions = DirectionSet::parse(*o.directions);
  if (o.sampler) cfg.sampler.kind = parse_sampler(*o.sampler);
  if (o.ddim_steps) cfg.sampler.ddim_steps = *o.ddim_steps;
}

namespace {

json to_json(const RunConfig& c, bool with_paths) {
  const DiTConfig& p = c.policy;
  const EnvConfig& e = c.env;
  const PrunerTrainConfig& t = c.pruner_training;
  json j;
  j["seed"] = c.seed;
  j["episodes"] = c.episodes;
  j["held_out"] = c.held_out;
  j["policy"] = {{"d_model", p.d_model},       {"n_layers", p.n_layers},
                 {"n_heads", p.n_heads},       {"d_ff", p.d_ff},
                 {"horizon", p.horizon},       {"action_dim", p.action_dim},
                 {"obs_dim", p.obs_dim},       {"obs_tokens", p.obs_tokens},
                 {"diffusion_steps", p.diffusion_steps}, {"schedule", schedule_name(p.schedule)},
                 {"beta_start", p.beta_start}, {"beta_end", p.beta_end},
                 {"clip_sample", p.clip_sample}, {"clip_range", p.clip_range}};
  j["sampler"] = {{"kind", sampler_name(c.sampler.kind)}, {"ddim_steps", c.sampler.ddim_steps}};
  j["env"] = {{"step_noise", e.step_noise},
              {"success_radius", e.success_radius},
              {"max_steps", e.max_steps},
              {"exec_horizon", e.exec_horizon},
              {"expert_gain", e.expert_gain},
              {"v_max", e.v_max},
              {"hidden_goal", e.hidden_goal},
              {"goal_a", {e.goals[0][0], e.goals[0][1]}},
              {"goal_b", {e.goals[1][0], e.goals[1][1]}},
              {"start_lo", {e.start_lo[0], e.start_lo[1]}},
              {"start_hi", {e.start_hi[0], e.start_hi[1]}}};
  j["dense_training"] = {{"epochs", c.dense.epochs},
                         {"lr", c.dense.lr},
                         {"batch", c.dense.batch},
                         {"demo_episodes", c.dense.demo_episodes},
                         {"grad_clip", c.dense.grad_clip}};
  j["pruner"] = {{"width", c.pruner.width},
                 {"heads", c.pruner.heads},
                 {"ffn_hidden", c.pruner.ffn_hidden},
                 {"compute_bias", c.pruner.compute_bias}};
  j["pruner_training"] = {{"rho", t.rho},
                          {"epochs", t.epochs},
                          {"lr", t.lr},
                          {"weight_decay", t.weight_decay},
                          {"trajectories", t.trajectories},
                          {"directions", t.directions.str()},
                          {"per_step_backprop", t.per_step_backprop}};
  j["pipeline"] = {{"mode", mode_name(c.mode)}};
  if (with_paths) {
    j["paths"] = {{"out", c.paths.out.string()},
                  {"demos", c.paths.demos.string()},
                  {"dref", c.paths.dref.string()},
                  {"policy", c.paths.policy.string()},
                  {"pruner", c.paths.pruner.string()}};
  }
  return j;
}

}  // namespace

std::string dump_run_config(const RunConfig& cfg) { return to_json(cfg, true).dump(2) + "\n"; }

std::string run_config_hash(const RunConfig& cfg) { return hash_hex(fnv1a64(to_json(cfg, false).dump())); }

}  // namespace odrt
