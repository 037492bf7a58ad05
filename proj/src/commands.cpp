#include "odrt/commands.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>

#include "odrt/error.hpp"

namespace odrt {

namespace fs = std::filesystem;

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Usage:
    case ErrorKind::Config: return 2;
    case ErrorKind::Data: return 3;
    case ErrorKind::Compat: return 4;
    case ErrorKind::Numeric:
    case ErrorKind::Training: return 5;
    default: return 1;
  }
}

std::uint64_t stream_seed(std::uint64_t run_seed, const std::string& stage) {
  return fnv1a64(std::to_string(run_seed) + "/" + stage);
}

std::vector<std::string> provenance_lines(const RunConfig& cfg, const std::string& command) {
  return {"command=" + command, "run_config_hash=" + run_config_hash(cfg), "seed=" + std::to_string(cfg.seed)};
}

std::map<std::string, std::string> provenance_metadata(const RunConfig& cfg, const std::string& command) {
  return {{"command", command}, {"run_config_hash", run_config_hash(cfg)}, {"seed", std::to_string(cfg.seed)}};
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) fail(ErrorKind::Data, "cannot write " + path.string());
}

std::string with_preamble(const std::vector<std::string>& lines, const std::string& body) {
  std::string s;
  for (const auto& l : lines) s += "# " + l + "\n";
  return s + body;
}

void prepare_out(const RunConfig& cfg) {
  cfg.validate();
  fs::create_directories(cfg.paths.out);
  write_text(cfg.paths.out / "run_config.json", dump_run_config(cfg));
}

void require_artifact(const fs::path& path, const char* producer) {
  if (!fs::exists(path)) {
    fail(ErrorKind::Usage, "missing input artifact " + path.string() + " (produce it with `odrt " + producer + "`)");
  }
}

Rng seeded(const RunConfig& cfg, const char* stage) { return Rng(stream_seed(cfg.seed, stage)); }

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Wraps a SparseAgent and keeps the latency record of every diffusion.
class TimedAgent : public Agent {
 public:
  explicit TimedAgent(SparseAgent& inner) : inner_(inner) {}
  void begin_episode(std::uint64_t seed) override { inner_.begin_episode(seed); }
  PolicyStep act(const Observation& obs, int r) override {
    PolicyStep s = inner_.act(obs, r);
    latency.push_back(inner_.last_stats().latency);
    return s;
  }
  std::vector<LatencyRecord> latency;

 private:
  SparseAgent& inner_;
};

// Dense sampling that keeps every iteration's residual log.
class LoggingDenseAgent : public Agent {
 public:
  LoggingDenseAgent(const DiTPolicy& policy, SamplerPlan plan) : policy_(policy), plan_(std::move(plan)) {}
  void begin_episode(std::uint64_t seed) override {
    seed_ = seed;
    logs.clear();
  }
  PolicyStep act(const Observation& obs, int r) override {
    DiffusionResult res = diffuse_action(policy_, obs.values, plan_, iteration_rng(seed_, r), r, true);
    logs.push_back(std::move(res.residual_log));
    return PolicyStep{res.action, std::nullopt, dense_diffusion_flops(policy_.config(), plan_.size())};
  }
  std::vector<ResidualLog> logs;

 private:
  const DiTPolicy& policy_;
  SamplerPlan plan_;
  std::uint64_t seed_ = 0;
};

}  // namespace

DiTPolicy load_policy(const RunConfig& cfg) {
  const fs::path path = cfg.paths.policy_file();
  require_artifact(path, "train-policy");
  const Envelope env = read_envelope(path);
  check_compatible(env, cfg.policy);
  return policy_from_envelope(env);
}

Envelope pruner_envelope(const Pruner& pruner, const DirectionSet& dirs, std::map<std::string, std::string> metadata) {
  Envelope env;
  env.config = pruner.policy_config();
  env.metadata = std::move(metadata);
  env.metadata[kConfigHashKey] = hash_hex(config_hash(env.config));
  env.metadata["pruner.directions"] = dirs.str();
  write_pruner_metadata(pruner.config(), env.metadata);
  env.sections.push_back(pruner_section(pruner));
  return env;
}

LoadedPruner load_pruner(const fs::path& path, const DiTConfig& policy_cfg) {
  require_artifact(path, "train-pruner");
  const Envelope env = read_envelope(path);
  check_compatible(env, policy_cfg);
  const PrunerConfig pc = read_pruner_metadata(env.metadata);
  Rng unused(0);
  Pruner pruner(pc, policy_cfg, unused);
  load_pruner_weights(env.require_section("pruner"), pruner);
  auto it = env.metadata.find("pruner.directions");
  return LoadedPruner{std::move(pruner), DirectionSet::parse(it == env.metadata.end() ? "FTR" : it->second)};
}

std::vector<TrajectoryRecord> load_trajectories(const fs::path& path, const DiTConfig& policy_cfg,
                                                const char* producer) {
  require_artifact(path, producer);
  const Envelope env = read_envelope(path);
  check_compatible(env, policy_cfg);
  return trajectories_from_envelope(env);
}

void cmd_record_demos(const RunConfig& cfg, const std::string& source, std::ostream& log) {
  prepare_out(cfg);
  const auto prov = provenance_lines(cfg, "record-demos --source " + source);
  auto meta = provenance_metadata(cfg, "record-demos --source " + source);
  std::vector<TrajectoryRecord> records;
  fs::path out;
  if (source == "expert") {
    records = record_expert_demos(cfg.env, cfg.policy.horizon, cfg.dense.demo_episodes, stream_seed(cfg.seed, "demos"));
    out = cfg.paths.demos_file();
  } else if (source == "policy") {
    const DiTPolicy policy = load_policy(cfg);
    DenseAgent agent(policy, cfg.sampler.plan(cfg.policy.diffusion_steps));
    const int n = cfg.pruner_training.trajectories + cfg.held_out;
    records = run_episodes(agent, cfg.env, cfg.policy.horizon, n, stream_seed(cfg.seed, "dref"), true,
                           hash_hex(config_hash(cfg.policy)));
    out = cfg.paths.dref_file();
  } else {
    fail(ErrorKind::Usage, "record-demos --source must be expert or policy, got '" + source + "'");
  }
  write_envelope(out, trajectory_envelope(records, cfg.policy, meta));
  fs::path csv = out;
  csv.replace_extension(".csv");
  write_text(csv, with_preamble(prov, trajectories_csv(records)));
  log << "recorded " << records.size() << " episodes (success rate " << success_rate(records) << ") -> "
      << out.string() << "\n";
}

void cmd_train_policy(const RunConfig& cfg, std::ostream& log) {
  prepare_out(cfg);
  const auto demos = load_trajectories(cfg.paths.demos_file(), cfg.policy, "record-demos --source expert");
  Rng init = seeded(cfg, "policy-init");
  DiTPolicy policy(cfg.policy, init);
  DenseTrainConfig tc = cfg.dense;
  tc.seed = stream_seed(cfg.seed, "policy-train");
  const DenseTrainReport rep =
      train_dense_policy(policy, demos_from_records(demos), tc, [&](const std::string& s) { log << s << "\n"; });
  write_envelope(cfg.paths.policy_file(), policy_envelope(policy, provenance_metadata(cfg, "train-policy")));
  std::string csv = "epoch,loss\n";
  char buf[64];
  for (std::size_t i = 0; i < rep.epoch_loss.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g\n", i + 1, rep.epoch_loss[i]);
    csv += buf;
  }
  write_text(cfg.paths.out / "train_policy.csv", with_preamble(provenance_lines(cfg, "train-policy"), csv));
  log << "policy -> " << cfg.paths.policy_file().string() << "\n";
}

void cmd_train_pruner(const RunConfig& cfg, std::ostream& log) {
  prepare_out(cfg);
  const DiTPolicy policy = load_policy(cfg);
  const auto dref = load_trajectories(cfg.paths.dref_file(), cfg.policy, "record-demos --source policy");
  Rng init = seeded(cfg, "pruner-init");
  Pruner pruner(cfg.pruner, cfg.policy, init);
  PrunerTrainConfig tc = cfg.pruner_training;
  tc.seed = stream_seed(cfg.seed, "pruner-train");
  const PrunerTrainReport rep = train_pruner(policy, pruner, dref, tc, cfg.sampler.plan(cfg.policy.diffusion_steps),
                                             [&](const std::string& s) { log << s << "\n"; });
  auto meta = provenance_metadata(cfg, "train-pruner");
  char rho[32];
  std::snprintf(rho, sizeof rho, "%.17g", tc.rho);
  meta["pruner.rho"] = rho;
  write_envelope(cfg.paths.pruner_file(), pruner_envelope(pruner, tc.directions, meta));
  write_text(cfg.paths.out / "train_pruner.csv", with_preamble(provenance_lines(cfg, "train-pruner"), rep.csv()));
  log << "pruner -> " << cfg.paths.pruner_file().string() << "\n";
}

void cmd_rollout(const RunConfig& cfg, bool dense, std::ostream& log) {
  prepare_out(cfg);
  const DiTPolicy policy = load_policy(cfg);
  const SamplerPlan plan = cfg.sampler.plan(cfg.policy.diffusion_steps);
  std::optional<LoadedPruner> pruner;
  if (!dense && fs::exists(cfg.paths.pruner_file())) pruner.emplace(load_pruner(cfg.paths.pruner_file(), cfg.policy));
  std::vector<TrajectoryRecord> records;
  const std::uint64_t seed = stream_seed(cfg.seed, "eval");
  const std::string hash = hash_hex(config_hash(cfg.policy));
  if (pruner) {
    SparseDiffusionOptions opts;
    opts.mode = cfg.mode;
    opts.directions = pruner->directions;
    PrunerWorker worker;
    if (cfg.mode == PipelineMode::Async) opts.worker = &worker;
    SparseAgent agent(policy, &pruner->pruner, plan, opts);
    records = run_episodes(agent, cfg.env, cfg.policy.horizon, cfg.episodes, seed, false, hash);
  } else {
    DenseAgent agent(policy, plan);
    records = run_episodes(agent, cfg.env, cfg.policy.horizon, cfg.episodes, seed, false, hash);
  }
  write_envelope(cfg.paths.out / "rollouts.odrt",
                 trajectory_envelope(records, cfg.policy, provenance_metadata(cfg, "rollout")));
  write_text(cfg.paths.out / "rollouts.csv",
             with_preamble(provenance_lines(cfg, "rollout"), trajectories_csv(records)));
  log << (pruner ? "sparse" : "dense") << " rollout: " << records.size() << " episodes, success rate "
      << (records.empty() ? 0.0 : success_rate(records)) << "\n";
}

std::string BenchResult::report(const std::vector<std::string>& preamble) const {
  std::string s;
  for (const auto& l : preamble) s += "# " + l + "\n";
  char buf[160];
  auto line = [&](const std::string& key, double v) {
    std::snprintf(buf, sizeof buf, "%s=%.6f\n", key.c_str(), v);
    s += buf;
  };
  s += "episodes=" + std::to_string(episodes) + "\n";
  s += "diffusions=" + std::to_string(diffusions) + "\n";
  line("sparsity", sparsity);
  line("flops_dense", flops_dense);
  line("flops_sparse", flops_sparse);
  line("flops_ratio", flops_ratio);
  line("decoder_flops_ratio", decoder_flops_ratio);
  line("success_rate_dense", success_rate_dense);
  line("success_rate_sparse", success_rate_sparse);
  for (const auto& t : timings) {
    line(t.mode + ".t_total_median_us", t.t_total_median_us);
    line(t.mode + ".t_encode_mean_us", t.t_encode_mean_us);
    line(t.mode + ".t_prune_mean_us", t.t_prune_mean_us);
    line(t.mode + ".t_decode_mean_us", t.t_decode_mean_us);
    line(t.mode + ".t_mask_wait_mean_us", t.t_mask_wait_mean_us);
    line(t.mode + ".t_overlap_hidden_mean_us", t.t_overlap_hidden_mean_us);
  }
  return s;
}

BenchResult cmd_bench(const RunConfig& cfg, std::optional<PipelineMode> only, std::ostream& log) {
  prepare_out(cfg);
  const DiTPolicy policy = load_policy(cfg);
  const SamplerPlan plan = cfg.sampler.plan(cfg.policy.diffusion_steps);
  std::optional<LoadedPruner> pruner;
  if (fs::exists(cfg.paths.pruner_file())) pruner.emplace(load_pruner(cfg.paths.pruner_file(), cfg.policy));
  const std::uint64_t seed = stream_seed(cfg.seed, "eval");
  const int horizon = cfg.policy.horizon;

  BenchResult res;
  res.episodes = cfg.episodes;
  DenseAgent dense(policy, plan);
  const auto dense_runs = run_episodes(dense, cfg.env, horizon, cfg.episodes, seed);
  res.success_rate_dense = dense_runs.empty() ? 0.0 : success_rate(dense_runs);
  const FlopsTally dense_flops = dense_diffusion_flops(cfg.policy, plan.size());
  res.flops_dense = static_cast<double>(dense_flops.total());

  std::vector<PipelineMode> modes;
  if (only) {
    modes.push_back(*only);
  } else {
    modes = {PipelineMode::Sequential, PipelineMode::Async};
  }
  PrunerWorker worker;
  bool first = true;
  for (PipelineMode mode : modes) {
    SparseDiffusionOptions opts;
    opts.mode = mode;
    if (pruner) opts.directions = pruner->directions;
    if (mode == PipelineMode::Async) opts.worker = &worker;
    SparseAgent sparse(policy, pruner ? &pruner->pruner : nullptr, plan, opts);
    TimedAgent timed(sparse);
    const auto runs = run_episodes(timed, cfg.env, horizon, cfg.episodes, seed);
    ModeTiming t;
    t.mode = mode_name(mode);
    std::vector<double> totals;
    for (const auto& l : timed.latency) {
      totals.push_back(l.t_total_us);
      t.t_encode_mean_us += l.t_encode_us;
      t.t_prune_mean_us += l.t_prune_us;
      t.t_decode_mean_us += l.decode_total_us();
      t.t_mask_wait_mean_us += l.t_mask_wait_us;
      t.t_overlap_hidden_mean_us += l.overlap_hidden_us();
    }
    const double n = std::max<std::size_t>(timed.latency.size(), 1);
    t.t_total_median_us = median(totals);
    t.t_encode_mean_us /= n;
    t.t_prune_mean_us /= n;
    t.t_decode_mean_us /= n;
    t.t_mask_wait_mean_us /= n;
    t.t_overlap_hidden_mean_us /= n;
    res.timings.push_back(t);
    if (first) {
      first = false;
      res.success_rate_sparse = runs.empty() ? 0.0 : success_rate(runs);
      std::vector<MaskPlan> plans;
      FlopsTally spent;
      for (const auto& rec : runs) {
        for (const auto& it : rec.iterations) {
          if (it.mask) plans.push_back(*it.mask);
          spent += it.flops;
          ++res.diffusions;
        }
      }
      res.masks = mask_export(plans);
      res.sparsity = res.masks.sparsity();
      if (res.diffusions) {
        const double d = res.diffusions;
        res.flops_sparse = static_cast<double>(spent.total()) / d;
        res.flops_ratio = res.flops_sparse / res.flops_dense;
        res.decoder_flops_ratio = static_cast<double>(spent.decoder()) / (d * static_cast<double>(dense_flops.decoder()));
      }
    }
  }
  const auto prov = provenance_lines(cfg, "bench");
  write_text(cfg.paths.out / "bench.txt", res.report(prov));
  write_text(cfg.paths.out / "bench_masks.csv", mask_export_csv(res.masks, prov));
  log << res.report({});
  return res;
}

void cmd_export_masks(const RunConfig& cfg, std::ostream& log) {
  prepare_out(cfg);
  const DiTPolicy policy = load_policy(cfg);
  const LoadedPruner pruner = load_pruner(cfg.paths.pruner_file(), cfg.policy);
  SparseDiffusionOptions opts;
  opts.directions = pruner.directions;
  SparseAgent agent(policy, &pruner.pruner, cfg.sampler.plan(cfg.policy.diffusion_steps), opts);
  const TrajectoryRecord rec =
      rollout(agent, cfg.env, cfg.policy.horizon, episode_seed(stream_seed(cfg.seed, "eval"), 0));
  std::vector<MaskPlan> plans;
  for (const auto& it : rec.iterations) plans.push_back(*it.mask);
  const MaskExport e = mask_export(plans);
  validate_mask_export(e);
  const auto prov = provenance_lines(cfg, "export-masks");
  write_text(cfg.paths.out / "masks.csv", mask_export_csv(e, prov));
  std::string comment;
  for (const auto& l : prov) comment += (comment.empty() ? "" : " ") + l;
  for (int r : e.iterations()) {
    write_text(cfg.paths.out / ("masks_r" + std::to_string(r) + ".svg"), render_mask_svg(e, r, comment));
  }
  log << "exported " << e.rows.size() << " mask cells over " << e.iterations().size() << " iterations, sparsity "
      << e.sparsity() << "\n";
}

void cmd_analyze_similarity(const RunConfig& cfg, std::ostream& log) {
  prepare_out(cfg);
  const DiTPolicy policy = load_policy(cfg);
  const SamplerPlan plan = cfg.sampler.plan(cfg.policy.diffusion_steps);
  const int B = cfg.policy.num_blocks();
  const int K = plan.size();
  LoggingDenseAgent agent(policy, plan);
  const std::uint64_t seed = stream_seed(cfg.seed, "similarity");
  rollout(agent, cfg.env, cfg.policy.horizon, episode_seed(seed, 0));
  const std::vector<ResidualLog> a = agent.logs;
  rollout(agent, cfg.env, cfg.policy.horizon, episode_seed(seed, 1));
  const std::vector<ResidualLog> other = agent.logs;

  std::string csv = "pair,r_a,r_b,b,k,cosine\n";
  char buf[128];
  auto emit = [&](const char* pair, int ra, int rb, const Tensor& sim) -> double {
    auto v = sim.values();
    double mean = 0.0;
    for (int b = 1; b <= B; ++b) {
      for (int k = 1; k <= K; ++k) {
        const double c = v[static_cast<std::size_t>((b - 1) * K + (k - 1))];
        std::snprintf(buf, sizeof buf, "%s,%d,%d,%d,%d,%.17g\n", pair, ra, rb, b, k, c);
        csv += buf;
        mean += c;
      }
    }
    return mean / (B * K);
  };
  double adjacent = 0.0, random = 0.0;
  int n_adj = 0, n_rand = 0;
  for (std::size_t i = 0; i + 1 < a.size(); ++i) {
    adjacent += emit("adjacent", static_cast<int>(i + 1), static_cast<int>(i + 2),
                     rollout_feature_similarity(a[i], a[i + 1], B, K));
    ++n_adj;
  }
  // Baseline: same iteration index in an unrelated episode.
  for (std::size_t i = 0; i < std::min(a.size(), other.size()); ++i) {
    random += emit("cross_episode", static_cast<int>(i + 1), static_cast<int>(i + 1),
                   rollout_feature_similarity(a[i], other[i], B, K));
    ++n_rand;
  }
  const auto prov = provenance_lines(cfg, "analyze-similarity");
  write_text(cfg.paths.out / "similarity.csv", with_preamble(prov, csv));
  std::snprintf(buf, sizeof buf, "adjacent_mean=%.6f\ncross_episode_mean=%.6f\n", n_adj ? adjacent / n_adj : 0.0,
                n_rand ? random / n_rand : 0.0);
  write_text(cfg.paths.out / "similarity.txt", with_preamble(prov, buf));
  log << buf;
}

}  // namespace odrt
