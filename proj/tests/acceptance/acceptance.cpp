// Acceptance run: trains the toy policy and the pruners it needs, then checks
// each criterion and prints one PASS/FAIL line per criterion.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cache_oracle.hpp"
#include "fixtures.hpp"
#include "odrt/checkpoint.hpp"
#include "odrt/commands.hpp"
#include "odrt/pipeline.hpp"
#include "op_gradcheck.hpp"
#include "pruner_gradcheck.hpp"

using namespace odrt;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void note(const char* fmt, auto... args) {
  std::printf("  ");
  std::printf(fmt, args...);
  std::printf("\n");
  std::fflush(stdout);
}

struct Setup {
  explicit Setup(DiTPolicy p) : policy(std::move(p)) {}
  fs::path dir;
  bool fresh = false;
  EnvConfig env;
  DiTConfig cfg;
  SamplerPlan plan;
  DiTPolicy policy;
  std::vector<TrajectoryRecord> pool;  // reference trajectories for pruner training
  std::vector<TrajectoryRecord> held;  // held-out replays
  double dense_success = 0.0;
  std::map<std::string, Pruner> pruners;
  std::map<std::string, VariantMetrics> live;  // evaluations with 50 live episodes
};

constexpr int kEvalEpisodes = 50;
constexpr std::uint64_t kEvalSeed = 999;

DiTPolicy train_or_load_policy(const fs::path& dir, bool fresh, const DiTConfig& cfg, const EnvConfig& env) {
  const DenseTrainConfig tc{30, 1e-3, 32, 100, 3, 1.0};
  const std::string key = "dense/v1/" + hash_hex(config_hash(cfg)) + "/demos=100/epochs=30/seed=3/init=7";
  const fs::path path = dir / "policy.odrt";
  if (!fresh && fs::exists(path)) {
    const Envelope e = read_envelope(path);
    auto it = e.metadata.find("acceptance.key");
    if (it != e.metadata.end() && it->second == key) {
      note("reusing %s", path.c_str());
      return policy_from_envelope(e);
    }
  }
  const auto t0 = Clock::now();
  const auto demos = record_expert_demos(env, cfg.horizon, tc.demo_episodes, 1);
  Rng init(7);
  DiTPolicy policy(cfg, init);
  train_dense_policy(policy, demos_from_records(demos), tc, [&](const std::string& s) {
    note("%s (%.0fs)", s.c_str(), seconds_since(t0));
  });
  write_envelope(path, policy_envelope(policy, {{"acceptance.key", key}}));
  return policy;
}

const Pruner& pruner_for(Setup& s, double rho, int n, const std::string& dirs) {
  char tag[64];
  std::snprintf(tag, sizeof tag, "rho%.2f_n%d_%s", rho, n, dirs.c_str());
  auto found = s.pruners.find(tag);
  if (found != s.pruners.end()) return found->second;

  PrunerTrainConfig pc;
  pc.rho = rho;
  pc.trajectories = n;
  pc.directions = DirectionSet::parse(dirs);
  const std::string key = std::string("pruner/v1/") + hash_hex(config_hash(s.cfg)) + "/" + tag + "/epochs=" +
                          std::to_string(pc.epochs) + "/init=5";
  const fs::path path = s.dir / (std::string("pruner_") + tag + ".odrt");
  if (!s.fresh && fs::exists(path)) {
    const Envelope e = read_envelope(path);
    auto it = e.metadata.find("acceptance.key");
    if (it != e.metadata.end() && it->second == key) {
      note("reusing %s", path.c_str());
      return s.pruners.emplace(tag, load_pruner(path, s.cfg).pruner).first->second;
    }
  }
  const auto t0 = Clock::now();
  Rng init(5);
  Pruner pruner(PrunerConfig{}, s.cfg, init);
  const std::vector<TrajectoryRecord> dref(s.pool.begin(), s.pool.begin() + n);
  const PrunerTrainReport rep = train_pruner(s.policy, pruner, dref, pc, s.plan);
  const auto& last = rep.log.back();
  note("trained %s in %.0fs: last L_f %.5f L_s %.5f sparsity %.4f", tag, seconds_since(t0), last.l_f, last.l_s,
       last.sparsity);
  write_envelope(path, pruner_envelope(pruner, pc.directions, {{"acceptance.key", key}}));
  return s.pruners.emplace(tag, std::move(pruner)).first->second;
}

const VariantMetrics& live_metrics(Setup& s, double rho, int n, const std::string& dirs = "FTR") {
  char tag[64];
  std::snprintf(tag, sizeof tag, "rho%.2f_n%d_%s", rho, n, dirs.c_str());
  auto found = s.live.find(tag);
  if (found != s.live.end()) return found->second;
  const Pruner& pruner = pruner_for(s, rho, n, dirs);
  VariantEvalConfig ec;
  ec.episodes = kEvalEpisodes;
  ec.seed = kEvalSeed;
  ec.env = s.env;
  const VariantMetrics m = evaluate_variant(s.policy, pruner, DirectionSet::parse(dirs), s.held, s.plan, ec);
  note("%s: success %.2f sparsity %.4f flops %.4f decoder %.4f L_f %.5f", tag, m.success_rate, m.sparsity,
       m.flops_ratio, m.decoder_flops_ratio, m.replay_fidelity);
  return s.live.emplace(tag, m).first->second;
}

std::vector<double> obs_like(Rng& rng) {
  // position, goal
  return {rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-0.7, 0.7), rng.uniform(-0.7, 0.7)};
}

bool same_plan(const MaskPlan& a, const MaskPlan& b) {
  return a.choices == b.choices && a.forced == b.forced && bit_equal(a.confidences, b.confidences);
}

// ---- criteria ----

bool dense_equivalence(Setup& s) {
  const Pruner& pruner = pruner_for(s, 0.95, 2, "FTR");
  const int B = s.cfg.num_blocks();
  Rng rng(101);
  int mismatches = 0, steps = 0;
  for (int d = 1; d <= 20; ++d) {
    const std::vector<double> o = obs_like(rng);
    const Rng drng = iteration_rng(202, d);
    const Tensor dense = diffuse_action(s.policy, o, s.plan, drng).action;
    for (PipelineMode mode : {PipelineMode::Sequential, PipelineMode::Async}) {
      OmniCache cache(B, s.plan.size());
      cache.begin_rollout_iteration(1);
      SparseDiffusionOptions opt;
      opt.mode = mode;
      opt.all_compute = true;
      if (!bit_equal(diffuse_sparse(s.policy, &pruner, o, cache, s.plan, drng, opt).action, dense)) ++mismatches;
    }
    // every step of the dense chain through sparse_forward with an all-C row
    OmniCache cache(B, s.plan.size());
    cache.begin_rollout_iteration(1);
    const std::vector<BlockChoice> all_c(static_cast<std::size_t>(B), BlockChoice::Compute);
    Tensor a = s.plan.initial_noise(drng, static_cast<std::size_t>(s.cfg.horizon), static_cast<std::size_t>(s.cfg.action_dim));
    for (int i = 0; i < s.plan.size(); ++i) {
      const int k = s.plan.lattice_k(i);
      const ConditionEmbedding cond = s.policy.encode_condition(o, s.plan.timesteps[static_cast<std::size_t>(i)]);
      const DenseForward df = s.policy.decoder_forward_dense(a, cond, k);
      const SparseForward sf = sparse_forward(s.policy, a, cond, all_c, cache, k);
      if (!bit_equal(df.eps_hat, sf.eps_hat)) ++mismatches;
      ++steps;
      a = s.plan.step(s.policy.schedule(), a, df.eps_hat, i, drng);
    }
    if (!bit_equal(a, dense)) ++mismatches;
  }
  note("20 diffusions, %d sparse_forward steps, %d mismatches", steps, mismatches);
  return mismatches == 0;
}

bool batched_equivalence(Setup& s) {
  const Pruner& pruner = pruner_for(s, 0.95, 2, "FTR");
  const int B = s.cfg.num_blocks();
  const std::size_t cell = static_cast<std::size_t>(B) * 4;
  const std::vector<std::uint8_t> populated(static_cast<std::size_t>(B * s.plan.size()), 1);
  Rng rng(303);
  int mismatches = 0, rows = 0;
  for (int t = 0; t < 10; ++t) {
    const std::vector<double> o = obs_like(rng);
    const ConditionBuffer buf = encode_condition_batch(s.policy, o, s.plan);
    const MaskPlan mp = prune_batched(pruner, buf, 2, DirectionSet::all(), populated);
    for (std::size_t i = 0; i < buf.size(); ++i) {
      const int k = s.plan.lattice_k(static_cast<int>(i));
      const ConditionEmbedding single = s.policy.encode_condition(o, s.plan.timesteps[i]);
      if (!bit_equal(buf.row(i).tokens, single.tokens)) ++mismatches;
      const std::vector<std::uint8_t> en(mp.enabled.begin() + static_cast<std::ptrdiff_t>(i * cell),
                                         mp.enabled.begin() + static_cast<std::ptrdiff_t>((i + 1) * cell));
      const Tensor p = prune_single(pruner, single, en);
      for (int b = 1; b <= B; ++b) {
        const GatingVector g = mp.probs(b, k);
        for (std::size_t j = 0; j < 4; ++j)
          if (g[j] != p.at(static_cast<std::size_t>(b - 1), j)) ++mismatches;
      }
      ++rows;
    }
  }
  note("10 observations, %d rows, %d mismatches", rows, mismatches);
  return mismatches == 0;
}

// Untrained pruner whose head is dominated by its bias: plans mix all four
// choices, R included once the rollout cache fills. The trained pruners
// rarely pick R, so this keeps that path under test.
Pruner reuse_heavy_pruner(const DiTConfig& cfg) {
  Pruner p = fx::make_pruner(cfg, PrunerConfig{}, 4, 0.5);
  for (double& v : p.mutable_weights().head.weight.mutable_values()) v *= 0.05;
  auto bias = p.mutable_weights().head.bias.mutable_values();
  bias[0] = 0.0;
  bias[1] = 0.3;
  bias[2] = -0.5;
  bias[3] = 1.0;
  return p;
}

bool async_equivalence(Setup& s) {
  const Pruner& trained = pruner_for(s, 0.95, 2, "FTR");
  const Pruner heavy = reuse_heavy_pruner(s.cfg);
  const int B = s.cfg.num_blocks();
  PrunerWorker worker;
  int mismatches = 0;
  long reuse = 0, rollout_reuse = 0;
  for (int trial = 0; trial < 20; ++trial) {
    // half the trials on each pruner; three rollout iterations per trial so
    // the rollout cache is in play
    const Pruner& pruner = trial % 2 ? heavy : trained;
    struct Variant {
      PipelineMode mode;
      std::chrono::microseconds delay;
      PrunerWorker* worker;
    };
    const std::vector<Variant> variants = {{PipelineMode::Sequential, {}, nullptr},
                                           {PipelineMode::Async, {}, nullptr},
                                           {PipelineMode::Async, std::chrono::milliseconds(20), nullptr},
                                           {PipelineMode::Async, std::chrono::milliseconds(5), &worker}};
    std::vector<std::vector<SparseDiffusion>> runs;
    for (const Variant& v : variants) {
      OmniCache cache(B, s.plan.size());
      Rng rng(404 + static_cast<std::uint64_t>(trial));
      std::vector<SparseDiffusion> out;
      for (int r = 1; r <= 3; ++r) {
        cache.begin_rollout_iteration(r);
        SparseDiffusionOptions opt;
        opt.mode = v.mode;
        opt.pruner_delay = v.delay;
        opt.worker = v.worker;
        out.push_back(diffuse_sparse(s.policy, &pruner, obs_like(rng), cache, s.plan,
                                     iteration_rng(505 + static_cast<std::uint64_t>(trial), r), opt));
      }
      runs.push_back(std::move(out));
    }
    for (std::size_t v = 1; v < runs.size(); ++v) {
      for (std::size_t r = 0; r < 3; ++r) {
        if (!bit_equal(runs[0][r].action, runs[v][r].action)) ++mismatches;
        if (!same_plan(runs[0][r].stats.plan, runs[v][r].stats.plan)) ++mismatches;
      }
    }
    for (const auto& d : runs[0]) {
      for (BlockChoice c : d.stats.plan.choices) {
        reuse += c != BlockChoice::Compute;
        rollout_reuse += c == BlockChoice::Rollout;
      }
    }
  }
  note("20 trials x 3 iterations x 3 async variants, %d mismatches; %ld reused cells (%ld from R)", mismatches, reuse,
       rollout_reuse);
  return mismatches == 0 && rollout_reuse > 0;
}

bool gradient_suite(Setup&) {
  double worst = 0.0;
  std::string where;
  auto track = [&](const std::string& name, double err) {
    if (err > worst || where.empty()) {
      worst = err;
      where = name;
    }
  };
  for (const auto& [name, err] : oracle::op_gradient_errors()) track("op " + name, err);
  const auto [ste_fd, ste_mismatch] = oracle::ste_gradient_errors(12);
  track("ste soft surrogate", ste_fd);
  note("pass-through gate: hard vs soft backward max diff %.3g", ste_mismatch);

  const DiTPolicy policy = fx::make_policy(fx::mini_config(), 3, 0.15);
  Pruner pruner = fx::make_pruner(policy.config(), fx::mini_pruner_config(), 4, 0.5);
  const oracle::PrunerGradResult g = oracle::pruner_training_gradcheck(policy, pruner, 2, 21);
  track("pruner training (" + g.worst_param + ")", g.max_rel_err);
  note("end-to-end pruner gradient: %zu weights, max rel err %.3g", g.checked, g.max_rel_err);
  note("worst: %s at %.3g", where.c_str(), worst);
  return worst < 1e-4 && ste_mismatch < 1e-12 && g.checked == pruner.parameter_count();
}

bool sparsity_flops(Setup& s) {
  const VariantMetrics& m = live_metrics(s, 0.95, 2);
  note("rho=0.95: sparsity %.4f in [0.90, 0.97], decoder FLOPs ratio %.4f <= 0.10, total %.4f <= 0.15", m.sparsity,
       m.decoder_flops_ratio, m.flops_ratio);
  return m.sparsity >= 0.90 && m.sparsity <= 0.97 && m.decoder_flops_ratio <= 0.10 && m.flops_ratio <= 0.15;
}

bool lossless(Setup& s) {
  const VariantMetrics& m = live_metrics(s, 0.93, 2);
  const double gap = s.dense_success - m.success_rate;
  note("dense %.2f >= 0.90; rho=0.93 sparse %.2f, gap %.2f <= 0.10", s.dense_success, m.success_rate, gap);
  return s.dense_success >= 0.90 && gap <= 0.10;
}

bool data_efficiency(Setup& s) {
  bool any = false;
  int smallest = 0;
  for (int n : {1, 2, 4, 8}) {
    const VariantMetrics& a = live_metrics(s, 0.95, n);
    const VariantMetrics& b = live_metrics(s, 0.93, n);
    const bool sparse_ok = a.sparsity >= 0.90 && a.sparsity <= 0.97 && a.decoder_flops_ratio <= 0.10 &&
                           a.flops_ratio <= 0.15;
    const bool gap_ok = s.dense_success - b.success_rate <= 0.10;
    note("curve n=%d: rho=0.95 sparsity %.4f flops %.4f decoder %.4f (%s); rho=0.93 success %.2f gap %.2f (%s)", n,
         a.sparsity, a.flops_ratio, a.decoder_flops_ratio, sparse_ok ? "ok" : "miss", b.success_rate,
         s.dense_success - b.success_rate, gap_ok ? "ok" : "miss");
    if (sparse_ok && gap_ok && !any) {
      any = true;
      smallest = n;
    }
  }
  if (any) note("both targets met with %d reference trajectories", smallest);
  return any;
}

bool ablation(Setup& s) {
  VariantEvalConfig ec;  // replay only
  std::map<std::string, double> lf;
  for (const std::string dirs : {"FTR", "F", "T", "R"}) {
    const Pruner& p = pruner_for(s, 0.93, 2, dirs);
    const VariantMetrics m = evaluate_variant(s.policy, p, DirectionSet::parse(dirs), s.held, s.plan, ec);
    lf[dirs] = m.replay_fidelity;
    note("%-3s held-out L_f %.6f, sparsity %.4f", dirs.c_str(), m.replay_fidelity, m.sparsity);
  }
  return lf["F"] >= lf["FTR"] && lf["T"] >= lf["FTR"] && lf["R"] >= lf["FTR"];
}

bool cache_properties(Setup& s) {
  const oracle::CacheRunStats st = oracle::run_cache_property(s.policy, 1000, 606);
  note("%d steps, %d computed, %d reused, %d coherence violations, %d illegal serves, misses %d/%d raised", st.steps,
       st.computed, st.reused, st.coherence_violations, st.illegal_serves, st.misses_raised, st.misses_expected);
  return st.steps == 1000 && st.coherence_violations == 0 && st.illegal_serves == 0 && st.misses_expected > 0 &&
         st.misses_raised == st.misses_expected;
}

bool scheduling(Setup& s) {
  const Pruner& pruner = pruner_for(s, 0.95, 2, "FTR");
  const int B = s.cfg.num_blocks();
  PrunerWorker worker;
  OmniCache seq_cache(B, s.plan.size()), async_cache(B, s.plan.size());
  std::vector<double> seq_t, async_t;
  bool counters = true;
  Rng rng(707);
  {
    // untimed warm-up of both paths and the worker thread
    OmniCache warm(B, s.plan.size());
    warm.begin_rollout_iteration(1);
    for (PipelineMode mode : {PipelineMode::Sequential, PipelineMode::Async}) {
      SparseDiffusionOptions opt;
      opt.mode = mode;
      opt.worker = &worker;
      diffuse_sparse(s.policy, &pruner, obs_like(rng), warm, s.plan, iteration_rng(809, 1), opt);
    }
  }
  for (int r = 1; r <= 20; ++r) {
    const std::vector<double> o = obs_like(rng);
    seq_cache.begin_rollout_iteration(r);
    async_cache.begin_rollout_iteration(r);
    auto run = [&](PipelineMode mode, OmniCache& cache) {
      SparseDiffusionOptions opt;
      opt.mode = mode;
      opt.worker = &worker;
      const SparseDiffusion d = diffuse_sparse(s.policy, &pruner, o, cache, s.plan, iteration_rng(808, r), opt);
      counters = counters && d.stats.encoder_invocations == 1 && d.stats.pruner_invocations == 1;
      return d.stats.latency.t_total_us;
    };
    // alternate which mode goes first
    if (r % 2) {
      seq_t.push_back(run(PipelineMode::Sequential, seq_cache));
      async_t.push_back(run(PipelineMode::Async, async_cache));
    } else {
      async_t.push_back(run(PipelineMode::Async, async_cache));
      seq_t.push_back(run(PipelineMode::Sequential, seq_cache));
    }
  }
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
  };
  const double ms = median(seq_t), ma = median(async_t);
  note("counters all 1: %s; median end-to-end sequential %.0f us, async %.0f us", counters ? "yes" : "no", ms, ma);
  return counters && ma <= ms;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string dir = "acceptance_artifacts";
  bool fresh = false;
  std::vector<int> only;
  app.add_option("--artifacts", dir, "directory for trained checkpoints");
  app.add_flag("--fresh", fresh, "retrain even when cached checkpoints match");
  app.add_option("--only", only, "run only these criteria");
  CLI11_PARSE(app, argc, argv);

  const auto t_setup = Clock::now();
  std::printf("setup\n");
  fs::create_directories(dir);
  Setup s(train_or_load_policy(dir, fresh, DiTConfig{}, EnvConfig{}));
  s.dir = dir;
  s.fresh = fresh;
  s.plan = SamplerPlan::ddpm(s.cfg.diffusion_steps);
  {
    DenseAgent dense(s.policy, s.plan);
    s.dense_success = success_rate(run_episodes(dense, s.env, s.cfg.horizon, kEvalEpisodes, kEvalSeed));
    s.pool = run_episodes(dense, s.env, s.cfg.horizon, 8, 11, true);
    s.held = run_episodes(dense, s.env, s.cfg.horizon, 2, 77, true);
  }
  note("dense success %.2f over %d episodes; setup %.0fs", s.dense_success, kEvalEpisodes, seconds_since(t_setup));

  struct Criterion {
    int id;
    const char* name;
    std::function<bool(Setup&)> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "dense equivalence (all-C)", dense_equivalence},
      {2, "batched/single pruning and encoding", batched_equivalence},
      {3, "async/sequential equivalence", async_equivalence},
      {4, "gradient suite", gradient_suite},
      {5, "sparsity and FLOPs at rho=0.95", sparsity_flops},
      {6, "lossless performance at rho=0.93", lossless},
      {7, "data efficiency", data_efficiency},
      {8, "direction ablation ordering", ablation},
      {9, "cache coherence properties", cache_properties},
      {10, "pipeline scheduling", scheduling},
  };
  int failed = 0, ran = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    std::printf("criterion %d: %s\n", c.id, c.name);
    std::fflush(stdout);
    const auto t0 = Clock::now();
    bool ok = false;
    try {
      ok = c.run(s);
    } catch (const std::exception& e) {
      note("error: %s", e.what());
    }
    char line[160];
    std::snprintf(line, sizeof line, "%s criterion %d %s (%.0fs)", ok ? "PASS" : "FAIL", c.id, c.name,
                  seconds_since(t0));
    std::printf("%s\n", line);
    std::fflush(stdout);
    ++ran;
    failed += ok ? 0 : 1;
  }
  std::printf("%d of %d criteria passed\n", ran - failed, ran);
  return failed ? 1 : 0;
}
