#include <fstream>
#include <sstream>

#include "doctest.h"
#include "fixtures.hpp"
#include "odrt/commands.hpp"

using namespace odrt;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string tiny_json(const fs::path& out) {
  return R"({"seed": 3, "episodes": 2, "held_out": 1,
 "policy": {"d_model": 16, "n_layers": 1, "n_heads": 2, "d_ff": 32, "diffusion_steps": 10},
 "env": {"max_steps": 24},
 "dense_training": {"epochs": 1, "demo_episodes": 3},
 "pruner": {"width": 8, "heads": 2, "ffn_hidden": 8},
 "pruner_training": {"epochs": 1, "trajectories": 1},
 "paths": {"out": ")" +
         out.string() + R"("}})";
}

MaskExport uniform_export(int B, int K, int R) {
  MaskExport e;
  e.num_blocks = B;
  e.steps = K;
  for (int r = 1; r <= R; ++r)
    for (int k = K; k >= 1; --k)
      for (int b = 1; b <= B; ++b) e.rows.push_back({r, k, b, BlockChoice::Compute, {0.25, 0.25, 0.25, 0.25}, false});
  return e;
}

// every "<rect ... x=X ..." whose x equals `x`, excluding the legend
std::vector<std::string> rects_at(const std::string& svg, const std::string& x) {
  std::vector<std::string> out;
  std::istringstream in(svg);
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("<rect x=\"" + x + "\"", 0) == 0 && line.find("width=\"16\"") != std::string::npos)
      out.push_back(line);
  }
  return out;
}

bool has_line(const std::string& text, const std::string& needle) { return text.find(needle) != std::string::npos; }

void run_pipeline(const RunConfig& cfg) {
  std::ostringstream log;
  cmd_record_demos(cfg, "expert", log);
  cmd_train_policy(cfg, log);
  cmd_record_demos(cfg, "policy", log);
  cmd_train_pruner(cfg, log);
  cmd_rollout(cfg, false, log);
  cmd_export_masks(cfg, log);
  cmd_analyze_similarity(cfg, log);
}

}  // namespace

TEST_SUITE("cli_io") {
  TEST_CASE("config parsing rejects unknown keys and wrong types") {
    const RunConfig c = parse_run_config(tiny_json("/tmp/x"));
    CHECK(c.seed == 3);
    CHECK(c.policy.d_model == 16);
    CHECK(c.env.max_steps == 24);
    CHECK(c.paths.out == fs::path("/tmp/x"));
    try {
      parse_run_config(R"({"policy": {"d_modle": 16}})");
      FAIL("expected a config error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Config);
      CHECK(has_line(e.what(), "d_modle"));
    }
    try {
      parse_run_config(R"({"episodes": "many"})");
      FAIL("expected a config error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Config);
      CHECK(has_line(e.what(), "episodes"));
    }
    CHECK(fx::error_kind_of([] { parse_run_config(R"({"bogus": 1})"); }) == ErrorKind::Config);
    CHECK(fx::error_kind_of([] { parse_run_config("{not json"); }) == ErrorKind::Config);
    CHECK(fx::error_kind_of([] { parse_run_config(R"({"sampler": {"kind": "euler"}})"); }) == ErrorKind::Config);
  }

  TEST_CASE("overrides win over file values") {
    RunConfig c = parse_run_config(tiny_json("/tmp/x"));
    RunOverrides o;
    o.seed = 9;
    o.rho = 0.8;
    o.mode = "async";
    o.episodes = 7;
    o.out = "/tmp/y";
    o.directions = "TR";
    o.sampler = "ddim";
    o.ddim_steps = 5;
    apply_overrides(c, o);
    CHECK(c.seed == 9);
    CHECK(c.pruner_training.rho == 0.8);
    CHECK(c.mode == PipelineMode::Async);
    CHECK(c.episodes == 7);
    CHECK(c.paths.out == fs::path("/tmp/y"));
    CHECK(c.pruner_training.directions.str() == DirectionSet::parse("TR").str());
    CHECK(c.sampler.kind == SamplerKind::Ddim);
    CHECK(c.sampler.ddim_steps == 5);
    RunOverrides bad;
    bad.mode = "parallel";
    CHECK(fx::error_kind_of([&] { apply_overrides(c, bad); }) != ErrorKind::Numeric);
  }

  TEST_CASE("dump round trip and hash ignores paths") {
    const RunConfig c = parse_run_config(tiny_json("/tmp/a"));
    const std::string dumped = dump_run_config(c);
    const RunConfig back = parse_run_config(dumped);
    CHECK(dump_run_config(back) == dumped);
    CHECK(run_config_hash(back) == run_config_hash(c));
    const RunConfig moved = parse_run_config(tiny_json("/tmp/b"));
    CHECK(run_config_hash(moved) == run_config_hash(c));
    RunConfig reseeded = c;
    reseeded.seed = 4;
    CHECK(run_config_hash(reseeded) != run_config_hash(c));
  }

  TEST_CASE("exit codes and stage seeds") {
    CHECK(exit_code(ErrorKind::Usage) == 2);
    CHECK(exit_code(ErrorKind::Config) == 2);
    CHECK(exit_code(ErrorKind::Data) == 3);
    CHECK(exit_code(ErrorKind::Compat) == 4);
    CHECK(exit_code(ErrorKind::Numeric) == 5);
    CHECK(exit_code(ErrorKind::Training) == 5);
    CHECK(stream_seed(1, "eval") == stream_seed(1, "eval"));
    CHECK(stream_seed(1, "eval") != stream_seed(1, "dref"));
    CHECK(stream_seed(1, "eval") != stream_seed(2, "eval"));
  }

  TEST_CASE("mask export csv round trip and validation") {
    const DiTPolicy policy = fx::make_policy(fx::small_config());
    const Pruner pruner = fx::make_pruner(policy.config(), fx::small_pruner_config());
    EnvConfig env;
    env.max_steps = 16;
    SparseAgent agent(policy, &pruner, SamplerPlan::ddpm(10));
    const TrajectoryRecord rec = rollout(agent, env, 8, 4);
    std::vector<MaskPlan> plans;
    for (const auto& it : rec.iterations) plans.push_back(*it.mask);
    const MaskExport e = mask_export(plans);
    const int B = policy.config().num_blocks();
    CHECK(e.rows.size() == plans.size() * 10 * static_cast<std::size_t>(B));
    validate_mask_export(e);

    const std::string csv = mask_export_csv(e, {"seed=4"});
    CHECK(csv.rfind("# seed=4\n", 0) == 0);
    const MaskExport back = parse_mask_export_csv(csv);
    REQUIRE(back.rows.size() == e.rows.size());
    CHECK(back.num_blocks == e.num_blocks);
    CHECK(back.steps == e.steps);
    for (std::size_t i = 0; i < e.rows.size(); ++i) {
      CHECK(back.rows[i].r == e.rows[i].r);
      CHECK(back.rows[i].k == e.rows[i].k);
      CHECK(back.rows[i].b == e.rows[i].b);
      CHECK(back.rows[i].choice == e.rows[i].choice);
      CHECK(back.rows[i].forced == e.rows[i].forced);
      for (std::size_t j = 0; j < 4; ++j) CHECK(back.rows[i].p[j] == e.rows[i].p[j]);
    }
    CHECK(back.sparsity() == e.sparsity());
    CHECK(e.sparsity() == doctest::Approx(1.0 - double(e.compute_count()) / double(e.rows.size())).epsilon(1e-15));

    MaskExport bad = e;
    bad.rows[5].p[0] += 0.01;
    try {
      validate_mask_export(bad);
      FAIL("expected a data error");
    } catch (const Error& err) {
      CHECK(err.kind() == ErrorKind::Data);
      CHECK(has_line(err.what(), "row 5"));
    }
    // an unforced choice that is not the argmax
    MaskExport wrong = uniform_export(3, 4, 1);
    wrong.rows[2].p = {0.1, 0.7, 0.1, 0.1};
    CHECK(fx::error_kind_of([&] { validate_mask_export(wrong); }) == ErrorKind::Data);
    wrong.rows[2].forced = true;
    validate_mask_export(wrong);
    CHECK(fx::error_kind_of([] { parse_mask_export_csv("r,k\n1,2\n"); }) == ErrorKind::Data);
  }

  TEST_CASE("svg: uniform quarters, determinism, missing iteration") {
    const MaskExport e = uniform_export(3, 4, 2);
    const std::string svg = render_mask_svg(e, 2);
    CHECK(svg == render_mask_svg(e, 2));
    CHECK(svg.rfind("<svg", 0) == 0);
    // column k=K sits at the left margin
    for (const std::string x : {"40.000", "88.000"}) {
      const auto rects = rects_at(svg, x);
      REQUIRE(rects.size() == 3 * 4);
      for (const auto& r : rects) CHECK(has_line(r, "height=\"4.000\""));
    }
    std::size_t cells = 0;
    for (std::size_t pos = 0; (pos = svg.find("height=\"4.000\"", pos)) != std::string::npos; ++pos) ++cells;
    CHECK(cells == 3 * 4 * 4);
    CHECK(render_mask_svg(e, 1) != svg);
    CHECK(fx::error_kind_of([&] { render_mask_svg(e, 3); }) == ErrorKind::Data);
  }

  TEST_CASE("end to end tiny run: artifacts, provenance, consistency, determinism") {
    const fs::path out = fx::temp_dir("cli_e2e");
    const RunConfig cfg = parse_run_config(tiny_json(out));
    const std::string hash = run_config_hash(cfg);
    std::ostringstream log;

    // before anything exists
    CHECK(fx::error_kind_of([&] { cmd_train_policy(cfg, log); }) == ErrorKind::Usage);
    try {
      cmd_bench(cfg, std::nullopt, log);
      FAIL("expected a usage error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Usage);
      CHECK(has_line(e.what(), "policy.odrt"));
      CHECK(has_line(e.what(), "train-policy"));
    }

    cmd_record_demos(cfg, "expert", log);
    cmd_train_policy(cfg, log);

    // dense baseline before a pruner exists
    const BenchResult dense = cmd_bench(cfg, PipelineMode::Sequential, log);
    CHECK(dense.sparsity == 0.0);
    CHECK(dense.flops_ratio == 1.0);
    CHECK(dense.masks.sparsity() == 0.0);

    CHECK(fx::error_kind_of([&] { cmd_export_masks(cfg, log); }) == ErrorKind::Usage);
    CHECK(fx::error_kind_of([&] { cmd_train_pruner(cfg, log); }) == ErrorKind::Usage);
    CHECK(fx::error_kind_of([&] { cmd_record_demos(cfg, "oracle", log); }) == ErrorKind::Usage);

    cmd_record_demos(cfg, "policy", log);
    cmd_train_pruner(cfg, log);
    cmd_rollout(cfg, false, log);
    cmd_export_masks(cfg, log);
    cmd_analyze_similarity(cfg, log);
    const BenchResult sparse = cmd_bench(cfg, std::nullopt, log);

    const std::vector<std::string> files = {"demos.odrt",     "policy.odrt",    "dref.odrt",      "pruner.odrt",
                                            "rollouts.odrt",  "rollouts.csv",   "train_policy.csv",
                                            "train_pruner.csv", "bench.txt",    "bench_masks.csv", "masks.csv",
                                            "masks_r1.svg",   "similarity.csv", "similarity.txt", "run_config.json"};
    for (const auto& f : files) {
      INFO(f);
      REQUIRE(fs::exists(out / f));
    }
    // text artifacts carry the hash and seed in their header
    for (const auto& f : {"rollouts.csv", "train_policy.csv", "train_pruner.csv", "bench.txt", "bench_masks.csv",
                          "masks.csv", "masks_r1.svg", "similarity.csv", "similarity.txt"}) {
      INFO(f);
      const std::string text = slurp(out / f);
      CHECK(has_line(text, "run_config_hash=" + hash));
      CHECK(has_line(text, "seed=3"));
    }
    for (const auto& f : {"demos.odrt", "policy.odrt", "dref.odrt", "pruner.odrt", "rollouts.odrt"}) {
      INFO(f);
      const Envelope env = read_envelope(out / f);
      CHECK(env.metadata.at("run_config_hash") == hash);
      CHECK(env.metadata.at("seed") == "3");
    }

    // bench sparsity is recomputable from its own masks
    const MaskExport bench_masks = parse_mask_export_csv(slurp(out / "bench_masks.csv"));
    const int B = cfg.policy.num_blocks();
    const int K = cfg.sampler.plan(cfg.policy.diffusion_steps).size();
    // R counts every diffusion across the benchmark episodes
    const int R = sparse.diffusions;
    REQUIRE(R > 0);
    CHECK(bench_masks.rows.size() == static_cast<std::size_t>(B * K * R));
    const double recomputed = 1.0 - double(bench_masks.compute_count()) / double(B * K * R);
    CHECK(sparse.sparsity == doctest::Approx(recomputed).epsilon(1e-12));
    CHECK(sparse.flops_ratio > 0.0);

    // export-masks: cardinality R x K x 3L and the forced k=K column
    const MaskExport masks = parse_mask_export_csv(slurp(out / "masks.csv"));
    const auto Rm = masks.iterations().size();
    CHECK(masks.rows.size() == Rm * static_cast<std::size_t>(K * 3 * cfg.policy.n_layers));
    for (std::size_t r = 1; r <= Rm; ++r) CHECK(fs::exists(out / ("masks_r" + std::to_string(r) + ".svg")));
    const std::string svg = slurp(out / "masks_r1.svg");
    CHECK(svg == render_mask_svg(masks, 1, "command=export-masks run_config_hash=" + hash + " seed=3"));
    const auto first_col = rects_at(svg, "40.000");
    REQUIRE(first_col.size() == static_cast<std::size_t>(B));
    for (const auto& r : first_col) {
      CHECK(has_line(r, "fill=\"#2b6cb0\""));
      CHECK(has_line(r, "height=\"16.000\""));
    }

    // rerunning every stage into a fresh directory reproduces the artifacts
    const fs::path out2 = fx::temp_dir("cli_e2e_again");
    RunConfig cfg2 = cfg;
    cfg2.paths.out = out2;
    run_pipeline(cfg2);
    for (const auto& f : {"demos.odrt", "policy.odrt", "dref.odrt", "pruner.odrt", "rollouts.odrt", "rollouts.csv",
                          "train_policy.csv", "train_pruner.csv", "masks.csv", "masks_r1.svg", "similarity.csv",
                          "similarity.txt"}) {
      INFO(f);
      CHECK(slurp(out / f) == slurp(out2 / f));
    }
  }

  TEST_CASE("checkpoint incompatible with the run config") {
    const fs::path out = fx::temp_dir("cli_compat");
    RunConfig cfg = parse_run_config(tiny_json(out));
    std::ostringstream log;
    cmd_record_demos(cfg, "expert", log);
    cmd_train_policy(cfg, log);
    RunConfig wider = cfg;
    wider.policy.d_model = 32;
    wider.policy.d_ff = 64;
    try {
      cmd_rollout(wider, true, log);
      FAIL("expected a compatibility error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Compat);
      CHECK(exit_code(e.kind()) == 4);
    }
    CHECK(fx::error_kind_of([&] { load_trajectories(out / "demos.odrt", wider.policy, "record-demos"); }) ==
          ErrorKind::Compat);
  }
}
