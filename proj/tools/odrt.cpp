// Command-line front end. Every subcommand resolves the run config
// (defaults <- --config file <- flags) before touching any module.
#include <iostream>

#include "CLI11.hpp"
#include "odrt/commands.hpp"
#include "odrt/error.hpp"

namespace {

struct Flags {
  std::string config;
  odrt::RunOverrides o;
  std::uint64_t seed = 0;
  double rho = 0.0;
  std::string mode, out, directions, sampler;
  int episodes = 0, ddim_steps = 0;
};

void add_common(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "JSON run config; flags below override its values")->check(CLI::ExistingFile);
  cmd->add_option("--seed", f.seed, "run seed");
  cmd->add_option("--rho", f.rho, "target pruning rate");
  cmd->add_option("--mode", f.mode, "pipeline mode")->check(CLI::IsMember({"sequential", "async"}));
  cmd->add_option("--episodes", f.episodes, "evaluation episodes");
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--directions", f.directions, "reuse directions, any non-empty subset of F,T,R");
  cmd->add_option("--sampler", f.sampler, "sampler")->check(CLI::IsMember({"ddpm", "ddim"}));
  cmd->add_option("--ddim-steps", f.ddim_steps, "inference steps for the ddim sampler");
}

odrt::RunConfig resolve(CLI::App* cmd, const Flags& f) {
  odrt::RunConfig cfg = f.config.empty() ? odrt::RunConfig{} : odrt::load_run_config(f.config);
  odrt::RunOverrides o;
  if (cmd->count("--seed")) o.seed = f.seed;
  if (cmd->count("--rho")) o.rho = f.rho;
  if (cmd->count("--mode")) o.mode = f.mode;
  if (cmd->count("--episodes")) o.episodes = f.episodes;
  if (cmd->count("--out")) o.out = f.out;
  if (cmd->count("--directions")) o.directions = f.directions;
  if (cmd->count("--sampler")) o.sampler = f.sampler;
  if (cmd->count("--ddim-steps")) o.ddim_steps = f.ddim_steps;
  odrt::apply_overrides(cfg, o);
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"odrt: sparse diffusion-policy toolkit"};
  app.require_subcommand(1);
  Flags f;
  std::string source = "expert";
  bool dense = false;

  auto* record = app.add_subcommand("record-demos", "record expert demos or dense-policy reference rollouts");
  record->add_option("--source", source, "expert (demos.odrt) or policy (dref.odrt)")
      ->check(CLI::IsMember({"expert", "policy"}));
  auto* train_policy = app.add_subcommand("train-policy", "train the dense policy on demos.odrt");
  auto* train_pruner = app.add_subcommand("train-pruner", "train the pruner on dref.odrt");
  auto* roll = app.add_subcommand("rollout", "run evaluation episodes");
  roll->add_flag("--dense", dense, "ignore any pruner checkpoint");
  auto* bench = app.add_subcommand("bench", "sparsity, FLOPs, timings and success rates");
  auto* masks = app.add_subcommand("export-masks", "mask CSV and per-iteration SVG figures");
  auto* similarity = app.add_subcommand("analyze-similarity", "cross-rollout residual similarity");
  for (auto* c : {record, train_policy, train_pruner, roll, bench, masks, similarity}) add_common(c, f);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    CLI::App* cmd = app.get_subcommands().front();
    const odrt::RunConfig cfg = resolve(cmd, f);
    std::ostream& log = std::cout;
    if (cmd == record) odrt::cmd_record_demos(cfg, source, log);
    if (cmd == train_policy) odrt::cmd_train_policy(cfg, log);
    if (cmd == train_pruner) odrt::cmd_train_pruner(cfg, log);
    if (cmd == roll) odrt::cmd_rollout(cfg, dense, log);
    if (cmd == bench) {
      std::optional<odrt::PipelineMode> only;
      if (cmd->count("--mode")) only = cfg.mode;
      odrt::cmd_bench(cfg, only, log);
    }
    if (cmd == masks) odrt::cmd_export_masks(cfg, log);
    if (cmd == similarity) odrt::cmd_analyze_similarity(cfg, log);
  } catch (const odrt::Error& e) {
    std::cerr << e.what() << "\n";
    return odrt::exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
