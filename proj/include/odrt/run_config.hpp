#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "odrt/training.hpp"

namespace odrt {

// Where a run reads and writes its artifacts. Empty file entries resolve
// to fixed names inside `out`.
struct RunPaths {
  std::filesystem::path out = "out";
  std::filesystem::path demos;
  std::filesystem::path dref;
  std::filesystem::path policy;
  std::filesystem::path pruner;

  std::filesystem::path demos_file() const { return demos.empty() ? out / "demos.odrt" : demos; }
  std::filesystem::path dref_file() const { return dref.empty() ? out / "dref.odrt" : dref; }
  std::filesystem::path policy_file() const { return policy.empty() ? out / "policy.odrt" : policy; }
  std::filesystem::path pruner_file() const { return pruner.empty() ? out / "pruner.odrt" : pruner; }
};

struct SamplerConfig {
  SamplerKind kind = SamplerKind::Ddpm;
  int ddim_steps = 10;

  SamplerPlan plan(int train_steps) const;
};

struct RunConfig {
  std::uint64_t seed = 0;
  DiTConfig policy;
  SamplerConfig sampler;
  EnvConfig env;
  DenseTrainConfig dense;
  PrunerConfig pruner;
  PrunerTrainConfig pruner_training;
  PipelineMode mode = PipelineMode::Sequential;
  int episodes = 50;
  int held_out = 2;  // reference trajectories kept out of pruner training
  RunPaths paths;

  void validate() const;
};

// Command-line values that take precedence over the file.
struct RunOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<double> rho;
  std::optional<std::string> mode;
  std::optional<int> episodes;
  std::optional<std::string> out;
  std::optional<std::string> directions;
  std::optional<std::string> sampler;
  std::optional<int> ddim_steps;
};

// JSON text -> config. Missing keys keep their defaults; unknown keys and
// wrongly typed values are config errors naming the offending key.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::filesystem::path& path);
void apply_overrides(RunConfig& cfg, const RunOverrides& o);
// Fully resolved config as pretty JSON with sorted keys.
std::string dump_run_config(const RunConfig& cfg);
// Hash of the resolved config without output paths, hex encoded.
std::string run_config_hash(const RunConfig& cfg);

}  // namespace odrt
