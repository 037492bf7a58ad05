#pragma once

#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "odrt/error.hpp"
#include "odrt/mask_export.hpp"
#include "odrt/run_config.hpp"

namespace odrt {

// Process exit status per error category.
int exit_code(ErrorKind kind);

// Independent seed for a named stage of a run.
std::uint64_t stream_seed(std::uint64_t run_seed, const std::string& stage);

// "command=..", "run_config_hash=..", "seed=.."
std::vector<std::string> provenance_lines(const RunConfig& cfg, const std::string& command);
std::map<std::string, std::string> provenance_metadata(const RunConfig& cfg, const std::string& command);

// Artifact loading with the checks every subcommand shares. Missing files are
// usage errors naming the subcommand that produces them.
DiTPolicy load_policy(const RunConfig& cfg);
Envelope pruner_envelope(const Pruner& pruner, const DirectionSet& dirs, std::map<std::string, std::string> metadata);
struct LoadedPruner {
  Pruner pruner;
  DirectionSet directions;
};
LoadedPruner load_pruner(const std::filesystem::path& path, const DiTConfig& policy_cfg);
std::vector<TrajectoryRecord> load_trajectories(const std::filesystem::path& path, const DiTConfig& policy_cfg,
                                                const char* producer);

// source: "expert" writes demos.odrt, "policy" writes dref.odrt from dense rollouts.
void cmd_record_demos(const RunConfig& cfg, const std::string& source, std::ostream& log);
void cmd_train_policy(const RunConfig& cfg, std::ostream& log);
void cmd_train_pruner(const RunConfig& cfg, std::ostream& log);
// Uses pruner.odrt when present unless `dense`.
void cmd_rollout(const RunConfig& cfg, bool dense, std::ostream& log);

struct ModeTiming {
  std::string mode;
  double t_total_median_us = 0.0;
  double t_encode_mean_us = 0.0;
  double t_prune_mean_us = 0.0;
  double t_decode_mean_us = 0.0;
  double t_mask_wait_mean_us = 0.0;
  double t_overlap_hidden_mean_us = 0.0;
};

struct BenchResult {
  int episodes = 0;
  int diffusions = 0;
  double sparsity = 0.0;
  double flops_dense = 0.0;   // per diffusion
  double flops_sparse = 0.0;  // per diffusion
  double flops_ratio = 0.0;
  double decoder_flops_ratio = 0.0;
  double success_rate_dense = 0.0;
  double success_rate_sparse = 0.0;
  std::vector<ModeTiming> timings;
  MaskExport masks;

  std::string report(const std::vector<std::string>& preamble) const;
};

// Dense baseline against the sparse policy (or the dense plan when no pruner
// checkpoint exists). `only` restricts timing to one pipeline mode.
BenchResult cmd_bench(const RunConfig& cfg, std::optional<PipelineMode> only, std::ostream& log);
void cmd_export_masks(const RunConfig& cfg, std::ostream& log);
void cmd_analyze_similarity(const RunConfig& cfg, std::ostream& log);

}  // namespace odrt
