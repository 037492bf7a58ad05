#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "odrt/commands.hpp"
#include "odrt/error.hpp"
#include "odrt/ops.hpp"
#include "odrt/training.hpp"

namespace fx {

using namespace odrt;

// d=8, L=1, K=4: small enough for finite differences over whole diffusions.
inline DiTConfig mini_config() {
  DiTConfig c;
  c.d_model = 8;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_ff = 16;
  c.horizon = 4;
  c.diffusion_steps = 4;
  c.clip_sample = false;
  return c;
}

inline DiTConfig small_config() {
  DiTConfig c;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 32;
  c.horizon = 8;
  c.diffusion_steps = 10;
  return c;
}

inline PrunerConfig mini_pruner_config() { return PrunerConfig{4, 2, 4, 1.0}; }
inline PrunerConfig small_pruner_config() { return PrunerConfig{8, 2, 8, 1.0}; }

// Default init is std 0.02, which makes every block nearly zero; tests want
// residuals large enough to tell blocks apart.
inline void randomize(const std::vector<NamedTensor>& params, std::uint64_t seed, double stddev) {
  Rng rng(seed);
  for (const auto& p : params) {
    Tensor t = p.tensor;
    for (double& v : t.mutable_values()) v = stddev * rng.normal();
  }
}

inline DiTPolicy make_policy(const DiTConfig& cfg, std::uint64_t seed = 1, double stddev = 0.3) {
  Rng init(seed);
  DiTPolicy p(cfg, init);
  randomize(p.parameters(), seed + 100, stddev);
  return p;
}

inline Pruner make_pruner(const DiTConfig& cfg, const PrunerConfig& pc, std::uint64_t seed = 2, double stddev = 0.5) {
  Rng init(seed);
  Pruner p(pc, cfg, init);
  randomize(p.parameters(), seed + 100, stddev);
  return p;
}

inline std::vector<double> random_obs(Rng& rng, int dim) {
  std::vector<double> o(static_cast<std::size_t>(dim));
  for (double& v : o) v = rng.uniform(-1.0, 1.0);
  return o;
}

inline std::vector<double> snapshot(const std::vector<NamedTensor>& params) {
  std::vector<double> out;
  for (const auto& p : params) out.insert(out.end(), p.tensor.values().begin(), p.tensor.values().end());
  return out;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("odrt_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

template <class F>
ErrorKind error_kind_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  throw std::runtime_error("expected an odrt::Error");
}

}  // namespace fx
