#pragma once

#include <vector>

#include "odrt/rng.hpp"
#include "odrt/tensor.hpp"

namespace odrt {

enum class ScheduleKind : std::uint8_t { Cosine = 0, Linear = 1 };

struct ScheduleParams {
  int steps = 50;
  ScheduleKind kind = ScheduleKind::Cosine;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  bool clip_sample = true;
  double clip_range = 1.0;
};

// Discrete noise schedule indexed by k = 1..K; alpha_bar(0) == 1.
class NoiseSchedule {
 public:
  explicit NoiseSchedule(const ScheduleParams& params);

  int steps() const { return static_cast<int>(betas_.size()); }
  double beta(int k) const { return betas_.at(static_cast<std::size_t>(k - 1)); }
  double alpha(int k) const { return 1.0 - beta(k); }
  double alpha_bar(int k) const { return alpha_bars_.at(static_cast<std::size_t>(k)); }
  const ScheduleParams& params() const { return params_; }

  // a_k = sqrt(alpha_bar_k) a_0 + sqrt(1 - alpha_bar_k) eps
  Tensor add_noise(const Tensor& a0, const Tensor& eps, int k) const;

  // Reverse step k -> k-1: posterior mean plus sigma_k z, with z drawn from
  // `noise` for k > 1 and no noise at k == 1.
  Tensor ddpm_step(const Tensor& a_k, const Tensor& eps_hat, int k, Rng& noise) const;

  // Deterministic (eta = 0) step k -> k - stride.
  Tensor ddim_step(const Tensor& a_k, const Tensor& eps_hat, int k, int stride) const;

 private:
  Tensor predict_x0(const Tensor& a_k, const Tensor& eps_hat, int k) const;

  ScheduleParams params_;
  std::vector<double> betas_;
  std::vector<double> alpha_bars_;
};

enum class SamplerKind : std::uint8_t { Ddpm = 0, Ddim = 1 };

// The reverse-time timesteps one diffusion visits. Lattice index of step i
// (0-based) is size() - i, so the first step always sits at k == size().
struct SamplerPlan {
  SamplerKind kind = SamplerKind::Ddpm;
  int stride = 1;
  std::vector<int> timesteps;

  static SamplerPlan ddpm(int steps);
  static SamplerPlan ddim(int train_steps, int inference_steps);

  int size() const { return static_cast<int>(timesteps.size()); }
  int lattice_k(int i) const { return size() - i; }

  Tensor initial_noise(const Rng& diffusion_rng, std::size_t rows, std::size_t cols) const;
  Tensor step(const NoiseSchedule& schedule, const Tensor& a, const Tensor& eps_hat, int i,
              const Rng& diffusion_rng) const;
};

}  // namespace odrt
