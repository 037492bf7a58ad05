#include "odrt/schedule.hpp"

#include <algorithm>
#include <cmath>

#include "odrt/error.hpp"
#include "odrt/ops.hpp"

namespace odrt {

namespace {

double cosine_alpha_bar(double t) {
  constexpr double s = 0.008;
  const double c = std::cos((t + s) / (1.0 + s) * M_PI / 2.0);
  return c * c;
}

}  // namespace

NoiseSchedule::NoiseSchedule(const ScheduleParams& params) : params_(params) {
  require(params.steps >= 1, ErrorKind::Config, "schedule needs at least one step");
  const int K = params.steps;
  betas_.resize(static_cast<std::size_t>(K));
  for (int k = 1; k <= K; ++k) {
    double beta = 0.0;
    if (params.kind == ScheduleKind::Cosine) {
      const double t0 = static_cast<double>(k - 1) / K;
      const double t1 = static_cast<double>(k) / K;
      beta = std::min(1.0 - cosine_alpha_bar(t1) / cosine_alpha_bar(t0), 0.999);
    } else {
      beta = K == 1 ? params.beta_start
                    : params.beta_start + (params.beta_end - params.beta_start) * (k - 1) / (K - 1);
    }
    betas_[static_cast<std::size_t>(k - 1)] = beta;
  }
  alpha_bars_.resize(static_cast<std::size_t>(K) + 1);
  alpha_bars_[0] = 1.0;
  for (int k = 1; k <= K; ++k) {
    alpha_bars_[static_cast<std::size_t>(k)] =
        alpha_bars_[static_cast<std::size_t>(k - 1)] * (1.0 - betas_[static_cast<std::size_t>(k - 1)]);
  }
}

Tensor NoiseSchedule::add_noise(const Tensor& a0, const Tensor& eps, int k) const {
  const double ab = alpha_bar(k);
  return ops::add(ops::scale(a0, std::sqrt(ab)), ops::scale(eps, std::sqrt(1.0 - ab)));
}

Tensor NoiseSchedule::predict_x0(const Tensor& a_k, const Tensor& eps_hat, int k) const {
  const double ab = alpha_bar(k);
  Tensor x0 = ops::scale(ops::sub(a_k, ops::scale(eps_hat, std::sqrt(1.0 - ab))), 1.0 / std::sqrt(ab));
  if (params_.clip_sample) x0 = ops::clamp(x0, -params_.clip_range, params_.clip_range);
  return x0;
}

Tensor NoiseSchedule::ddpm_step(const Tensor& a_k, const Tensor& eps_hat, int k, Rng& noise) const {
  if (k < 1 || k > steps()) {
    fail(ErrorKind::Contract, "ddpm_step: k=" + std::to_string(k) + " outside [1, " +
                                  std::to_string(steps()) + "]");
  }
  const double ab = alpha_bar(k);
  const double ab_prev = alpha_bar(k - 1);
  const double b = beta(k);
  const double coef_x0 = std::sqrt(ab_prev) * b / (1.0 - ab);
  const double coef_xt = std::sqrt(1.0 - b) * (1.0 - ab_prev) / (1.0 - ab);
  Tensor mean = ops::add(ops::scale(predict_x0(a_k, eps_hat, k), coef_x0), ops::scale(a_k, coef_xt));
  if (k == 1) return mean;
  const double sigma = std::sqrt((1.0 - ab_prev) / (1.0 - ab) * b);
  return ops::add(mean, noise.normal_tensor(a_k.shape(), sigma));
}

Tensor NoiseSchedule::ddim_step(const Tensor& a_k, const Tensor& eps_hat, int k, int stride) const {
  if (stride < 1 || k > steps() || k - stride < 0) {
    fail(ErrorKind::Contract, "ddim_step: stride " + std::to_string(stride) + " from k=" +
                                  std::to_string(k) + " overshoots");
  }
  const double ab = alpha_bar(k);
  const double ab_prev = alpha_bar(k - stride);
  const Tensor x0 = predict_x0(a_k, eps_hat, k);
  Tensor eps = eps_hat;
  if (params_.clip_sample) {
    eps = ops::scale(ops::sub(a_k, ops::scale(x0, std::sqrt(ab))), 1.0 / std::sqrt(1.0 - ab));
  }
  if (k - stride == 0) return x0;
  return ops::add(ops::scale(x0, std::sqrt(ab_prev)), ops::scale(eps, std::sqrt(1.0 - ab_prev)));
}

SamplerPlan SamplerPlan::ddpm(int steps) {
  require(steps >= 1, ErrorKind::Config, "ddpm sampler needs steps >= 1");
  SamplerPlan p;
  p.kind = SamplerKind::Ddpm;
  p.stride = 1;
  for (int k = steps; k >= 1; --k) p.timesteps.push_back(k);
  return p;
}

SamplerPlan SamplerPlan::ddim(int train_steps, int inference_steps) {
  if (inference_steps < 1 || train_steps % inference_steps != 0) {
    fail(ErrorKind::Config, "ddim steps " + std::to_string(inference_steps) + " must divide " +
                                std::to_string(train_steps));
  }
  SamplerPlan p;
  p.kind = SamplerKind::Ddim;
  p.stride = train_steps / inference_steps;
  for (int i = inference_steps; i >= 1; --i) p.timesteps.push_back(i * p.stride);
  return p;
}

Tensor SamplerPlan::initial_noise(const Rng& diffusion_rng, std::size_t rows, std::size_t cols) const {
  Rng r = diffusion_rng.split(0);
  return r.normal_tensor(Shape{rows, cols});
}

Tensor SamplerPlan::step(const NoiseSchedule& schedule, const Tensor& a, const Tensor& eps_hat, int i,
                         const Rng& diffusion_rng) const {
  const int t = timesteps.at(static_cast<std::size_t>(i));
  if (kind == SamplerKind::Ddpm) {
    Rng noise = diffusion_rng.split(1 + static_cast<std::uint64_t>(t));
    return schedule.ddpm_step(a, eps_hat, t, noise);
  }
  return schedule.ddim_step(a, eps_hat, t, stride);
}

}  // namespace odrt
