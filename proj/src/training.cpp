#include "odrt/training.hpp"

#include <cmath>
#include <cstdio>

#include "odrt/error.hpp"
#include "odrt/ops.hpp"

namespace odrt {

Adam::Adam(std::vector<NamedTensor> params, const AdamConfig& cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.size(), 0.0);
    v_.emplace_back(p.tensor.size(), 0.0);
  }
}

void Adam::zero_grad() {
  for (const auto& p : params_) p.tensor.zero_grad();
}

double Adam::grad_norm() const {
  double s = 0.0;
  for (const auto& p : params_) {
    if (!p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad()) s += g * g;
  }
  return std::sqrt(s);
}

void Adam::clip_grad_norm(double max_norm) {
  const double n = grad_norm();
  if (!(n > max_norm)) return;
  const double f = max_norm / n;
  for (const auto& p : params_) {
    if (!p.tensor.has_grad()) continue;
    for (double& g : p.tensor.grad_buffer()) g *= f;
  }
}

void Adam::step(double lr_scale) {
  ++t_;
  const double lr = cfg_.lr * lr_scale;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor p = params_[i].tensor;
    auto w = p.mutable_values();
    if (cfg_.weight_decay > 0.0)
      for (double& x : w) x -= lr * cfg_.weight_decay * x;
    if (!p.has_grad()) continue;
    auto g = p.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
      w[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps);
    }
  }
}

std::vector<TrajectoryRecord> run_episodes(Agent& agent, const EnvConfig& env, int horizon, int episodes,
                                           std::uint64_t seed, bool as_reference, const std::string& config_hash) {
  std::vector<TrajectoryRecord> out;
  out.reserve(static_cast<std::size_t>(std::max(episodes, 0)));
  for (int i = 0; i < episodes; ++i) {
    out.push_back(rollout(agent, env, horizon, episode_seed(seed, static_cast<std::size_t>(i)), as_reference,
                          config_hash));
  }
  return out;
}

std::vector<TrajectoryRecord> record_expert_demos(const EnvConfig& env, int horizon, int episodes,
                                                  std::uint64_t seed, int settle_steps) {
  env.validate(horizon);
  std::vector<TrajectoryRecord> out;
  for (int e = 0; e < episodes; ++e) {
    const std::uint64_t s = episode_seed(seed, static_cast<std::size_t>(e));
    PointReachEnv sim(env);
    sim.reset(Rng(s).split(1));
    TrajectoryRecord rec;
    rec.seed = s;
    rec.goal = sim.goal();
    int after = -1;  // steps taken since the first success
    for (int r = 1; sim.steps() < env.max_steps && after < settle_steps; ++r) {
      const Observation obs = sim.observe();
      IterationRecord it;
      it.r = r;
      it.obs = obs.values;
      it.executed = ops::scale(expert_action(obs.position, obs.goal, env.expert_gain, env.v_max, horizon),
                               1.0 / env.v_max);
      it.reference = it.executed;
      auto a = it.executed.values();
      sim.step({a[0] * env.v_max, a[1] * env.v_max});
      it.success = sim.success();
      if (after >= 0 || it.success) ++after;
      rec.iterations.push_back(std::move(it));
    }
    rec.success = after >= 0;
    rec.env_steps = sim.steps();
    out.push_back(std::move(rec));
  }
  return out;
}

DemoSet demos_from_records(const std::vector<TrajectoryRecord>& records) {
  DemoSet d;
  for (const auto& rec : records) {
    for (const auto& it : rec.iterations) {
      d.obs.push_back(it.obs);
      d.actions.push_back(it.reference.defined() ? it.reference : it.executed);
    }
  }
  if (d.size() == 0) fail(ErrorKind::Data, "no demonstration pairs in the given records");
  return d;
}

namespace {

void set_trainable(const std::vector<NamedTensor>& params, bool on) {
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.set_requires_grad(on);
    t.zero_grad();
  }
}

double cosine_scale(long step, long total) {
  const double x = total > 1 ? static_cast<double>(step) / static_cast<double>(total - 1) : 1.0;
  return 0.05 + 0.95 * 0.5 * (1.0 + std::cos(M_PI * x));
}

}  // namespace

DenseTrainReport train_dense_policy(DiTPolicy& policy, const DemoSet& demos, const DenseTrainConfig& cfg,
                                    const ProgressFn& progress) {
  if (cfg.epochs < 1 || cfg.batch < 1 || !(cfg.lr > 0.0)) {
    fail(ErrorKind::Config, "dense training needs positive epochs, batch and learning rate");
  }
  if (demos.size() == 0) fail(ErrorKind::Data, "dense training needs at least one demonstration");
  const DiTConfig& pc = policy.config();
  const auto T = static_cast<std::size_t>(pc.horizon);
  const auto A = static_cast<std::size_t>(pc.action_dim);
  const auto O = static_cast<std::size_t>(pc.obs_dim);
  const auto Bsz = static_cast<std::size_t>(cfg.batch);
  const NoiseSchedule& sched = policy.schedule();
  const int K = pc.diffusion_steps;

  const auto params = policy.parameters();
  set_trainable(params, true);
  Adam opt(params, AdamConfig{cfg.lr, 0.9, 0.999, 1e-8, 0.0});
  Rng rng = Rng(cfg.seed).split(0x7a11);
  const long steps_per_epoch = static_cast<long>((demos.size() + Bsz - 1) / Bsz);
  const long total = steps_per_epoch * cfg.epochs;

  DenseTrainReport report;
  long step = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (long s = 0; s < steps_per_epoch; ++s, ++step) {
      std::vector<double> obs(Bsz * O), noisy(Bsz * T * A), eps(Bsz * T * A);
      std::vector<int> ks(Bsz);
      for (std::size_t j = 0; j < Bsz; ++j) {
        const std::size_t idx = rng.below(demos.size());
        const int k = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(K)));
        ks[j] = k;
        std::copy(demos.obs[idx].begin(), demos.obs[idx].end(), obs.begin() + static_cast<long>(j * O));
        const double sa = std::sqrt(sched.alpha_bar(k));
        const double sn = std::sqrt(1.0 - sched.alpha_bar(k));
        auto a0 = demos.actions[idx].values();
        require(a0.size() == T * A, ErrorKind::Shape, "demonstration chunk shape disagrees with the policy config");
        for (std::size_t e = 0; e < T * A; ++e) {
          const double z = rng.normal();
          eps[j * T * A + e] = z;
          noisy[j * T * A + e] = sa * a0[e] + sn * z;
        }
      }
      Tape tape;
      double value = 0.0;
      {
        RecordingScope scope(tape);
        const Tensor cond = policy.encode_rows(Tensor(Shape{Bsz, O}, std::move(obs)), ks);
        const Tensor pred = policy.forward_batch(Tensor(Shape{Bsz * T, A}, std::move(noisy)), cond, Bsz);
        const Tensor loss = ops::mse(pred, Tensor(Shape{Bsz * T, A}, std::move(eps)));
        value = loss.item();
        if (!std::isfinite(value)) {
          set_trainable(params, false);
          fail(ErrorKind::Training, "dense training diverged (loss " + std::to_string(value) + ") at epoch " +
                                        std::to_string(epoch));
        }
        opt.zero_grad();
        tape.backward(loss);
      }
      if (cfg.grad_clip > 0.0) opt.clip_grad_norm(cfg.grad_clip);
      opt.step(cosine_scale(step, total));
      epoch_loss += value;
    }
    epoch_loss /= static_cast<double>(steps_per_epoch);
    report.epoch_loss.push_back(epoch_loss);
    if (progress) {
      char buf[96];
      std::snprintf(buf, sizeof buf, "epoch %d/%d loss %.6f", epoch, cfg.epochs, epoch_loss);
      progress(buf);
    }
  }
  report.steps = static_cast<int>(step);
  set_trainable(params, false);
  return report;
}

void PrunerTrainConfig::validate() const {
  // rho = 0 is accepted as the degenerate all-compute target
  if (!(rho >= 0.0 && rho < 1.0)) fail(ErrorKind::Config, "rho must lie in [0, 1), got " + std::to_string(rho));
  if (epochs < 1 || trajectories < 1 || !(lr > 0.0) || weight_decay < 0.0) {
    fail(ErrorKind::Config, "pruner training needs positive epochs, trajectories and learning rate");
  }
}

std::string PrunerTrainReport::csv() const {
  std::string s = "epoch,trajectory,r,L_f,L_s,L,p_c_mean,grad_norm,sparsity\n";
  char buf[256];
  for (const auto& row : log) {
    std::snprintf(buf, sizeof buf, "%d,%d,%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", row.epoch, row.trajectory, row.r,
                  row.l_f, row.l_s, row.loss, row.p_c_mean, row.grad_norm, row.sparsity);
    s += buf;
  }
  return s;
}

GatedDiffusion gated_diffusion(const DiTPolicy& policy, const Pruner& pruner, std::span<const double> obs,
                               OmniCache& cache, const SamplerPlan& plan, const Rng& diffusion_rng,
                               const DirectionSet& dirs, bool soft, ServeTrace* trace) {
  const DiTConfig& cfg = policy.config();
  const int B = cfg.num_blocks();
  const int K = plan.size();
  require(cache.num_blocks() == B && cache.steps() == K, ErrorKind::Config, "cache lattice does not match the model");
  const int r = cache.iteration();
  ConditionBuffer cond;
  {
    NoGradScope frozen;
    cond = encode_condition_batch(policy, obs, plan);
  }
  std::vector<std::uint8_t> enabled = availability(B, K, r, dirs, cache.rollout_snapshot());
  GatedDiffusion out;
  out.confidences = pruner.confidences(cond.tokens, static_cast<std::size_t>(K), enabled);
  out.plan = discretize_plan(out.confidences, std::move(enabled), B, K, r);

  const std::vector<std::uint8_t> ungated(static_cast<std::size_t>(B), 0);
  const std::vector<std::uint8_t> gated(static_cast<std::size_t>(B), 1);
  Tensor a = plan.initial_noise(diffusion_rng, static_cast<std::size_t>(cfg.horizon),
                                static_cast<std::size_t>(cfg.action_dim));
  for (int i = 0; i < K; ++i) {
    const int k = plan.lattice_k(i);
    GatedRow row{out.plan.row(k), i == 0 ? std::span<const std::uint8_t>(ungated) : std::span<const std::uint8_t>(gated),
                 static_cast<std::size_t>(i) * static_cast<std::size_t>(B)};
    const Tensor eps = gated_sparse_forward(policy, a, cond.row(static_cast<std::size_t>(i)), row, out.confidences,
                                            cache, k, soft, trace);
    a = plan.step(policy.schedule(), a, eps, i, diffusion_rng);
  }
  out.action = a;
  return out;
}

PrunerLoss pruner_loss(const GatedDiffusion& out, const Tensor& reference, double rho) {
  PrunerLoss l;
  l.fidelity = ops::mse(out.action, reference);
  l.sparsity = sparsity_loss(out.confidences, rho);
  l.total = ops::add(l.fidelity, l.sparsity);
  return l;
}

namespace {

double mean_p_c(const Tensor& conf) {
  auto v = conf.values();
  double s = 0.0;
  const std::size_t n = v.size() / 4;
  for (std::size_t c = 0; c < n; ++c) s += v[c * 4];
  return s / static_cast<double>(n);
}

// Per-denoising-step variant: after every step the sparse chain is compared
// with the dense chain at the same noise, then both continue detached.
PrunerTrainLogRow train_iteration_per_step(const DiTPolicy& policy, Pruner& pruner, Adam& opt,
                                           std::span<const double> obs, OmniCache& cache, const SamplerPlan& plan,
                                           const Rng& rng, const PrunerTrainConfig& cfg) {
  const DiTConfig& pc = policy.config();
  const int B = pc.num_blocks();
  const int K = plan.size();
  const int r = cache.iteration();
  ConditionBuffer cond;
  {
    NoGradScope frozen;
    cond = encode_condition_batch(policy, obs, plan);
  }
  const std::vector<std::uint8_t> enabled = availability(B, K, r, cfg.directions, cache.rollout_snapshot());
  MaskPlan mplan;
  {
    NoGradScope frozen;
    mplan = discretize_plan(pruner.confidences(cond.tokens, static_cast<std::size_t>(K), enabled), enabled, B, K, r);
  }
  const std::vector<std::uint8_t> ungated(static_cast<std::size_t>(B), 0);
  const std::vector<std::uint8_t> gated(static_cast<std::size_t>(B), 1);
  Tensor a = plan.initial_noise(rng, static_cast<std::size_t>(pc.horizon), static_cast<std::size_t>(pc.action_dim));
  Tensor a_ref = a;
  PrunerTrainLogRow row;
  row.r = r;
  for (int i = 0; i < K; ++i) {
    const int k = plan.lattice_k(i);
    const ConditionEmbedding c = cond.row(static_cast<std::size_t>(i));
    {
      NoGradScope frozen;
      const DenseForward dense = policy.decoder_forward_dense(a_ref, c, k, r);
      a_ref = plan.step(policy.schedule(), a_ref, dense.eps_hat, i, rng);
    }
    Tape tape;
    {
      RecordingScope scope(tape);
      const Tensor conf = pruner.confidences(cond.tokens, static_cast<std::size_t>(K), enabled);
      GatedRow grow{mplan.row(k), i == 0 ? std::span<const std::uint8_t>(ungated) : std::span<const std::uint8_t>(gated),
                    static_cast<std::size_t>(i) * static_cast<std::size_t>(B)};
      const Tensor eps = gated_sparse_forward(policy, a, c, grow, conf, cache, k, false);
      const Tensor next = plan.step(policy.schedule(), a, eps, i, rng);
      const Tensor lf = ops::mse(next, a_ref);
      const Tensor ls = sparsity_loss(conf, cfg.rho);
      const Tensor loss = ops::add(lf, ls);
      opt.zero_grad();
      tape.backward(loss);
      row.l_f = lf.item();
      row.l_s = ls.item();
      row.loss = loss.item();
      row.p_c_mean = mean_p_c(conf);
      a = next.detach();
    }
    row.grad_norm = opt.grad_norm();
    opt.step();
  }
  row.sparsity = mplan.sparsity();
  return row;
}

}  // namespace

PrunerTrainReport train_pruner(const DiTPolicy& policy, Pruner& pruner, const std::vector<TrajectoryRecord>& dref,
                               const PrunerTrainConfig& cfg, const SamplerPlan& plan, const ProgressFn& progress) {
  cfg.validate();
  if (static_cast<int>(dref.size()) < cfg.trajectories) {
    fail(ErrorKind::Data, "pruner training asked for " + std::to_string(cfg.trajectories) +
                              " trajectories, dataset holds " + std::to_string(dref.size()));
  }
  for (int t = 0; t < cfg.trajectories; ++t) validate_record(dref[static_cast<std::size_t>(t)], true);
  const int B = policy.config().num_blocks();
  const int K = plan.size();
  const auto params = pruner.parameters();
  set_trainable(params, true);
  Adam opt(params, AdamConfig{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});

  PrunerTrainReport report;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double epoch_lf = 0.0, epoch_ls = 0.0, epoch_sp = 0.0;
    int n = 0;
    for (int t = 0; t < cfg.trajectories; ++t) {
      const TrajectoryRecord& rec = dref[static_cast<std::size_t>(t)];
      OmniCache cache(B, K);
      for (const auto& it : rec.iterations) {
        cache.begin_rollout_iteration(it.r);
        const Rng rng = iteration_rng(rec.seed, it.r);
        PrunerTrainLogRow row;
        if (cfg.per_step_backprop) {
          row = train_iteration_per_step(policy, pruner, opt, it.obs, cache, plan, rng, cfg);
        } else {
          Tape tape;
          {
            RecordingScope scope(tape);
            const GatedDiffusion out = gated_diffusion(policy, pruner, it.obs, cache, plan, rng, cfg.directions, false);
            const PrunerLoss loss = pruner_loss(out, it.reference, cfg.rho);
            row.l_f = loss.fidelity.item();
            row.l_s = loss.sparsity.item();
            row.loss = loss.total.item();
            row.p_c_mean = mean_p_c(out.confidences);
            row.sparsity = out.plan.sparsity();
            if (!std::isfinite(row.loss)) {
              set_trainable(params, false);
              fail(ErrorKind::Training, "pruner training diverged at epoch " + std::to_string(epoch));
            }
            opt.zero_grad();
            tape.backward(loss.total);
          }
          row.grad_norm = opt.grad_norm();
          opt.step();
        }
        row.epoch = epoch;
        row.trajectory = t;
        row.r = it.r;
        report.log.push_back(row);
        epoch_lf += row.l_f;
        epoch_ls += row.l_s;
        epoch_sp += row.sparsity;
        ++n;
      }
    }
    if (progress) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "epoch %d/%d L_f %.6f L_s %.6f sparsity %.4f", epoch, cfg.epochs, epoch_lf / n,
                    epoch_ls / n, epoch_sp / n);
      progress(buf);
    }
  }
  set_trainable(params, false);
  return report;
}

VariantMetrics evaluate_variant(const DiTPolicy& policy, const Pruner& pruner, const DirectionSet& dirs,
                                const std::vector<TrajectoryRecord>& held_out, const SamplerPlan& plan,
                                const VariantEvalConfig& cfg) {
  VariantMetrics m;
  m.directions = dirs.str();
  const DiTConfig& pc = policy.config();
  SparseDiffusionOptions opts;
  opts.mode = cfg.mode;
  opts.directions = dirs;
  SparseAgent agent(policy, &pruner, plan, opts);
  const FlopsTally dense = dense_diffusion_flops(pc, plan.size());

  std::uint64_t computed = 0, cells = 0;
  FlopsTally spent;
  int diffusions = 0;
  auto account = [&](const std::optional<MaskPlan>& mask, const FlopsTally& f) {
    if (mask) {
      computed += static_cast<std::uint64_t>(mask->compute_count());
      cells += mask->choices.size();
    }
    spent += f;
    ++diffusions;
  };

  double lf = 0.0;
  int replays = 0;
  for (const auto& rec : held_out) {
    for (const auto& step : replay_rollout(rec, agent)) {
      lf += step.fidelity;
      ++replays;
      if (cfg.episodes == 0) account(step.mask, step.flops);
    }
  }
  m.replay_fidelity = replays ? lf / replays : 0.0;
  if (cfg.episodes > 0) {
    const auto records = run_episodes(agent, cfg.env, pc.horizon, cfg.episodes, cfg.seed);
    m.success_rate = success_rate(records);
    for (const auto& rec : records)
      for (const auto& it : rec.iterations) account(it.mask, it.flops);
  }
  m.diffusions = diffusions;
  if (cells) m.sparsity = 1.0 - static_cast<double>(computed) / static_cast<double>(cells);
  if (diffusions) {
    const double n = diffusions;
    m.flops_ratio = static_cast<double>(spent.total()) / (n * static_cast<double>(dense.total()));
    m.decoder_flops_ratio = static_cast<double>(spent.decoder()) / (n * static_cast<double>(dense.decoder()));
  }
  return m;
}

}  // namespace odrt
