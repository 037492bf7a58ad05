#include "odrt/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>

#include "odrt/error.hpp"
#include "odrt/ops.hpp"

namespace odrt {

const char* mode_name(PipelineMode m) { return m == PipelineMode::Async ? "async" : "sequential"; }

PipelineMode parse_mode(const std::string& s) {
  if (s == "sequential") return PipelineMode::Sequential;
  if (s == "async") return PipelineMode::Async;
  fail(ErrorKind::Config, "unknown pipeline mode '" + s + "' (expected sequential or async)");
}

ConditionEmbedding ConditionBuffer::row(std::size_t i) const {
  require(i < size(), ErrorKind::Contract, "condition buffer row " + std::to_string(i) + " out of range");
  const auto tc = static_cast<std::size_t>(cond_tokens);
  return ConditionEmbedding{ops::slice_rows(tokens, i * tc, tc), timesteps[i]};
}

ConditionBuffer encode_condition_batch(const DiTPolicy& policy, std::span<const double> obs, const SamplerPlan& plan) {
  const auto o = static_cast<std::size_t>(policy.config().obs_dim);
  if (obs.size() != o) {
    fail(ErrorKind::Shape, "encode_condition_batch: observation has " + std::to_string(obs.size()) +
                               " values, config obs_dim=" + std::to_string(o));
  }
  const auto rows = static_cast<std::size_t>(plan.size());
  std::vector<double> tiled;
  tiled.reserve(rows * o);
  for (std::size_t i = 0; i < rows; ++i) tiled.insert(tiled.end(), obs.begin(), obs.end());
  ConditionBuffer buf;
  buf.tokens = policy.encode_rows(Tensor(Shape{rows, o}, std::move(tiled)), plan.timesteps);
  buf.timesteps = plan.timesteps;
  buf.cond_tokens = policy.config().cond_tokens();
  return buf;
}

MaskPlan prune_batched(const Pruner& pruner, const ConditionBuffer& cond, int r, const DirectionSet& dirs,
                       std::span<const std::uint8_t> rollout_populated) {
  const int B = pruner.policy_config().num_blocks();
  const int K = static_cast<int>(cond.size());
  std::vector<std::uint8_t> enabled = availability(B, K, r, dirs, rollout_populated);
  Tensor conf = pruner.confidences(cond.tokens, cond.size(), enabled);
  return discretize_plan(conf, std::move(enabled), B, K, r);
}

MaskBuffer::MaskBuffer() : future_(promise_.get_future().share()) {}

void MaskBuffer::publish(MaskPlan plan) {
  bool first = false;
  std::call_once(once_, [&] { first = true; });
  if (!first) odrt::fail(ErrorKind::Contract, "mask buffer published twice");
  promise_.set_value(std::make_shared<const MaskPlan>(std::move(plan)));
}

void MaskBuffer::fail(std::exception_ptr error) {
  bool first = false;
  std::call_once(once_, [&] { first = true; });
  if (first) promise_.set_exception(std::move(error));
}

bool MaskBuffer::ready() const { return future_.wait_for(std::chrono::seconds(0)) == std::future_status::ready; }

const MaskPlan& MaskBuffer::wait() const { return *future_.get(); }

const char* event_name(PipelineEvent e) {
  switch (e) {
    case PipelineEvent::EncodeDone: return "encode_done";
    case PipelineEvent::PruneBegin: return "prune_begin";
    case PipelineEvent::MaskPublished: return "mask_published";
    case PipelineEvent::DecodeStep: return "decode_step";
    case PipelineEvent::MaskObserved: return "mask_observed";
    case PipelineEvent::MaskRowRead: return "mask_row_read";
  }
  return "?";
}

void OrderingLog::push(PipelineEvent e, int k) {
  std::lock_guard lock(mu_);
  entries_.push_back({e, k});
}

std::vector<OrderingLog::Entry> OrderingLog::entries() const {
  std::lock_guard lock(mu_);
  return entries_;
}

void OrderingLog::clear() {
  std::lock_guard lock(mu_);
  entries_.clear();
}

PrunerWorker::PrunerWorker() : thread_([this] { run(); }) {}

PrunerWorker::~PrunerWorker() {
  {
    std::lock_guard lock(mu_);
    stop_ = true;
  }
  cv_.notify_one();
  thread_.join();
}

std::future<void> PrunerWorker::submit(std::function<void()> task) {
  std::packaged_task<void()> pt(std::move(task));
  std::future<void> fut = pt.get_future();
  {
    std::lock_guard lock(mu_);
    queue_.push_back(std::move(pt));
  }
  cv_.notify_one();
  return fut;
}

void PrunerWorker::run() {
  for (;;) {
    std::packaged_task<void()> task;
    {
      std::unique_lock lock(mu_);
      cv_.wait(lock, [this] { return stop_ || !queue_.empty(); });
      if (queue_.empty()) return;
      task = std::move(queue_.front());
      queue_.erase(queue_.begin());
    }
    task();
  }
}

double LatencyRecord::decode_total_us() const { return std::accumulate(t_decode_us.begin(), t_decode_us.end(), 0.0); }

double LatencyRecord::overlap_hidden_us() const {
  return std::max(0.0, t_encode_us + t_prune_us + decode_total_us() - t_total_us);
}

namespace {

using Clock = std::chrono::steady_clock;

double micros(Clock::time_point a, Clock::time_point b) {
  return std::chrono::duration<double, std::micro>(b - a).count();
}

// Joins the pruner task on every exit path of the decoder.
class TaskJoin {
 public:
  TaskJoin(std::future<void> fut) : fut_(std::move(fut)) {}
  TaskJoin(std::thread th) : th_(std::move(th)) {}
  ~TaskJoin() { join(); }
  void join() {
    if (fut_.valid()) fut_.wait();
    if (th_.joinable()) th_.join();
  }

 private:
  std::future<void> fut_;
  std::thread th_;
};

}  // namespace

SparseDiffusion diffuse_sparse(const DiTPolicy& policy, const Pruner* pruner, std::span<const double> obs,
                               OmniCache& cache, const SamplerPlan& plan, const Rng& diffusion_rng,
                               const SparseDiffusionOptions& options) {
  const DiTConfig& cfg = policy.config();
  const int B = cfg.num_blocks();
  const int K = plan.size();
  if (cache.num_blocks() != B || cache.steps() != K) {
    fail(ErrorKind::Config, "cache lattice " + std::to_string(cache.num_blocks()) + "x" + std::to_string(cache.steps()) +
                                " does not match model/sampler " + std::to_string(B) + "x" + std::to_string(K));
  }
  require(cache.iteration() >= 1, ErrorKind::Contract, "diffuse_sparse before begin_rollout_iteration");
  const int r = cache.iteration();
  OrderingLog* olog = options.ordering;
  auto note = [olog](PipelineEvent e, int k = 0) {
    if (olog) olog->push(e, k);
  };

  SparseDiffusion out;
  SparseDiffusionStats& st = out.stats;
  const auto t0 = Clock::now();
  const ConditionBuffer cond = encode_condition_batch(policy, obs, plan);
  ++st.encoder_invocations;
  note(PipelineEvent::EncodeDone);
  const auto t1 = Clock::now();
  st.latency.t_encode_us = micros(t0, t1);
  const std::vector<std::uint8_t> snapshot = cache.rollout_snapshot();

  int pruner_calls = 0;
  double prune_us = 0.0;
  auto make_plan = [&]() -> MaskPlan {
    const auto p0 = Clock::now();
    note(PipelineEvent::PruneBegin);
    if (options.pruner_delay.count() > 0) std::this_thread::sleep_for(options.pruner_delay);
    MaskPlan m;
    if (pruner) {
      m = prune_batched(*pruner, cond, r, options.directions, snapshot);
      ++pruner_calls;
    }
    if (!pruner || options.all_compute) m = dense_plan(B, K, r);
    prune_us = micros(p0, Clock::now());
    return m;
  };

  MaskBuffer buffer;
  std::optional<TaskJoin> join;
  Clock::time_point step_start;
  if (options.mode == PipelineMode::Sequential) {
    MaskPlan m = make_plan();
    note(PipelineEvent::MaskPublished);
    buffer.publish(std::move(m));
    // snapshot and handoff belong to the prune phase so the phases tile the total
    step_start = Clock::now();
    prune_us = micros(t1, step_start);
  } else {
    auto task = [&] {
      try {
        MaskPlan m = make_plan();
        note(PipelineEvent::MaskPublished);
        buffer.publish(std::move(m));
      } catch (...) {
        buffer.fail(std::current_exception());
      }
    };
    if (options.worker) {
      join.emplace(options.worker->submit(task));
    } else {
      join.emplace(std::thread(task));
    }
  }

  const FlopsModel model = FlopsModel::from(cfg);
  const std::vector<BlockChoice> full_row(static_cast<std::size_t>(B), BlockChoice::Compute);
  const MaskPlan* mask = nullptr;
  Tensor a = plan.initial_noise(diffusion_rng, static_cast<std::size_t>(cfg.horizon),
                                static_cast<std::size_t>(cfg.action_dim));
  st.latency.t_decode_us.reserve(static_cast<std::size_t>(K));
  if (options.mode == PipelineMode::Async) step_start = Clock::now();
  for (int i = 0; i < K; ++i) {
    const int k = plan.lattice_k(i);
    std::span<const BlockChoice> row = full_row;
    if (i > 0) {
      if (!mask) {
        const auto w0 = Clock::now();
        mask = &buffer.wait();
        st.latency.t_mask_wait_us += micros(w0, Clock::now());
        note(PipelineEvent::MaskObserved);
      }
      note(PipelineEvent::MaskRowRead, k);
      row = mask->row(k);
    }
    const SparseForward f = sparse_forward(policy, a, cond.row(static_cast<std::size_t>(i)), row, cache, k,
                                           options.residuals);
    st.flops += f.flops;
    a = plan.step(policy.schedule(), a, f.eps_hat, i, diffusion_rng);
    note(PipelineEvent::DecodeStep, k);
    const auto now = Clock::now();
    st.latency.t_decode_us.push_back(micros(step_start, now));
    step_start = now;
  }
  if (!mask) mask = &buffer.wait();
  if (join) join->join();
  const auto t_end = Clock::now();

  st.plan = *mask;
  st.pruner_invocations = pruner_calls;
  st.latency.t_prune_us = prune_us;
  st.latency.t_total_us = micros(t0, t_end);
  st.flops.encoder = static_cast<std::uint64_t>(K) * model.encoder_row;
  st.flops.pruner = pruner ? pruner->flops().pass(static_cast<std::size_t>(K)) : 0;
  out.action = a;
  return out;
}

std::string report_latency(const LatencyReport& rep) {
  char buf[128];
  std::string s;
  auto line = [&](const char* key, const char* fmt, auto v) {
    std::snprintf(buf, sizeof buf, fmt, v);
    s += key;
    s += '=';
    s += buf;
    s += '\n';
  };
  s += "mode=" + rep.mode + "\n";
  line("seed", "%llu", static_cast<unsigned long long>(rep.seed));
  line("sparsity", "%.6f", rep.sparsity);
  line("flops_dense", "%llu", static_cast<unsigned long long>(rep.flops_dense));
  line("flops_sparse", "%llu", static_cast<unsigned long long>(rep.flops_sparse));
  line("flops_ratio", "%.6f",
       rep.flops_dense ? static_cast<double>(rep.flops_sparse) / static_cast<double>(rep.flops_dense) : 0.0);
  line("t_encode_us", "%.3f", rep.latency.t_encode_us);
  line("t_prune_us", "%.3f", rep.latency.t_prune_us);
  s += "t_decode_us=";
  for (std::size_t i = 0; i < rep.latency.t_decode_us.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%s%.3f", i ? "," : "", rep.latency.t_decode_us[i]);
    s += buf;
  }
  s += '\n';
  line("t_mask_wait_us", "%.3f", rep.latency.t_mask_wait_us);
  line("t_overlap_hidden_us", "%.3f", rep.latency.overlap_hidden_us());
  line("t_total_us", "%.3f", rep.latency.t_total_us);
  return s;
}

}  // namespace odrt
