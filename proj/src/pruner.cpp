#include "odrt/pruner.hpp"

#include <cstdio>

#include "odrt/error.hpp"
#include "odrt/ops.hpp"

namespace odrt {

DirectionSet DirectionSet::parse(const std::string& text) {
  DirectionSet d{false, false, false};
  for (char c : text) {
    switch (c) {
      case 'F': case 'f': d.forward = true; break;
      case 'T': case 't': d.timestep = true; break;
      case 'R': case 'r': d.rollout = true; break;
      case ',': case ' ': case '{': case '}': break;
      default: fail(ErrorKind::Config, std::string("unknown reuse direction '") + c + "' in \"" + text + "\"");
    }
  }
  if (!d.forward && !d.timestep && !d.rollout) {
    fail(ErrorKind::Config, "direction subset \"" + text + "\" is empty; pick from F, T, R");
  }
  return d;
}

std::string DirectionSet::str() const {
  std::string s;
  if (forward) s += 'F';
  if (timestep) s += 'T';
  if (rollout) s += 'R';
  return s;
}

bool DirectionSet::allows(BlockChoice c) const {
  switch (c) {
    case BlockChoice::Compute: return true;
    case BlockChoice::Forward: return forward;
    case BlockChoice::Timestep: return timestep;
    case BlockChoice::Rollout: return rollout;
  }
  return false;
}

void PrunerConfig::validate(const DiTConfig& policy) const {
  (void)policy;
  if (width <= 0 || width % 2 != 0) fail(ErrorKind::Config, "pruner width must be positive and even");
  if (heads <= 0 || width % heads != 0) fail(ErrorKind::Config, "pruner width must be divisible by its heads");
  if (ffn_hidden <= 0) fail(ErrorKind::Config, "pruner ffn_hidden must be positive");
}

Tensor block_queries(int num_blocks, int width) {
  std::vector<double> rows;
  rows.reserve(static_cast<std::size_t>(num_blocks * width));
  for (int b = 0; b < num_blocks; ++b) {
    const Tensor e = sinusoidal_embed(b, width);
    rows.insert(rows.end(), e.values().begin(), e.values().end());
  }
  return Tensor(Shape{static_cast<std::size_t>(num_blocks), static_cast<std::size_t>(width)}, std::move(rows));
}

std::vector<NamedTensor> PrunerWeights::parameters() const {
  std::vector<NamedTensor> out;
  cond_proj.collect("pruner.cond_proj", out);
  self_attn.collect("pruner.sa", out);
  cross_attn.collect("pruner.ca", out);
  ffn.collect("pruner.ffn", out);
  head.collect("pruner.head", out);
  return out;
}

Pruner::Pruner(const PrunerConfig& cfg, const DiTConfig& policy_cfg, Rng& rng)
    : cfg_(cfg), policy_cfg_(policy_cfg) {
  cfg.validate(policy_cfg);
  policy_cfg.validate();
  const auto w = static_cast<std::size_t>(cfg.width);
  w_.cond_proj = Linear::init(static_cast<std::size_t>(policy_cfg.d_model), w, rng);
  w_.self_attn = AttentionWeights::init(w, rng);
  w_.cross_attn = AttentionWeights::init(w, rng);
  w_.ffn = FeedForwardWeights::init(w, static_cast<std::size_t>(cfg.ffn_hidden), rng);
  w_.head = Linear::init(w, 4, rng);
  w_.head.bias.mutable_values()[0] = cfg.compute_bias;
  queries_ = block_queries(policy_cfg.num_blocks(), cfg.width);
}

std::size_t Pruner::parameter_count() const { return count_parameters(parameters()); }

PrunerFlops Pruner::flops() const {
  const auto B = static_cast<std::uint64_t>(policy_cfg_.num_blocks());
  const auto w = static_cast<std::uint64_t>(cfg_.width);
  const auto d = static_cast<std::uint64_t>(policy_cfg_.d_model);
  const auto Tc = static_cast<std::uint64_t>(policy_cfg_.cond_tokens());
  const auto ff = static_cast<std::uint64_t>(cfg_.ffn_hidden);
  PrunerFlops f;
  f.per_pass = 4 * matmul_flops(B, w, w) + 2 * matmul_flops(B, w, B)  // self-attention over queries
               + matmul_flops(B, w, w);                                // cross-attention query projection
  f.per_row = matmul_flops(Tc, d, w)                                   // condition projection
              + 2 * matmul_flops(Tc, w, w)                             // keys, values
              + 2 * matmul_flops(B, w, Tc)                             // scores, weighted sum
              + matmul_flops(B, w, w)                                  // output projection
              + matmul_flops(B, w, ff) + matmul_flops(B, ff, w)        // FFN
              + matmul_flops(B, w, 4);                                 // gating head
  return f;
}

Tensor Pruner::logits(const Tensor& cond_tokens, std::size_t rows) const {
  const auto Tc = static_cast<std::size_t>(policy_cfg_.cond_tokens());
  if (cond_tokens.rank() != 2 || cond_tokens.dim(0) != rows * Tc ||
      cond_tokens.dim(1) != static_cast<std::size_t>(policy_cfg_.d_model)) {
    fail(ErrorKind::Shape, "pruner: condition tokens " + shape_str(cond_tokens.shape()) + " for " +
                               std::to_string(rows) + " rows of " + std::to_string(Tc) + " tokens");
  }
  const auto heads = static_cast<std::size_t>(cfg_.heads);
  const Tensor q1 = ops::add(queries_, w_.self_attn.residual(queries_, Tensor{}, heads, 1));
  const Tensor qp = w_.cross_attn.query(w_.cross_attn.norm(q1));

  const Tensor ctx = w_.cond_proj(cond_tokens);
  const Tensor kp = w_.cross_attn.key(ctx);
  const Tensor vp = w_.cross_attn.value(ctx);
  const Tensor att = ops::attention(tile_rows(qp, rows), kp, vp, heads, rows);
  const Tensor q2 = ops::add(tile_rows(q1, rows), w_.cross_attn.out(att));
  const Tensor q3 = ops::add(q2, w_.ffn.residual(q2));
  return w_.head(q3);
}

Tensor Pruner::confidences(const Tensor& cond_tokens, std::size_t rows, std::span<const std::uint8_t> enabled) const {
  const auto B = static_cast<std::size_t>(policy_cfg_.num_blocks());
  require(enabled.size() == rows * B * 4, ErrorKind::Shape, "availability mask does not cover every cell");
  return ops::masked_softmax(logits(cond_tokens, rows), enabled);
}

std::vector<std::uint8_t> availability(int num_blocks, int steps, int r, const DirectionSet& dirs,
                                       std::span<const std::uint8_t> rollout_populated) {
  const auto B = static_cast<std::size_t>(num_blocks);
  const auto K = static_cast<std::size_t>(steps);
  require(rollout_populated.empty() || rollout_populated.size() == B * K, ErrorKind::Shape,
          "rollout snapshot does not match the lattice");
  std::vector<std::uint8_t> en(B * K * 4, 0);
  for (std::size_t i = 0; i < K; ++i) {
    const int k = steps - static_cast<int>(i);
    for (int b = 1; b <= num_blocks; ++b) {
      std::uint8_t* e = &en[(i * B + static_cast<std::size_t>(b - 1)) * 4];
      e[0] = 1;
      if (i == 0) continue;
      e[1] = dirs.forward && b > 3 ? 1 : 0;
      e[2] = dirs.timestep ? 1 : 0;
      const bool populated = !rollout_populated.empty() &&
                             rollout_populated[static_cast<std::size_t>(k - 1) * B + static_cast<std::size_t>(b - 1)];
      e[3] = dirs.rollout && r > 1 && populated ? 1 : 0;
    }
  }
  return en;
}

BlockChoice discretize(const GatingVector& p, std::optional<BlockChoice> forced,
                       const std::array<std::uint8_t, 4>& enabled) {
  if (forced) return *forced;
  int best = -1;
  for (int i = 0; i < 4; ++i) {
    if (!enabled[static_cast<std::size_t>(i)]) continue;
    if (best < 0 || p[static_cast<std::size_t>(i)] > p[static_cast<std::size_t>(best)]) best = i;
  }
  return best < 0 ? BlockChoice::Compute : static_cast<BlockChoice>(best);
}

std::size_t MaskPlan::cell(int b, int k) const {
  if (b < 1 || b > num_blocks || k < 1 || k > steps) {
    fail(ErrorKind::Contract, "mask cell (b=" + std::to_string(b) + ", k=" + std::to_string(k) + ") out of range");
  }
  return static_cast<std::size_t>(steps - k) * static_cast<std::size_t>(num_blocks) + static_cast<std::size_t>(b - 1);
}

GatingVector MaskPlan::probs(int b, int k) const {
  const std::size_t c = cell(b, k);
  auto v = confidences.values();
  return {v[c * 4], v[c * 4 + 1], v[c * 4 + 2], v[c * 4 + 3]};
}

std::span<const BlockChoice> MaskPlan::row(int k) const {
  return std::span<const BlockChoice>(choices).subspan(cell(1, k), static_cast<std::size_t>(num_blocks));
}

std::span<const std::uint8_t> MaskPlan::forced_row(int k) const {
  return std::span<const std::uint8_t>(forced).subspan(cell(1, k), static_cast<std::size_t>(num_blocks));
}

int MaskPlan::compute_count() const {
  int n = 0;
  for (BlockChoice c : choices) n += c == BlockChoice::Compute ? 1 : 0;
  return n;
}

double MaskPlan::sparsity() const {
  return choices.empty() ? 0.0 : 1.0 - static_cast<double>(compute_count()) / static_cast<double>(choices.size());
}

MaskPlan discretize_plan(const Tensor& confidences, std::vector<std::uint8_t> enabled, int num_blocks, int steps,
                         int r) {
  const auto B = static_cast<std::size_t>(num_blocks);
  const auto K = static_cast<std::size_t>(steps);
  if (confidences.rank() != 2 || confidences.dim(0) != B * K || confidences.dim(1) != 4 ||
      enabled.size() != B * K * 4) {
    fail(ErrorKind::Shape, "confidences " + shape_str(confidences.shape()) + " do not cover " +
                               std::to_string(B * K) + " cells");
  }
  MaskPlan plan;
  plan.num_blocks = num_blocks;
  plan.steps = steps;
  plan.r = r;
  plan.confidences = confidences;
  plan.enabled = std::move(enabled);
  plan.choices.assign(B * K, BlockChoice::Compute);
  plan.forced.assign(B * K, 0);
  auto p = confidences.values();
  for (std::size_t i = 0; i < K; ++i) {
    std::array<bool, 3> kind_computed{false, false, false};
    for (std::size_t bi = 0; bi < B; ++bi) {
      const std::size_t c = i * B + bi;
      const auto kind = static_cast<std::size_t>(kind_of_block(static_cast<int>(bi) + 1));
      BlockChoice choice = BlockChoice::Compute;
      if (i == 0) {
        plan.forced[c] = 1;
      } else {
        const GatingVector g{p[c * 4], p[c * 4 + 1], p[c * 4 + 2], p[c * 4 + 3]};
        std::array<std::uint8_t, 4> en{};
        for (std::size_t j = 0; j < 4; ++j) en[j] = plan.enabled[c * 4 + j];
        choice = discretize(g, std::nullopt, en);
        if (choice == BlockChoice::Forward && !kind_computed[kind]) {
          en[1] = 0;
          choice = discretize(g, std::nullopt, en);
          plan.forced[c] = 1;
        }
      }
      if (choice == BlockChoice::Compute) kind_computed[kind] = true;
      plan.choices[c] = choice;
    }
  }
  return plan;
}

MaskPlan dense_plan(int num_blocks, int steps, int r) {
  const auto cells = static_cast<std::size_t>(num_blocks) * static_cast<std::size_t>(steps);
  std::vector<double> conf(cells * 4, 0.0);
  for (std::size_t c = 0; c < cells; ++c) conf[c * 4] = 1.0;
  std::vector<std::uint8_t> en(cells * 4, 0);
  for (std::size_t c = 0; c < cells; ++c) en[c * 4] = 1;
  MaskPlan plan = discretize_plan(Tensor(Shape{cells, 4}, std::move(conf)), std::move(en), num_blocks, steps, r);
  return plan;
}

Tensor prune_single(const Pruner& pruner, const ConditionEmbedding& cond, std::span<const std::uint8_t> enabled) {
  return pruner.confidences(cond.tokens, 1, enabled);
}

Tensor sparsity_loss(const Tensor& confidences, double rho) {
  if (!(rho >= 0.0 && rho <= 1.0)) fail(ErrorKind::Config, "target pruning rate rho=" + std::to_string(rho) + " outside [0, 1]");
  require(confidences.rank() == 2 && confidences.dim(1) == 4, ErrorKind::Shape,
          "sparsity_loss expects [cells x 4] confidences");
  return ops::abs(ops::add_scalar(ops::mean(ops::column(confidences, 0)), -(1.0 - rho)));
}

Tensor sparsity_loss(const MaskPlan& plan, double rho) { return sparsity_loss(plan.confidences, rho); }

Section pruner_section(const Pruner& pruner) { return weights_section("pruner", pruner.parameters()); }

void load_pruner_weights(const Section& section, Pruner& pruner) { load_weights(section, pruner.parameters()); }

void write_pruner_metadata(const PrunerConfig& cfg, std::map<std::string, std::string>& metadata) {
  metadata["pruner.width"] = std::to_string(cfg.width);
  metadata["pruner.heads"] = std::to_string(cfg.heads);
  metadata["pruner.ffn_hidden"] = std::to_string(cfg.ffn_hidden);
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", cfg.compute_bias);
  metadata["pruner.compute_bias"] = buf;
}

PrunerConfig read_pruner_metadata(const std::map<std::string, std::string>& metadata) {
  auto get = [&](const char* key) -> const std::string& {
    auto it = metadata.find(key);
    if (it == metadata.end()) fail(ErrorKind::Data, std::string("pruner checkpoint lacks metadata '") + key + "'");
    return it->second;
  };
  PrunerConfig cfg;
  try {
    cfg.width = std::stoi(get("pruner.width"));
    cfg.heads = std::stoi(get("pruner.heads"));
    cfg.ffn_hidden = std::stoi(get("pruner.ffn_hidden"));
    cfg.compute_bias = std::stod(get("pruner.compute_bias"));
  } catch (const std::logic_error&) {
    fail(ErrorKind::Data, "malformed pruner metadata");
  }
  return cfg;
}

}  // namespace odrt
