#include "odrt/dit_policy.hpp"

#include <cmath>
#include <sstream>

#include "odrt/error.hpp"
#include "odrt/ops.hpp"

namespace odrt {

void DiTConfig::validate() const {
  auto bad = [](const std::string& what) { fail(ErrorKind::Config, "DiTConfig: " + what); };
  if (d_model <= 0 || n_heads <= 0 || d_model % n_heads != 0) bad("d_model must be divisible by n_heads");
  if (d_model % 2 != 0) bad("d_model must be even for sinusoidal embeddings");
  if (n_layers < 1) bad("n_layers must be >= 1");
  if (diffusion_steps < 2) bad("diffusion_steps must be >= 2");
  if (horizon < 1) bad("horizon must be >= 1");
  if (d_ff < 1 || action_dim < 1 || obs_dim < 1 || obs_tokens < 1) bad("widths must be positive");
  if (clip_range <= 0.0) bad("clip_range must be positive");
}

ScheduleParams DiTConfig::schedule_params() const {
  return ScheduleParams{diffusion_steps, schedule, beta_start, beta_end, clip_sample, clip_range};
}

std::string DiTConfig::canonical() const {
  std::ostringstream os;
  os.precision(17);
  os << "d_model=" << d_model << ";n_layers=" << n_layers << ";n_heads=" << n_heads << ";d_ff=" << d_ff
     << ";horizon=" << horizon << ";action_dim=" << action_dim << ";obs_dim=" << obs_dim
     << ";obs_tokens=" << obs_tokens << ";diffusion_steps=" << diffusion_steps
     << ";schedule=" << static_cast<int>(schedule) << ";beta_start=" << beta_start
     << ";beta_end=" << beta_end << ";clip_sample=" << clip_sample << ";clip_range=" << clip_range;
  return os.str();
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t config_hash(const DiTConfig& cfg) { return fnv1a64(cfg.canonical()); }

Tensor sinusoidal_embed(int pos, int dim) {
  if (dim <= 0 || dim % 2 != 0) fail(ErrorKind::Config, "sinusoidal_embed: dim must be even, got " + std::to_string(dim));
  Tensor out(Shape{static_cast<std::size_t>(dim)});
  auto v = out.mutable_values();
  for (int i = 0; i < dim / 2; ++i) {
    const double freq = std::pow(10000.0, -2.0 * i / dim);
    v[static_cast<std::size_t>(2 * i)] = std::sin(pos * freq);
    v[static_cast<std::size_t>(2 * i + 1)] = std::cos(pos * freq);
  }
  return out;
}

std::vector<NamedTensor> PolicyWeights::parameters() const {
  std::vector<NamedTensor> out;
  obs_in.collect("encoder.obs_in", out);
  obs_out.collect("encoder.obs_out", out);
  time_proj.collect("encoder.time_proj", out);
  out.push_back({"encoder.cond_pos", cond_pos});
  action_in.collect("decoder.action_in", out);
  out.push_back({"decoder.action_pos", action_pos});
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string p = "decoder.layer" + std::to_string(l);
    layers[l].self_attn.collect(p + ".sa", out);
    layers[l].cross_attn.collect(p + ".ca", out);
    layers[l].ffn.collect(p + ".ffn", out);
  }
  final_norm.collect("decoder.final_norm", out);
  head.collect("decoder.head", out);
  return out;
}

DiTPolicy::DiTPolicy(const DiTConfig& cfg, Rng& rng) : cfg_(cfg), schedule_((cfg.validate(), cfg.schedule_params())) {
  const auto d = static_cast<std::size_t>(cfg.d_model);
  w_.obs_in = Linear::init(static_cast<std::size_t>(cfg.obs_dim), d, rng);
  w_.obs_out = Linear::init(d, d * static_cast<std::size_t>(cfg.obs_tokens), rng);
  w_.time_proj = Linear::init(d, d, rng);
  w_.cond_pos = rng.normal_tensor(Shape{static_cast<std::size_t>(cfg.cond_tokens()), d}, 0.02);
  w_.action_in = Linear::init(static_cast<std::size_t>(cfg.action_dim), d, rng);
  w_.action_pos = rng.normal_tensor(Shape{static_cast<std::size_t>(cfg.horizon), d}, 0.02);
  for (int l = 0; l < cfg.n_layers; ++l) {
    DecoderLayerWeights layer;
    layer.self_attn = AttentionWeights::init(d, rng);
    layer.cross_attn = AttentionWeights::init(d, rng);
    layer.ffn = FeedForwardWeights::init(d, static_cast<std::size_t>(cfg.d_ff), rng);
    w_.layers.push_back(std::move(layer));
  }
  w_.final_norm = LayerNormParams::init(d);
  w_.head = Linear::init(d, static_cast<std::size_t>(cfg.action_dim), rng);
}

DiTPolicy::DiTPolicy(const DiTConfig& cfg, PolicyWeights weights)
    : cfg_(cfg), schedule_((cfg.validate(), cfg.schedule_params())), w_(std::move(weights)) {
  require(static_cast<int>(w_.layers.size()) == cfg.n_layers, ErrorKind::Data,
          "policy weights have " + std::to_string(w_.layers.size()) + " layers, config says " +
              std::to_string(cfg.n_layers));
}

std::size_t DiTPolicy::decoder_parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters())
    if (p.name.rfind("decoder.", 0) == 0) n += p.tensor.size();
  return n;
}

Tensor DiTPolicy::encode_rows(const Tensor& obs_rows, std::span<const int> timesteps) const {
  if (obs_rows.rank() != 2 || obs_rows.dim(1) != static_cast<std::size_t>(cfg_.obs_dim) ||
      obs_rows.dim(0) != timesteps.size()) {
    fail(ErrorKind::Shape, "encode: observation rows " + shape_str(obs_rows.shape()) + " vs obs_dim " +
                               std::to_string(cfg_.obs_dim) + " and " + std::to_string(timesteps.size()) +
                               " timesteps");
  }
  const std::size_t rows = timesteps.size();
  const auto d = static_cast<std::size_t>(cfg_.d_model);
  const auto ot = static_cast<std::size_t>(cfg_.obs_tokens);

  const Tensor hidden = ops::gelu(w_.obs_in(obs_rows));
  const Tensor obs_tok = ops::reshape(w_.obs_out(hidden), Shape{rows * ot, d});

  std::vector<double> sin_rows;
  sin_rows.reserve(rows * d);
  for (int t : timesteps) {
    auto e = sinusoidal_embed(t, cfg_.d_model);
    sin_rows.insert(sin_rows.end(), e.values().begin(), e.values().end());
  }
  const Tensor time_tok = w_.time_proj(Tensor(Shape{rows, d}, std::move(sin_rows)));

  std::vector<Tensor> parts;
  parts.reserve(rows * 2);
  for (std::size_t i = 0; i < rows; ++i) {
    parts.push_back(ops::slice_rows(obs_tok, i * ot, ot));
    parts.push_back(ops::slice_rows(time_tok, i, 1));
  }
  const Tensor tokens = ops::concat_rows(parts);
  return ops::add(tokens, tile_rows(w_.cond_pos, rows));
}

ConditionEmbedding DiTPolicy::encode_condition(std::span<const double> obs, int k) const {
  if (obs.size() != static_cast<std::size_t>(cfg_.obs_dim)) {
    fail(ErrorKind::Shape, "encode_condition: observation has " + std::to_string(obs.size()) +
                               " values, config obs_dim=" + std::to_string(cfg_.obs_dim));
  }
  Tensor o(Shape{1, obs.size()}, std::vector<double>(obs.begin(), obs.end()));
  const int ts[1] = {k};
  return ConditionEmbedding{encode_rows(o, ts), k};
}

Tensor DiTPolicy::embed_actions(const Tensor& actions, std::size_t batch) const {
  const auto T = static_cast<std::size_t>(cfg_.horizon);
  if (actions.rank() != 2 || actions.dim(0) != batch * T ||
      actions.dim(1) != static_cast<std::size_t>(cfg_.action_dim)) {
    fail(ErrorKind::Shape, "embed_actions: got " + shape_str(actions.shape()) + ", expected [" +
                               std::to_string(batch * T) + "x" + std::to_string(cfg_.action_dim) + "]");
  }
  return ops::add(w_.action_in(actions), tile_rows(w_.action_pos, batch));
}

Tensor DiTPolicy::block_residual(int b, const Tensor& h, const Tensor& cond_tokens, std::size_t batch) const {
  if (b < 1 || b > cfg_.num_blocks()) {
    fail(ErrorKind::Contract, "block index " + std::to_string(b) + " outside [1, " +
                                  std::to_string(cfg_.num_blocks()) + "]");
  }
  const auto& layer = w_.layers[static_cast<std::size_t>(layer_of_block(b))];
  const auto heads = static_cast<std::size_t>(cfg_.n_heads);
  switch (kind_of_block(b)) {
    case BlockKind::SelfAttention: return layer.self_attn.residual(h, Tensor{}, heads, batch);
    case BlockKind::CrossAttention: return layer.cross_attn.residual(h, cond_tokens, heads, batch);
    case BlockKind::FeedForward: return layer.ffn.residual(h);
  }
  return {};
}

Tensor DiTPolicy::predict_noise(const Tensor& h) const { return w_.head(w_.final_norm(h)); }

DenseForward DiTPolicy::decoder_forward_dense(const Tensor& a_k, const ConditionEmbedding& cond, int k_lattice,
                                              int r) const {
  DenseForward out;
  Tensor h = embed_actions(a_k, 1);
  out.input_embedding = h;
  out.residuals.reserve(static_cast<std::size_t>(cfg_.num_blocks()));
  for (int b = 1; b <= cfg_.num_blocks(); ++b) {
    Tensor d = block_residual(b, h, cond.tokens, 1);
    h = ops::add(h, d);
    out.residuals.push_back(BlockResidual{d, LatticeCoord{b, k_lattice, r}, kind_of_block(b)});
  }
  out.final_hidden = h;
  out.eps_hat = predict_noise(h);
  return out;
}

Tensor DiTPolicy::forward_batch(const Tensor& a_k, const Tensor& cond_tokens, std::size_t batch) const {
  Tensor h = embed_actions(a_k, batch);
  for (int b = 1; b <= cfg_.num_blocks(); ++b) h = ops::add(h, block_residual(b, h, cond_tokens, batch));
  return predict_noise(h);
}

DiffusionResult diffuse_action(const DiTPolicy& policy, std::span<const double> obs, const SamplerPlan& plan,
                               const Rng& diffusion_rng, int r, bool keep_residuals) {
  const auto& cfg = policy.config();
  DiffusionResult res;
  Tensor a = plan.initial_noise(diffusion_rng, static_cast<std::size_t>(cfg.horizon),
                                static_cast<std::size_t>(cfg.action_dim));
  for (int i = 0; i < plan.size(); ++i) {
    const int t = plan.timesteps[static_cast<std::size_t>(i)];
    const ConditionEmbedding cond = policy.encode_condition(obs, t);
    DenseForward fwd = policy.decoder_forward_dense(a, cond, plan.lattice_k(i), r);
    if (keep_residuals) {
      for (auto& br : fwd.residuals) res.residual_log.push_back(std::move(br));
    }
    a = plan.step(policy.schedule(), a, fwd.eps_hat, i, diffusion_rng);
  }
  res.action = a;
  return res;
}

}  // namespace odrt
