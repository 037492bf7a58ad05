#include "odrt/flops.hpp"

namespace odrt {

FlopsModel FlopsModel::from(const DiTConfig& cfg) {
  const std::uint64_t d = static_cast<std::uint64_t>(cfg.d_model);
  const std::uint64_t T = static_cast<std::uint64_t>(cfg.horizon);
  const std::uint64_t Tc = static_cast<std::uint64_t>(cfg.cond_tokens());
  const std::uint64_t ff = static_cast<std::uint64_t>(cfg.d_ff);
  const std::uint64_t a = static_cast<std::uint64_t>(cfg.action_dim);
  const std::uint64_t o = static_cast<std::uint64_t>(cfg.obs_dim);
  const std::uint64_t ot = static_cast<std::uint64_t>(cfg.obs_tokens);

  FlopsModel m;
  // q, k, v, out projections + scores + weighted sum
  m.sa = 4 * matmul_flops(T, d, d) + 2 * matmul_flops(T, d, T);
  m.ca = 2 * matmul_flops(T, d, d) + 2 * matmul_flops(Tc, d, d) + 2 * matmul_flops(T, d, Tc);
  m.ffn = matmul_flops(T, d, ff) + matmul_flops(T, ff, d);
  m.embed_head = matmul_flops(T, a, d) + matmul_flops(T, d, a);
  m.encoder_row = matmul_flops(1, o, d) + matmul_flops(1, d, d * ot) + matmul_flops(1, d, d);
  return m;
}

std::uint64_t FlopsModel::block(BlockKind kind) const {
  switch (kind) {
    case BlockKind::SelfAttention: return sa;
    case BlockKind::CrossAttention: return ca;
    case BlockKind::FeedForward: return ffn;
  }
  return 0;
}

std::uint64_t FlopsModel::decoder_step_dense(int num_blocks) const {
  std::uint64_t total = embed_head;
  for (int b = 1; b <= num_blocks; ++b) total += block(b);
  return total;
}

FlopsTally& FlopsTally::operator+=(const FlopsTally& o) {
  encoder += o.encoder;
  pruner += o.pruner;
  blocks += o.blocks;
  embed_head += o.embed_head;
  return *this;
}

FlopsTally dense_diffusion_flops(const DiTConfig& cfg, int steps) {
  const FlopsModel m = FlopsModel::from(cfg);
  FlopsTally t;
  const auto s = static_cast<std::uint64_t>(steps);
  t.encoder = s * m.encoder_row;
  t.blocks = s * (m.decoder_step_dense(cfg.num_blocks()) - m.embed_head);
  t.embed_head = s * m.embed_head;
  return t;
}

}  // namespace odrt
