#include "odrt/layers.hpp"

#include "odrt/ops.hpp"

namespace odrt {

Linear Linear::init(std::size_t in, std::size_t out, Rng& rng, double stddev) {
  return Linear{rng.normal_tensor(Shape{in, out}, stddev), Tensor(Shape{out}, 0.0)};
}

Tensor Linear::operator()(const Tensor& x) const { return ops::linear(x, weight, bias); }

void Linear::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

LayerNormParams LayerNormParams::init(std::size_t width) {
  return LayerNormParams{Tensor(Shape{width}, 1.0), Tensor(Shape{width}, 0.0)};
}

Tensor LayerNormParams::operator()(const Tensor& x) const {
  return ops::layernorm(x, gain, bias, kLayerNormEps);
}

void LayerNormParams::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
  out.push_back({prefix + ".gain", gain});
  out.push_back({prefix + ".bias", bias});
}

AttentionWeights AttentionWeights::init(std::size_t width, Rng& rng) {
  AttentionWeights w;
  w.norm = LayerNormParams::init(width);
  w.query = Linear::init(width, width, rng);
  w.key = Linear::init(width, width, rng);
  w.value = Linear::init(width, width, rng);
  w.out = Linear::init(width, width, rng);
  return w;
}

Tensor AttentionWeights::residual(const Tensor& h, const Tensor& context, std::size_t heads,
                                  std::size_t batch) const {
  const Tensor x = norm(h);
  const Tensor& ctx = context.defined() ? context : x;
  const Tensor q = query(x);
  const Tensor k = key(ctx);
  const Tensor v = value(ctx);
  return out(ops::attention(q, k, v, heads, batch));
}

void AttentionWeights::collect(const std::string& prefix, std::vector<NamedTensor>& out_params) const {
  norm.collect(prefix + ".norm", out_params);
  query.collect(prefix + ".query", out_params);
  key.collect(prefix + ".key", out_params);
  value.collect(prefix + ".value", out_params);
  out.collect(prefix + ".out", out_params);
}

FeedForwardWeights FeedForwardWeights::init(std::size_t width, std::size_t hidden, Rng& rng) {
  FeedForwardWeights w;
  w.norm = LayerNormParams::init(width);
  w.up = Linear::init(width, hidden, rng);
  w.down = Linear::init(hidden, width, rng);
  return w;
}

Tensor FeedForwardWeights::residual(const Tensor& h) const {
  return down(ops::gelu(up(norm(h))));
}

void FeedForwardWeights::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
  norm.collect(prefix + ".norm", out);
  up.collect(prefix + ".up", out);
  down.collect(prefix + ".down", out);
}

Tensor tile_rows(const Tensor& block, std::size_t times) {
  if (times == 1) return block;
  std::vector<Tensor> parts(times, block);
  return ops::concat_rows(parts);
}

std::size_t count_parameters(const std::vector<NamedTensor>& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.size();
  return n;
}

}  // namespace odrt
