#pragma once

// Every differentiable op against central differences, each output
// scalarized with fixed random weights.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "odrt/gradcheck.hpp"
#include "odrt/ops.hpp"
#include "odrt/rng.hpp"

namespace oracle {

using namespace odrt;

inline Tensor weighted_sum(const Tensor& y, std::uint64_t seed) {
  Rng rng(seed);
  Tensor w = rng.normal_tensor(y.shape());
  return ops::sum(ops::mul(y, w));
}

inline std::vector<std::pair<std::string, double>> op_gradient_errors() {
  Rng rng(11);
  const Tensor m34 = rng.normal_tensor(Shape{3, 4});
  const Tensor m43 = rng.normal_tensor(Shape{4, 3});
  const Tensor other = rng.normal_tensor(Shape{3, 4});
  const Tensor bias = rng.normal_tensor(Shape{4});
  // keep |x| away from the kinks of abs and clamp
  Tensor away = rng.normal_tensor(Shape{3, 4});
  for (double& v : away.mutable_values()) v = (v < 0 ? -0.3 : 0.3) + 0.4 * v;
  std::vector<std::uint8_t> enabled(12, 1);
  enabled[1] = enabled[6] = 0;
  const Tensor q = rng.normal_tensor(Shape{6, 4});
  const Tensor kv = rng.normal_tensor(Shape{10, 4});

  struct Case {
    const char* name;
    std::function<Tensor(const Tensor&)> f;
    Tensor x;
  };
  const std::vector<Case> cases = {
      {"matmul", [&](const Tensor& x) { return ops::matmul(x, m43); }, m34},
      {"transpose", [&](const Tensor& x) { return ops::transpose(x); }, m34},
      {"add", [&](const Tensor& x) { return ops::add(x, other); }, m34},
      {"sub", [&](const Tensor& x) { return ops::sub(other, x); }, m34},
      {"mul", [&](const Tensor& x) { return ops::mul(x, other); }, m34},
      {"scale", [&](const Tensor& x) { return ops::scale(x, -1.7); }, m34},
      {"add_scalar", [&](const Tensor& x) { return ops::add_scalar(x, 0.3); }, m34},
      {"add_bias", [&](const Tensor& x) { return ops::add_bias(m34, x); }, bias},
      {"gelu", [&](const Tensor& x) { return ops::gelu(x); }, m34},
      {"abs", [&](const Tensor& x) { return ops::abs(x); }, away},
      {"clamp", [&](const Tensor& x) { return ops::clamp(x, -0.2, 0.25); }, away},
      {"softmax", [&](const Tensor& x) { return ops::softmax(x, 1); }, m34},
      {"masked_softmax", [&](const Tensor& x) { return ops::masked_softmax(x, enabled); }, m34},
      {"layernorm", [&](const Tensor& x) { return ops::layernorm(x, bias, bias, 1e-5); }, m34},
      {"mean", [&](const Tensor& x) { return ops::scale(ops::mean(x), 3.0); }, m34},
      {"mse", [&](const Tensor& x) { return ops::mse(x, other); }, m34},
      {"column", [&](const Tensor& x) { return ops::column(x, 2); }, m34},
      {"reshape", [&](const Tensor& x) { return ops::reshape(x, Shape{2, 6}); }, m34},
      {"slice_rows", [&](const Tensor& x) { return ops::slice_rows(x, 1, 2); }, m34},
      {"concat_rows",
       [&](const Tensor& x) {
         const std::array<Tensor, 3> parts{x, other, x};
         return ops::concat_rows(parts);
       },
       m34},
      {"linear", [&](const Tensor& x) { return ops::linear(m34, x, Tensor(Shape{3}, 0.1)); }, m43},
      {"attention.q", [&](const Tensor& x) { return ops::attention(x, kv, kv, 2, 2); }, q},
      {"attention.kv", [&](const Tensor& x) { return ops::attention(q, x, ops::scale(x, 0.5), 2, 2); }, kv},
  };
  std::vector<std::pair<std::string, double>> out;
  for (const auto& c : cases) {
    out.emplace_back(c.name, check_gradients([&](const Tensor& x) { return weighted_sum(c.f(x), 21); }, c.x));
  }
  return out;
}

// Hard pass-through gate: forward picks the argmax candidate, backward is the
// soft mixture's gradient. Returns the soft surrogate's FD error and the
// largest hard/soft backward mismatch.
inline std::pair<double, double> ste_gradient_errors(std::uint64_t seed) {
  Rng rng(seed);
  std::array<Tensor, 4> cands;
  for (auto& c : cands) c = rng.normal_tensor(Shape{3, 2});
  const Tensor logits = rng.normal_tensor(Shape{2, 4});
  auto f = [&](const Tensor& l, bool soft) {
    return weighted_sum(ops::pass_through_gate(cands, ops::softmax(l, 1), 1, 2, soft), 5);
  };
  Tensor lh = logits.detach(), ls = logits.detach();
  lh.set_requires_grad(true);
  ls.set_requires_grad(true);
  for (Tensor* t : {&lh, &ls}) {
    Tape tape;
    Tensor y;
    {
      RecordingScope s(tape);
      y = f(*t, t == &ls);
    }
    tape.backward(y);
  }
  double mismatch = 0.0;
  for (std::size_t i = 0; i < lh.size(); ++i) mismatch = std::max(mismatch, std::abs(lh.grad()[i] - ls.grad()[i]));
  const double fd = check_gradients([&](const Tensor& l) { return f(l, true); }, logits);
  return {fd, mismatch};
}

}  // namespace oracle
