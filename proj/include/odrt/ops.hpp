#pragma once

#include <array>
#include <cstdint>
#include <span>

#include "odrt/tensor.hpp"

// Differentiable tensor operations. Every op checks shapes explicitly; the
// only implicit broadcast is add_bias (row vector over the rows of a matrix).
// An op records a backward closure on the thread's active tape when any
// input requires a gradient.
namespace odrt::ops {

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor gelu(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor clamp(const Tensor& x, double lo, double hi);

Tensor softmax(const Tensor& x, std::size_t axis);
// Softmax over the last axis restricted to entries with enabled[i] != 0.
// Disabled entries come out as exactly 0 and receive no gradient.
Tensor masked_softmax(const Tensor& x, std::span<const std::uint8_t> enabled);
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor mse(const Tensor& a, const Tensor& b);
Tensor column(const Tensor& x, std::size_t col);

Tensor reshape(const Tensor& x, Shape shape);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count);
Tensor concat_rows(std::span<const Tensor> parts);

// Multi-head scaled dot-product attention without projections.
// q: [batch*tq x d], k/v: [batch*tk x d]; returns [batch*tq x d].
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                 std::size_t batch);

// Pass-through gate. Forward selects candidates[choice] (or, with soft=true,
// the mixture sum_i p_i * c_i). Backward always treats the selection as the
// soft confidences: dL/dc_i = p_i * g and dL/dp_i = <g, c_i>. Undefined
// candidates count as zeros. `probs` is [cells x 4]; `cell` picks the row.
Tensor pass_through_gate(const std::array<Tensor, 4>& candidates, const Tensor& probs,
                         std::size_t cell, int choice, bool soft);

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// Plain kernels shared with non-recording callers.
namespace kernel {
void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c,
            std::size_t m, std::size_t k, std::size_t n);
std::array<double, 4> masked_softmax4(std::span<const double, 4> logits,
                                      std::span<const std::uint8_t, 4> enabled);
}  // namespace kernel

}  // namespace odrt::ops
