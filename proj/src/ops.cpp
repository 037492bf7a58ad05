#include "odrt/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "odrt/error.hpp"

namespace odrt::ops {

namespace {

template <typename... Ts>
Tape* recording(const Ts&... inputs) {
  Tape* tape = active_tape();
  if (!tape) return nullptr;
  bool any = (inputs.requires_grad() || ...);
  return any ? tape : nullptr;
}

void expect_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (!t.defined() || t.rank() != rank) {
    fail(ErrorKind::Shape, std::string(op) + " expects rank " + std::to_string(rank) + ", got " +
                               shape_str(t.shape()));
  }
}

void expect_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    fail(ErrorKind::Shape,
         std::string(op) + " shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

// dst[m x n] += a[m x k] * b^T where b is [n x k]
void matmul_nt_acc(std::span<const double> a, std::span<const double> b, std::span<double> dst,
                   std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ar = a.data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* br = b.data() + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ar[p] * br[p];
      dst[i * n + j] += s;
    }
  }
}

// dst[k x n] += a^T * c where a is [m x k], c is [m x n]
void matmul_tn_acc(std::span<const double> a, std::span<const double> c, std::span<double> dst,
                   std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ar = a.data() + i * k;
    const double* cr = c.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = ar[p];
      double* dr = dst.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) dr[j] += s * cr[j];
    }
  }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

}  // namespace

namespace kernel {

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c,
            std::size_t m, std::size_t k, std::size_t n) {
  std::fill(c.begin(), c.end(), 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* cr = c.data() + i * n;
    const double* ar = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = ar[p];
      const double* br = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) cr[j] += s * br[j];
    }
  }
}

std::array<double, 4> masked_softmax4(std::span<const double, 4> logits,
                                      std::span<const std::uint8_t, 4> enabled) {
  double mx = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < 4; ++i)
    if (enabled[i]) mx = std::max(mx, logits[i]);
  std::array<double, 4> p{0.0, 0.0, 0.0, 0.0};
  double z = 0.0;
  for (int i = 0; i < 4; ++i) {
    if (!enabled[i]) continue;
    p[i] = std::exp(logits[i] - mx);
    z += p[i];
  }
  for (auto& v : p) v /= z;
  return p;
}

}  // namespace kernel

Tensor matmul(const Tensor& a, const Tensor& b) {
  expect_rank(a, 2, "matmul");
  expect_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    fail(ErrorKind::Shape, "matmul inner dimensions disagree: " + shape_str(a.shape()) + " x " +
                               shape_str(b.shape()));
  }
  Tensor out(Shape{m, n});
  kernel::matmul(a.values(), b.values(), out.mutable_values(), m, k, n);
  if (Tape* tape = recording(a, b)) {
    out.set_requires_grad(true);
    tape->record([a, b, out, m, k, n]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      if (a.requires_grad()) matmul_nt_acc(g, b.values(), a.grad_buffer(), m, n, k);
      if (b.requires_grad()) matmul_tn_acc(a.values(), g, b.grad_buffer(), m, k, n);
    });
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  expect_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor out(Shape{n, m});
  auto x = a.values();
  auto y = out.mutable_values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y[j * m + i] = x[i * n + j];
  if (Tape* tape = recording(a)) {
    out.set_requires_grad(true);
    tape->record([a, out, m, n]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
    });
  }
  return out;
}

namespace {

template <typename Fwd>
Tensor binary_elementwise(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, double sa,
                          double sb, bool product) {
  expect_same(a, b, name);
  Tensor out(a.shape());
  auto x = a.values();
  auto y = b.values();
  auto z = out.mutable_values();
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = fwd(x[i], y[i]);
  if (Tape* tape = recording(a, b)) {
    out.set_requires_grad(true);
    tape->record([a, b, out, sa, sb, product]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        if (product) {
          auto y = b.values();
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
        } else {
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += sa * g[i];
        }
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        if (product) {
          auto x = a.values();
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
        } else {
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += sb * g[i];
        }
      }
    });
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_elementwise(a, b, "add", [](double x, double y) { return x + y; }, 1.0, 1.0, false);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_elementwise(a, b, "sub", [](double x, double y) { return x - y; }, 1.0, -1.0, false);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_elementwise(a, b, "mul", [](double x, double y) { return x * y; }, 0.0, 0.0, true);
}

Tensor scale(const Tensor& a, double s) {
  Tensor out(a.shape());
  auto x = a.values();
  auto y = out.mutable_values();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] * s;
  if (Tape* tape = recording(a)) {
    out.set_requires_grad(true);
    tape->record([a, out, s]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
    });
  }
  return out;
}

Tensor add_scalar(const Tensor& a, double s) {
  Tensor out(a.shape());
  auto x = a.values();
  auto y = out.mutable_values();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] + s;
  if (Tape* tape = recording(a)) {
    out.set_requires_grad(true);
    tape->record([a, out]() mutable {
      if (!out.has_grad()) return;
      a.accumulate_grad(out.grad());
    });
  }
  return out;
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  expect_rank(x, 2, "add_bias");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (bias.size() != cols) {
    fail(ErrorKind::Shape, "add_bias: bias " + shape_str(bias.shape()) + " does not fit rows of " +
                               shape_str(x.shape()));
  }
  Tensor out(x.shape());
  auto xv = x.values();
  auto bv = bias.values();
  auto y = out.mutable_values();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) y[r * cols + c] = xv[r * cols + c] + bv[c];
  if (Tape* tape = recording(x, bias)) {
    out.set_requires_grad(true);
    tape->record([x, bias, out, rows, cols]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      if (x.requires_grad()) x.accumulate_grad(g);
      if (bias.requires_grad()) {
        auto gb = bias.grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
      }
    });
  }
  return out;
}

Tensor gelu(const Tensor& x) {
  Tensor out(x.shape());
  auto xv = x.values();
  auto y = out.mutable_values();
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double v = xv[i];
    y[i] = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + 0.044715 * v * v * v)));
  }
  if (Tape* tape = recording(x)) {
    out.set_requires_grad(true);
    tape->record([x, out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto xv = x.values();
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = xv[i];
        const double u = kGeluC * (v + 0.044715 * v * v * v);
        const double t = std::tanh(u);
        const double du = kGeluC * (1.0 + 3.0 * 0.044715 * v * v);
        gx[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
      }
    });
  }
  return out;
}

Tensor abs(const Tensor& x) {
  Tensor out(x.shape());
  auto xv = x.values();
  auto y = out.mutable_values();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::abs(xv[i]);
  if (Tape* tape = recording(x)) {
    out.set_requires_grad(true);
    tape->record([x, out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto xv = x.values();
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double sgn = xv[i] > 0.0 ? 1.0 : (xv[i] < 0.0 ? -1.0 : 0.0);
        gx[i] += g[i] * sgn;
      }
    });
  }
  return out;
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  Tensor out(x.shape());
  auto xv = x.values();
  auto y = out.mutable_values();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::clamp(xv[i], lo, hi);
  if (Tape* tape = recording(x)) {
    out.set_requires_grad(true);
    tape->record([x, out, lo, hi]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto xv = x.values();
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (xv[i] > lo && xv[i] < hi) gx[i] += g[i];
    });
  }
  return out;
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    fail(ErrorKind::Shape, "softmax axis " + std::to_string(axis) + " invalid for " + shape_str(x.shape()));
  }
  const auto& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  auto xv = x.values();
  for (double v : xv)
    if (!std::isfinite(v)) fail(ErrorKind::Numeric, "softmax on non-finite input");
  Tensor out(s);
  auto y = out.mutable_values();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = xv[base];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xv[base + j * inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double e = std::exp(xv[base + j * inner] - mx);
        y[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < n; ++j) y[base + j * inner] /= z;
    }
  }
  if (Tape* tape = recording(x)) {
    out.set_requires_grad(true);
    tape->record([x, out, outer, inner, n]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto y = out.values();
      auto gx = x.grad_buffer();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * n * inner + in;
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j) dot += g[base + j * inner] * y[base + j * inner];
          for (std::size_t j = 0; j < n; ++j) {
            const std::size_t idx = base + j * inner;
            gx[idx] += y[idx] * (g[idx] - dot);
          }
        }
      }
    });
  }
  return out;
}

Tensor masked_softmax(const Tensor& x, std::span<const std::uint8_t> enabled) {
  if (x.rank() == 0 || enabled.size() != x.size()) {
    fail(ErrorKind::Shape, "masked_softmax mask size " + std::to_string(enabled.size()) +
                               " vs input " + shape_str(x.shape()));
  }
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.size() / n;
  auto xv = x.values();
  Tensor out(x.shape());
  auto y = out.mutable_values();
  std::vector<std::uint8_t> mask(enabled.begin(), enabled.end());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * n;
    const std::uint8_t* er = mask.data() + r * n;
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) {
      if (!er[j]) continue;
      any = true;
      if (!std::isfinite(xr[j])) fail(ErrorKind::Numeric, "masked_softmax on non-finite input");
    }
    require(any, ErrorKind::Contract, "masked_softmax row " + std::to_string(r) + " has no enabled entry");
    if (n == 4) {
      auto p = kernel::masked_softmax4(std::span<const double, 4>(xr, 4),
                                       std::span<const std::uint8_t, 4>(er, 4));
      std::copy(p.begin(), p.end(), y.begin() + static_cast<std::ptrdiff_t>(r * n));
      continue;
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (er[j]) mx = std::max(mx, xr[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      y[r * n + j] = er[j] ? std::exp(xr[j] - mx) : 0.0;
      z += y[r * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) y[r * n + j] /= z;
  }
  if (Tape* tape = recording(x)) {
    out.set_requires_grad(true);
    tape->record([x, out, rows, n]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto y = out.values();
      auto gx = x.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
        for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += y[r * n + j] * (g[r * n + j] - dot);
      }
    });
  }
  return out;
}

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (x.rank() == 0) fail(ErrorKind::Shape, "layernorm on rank-0 tensor");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.size() / n;
  if (gain.size() != n || bias.size() != n) {
    fail(ErrorKind::Shape, "layernorm affine " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                               " vs input " + shape_str(x.shape()));
  }
  auto xv = x.values();
  auto gv = gain.values();
  auto bv = bias.values();
  Tensor out(x.shape());
  auto y = out.mutable_values();
  std::vector<double> xhat(x.size());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xr[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (xr[j] - mu) * is;
      xhat[r * n + j] = h;
      y[r * n + j] = h * gv[j] + bv[j];
    }
  }
  if (Tape* tape = recording(x, gain, bias)) {
    out.set_requires_grad(true);
    tape->record([x, gain, bias, out, xhat = std::move(xhat), inv_std = std::move(inv_std), rows,
                  n]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gv = gain.values();
      if (gain.requires_grad()) {
        auto gg = gain.grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < n; ++j) gg[j] += g[r * n + j] * xhat[r * n + j];
      }
      if (bias.requires_grad()) {
        auto gb = bias.grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
      }
      if (x.requires_grad()) {
        auto gx = x.grad_buffer();
        const double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t r = 0; r < rows; ++r) {
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            const double d = g[r * n + j] * gv[j];
            m1 += d;
            m2 += d * xhat[r * n + j];
          }
          m1 *= inv_n;
          m2 *= inv_n;
          for (std::size_t j = 0; j < n; ++j) {
            const double d = g[r * n + j] * gv[j];
            gx[r * n + j] += inv_std[r] * (d - m1 - xhat[r * n + j] * m2);
          }
        }
      }
    });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  Tensor out = Tensor::scalar(s);
  if (Tape* tape = recording(x)) {
    out.set_requires_grad(true);
    tape->record([x, out]() mutable {
      if (!out.has_grad()) return;
      const double g = out.grad()[0];
      for (auto& v : x.grad_buffer()) v += g;
    });
  }
  return out;
}

Tensor mean(const Tensor& x) {
  require(x.size() > 0, ErrorKind::Shape, "mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

Tensor mse(const Tensor& a, const Tensor& b) {
  expect_same(a, b, "mse");
  auto x = a.values();
  auto y = b.values();
  const double inv_n = 1.0 / static_cast<double>(x.size());
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - y[i]) * (x[i] - y[i]);
  Tensor out = Tensor::scalar(s * inv_n);
  if (Tape* tape = recording(a, b)) {
    out.set_requires_grad(true);
    tape->record([a, b, out, inv_n]() mutable {
      if (!out.has_grad()) return;
      const double g = out.grad()[0] * 2.0 * inv_n;
      auto x = a.values();
      auto y = b.values();
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        for (std::size_t i = 0; i < x.size(); ++i) ga[i] += g * (x[i] - y[i]);
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t i = 0; i < x.size(); ++i) gb[i] -= g * (x[i] - y[i]);
      }
    });
  }
  return out;
}

Tensor column(const Tensor& x, std::size_t col) {
  expect_rank(x, 2, "column");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  require(col < cols, ErrorKind::Shape, "column index out of range for " + shape_str(x.shape()));
  Tensor out(Shape{rows});
  auto xv = x.values();
  auto y = out.mutable_values();
  for (std::size_t r = 0; r < rows; ++r) y[r] = xv[r * cols + col];
  if (Tape* tape = recording(x)) {
    out.set_requires_grad(true);
    tape->record([x, out, rows, cols, col]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gx = x.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) gx[r * cols + col] += g[r];
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.size()) {
    fail(ErrorKind::Shape, "reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  Tensor out = x.reshaped(std::move(shape));
  if (Tape* tape = recording(x)) {
    out.set_requires_grad(true);
    tape->record([x, out]() mutable {
      if (!out.has_grad()) return;
      x.accumulate_grad(out.grad());
    });
  }
  return out;
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count) {
  expect_rank(x, 2, "slice_rows");
  const std::size_t cols = x.dim(1);
  if (begin + count > x.dim(0)) {
    fail(ErrorKind::Shape, "slice_rows [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                               ") out of range for " + shape_str(x.shape()));
  }
  auto xv = x.values();
  std::vector<double> data(xv.begin() + static_cast<std::ptrdiff_t>(begin * cols),
                           xv.begin() + static_cast<std::ptrdiff_t>((begin + count) * cols));
  Tensor out(Shape{count, cols}, std::move(data));
  if (Tape* tape = recording(x)) {
    out.set_requires_grad(true);
    tape->record([x, out, begin, cols]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gx[begin * cols + i] += g[i];
    });
  }
  return out;
}

Tensor concat_rows(std::span<const Tensor> parts) {
  require(!parts.empty(), ErrorKind::Shape, "concat_rows of nothing");
  const std::size_t cols = parts.front().dim(1);
  std::size_t rows = 0;
  bool any_grad = false;
  for (const auto& p : parts) {
    expect_rank(p, 2, "concat_rows");
    if (p.dim(1) != cols) {
      fail(ErrorKind::Shape, "concat_rows column mismatch " + shape_str(p.shape()) + " vs " +
                                 shape_str(parts.front().shape()));
    }
    rows += p.dim(0);
    any_grad = any_grad || p.requires_grad();
  }
  std::vector<double> data;
  data.reserve(rows * cols);
  for (const auto& p : parts) data.insert(data.end(), p.values().begin(), p.values().end());
  Tensor out(Shape{rows, cols}, std::move(data));
  Tape* tape = active_tape();
  if (tape && any_grad) {
    out.set_requires_grad(true);
    std::vector<Tensor> saved(parts.begin(), parts.end());
    tape->record([saved, out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      std::size_t offset = 0;
      for (auto& p : saved) {
        if (p.requires_grad()) p.accumulate_grad(g.subspan(offset, p.size()));
        offset += p.size();
      }
    });
  }
  return out;
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                 std::size_t batch) {
  expect_rank(q, 2, "attention");
  expect_rank(k, 2, "attention");
  expect_rank(v, 2, "attention");
  expect_same(k, v, "attention k/v");
  const std::size_t d = q.dim(1);
  if (k.dim(1) != d || heads == 0 || d % heads != 0 || batch == 0 || q.dim(0) % batch != 0 ||
      k.dim(0) % batch != 0) {
    fail(ErrorKind::Shape, "attention shapes q" + shape_str(q.shape()) + " k" + shape_str(k.shape()) +
                               " heads=" + std::to_string(heads) + " batch=" + std::to_string(batch));
  }
  const std::size_t tq = q.dim(0) / batch, tk = k.dim(0) / batch, dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  auto qv = q.values();
  auto kv = k.values();
  auto vv = v.values();
  Tensor out(Shape{batch * tq, d});
  auto ov = out.mutable_values();
  std::vector<double> probs(batch * heads * tq * tk);
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t h = 0; h < heads; ++h) {
      double* P = probs.data() + (n * heads + h) * tq * tk;
      for (std::size_t i = 0; i < tq; ++i) {
        const double* qi = qv.data() + (n * tq + i) * d + h * dh;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < tk; ++j) {
          const double* kj = kv.data() + (n * tk + j) * d + h * dh;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          s *= sc;
          P[i * tk + j] = s;
          mx = std::max(mx, s);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < tk; ++j) {
          P[i * tk + j] = std::exp(P[i * tk + j] - mx);
          z += P[i * tk + j];
        }
        for (std::size_t j = 0; j < tk; ++j) P[i * tk + j] /= z;
        double* oi = ov.data() + (n * tq + i) * d + h * dh;
        for (std::size_t j = 0; j < tk; ++j) {
          const double pj = P[i * tk + j];
          const double* vj = vv.data() + (n * tk + j) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += pj * vj[c];
        }
      }
    }
  }
  if (Tape* tape = recording(q, k, v)) {
    out.set_requires_grad(true);
    tape->record([q, k, v, out, probs = std::move(probs), batch, heads, tq, tk, d, dh, sc]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto qv = q.values();
      auto kv = k.values();
      auto vv = v.values();
      std::span<double> gq, gk, gv;
      if (q.requires_grad()) gq = q.grad_buffer();
      if (k.requires_grad()) gk = k.grad_buffer();
      if (v.requires_grad()) gv = v.grad_buffer();
      std::vector<double> dP(tk);
      for (std::size_t n = 0; n < batch; ++n) {
        for (std::size_t h = 0; h < heads; ++h) {
          const double* P = probs.data() + (n * heads + h) * tq * tk;
          for (std::size_t i = 0; i < tq; ++i) {
            const double* gi = g.data() + (n * tq + i) * d + h * dh;
            double dot = 0.0;
            for (std::size_t j = 0; j < tk; ++j) {
              const double* vj = vv.data() + (n * tk + j) * d + h * dh;
              double s = 0.0;
              for (std::size_t c = 0; c < dh; ++c) s += gi[c] * vj[c];
              dP[j] = s;
              dot += s * P[i * tk + j];
              if (!gv.empty()) {
                double* gvj = gv.data() + (n * tk + j) * d + h * dh;
                const double pj = P[i * tk + j];
                for (std::size_t c = 0; c < dh; ++c) gvj[c] += pj * gi[c];
              }
            }
            const double* qi = qv.data() + (n * tq + i) * d + h * dh;
            for (std::size_t j = 0; j < tk; ++j) {
              const double ds = P[i * tk + j] * (dP[j] - dot) * sc;
              if (!gq.empty()) {
                const double* kj = kv.data() + (n * tk + j) * d + h * dh;
                double* gqi = gq.data() + (n * tq + i) * d + h * dh;
                for (std::size_t c = 0; c < dh; ++c) gqi[c] += ds * kj[c];
              }
              if (!gk.empty()) {
                double* gkj = gk.data() + (n * tk + j) * d + h * dh;
                for (std::size_t c = 0; c < dh; ++c) gkj[c] += ds * qi[c];
              }
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor pass_through_gate(const std::array<Tensor, 4>& candidates, const Tensor& probs,
                         std::size_t cell, int choice, bool soft) {
  require(choice >= 0 && choice < 4, ErrorKind::Contract, "gate choice out of range");
  expect_rank(probs, 2, "pass_through_gate");
  require(probs.dim(1) == 4 && cell < probs.dim(0), ErrorKind::Shape,
          "gate probs " + shape_str(probs.shape()) + " cell " + std::to_string(cell));
  const Tensor& chosen = candidates[static_cast<std::size_t>(choice)];
  require(chosen.defined(), ErrorKind::Contract, "gate selects an unavailable candidate");
  const Shape shape = chosen.shape();
  for (const auto& c : candidates)
    if (c.defined()) expect_same(c, chosen, "pass_through_gate");
  std::array<double, 4> p;
  for (int i = 0; i < 4; ++i) p[static_cast<std::size_t>(i)] = probs.values()[cell * 4 + static_cast<std::size_t>(i)];

  Tensor out;
  if (soft) {
    out = Tensor(shape);
    auto y = out.mutable_values();
    for (std::size_t i = 0; i < 4; ++i) {
      if (!candidates[i].defined()) continue;
      auto cv = candidates[i].values();
      for (std::size_t e = 0; e < y.size(); ++e) y[e] += p[i] * cv[e];
    }
  } else {
    out = chosen.detach();
  }
  Tape* tape = active_tape();
  bool any = probs.requires_grad();
  for (const auto& c : candidates) any = any || (c.defined() && c.requires_grad());
  if (tape && any) {
    out.set_requires_grad(true);
    tape->record([candidates, probs, out, cell, p]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      std::span<double> gp;
      if (probs.requires_grad()) gp = probs.grad_buffer();
      for (std::size_t i = 0; i < 4; ++i) {
        Tensor c = candidates[i];
        if (!c.defined()) continue;
        if (!gp.empty()) {
          auto cv = c.values();
          double dot = 0.0;
          for (std::size_t e = 0; e < g.size(); ++e) dot += g[e] * cv[e];
          gp[cell * 4 + i] += dot;
        }
        if (c.requires_grad() && p[i] != 0.0) {
          auto gc = c.grad_buffer();
          for (std::size_t e = 0; e < g.size(); ++e) gc[e] += p[i] * g[e];
        }
      }
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  return add_bias(matmul(x, weight), bias);
}

}  // namespace odrt::ops
