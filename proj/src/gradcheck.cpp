#include "odrt/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "odrt/error.hpp"

namespace odrt {

namespace {

double eval_scalar(const std::function<Tensor(const Tensor&)>& f, const Tensor& x) {
  NoGradScope no_grad;
  const double v = f(x).item();
  if (!std::isfinite(v)) fail(ErrorKind::Numeric, "gradient check: f is not finite");
  return v;
}

}  // namespace

GradCheckResult check_gradients_detail(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                                       double step, double floor) {
  const bool had = x.requires_grad();
  x.set_requires_grad(true);
  x.zero_grad();
  Tape tape;
  Tensor y;
  {
    RecordingScope scope(tape);
    y = f(x);
  }
  if (!std::isfinite(y.item())) fail(ErrorKind::Numeric, "gradient check: f is not finite");
  tape.backward(y);
  std::vector<double> analytic(x.size(), 0.0);
  if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());
  tape.clear();
  x.zero_grad();
  x.set_requires_grad(had);

  GradCheckResult res;
  auto vals = x.mutable_values();
  for (std::size_t i = 0; i < vals.size(); ++i) {
    const double orig = vals[i];
    vals[i] = orig + step;
    const double fp = eval_scalar(f, x);
    vals[i] = orig - step;
    const double fm = eval_scalar(f, x);
    vals[i] = orig;
    const double numeric = (fp - fm) / (2.0 * step);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
    const double err = std::abs(analytic[i] - numeric) / denom;
    if (i == 0 || err > res.max_rel_err) {
      res.max_rel_err = err;
      res.worst_index = i;
      res.analytic = analytic[i];
      res.numeric = numeric;
    }
  }
  return res;
}

double check_gradients(const std::function<Tensor(const Tensor&)>& f, Tensor x, double step) {
  return check_gradients_detail(f, std::move(x), step).max_rel_err;
}

}  // namespace odrt
