#include "tdg/gradcheck.hpp"

#include <cmath>
#include <stdexcept>

namespace tdg::ad {

namespace {

double evaluate(const ScalarFn& f, const Tensor<double>& x) {
  Tape<double> tape;
  const Var<double> in = tape.leaf(x, false);
  return f(tape, in).value().item();
}

}  // namespace

GradCheckResult check_gradient(const ScalarFn& f, const Tensor<double>& point, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("check_gradient: step must be positive");
  Tensor<double> analytic(point.shape(), 0.0);
  {
    Tape<double> tape;
    const Var<double> in = tape.leaf(point, true);
    const Var<double> out = f(tape, in);
    tape.backward(out);
    if (const auto* g = in.grad()) analytic = *g;
  }

  GradCheckResult res;
  Tensor<double> probe = point;
  for (std::int64_t i = 0; i < point.numel(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = evaluate(f, probe);
    probe[i] = orig - h;
    const double fm = evaluate(f, probe);
    probe[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      res.nonfinite_index = i;
      return res;
    }
    const double numeric = (fp - fm) / (2.0 * h);
    const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
    if (err > res.max_rel_error) {
      res.max_rel_error = err;
      res.worst_index = i;
    }
  }
  return res;
}

}  // namespace tdg::ad
