#pragma once

#include <cstdint>
#include <functional>
#include <optional>

#include "tdg/tape.hpp"
#include "tdg/tensor.hpp"

namespace tdg::ad {

/// Scalar-valued function of one tensor, evaluated on a fresh tape.
using ScalarFn = std::function<Var<double>(Tape<double>&, const Var<double>&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::int64_t worst_index = -1;
  // Set when f was non-finite at a perturbed point.
  std::optional<std::int64_t> nonfinite_index;

  bool ok(double tol) const { return !nonfinite_index && max_rel_error < tol; }
};

/// Compares the tape gradient of `f` at `point` with central differences of step `h`.
/// Error per coordinate is |analytic - numeric| / max(1, |analytic|).
GradCheckResult check_gradient(const ScalarFn& f, const Tensor<double>& point, double h = 1e-5);

}  // namespace tdg::ad
