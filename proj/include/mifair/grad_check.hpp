#pragma once

#include <functional>
#include <span>
#include <vector>

#include "mifair/tape.hpp"

namespace mifair {

// Builds a scalar on the given tape from parameter leaves (one per tensor
// passed to grad_check, in order).
using ScalarFn = std::function<Var(Tape&, std::span<const Var>)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::vector<double> per_param;  // max relative error per parameter tensor
  std::size_t coordinates = 0;
};

// Central-difference check of backward() against (f(p+eps) - f(p-eps)) / 2eps
// for every coordinate. Relative error per coordinate is
// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
GradCheckResult grad_check(const ScalarFn& f, std::span<const Tensor> params, double epsilon = 1e-5);

// Backward of `analytic` against central differences of `numeric`. For
// objectives with stop-gradients: `numeric` holds the detached parts fixed
// at their base-point values.
GradCheckResult grad_check(const ScalarFn& analytic, const ScalarFn& numeric, std::span<const Tensor> params,
                           double epsilon = 1e-5);

}  // namespace mifair
