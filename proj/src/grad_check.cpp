#include "mifair/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "mifair/error.hpp"

namespace mifair {

namespace {

double evaluate(const ScalarFn& f, std::span<const Tensor> params) {
  Tape tape(false);
  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (const Tensor& p : params) leaves.push_back(tape.leaf(p));
  const double v = f(tape, leaves).value().item();
  if (!std::isfinite(v)) throw NumericError("grad_check: function value is not finite");
  return v;
}

}  // namespace

GradCheckResult grad_check(const ScalarFn& f, std::span<const Tensor> params, double epsilon) {
  return grad_check(f, f, params, epsilon);
}

GradCheckResult grad_check(const ScalarFn& analytic_fn, const ScalarFn& f, std::span<const Tensor> params,
                           double epsilon) {
  if (!(epsilon > 0.0 && epsilon <= 1e-2)) throw ConfigError("grad_check: epsilon must lie in (0, 1e-2]");

  Tape tape(true);
  std::vector<Var> leaves;
  for (const Tensor& p : params) leaves.push_back(tape.leaf(p));
  Var root = analytic_fn(tape, leaves);
  if (!std::isfinite(root.value().item())) throw NumericError("grad_check: function value is not finite");
  const Gradients grads = tape.backward(root);

  GradCheckResult result;
  std::vector<Tensor> work(params.begin(), params.end());
  for (std::size_t p = 0; p < work.size(); ++p) {
    const Tensor analytic = grads.of(leaves[p]);
    double worst = 0.0;
    for (std::size_t i = 0; i < work[p].size(); ++i) {
      const double orig = work[p][i];
      work[p][i] = orig + epsilon;
      const double up = evaluate(f, work);
      work[p][i] = orig - epsilon;
      const double down = evaluate(f, work);
      work[p][i] = orig;
      const double numeric = (up - down) / (2.0 * epsilon);
      const double a = analytic[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(a - numeric) / denom);
      ++result.coordinates;
    }
    result.per_param.push_back(worst);
    result.max_rel_error = std::max(result.max_rel_error, worst);
  }
  return result;
}

}  // namespace mifair
