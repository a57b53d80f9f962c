#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "bagnet/autodiff.hpp"

namespace bagnet {

struct GradCheckOptions {
  double step = 1e-4;
  double tolerance = 1e-5;
  // Denominator floor of the relative error, so coordinates whose true
  // gradient is ~0 are judged on absolute error at this scale.
  double floor = 1e-6;
};

struct GradCheckReport {
  double max_rel_error = 0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic_at_worst = 0;
  double numeric_at_worst = 0;
  std::size_t coordinates = 0;
  double relu_margin = 0;  // min |pre-activation| seen at the evaluation point
  bool passed = false;
};

struct NamedTensor {
  std::string name;
  Tensor<double>* tensor;
};

/// Compares reverse-mode gradients of a scalar f64 computation against
/// central differences for every coordinate of every tensor in `params`.
///
/// `f(tape, vars)` must build the computation on `tape` from the leaves
/// `vars` (one per entry of `params`, same order) and return a scalar Var.
/// Tensors are perturbed in place and restored before returning.
template <class F>
GradCheckReport gradient_check(F&& f, const std::vector<NamedTensor>& params,
                               GradCheckOptions opt = {}) {
  auto evaluate = [&](bool with_grad, Tape<double>& tape) {
    std::vector<Var> vars;
    vars.reserve(params.size());
    for (const auto& p : params) vars.push_back(tape.leaf(*p.tensor, with_grad, p.name));
    const Var root = f(tape, std::span<const Var>(vars));
    if (tape.value(root).size() != 1)
      throw ShapeError("gradient_check: computation must return a scalar");
    return std::make_pair(root, vars);
  };

  GradCheckReport report;
  Tape<double> tape(/*check_finite=*/true);
  const auto [root, vars] = evaluate(true, tape);
  tape.backward(root);
  report.relu_margin = ad::relu_margin(tape);

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    const Tensor<double> analytic = tape.grad(vars[pi]);
    Tensor<double>& x = *params[pi].tensor;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double saved = x[i];
      x[i] = saved + opt.step;
      Tape<double> plus(true);
      const double fp = plus.value(evaluate(false, plus).first)[0];
      x[i] = saved - opt.step;
      Tape<double> minus(true);
      const double fm = minus.value(evaluate(false, minus).first)[0];
      x[i] = saved;
      const double numeric = (fp - fm) / (2 * opt.step);
      const double a = analytic[i];
      const double den = std::max({std::abs(a), std::abs(numeric), opt.floor});
      const double rel = std::abs(a - numeric) / den;
      ++report.coordinates;
      if (rel > report.max_rel_error || report.coordinates == 1) {
        report.max_rel_error = rel;
        report.worst_param = params[pi].name;
        report.worst_index = i;
        report.analytic_at_worst = a;
        report.numeric_at_worst = numeric;
      }
    }
  }
  report.passed = report.max_rel_error <= opt.tolerance;
  return report;
}

}  // namespace bagnet
