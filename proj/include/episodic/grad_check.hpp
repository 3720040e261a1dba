#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "episodic/autodiff.hpp"

namespace episodic {

struct GradCheckReport {
  double max_rel_err = 0.0;
  /// Relative error per coordinate, in input order then row-major order.
  std::vector<double> per_coord;
  std::vector<double> analytic;
  std::vector<double> numeric;
};

using ScalarFn = std::function<Var(const std::vector<Var>&)>;

/// Compares reverse-mode gradients of `f` at `point` against central
/// differences (f(x + h) - f(x - h)) / 2h, coordinate by coordinate.
/// Relative error is |a - n| / max(|a|, |n|, 1e-8).
inline GradCheckReport grad_check(const ScalarFn& f, const std::vector<Tensor>& point,
                                  double h = 1e-5) {
  std::vector<Var> leaves;
  for (const auto& t : point) leaves.emplace_back(t, true);
  Var out = f(leaves);
  if (out.size() != 1) throw ShapeError("grad_check: function must be scalar-valued");
  if (!out.value().all_finite()) throw NumericError("grad_check: non-finite value at point");
  backward(out);

  auto eval = [&](const std::vector<Tensor>& at) {
    NoGradGuard guard;
    std::vector<Var> vars;
    for (const auto& t : at) vars.emplace_back(t, false);
    const double v = f(vars).value().item();
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite value at probe point");
    return v;
  };

  GradCheckReport report;
  std::vector<Tensor> probe = point;
  for (std::size_t p = 0; p < point.size(); ++p) {
    for (std::size_t i = 0; i < point[p].size(); ++i) {
      const double x0 = point[p][i];
      probe[p][i] = x0 + h;
      const double fp = eval(probe);
      probe[p][i] = x0 - h;
      const double fm = eval(probe);
      probe[p][i] = x0;
      const double num = (fp - fm) / (2.0 * h);
      const double ana = leaves[p].has_grad() ? leaves[p].grad()[i] : 0.0;
      const double denom = std::max({std::abs(ana), std::abs(num), 1e-8});
      const double err = std::abs(ana - num) / denom;
      report.per_coord.push_back(err);
      report.analytic.push_back(ana);
      report.numeric.push_back(num);
      report.max_rel_err = std::max(report.max_rel_err, err);
    }
  }
  return report;
}

}  // namespace episodic
