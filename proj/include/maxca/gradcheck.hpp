#pragma once

#include <functional>

#include "maxca/tape.hpp"

namespace maxca {

// Central finite-difference check of reverse-mode gradients, run in f64.
// `build` must register every Param in `inputs` on the tape it is given
// (directly or through module forward calls) and return a scalar loss.

struct GradCheckReport {
  double max_rel_err = 0.0;
  bool pass(double tol) const { return max_rel_err <= tol; }
};

inline double grad_rel_err(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

inline GradCheckReport grad_check(const std::vector<Param<double>*>& inputs,
                                  const std::function<Var(Tape<double>&)>& build,
                                  double h_scale = 1e-4) {
  for (auto* p : inputs) p->zero_grad();
  {
    Tape<double> t;
    Var loss = build(t);
    t.backward(loss);
  }
  auto eval = [&]() {
    Tape<double> t;
    t.set_recording(false);
    return t.val(build(t))[0];
  };
  GradCheckReport report;
  for (auto* p : inputs) {
    for (std::int64_t i = 0; i < p->value.numel(); ++i) {
      const double saved = p->value[i];
      const double h = h_scale * std::max(1.0, std::abs(saved));
      p->value[i] = saved + h;
      const double lp = eval();
      p->value[i] = saved - h;
      const double lm = eval();
      p->value[i] = saved;
      const double fd = (lp - lm) / (2.0 * h);
      report.max_rel_err = std::max(report.max_rel_err, grad_rel_err(p->grad[i], fd));
    }
  }
  return report;
}

}  // namespace maxca
