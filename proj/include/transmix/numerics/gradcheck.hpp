#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "transmix/numerics/tape.hpp"
#include "transmix/numerics/tensor.hpp"

namespace transmix {

inline constexpr double kGradCheckFloor = 1e-6;

struct GradCheckReport {
  double max_rel_err = 0.0;
  bool pass = true;
  Index worst_param = -1;
  Index worst_index = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Compares reverse-mode gradients against central differences.
///
/// `f` builds a scalar loss on the tape it is given, binding every tensor in
/// `params` through Tape::param. Per coordinate the relative error is
/// |a - n| / max(kGradCheckFloor, |a| + |n|); the check passes when the
/// largest one is at most `tol`. Below the floor the comparison is effectively
/// absolute, since central differences carry rounding noise of order
/// eps * |f| / h there. Parameters are restored exactly afterwards and their grad
/// buffers are left zeroed.
template <typename Scalar, typename F>
GradCheckReport grad_check(F&& f, const std::vector<Tensor<Scalar>*>& params, Scalar h, Scalar tol) {
  for (auto* p : params) {
    p->set_requires_grad(true);
    p->zero_grad();
  }
  {
    Tape<Scalar> tape;
    Var<Scalar> loss = f(tape);
    tape.backward(loss);
  }
  std::vector<typename Tensor<Scalar>::Array> analytic;
  for (auto* p : params) {
    analytic.push_back(p->grad());
    p->zero_grad();
  }

  auto eval = [&] {
    Tape<Scalar> tape(false);
    return f(tape).value().item();
  };

  GradCheckReport report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& data = params[pi]->data();
    for (Index i = 0; i < data.size(); ++i) {
      const Scalar saved = data[i];
      data[i] = saved + h;
      const Scalar up = eval();
      data[i] = saved - h;
      const Scalar down = eval();
      data[i] = saved;
      const double numeric = static_cast<double>((up - down) / (Scalar(2) * h));
      const double a = static_cast<double>(analytic[pi][i]);
      const double rel = std::abs(a - numeric) / std::max(kGradCheckFloor, std::abs(a) + std::abs(numeric));
      if (rel > report.max_rel_err || report.worst_param < 0) {
        report.max_rel_err = std::max(report.max_rel_err, rel);
        if (rel >= report.max_rel_err) {
          report.worst_param = static_cast<Index>(pi);
          report.worst_index = i;
          report.worst_analytic = a;
          report.worst_numeric = numeric;
        }
      }
    }
  }
  report.pass = report.max_rel_err <= static_cast<double>(tol);
  return report;
}

}  // namespace transmix
