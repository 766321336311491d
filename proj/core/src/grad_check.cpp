#include "mmcl/grad_check.hpp"

#include <cmath>

namespace mmcl {

GradCheckReport grad_check(const std::function<Tensor()>& loss_fn,
                           const std::vector<Parameter*>& params, double step) {
  for (Parameter* p : params) {
    if (!p->value.requires_grad()) {
      throw UsageError("grad_check: parameter '" + p->name + "' does not require grad");
    }
    p->value.zero_grad();
  }
  Tensor loss = loss_fn();
  loss.backward();
  std::vector<std::vector<float>> analytic;
  analytic.reserve(params.size());
  for (Parameter* p : params) analytic.push_back(p->value.grad());

  GradCheckReport report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& w = params[pi]->value.raw_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      float x0 = w[i];
      w[i] = static_cast<float>(x0 + step);
      double xp = w[i];
      double lp = loss_fn().item();
      w[i] = static_cast<float>(x0 - step);
      double xm = w[i];
      double lm = loss_fn().item();
      w[i] = x0;
      double numeric = (lp - lm) / (xp - xm);
      double a = analytic[pi][i];
      double rel = std::abs(a - numeric) / std::max(1.0, std::abs(numeric));
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_param = pi;
        report.worst_coord = static_cast<std::int64_t>(i);
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace mmcl
