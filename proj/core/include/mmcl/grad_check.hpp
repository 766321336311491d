#pragma once

#include <functional>
#include <vector>

#include "mmcl/optim.hpp"

namespace mmcl {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::int64_t worst_coord = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;

  bool passed(double threshold = 1e-3) const { return max_rel_error <= threshold; }
};

/// Compare reverse-mode gradients of `loss_fn` against central differences.
///
/// `loss_fn` must rebuild its graph from the parameters' current values on
/// every call and return a scalar. Each coordinate is perturbed by +/- `step`;
/// the quotient uses the actually-representable step ((x+h) - (x-h) after
/// float rounding) in double. Per-coordinate error is
/// |analytic - numeric| / max(1, |numeric|); the report keeps the maximum.
GradCheckReport grad_check(const std::function<Tensor()>& loss_fn,
                           const std::vector<Parameter*>& params, double step = 1e-3);

}  // namespace mmcl
