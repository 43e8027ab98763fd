#pragma once

#include <cstddef>
#include <vector>

#include "pf/tensor.hpp"

namespace pf {

/// Moment buffers for the Adam update rule, bound to a fixed parameter list.
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t t = 0;  // completed steps (bias correction uses t+1)
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

/// Allocate zeroed moment buffers matching `params`.
AdamState adam_init(const std::vector<DiffTensor>& params,
                    double beta1 = 0.9, double beta2 = 0.999,
                    double eps = 1e-8);

/// One bias-corrected Adam update from the gradients currently stored on
/// `params`.  `direction = -1` steps against the gradient (descent, the
/// default); `direction = +1` steps along it (ascent for maximization).
/// Gradients are left untouched; callers zero them when appropriate.
void adam_step(AdamState& state, const std::vector<DiffTensor>& params,
               double lr, double direction = -1.0);

}  // namespace pf
