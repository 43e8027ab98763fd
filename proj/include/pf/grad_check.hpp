#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "pf/tensor.hpp"

namespace pf {

/// Result of comparing analytic gradients against central finite differences.
struct GradCheckResult {
  bool ok = true;
  double max_rel_err = 0.0;  // worst relative error over all checked entries
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
};

/// Builds the scalar `f(tape, inputs)` once for analytic gradients and twice
/// per perturbed entry for central differences (step `h`), then compares.
/// Every entry of every input with `requires_grad` is checked.  The relative
/// error is |analytic - numeric| / max(1, |analytic|), and `ok` means the
/// worst of them stayed at or below `tol`.
///
/// `f` must rebuild its graph from `inputs` on each call; the checker resets
/// the tape and zeroes leaf gradients itself.
GradCheckResult grad_check(
    Tape& tape,
    const std::function<DiffTensor(Tape&, const std::vector<DiffTensor>&)>& f,
    const std::vector<DiffTensor>& inputs, double h = 1e-5,
    double tol = 1e-4);

}  // namespace pf
