#include "pf/grad_check.hpp"

#include <cmath>
#include <stdexcept>

namespace pf {

GradCheckResult grad_check(
    Tape& tape,
    const std::function<DiffTensor(Tape&, const std::vector<DiffTensor>&)>& f,
    const std::vector<DiffTensor>& inputs, double h, double tol) {
  // Analytic pass.
  tape.reset();
  for (const auto& in : inputs) in->zero_grad();
  auto loss = f(tape, inputs);
  if (loss->numel() != 1) {
    throw std::runtime_error("grad_check: f must return a scalar");
  }
  tape.backward(loss);

  // Snapshot analytic leaf gradients before finite differencing mutates
  // anything.
  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (const auto& in : inputs) {
    analytic.push_back(in->requires_grad ? in->grad_ref()
                                         : std::vector<double>{});
  }

  GradCheckResult res;
  auto eval = [&](void) -> double {
    tape.reset();
    return f(tape, inputs)->value[0];
  };

  for (std::size_t p = 0; p < inputs.size(); ++p) {
    auto& in = *inputs[p];
    if (!in.requires_grad) continue;
    for (std::size_t i = 0; i < in.numel(); ++i) {
      const double saved = in.value[i];
      in.value[i] = saved + h;
      const double up = eval();
      in.value[i] = saved - h;
      const double down = eval();
      in.value[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[p][i];
      const double rel = std::abs(a - numeric) / std::max(1.0, std::abs(a));
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst_param = p;
        res.worst_index = i;
      }
    }
  }
  res.ok = res.max_rel_err <= tol;
  return res;
}

}  // namespace pf
