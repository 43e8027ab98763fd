#include "pf/adam.hpp"

#include <cmath>
#include <stdexcept>

namespace pf {

AdamState adam_init(const std::vector<DiffTensor>& params, double beta1,
                    double beta2, double eps) {
  AdamState s;
  s.beta1 = beta1;
  s.beta2 = beta2;
  s.eps = eps;
  s.m.reserve(params.size());
  s.v.reserve(params.size());
  for (const auto& p : params) {
    s.m.emplace_back(p->numel(), 0.0);
    s.v.emplace_back(p->numel(), 0.0);
  }
  return s;
}

void adam_step(AdamState& state, const std::vector<DiffTensor>& params,
               double lr, double direction) {
  if (params.size() != state.m.size()) {
    throw std::runtime_error(
        "adam_step: parameter list does not match the state it was "
        "initialized with");
  }
  ++state.t;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& param = *params[p];
    if (param.grad.size() != param.numel()) {
      throw std::runtime_error(
          "adam_step: parameter has no gradient; run backward first");
    }
    if (state.m[p].size() != param.numel()) {
      throw std::runtime_error(
          "adam_step: parameter size changed since adam_init");
    }
    auto& m = state.m[p];
    auto& v = state.v[p];
    for (std::size_t i = 0; i < m.size(); ++i) {
      const double g = param.grad[i];
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      param.value[i] += direction * lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

}  // namespace pf
