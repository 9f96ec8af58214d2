#include "ahdmil/optim.hpp"

#include <cmath>
#include <utility>

#include "ahdmil/error.hpp"

namespace ahdmil {

void zero_grads(const ParamList& params) {
  for (const auto& p : params) p.tensor->zero_grad();
}

void adam_step(const ParamList& params, AdamState& state) {
  for (const auto& p : params) {
    for (double g : std::as_const(*p.tensor).grad()) {
      if (!std::isfinite(g)) {
        throw NumericError("non-finite gradient in parameter '" + p.name + "' at Adam step " +
                           std::to_string(state.step + 1));
      }
    }
  }
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.tensor->size(), 0.0);
      state.v.emplace_back(p.tensor->size(), 0.0);
    }
  }
  if (state.m.size() != params.size()) {
    throw ShapeError("Adam state holds " + std::to_string(state.m.size()) + " moments for " +
                     std::to_string(params.size()) + " parameters");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& w = *params[i].tensor;
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != w.size()) throw ShapeError("Adam moment shape mismatch for " + params[i].name);
    const auto g = std::as_const(w).grad();
    if (g.empty()) continue;  // parameter untouched this step
    auto x = w.data();
    for (std::size_t k = 0; k < x.size(); ++k) {
      m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g[k];
      v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g[k] * g[k];
      x[k] -= state.lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + state.eps);
    }
  }
}

}  // namespace ahdmil
