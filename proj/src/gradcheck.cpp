#include "ahdmil/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

namespace ahdmil {

double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

GradCheckResult finite_diff_check(const std::function<ag::Var(ag::Graph&)>& f,
                                  const ParamList& params, double h, ag::DrawTape* tape,
                                  bool extrapolate) {
  zero_grads(params);
  {
    ag::Graph g;
    ag::Var out = f(g);
    g.backward(out);
  }
  std::vector<std::vector<double>> analytic;
  for (const auto& p : params) {
    const auto gr = std::as_const(*p.tensor).grad();
    analytic.emplace_back(gr.begin(), gr.end());
    if (analytic.back().empty()) analytic.back().assign(p.tensor->size(), 0.0);
  }

  auto eval = [&] {
    if (tape) tape->start_replay();
    ag::Graph g;
    return f(g).item();
  };

  GradCheckResult res;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto x = params[i].tensor->data();
    for (std::size_t k = 0; k < x.size(); ++k) {
      const double saved = x[k];
      auto central = [&](double step) {
        x[k] = saved + step;
        const double up = eval();
        x[k] = saved - step;
        const double down = eval();
        x[k] = saved;
        return (up - down) / (2.0 * step);
      };
      const double coarse = central(h);
      const double numeric = extrapolate ? (4.0 * central(0.5 * h) - coarse) / 3.0 : coarse;
      const double err = relative_error(analytic[i][k], numeric);
      ++res.coordinates;
      if (res.worst.empty() || err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst = params[i].name + "[" + std::to_string(k) + "]";
      }
    }
  }
  zero_grads(params);
  return res;
}

}  // namespace ahdmil
