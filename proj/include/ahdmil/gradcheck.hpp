#pragma once

#include <functional>
#include <string>

#include "ahdmil/autograd.hpp"
#include "ahdmil/optim.hpp"

namespace ahdmil {

/// |a - b| / max(|a|, |b|, 1e-6). The floor keeps near-zero gradients from
/// turning rounding noise into large relative errors.
double relative_error(double a, double b);

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;  // "<param>[<index>]"
  std::size_t coordinates = 0;
};

/// Compares tape gradients of the scalar built by `f` against central
/// differences over every coordinate of `params`. `f` must create leaves for
/// the listed tensors in the graph it receives. When `tape` is given, the
/// first evaluation records draws and all perturbed evaluations replay them.
/// With `extrapolate`, differences at h and h/2 are combined (Richardson) so
/// the h^2 truncation term cancels; useful where curvature is large relative
/// to the gradient.
GradCheckResult finite_diff_check(const std::function<ag::Var(ag::Graph&)>& f,
                                  const ParamList& params, double h = 1e-5,
                                  ag::DrawTape* tape = nullptr, bool extrapolate = false);

}  // namespace ahdmil
