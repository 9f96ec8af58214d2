#pragma once

#include <cstdint>
#include <span>

#include "ahdmil/autograd.hpp"
#include "ahdmil/tensor.hpp"

namespace ahdmil {

/// Chebyshev KAN classification head. `coef` is C x Q x (K+1); slice c is the
/// coefficient matrix of class c.
struct CkaHead {
  std::size_t q = 0;
  std::size_t k = 0;
  std::size_t c = 0;
  Tensor coef;
};

/// Q x (K+1) matrix whose column k holds T_k(x). Throws DomainError if any
/// |x_q| exceeds 1 + 1e-9.
Tensor chebyshev_basis(std::span<const double> x, std::size_t K);

/// Logit of class c: sum_k sum_q T_k(tanh(e))[q] * coef[c, q, k].
double cka_forward(std::span<const double> e, const CkaHead& head, std::size_t c);
/// Same logit given one class's Q x (K+1) coefficient block directly.
double cka_logit(std::span<const double> e, std::span<const double> coef_c, std::size_t K);

/// Coefficients ~ U(-a, a) with a = sqrt(6 / (Q + K + 1)).
CkaHead init_xavier(std::size_t Q, std::size_t K, std::size_t C, std::uint64_t seed);

namespace ag {

/// Graph op for all classes at once. e: C x Q (row c feeds class c),
/// coef: C x Q x (K+1). Returns the C logits.
Var cka_logits(Var e, Var coef);

}  // namespace ag

}  // namespace ahdmil
