#include "ahdmil/cka.hpp"

#include <cmath>
#include <string>
#include <vector>

#include "ahdmil/error.hpp"
#include "ahdmil/rng.hpp"

namespace ahdmil {

Tensor chebyshev_basis(std::span<const double> x, std::size_t K) {
  if (K < 1) throw std::invalid_argument("chebyshev_basis: degree must be at least 1");
  const std::size_t cols = K + 1;
  Tensor out({x.size(), cols});
  for (std::size_t q = 0; q < x.size(); ++q) {
    const double v = x[q];
    if (!(std::abs(v) <= 1.0 + 1e-9)) {
      throw DomainError("chebyshev_basis: |x| > 1 at index " + std::to_string(q) +
                        " (value " + std::to_string(v) + ")");
    }
    double* row = &out.at(q, 0);
    row[0] = 1.0;
    row[1] = v;
    for (std::size_t k = 2; k <= K; ++k) row[k] = 2.0 * v * row[k - 1] - row[k - 2];
  }
  return out;
}

double cka_logit(std::span<const double> e, std::span<const double> coef_c, std::size_t K) {
  const std::size_t cols = K + 1;
  if (coef_c.size() != e.size() * cols) throw ShapeError("cka_logit: coefficient block size mismatch");
  std::vector<double> t(e.size());
  for (std::size_t q = 0; q < e.size(); ++q) {
    if (!std::isfinite(e[q])) throw DomainError("cka: non-finite input");
    t[q] = std::tanh(e[q]);
  }
  const Tensor basis = chebyshev_basis(t, K);
  double logit = 0.0;
  for (std::size_t i = 0; i < basis.size(); ++i) logit += basis[i] * coef_c[i];
  return logit;
}

double cka_forward(std::span<const double> e, const CkaHead& head, std::size_t c) {
  if (e.size() != head.q) throw ShapeError("cka_forward: input length does not match Q");
  if (c >= head.c) throw std::out_of_range("cka_forward: class index out of range");
  const std::size_t block = head.q * (head.k + 1);
  return cka_logit(e, head.coef.data().subspan(c * block, block), head.k);
}

CkaHead init_xavier(std::size_t Q, std::size_t K, std::size_t C, std::uint64_t seed) {
  if (Q == 0 || K == 0 || C == 0) throw std::invalid_argument("init_xavier: dims must be positive");
  CkaHead head{Q, K, C, Tensor({C, Q, K + 1})};
  const double a = std::sqrt(6.0 / static_cast<double>(Q + K + 1));
  Rng rng(seed);
  for (double& v : head.coef.data()) v = rng.uniform(-a, a);
  return head;
}

namespace ag {

Var cka_logits(Var e, Var coef) {
  const Tensor& ev = e.value();
  const Tensor& wv = coef.value();
  if (ev.rank() != 2 || wv.rank() != 3 || wv.dim(0) != ev.dim(0) || wv.dim(1) != ev.dim(1) ||
      wv.dim(2) < 2) {
    throw ShapeError("cka_logits: representation " + shape_str(ev.shape()) +
                     " incompatible with coefficients " + shape_str(wv.shape()));
  }
  const std::size_t C = ev.dim(0), Q = ev.dim(1), cols = wv.dim(2);
  std::vector<double> t(ev.size());
  for (std::size_t i = 0; i < ev.size(); ++i) {
    if (!std::isfinite(ev[i])) throw DomainError("cka_logits: non-finite input");
    t[i] = std::tanh(ev[i]);
  }
  const Tensor basis = chebyshev_basis(t, cols - 1);  // (C*Q) x (K+1), same layout as coef
  Tensor out({C}, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    double s = 0.0;
    for (std::size_t i = c * Q * cols; i < (c + 1) * Q * cols; ++i) s += basis[i] * wv[i];
    out[c] = s;
  }
  return e.graph->record(
      std::move(out), {e, coef},
      [ei = e.id, wi = coef.id, C, Q, cols, t = std::move(t), basis](Graph& g, std::size_t self) {
        const auto gy = g.grad_of(self);
        const auto w = g.value(wi).data();
        if (g.requires_grad(wi)) {
          auto gw = g.grad_of(wi);
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = c * Q * cols; i < (c + 1) * Q * cols; ++i)
              gw[i] += gy[c] * basis[i];
        }
        if (g.requires_grad(ei)) {
          auto ge = g.grad_of(ei);
          std::vector<double> d(cols);
          for (std::size_t c = 0; c < C; ++c) {
            for (std::size_t q = 0; q < Q; ++q) {
              const std::size_t row = c * Q + q;
              const double v = t[row];
              const double* b = basis.data().data() + row * cols;
              // T'_0 = 0, T'_1 = 1, T'_k = 2 T_{k-1} + 2x T'_{k-1} - T'_{k-2}
              d[0] = 0.0;
              d[1] = 1.0;
              double dsum = w[row * cols + 1];
              for (std::size_t k = 2; k < cols; ++k) {
                d[k] = 2.0 * b[k - 1] + 2.0 * v * d[k - 1] - d[k - 2];
                dsum += d[k] * w[row * cols + k];
              }
              ge[row] += gy[c] * dsum * (1.0 - v * v);
            }
          }
        }
      });
}

}  // namespace ag

}  // namespace ahdmil
