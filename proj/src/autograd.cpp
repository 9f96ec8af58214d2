#include "ahdmil/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "ahdmil/error.hpp"

namespace ahdmil::ag {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

Graph& same_graph(Var a, Var b) {
  if (a.graph == nullptr || a.graph != b.graph) {
    throw std::invalid_argument("operands belong to different graphs");
  }
  return *a.graph;
}

void require_same_shape(const char* op, Var a, Var b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

void require_matrix(const char* op, Var a) {
  if (a.value().rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
  }
}

// Rows/columns view used by the row-wise normalisers.
std::pair<std::size_t, std::size_t> rows_cols(const Tensor& t) {
  const std::size_t cols = t.shape().back();
  return {t.size() / cols, cols};
}

template <typename Fwd, typename Deriv>
Var unary(Var x, Fwd f, Deriv dydx) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return x.graph->record(std::move(out), {x}, [xi = x.id, dydx](Graph& g, std::size_t self) {
    const auto gy = g.grad_of(self);
    const Tensor& xv = g.value(xi);
    const Tensor& yv = g.value(self);
    auto gx = g.grad_of(xi);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * dydx(xv[i], yv[i]);
  });
}

}  // namespace

const Tensor& Var::value() const { return graph->value(id); }

// ---- Graph ----------------------------------------------------------------

Var Graph::leaf(Tensor& param) {
  Node n;
  n.value = param;
  n.param = &param;
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Graph::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Graph::record(Tensor value, std::initializer_list<Var> parents, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  for (const Var& p : parents) {
    if (p.graph != this) throw std::invalid_argument("operand belongs to a different graph");
    n.requires_grad = n.requires_grad || nodes_[p.id].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

std::span<double> Graph::grad_of(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

void Graph::backward(Var output) {
  if (output.graph != this) throw std::invalid_argument("output belongs to a different graph");
  if (output.value().size() != 1) {
    throw ShapeError("backward() needs a scalar output, got " + shape_str(output.shape()));
  }
  grad_of(output.id)[0] += 1.0;
  for (std::size_t i = output.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this, i);
    if (n.param != nullptr) {
      auto dst = n.param->grad();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += n.grad[k];
    }
  }
}

// ---- DrawTape -------------------------------------------------------------

Tensor DrawTape::noise(const Shape& shape, const std::function<double()>& draw) {
  if (mode_ == Mode::replay) {
    if (noise_cursor_ >= noise_.size()) throw std::logic_error("DrawTape: noise replay overrun");
    return noise_[noise_cursor_++];
  }
  Tensor t(shape);
  for (auto& v : t.data()) v = draw();
  noise_.push_back(t);
  return t;
}

const std::vector<double>& DrawTape::offset(const std::vector<double>& offset) {
  if (mode_ == Mode::replay) {
    if (offset_cursor_ >= offsets_.size()) throw std::logic_error("DrawTape: offset replay overrun");
    return offsets_[offset_cursor_++];
  }
  offsets_.push_back(offset);
  return offsets_.back();
}

// ---- linear algebra -------------------------------------------------------

Var matmul(Var a, Var b) {
  Graph& g = same_graph(a, b);
  require_matrix("matmul", a);
  require_matrix("matmul", b);
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw ShapeError("matmul: inner dimensions disagree " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  Tensor out({m, n});
  MutMap(out.data().data(), m, n).noalias() =
      ConstMap(a.value().data().data(), m, k) * ConstMap(b.value().data().data(), k, n);
  return g.record(std::move(out), {a, b}, [ai = a.id, bi = b.id, m, k, n](Graph& g, std::size_t self) {
    ConstMap gy(g.grad_of(self).data(), m, n);
    if (g.requires_grad(ai)) {
      MutMap(g.grad_of(ai).data(), m, k).noalias() +=
          gy * ConstMap(g.value(bi).data().data(), k, n).transpose();
    }
    if (g.requires_grad(bi)) {
      MutMap(g.grad_of(bi).data(), k, n).noalias() +=
          ConstMap(g.value(ai).data().data(), m, k).transpose() * gy;
    }
  });
}

Var transpose(Var a) {
  require_matrix("transpose", a);
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  Tensor out({n, m});
  MutMap(out.data().data(), n, m) = ConstMap(a.value().data().data(), m, n).transpose();
  return a.graph->record(std::move(out), {a}, [ai = a.id, m, n](Graph& g, std::size_t self) {
    MutMap(g.grad_of(ai).data(), m, n) += ConstMap(g.grad_of(self).data(), n, m).transpose();
  });
}

Var add_row(Var x, Var bias) {
  Graph& g = same_graph(x, bias);
  require_matrix("add_row", x);
  const std::size_t n = x.shape()[0], m = x.shape()[1];
  if (bias.value().size() != m) {
    throw ShapeError("add_row: bias " + shape_str(bias.shape()) + " vs rows of " +
                     shape_str(x.shape()));
  }
  Tensor out = x.value();
  const auto b = bias.value().data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] += b[j];
  return g.record(std::move(out), {x, bias}, [xi = x.id, bi = bias.id, n, m](Graph& g, std::size_t self) {
    const auto gy = g.grad_of(self);
    if (g.requires_grad(xi)) {
      auto gx = g.grad_of(xi);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i];
    }
    if (g.requires_grad(bi)) {
      auto gb = g.grad_of(bi);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) gb[j] += gy[i * m + j];
    }
  });
}

Var linear(Var x, Var weight, Var bias) { return add_row(matmul(x, weight), bias); }

// ---- elementwise ----------------------------------------------------------

namespace {

template <typename Fwd>
Var binary(const char* name, Var a, Var b, Fwd f, double sign_b, bool product) {
  Graph& g = same_graph(a, b);
  require_same_shape(name, a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i], bv[i]);
  return g.record(std::move(out), {a, b},
                  [ai = a.id, bi = b.id, sign_b, product](Graph& g, std::size_t self) {
                    const auto gy = g.grad_of(self);
                    if (g.requires_grad(ai)) {
                      auto ga = g.grad_of(ai);
                      const auto bv = g.value(bi).data();
                      for (std::size_t i = 0; i < ga.size(); ++i)
                        ga[i] += product ? gy[i] * bv[i] : gy[i];
                    }
                    if (g.requires_grad(bi)) {
                      auto gb = g.grad_of(bi);
                      const auto av = g.value(ai).data();
                      for (std::size_t i = 0; i < gb.size(); ++i)
                        gb[i] += product ? gy[i] * av[i] : sign_b * gy[i];
                    }
                  });
}

}  // namespace

Var add(Var a, Var b) {
  return binary("add", a, b, [](double x, double y) { return x + y; }, 1.0, false);
}
Var sub(Var a, Var b) {
  return binary("sub", a, b, [](double x, double y) { return x - y; }, -1.0, false);
}
Var mul(Var a, Var b) {
  return binary("mul", a, b, [](double x, double y) { return x * y; }, 1.0, true);
}

Var scale(Var x, double s) {
  return unary(x, [s](double v) { return s * v; }, [s](double, double) { return s; });
}

Var add_scalar(Var x, double c) {
  return unary(x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

Var tanh(Var x) {
  return unary(x, [](double v) { return std::tanh(v); },
               [](double, double y) { return 1.0 - y * y; });
}

double stable_sigmoid(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

Var sigmoid(Var x) {
  return unary(x, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Var exp(Var x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var log(Var x) {
  return unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Var relu(Var x) {
  return unary(x, [](double v) { return v > 0.0 ? v : 0.0; },
               [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var abs(Var x) {
  return unary(x, [](double v) { return std::abs(v); },
               [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Var square(Var x) {
  return unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

// ---- reductions and shape -------------------------------------------------

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return x.graph->record(Tensor::scalar(s), {x}, [xi = x.id](Graph& g, std::size_t self) {
    const double gy = g.grad_of(self)[0];
    for (auto& v : g.grad_of(xi)) v += gy;
  });
}

Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

Var pick(Var x, std::size_t index) {
  if (index >= x.value().size()) throw ShapeError("pick: index out of range");
  return x.graph->record(Tensor::scalar(x.value()[index]), {x},
                         [xi = x.id, index](Graph& g, std::size_t self) {
                           g.grad_of(xi)[index] += g.grad_of(self)[0];
                         });
}

Var gather_rows(Var x, std::span<const std::size_t> rows) {
  require_matrix("gather_rows", x);
  const std::size_t n = x.shape()[0], m = x.shape()[1];
  if (rows.empty()) throw ShapeError("gather_rows: empty row selection");
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  Tensor out({idx.size(), m});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= n) throw ShapeError("gather_rows: row index out of range");
    std::copy_n(x.value().data().begin() + static_cast<std::ptrdiff_t>(idx[r] * m), m,
                out.data().begin() + static_cast<std::ptrdiff_t>(r * m));
  }
  return x.graph->record(std::move(out), {x}, [xi = x.id, idx, m](Graph& g, std::size_t self) {
    const auto gy = g.grad_of(self);
    auto gx = g.grad_of(xi);
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t j = 0; j < m; ++j) gx[idx[r] * m + j] += gy[r * m + j];
  });
}

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return x.graph->record(std::move(out), {x}, [xi = x.id](Graph& g, std::size_t self) {
    const auto gy = g.grad_of(self);
    auto gx = g.grad_of(xi);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i];
  });
}

Var detach(Var x) { return x.graph->constant(x.value()); }

// ---- normalisation --------------------------------------------------------

namespace {

void reject_nan(const char* op, const Tensor& t) {
  for (double v : t.data()) {
    if (std::isnan(v)) throw DomainError(std::string(op) + ": NaN input");
  }
}

}  // namespace

Var softmax_rows(Var x) {
  const Tensor& xv = x.value();
  reject_nan("softmax", xv);
  const auto [rows, cols] = rows_cols(xv);
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data().data() + r * cols;
    double* o = out.data().data() + r * cols;
    const double m = *std::max_element(in, in + cols);
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) s += (o[j] = std::exp(in[j] - m));
    for (std::size_t j = 0; j < cols; ++j) o[j] /= s;
  }
  return x.graph->record(std::move(out), {x}, [xi = x.id, rows, cols](Graph& g, std::size_t self) {
    const auto gy = g.grad_of(self);
    const auto y = g.value(self).data();
    auto gx = g.grad_of(xi);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < cols; ++j) dot += gy[r * cols + j] * y[r * cols + j];
      for (std::size_t j = 0; j < cols; ++j)
        gx[r * cols + j] += y[r * cols + j] * (gy[r * cols + j] - dot);
    }
  });
}

Var log_softmax_rows(Var x) {
  const Tensor& xv = x.value();
  reject_nan("log_softmax", xv);
  const auto [rows, cols] = rows_cols(xv);
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data().data() + r * cols;
    double* o = out.data().data() + r * cols;
    const double m = *std::max_element(in, in + cols);
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) s += std::exp(in[j] - m);
    const double lse = m + std::log(s);
    for (std::size_t j = 0; j < cols; ++j) o[j] = in[j] - lse;
  }
  return x.graph->record(std::move(out), {x}, [xi = x.id, rows, cols](Graph& g, std::size_t self) {
    const auto gy = g.grad_of(self);
    const auto y = g.value(self).data();
    auto gx = g.grad_of(xi);
    for (std::size_t r = 0; r < rows; ++r) {
      double total = 0.0;
      for (std::size_t j = 0; j < cols; ++j) total += gy[r * cols + j];
      for (std::size_t j = 0; j < cols; ++j)
        gx[r * cols + j] += gy[r * cols + j] - std::exp(y[r * cols + j]) * total;
    }
  });
}

Var masked_softmax_rows(Var x, Var mask, double eps, std::vector<bool>* degenerate) {
  Graph& g = same_graph(x, mask);
  require_same_shape("masked_softmax", x, mask);
  const Tensor& xv = x.value();
  const Tensor& mv = mask.value();
  reject_nan("masked_softmax", xv);
  const auto [rows, cols] = rows_cols(xv);
  Tensor out(xv.shape(), 0.0);
  // e holds exp(x - max_selected) for every entry; S the per-row denominator.
  auto e = std::make_shared<std::vector<double>>(xv.size(), 0.0);
  auto denom = std::make_shared<std::vector<double>>(rows, 0.0);
  if (degenerate) degenerate->assign(rows, false);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t o = r * cols;
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < cols; ++j)
      if (mv[o + j] > 0.5) m = std::max(m, xv[o + j]);
    if (!std::isfinite(m)) {
      if (degenerate) (*degenerate)[r] = true;
      continue;
    }
    double s = eps;
    for (std::size_t j = 0; j < cols; ++j) {
      (*e)[o + j] = std::exp(std::min(xv[o + j] - m, 700.0));
      s += (*e)[o + j] * mv[o + j];
    }
    (*denom)[r] = s;
    for (std::size_t j = 0; j < cols; ++j) out[o + j] = (*e)[o + j] * mv[o + j] / s;
  }
  return g.record(std::move(out), {x, mask},
                  [xi = x.id, mi = mask.id, rows, cols, e, denom](Graph& g, std::size_t self) {
                    const auto gy = g.grad_of(self);
                    const auto w = g.value(self).data();
                    const auto mv = g.value(mi).data();
                    const bool need_x = g.requires_grad(xi);
                    const bool need_m = g.requires_grad(mi);
                    std::span<double> gx = need_x ? g.grad_of(xi) : std::span<double>{};
                    std::span<double> gm = need_m ? g.grad_of(mi) : std::span<double>{};
                    for (std::size_t r = 0; r < rows; ++r) {
                      const double s = (*denom)[r];
                      if (s == 0.0) continue;  // degenerate row: constant zero output
                      const std::size_t o = r * cols;
                      double dot = 0.0;
                      for (std::size_t j = 0; j < cols; ++j) dot += gy[o + j] * w[o + j];
                      for (std::size_t j = 0; j < cols; ++j) {
                        const double gu = (gy[o + j] - dot) / s;
                        if (need_x) gx[o + j] += gu * (*e)[o + j] * mv[o + j];
                        if (need_m) gm[o + j] += gu * (*e)[o + j];
                      }
                    }
                  });
}

// ---- selection ------------------------------------------------------------

Var straight_through(Var x, double gamma, DrawTape* tape) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  std::vector<double> offset(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    out[i] = xv[i] > gamma ? 1.0 : 0.0;
    offset[i] = out[i] - xv[i];
  }
  if (tape != nullptr) {
    const bool replay = tape->mode() == DrawTape::Mode::replay;
    const auto& frozen = tape->offset(offset);
    if (replay) {
      if (frozen.size() != xv.size()) throw std::logic_error("DrawTape: offset shape mismatch");
      for (std::size_t i = 0; i < xv.size(); ++i) out[i] = frozen[i] + xv[i];
    }
  }
  return x.graph->record(std::move(out), {x}, [xi = x.id](Graph& g, std::size_t self) {
    const auto gy = g.grad_of(self);
    auto gx = g.grad_of(xi);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i];
  });
}

Var union_rate(Var mask) {
  require_matrix("union_rate", mask);
  const std::size_t n = mask.shape()[0], c = mask.shape()[1];
  const auto m = mask.value().data();
  double total = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    double none = 1.0;
    for (std::size_t k = 0; k < c; ++k) none *= 1.0 - m[j * c + k];
    total += 1.0 - none;
  }
  return mask.graph->record(
      Tensor::scalar(total / static_cast<double>(n)), {mask},
      [mi = mask.id, n, c](Graph& g, std::size_t self) {
        const double gy = g.grad_of(self)[0] / static_cast<double>(n);
        const auto m = g.value(mi).data();
        auto gm = g.grad_of(mi);
        for (std::size_t j = 0; j < n; ++j) {
          for (std::size_t k = 0; k < c; ++k) {
            double others = 1.0;
            for (std::size_t l = 0; l < c; ++l)
              if (l != k) others *= 1.0 - m[j * c + l];
            gm[j * c + k] += gy * others;
          }
        }
      });
}

}  // namespace ahdmil::ag
