#include <Eigen/Core>
#include <cmath>
#include <memory>

#include "ahdmil/autograd.hpp"
#include "ahdmil/error.hpp"

namespace ahdmil::ag {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

struct Dims4 {
  std::size_t b, c, h, w;
};

Dims4 dims4(const char* op, Var x) {
  const auto& s = x.shape();
  if (s.size() != 4) {
    throw ShapeError(std::string(op) + ": expected B x C x H x W input, got " + shape_str(s));
  }
  return {s[0], s[1], s[2], s[3]};
}

}  // namespace

std::size_t conv_out_size(std::size_t in, const ConvGeometry& g) {
  if (g.stride == 0 || g.kernel == 0) throw ShapeError("conv: kernel and stride must be positive");
  if (in + 2 * g.padding < g.kernel) {
    throw ShapeError("conv: non-positive output size (input " + std::to_string(in) + ", kernel " +
                     std::to_string(g.kernel) + ", padding " + std::to_string(g.padding) + ")");
  }
  return (in + 2 * g.padding - g.kernel) / g.stride + 1;
}

Var conv2d(Var x, Var weight, const ConvGeometry& geo) {
  const Dims4 d = dims4("conv2d", x);
  const auto& ws = weight.shape();
  const std::size_t k = geo.kernel;
  if (ws.size() != 4 || ws[1] != d.c || ws[2] != k || ws[3] != k) {
    throw ShapeError("conv2d: weight " + shape_str(ws) + " incompatible with input " +
                     shape_str(x.shape()) + " and kernel " + std::to_string(k));
  }
  const std::size_t cout = ws[0];
  const std::size_t ho = conv_out_size(d.h, geo), wo = conv_out_size(d.w, geo);
  const std::size_t plane = ho * wo;
  const std::size_t kc = d.c * k * k;
  const std::size_t p = d.b * plane;

  // im2col over the whole batch: rows index (ci, ky, kx), columns (b, oy, ox).
  auto cols = std::make_shared<std::vector<double>>(kc * p, 0.0);
  const auto xv = x.value().data();
  for (std::size_t ci = 0; ci < d.c; ++ci)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        double* row = cols->data() + ((ci * k + ky) * k + kx) * p;
        for (std::size_t b = 0; b < d.b; ++b)
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const long iy = static_cast<long>(oy * geo.stride + ky) - static_cast<long>(geo.padding);
            if (iy < 0 || iy >= static_cast<long>(d.h)) continue;
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const long ix =
                  static_cast<long>(ox * geo.stride + kx) - static_cast<long>(geo.padding);
              if (ix < 0 || ix >= static_cast<long>(d.w)) continue;
              row[b * plane + oy * wo + ox] =
                  xv[((b * d.c + ci) * d.h + static_cast<std::size_t>(iy)) * d.w +
                     static_cast<std::size_t>(ix)];
            }
          }
      }

  RowMat outmat = ConstMap(weight.value().data().data(), cout, kc) * ConstMap(cols->data(), kc, p);
  Tensor out({d.b, cout, ho, wo});
  for (std::size_t b = 0; b < d.b; ++b)
    for (std::size_t co = 0; co < cout; ++co)
      for (std::size_t o = 0; o < plane; ++o) out[(b * cout + co) * plane + o] = outmat(co, b * plane + o);

  return x.graph->record(
      std::move(out), {x, weight},
      [xi = x.id, wi = weight.id, d, geo, cout, ho, wo, plane, kc, p, cols](Graph& g, std::size_t self) {
        const auto gy = g.grad_of(self);
        RowMat gmat(cout, p);
        for (std::size_t b = 0; b < d.b; ++b)
          for (std::size_t co = 0; co < cout; ++co)
            for (std::size_t o = 0; o < plane; ++o) gmat(co, b * plane + o) = gy[(b * cout + co) * plane + o];
        if (g.requires_grad(wi)) {
          MutMap(g.grad_of(wi).data(), cout, kc).noalias() += gmat * ConstMap(cols->data(), kc, p).transpose();
        }
        if (!g.requires_grad(xi)) return;
        RowMat dcols = ConstMap(g.value(wi).data().data(), cout, kc).transpose() * gmat;
        auto gx = g.grad_of(xi);
        const std::size_t k = geo.kernel;
        for (std::size_t ci = 0; ci < d.c; ++ci)
          for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
              const std::size_t r = (ci * k + ky) * k + kx;
              for (std::size_t b = 0; b < d.b; ++b)
                for (std::size_t oy = 0; oy < ho; ++oy) {
                  const long iy =
                      static_cast<long>(oy * geo.stride + ky) - static_cast<long>(geo.padding);
                  if (iy < 0 || iy >= static_cast<long>(d.h)) continue;
                  for (std::size_t ox = 0; ox < wo; ++ox) {
                    const long ix =
                        static_cast<long>(ox * geo.stride + kx) - static_cast<long>(geo.padding);
                    if (ix < 0 || ix >= static_cast<long>(d.w)) continue;
                    gx[((b * d.c + ci) * d.h + static_cast<std::size_t>(iy)) * d.w +
                       static_cast<std::size_t>(ix)] += dcols(r, b * plane + oy * wo + ox);
                  }
                }
            }
      });
}

Var depthwise_conv2d(Var x, Var weight, const ConvGeometry& geo) {
  const Dims4 d = dims4("depthwise_conv2d", x);
  const auto& ws = weight.shape();
  const std::size_t k = geo.kernel;
  if (ws.size() != 4 || ws[0] != d.c || ws[1] != 1 || ws[2] != k || ws[3] != k) {
    throw ShapeError("depthwise_conv2d: weight " + shape_str(ws) + " incompatible with input " +
                     shape_str(x.shape()));
  }
  const std::size_t ho = conv_out_size(d.h, geo), wo = conv_out_size(d.w, geo);

  // Visits every (output, input, weight) triple that contributes.
  auto visit = [d, geo, ho, wo](auto&& fn) {
    const std::size_t k = geo.kernel;
    for (std::size_t b = 0; b < d.b; ++b)
      for (std::size_t c = 0; c < d.c; ++c)
        for (std::size_t oy = 0; oy < ho; ++oy)
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const std::size_t oi = ((b * d.c + c) * ho + oy) * wo + ox;
            for (std::size_t ky = 0; ky < k; ++ky) {
              const long iy = static_cast<long>(oy * geo.stride + ky) - static_cast<long>(geo.padding);
              if (iy < 0 || iy >= static_cast<long>(d.h)) continue;
              for (std::size_t kx = 0; kx < k; ++kx) {
                const long ix =
                    static_cast<long>(ox * geo.stride + kx) - static_cast<long>(geo.padding);
                if (ix < 0 || ix >= static_cast<long>(d.w)) continue;
                const std::size_t ii = ((b * d.c + c) * d.h + static_cast<std::size_t>(iy)) * d.w +
                                       static_cast<std::size_t>(ix);
                fn(oi, ii, (c * k + ky) * k + kx);
              }
            }
          }
  };

  Tensor out({d.b, d.c, ho, wo}, 0.0);
  const auto xv = x.value().data();
  const auto wv = weight.value().data();
  visit([&](std::size_t oi, std::size_t ii, std::size_t wi) { out[oi] += wv[wi] * xv[ii]; });

  return x.graph->record(std::move(out), {x, weight},
                         [xi = x.id, wi = weight.id, visit](Graph& g, std::size_t self) {
                           const auto gy = g.grad_of(self);
                           const bool need_x = g.requires_grad(xi);
                           const bool need_w = g.requires_grad(wi);
                           const auto xv = g.value(xi).data();
                           const auto wv = g.value(wi).data();
                           std::span<double> gx = need_x ? g.grad_of(xi) : std::span<double>{};
                           std::span<double> gw = need_w ? g.grad_of(wi) : std::span<double>{};
                           visit([&](std::size_t oi, std::size_t ii, std::size_t w) {
                             if (need_x) gx[ii] += gy[oi] * wv[w];
                             if (need_w) gw[w] += gy[oi] * xv[ii];
                           });
                         });
}

Var batchnorm2d(Var x, Var gamma, Var beta, BatchNormState& state, bool training) {
  const Dims4 d = dims4("batchnorm2d", x);
  if (gamma.value().size() != d.c || beta.value().size() != d.c ||
      state.running_mean.size() != d.c || state.running_var.size() != d.c) {
    throw ShapeError("batchnorm2d: channel count mismatch for input " + shape_str(x.shape()));
  }
  const std::size_t plane = d.h * d.w;
  const std::size_t n = d.b * plane;
  const auto xv = x.value().data();
  const auto gv = gamma.value().data();
  const auto bv = beta.value().data();

  auto invstd = std::make_shared<std::vector<double>>(d.c);
  auto xhat = std::make_shared<std::vector<double>>(xv.size());
  Tensor out(x.shape());
  for (std::size_t c = 0; c < d.c; ++c) {
    double mu, var;
    if (training) {
      double s = 0.0;
      for (std::size_t b = 0; b < d.b; ++b)
        for (std::size_t i = 0; i < plane; ++i) s += xv[(b * d.c + c) * plane + i];
      mu = s / static_cast<double>(n);
      double ss = 0.0;
      for (std::size_t b = 0; b < d.b; ++b)
        for (std::size_t i = 0; i < plane; ++i) {
          const double t = xv[(b * d.c + c) * plane + i] - mu;
          ss += t * t;
        }
      var = ss / static_cast<double>(n);
      const double unbiased = n > 1 ? ss / static_cast<double>(n - 1) : var;
      state.running_mean[c] = (1.0 - state.momentum) * state.running_mean[c] + state.momentum * mu;
      state.running_var[c] = (1.0 - state.momentum) * state.running_var[c] + state.momentum * unbiased;
    } else {
      mu = state.running_mean[c];
      var = state.running_var[c];
    }
    (*invstd)[c] = 1.0 / std::sqrt(var + state.eps);
    for (std::size_t b = 0; b < d.b; ++b)
      for (std::size_t i = 0; i < plane; ++i) {
        const std::size_t idx = (b * d.c + c) * plane + i;
        (*xhat)[idx] = (xv[idx] - mu) * (*invstd)[c];
        out[idx] = gv[c] * (*xhat)[idx] + bv[c];
      }
  }

  return x.graph->record(
      std::move(out), {x, gamma, beta},
      [xi = x.id, gi = gamma.id, bi = beta.id, d, plane, n, invstd, xhat, training](Graph& g,
                                                                                  std::size_t self) {
        const auto gy = g.grad_of(self);
        const auto gv = g.value(gi).data();
        const bool need_x = g.requires_grad(xi);
        std::span<double> gx = need_x ? g.grad_of(xi) : std::span<double>{};
        std::span<double> gg = g.requires_grad(gi) ? g.grad_of(gi) : std::span<double>{};
        std::span<double> gb = g.requires_grad(bi) ? g.grad_of(bi) : std::span<double>{};
        for (std::size_t c = 0; c < d.c; ++c) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::size_t b = 0; b < d.b; ++b)
            for (std::size_t i = 0; i < plane; ++i) {
              const std::size_t idx = (b * d.c + c) * plane + i;
              sum_g += gy[idx];
              sum_gx += gy[idx] * (*xhat)[idx];
            }
          if (!gg.empty()) gg[c] += sum_gx;
          if (!gb.empty()) gb[c] += sum_g;
          if (!need_x) continue;
          const double scale = gv[c] * (*invstd)[c];
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t b = 0; b < d.b; ++b)
            for (std::size_t i = 0; i < plane; ++i) {
              const std::size_t idx = (b * d.c + c) * plane + i;
              if (training) {
                gx[idx] += scale * (gy[idx] - inv_n * sum_g - (*xhat)[idx] * inv_n * sum_gx);
              } else {
                gx[idx] += scale * gy[idx];
              }
            }
        }
      });
}

Var global_avgpool(Var x) {
  const Dims4 d = dims4("global_avgpool", x);
  const std::size_t plane = d.h * d.w;
  Tensor out({d.b, d.c, 1, 1});
  const auto xv = x.value().data();
  for (std::size_t bc = 0; bc < d.b * d.c; ++bc) {
    double s = 0.0;
    for (std::size_t i = 0; i < plane; ++i) s += xv[bc * plane + i];
    out[bc] = s / static_cast<double>(plane);
  }
  return x.graph->record(std::move(out), {x}, [xi = x.id, plane](Graph& g, std::size_t self) {
    const auto gy = g.grad_of(self);
    auto gx = g.grad_of(xi);
    const double inv = 1.0 / static_cast<double>(plane);
    for (std::size_t bc = 0; bc < gy.size(); ++bc)
      for (std::size_t i = 0; i < plane; ++i) gx[bc * plane + i] += gy[bc] * inv;
  });
}

}  // namespace ahdmil::ag
