#include "ahdmil/lipn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ahdmil/error.hpp"
#include "ahdmil/rng.hpp"

namespace ahdmil {

using nlohmann::json;

void LipnConfig::validate() const {
  if (classes < 2) throw std::invalid_argument("LIPN needs at least two classes");
  if (mode == LowresMode::vector && dim_lo == 0) throw std::invalid_argument("vector mode needs D_lo > 0");
  if (!(gamma > 0.0 && gamma < 1.0)) throw std::invalid_argument("gamma must lie in (0,1)");
  if (!(r > 0.0 && r <= 1.0)) throw std::invalid_argument("r must lie in (0,1]");
  if (!(lambda >= 0.0 && lambda < 1.0)) throw std::invalid_argument("lambda must lie in [0,1)");
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("p must lie in [0,1]");
}

json LipnConfig::to_json() const {
  return json{{"mode", to_string(mode)}, {"dim_lo", dim_lo}, {"classes", classes},
              {"gamma", gamma},          {"r", r},           {"lambda", lambda},
              {"p", p},                  {"beta", beta},     {"dual_branch", dual_branch},
              {"cbema", cbema}};
}

LipnConfig LipnConfig::from_json(const json& j) {
  LipnConfig c;
  c.mode = lowres_mode_from_string(j.at("mode").get<std::string>());
  c.dim_lo = j.at("dim_lo").get<std::size_t>();
  c.classes = j.at("classes").get<std::size_t>();
  c.gamma = j.at("gamma").get<double>();
  c.r = j.at("r").get<double>();
  c.lambda = j.at("lambda").get<double>();
  c.p = j.at("p").get<double>();
  c.beta = j.at("beta").get<std::array<double, 2>>();
  c.dual_branch = j.at("dual_branch").get<bool>();
  c.cbema = j.at("cbema").get<bool>();
  c.validate();
  return c;
}

namespace {

void fill_uniform(Tensor& t, double a, Rng rng) {
  for (double& v : t.data()) v = rng.uniform(-a, a);
}

ConvBnLayer conv_bn(std::string name, std::size_t cin, std::size_t cout, std::size_t k,
                    std::size_t stride, bool depthwise, bool relu, Rng rng) {
  ConvBnLayer l;
  l.name = std::move(name);
  l.geo = {k, stride, k / 2};
  l.depthwise = depthwise;
  l.relu = relu;
  l.weight = Tensor({cout, depthwise ? 1 : cin, k, k});
  const std::size_t fan_in = (depthwise ? 1 : cin) * k * k;
  fill_uniform(l.weight, std::sqrt(6.0 / static_cast<double>(fan_in)), rng);
  l.gamma = Tensor({cout}, 1.0);
  l.beta = Tensor({cout}, 0.0);
  l.bn = ag::BatchNormState(cout);
  return l;
}

Tensor linear_weight(std::size_t in, std::size_t out, Rng rng) {
  Tensor w({in, out});
  fill_uniform(w, std::sqrt(6.0 / static_cast<double>(in + out)), rng);
  return w;
}

}  // namespace

LipnBranch LipnBranch::init(const LipnConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const Rng root(seed);
  LipnBranch b;
  b.mode = cfg.mode;
  b.classes = cfg.classes;
  std::uint64_t s = 0;
  if (cfg.mode == LowresMode::patch) {
    auto add = [&](std::string name, std::size_t cin, std::size_t cout, std::size_t k,
                   std::size_t stride, bool dw, bool relu) {
      b.convs.push_back(conv_bn(std::move(name), cin, cout, k, stride, dw, relu, root.split(s++)));
    };
    add("ConvBN-1", 3, 16, 3, 2, false, true);
    add("ConvBN-2", 16, 16, 3, 2, false, true);
    add("ConvBN-3", 16, 16, 1, 1, false, true);
    add("ConvBN-4", 16, 48, 3, 2, false, true);
    add("ConvBN-5", 48, 24, 1, 1, false, true);
    // UIB: start depthwise, expand by e, middle depthwise (strided), project.
    add("UIB-1.sdw", 24, 24, 5, 1, true, true);
    add("UIB-1.expand", 24, 48, 1, 1, false, true);
    add("UIB-1.mdw", 48, 48, 5, 2, true, true);
    add("UIB-1.proj", 48, 48, 1, 1, false, false);
    add("UIB-2.sdw", 48, 48, 3, 1, true, true);
    add("UIB-2.expand", 48, 96, 1, 1, false, true);
    add("UIB-2.mdw", 96, 96, 3, 2, true, true);
    add("UIB-2.proj", 96, 64, 1, 1, false, false);
    add("ConvBN-6", 64, 64, 1, 1, false, true);
    b.fc_w.push_back(linear_weight(64, cfg.classes, root.split(s++)));
    b.fc_b.emplace_back(Shape{cfg.classes}, 0.0);
  } else {
    const std::size_t widths[] = {cfg.dim_lo, 64, 64, cfg.classes};
    for (std::size_t i = 0; i < 3; ++i) {
      b.fc_w.push_back(linear_weight(widths[i], widths[i + 1], root.split(s++)));
      b.fc_b.emplace_back(Shape{widths[i + 1]}, 0.0);
    }
  }
  return b;
}

ParamList LipnBranch::params(const std::string& prefix) {
  ParamList out;
  for (auto& l : convs) {
    out.push_back({prefix + l.name + ".weight", &l.weight});
    out.push_back({prefix + l.name + ".gamma", &l.gamma});
    out.push_back({prefix + l.name + ".beta", &l.beta});
  }
  for (std::size_t i = 0; i < fc_w.size(); ++i) {
    const std::string name = mode == LowresMode::patch ? "Linear-1" : "fc" + std::to_string(i + 1);
    out.push_back({prefix + name + ".weight", &fc_w[i]});
    out.push_back({prefix + name + ".bias", &fc_b[i]});
  }
  return out;
}

ParamList LipnBranch::buffers(const std::string& prefix) {
  ParamList out;
  for (auto& l : convs) {
    out.push_back({prefix + l.name + ".running_mean", &l.bn.running_mean});
    out.push_back({prefix + l.name + ".running_var", &l.bn.running_var});
  }
  return out;
}

ag::Var branch_forward(ag::Graph& g, LipnBranch& b, ag::Var x, bool training, bool grads,
                       LayerTrace* trace) {
  auto use = [&](Tensor& t) { return grads ? g.leaf(t) : g.constant(t); };
  auto note = [&](const std::string& name, ag::Var v) {
    if (trace) trace->emplace_back(name, v.shape());
  };
  const Shape& xs = x.shape();
  if (b.mode == LowresMode::patch) {
    if (xs.size() != 4 || xs[1] != kPatchChannels || xs[2] != kPatchSide || xs[3] != kPatchSide) {
      throw ShapeError("LIPN patch branch expects N x 3 x 16 x 16 input, got " + shape_str(xs));
    }
    ag::Var h = x;
    for (auto& l : b.convs) {
      h = l.depthwise ? ag::depthwise_conv2d(h, use(l.weight), l.geo)
                      : ag::conv2d(h, use(l.weight), l.geo);
      h = ag::batchnorm2d(h, use(l.gamma), use(l.beta), l.bn, training);
      if (l.relu) h = ag::relu(h);
      // The layer table lists UIB blocks as single rows.
      if (l.name.find('.') == std::string::npos || l.name.ends_with(".proj")) {
        note(l.name.substr(0, l.name.find('.')), h);
      }
      if (l.name == "UIB-2.proj") {
        h = ag::global_avgpool(h);
        note("AvgPool", h);
      }
    }
    h = ag::reshape(h, {xs[0], h.shape()[1]});
    note("Flatten", h);
    h = ag::linear(h, use(b.fc_w[0]), use(b.fc_b[0]));
    note("Linear-1", h);
    return ag::sigmoid(h);
  }
  if (xs.size() != 2 || xs[1] != b.fc_w[0].dim(0)) {
    throw ShapeError("LIPN vector branch expects N x " + std::to_string(b.fc_w[0].dim(0)) +
                     " input, got " + shape_str(xs));
  }
  ag::Var h = x;
  for (std::size_t i = 0; i < b.fc_w.size(); ++i) {
    h = ag::linear(h, use(b.fc_w[i]), use(b.fc_b[i]));
    if (i + 1 < b.fc_w.size()) h = ag::relu(h);
    note("fc" + std::to_string(i + 1), h);
  }
  return ag::sigmoid(h);
}

LipnParams LipnParams::init(const LipnConfig& cfg, std::uint64_t seed) {
  const Rng root = Rng(seed).split(0x11b7);
  return LipnParams{cfg, LipnBranch::init(cfg, root.split(1).next_u64()),
                    LipnBranch::init(cfg, root.split(2).next_u64())};
}

ParamList LipnParams::params() {
  ParamList out = b1.params("lipn.b1.");
  for (auto& nt : b2.params("lipn.b2.")) out.push_back(nt);
  return out;
}

ParamList LipnParams::buffers() {
  ParamList out = b1.buffers("lipn.b1.");
  for (auto& nt : b2.buffers("lipn.b2.")) out.push_back(nt);
  return out;
}

void cbema_update(LipnParams& p) {
  const double l = p.cfg.lambda;
  if (!(l >= 0.0 && l < 1.0)) throw std::invalid_argument("cbema_update: lambda must lie in [0,1)");
  auto blend = [l](const ParamList& a, const ParamList& b) {
    for (std::size_t i = 0; i < a.size(); ++i) {
      auto x = a[i].tensor->data();
      auto y = b[i].tensor->data();
      for (std::size_t k = 0; k < x.size(); ++k) {
        const double t1 = x[k], t2 = y[k];
        x[k] = (1.0 - l) * t1 + l * t2;
        y[k] = (1.0 - l) * t2 + l * t1;
      }
    }
  };
  blend(p.b1.params(""), p.b2.params(""));
  blend(p.b1.buffers(""), p.b2.buffers(""));
}

namespace lipn {

Tensor soft_targets(const Tensor& a) {
  const std::size_t n = a.dim(0), c = a.dim(1);
  Tensor out(a.shape());
  for (std::size_t k = 0; k < c; ++k) {
    double lo = a.at(0, k), hi = a.at(0, k);
    for (std::size_t j = 1; j < n; ++j) {
      lo = std::min(lo, a.at(j, k));
      hi = std::max(hi, a.at(j, k));
    }
    for (std::size_t j = 0; j < n; ++j) {
      out.at(j, k) = hi > lo ? (a.at(j, k) - lo) / (hi - lo) : 0.5;
    }
  }
  return out;
}

namespace {

ag::Var l1(ag::Var x, ag::Var target) { return ag::mean(ag::abs(x - target)); }

// |m - t| for binary m and t, written as m + t - 2mt. The value is the same;
// the slope 1 - 2t is that of |p - t| for p inside (0, 1), so agreeing
// entries keep a gradient instead of sitting on the kink of abs at zero.
ag::Var binary_l1(ag::Var m, const Tensor& t) {
  Tensor slope(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) slope[i] = 1.0 - 2.0 * t[i];
  ag::Graph& g = *m.graph;
  return ag::add_scalar(ag::mean(m * g.constant(std::move(slope))), ag::mean(g.constant(t)).item());
}

}  // namespace

ag::Var crd_loss_hard(ag::Var p1, ag::Var p2, const Tensor& m_hr, double gamma, ag::DrawTape* tape) {
  ag::Var m1 = ag::straight_through(p1, gamma, tape);
  ag::Var m2 = ag::straight_through(p2, gamma, tape);
  return 0.5 * (binary_l1(m1, m_hr) + binary_l1(m2, m_hr));
}

ag::Var crd_loss_soft(ag::Var p1, ag::Var p2, const Tensor& a_bar) {
  ag::Var t = p1.graph->constant(a_bar);
  return 0.5 * (l1(p1, t) + l1(p2, t));
}

LossParts lipn_loss(ag::Var p1, ag::Var p2, const Tensor& a_bar, const Tensor& m_hr, bool soft,
                    const LipnConfig& cfg, ag::DrawTape* tape) {
  LossParts o;
  ag::Var m1 = ag::straight_through(p1, cfg.gamma, tape);
  ag::Var m2 = ag::straight_through(p2, cfg.gamma, tape);
  if (soft) {
    o.dis = crd_loss_soft(p1, p2, a_bar);
  } else {
    o.dis = 0.5 * (binary_l1(m1, m_hr) + binary_l1(m2, m_hr));
  }
  o.r1 = ag::union_rate(m1);
  o.r2 = ag::union_rate(m2);
  o.rate = 0.5 * (ag::square(ag::add_scalar(o.r1, -cfg.r)) + ag::square(ag::add_scalar(o.r2, -cfg.r)));
  o.loss = cfg.beta[0] * o.dis + cfg.beta[1] * o.rate;
  return o;
}

Selection merged_mask(const Tensor& p1, const Tensor& p2, double gamma) {
  if (p1.shape() != p2.shape() || p1.rank() != 2) {
    throw ShapeError("merged_mask: branch outputs " + shape_str(p1.shape()) + " and " +
                     shape_str(p2.shape()) + " disagree");
  }
  const std::size_t n = p1.dim(0), c = p1.dim(1);
  Selection s;
  s.mask = Tensor(p1.shape(), 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    bool any = false;
    for (std::size_t k = 0; k < c; ++k) {
      const bool on = 0.5 * (p1.at(j, k) + p2.at(j, k)) > gamma;
      s.mask.at(j, k) = on ? 1.0 : 0.0;
      any = any || on;
    }
    if (any) s.kept.push_back(j);
  }
  s.retention = static_cast<double>(s.kept.size()) / static_cast<double>(n);
  return s;
}

Selection select_instances(const Tensor& p1, const Tensor& p2, double gamma, double r) {
  Selection s = merged_mask(p1, p2, gamma);
  if (!s.kept.empty()) return s;
  const std::size_t n = p1.dim(0), c = p1.dim(1);
  std::vector<double> score(n, -1.0);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t k = 0; k < c; ++k) score[j] = std::max(score[j], 0.5 * (p1.at(j, k) + p2.at(j, k)));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
  const auto keep = std::min<std::size_t>(
      n, std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(r * static_cast<double>(n)))));
  s.kept.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep));
  std::sort(s.kept.begin(), s.kept.end());
  s.retention = static_cast<double>(keep) / static_cast<double>(n);
  s.fallback = true;
  return s;
}

}  // namespace lipn

}  // namespace ahdmil
