#include "ahdmil/dmin.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "ahdmil/cka.hpp"
#include "ahdmil/error.hpp"

namespace ahdmil {

using nlohmann::json;

void DminConfig::validate() const {
  if (dim_in == 0 || q == 0 || h == 0) throw std::invalid_argument("DMIN widths must be positive");
  if (classes < 2) throw std::invalid_argument("DMIN needs at least two classes");
  if (k < 1) throw std::invalid_argument("Chebyshev degree K must be at least 1");
  if (!(tau > 0.0)) throw std::invalid_argument("tau must be positive");
  if (!(gamma > 0.0 && gamma < 1.0)) throw std::invalid_argument("gamma must lie in (0,1)");
  if (!(r > 0.0 && r <= 1.0)) throw std::invalid_argument("r must lie in (0,1]");
}

json DminConfig::to_json() const {
  return json{{"dim_in", dim_in}, {"q", q},         {"h", h},         {"classes", classes},
              {"k", k},           {"tau", tau},     {"gamma", gamma}, {"r", r},
              {"alpha", alpha},   {"k_clu", k_clu}};
}

DminConfig DminConfig::from_json(const json& j) {
  DminConfig c;
  c.dim_in = j.at("dim_in").get<std::size_t>();
  c.q = j.at("q").get<std::size_t>();
  c.h = j.at("h").get<std::size_t>();
  c.classes = j.at("classes").get<std::size_t>();
  c.k = j.at("k").get<std::size_t>();
  c.tau = j.at("tau").get<double>();
  c.gamma = j.at("gamma").get<double>();
  c.r = j.at("r").get<double>();
  c.alpha = j.at("alpha").get<std::array<double, 5>>();
  c.k_clu = j.at("k_clu").get<std::size_t>();
  c.validate();
  return c;
}

namespace {

Tensor xavier(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng rng) {
  Tensor t(std::move(shape));
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (double& v : t.data()) v = rng.uniform(-a, a);
  return t;
}

}  // namespace

DminParams DminParams::init(const DminConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const Rng root = Rng(seed).split(0xd111);
  DminParams p;
  p.cfg = cfg;
  p.proj_w = xavier({cfg.dim_in, cfg.q}, cfg.dim_in, cfg.q, root.split(0));
  p.proj_b = Tensor({cfg.q}, 0.0);
  p.att_u = xavier({cfg.q, cfg.h}, cfg.q, cfg.h, root.split(1));
  p.att_v = xavier({cfg.q, cfg.h}, cfg.q, cfg.h, root.split(2));
  p.att_w = xavier({cfg.h, cfg.classes}, cfg.h, cfg.classes, root.split(3));
  p.cka = init_xavier(cfg.q, cfg.k, cfg.classes, root.split(4).next_u64()).coef;
  for (std::size_t c = 0; c < cfg.classes; ++c) {
    p.clu_w.push_back(xavier({cfg.q, 2}, cfg.q, 2, root.split(100 + c)));
    p.clu_b.emplace_back(Shape{2}, 0.0);
  }
  return p;
}

ParamList DminParams::params() {
  ParamList out{{"dmin.proj_w", &proj_w}, {"dmin.proj_b", &proj_b}, {"dmin.att_u", &att_u},
                {"dmin.att_v", &att_v},   {"dmin.att_w", &att_w},   {"dmin.cka", &cka}};
  for (std::size_t c = 0; c < clu_w.size(); ++c) {
    out.push_back({"dmin.clu_w." + std::to_string(c), &clu_w[c]});
    out.push_back({"dmin.clu_b." + std::to_string(c), &clu_b[c]});
  }
  return out;
}

DminVars bind(ag::Graph& g, DminParams& p) {
  DminVars v{g.leaf(p.proj_w), g.leaf(p.proj_b), g.leaf(p.att_u), g.leaf(p.att_v),
             g.leaf(p.att_w),  g.leaf(p.cka),    {},              {}};
  for (std::size_t c = 0; c < p.clu_w.size(); ++c) {
    v.clu_w.push_back(g.leaf(p.clu_w[c]));
    v.clu_b.push_back(g.leaf(p.clu_b[c]));
  }
  return v;
}

namespace dmin {

ag::Var project(const DminVars& v, ag::Var f_raw) {
  return ag::relu(ag::linear(f_raw, v.proj_w, v.proj_b));
}

ag::Var gated_attention(const DminVars& v, ag::Var f) {
  ag::Var gate = ag::tanh(ag::matmul(f, v.att_v)) * ag::sigmoid(ag::matmul(f, v.att_u));
  return ag::matmul(gate, v.att_w);
}

ag::Var teacher_aggregate(ag::Var f, ag::Var a) {
  return ag::matmul(ag::softmax_rows(ag::transpose(a)), f);
}

double gumbel(double u) { return -std::log(-std::log(u)); }

ag::Var gumbel_sigmoid(ag::Var a, double tau, Rng& rng, ag::DrawTape* tape) {
  if (!(tau > 0.0)) throw std::invalid_argument("gumbel_sigmoid: tau must be positive");
  const Shape& shape = a.shape();
  auto draw = [&rng] { return gumbel(rng.uniform_open()); };
  auto sample = [&] {
    if (tape != nullptr) return tape->noise(shape, draw);
    Tensor t(shape);
    for (double& x : t.data()) x = draw();
    return t;
  };
  Tensor g1 = sample();
  const Tensor g2 = sample();
  for (std::size_t i = 0; i < g1.size(); ++i) g1[i] -= g2[i];
  ag::Var noisy = ag::add(a, a.graph->constant(std::move(g1)));
  return ag::sigmoid(ag::scale(noisy, 1.0 / tau));
}

ag::Var student_aggregate(ag::Var f, ag::Var a, ag::Var m, std::vector<bool>* degenerate) {
  return ag::matmul(ag::masked_softmax_rows(ag::transpose(a), ag::transpose(m), 1e-12, degenerate),
                    f);
}

ag::Var classify(const DminVars& v, ag::Var e) { return ag::cka_logits(e, v.cka); }

ag::Var clustering_loss(const DminVars& v, ag::Var f, const Tensor& a, std::size_t label,
                        std::size_t k_clu) {
  const std::size_t n = a.dim(0), classes = a.dim(1);
  if (label >= classes || label >= v.clu_w.size()) {
    throw std::out_of_range("clustering_loss: label out of range");
  }
  const std::size_t k = std::min(k_clu, n / 2);
  ag::Graph& g = *f.graph;
  if (k == 0) return g.constant(Tensor::scalar(0.0));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    return a.at(x, label) > a.at(y, label);
  });
  std::vector<std::size_t> rows;
  Tensor onehot({2 * k, 2}, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    rows.push_back(order[i]);
    onehot.at(i, 1) = 1.0;
  }
  for (std::size_t i = 0; i < k; ++i) {
    rows.push_back(order[n - k + i]);
    onehot.at(k + i, 0) = 1.0;
  }
  ag::Var logits = ag::linear(ag::gather_rows(f, rows), v.clu_w[label], v.clu_b[label]);
  ag::Var picked = ag::log_softmax_rows(logits) * g.constant(std::move(onehot));
  return ag::scale(ag::sum(picked), -1.0 / static_cast<double>(2 * k));
}

Tensor eval_mask(const Tensor& a, double tau, double gamma) {
  Tensor m(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) m[i] = ag::stable_sigmoid(a[i] / tau) > gamma ? 1.0 : 0.0;
  return m;
}

double union_retention(const Tensor& mask) {
  const std::size_t n = mask.dim(0), c = mask.dim(1);
  std::size_t kept = 0;
  for (std::size_t j = 0; j < n; ++j) {
    bool any = false;
    for (std::size_t k = 0; k < c; ++k) any = any || mask.at(j, k) != 0.0;
    kept += any ? 1 : 0;
  }
  return static_cast<double>(kept) / static_cast<double>(n);
}

}  // namespace dmin

SdForward loss_sd(ag::Graph& g, const DminVars& v, const DminConfig& cfg, const Tensor& f_raw,
                  std::size_t label, Rng& rng, ag::DrawTape* tape) {
  using namespace ag;
  if (label >= cfg.classes) throw std::out_of_range("loss_sd: label out of range");
  // Stop-gradient targets go through the tape so finite-difference replays
  // hold them fixed, as backward does.
  auto frozen = [&](const Tensor& t) {
    if (tape == nullptr) return t;
    const auto& vals = tape->offset({t.data().begin(), t.data().end()});
    return Tensor(t.shape(), vals);
  };
  SdForward o;
  Var f = dmin::project(v, g.constant(f_raw));
  o.a = dmin::gated_attention(v, f);
  o.e_tea = dmin::teacher_aggregate(f, o.a);
  o.logits_tea = dmin::classify(v, o.e_tea);

  o.a_hat = dmin::gumbel_sigmoid(o.a, cfg.tau, rng, tape);
  o.m = straight_through(o.a_hat, cfg.gamma, tape);
  o.e_stu = dmin::student_aggregate(f, o.a, o.m, &o.degenerate);
  o.logits_stu = dmin::classify(v, o.e_stu);
  o.retention = union_rate(o.m);

  o.l_cls = scale(pick(log_softmax_rows(o.logits_tea), label), -1.0);
  o.l_clu = dmin::clustering_loss(v, f, frozen(o.a.value()), label, cfg.k_clu);
  o.l_dis1 = mean(square(o.e_stu - g.constant(frozen(o.e_tea.value()))));
  Var ls = log_softmax_rows(o.logits_stu);
  Var lt = g.constant(frozen(log_softmax_rows(o.logits_tea).value()));
  o.l_dis2 = sum(exp(ls) * (ls - lt));
  o.l_rate = square(add_scalar(o.retention, -cfg.r));

  const auto& al = cfg.alpha;
  o.loss = al[0] * o.l_cls + al[1] * o.l_clu + al[2] * o.l_dis1 + al[3] * o.l_dis2 +
           al[4] * o.l_rate;
  return o;
}

ag::Var student_on_rows(const DminVars& v, ag::Var f_raw_rows) {
  ag::Var f = dmin::project(v, f_raw_rows);
  ag::Var a = dmin::gated_attention(v, f);
  ag::Var ones = f.graph->constant(Tensor(a.shape(), 1.0));
  return dmin::classify(v, dmin::student_aggregate(f, a, ones));
}

std::vector<double> softmax(std::span<const double> logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += p[i] = std::exp(logits[i] - m);
  for (double& x : p) x /= s;
  return p;
}

EvalOutput forward_eval(const DminParams& p, const Tensor& f_raw) {
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using CMap = Eigen::Map<const RowMat>;
  const DminConfig& cfg = p.cfg;
  if (f_raw.rank() != 2 || f_raw.dim(1) != cfg.dim_in) {
    throw ShapeError("forward_eval: expected N x " + std::to_string(cfg.dim_in) + " features, got " +
                     shape_str(f_raw.shape()));
  }
  const auto n = static_cast<Eigen::Index>(f_raw.dim(0));
  const auto q = static_cast<Eigen::Index>(cfg.q), h = static_cast<Eigen::Index>(cfg.h);
  const auto c = static_cast<Eigen::Index>(cfg.classes);
  CMap x(f_raw.data().data(), n, static_cast<Eigen::Index>(cfg.dim_in));
  CMap wp(p.proj_w.data().data(), static_cast<Eigen::Index>(cfg.dim_in), q);
  Eigen::Map<const Eigen::RowVectorXd> bp(p.proj_b.data().data(), q);
  RowMat f = (x * wp).rowwise() + bp;
  f = f.cwiseMax(0.0);
  const RowMat tv = (f * CMap(p.att_v.data().data(), q, h)).array().tanh().matrix();
  const RowMat su = (f * CMap(p.att_u.data().data(), q, h))
                        .unaryExpr([](double z) { return ag::stable_sigmoid(z); });
  const RowMat a = tv.cwiseProduct(su) * CMap(p.att_w.data().data(), h, c);

  EvalOutput out;
  out.a = Tensor({f_raw.dim(0), cfg.classes}, std::vector<double>(a.data(), a.data() + a.size()));
  out.logits.resize(cfg.classes);
  const std::size_t block = cfg.q * (cfg.k + 1);
  Eigen::RowVectorXd e(q);
  for (Eigen::Index k = 0; k < c; ++k) {
    Eigen::VectorXd w = a.col(k);
    w = (w.array() - w.maxCoeff()).exp();
    w /= w.sum();
    e = w.transpose() * f;
    out.logits[k] = cka_logit({e.data(), static_cast<std::size_t>(q)},
                              p.cka.data().subspan(k * block, block), cfg.k);
  }
  out.probs = softmax(out.logits);
  return out;
}

}  // namespace ahdmil
