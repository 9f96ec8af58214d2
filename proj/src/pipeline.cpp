#include "ahdmil/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <tuple>

#include "ahdmil/error.hpp"
#include "ahdmil/rng.hpp"

namespace ahdmil {

using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

void emit(const LogFn& log, const json& j) {
  if (log) log(j);
}

// FNV-1a over the raw bytes of each target tensor, in bag-id order.
std::string digest_of(const FrozenTargets& t) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto eat = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto* m : {&t.a_bar, &t.m_hr}) {
    for (const auto& [id, tensor] : *m) {
      eat(id.data(), id.size());
      eat(tensor.data().data(), tensor.size() * sizeof(double));
    }
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

struct ValScore {
  std::optional<double> auc;
  double ce = 0.0;
  double acc = 0.0;
  // AD only: expected pre-screener loss against teacher targets, and the
  // mean fraction of instances the full inference path keeps.
  std::optional<double> lipn_loss;
  std::optional<double> retention;

  // Higher AUC first; ties go to the lower pre-screener loss when there is
  // one, else to the lower cross-entropy.
  bool better_than(const ValScore& o) const {
    const double a = auc.value_or(-1.0), b = o.auc.value_or(-1.0);
    if (a != b) return a > b;
    if (lipn_loss && o.lipn_loss) return *lipn_loss < *o.lipn_loss;
    return ce < o.ce;
  }
  json to_json() const {
    json j{{"auc", auc ? json(*auc) : json(nullptr)}, {"ce", ce}, {"acc", acc}};
    if (lipn_loss) j["lipn_loss"] = *lipn_loss;
    if (retention) j["retention"] = *retention;
    return j;
  }
};

ValScore score_split(const std::vector<const Bag*>& bags,
                     const std::function<std::vector<double>(const Bag&)>& predict) {
  ValScore s;
  if (bags.empty()) return s;
  metrics::ScoreRows probs;
  std::vector<std::size_t> labels;
  std::size_t hits = 0;
  for (const Bag* b : bags) {
    probs.push_back(predict(*b));
    labels.push_back(b->label);
    s.ce -= std::log(std::max(probs.back()[b->label], 1e-300));
    hits += metrics::argmax(probs.back()) == b->label ? 1 : 0;
  }
  s.ce /= static_cast<double>(bags.size());
  s.acc = static_cast<double>(hits) / static_cast<double>(bags.size());
  s.auc = metrics::macro_auc(probs, labels);
  return s;
}

void check_finite(double v, const std::string& what, const std::string& bag_id) {
  if (!std::isfinite(v)) throw NumericError("non-finite " + what + " on bag '" + bag_id + "'");
}

// Runs one training step, attributing numeric failures (NaN inputs to a
// softmax, non-finite gradients) to the bag being processed.
template <typename F>
void step_on_bag(const std::string& bag_id, F&& step) {
  try {
    step();
  } catch (const DomainError& e) {
    throw NumericError("non-finite value on bag '" + bag_id + "': " + e.what());
  } catch (const NumericError& e) {
    if (std::string(e.what()).find("'" + bag_id + "'") != std::string::npos) throw;
    throw NumericError(std::string(e.what()) + " (bag '" + bag_id + "')");
  }
}

std::uint64_t stream(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  return Rng(seed).split(a).split(b).next_u64();
}

}  // namespace

double FrozenTargets::mean_retention() const {
  if (retention.empty()) return 0.0;
  double s = 0.0;
  for (const auto& [id, r] : retention) s += r;
  return s / static_cast<double>(retention.size());
}

FrozenTargets compute_targets(const DminParams& teacher, const std::vector<const Bag*>& bags) {
  FrozenTargets t;
  for (const Bag* b : bags) {
    const EvalOutput out = forward_eval(teacher, hires_tensor(*b));
    Tensor m = dmin::eval_mask(out.a, teacher.cfg.tau, teacher.cfg.gamma);
    t.retention[b->id] = dmin::union_retention(m);
    t.a_bar[b->id] = lipn::soft_targets(out.a);
    t.m_hr[b->id] = std::move(m);
  }
  t.digest = digest_of(t);
  return t;
}

// ---- SD -------------------------------------------------------------------

SdResult train_sd(const Dataset& data, const RunConfig& cfg, const LogFn& log) {
  cfg.validate();
  const auto& man = data.manifest;
  const auto train = data.split(man.train);
  const auto val = data.split(man.val);
  if (train.empty()) throw DataError(DataErrorKind::invalid, "train split is empty");

  const DminConfig dcfg = cfg.dmin(man.dim, man.num_classes);
  DminParams model = DminParams::init(dcfg, stream(cfg.seed, 1));
  AdamState adam(cfg.lr_sd);
  std::vector<Tensor> hires;
  hires.reserve(train.size());
  for (const Bag* b : train) hires.push_back(hires_tensor(*b));

  auto predict = [&model](const Bag& b) { return forward_eval(model, hires_tensor(b)).probs; };
  DminParams best = model;
  AdamState best_adam = adam;
  ValScore best_score = score_split(val, predict);
  std::size_t best_epoch = 0, stale = 0;
  json history = json::array();

  for (std::size_t epoch = 1; epoch <= cfg.sd_epochs; ++epoch) {
    Rng order_rng(stream(cfg.seed, 2, epoch));
    Rng noise_rng(stream(cfg.seed, 3, epoch));
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    order_rng.shuffle(order);

    std::array<double, 6> sums{};
    double retention = 0.0;
    std::size_t degenerate = 0;
    const ParamList params = model.params();
    for (std::size_t i : order) {
      step_on_bag(train[i]->id, [&] {
        ag::Graph g;
        const DminVars v = bind(g, model);
        SdForward f = loss_sd(g, v, dcfg, hires[i], train[i]->label, noise_rng);
        const double total = f.loss.item();
        check_finite(total, "SD loss", train[i]->id);
        g.backward(f.loss);
        adam_step(params, adam);
        zero_grads(params);
        const double parts[] = {f.l_cls.item(), f.l_clu.item(), f.l_dis1.item(),
                                f.l_dis2.item(), f.l_rate.item(), total};
        for (std::size_t k = 0; k < 6; ++k) sums[k] += parts[k];
        retention += f.retention.item();
        for (bool d : f.degenerate) degenerate += d ? 1 : 0;
      });
    }
    const auto n = static_cast<double>(train.size());
    const ValScore score = score_split(val, predict);
    const bool improved = score.better_than(best_score);
    json line{{"stage", "sd"},
              {"epoch", epoch},
              {"loss",
               {{"cls", sums[0] / n}, {"clu", sums[1] / n}, {"dis1", sums[2] / n},
                {"dis2", sums[3] / n}, {"rate", sums[4] / n}, {"total", sums[5] / n}}},
              {"train_retention", retention / n},
              {"degenerate_columns", degenerate},
              {"val", score.to_json()},
              {"best", improved}};
    history.push_back({{"epoch", epoch}, {"val", score.to_json()}});
    emit(log, line);
    if (improved) {
      best = model;
      best_adam = adam;
      best_score = score;
      best_epoch = epoch;
      stale = 0;
    } else if (++stale >= cfg.patience) {
      emit(log, {{"stage", "sd"}, {"event", "early_stop"}, {"epoch", epoch}});
      break;
    }
  }

  SdResult out;
  out.targets = compute_targets(best, train);
  out.ckpt.dmin = std::move(best);
  out.ckpt.optimizers.emplace_back("dmin", std::move(best_adam));
  out.ckpt.meta = {{"stage", "sd"},
                   {"seed", cfg.seed},
                   {"config", cfg.to_json()},
                   {"epoch", best_epoch},
                   {"history", history},
                   {"val", best_score.to_json()},
                   {"targets_digest", out.targets.digest},
                   {"target_retention", out.targets.mean_retention()}};
  emit(log, {{"stage", "sd"},
             {"event", "done"},
             {"best_epoch", best_epoch},
             {"target_retention", out.targets.mean_retention()}});
  return out;
}

// ---- AD -------------------------------------------------------------------

namespace {

struct BranchOutputs {
  Tensor p1, p2;
};

BranchOutputs lipn_eval(LipnParams& lp, const Tensor& lowres) {
  ag::Graph g;
  ag::Var x = g.constant(lowres);
  BranchOutputs o;
  o.p1 = branch_forward(g, lp.b1, x, false, false).value();
  o.p2 = lp.cfg.dual_branch ? branch_forward(g, lp.b2, x, false, false).value() : o.p1;
  return o;
}

// Eval-mode L_LIPN averaged over bags, with the soft and hard terms mixed in
// proportion to how often training draws each mode; plus mean retention of
// the selection that inference would make.
std::pair<double, double> lipn_val_loss(LipnParams& lp, const std::vector<const Bag*>& bags,
                                        const FrozenTargets& targets) {
  double loss = 0.0, kept = 0.0;
  for (const Bag* b : bags) {
    const BranchOutputs po = lipn_eval(lp, lowres_tensor(*b));
    ag::Graph g;
    ag::Var p1 = g.constant(po.p1), p2 = g.constant(po.p2);
    const Tensor& a_bar = targets.a_bar.at(b->id);
    const Tensor& m_hr = targets.m_hr.at(b->id);
    const double soft = lipn::lipn_loss(p1, p2, a_bar, m_hr, true, lp.cfg).loss.item();
    const double hard = lipn::lipn_loss(p1, p2, a_bar, m_hr, false, lp.cfg).loss.item();
    loss += lp.cfg.p * soft + (1.0 - lp.cfg.p) * hard;
    kept += lipn::select_instances(po.p1, po.p2, lp.cfg.gamma, lp.cfg.r).retention;
  }
  const auto n = static_cast<double>(std::max<std::size_t>(bags.size(), 1));
  return {loss / n, kept / n};
}

}  // namespace

Checkpoint train_ad(const Dataset& data, const Checkpoint& sd, const RunConfig& cfg, const LogFn& log) {
  cfg.validate();
  const auto& man = data.manifest;
  const auto train = data.split(man.train);
  const auto val = data.split(man.val);
  if (train.empty()) throw DataError(DataErrorKind::invalid, "train split is empty");
  if (sd.dmin.cfg.dim_in != man.dim || sd.dmin.cfg.classes != man.num_classes) {
    throw DataError(DataErrorKind::invalid, "SD checkpoint does not match the dataset layout");
  }

  const FrozenTargets targets = compute_targets(sd.dmin, train);
  Checkpoint ck;
  ck.dmin = sd.dmin;
  // Selection-related DMIN settings follow the run config; shapes follow SD.
  ck.dmin.cfg.gamma = cfg.gamma;
  ck.dmin.cfg.r = cfg.r;
  ck.lipn = LipnParams::init(cfg.lipn(man.lowres_mode, man.dim_lo, man.num_classes), stream(cfg.seed, 4));
  LipnParams& lp = *ck.lipn;
  AdamState adam_lipn(cfg.lr_lipn), adam_dmin(cfg.lr_ad);
  const ParamList lipn_params = lp.params();
  const ParamList dmin_params = ck.dmin.params();
  const LipnConfig& lcfg = lp.cfg;

  const FrozenTargets val_targets = compute_targets(sd.dmin, val);
  auto predict = [&ck](const Bag& b) { return infer(b, ck).probs; };
  auto score_val = [&] {
    ValScore s = score_split(val, predict);
    if (!val.empty()) std::tie(s.lipn_loss, s.retention) = lipn_val_loss(lp, val, val_targets);
    return s;
  };
  // Only trained epochs compete: the untrained pre-screener is never returned
  // unless no epoch runs at all.
  Checkpoint best = ck;
  std::optional<ValScore> best_score;
  AdamState best_lipn = adam_lipn, best_dmin = adam_dmin;
  std::size_t best_epoch = 0, stale = 0;
  json history = json::array();
  std::size_t soft_total = 0, iter_total = 0;

  for (std::size_t epoch = 1; epoch <= cfg.ad_epochs; ++epoch) {
    Rng order_rng(stream(cfg.seed, 5, epoch));
    Rng mode_rng(stream(cfg.seed, 6, epoch));
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    order_rng.shuffle(order);

    double s_lipn = 0.0, s_dis = 0.0, s_rate = 0.0, s_ce = 0.0, s_ret = 0.0, s_r1 = 0.0, s_r2 = 0.0;
    std::size_t soft_count = 0, fallbacks = 0;
    for (std::size_t i : order) {
      const Bag& bag = *train[i];
      const bool soft = mode_rng.bernoulli(lcfg.p);
      soft_count += soft ? 1 : 0;
      step_on_bag(bag.id, [&] {
        const Tensor lowres = lowres_tensor(bag);
        {
          ag::Graph g;
          ag::Var x = g.constant(lowres);
          ag::Var p1 = branch_forward(g, lp.b1, x, true, true);
          ag::Var p2 = lcfg.dual_branch ? branch_forward(g, lp.b2, x, true, true) : p1;
          const auto parts = lipn::lipn_loss(p1, p2, targets.a_bar.at(bag.id), targets.m_hr.at(bag.id),
                                             soft, lcfg);
          check_finite(parts.loss.item(), "LIPN loss", bag.id);
          g.backward(parts.loss);
          adam_step(lipn_params, adam_lipn);
          zero_grads(lipn_params);
          s_lipn += parts.loss.item();
          s_dis += parts.dis.item();
          s_rate += parts.rate.item();
          s_r1 += parts.r1.item();
          s_r2 += parts.r2.item();
        }
        const BranchOutputs po = lipn_eval(lp, lowres);
        const lipn::Selection sel = lipn::select_instances(po.p1, po.p2, lcfg.gamma, lcfg.r);
        fallbacks += sel.fallback ? 1 : 0;
        s_ret += sel.retention;
        {
          ag::Graph g;
          const DminVars v = bind(g, ck.dmin);
          ag::Var logits = student_on_rows(v, g.constant(hires_rows(bag, sel.kept)));
          ag::Var ce = ag::scale(ag::pick(ag::log_softmax_rows(logits), bag.label), -1.0);
          check_finite(ce.item(), "DMIN fine-tuning loss", bag.id);
          g.backward(ce);
          adam_step(dmin_params, adam_dmin);
          zero_grads(dmin_params);
          s_ce += ce.item();
        }
      });
    }
    soft_total += soft_count;
    iter_total += train.size();
    if (lcfg.dual_branch && lcfg.cbema) cbema_update(lp);

    const auto n = static_cast<double>(train.size());
    const ValScore score = score_val();
    const bool improved = !best_score || score.better_than(*best_score);
    emit(log, {{"stage", "ad"},
               {"epoch", epoch},
               {"loss", {{"lipn", s_lipn / n}, {"dis3", s_dis / n}, {"rate", s_rate / n}, {"dmin_ce", s_ce / n}}},
               {"branch_retention", {s_r1 / n, s_r2 / n}},
               {"merged_retention", s_ret / n},
               {"soft_iterations", soft_count},
               {"hard_iterations", train.size() - soft_count},
               {"fallbacks", fallbacks},
               {"val", score.to_json()},
               {"best", improved}});
    history.push_back({{"epoch", epoch}, {"val", score.to_json()}});
    if (improved) {
      best = ck;
      best_lipn = adam_lipn;
      best_dmin = adam_dmin;
      best_score = score;
      best_epoch = epoch;
      stale = 0;
    } else if (++stale >= cfg.patience) {
      emit(log, {{"stage", "ad"}, {"event", "early_stop"}, {"epoch", epoch}});
      break;
    }
  }

  best.optimizers.clear();
  best.optimizers.emplace_back("dmin", std::move(best_dmin));
  best.optimizers.emplace_back("lipn", std::move(best_lipn));
  best.meta = {{"stage", "ad"},
               {"seed", cfg.seed},
               {"config", cfg.to_json()},
               {"epoch", best_epoch},
               {"history", history},
               {"val", best_score ? best_score->to_json() : json(nullptr)},
               {"sd_epoch", sd.meta.value("epoch", 0)},
               {"targets_digest", targets.digest},
               {"soft_iterations", soft_total},
               {"iterations", iter_total}};
  emit(log, {{"stage", "ad"}, {"event", "done"}, {"best_epoch", best_epoch},
             {"soft_iterations", soft_total}, {"iterations", iter_total}});
  return best;
}

// ---- inference ----------------------------------------------------------------

InferenceTrace infer(const Bag& bag, Checkpoint& ckpt) {
  if (!ckpt.lipn) throw DataError(DataErrorKind::invalid, "checkpoint has no LIPN (run train-ad first)");
  LipnParams& lp = *ckpt.lipn;
  if (lp.cfg.mode != bag.lowres_mode) {
    throw DataError(DataErrorKind::invalid, "bag '" + bag.id + "' low-res mode does not match the LIPN");
  }
  InferenceTrace t;
  t.bag_id = bag.id;
  t.n = bag.n;

  auto t0 = Clock::now();
  const BranchOutputs po = lipn_eval(lp, lowres_tensor(bag));
  t.t_lowres = seconds_since(t0);

  t0 = Clock::now();
  const lipn::Selection sel = lipn::select_instances(po.p1, po.p2, lp.cfg.gamma, lp.cfg.r);
  t.t_select = seconds_since(t0);

  t0 = Clock::now();
  const Tensor rows = hires_rows(bag, sel.kept);
  t.t_feat = seconds_since(t0);

  t0 = Clock::now();
  const EvalOutput out = forward_eval(ckpt.dmin, rows);
  t.t_model = seconds_since(t0);

  t.kept = sel.kept.size();
  t.retention = sel.retention;
  t.fallback = sel.fallback;
  t.probs = out.probs;
  t.pred = metrics::argmax(t.probs);
  return t;
}

InferenceTrace infer_full(const Bag& bag, const DminParams& dmin) {
  InferenceTrace t;
  t.bag_id = bag.id;
  t.n = t.kept = bag.n;
  auto t0 = Clock::now();
  const Tensor rows = hires_tensor(bag);
  t.t_feat = seconds_since(t0);
  t0 = Clock::now();
  const EvalOutput out = forward_eval(dmin, rows);
  t.t_model = seconds_since(t0);
  t.probs = out.probs;
  t.pred = metrics::argmax(t.probs);
  return t;
}

EvalMode eval_mode_from_string(const std::string& s) {
  if (s == "teacher-full") return EvalMode::teacher_full;
  if (s == "student-pruned") return EvalMode::student_pruned;
  throw std::invalid_argument("unknown eval mode '" + s + "' (expected teacher-full|student-pruned)");
}

std::string to_string(EvalMode m) {
  return m == EvalMode::teacher_full ? "teacher-full" : "student-pruned";
}

Evaluation evaluate(const std::vector<const Bag*>& bags, Checkpoint& ckpt, EvalMode mode) {
  if (bags.empty()) throw std::invalid_argument("evaluate: split is empty");
  Evaluation ev;
  metrics::ScoreRows probs;
  std::vector<double> retention;
  for (const Bag* b : bags) {
    InferenceTrace t = mode == EvalMode::teacher_full ? infer_full(*b, ckpt.dmin) : infer(*b, ckpt);
    probs.push_back(t.probs);
    ev.labels.push_back(b->label);
    ev.correct.push_back(t.pred == b->label ? 1.0 : 0.0);
    if (mode == EvalMode::student_pruned) retention.push_back(t.retention);
    ev.traces.push_back(std::move(t));
  }
  ev.report = metrics::make_report(probs, ev.labels, retention);
  if (!ev.report.auc && ev.report.auc_note.empty()) ev.report.auc_note = "AUC undefined";
  return ev;
}

}  // namespace ahdmil
