#include "ahdmil/metrics.hpp"

#include <algorithm>
#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace ahdmil::metrics {

using nlohmann::json;

std::optional<double> binary_auc(std::span<const double> scores, std::span<const int> positive) {
  if (scores.size() != positive.size()) throw std::invalid_argument("binary_auc: length mismatch");
  // Rank-sum form of the pair count; tied groups receive their average rank.
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + j + 1);  // 1-based ranks i+1..j
    for (std::size_t k = i; k < j; ++k) {
      if (positive[order[k]]) {
        pos_rank_sum += avg_rank;
        ++n_pos;
      }
    }
    i = j;
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) return std::nullopt;
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  return (pos_rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

std::optional<double> macro_auc(const ScoreRows& scores, std::span<const std::size_t> labels,
                                std::vector<std::string>* notes) {
  if (scores.size() != labels.size()) throw std::invalid_argument("macro_auc: length mismatch");
  if (scores.empty()) return std::nullopt;
  const std::size_t classes = scores.front().size();
  const std::size_t first = classes == 2 ? 1 : 0;
  double total = 0.0;
  std::size_t used = 0;
  std::vector<double> col(scores.size());
  std::vector<int> pos(scores.size());
  for (std::size_t c = first; c < classes; ++c) {
    for (std::size_t i = 0; i < scores.size(); ++i) {
      col[i] = scores[i].at(c);
      pos[i] = labels[i] == c ? 1 : 0;
    }
    if (auto a = binary_auc(col, pos)) {
      total += *a;
      ++used;
    } else if (notes) {
      notes->push_back("class " + std::to_string(c) + " has no positives or no negatives");
    }
  }
  if (used == 0) return std::nullopt;
  return total / static_cast<double>(used);
}

double accuracy(std::span<const std::size_t> preds, std::span<const std::size_t> labels) {
  if (preds.size() != labels.size() || preds.empty()) {
    throw std::invalid_argument("accuracy: need equal, non-empty inputs");
  }
  std::size_t hit = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hit += preds[i] == labels[i] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(preds.size());
}

double macro_f1(std::span<const std::size_t> preds, std::span<const std::size_t> labels,
                std::size_t num_classes) {
  if (preds.size() != labels.size() || preds.empty()) {
    throw std::invalid_argument("macro_f1: need equal, non-empty inputs");
  }
  double total = 0.0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      const bool p = preds[i] == c, y = labels[i] == c;
      tp += p && y;
      fp += p && !y;
      fn += !p && y;
    }
    const std::size_t denom = 2 * tp + fp + fn;
    total += denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
  }
  return total / static_cast<double>(num_classes);
}

double brier(const ScoreRows& probs, std::span<const std::size_t> labels) {
  if (probs.size() != labels.size() || probs.empty()) {
    throw std::invalid_argument("brier: need equal, non-empty inputs");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const auto& row = probs[i];
    double s = 0.0;
    for (double v : row) {
      if (!(v >= -1e-12 && v <= 1.0 + 1e-12)) throw std::invalid_argument("brier: probability outside [0,1]");
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-6) {
      throw std::invalid_argument("brier: row " + std::to_string(i) + " sums to " + std::to_string(s));
    }
    if (labels[i] >= row.size()) throw std::invalid_argument("brier: label out of range");
    if (row.size() == 2) {
      const double d = row[1] - (labels[i] == 1 ? 1.0 : 0.0);
      total += d * d;
    } else {
      for (std::size_t c = 0; c < row.size(); ++c) {
        const double d = row[c] - (labels[i] == c ? 1.0 : 0.0);
        total += d * d;
      }
    }
  }
  return total / static_cast<double>(probs.size());
}

std::vector<CalibrationBin> calibration_curve(std::span<const double> confidence,
                                              std::span<const double> outcome, std::size_t n_bins) {
  if (confidence.size() != outcome.size()) throw std::invalid_argument("calibration: length mismatch");
  if (n_bins == 0) throw std::invalid_argument("calibration: need at least one bin");
  std::vector<CalibrationBin> bins(n_bins);
  std::vector<double> conf_sum(n_bins, 0.0), out_sum(n_bins, 0.0);
  for (std::size_t b = 0; b < n_bins; ++b) {
    bins[b].lo = static_cast<double>(b) / static_cast<double>(n_bins);
    bins[b].hi = static_cast<double>(b + 1) / static_cast<double>(n_bins);
  }
  for (std::size_t i = 0; i < confidence.size(); ++i) {
    const double c = confidence[i];
    if (!(c >= 0.0 && c <= 1.0)) throw std::invalid_argument("calibration: confidence outside [0,1]");
    auto b = static_cast<std::size_t>(c * static_cast<double>(n_bins));
    b = std::min(b, n_bins - 1);
    conf_sum[b] += c;
    out_sum[b] += outcome[i];
    ++bins[b].count;
  }
  for (std::size_t b = 0; b < n_bins; ++b) {
    if (bins[b].count == 0) continue;
    const auto n = static_cast<double>(bins[b].count);
    bins[b].mean_conf = conf_sum[b] / n;
    bins[b].obs_freq = out_sum[b] / n;
  }
  return bins;
}

std::size_t argmax(std::span<const double> row) {
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

void calibration_inputs(const ScoreRows& probs, std::span<const std::size_t> labels,
                        std::vector<double>& confidence, std::vector<double>& outcome) {
  confidence.clear();
  outcome.clear();
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const auto& row = probs[i];
    if (row.size() == 2) {
      confidence.push_back(row[1]);
      outcome.push_back(labels[i] == 1 ? 1.0 : 0.0);
    } else {
      const std::size_t k = argmax(row);
      confidence.push_back(row[k]);
      outcome.push_back(labels[i] == k ? 1.0 : 0.0);
    }
  }
}

TTest paired_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) {
    throw std::invalid_argument("paired_t_test: need two samples of equal length >= 2");
  }
  const std::size_t n = a.size();
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean += a[i] - b[i];
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = a[i] - b[i] - mean;
    ss += d * d;
  }
  TTest out;
  out.dof = n - 1;
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  if (sd == 0.0) {
    out.t = mean == 0.0 ? 0.0 : std::copysign(INFINITY, mean);
    out.p = mean == 0.0 ? 1.0 : 0.0;
    return out;
  }
  out.t = mean / (sd / std::sqrt(static_cast<double>(n)));
  boost::math::students_t dist(static_cast<double>(out.dof));
  out.p = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(out.t)));
  return out;
}

json MetricsReport::to_json() const {
  json bins = json::array();
  for (const auto& b : calibration) {
    bins.push_back({{"lo", b.lo},
                    {"hi", b.hi},
                    {"mean_conf", b.mean_conf ? json(*b.mean_conf) : json(nullptr)},
                    {"obs_freq", b.obs_freq ? json(*b.obs_freq) : json(nullptr)},
                    {"count", b.count}});
  }
  json j{{"auc", auc ? json(*auc) : json(nullptr)},
         {"acc", acc},
         {"macro_f1", macro_f1},
         {"brier", brier},
         {"calibration", bins},
         {"retention_mean", retention_mean ? json(*retention_mean) : json(nullptr)},
         {"retention_std", retention_std ? json(*retention_std) : json(nullptr)},
         {"n_samples", n_samples}};
  if (!auc_note.empty()) j["auc_note"] = auc_note;
  return j;
}

MetricsReport make_report(const ScoreRows& probs, std::span<const std::size_t> labels,
                          std::span<const double> retention, std::size_t n_bins) {
  if (probs.empty()) throw std::invalid_argument("make_report: empty split");
  MetricsReport r;
  r.n_samples = probs.size();
  std::vector<std::string> notes;
  r.auc = macro_auc(probs, labels, &notes);
  for (const auto& n : notes) r.auc_note += (r.auc_note.empty() ? "" : "; ") + n;
  std::vector<std::size_t> preds;
  for (const auto& row : probs) preds.push_back(argmax(row));
  r.acc = accuracy(preds, labels);
  r.macro_f1 = macro_f1(preds, labels, probs.front().size());
  r.brier = brier(probs, labels);
  std::vector<double> conf, outcome;
  calibration_inputs(probs, labels, conf, outcome);
  r.calibration = calibration_curve(conf, outcome, n_bins);
  if (!retention.empty()) {
    const double n = static_cast<double>(retention.size());
    const double m = std::accumulate(retention.begin(), retention.end(), 0.0) / n;
    double ss = 0.0;
    for (double v : retention) ss += (v - m) * (v - m);
    r.retention_mean = m;
    r.retention_std = std::sqrt(ss / n);
  }
  return r;
}

}  // namespace ahdmil::metrics
