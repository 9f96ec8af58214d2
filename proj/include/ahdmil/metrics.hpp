#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace ahdmil::metrics {

/// Row i holds the C class probabilities (or scores) of sample i.
using ScoreRows = std::vector<std::vector<double>>;

/// Mann-Whitney AUC with ties counted 0.5. Absent when either class is empty.
std::optional<double> binary_auc(std::span<const double> scores, std::span<const int> positive);

/// One-vs-rest AUC averaged over classes that have both positives and
/// negatives. With C = 2 only the class-1 score is used. Skipped classes are
/// described in `notes`.
std::optional<double> macro_auc(const ScoreRows& scores, std::span<const std::size_t> labels,
                                std::vector<std::string>* notes = nullptr);

double accuracy(std::span<const std::size_t> preds, std::span<const std::size_t> labels);

/// Unweighted mean of per-class F1 over `num_classes` classes; a class with
/// no predicted and no actual members contributes 0.
double macro_f1(std::span<const std::size_t> preds, std::span<const std::size_t> labels,
                std::size_t num_classes);

/// Binary: mean (p_1 - y)^2. Multiclass: mean of sum_c (p_c - [y = c])^2.
/// Throws std::invalid_argument when a row is not a probability vector.
double brier(const ScoreRows& probs, std::span<const std::size_t> labels);

struct CalibrationBin {
  double lo = 0.0, hi = 0.0;
  std::optional<double> mean_conf;
  std::optional<double> obs_freq;
  std::size_t count = 0;
};

/// Equal-width bins over [0,1]; confidence 1 falls into the last bin.
std::vector<CalibrationBin> calibration_curve(std::span<const double> confidence,
                                              std::span<const double> outcome,
                                              std::size_t n_bins = 10);

/// Binary: positive-class probability vs label. Multiclass: top probability
/// vs correctness.
void calibration_inputs(const ScoreRows& probs, std::span<const std::size_t> labels,
                        std::vector<double>& confidence, std::vector<double>& outcome);

struct TTest {
  double t = 0.0;
  double p = 1.0;
  std::size_t dof = 0;
};

/// Two-sided paired t-test on a - b. Zero-variance differences give p = 1
/// when the mean is zero and p = 0 otherwise.
TTest paired_t_test(std::span<const double> a, std::span<const double> b);

struct MetricsReport {
  std::optional<double> auc;
  std::string auc_note;
  double acc = 0.0;
  double macro_f1 = 0.0;
  double brier = 0.0;
  std::vector<CalibrationBin> calibration;
  std::optional<double> retention_mean;
  std::optional<double> retention_std;
  std::size_t n_samples = 0;

  nlohmann::json to_json() const;
};

std::size_t argmax(std::span<const double> row);

/// Aggregates probabilities of a split into a report. `retention` may be
/// empty (teacher-full mode keeps every instance).
MetricsReport make_report(const ScoreRows& probs, std::span<const std::size_t> labels,
                          std::span<const double> retention, std::size_t n_bins = 10);

}  // namespace ahdmil::metrics
