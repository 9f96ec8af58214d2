#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ahdmil/checkpoint.hpp"
#include "ahdmil/config.hpp"
#include "ahdmil/datagen.hpp"
#include "ahdmil/metrics.hpp"

namespace ahdmil {

/// Receives one JSON object per epoch (and per notable event).
using LogFn = std::function<void(const nlohmann::json&)>;

/// CRD supervision computed once from a frozen SD teacher.
struct FrozenTargets {
  std::map<std::string, Tensor> a_bar;  // min-max normalised attention, N x C
  std::map<std::string, Tensor> m_hr;   // B(sigmoid(A / tau), gamma), N x C
  std::map<std::string, double> retention;
  std::string digest;

  double mean_retention() const;
};

FrozenTargets compute_targets(const DminParams& teacher, const std::vector<const Bag*>& bags);

struct SdResult {
  Checkpoint ckpt;
  FrozenTargets targets;
};

/// Self-distillation of DMIN on the train split with validation-based model
/// selection (val AUC, ties broken by lower val cross-entropy) and early
/// stopping. Throws NumericError naming the bag on a non-finite loss.
SdResult train_sd(const Dataset& data, const RunConfig& cfg, const LogFn& log = {});

/// Alternating LIPN / DMIN training starting from an SD checkpoint. Targets
/// are recomputed from the checkpoint's DMIN, which stays frozen for that
/// purpose.
Checkpoint train_ad(const Dataset& data, const Checkpoint& sd, const RunConfig& cfg,
                    const LogFn& log = {});

struct InferenceTrace {
  std::string bag_id;
  double t_lowres = 0.0, t_select = 0.0, t_feat = 0.0, t_model = 0.0;  // seconds
  std::size_t n = 0;
  std::size_t kept = 0;
  double retention = 1.0;
  bool fallback = false;
  std::vector<double> probs;
  std::size_t pred = 0;
};

/// Low-res pre-screening, merged-mask selection, then the student on the
/// kept hi-res rows only. Requires a checkpoint with a LIPN.
InferenceTrace infer(const Bag& bag, Checkpoint& ckpt);
/// Teacher path on every instance (no pre-screening).
InferenceTrace infer_full(const Bag& bag, const DminParams& dmin);

enum class EvalMode { teacher_full, student_pruned };
EvalMode eval_mode_from_string(const std::string& s);
std::string to_string(EvalMode m);

struct Evaluation {
  metrics::MetricsReport report;
  std::vector<InferenceTrace> traces;
  std::vector<std::size_t> labels;
  std::vector<double> correct;  // per-bag 0/1, for paired tests
};

Evaluation evaluate(const std::vector<const Bag*>& bags, Checkpoint& ckpt, EvalMode mode);

}  // namespace ahdmil
