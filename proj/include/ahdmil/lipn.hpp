#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ahdmil/autograd.hpp"
#include "ahdmil/datagen.hpp"
#include "ahdmil/optim.hpp"

namespace ahdmil {

struct LipnConfig {
  LowresMode mode = LowresMode::patch;
  std::size_t dim_lo = 0;  // vector mode input width
  std::size_t classes = 2;
  double gamma = 0.5;
  double r = 0.6;
  double lambda = 0.2;     // CBEMA mixing ratio
  double p = 0.5;          // soft-mode probability
  std::array<double, 2> beta{1.0, 1.0};
  bool dual_branch = true;
  bool cbema = true;

  void validate() const;
  nlohmann::json to_json() const;
  static LipnConfig from_json(const nlohmann::json& j);
};

/// Conv (or depthwise conv) + batchnorm, optionally followed by ReLU.
struct ConvBnLayer {
  std::string name;
  ag::ConvGeometry geo;
  bool depthwise = false;
  bool relu = true;
  Tensor weight;  // Cout x Cin x k x k, or C x 1 x k x k when depthwise
  Tensor gamma, beta;
  ag::BatchNormState bn;
};

/// One pre-screening branch. Patch mode follows the fixed layer table;
/// vector mode is a D_lo -> 64 -> 64 -> C perceptron.
struct LipnBranch {
  LowresMode mode = LowresMode::patch;
  std::size_t classes = 2;
  std::vector<ConvBnLayer> convs;  // patch mode, in execution order
  std::vector<Tensor> fc_w, fc_b;  // patch: one 64 x C layer; vector: three layers

  static LipnBranch init(const LipnConfig& cfg, std::uint64_t seed);
  ParamList params(const std::string& prefix);
  /// Batchnorm running statistics (not trained, but blended by CBEMA and
  /// serialized with the model).
  ParamList buffers(const std::string& prefix);
};

/// Output shape after each named stage, for comparison with the layer table.
using LayerTrace = std::vector<std::pair<std::string, Shape>>;

/// P = sigmoid(branch(x)), N x C. `training` selects batch statistics in
/// batchnorm; `grads` makes the parameters graph leaves.
ag::Var branch_forward(ag::Graph& g, LipnBranch& b, ag::Var x, bool training, bool grads,
                       LayerTrace* trace = nullptr);

struct LipnParams {
  LipnConfig cfg;
  LipnBranch b1, b2;

  static LipnParams init(const LipnConfig& cfg, std::uint64_t seed);
  ParamList params();
  ParamList buffers();
};

/// Joint assignment theta1, theta2 <- (1-l) theta1 + l theta2, (1-l) theta2 + l theta1
/// over learnable parameters and batchnorm statistics.
void cbema_update(LipnParams& p);

namespace lipn {

/// Per-class min-max normalisation of attention to [0,1]; a constant column
/// maps to 0.5.
Tensor soft_targets(const Tensor& a);

ag::Var crd_loss_hard(ag::Var p1, ag::Var p2, const Tensor& m_hr, double gamma,
                      ag::DrawTape* tape = nullptr);
ag::Var crd_loss_soft(ag::Var p1, ag::Var p2, const Tensor& a_bar);

struct LossParts {
  ag::Var loss, dis, rate, r1, r2;
};
/// beta1 * L_dis3 + beta2 * mean_k (r_k - r)^2, r_k the union retention of
/// the binarized branch output.
LossParts lipn_loss(ag::Var p1, ag::Var p2, const Tensor& a_bar, const Tensor& m_hr, bool soft,
                    const LipnConfig& cfg, ag::DrawTape* tape = nullptr);

struct Selection {
  Tensor mask;                   // N x C binary
  std::vector<std::size_t> kept; // ascending instance indices
  double retention = 0.0;
  bool fallback = false;
};

/// B((P1 + P2) / 2, gamma); an instance is kept when any class fires. The
/// kept list may be empty.
Selection merged_mask(const Tensor& p1, const Tensor& p2, double gamma);
/// merged_mask, but an empty selection is replaced by the top ceil(r N)
/// instances ranked by their largest branch-mean score.
Selection select_instances(const Tensor& p1, const Tensor& p2, double gamma, double r);

}  // namespace lipn

}  // namespace ahdmil
