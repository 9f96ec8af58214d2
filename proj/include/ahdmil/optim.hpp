#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ahdmil/tensor.hpp"

namespace ahdmil {

struct NamedTensor {
  std::string name;
  Tensor* tensor;
};

/// Ordered view of a model's tensors; the order fixes serialization layout
/// and optimizer-state alignment.
using ParamList = std::vector<NamedTensor>;

void zero_grads(const ParamList& params);

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m;  // first moments, one per parameter
  std::vector<std::vector<double>> v;  // second moments

  explicit AdamState(double lr_ = 1e-3) : lr(lr_) {}
};

/// Bias-corrected Adam update using each parameter's accumulated gradient.
/// Throws NumericError naming the parameter if any gradient is non-finite;
/// in that case no parameter is modified.
void adam_step(const ParamList& params, AdamState& state);

}  // namespace ahdmil
