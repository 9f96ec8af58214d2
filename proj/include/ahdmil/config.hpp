#pragma once

#include <array>
#include <cstdint>
#include <string>

#include <nlohmann/json.hpp>

#include "ahdmil/datagen.hpp"
#include "ahdmil/dmin.hpp"
#include "ahdmil/lipn.hpp"

namespace ahdmil {

/// Every run hyperparameter in one flat document. Unknown keys are
/// rejected when reading.
struct RunConfig {
  std::uint64_t seed = 7;

  // DMIN
  std::size_t q = 512;
  std::size_t h = 256;
  std::size_t k = 12;
  double tau = 0.7;
  double gamma = 0.5;
  double r = 0.6;
  std::array<double, 5> alpha{0.7, 0.3, 0.5, 0.5, 2.0};
  std::size_t k_clu = 8;

  // DB-LIPN
  double p = 0.5;
  double lambda = 0.2;
  std::array<double, 2> beta{1.0, 1.0};
  bool dual_branch = true;
  bool cbema = true;

  // optimisation
  double lr_sd = 3e-4;
  double lr_ad = 1e-5;    // DMIN fine-tuning
  double lr_lipn = 1e-5;
  std::size_t sd_epochs = 50;
  std::size_t ad_epochs = 20;
  std::size_t patience = 10;

  // paths
  std::string data;
  std::string out;

  void validate() const;
  nlohmann::json to_json() const;
  /// Starts from `base` and overwrites the keys present in `j`.
  static RunConfig from_json(const nlohmann::json& j, const RunConfig& base);
  static RunConfig from_json(const nlohmann::json& j) { return from_json(j, RunConfig{}); }

  DminConfig dmin(std::size_t dim_in, std::size_t classes) const;
  LipnConfig lipn(LowresMode mode, std::size_t dim_lo, std::size_t classes) const;
};

/// git-describe-style identifier of the build.
std::string build_id();

}  // namespace ahdmil
