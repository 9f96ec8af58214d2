#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ahdmil/dmin.hpp"
#include "ahdmil/lipn.hpp"
#include "ahdmil/optim.hpp"

namespace ahdmil {

/// Model state on disk: "AHCK", u16 version, u32 header length, a JSON header
/// (configs, tensor names and shapes, run metadata), then each declared
/// tensor as little-endian f64 in header order.
struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();  // seed, config echo, epoch, history, ...
  DminParams dmin;
  std::optional<LipnParams> lipn;
  std::vector<std::pair<std::string, AdamState>> optimizers;  // keyed "dmin", "lipn"
};

inline constexpr std::uint16_t kCheckpointVersion = 1;

void save_checkpoint(Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Parameters (and LIPN batchnorm buffers) in serialization order.
ParamList checkpoint_tensors(Checkpoint& ckpt);

}  // namespace ahdmil
