#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ahdmil/tensor.hpp"

namespace ahdmil {

enum class LowresMode : std::uint8_t { vector = 0, patch = 1 };

inline constexpr std::size_t kPatchChannels = 3;
inline constexpr std::size_t kPatchSide = 16;
inline constexpr std::size_t kPatchValues = kPatchChannels * kPatchSide * kPatchSide;
inline constexpr std::uint8_t kRelevanceUnknown = 255;

std::string to_string(LowresMode mode);
LowresMode lowres_mode_from_string(const std::string& s);

/// One slide: N paired instances, hi-res feature rows plus their low-res
/// counterparts. Values are stored at file precision (f32).
///
/// `relevance` is generator ground truth (1 = carries the class signal,
/// 255 = unknown). It exists for diagnostics only; nothing under training or
/// inference reads it.
struct Bag {
  std::string id;
  std::uint16_t label = 0;
  std::uint16_t num_classes = 2;
  LowresMode lowres_mode = LowresMode::patch;
  std::uint32_t n = 0;
  std::uint32_t dim = 0;
  std::uint32_t dim_lo = 0;  // vector width; 0 in patch mode
  std::vector<float> features;
  std::vector<float> lowres;
  std::vector<std::uint8_t> relevance;

  std::size_t lowres_width() const {
    return lowres_mode == LowresMode::patch ? kPatchValues : dim_lo;
  }
  /// Throws DataError(invalid) when a structural invariant is violated.
  void validate() const;

  friend bool operator==(const Bag&, const Bag&) = default;
};

/// N x D hi-res feature matrix in double precision.
Tensor hires_tensor(const Bag& bag);
/// Hi-res rows for the given instance indices only.
Tensor hires_rows(const Bag& bag, std::span<const std::size_t> rows);
/// N x 3 x 16 x 16 (patch mode) or N x D_lo (vector mode).
Tensor lowres_tensor(const Bag& bag);

void write_bag(const Bag& bag, const std::filesystem::path& path);
/// The bag id is taken from the file stem.
Bag read_bag(const std::filesystem::path& path);

struct GenConfig {
  std::string name = "synthetic";
  std::size_t classes = 2;
  std::size_t bags = 200;
  std::size_t n_min = 128;
  std::size_t n_max = 512;
  std::size_t dim = 64;
  std::size_t dim_lo = 16;
  double rho = 0.1;          // relevant fraction per bag
  double signal = 3.0;       // class-mean scale s
  double noise = 0.5;        // feature noise sigma
  double pixel_noise = 0.05; // i.i.d. noise added to low-res values
  LowresMode lowres = LowresMode::patch;
  bool fixed_test = false;   // keep one test split across resplits

  nlohmann::json to_json() const;
  static GenConfig from_json(const nlohmann::json& j);
};

struct DatasetManifest {
  std::string name;
  std::size_t num_classes = 2;
  std::size_t dim = 0;
  std::size_t dim_lo = 0;
  LowresMode lowres_mode = LowresMode::patch;
  std::string split_mode = "8:1:1";  // or "fixed-test"
  std::vector<std::string> train, val, test;
  std::map<std::string, std::uint16_t> labels;
  nlohmann::json generator;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static DatasetManifest from_json(const nlohmann::json& j);
  /// Throws DataError(invalid) unless splits are disjoint and cover `labels`.
  void validate() const;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<Bag> bags;

  const Bag& bag(const std::string& id) const;
  std::vector<const Bag*> split(const std::vector<std::string>& ids) const;
};

/// Each class-c bag holds ceil(rho*N) instances drawn around signal*e_c and
/// the rest around the origin, all with isotropic noise. Low-res patches
/// paint sigmoid(x_0..x_2) as the three channel intensities plus pixel noise.
Dataset generate_dataset(const GenConfig& config, std::uint64_t seed);

/// Stratified train/val/test split of `labels`. In "8:1:1" mode all bags are
/// reshuffled 8:1:1; in "fixed-test" mode `manifest.test` is kept and the rest
/// is split 9:1 into train/val.
DatasetManifest resplit(const DatasetManifest& manifest, std::uint64_t seed);

void save_dataset(const Dataset& data, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

/// Reads a 2-D or 4-D little-endian float32/float64 C-order .npy array.
std::pair<Shape, std::vector<float>> read_npy(const std::filesystem::path& path);

/// Wraps externally precomputed features as a bag with unknown relevance.
/// `lowres` must be N x 3 x 16 x 16 (patch mode) or N x D_lo (vector mode).
Bag make_ingested_bag(std::string id, std::uint16_t label, std::uint16_t num_classes,
                      const Shape& hires_shape, std::vector<float> hires,
                      const Shape& lowres_shape, std::vector<float> lowres);

}  // namespace ahdmil
