#include "ahdmil/datagen.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include "ahdmil/autograd.hpp"
#include "ahdmil/error.hpp"
#include "ahdmil/rng.hpp"

namespace ahdmil {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(LowresMode mode) { return mode == LowresMode::patch ? "patch" : "vector"; }

LowresMode lowres_mode_from_string(const std::string& s) {
  if (s == "patch") return LowresMode::patch;
  if (s == "vector") return LowresMode::vector;
  throw std::invalid_argument("unknown low-res mode '" + s + "' (expected patch|vector)");
}

// ---- Bag ------------------------------------------------------------------

void Bag::validate() const {
  auto fail = [&](const std::string& why) {
    throw DataError(DataErrorKind::invalid, "bag '" + id + "': " + why);
  };
  if (n == 0) fail("N must be at least 1");
  if (dim == 0) fail("feature dimension must be positive");
  if (num_classes < 2) fail("need at least two classes");
  if (label >= num_classes) fail("label out of range");
  if (lowres_mode == LowresMode::vector && dim_lo == 0) fail("vector mode needs D_lo > 0");
  if (lowres_mode == LowresMode::patch && dim_lo != 0) fail("patch mode stores D_lo = 0");
  if (features.size() != std::size_t{n} * dim) fail("feature payload size mismatch");
  if (lowres.size() != std::size_t{n} * lowres_width()) fail("low-res payload size mismatch");
  if (relevance.size() != n) fail("relevance flags size mismatch");
  if (lowres_mode == LowresMode::patch) {
    for (float v : lowres)
      if (!(v >= 0.0f && v <= 1.0f)) fail("pixel value outside [0,1]");
  }
}

Tensor hires_tensor(const Bag& bag) {
  return Tensor({bag.n, bag.dim}, std::vector<double>(bag.features.begin(), bag.features.end()));
}

Tensor hires_rows(const Bag& bag, std::span<const std::size_t> rows) {
  Tensor out({rows.size(), bag.dim});
  auto dst = out.data().begin();
  for (std::size_t r : rows) {
    if (r >= bag.n) throw ShapeError("hires_rows: instance index out of range");
    const auto src = bag.features.begin() + static_cast<std::ptrdiff_t>(r * bag.dim);
    dst = std::copy(src, src + bag.dim, dst);
  }
  return out;
}

Tensor lowres_tensor(const Bag& bag) {
  std::vector<double> v(bag.lowres.begin(), bag.lowres.end());
  if (bag.lowres_mode == LowresMode::patch) {
    return Tensor({bag.n, kPatchChannels, kPatchSide, kPatchSide}, std::move(v));
  }
  return Tensor({bag.n, bag.dim_lo}, std::move(v));
}

// ---- binary I/O -----------------------------------------------------------

namespace {

constexpr char kBagMagic[4] = {'A', 'H', 'D', 'B'};
constexpr std::uint16_t kBagVersion = 1;
constexpr std::size_t kBagHeaderBytes = 4 + 2 + 2 + 2 + 1 + 1 + 4 + 4 + 4;

template <typename U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

template <typename U>
U get_le(const unsigned char* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(p[i]) << (8 * i));
  return v;
}

void put_f32s(std::string& out, const std::vector<float>& values) {
  for (float f : values) put_le(out, std::bit_cast<std::uint32_t>(f));
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(DataErrorKind::missing, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError(DataErrorKind::io, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError(DataErrorKind::io, "short write to " + path.string());
}

}  // namespace

void write_bag(const Bag& bag, const fs::path& path) {
  bag.validate();
  std::string out;
  out.reserve(kBagHeaderBytes + 4 * (bag.features.size() + bag.lowres.size()) + bag.n);
  out.append(kBagMagic, 4);
  put_le<std::uint16_t>(out, kBagVersion);
  put_le<std::uint16_t>(out, bag.label);
  put_le<std::uint16_t>(out, bag.num_classes);
  put_le<std::uint8_t>(out, static_cast<std::uint8_t>(bag.lowres_mode));
  put_le<std::uint8_t>(out, 0);
  put_le<std::uint32_t>(out, bag.n);
  put_le<std::uint32_t>(out, bag.dim);
  put_le<std::uint32_t>(out, bag.dim_lo);
  put_f32s(out, bag.features);
  put_f32s(out, bag.lowres);
  out.append(reinterpret_cast<const char*>(bag.relevance.data()), bag.relevance.size());
  spit(path, out);
}

Bag read_bag(const fs::path& path) {
  const std::string bytes = slurp(path);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::string where = path.string();
  if (bytes.size() < 4 || std::memcmp(p, kBagMagic, 4) != 0) {
    throw DataError(DataErrorKind::bad_magic, "bad magic in " + where);
  }
  if (bytes.size() < kBagHeaderBytes) {
    throw DataError(DataErrorKind::truncated, "truncated header in " + where);
  }
  const auto version = get_le<std::uint16_t>(p + 4);
  if (version != kBagVersion) {
    throw DataError(DataErrorKind::version_mismatch,
                    "version mismatch in " + where + ": file has " + std::to_string(version) +
                        ", reader supports " + std::to_string(kBagVersion));
  }
  Bag bag;
  bag.id = path.stem().string();
  bag.label = get_le<std::uint16_t>(p + 6);
  bag.num_classes = get_le<std::uint16_t>(p + 8);
  const auto mode = p[10];
  if (mode > 1) throw DataError(DataErrorKind::invalid, "unknown low-res mode in " + where);
  bag.lowres_mode = static_cast<LowresMode>(mode);
  bag.n = get_le<std::uint32_t>(p + 12);
  bag.dim = get_le<std::uint32_t>(p + 16);
  bag.dim_lo = get_le<std::uint32_t>(p + 20);

  const std::size_t nf = std::size_t{bag.n} * bag.dim;
  const std::size_t nl = std::size_t{bag.n} * bag.lowres_width();
  const std::size_t need = kBagHeaderBytes + 4 * (nf + nl) + bag.n;
  if (bytes.size() < need) {
    throw DataError(DataErrorKind::truncated, "truncated payload in " + where + ": expected " +
                                                  std::to_string(need) + " bytes, found " +
                                                  std::to_string(bytes.size()));
  }
  const unsigned char* q = p + kBagHeaderBytes;
  auto take = [&q](std::size_t count) {
    std::vector<float> v(count);
    for (auto& f : v) {
      f = std::bit_cast<float>(get_le<std::uint32_t>(q));
      q += 4;
    }
    return v;
  };
  bag.features = take(nf);
  bag.lowres = take(nl);
  bag.relevance.assign(q, q + bag.n);
  bag.validate();
  return bag;
}

// ---- configs and manifest -------------------------------------------------

json GenConfig::to_json() const {
  return json{{"name", name},          {"classes", classes},   {"bags", bags},
              {"n_min", n_min},        {"n_max", n_max},       {"dim", dim},
              {"dim_lo", dim_lo},      {"rho", rho},           {"signal", signal},
              {"noise", noise},        {"pixel_noise", pixel_noise},
              {"lowres", to_string(lowres)},                   {"fixed_test", fixed_test}};
}

GenConfig GenConfig::from_json(const json& j) {
  GenConfig c;
  c.name = j.value("name", c.name);
  c.classes = j.value("classes", c.classes);
  c.bags = j.value("bags", c.bags);
  c.n_min = j.value("n_min", c.n_min);
  c.n_max = j.value("n_max", c.n_max);
  c.dim = j.value("dim", c.dim);
  c.dim_lo = j.value("dim_lo", c.dim_lo);
  c.rho = j.value("rho", c.rho);
  c.signal = j.value("signal", c.signal);
  c.noise = j.value("noise", c.noise);
  c.pixel_noise = j.value("pixel_noise", c.pixel_noise);
  c.lowres = lowres_mode_from_string(j.value("lowres", to_string(c.lowres)));
  c.fixed_test = j.value("fixed_test", c.fixed_test);
  return c;
}

json DatasetManifest::to_json() const {
  json labels_json = json::object();
  for (const auto& [id, y] : labels) labels_json[id] = y;
  return json{{"name", name},
              {"num_classes", num_classes},
              {"dim", dim},
              {"dim_lo", dim_lo},
              {"lowres_mode", to_string(lowres_mode)},
              {"split_mode", split_mode},
              {"splits", {{"train", train}, {"val", val}, {"test", test}}},
              {"labels", labels_json},
              {"generator", generator},
              {"seed", seed}};
}

DatasetManifest DatasetManifest::from_json(const json& j) {
  try {
    DatasetManifest m;
    m.name = j.at("name").get<std::string>();
    m.num_classes = j.at("num_classes").get<std::size_t>();
    m.dim = j.at("dim").get<std::size_t>();
    m.dim_lo = j.at("dim_lo").get<std::size_t>();
    m.lowres_mode = lowres_mode_from_string(j.at("lowres_mode").get<std::string>());
    m.split_mode = j.value("split_mode", std::string("8:1:1"));
    m.train = j.at("splits").at("train").get<std::vector<std::string>>();
    m.val = j.at("splits").at("val").get<std::vector<std::string>>();
    m.test = j.at("splits").at("test").get<std::vector<std::string>>();
    for (const auto& [id, y] : j.at("labels").items()) m.labels[id] = y.get<std::uint16_t>();
    m.generator = j.value("generator", json::object());
    m.seed = j.value("seed", std::uint64_t{0});
    m.validate();
    return m;
  } catch (const json::exception& e) {
    throw DataError(DataErrorKind::invalid, std::string("malformed manifest: ") + e.what());
  }
}

void DatasetManifest::validate() const {
  std::set<std::string> seen;
  for (const auto* split : {&train, &val, &test}) {
    for (const auto& id : *split) {
      if (!seen.insert(id).second) {
        throw DataError(DataErrorKind::invalid, "bag '" + id + "' appears in more than one split");
      }
      if (!labels.contains(id)) {
        throw DataError(DataErrorKind::invalid, "split lists unknown bag '" + id + "'");
      }
    }
  }
  if (seen.size() != labels.size()) {
    throw DataError(DataErrorKind::invalid, "splits do not cover every bag");
  }
}

const Bag& Dataset::bag(const std::string& id) const {
  for (const auto& b : bags)
    if (b.id == id) return b;
  throw DataError(DataErrorKind::missing, "no bag with id '" + id + "'");
}

std::vector<const Bag*> Dataset::split(const std::vector<std::string>& ids) const {
  std::map<std::string, const Bag*> index;
  for (const auto& b : bags) index[b.id] = &b;
  std::vector<const Bag*> out;
  out.reserve(ids.size());
  for (const auto& id : ids) {
    auto it = index.find(id);
    if (it == index.end()) throw DataError(DataErrorKind::missing, "no bag with id '" + id + "'");
    out.push_back(it->second);
  }
  return out;
}

// ---- splitting --------------------------------------------------------------

namespace {

std::map<std::uint16_t, std::vector<std::string>> by_class(
    const std::map<std::string, std::uint16_t>& labels, const std::set<std::string>& exclude) {
  std::map<std::uint16_t, std::vector<std::string>> out;
  for (const auto& [id, y] : labels)
    if (!exclude.contains(id)) out[y].push_back(id);
  return out;
}

std::size_t share(std::size_t n, double frac) {
  auto k = static_cast<std::size_t>(std::llround(static_cast<double>(n) * frac));
  if (k == 0 && n >= 3) k = 1;
  return k;
}

}  // namespace

DatasetManifest resplit(const DatasetManifest& manifest, std::uint64_t seed) {
  DatasetManifest m = manifest;
  Rng rng = Rng(seed).split(0x5b17);
  m.train.clear();
  m.val.clear();
  std::set<std::string> exclude;
  if (m.split_mode == "fixed-test") {
    exclude.insert(m.test.begin(), m.test.end());
  } else {
    m.test.clear();
  }
  for (auto& [label, ids] : by_class(m.labels, exclude)) {
    rng.shuffle(ids);
    std::size_t n_test = 0, n_val;
    if (m.split_mode == "fixed-test") {
      n_val = share(ids.size(), 0.1);
    } else {
      n_val = share(ids.size(), 0.1);
      n_test = share(ids.size(), 0.1);
    }
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (i < n_test) m.test.push_back(ids[i]);
      else if (i < n_test + n_val) m.val.push_back(ids[i]);
      else m.train.push_back(ids[i]);
    }
  }
  std::sort(m.train.begin(), m.train.end());
  std::sort(m.val.begin(), m.val.end());
  std::sort(m.test.begin(), m.test.end());
  m.validate();
  return m;
}

// ---- generation -----------------------------------------------------------

Dataset generate_dataset(const GenConfig& cfg, std::uint64_t seed) {
  if (cfg.classes < 2) throw std::invalid_argument("need at least two classes");
  if (cfg.n_min == 0 || cfg.n_min > cfg.n_max) throw std::invalid_argument("invalid N range");
  if (!(cfg.rho > 0.0 && cfg.rho < 1.0)) throw std::invalid_argument("rho must lie in (0,1)");
  if (cfg.rho * static_cast<double>(cfg.n_min) < 1.0) {
    throw std::invalid_argument("rho * N < 1: bags would hold no relevant instance");
  }
  if (!(cfg.signal > 0.0)) throw std::invalid_argument("signal strength must be positive");
  if (cfg.noise < 0.0 || cfg.pixel_noise < 0.0) throw std::invalid_argument("noise must be >= 0");
  if (cfg.dim < cfg.classes) throw std::invalid_argument("D must be at least the class count");
  if (cfg.lowres == LowresMode::patch && cfg.dim < kPatchChannels) {
    throw std::invalid_argument("patch mode needs D >= 3");
  }
  if (cfg.lowres == LowresMode::vector && (cfg.dim_lo == 0 || cfg.dim_lo > cfg.dim)) {
    throw std::invalid_argument("vector mode needs 0 < D_lo <= D");
  }
  if (cfg.bags < cfg.classes) throw std::invalid_argument("need at least one bag per class");

  const Rng master(seed);
  Dataset data;
  data.bags.reserve(cfg.bags);
  for (std::size_t i = 0; i < cfg.bags; ++i) {
    Rng rng = master.split(i);
    Bag bag;
    {
      char buf[32];
      std::snprintf(buf, sizeof buf, "bag_%04zu", i);
      bag.id = buf;
    }
    bag.label = static_cast<std::uint16_t>(i % cfg.classes);
    bag.num_classes = static_cast<std::uint16_t>(cfg.classes);
    bag.lowres_mode = cfg.lowres;
    bag.n = static_cast<std::uint32_t>(cfg.n_min + rng.below(cfg.n_max - cfg.n_min + 1));
    bag.dim = static_cast<std::uint32_t>(cfg.dim);
    bag.dim_lo = cfg.lowres == LowresMode::vector ? static_cast<std::uint32_t>(cfg.dim_lo) : 0;

    const auto relevant =
        static_cast<std::size_t>(std::ceil(cfg.rho * static_cast<double>(bag.n)));
    std::vector<std::size_t> order(bag.n);
    for (std::size_t j = 0; j < bag.n; ++j) order[j] = j;
    rng.shuffle(order);
    bag.relevance.assign(bag.n, 0);
    for (std::size_t j = 0; j < relevant; ++j) bag.relevance[order[j]] = 1;

    bag.features.resize(std::size_t{bag.n} * bag.dim);
    for (std::size_t j = 0; j < bag.n; ++j) {
      for (std::size_t d = 0; d < bag.dim; ++d) {
        double x = cfg.noise * rng.normal();
        if (bag.relevance[j] && d == bag.label) x += cfg.signal;
        bag.features[j * bag.dim + d] = static_cast<float>(x);
      }
    }

    bag.lowres.resize(std::size_t{bag.n} * bag.lowres_width());
    for (std::size_t j = 0; j < bag.n; ++j) {
      const float* x = bag.features.data() + j * bag.dim;
      if (cfg.lowres == LowresMode::patch) {
        float* px = bag.lowres.data() + j * kPatchValues;
        for (std::size_t ch = 0; ch < kPatchChannels; ++ch) {
          const double intensity = ag::stable_sigmoid(x[ch]);
          for (std::size_t k = 0; k < kPatchSide * kPatchSide; ++k) {
            const double v = intensity + cfg.pixel_noise * rng.normal();
            px[ch * kPatchSide * kPatchSide + k] = static_cast<float>(std::clamp(v, 0.0, 1.0));
          }
        }
      } else {
        float* lo = bag.lowres.data() + j * bag.dim_lo;
        for (std::size_t d = 0; d < bag.dim_lo; ++d) {
          lo[d] = static_cast<float>(x[d] + cfg.pixel_noise * rng.normal());
        }
      }
    }
    bag.validate();
    data.bags.push_back(std::move(bag));
  }

  DatasetManifest& m = data.manifest;
  m.name = cfg.name;
  m.num_classes = cfg.classes;
  m.dim = cfg.dim;
  m.dim_lo = cfg.lowres == LowresMode::vector ? cfg.dim_lo : 0;
  m.lowres_mode = cfg.lowres;
  m.generator = cfg.to_json();
  m.seed = seed;
  for (const auto& b : data.bags) m.labels[b.id] = b.label;
  if (cfg.fixed_test) {
    // Carve the fixed test set once; resplit() only reshuffles train/val.
    m.split_mode = "8:1:1";
    DatasetManifest tmp = resplit(m, seed);
    m.split_mode = "fixed-test";
    m.test = tmp.test;
  } else {
    m.split_mode = "8:1:1";
  }
  data.manifest = resplit(m, seed);
  return data;
}

void save_dataset(const Dataset& data, const fs::path& dir) {
  fs::create_directories(dir / "bags");
  for (const auto& b : data.bags) write_bag(b, dir / "bags" / (b.id + ".ahdb"));
  spit(dir / "manifest.json", data.manifest.to_json().dump(2) + "\n");
}

Dataset load_dataset(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.json";
  if (!fs::exists(mpath)) throw DataError(DataErrorKind::missing, "missing manifest " + mpath.string());
  json j;
  try {
    j = json::parse(slurp(mpath));
  } catch (const json::exception& e) {
    throw DataError(DataErrorKind::invalid, "manifest is not valid JSON: " + std::string(e.what()));
  }
  Dataset data;
  data.manifest = DatasetManifest::from_json(j);
  for (const auto& [id, label] : data.manifest.labels) {
    Bag b = read_bag(dir / "bags" / (id + ".ahdb"));
    if (b.label != label) {
      throw DataError(DataErrorKind::invalid, "label of bag '" + id + "' disagrees with manifest");
    }
    if (b.dim != data.manifest.dim || b.lowres_mode != data.manifest.lowres_mode ||
        b.num_classes != data.manifest.num_classes) {
      throw DataError(DataErrorKind::invalid, "bag '" + id + "' disagrees with manifest layout");
    }
    data.bags.push_back(std::move(b));
  }
  return data;
}

// ---- ingestion ------------------------------------------------------------

std::pair<Shape, std::vector<float>> read_npy(const fs::path& path) {
  const std::string bytes = slurp(path);
  const std::string where = path.string();
  if (bytes.size() < 10 || bytes.compare(0, 6, "\x93NUMPY") != 0) {
    throw DataError(DataErrorKind::bad_magic, "not an .npy file: " + where);
  }
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const int major = p[6];
  std::size_t header_len, offset;
  if (major == 1) {
    header_len = get_le<std::uint16_t>(p + 8);
    offset = 10;
  } else {
    if (bytes.size() < 12) throw DataError(DataErrorKind::truncated, "truncated .npy: " + where);
    header_len = get_le<std::uint32_t>(p + 8);
    offset = 12;
  }
  if (bytes.size() < offset + header_len) {
    throw DataError(DataErrorKind::truncated, "truncated .npy header: " + where);
  }
  const std::string header = bytes.substr(offset, header_len);
  const bool f4 = header.find("'<f4'") != std::string::npos;
  const bool f8 = header.find("'<f8'") != std::string::npos;
  if (!f4 && !f8) throw DataError(DataErrorKind::invalid, "unsupported .npy dtype in " + where);
  if (header.find("'fortran_order': True") != std::string::npos) {
    throw DataError(DataErrorKind::invalid, "Fortran-ordered .npy not supported: " + where);
  }
  const auto lp = header.find('(', header.find("'shape'"));
  const auto rp = header.find(')', lp);
  Shape shape;
  std::stringstream ss(header.substr(lp + 1, rp - lp - 1));
  for (std::string tok; std::getline(ss, tok, ',');) {
    if (tok.find_first_not_of(" ") == std::string::npos) continue;
    shape.push_back(static_cast<std::size_t>(std::stoull(tok)));
  }
  const std::size_t count = shape_size(shape);
  const std::size_t width = f4 ? 4 : 8;
  const std::size_t start = offset + header_len;
  if (bytes.size() < start + count * width) {
    throw DataError(DataErrorKind::truncated, "truncated .npy payload: " + where);
  }
  std::vector<float> values(count);
  for (std::size_t i = 0; i < count; ++i) {
    const unsigned char* q = p + start + i * width;
    values[i] = f4 ? std::bit_cast<float>(get_le<std::uint32_t>(q))
                   : static_cast<float>(std::bit_cast<double>(get_le<std::uint64_t>(q)));
  }
  return {shape, values};
}

Bag make_ingested_bag(std::string id, std::uint16_t label, std::uint16_t num_classes,
                      const Shape& hires_shape, std::vector<float> hires, const Shape& lowres_shape,
                      std::vector<float> lowres) {
  if (hires_shape.size() != 2) throw DataError(DataErrorKind::invalid, "hi-res features must be N x D");
  Bag bag;
  bag.id = std::move(id);
  bag.label = label;
  bag.num_classes = num_classes;
  bag.n = static_cast<std::uint32_t>(hires_shape[0]);
  bag.dim = static_cast<std::uint32_t>(hires_shape[1]);
  if (lowres_shape.empty() || lowres_shape[0] != hires_shape[0]) {
    throw DataError(DataErrorKind::invalid, "hi-res and low-res arrays need the same N");
  }
  if (lowres_shape == Shape{hires_shape[0], kPatchChannels, kPatchSide, kPatchSide}) {
    bag.lowres_mode = LowresMode::patch;
    bag.dim_lo = 0;
  } else if (lowres_shape.size() == 2) {
    bag.lowres_mode = LowresMode::vector;
    bag.dim_lo = static_cast<std::uint32_t>(lowres_shape[1]);
  } else {
    throw DataError(DataErrorKind::invalid, "low-res array must be N x 3 x 16 x 16 or N x D_lo");
  }
  bag.features = std::move(hires);
  bag.lowres = std::move(lowres);
  bag.relevance.assign(bag.n, kRelevanceUnknown);
  bag.validate();
  return bag;
}

}  // namespace ahdmil
