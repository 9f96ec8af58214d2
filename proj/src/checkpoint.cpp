#include "ahdmil/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "ahdmil/error.hpp"

namespace ahdmil {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'A', 'H', 'C', 'K'};

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

struct Block {
  std::string name;
  Shape shape;
  std::span<double> data;
};

// Parameters first, then optimizer moments aligned with their parameter lists.
std::vector<Block> blocks(Checkpoint& ck) {
  std::vector<Block> out;
  for (auto& nt : checkpoint_tensors(ck)) out.push_back({nt.name, nt.tensor->shape(), nt.tensor->data()});
  for (auto& [key, st] : ck.optimizers) {
    ParamList params = key == "lipn" && ck.lipn ? ck.lipn->params() : ck.dmin.params();
    if (st.m.empty()) continue;
    if (st.m.size() != params.size()) throw std::logic_error("optimizer state does not match parameters");
    for (std::size_t i = 0; i < params.size(); ++i) {
      out.push_back({"adam." + key + ".m." + params[i].name, params[i].tensor->shape(), st.m[i]});
      out.push_back({"adam." + key + ".v." + params[i].name, params[i].tensor->shape(), st.v[i]});
    }
  }
  return out;
}

}  // namespace

ParamList checkpoint_tensors(Checkpoint& ck) {
  ParamList out = ck.dmin.params();
  if (ck.lipn) {
    for (auto& nt : ck.lipn->params()) out.push_back(nt);
    for (auto& nt : ck.lipn->buffers()) out.push_back(nt);
  }
  return out;
}

void save_checkpoint(Checkpoint& ck, const fs::path& path) {
  json header;
  header["meta"] = ck.meta;
  header["dmin_config"] = ck.dmin.cfg.to_json();
  if (ck.lipn) header["lipn_config"] = ck.lipn->cfg.to_json();
  json opts = json::array();
  for (const auto& [key, st] : ck.optimizers) {
    opts.push_back({{"key", key},   {"lr", st.lr},   {"beta1", st.beta1}, {"beta2", st.beta2},
                    {"eps", st.eps}, {"step", st.step}, {"has_moments", !st.m.empty()}});
  }
  header["optimizers"] = opts;
  const auto bl = blocks(ck);
  json tensors = json::array();
  for (const auto& b : bl) tensors.push_back({{"name", b.name}, {"shape", b.shape}});
  header["tensors"] = tensors;

  const std::string text = header.dump();
  std::string out;
  out.append(kMagic, 4);
  put_le<std::uint16_t>(out, kCheckpointVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  for (const auto& b : bl)
    for (double v : b.data) put_le(out, std::bit_cast<std::uint64_t>(v));

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError(DataErrorKind::io, "cannot write " + tmp.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw DataError(DataErrorKind::io, "short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError(DataErrorKind::missing, "cannot open checkpoint " + path.string());
  const std::string bytes{std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::string where = path.string();
  if (bytes.size() < 4 || std::memcmp(p, kMagic, 4) != 0) {
    throw DataError(DataErrorKind::bad_magic, "not a checkpoint (bad magic): " + where);
  }
  if (bytes.size() < 10) throw DataError(DataErrorKind::truncated, "truncated checkpoint: " + where);
  const auto version = get_le<std::uint16_t>(p + 4);
  if (version != kCheckpointVersion) {
    throw DataError(DataErrorKind::version_mismatch,
                    "checkpoint version " + std::to_string(version) + " not supported: " + where);
  }
  const auto hlen = get_le<std::uint32_t>(p + 6);
  if (bytes.size() < 10 + std::size_t{hlen}) {
    throw DataError(DataErrorKind::truncated, "truncated checkpoint header: " + where);
  }
  Checkpoint ck;
  json header;
  try {
    header = json::parse(bytes.substr(10, hlen));
    ck.meta = header.at("meta");
    ck.dmin = DminParams::init(DminConfig::from_json(header.at("dmin_config")), 0);
    if (header.contains("lipn_config")) {
      ck.lipn = LipnParams::init(LipnConfig::from_json(header.at("lipn_config")), 0);
    }
    for (const auto& o : header.at("optimizers")) {
      AdamState st(o.at("lr").get<double>());
      st.beta1 = o.at("beta1").get<double>();
      st.beta2 = o.at("beta2").get<double>();
      st.eps = o.at("eps").get<double>();
      st.step = o.at("step").get<std::uint64_t>();
      const std::string key = o.at("key").get<std::string>();
      if (o.at("has_moments").get<bool>()) {
        ParamList params = key == "lipn" && ck.lipn ? ck.lipn->params() : ck.dmin.params();
        for (const auto& nt : params) {
          st.m.emplace_back(nt.tensor->size(), 0.0);
          st.v.emplace_back(nt.tensor->size(), 0.0);
        }
      }
      ck.optimizers.emplace_back(key, std::move(st));
    }
  } catch (const json::exception& e) {
    throw DataError(DataErrorKind::invalid, "malformed checkpoint header in " + where + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw DataError(DataErrorKind::invalid, "checkpoint " + where + " holds an invalid config: " + e.what());
  }

  const auto bl = blocks(ck);
  const json& declared = header.at("tensors");
  if (declared.size() != bl.size()) {
    throw DataError(DataErrorKind::invalid, "checkpoint tensor list does not match its configs: " + where);
  }
  std::size_t need = 10 + hlen;
  for (const auto& b : bl) need += 8 * b.data.size();
  if (bytes.size() < need) throw DataError(DataErrorKind::truncated, "truncated checkpoint payload: " + where);
  const unsigned char* q = p + 10 + hlen;
  for (std::size_t i = 0; i < bl.size(); ++i) {
    if (declared[i].at("name").get<std::string>() != bl[i].name ||
        declared[i].at("shape").get<Shape>() != bl[i].shape) {
      throw DataError(DataErrorKind::invalid, "checkpoint tensor '" + bl[i].name + "' mismatch in " + where);
    }
    for (double& v : bl[i].data) {
      v = std::bit_cast<double>(get_le<std::uint64_t>(q));
      q += 8;
    }
  }
  return ck;
}

}  // namespace ahdmil
