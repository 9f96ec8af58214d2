#include "ahdmil/config.hpp"

#include <stdexcept>

namespace ahdmil {

using nlohmann::json;

namespace {

// One entry per key keeps to_json and from_json in lockstep.
template <typename F>
void for_each_field(RunConfig& c, F&& f) {
  f("seed", c.seed);
  f("q", c.q);
  f("h", c.h);
  f("k", c.k);
  f("tau", c.tau);
  f("gamma", c.gamma);
  f("r", c.r);
  f("alpha", c.alpha);
  f("k_clu", c.k_clu);
  f("p", c.p);
  f("lambda", c.lambda);
  f("beta", c.beta);
  f("dual_branch", c.dual_branch);
  f("cbema", c.cbema);
  f("lr_sd", c.lr_sd);
  f("lr_ad", c.lr_ad);
  f("lr_lipn", c.lr_lipn);
  f("sd_epochs", c.sd_epochs);
  f("ad_epochs", c.ad_epochs);
  f("patience", c.patience);
  f("data", c.data);
  f("out", c.out);
}

}  // namespace

void RunConfig::validate() const {
  dmin(1, 2).validate();
  lipn(LowresMode::vector, 1, 2).validate();
  if (!(lr_sd > 0.0 && lr_ad > 0.0 && lr_lipn > 0.0)) {
    throw std::invalid_argument("learning rates must be positive");
  }
}

json RunConfig::to_json() const {
  json j = json::object();
  RunConfig copy = *this;
  for_each_field(copy, [&j](const char* key, auto& v) { j[key] = v; });
  return j;
}

RunConfig RunConfig::from_json(const json& j, const RunConfig& base) {
  if (!j.is_object()) throw std::invalid_argument("config must be a JSON object");
  RunConfig c = base;
  std::size_t known = 0;
  for_each_field(c, [&](const char* key, auto& v) {
    if (!j.contains(key)) return;
    ++known;
    try {
      j.at(key).get_to(v);
    } catch (const json::exception& e) {
      throw std::invalid_argument(std::string("config key '") + key + "': " + e.what());
    }
  });
  if (known != j.size()) {
    RunConfig probe;
    std::string unknown;
    for (const auto& [key, _] : j.items()) {
      bool ok = false;
      for_each_field(probe, [&](const char* k, auto&) { ok = ok || key == k; });
      if (!ok) unknown += (unknown.empty() ? "" : ", ") + key;
    }
    throw std::invalid_argument("unknown config key(s): " + unknown);
  }
  c.validate();
  return c;
}

DminConfig RunConfig::dmin(std::size_t dim_in, std::size_t classes) const {
  DminConfig d;
  d.dim_in = dim_in;
  d.q = q;
  d.h = h;
  d.classes = classes;
  d.k = k;
  d.tau = tau;
  d.gamma = gamma;
  d.r = r;
  d.alpha = alpha;
  d.k_clu = k_clu;
  return d;
}

LipnConfig RunConfig::lipn(LowresMode mode, std::size_t dim_lo, std::size_t classes) const {
  LipnConfig l;
  l.mode = mode;
  l.dim_lo = dim_lo;
  l.classes = classes;
  l.gamma = gamma;
  l.r = r;
  l.lambda = lambda;
  l.p = p;
  l.beta = beta;
  l.dual_branch = dual_branch;
  l.cbema = cbema;
  return l;
}

std::string build_id() {
#ifdef AHDMIL_BUILD_ID
  return AHDMIL_BUILD_ID;
#else
  return "unknown";
#endif
}

}  // namespace ahdmil
