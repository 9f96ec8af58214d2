// ahdmil: data generation, SD/AD training, inference, evaluation and sweeps.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <thread>

#include "ahdmil/checkpoint.hpp"
#include "ahdmil/config.hpp"
#include "ahdmil/datagen.hpp"
#include "ahdmil/error.hpp"
#include "ahdmil/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ahdmil;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError(DataErrorKind::io, "cannot write " + path.string());
  f << text;
}

json read_json(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw DataError(DataErrorKind::missing, "cannot open " + path.string());
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw DataError(DataErrorKind::invalid, path.string() + ": " + e.what());
  }
}

// ---- run configuration ----------------------------------------------------

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<double> p, lambda, r, lr_sd, lr_ad, lr_lipn;
  std::optional<std::size_t> k, q, h, sd_epochs, ad_epochs, patience;
  std::optional<bool> dual_branch, cbema;

  void attach(CLI::App* app) {
    app->add_option("--seed", seed, "Master seed");
    app->add_option("--p", p, "Soft-mode probability");
    app->add_option("--lambda", lambda, "CBEMA mixing ratio");
    app->add_option("--r", r, "Target retention ratio");
    app->add_option("--K", k, "Chebyshev degree");
    app->add_option("--Q", q, "Projected feature width");
    app->add_option("--H", h, "Attention hidden width");
    app->add_option("--lr-sd", lr_sd, "SD learning rate");
    app->add_option("--lr-ad", lr_ad, "AD DMIN fine-tuning learning rate");
    app->add_option("--lr-lipn", lr_lipn, "LIPN learning rate");
    app->add_option("--sd-epochs", sd_epochs, "SD epochs");
    app->add_option("--ad-epochs", ad_epochs, "AD epochs");
    app->add_option("--patience", patience, "Early-stopping patience (epochs)");
    app->add_option("--dual-branch", dual_branch, "Use both LIPN branches (true|false)");
    app->add_option("--cbema", cbema, "Apply CBEMA at epoch ends (true|false)");
  }

  void apply(RunConfig& c) const {
    if (seed) c.seed = *seed;
    if (p) c.p = *p;
    if (lambda) c.lambda = *lambda;
    if (r) c.r = *r;
    if (k) c.k = *k;
    if (q) c.q = *q;
    if (h) c.h = *h;
    if (lr_sd) c.lr_sd = *lr_sd;
    if (lr_ad) c.lr_ad = *lr_ad;
    if (lr_lipn) c.lr_lipn = *lr_lipn;
    if (sd_epochs) c.sd_epochs = *sd_epochs;
    if (ad_epochs) c.ad_epochs = *ad_epochs;
    if (patience) c.patience = *patience;
    if (dual_branch) c.dual_branch = *dual_branch;
    if (cbema) c.cbema = *cbema;
  }
};

RunConfig resolve_config(const std::string& config_path, const Overrides& ov, const std::string& data,
                         const std::string& out) {
  RunConfig c;
  if (!config_path.empty()) {
    try {
      c = RunConfig::from_json(read_json(config_path));
    } catch (const std::invalid_argument& e) {
      throw UsageError(config_path + ": " + e.what());
    }
  }
  ov.apply(c);
  if (!data.empty()) c.data = data;
  if (!out.empty()) c.out = out;
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  return c;
}

void stamp_run_dir(const RunConfig& c) {
  fs::create_directories(c.out);
  write_text(fs::path(c.out) / "config.json", c.to_json().dump(2) + "\n");
  write_text(fs::path(c.out) / "seed", std::to_string(c.seed) + "\n");
  write_text(fs::path(c.out) / "build_id", build_id() + "\n");
}

LogFn jsonl_logger(const fs::path& path, bool echo) {
  auto f = std::make_shared<std::ofstream>(path, std::ios::trunc);
  if (!*f) throw DataError(DataErrorKind::io, "cannot write " + path.string());
  return [f, echo](const json& j) {
    *f << j.dump() << "\n";
    f->flush();
    if (echo) std::cerr << j.dump() << "\n";
  };
}

Dataset load_data(const std::string& dir) {
  if (dir.empty()) throw UsageError("--data is required");
  return load_dataset(dir);
}

// ---- reports ----------------------------------------------------------------

std::vector<std::string> split_ids(const Dataset& d, const std::string& split) {
  if (split == "train") return d.manifest.train;
  if (split == "val") return d.manifest.val;
  if (split == "test") return d.manifest.test;
  if (split == "all") {
    std::vector<std::string> ids;
    for (const auto& [id, _] : d.manifest.labels) ids.push_back(id);
    return ids;
  }
  throw UsageError("unknown split '" + split + "' (expected train|val|test|all)");
}

std::string calibration_csv(const metrics::MetricsReport& r) {
  std::ostringstream s;
  s.precision(17);
  s << "bin_lo,bin_hi,mean_conf,obs_freq,count\n";
  for (const auto& b : r.calibration) {
    s << b.lo << "," << b.hi << ",";
    if (b.mean_conf) s << *b.mean_conf;
    s << ",";
    if (b.obs_freq) s << *b.obs_freq;
    s << "," << b.count << "\n";
  }
  return s.str();
}

std::string timing_csv(const std::vector<InferenceTrace>& traces) {
  std::ostringstream s;
  s.precision(9);
  s << "bag_id,t_lowres,t_select,t_feat,t_model,kept,n\n";
  for (const auto& t : traces) {
    s << t.bag_id << "," << t.t_lowres << "," << t.t_select << "," << t.t_feat << "," << t.t_model
      << "," << t.kept << "," << t.n << "\n";
  }
  return s.str();
}

json trace_json(const InferenceTrace& t) {
  return {{"bag_id", t.bag_id},   {"n", t.n},
          {"kept", t.kept},       {"retention", t.retention},
          {"fallback", t.fallback}, {"probs", t.probs},
          {"pred", t.pred},       {"t_lowres", t.t_lowres},
          {"t_select", t.t_select}, {"t_feat", t.t_feat},
          {"t_model", t.t_model}};
}

fs::path sibling(const fs::path& report, const std::string& suffix) {
  return report.parent_path() / (report.stem().string() + suffix);
}

// ---- commands -------------------------------------------------------------

struct GenArgs {
  std::string out;
  std::uint64_t seed = 7;
  GenConfig cfg;
  std::string n_range = "128:512";
  std::string lowres = "patch";
  bool force = false;
};

int cmd_gen(GenArgs& a) {
  const auto colon = a.n_range.find(':');
  if (colon == std::string::npos) throw UsageError("--n-range must look like MIN:MAX");
  try {
    a.cfg.n_min = std::stoul(a.n_range.substr(0, colon));
    a.cfg.n_max = std::stoul(a.n_range.substr(colon + 1));
    a.cfg.lowres = lowres_mode_from_string(a.lowres);
  } catch (const std::exception& e) {
    throw UsageError(std::string("bad generator flag: ") + e.what());
  }
  const fs::path out(a.out);
  if (fs::exists(out) && !fs::is_empty(out)) {
    if (!a.force) throw UsageError(a.out + " exists and is not empty (use --force)");
    fs::remove_all(out);
  }
  Dataset d;
  try {
    d = generate_dataset(a.cfg, a.seed);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  save_dataset(d, out);
  std::cout << json{{"out", a.out},
                    {"bags", d.bags.size()},
                    {"train", d.manifest.train.size()},
                    {"val", d.manifest.val.size()},
                    {"test", d.manifest.test.size()}}
                   .dump()
            << "\n";
  return 0;
}

struct TrainArgs {
  std::string data, config, out, sd_ckpt;
  bool verbose = false;
  Overrides ov;
};

int cmd_train_sd(TrainArgs& a) {
  if (a.out.empty()) throw UsageError("--out is required");
  const RunConfig cfg = resolve_config(a.config, a.ov, a.data, a.out);
  const Dataset d = load_data(cfg.data);
  stamp_run_dir(cfg);
  SdResult res = train_sd(d, cfg, jsonl_logger(fs::path(cfg.out) / "sd_log.jsonl", a.verbose));
  save_checkpoint(res.ckpt, fs::path(cfg.out) / "sd.ckpt");
  std::cout << json{{"checkpoint", (fs::path(cfg.out) / "sd.ckpt").string()},
                    {"best_epoch", res.ckpt.meta["epoch"]},
                    {"val", res.ckpt.meta["val"]},
                    {"train_retention", res.targets.mean_retention()}}
                   .dump()
            << "\n";
  return 0;
}

int cmd_train_ad(TrainArgs& a) {
  if (a.out.empty()) throw UsageError("--out is required");
  const RunConfig cfg = resolve_config(a.config, a.ov, a.data, a.out);
  const Dataset d = load_data(cfg.data);
  const fs::path sd_path = a.sd_ckpt.empty() ? fs::path(cfg.out) / "sd.ckpt" : fs::path(a.sd_ckpt);
  const Checkpoint sd = load_checkpoint(sd_path);
  stamp_run_dir(cfg);
  Checkpoint ck = train_ad(d, sd, cfg, jsonl_logger(fs::path(cfg.out) / "ad_log.jsonl", a.verbose));
  save_checkpoint(ck, fs::path(cfg.out) / "ad.ckpt");
  std::cout << json{{"checkpoint", (fs::path(cfg.out) / "ad.ckpt").string()},
                    {"best_epoch", ck.meta["epoch"]},
                    {"val", ck.meta["val"]},
                    {"soft_iterations", ck.meta["soft_iterations"]},
                    {"iterations", ck.meta["iterations"]}}
                   .dump()
            << "\n";
  return 0;
}

struct EvalArgs {
  std::string data, ckpt, split = "test", mode = "student-pruned", report, compare;
};

EvalMode parse_mode(const std::string& s) {
  try {
    return eval_mode_from_string(s);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

int cmd_eval(EvalArgs& a) {
  const Dataset d = load_data(a.data);
  Checkpoint ck = load_checkpoint(a.ckpt);
  const EvalMode mode = parse_mode(a.mode);
  if (mode == EvalMode::student_pruned && !ck.lipn) {
    throw UsageError("mode student-pruned needs a checkpoint from train-ad");
  }
  const auto bags = d.split(split_ids(d, a.split));
  if (bags.empty()) throw UsageError("split '" + a.split + "' is empty");
  const Evaluation ev = evaluate(bags, ck, mode);
  json report = ev.report.to_json();
  report["mode"] = a.mode;
  report["split"] = a.split;
  if (!a.compare.empty()) {
    const EvalMode other = parse_mode(a.compare);
    if (other == EvalMode::student_pruned && !ck.lipn) {
      throw UsageError("mode student-pruned needs a checkpoint from train-ad");
    }
    const Evaluation ev2 = evaluate(bags, ck, other);
    const auto tt = metrics::paired_t_test(ev.correct, ev2.correct);
    report["paired_t_test"] = {{"against", a.compare}, {"statistic", "per-bag correctness"},
                               {"t", std::isfinite(tt.t) ? json(tt.t) : json(nullptr)},
                               {"p", tt.p}, {"dof", tt.dof}};
  }
  const std::string text = report.dump(2) + "\n";
  if (a.report.empty()) {
    std::cout << text;
  } else {
    const fs::path rp(a.report);
    write_text(rp, text);
    write_text(sibling(rp, "_calibration.csv"), calibration_csv(ev.report));
    write_text(sibling(rp, "_timing.csv"), timing_csv(ev.traces));
  }
  return 0;
}

int cmd_infer(EvalArgs& a, const std::string& bag_id) {
  const Dataset d = load_data(a.data);
  Checkpoint ck = load_checkpoint(a.ckpt);
  const EvalMode mode = parse_mode(a.mode);
  if (mode == EvalMode::student_pruned && !ck.lipn) {
    throw UsageError("mode student-pruned needs a checkpoint from train-ad");
  }
  const std::vector<const Bag*> bags =
      bag_id.empty() ? d.split(split_ids(d, a.split)) : std::vector<const Bag*>{&d.bag(bag_id)};
  std::ostringstream lines;
  std::vector<InferenceTrace> traces;
  for (const Bag* b : bags) {
    traces.push_back(mode == EvalMode::teacher_full ? infer_full(*b, ck.dmin) : infer(*b, ck));
    lines << trace_json(traces.back()).dump() << "\n";
  }
  if (a.report.empty()) {
    std::cout << lines.str();
  } else {
    write_text(a.report, lines.str());
    write_text(sibling(a.report, "_timing.csv"), timing_csv(traces));
  }
  return 0;
}

// ---- sweep ------------------------------------------------------------------

struct SweepArgs {
  std::string data, config, out, param, values, seeds = "7", csv;
  Overrides ov;
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string tok; std::getline(ss, tok, ',');)
    if (!tok.empty()) out.push_back(tok);
  return out;
}

std::set<std::string> existing_keys(const fs::path& csv) {
  std::set<std::string> keys;
  std::ifstream f(csv);
  std::string line;
  std::getline(f, line);  // header
  while (std::getline(f, line)) {
    std::stringstream ss(line);
    std::string p, v, s;
    std::getline(ss, p, ',');
    std::getline(ss, v, ',');
    std::getline(ss, s, ',');
    keys.insert(p + "," + v + "," + s);
  }
  return keys;
}

int cmd_sweep(SweepArgs& a) {
  static const std::set<std::string> params{"p", "K", "r", "lambda"};
  if (!params.contains(a.param)) throw UsageError("--param must be one of p|K|r|lambda");
  const auto values = split_list(a.values);
  const auto seeds = split_list(a.seeds);
  if (values.empty()) throw UsageError("--values is empty");
  if (seeds.empty()) throw UsageError("--seeds is empty");
  if (a.out.empty()) throw UsageError("--out is required");
  const RunConfig base = resolve_config(a.config, a.ov, a.data, a.out);
  const Dataset d = load_data(base.data);
  fs::create_directories(base.out);
  const fs::path csv = a.csv.empty() ? fs::path(base.out) / "sweep.csv" : fs::path(a.csv);
  const std::set<std::string> done = existing_keys(csv);
  if (!fs::exists(csv)) write_text(csv, "param,value,seed,auc,acc,f1,brier,retention\n");

  struct Cell {
    std::string value, seed;
  };
  std::vector<Cell> cells;
  for (const auto& s : seeds)
    for (const auto& v : values)
      if (!done.contains(a.param + "," + v + "," + s)) cells.push_back({v, s});

  std::mutex mu;
  std::size_t next = 0;
  std::exception_ptr failure;
  auto worker = [&] {
    for (;;) {
      Cell cell;
      {
        std::lock_guard lock(mu);
        if (next >= cells.size() || failure) return;
        cell = cells[next++];
      }
      try {
        RunConfig c = base;
        c.seed = std::stoull(cell.seed);
        const double v = std::stod(cell.value);
        if (a.param == "p") c.p = v;
        if (a.param == "lambda") c.lambda = v;
        if (a.param == "r") c.r = v;
        if (a.param == "K") c.k = static_cast<std::size_t>(v);
        c.out = (fs::path(base.out) / (a.param + "=" + cell.value) / ("seed=" + cell.seed)).string();
        c.validate();
        Dataset ds = d;
        ds.manifest = resplit(d.manifest, c.seed);
        stamp_run_dir(c);
        SdResult sd = train_sd(ds, c, jsonl_logger(fs::path(c.out) / "sd_log.jsonl", false));
        save_checkpoint(sd.ckpt, fs::path(c.out) / "sd.ckpt");
        Checkpoint ck = train_ad(ds, sd.ckpt, c, jsonl_logger(fs::path(c.out) / "ad_log.jsonl", false));
        save_checkpoint(ck, fs::path(c.out) / "ad.ckpt");
        const Evaluation ev = evaluate(ds.split(ds.manifest.test), ck, EvalMode::student_pruned);
        write_text(fs::path(c.out) / "report.json", ev.report.to_json().dump(2) + "\n");
        std::ostringstream row;
        row.precision(17);
        row << a.param << "," << cell.value << "," << cell.seed << ",";
        if (ev.report.auc) row << *ev.report.auc;
        row << "," << ev.report.acc << "," << ev.report.macro_f1 << "," << ev.report.brier << ","
            << ev.report.retention_mean.value_or(1.0) << "\n";
        std::lock_guard lock(mu);
        std::ofstream(csv, std::ios::app) << row.str();
        std::cerr << "sweep " << a.param << "=" << cell.value << " seed=" << cell.seed << " done\n";
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::size_t threads = 1;
  if (const char* env = std::getenv("AHDMIL_THREADS")) threads = std::max(1ul, std::strtoul(env, nullptr, 10));
  threads = std::min(threads, std::max<std::size_t>(1, cells.size()));
  std::vector<std::thread> pool;
  for (std::size_t i = 0; i < threads; ++i) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  std::cout << json{{"csv", csv.string()}, {"cells_run", cells.size()}, {"cells_skipped", values.size() * seeds.size() - cells.size()}}.dump() << "\n";
  return 0;
}

// ---- ingest -----------------------------------------------------------------

struct IngestArgs {
  std::string list, out, name = "ingested";
  std::size_t classes = 2;
  std::uint64_t seed = 7;
  bool force = false;
};

// List format: one "id,label,hires.npy,lowres.npy" line per bag.
int cmd_ingest(IngestArgs& a) {
  std::ifstream f(a.list);
  if (!f) throw DataError(DataErrorKind::missing, "cannot open " + a.list);
  const fs::path out(a.out);
  if (fs::exists(out) && !fs::is_empty(out)) {
    if (!a.force) throw UsageError(a.out + " exists and is not empty (use --force)");
    fs::remove_all(out);
  }
  Dataset d;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto fields = split_list(line);
    if (fields.size() != 4) throw DataError(DataErrorKind::invalid, "bad list line: " + line);
    auto [hs, hv] = read_npy(fields[2]);
    auto [ls, lv] = read_npy(fields[3]);
    d.bags.push_back(make_ingested_bag(fields[0], static_cast<std::uint16_t>(std::stoul(fields[1])),
                                       static_cast<std::uint16_t>(a.classes), hs, std::move(hv), ls,
                                       std::move(lv)));
  }
  if (d.bags.empty()) throw DataError(DataErrorKind::invalid, "list names no bags");
  DatasetManifest& m = d.manifest;
  m.name = a.name;
  m.num_classes = a.classes;
  m.dim = d.bags.front().dim;
  m.dim_lo = d.bags.front().dim_lo;
  m.lowres_mode = d.bags.front().lowres_mode;
  m.seed = a.seed;
  m.generator = {{"ingested_from", a.list}};
  for (const auto& b : d.bags) {
    if (b.dim != m.dim || b.lowres_mode != m.lowres_mode || b.dim_lo != m.dim_lo) {
      throw DataError(DataErrorKind::invalid, "bag '" + b.id + "' has a different layout");
    }
    m.labels[b.id] = b.label;
  }
  m = resplit(m, a.seed);
  save_dataset(d, out);
  std::cout << json{{"out", a.out}, {"bags", d.bags.size()}}.dump() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"AHDMIL: attention-based instance pruning with two-step distillation"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "Generate a synthetic paired-resolution dataset");
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--seed", gen.seed, "Generator seed");
  g->add_option("--classes", gen.cfg.classes, "Number of classes C");
  g->add_option("--bags", gen.cfg.bags, "Total number of bags");
  g->add_option("--n-range", gen.n_range, "Instance count range MIN:MAX");
  g->add_option("--rho", gen.cfg.rho, "Relevant-instance fraction");
  g->add_option("--signal", gen.cfg.signal, "Class signal strength s");
  g->add_option("--noise", gen.cfg.noise, "Feature noise sigma");
  g->add_option("--pixel-noise", gen.cfg.pixel_noise, "Low-res pixel noise");
  g->add_option("--dim", gen.cfg.dim, "Hi-res feature dimension D");
  g->add_option("--dim-lo", gen.cfg.dim_lo, "Low-res vector width (vector mode)");
  g->add_option("--lowres", gen.lowres, "Low-res mode: patch|vector");
  g->add_option("--name", gen.cfg.name, "Dataset name");
  g->add_flag("--fixed-test", gen.cfg.fixed_test, "Keep one test split across resplits");
  g->add_flag("--force", gen.force, "Overwrite a non-empty output directory");

  TrainArgs tsd, tad;
  auto* sd = app.add_subcommand("train-sd", "Self-distillation training of DMIN");
  auto* ad = app.add_subcommand("train-ad", "Asymmetric distillation into DB-LIPN");
  for (auto [cmd, args] : {std::pair{sd, &tsd}, std::pair{ad, &tad}}) {
    cmd->add_option("--data", args->data, "Dataset directory");
    cmd->add_option("--config", args->config, "Flat JSON run config");
    cmd->add_option("--out", args->out, "Run directory");
    cmd->add_flag("--verbose", args->verbose, "Echo epoch logs to stderr");
    args->ov.attach(cmd);
  }
  ad->add_option("--sd-ckpt", tad.sd_ckpt, "SD checkpoint (default: <out>/sd.ckpt)");

  EvalArgs ev, inf;
  std::string bag_id;
  auto* e = app.add_subcommand("eval", "Evaluate a split and write a metrics report");
  auto* in = app.add_subcommand("infer", "Run inference and emit per-bag traces");
  for (auto [cmd, args] : {std::pair{e, &ev}, std::pair{in, &inf}}) {
    cmd->add_option("--data", args->data, "Dataset directory")->required();
    cmd->add_option("--ckpt", args->ckpt, "Checkpoint")->required();
    cmd->add_option("--split", args->split, "train|val|test|all");
    cmd->add_option("--mode", args->mode, "teacher-full|student-pruned");
    cmd->add_option("--report", args->report, "Output path (stdout when omitted)");
  }
  e->add_option("--compare", ev.compare, "Second mode for a paired t-test on per-bag correctness");
  in->add_option("--bag", bag_id, "Single bag id");

  SweepArgs sw;
  auto* s = app.add_subcommand("sweep", "Run SD+AD over a parameter grid and seeds");
  s->add_option("--data", sw.data, "Dataset directory");
  s->add_option("--config", sw.config, "Flat JSON run config");
  s->add_option("--out", sw.out, "Sweep directory");
  s->add_option("--param", sw.param, "p|K|r|lambda")->required();
  s->add_option("--values", sw.values, "Comma-separated values")->required();
  s->add_option("--seeds", sw.seeds, "Comma-separated seeds");
  s->add_option("--csv", sw.csv, "Output CSV (default: <out>/sweep.csv)");
  sw.ov.attach(s);

  IngestArgs ing;
  auto* ig = app.add_subcommand("ingest", "Build a dataset from precomputed .npy features");
  ig->add_option("--list", ing.list, "CSV of id,label,hires.npy,lowres.npy")->required();
  ig->add_option("--out", ing.out, "Output directory")->required();
  ig->add_option("--classes", ing.classes, "Number of classes");
  ig->add_option("--name", ing.name, "Dataset name");
  ig->add_option("--seed", ing.seed, "Split seed");
  ig->add_flag("--force", ing.force, "Overwrite a non-empty output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*g) return cmd_gen(gen);
    if (*sd) return cmd_train_sd(tsd);
    if (*ad) return cmd_train_ad(tad);
    if (*e) return cmd_eval(ev);
    if (*in) return cmd_infer(inf, bag_id);
    if (*s) return cmd_sweep(sw);
    if (*ig) return cmd_ingest(ing);
  } catch (const UsageError& err) {
    std::cerr << "usage error: " << err.what() << "\n";
    return 1;
  } catch (const DataError& err) {
    std::cerr << "data error: " << err.what() << "\n";
    return 2;
  } catch (const ShapeError& err) {
    std::cerr << "data error: " << err.what() << "\n";
    return 2;
  } catch (const NumericError& err) {
    std::cerr << "numeric failure: " << err.what() << "\n";
    return 3;
  } catch (const DomainError& err) {
    std::cerr << "numeric failure: " << err.what() << "\n";
    return 3;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 2;
  }
  return 1;
}
