#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ahdmil/datagen.hpp"
#include "test_util.hpp"

using namespace ahdmil;
using nlohmann::json;
using testutil::TempDir;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

Result run(const std::string& args) {
  const std::string cmd = std::string(AHDMIL_CLI) + " " + args + " 2>/dev/null";
  Result r;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) return r;
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, n);
  const int status = ::pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) out.push_back(line);
  return out;
}

// One small trained run shared by the tests below.
class CliRun : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("cli");
    const std::string gen = "gen --seed 3 --bags 20 --n-range 12:24 --dim 8 --lowres vector --dim-lo 6 --rho 0.25";
    ASSERT_EQ(run(gen + " --out " + data()).code, 0);
    std::ofstream(path("cfg.json")) << R"({"q": 12, "h": 6, "k": 3, "k_clu": 2, "sd_epochs": 2,
                                          "ad_epochs": 1, "lr_lipn": 0.001})";
    ASSERT_EQ(run("train-sd --data " + data() + " --config " + path("cfg.json") + " --out " + path("run")).code, 0);
    ASSERT_EQ(run("train-ad --data " + data() + " --config " + path("cfg.json") + " --out " + path("run")).code, 0);
  }
  static void TearDownTestSuite() { delete dir_; }

  static std::string path(const std::string& name) { return (*dir_ / name).string(); }
  static std::string data() { return path("data"); }

  static TempDir* dir_;
};

TempDir* CliRun::dir_ = nullptr;

}  // namespace

TEST(Cli, GenIsDeterministicAndRefusesToOverwrite) {
  TempDir dir("cli_gen");
  const std::string gen = "gen --seed 7 --bags 12 --n-range 8:12 --dim 4 --rho 0.25";
  ASSERT_EQ(run(gen + " --out " + (dir / "a").string()).code, 0);
  ASSERT_EQ(run(gen + " --out " + (dir / "b").string()).code, 0);
  EXPECT_EQ(testutil::read_file(dir / "a/manifest.json"), testutil::read_file(dir / "b/manifest.json"));
  for (const auto& e : std::filesystem::directory_iterator(dir / "a/bags")) {
    EXPECT_EQ(testutil::read_file(e.path()), testutil::read_file(dir / ("b/bags/" + e.path().filename().string())));
  }
  EXPECT_EQ(run(gen + " --out " + (dir / "a").string()).code, 1);
  EXPECT_EQ(run(gen + " --force --out " + (dir / "a").string()).code, 0);
}

TEST(Cli, UsageErrorsExitWithOne) {
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("bogus-command").code, 1);
  EXPECT_EQ(run("gen").code, 1);  // --out is required
  EXPECT_EQ(run("gen --out /tmp/x --n-range 5").code, 1);
}

TEST(Cli, MissingDataExitsWithTwo) {
  EXPECT_EQ(run("train-sd --data /nonexistent/ahdmil --out /tmp/ahdmil_nowhere").code, 2);
}

TEST(Cli, IngestBuildsALoadableDataset) {
  TempDir dir("cli_ingest");
  auto npy = [](const std::string& shape, const std::vector<float>& v) {
    std::string header = "{'descr': '<f4', 'fortran_order': False, 'shape': " + shape + ", }";
    while ((10 + header.size() + 1) % 64 != 0) header += ' ';
    header += '\n';
    std::string out = "\x93NUMPY";
    out += '\x01';
    out += '\x00';
    out += static_cast<char>(header.size());
    out += '\x00';
    return out + header + std::string(reinterpret_cast<const char*>(v.data()), v.size() * 4);
  };
  std::ofstream list(dir / "list.csv");
  for (int i = 0; i < 10; ++i) {
    const std::string id = "slide" + std::to_string(i);
    testutil::write_file(dir / (id + "_hi.npy"), npy("(3, 5)", std::vector<float>(15, 0.1f * i)));
    testutil::write_file(dir / (id + "_lo.npy"), npy("(3, 2)", std::vector<float>(6, 0.2f)));
    list << id << "," << i % 2 << "," << (dir / (id + "_hi.npy")).string() << ","
         << (dir / (id + "_lo.npy")).string() << "\n";
  }
  list.close();
  ASSERT_EQ(run("ingest --list " + (dir / "list.csv").string() + " --out " + (dir / "ds").string()).code, 0);
  const Dataset d = load_dataset(dir / "ds");
  EXPECT_EQ(d.bags.size(), 10u);
  EXPECT_EQ(d.manifest.dim, 5u);
  EXPECT_EQ(d.manifest.lowres_mode, LowresMode::vector);
  EXPECT_EQ(d.bag("slide3").relevance, std::vector<std::uint8_t>(3, kRelevanceUnknown));
}

TEST_F(CliRun, RunDirectoryHoldsLogsConfigAndCheckpoints) {
  for (const char* f : {"config.json", "seed", "build_id", "sd_log.jsonl", "ad_log.jsonl", "sd.ckpt", "ad.ckpt"}) {
    EXPECT_TRUE(std::filesystem::exists(path("run/") + f)) << f;
  }
  const json cfg = json::parse(testutil::read_file(path("run/config.json")));
  EXPECT_EQ(cfg["q"], 12);
  EXPECT_EQ(cfg["seed"], 7);
  for (const auto& line : lines_of(testutil::read_file(path("run/sd_log.jsonl")))) {
    EXPECT_NO_THROW((void)json::parse(line));
  }
}

TEST_F(CliRun, EvalWritesReportCalibrationAndTiming) {
  const Result r = run("eval --data " + data() + " --ckpt " + path("run/ad.ckpt") +
                       " --mode student-pruned --compare teacher-full --report " + path("rep.json"));
  ASSERT_EQ(r.code, 0);
  const json rep = json::parse(testutil::read_file(path("rep.json")));
  for (const char* key : {"auc", "acc", "macro_f1", "brier", "calibration", "retention_mean", "paired_t_test"}) {
    EXPECT_TRUE(rep.contains(key)) << key;
  }
  EXPECT_EQ(lines_of(testutil::read_file(path("rep_calibration.csv"))).front(), "bin_lo,bin_hi,mean_conf,obs_freq,count");
  const auto timing = lines_of(testutil::read_file(path("rep_timing.csv")));
  EXPECT_EQ(timing.front(), "bag_id,t_lowres,t_select,t_feat,t_model,kept,n");
  EXPECT_EQ(timing.size(), 1u + rep["n_samples"].get<std::size_t>());

  // Reports exclude timings, so a second evaluation is byte-identical.
  ASSERT_EQ(run("eval --data " + data() + " --ckpt " + path("run/ad.ckpt") +
                " --mode student-pruned --compare teacher-full --report " + path("rep2.json")).code,
            0);
  EXPECT_EQ(testutil::read_file(path("rep.json")), testutil::read_file(path("rep2.json")));
}

TEST_F(CliRun, ModeCheckpointMismatchIsAUsageError) {
  EXPECT_EQ(run("eval --data " + data() + " --ckpt " + path("run/sd.ckpt") + " --mode student-pruned").code, 1);
  EXPECT_EQ(run("eval --data " + data() + " --ckpt " + path("run/sd.ckpt") + " --mode teacher-full").code, 0);
  EXPECT_EQ(run("eval --data " + data() + " --ckpt " + path("run/ad.ckpt") + " --mode sideways").code, 1);
}

TEST_F(CliRun, InferSingleBagEmitsOneTrace) {
  const std::string id = load_dataset(data()).manifest.test.front();
  const Result r = run("infer --data " + data() + " --ckpt " + path("run/ad.ckpt") + " --bag " + id);
  ASSERT_EQ(r.code, 0);
  const auto lines = lines_of(r.out);
  ASSERT_EQ(lines.size(), 1u);
  const json t = json::parse(lines[0]);
  EXPECT_EQ(t["bag_id"], id);
  EXPECT_LE(t["kept"].get<std::size_t>(), t["n"].get<std::size_t>());
}

TEST_F(CliRun, ConfigWithUnknownKeyIsRejected) {
  std::ofstream(path("bad.json")) << R"({"sd_epochs": 1, "learning_rate": 0.1})";
  EXPECT_EQ(run("train-sd --data " + data() + " --config " + path("bad.json") + " --out " + path("bad")).code, 1);
}

TEST_F(CliRun, SweepWritesOneRowPerCellAndResumes) {
  const std::string base = "sweep --data " + data() + " --config " + path("cfg.json") + " --out " + path("sweep") +
                           " --param r --seeds 1";
  EXPECT_EQ(run(base + " --values ''").code, 1);
  ASSERT_EQ(run(base + " --values 0.5,0.7").code, 0);
  auto rows = lines_of(testutil::read_file(path("sweep/sweep.csv")));
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0], "param,value,seed,auc,acc,f1,brier,retention");
  ASSERT_EQ(run(base + " --values 0.5,0.7").code, 0);
  EXPECT_EQ(lines_of(testutil::read_file(path("sweep/sweep.csv"))).size(), 3u);
}
