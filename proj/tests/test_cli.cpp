#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "mmshare/cli.hpp"
#include "mmshare/report.hpp"

using namespace mmshare;
namespace fs = std::filesystem;

namespace {

const char* kTinyConfig = R"(# tiny run
d_model = 16
n_heads = 2
shared_layers = 1
steps = 4
batch_size = 8
data_size = 100
eval_k = 1, 5
)";

struct Scratch {
  fs::path dir;
  explicit Scratch(const std::string& name) : dir(fs::temp_directory_path() / ("mmshare_cli_" + name)) {
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~Scratch() { fs::remove_all(dir); }
  fs::path write(const std::string& file, const std::string& text) const {
    std::ofstream(dir / file) << text;
    return dir / file;
  }
};

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::size_t count_files(const fs::path& dir, const std::string& name) {
  std::size_t n = 0;
  if (!fs::exists(dir)) return 0;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.path().filename() == name) ++n;
  return n;
}

}  // namespace

TEST_CASE("no subcommand or unknown flag exits 2") {
  CHECK(cli({}).code == kExitConfig);
  CHECK(cli({"train", "--config", "x", "--bogus"}).code == kExitConfig);
  CHECK(cli({"--help"}).code == kExitOk);
}

TEST_CASE("train: missing config file exits 2") {
  Scratch s("missing");
  const Result r = cli({"train", "--config", (s.dir / "nope.conf").string(), "--out", (s.dir / "run").string()});
  CHECK(r.code == kExitConfig);
  CHECK(r.err.find("nope.conf") != std::string::npos);
  CHECK(cli({"train", "--out", (s.dir / "run").string()}).code == kExitConfig);
}

TEST_CASE("train: invalid config exits 2 and names the field") {
  Scratch s("invalid");
  const auto cfg = s.write("bad.conf", std::string(kTinyConfig) + "n_heads = 3\n");
  const Result r = cli({"train", "--config", cfg.string(), "--out", (s.dir / "run").string()});
  CHECK(r.code == kExitConfig);
  CHECK(r.err.find("n_heads") != std::string::npos);
}

TEST_CASE("train: tiny config writes checkpoint, loss trace and metrics with a manifest") {
  Scratch s("train");
  const auto cfg = s.write("tiny.conf", kTinyConfig);
  const fs::path out = s.dir / "run";
  const Result r = cli({"train", "--config", cfg.string(), "--seed", "3", "--out", out.string()});
  REQUIRE(r.code == kExitOk);
  for (const char* f : {"checkpoint.bin", "loss_trace.csv", "metrics.jsonl", "manifest.json"})
    CHECK(fs::exists(out / f));

  std::istringstream trace(slurp(out / "loss_trace.csv"));
  std::string line;
  std::getline(trace, line);
  CHECK(line == "step,loss");
  int rows = 0;
  while (std::getline(trace, line)) ++rows;
  CHECK(rows == 4);

  const auto metrics = read_jsonl(out / "metrics.jsonl");
  REQUIRE(metrics.size() == 2);
  CHECK(metrics[0]["seed"] == 3);
  CHECK(metrics[0]["recall"].size() == 2);

  const Json manifest = Json::parse(slurp(out / "manifest.json"));
  CHECK(manifest["seed"] == 3);
  CHECK(manifest["config_hash"] == metrics[0]["config_hash"]);
  CHECK(manifest["artifacts"].size() == 3);
}

TEST_CASE("train: the same invocation twice gives identical metrics") {
  Scratch s("repeat");
  const auto cfg = s.write("tiny.conf", kTinyConfig);
  for (const char* run : {"a", "b"})
    REQUIRE(cli({"train", "--config", cfg.string(), "--out", (s.dir / run).string()}).code == kExitOk);
  CHECK(slurp(s.dir / "a" / "metrics.jsonl") == slurp(s.dir / "b" / "metrics.jsonl"));
  CHECK(slurp(s.dir / "a" / "loss_trace.csv") == slurp(s.dir / "b" / "loss_trace.csv"));
  CHECK(slurp(s.dir / "a" / "checkpoint.bin") == slurp(s.dir / "b" / "checkpoint.bin"));
}

TEST_CASE("train: divergence exits 3") {
  Scratch s("diverge");
  const auto cfg = s.write("hot.conf", std::string(kTinyConfig) + "lr = 1e36\nsteps = 20\n");
  const Result r = cli({"train", "--config", cfg.string(), "--out", (s.dir / "run").string()});
  CHECK(r.code == kExitDivergence);
}

TEST_CASE("eval: k = 1,5,10 gives six recall values") {
  Scratch s("eval");
  const auto cfg = s.write("tiny.conf", kTinyConfig);
  REQUIRE(cli({"train", "--config", cfg.string(), "--out", (s.dir / "run").string()}).code == kExitOk);
  const Result r = cli({"eval", "--checkpoint", (s.dir / "run" / "checkpoint.bin").string(), "--split", "test",
                        "--k", "1,5,10", "--out", (s.dir / "eval").string()});
  REQUIRE(r.code == kExitOk);
  const auto records = read_jsonl(s.dir / "eval" / "eval_metrics.jsonl");
  REQUIRE(records.size() == 2);
  std::size_t values = 0;
  for (const auto& rec : records) values += rec["recall"].size();
  CHECK(values == 6);
  CHECK(records[0]["direction"] == "I2T");
  CHECK(records[1]["direction"] == "T2I");
  CHECK(records[0]["recall"]["10"] == 1.0);
  const Json manifest = Json::parse(slurp(s.dir / "eval" / "eval_manifest.json"));
  CHECK(manifest["split"] == "test");
  CHECK(manifest["k"].size() == 3);
  CHECK(manifest["artifacts"][0] == "eval_metrics.jsonl");
}

TEST_CASE("eval: matches the metrics written by train") {
  Scratch s("eval_match");
  const auto cfg = s.write("tiny.conf", kTinyConfig);
  REQUIRE(cli({"train", "--config", cfg.string(), "--out", (s.dir / "run").string()}).code == kExitOk);
  REQUIRE(cli({"eval", "--checkpoint", (s.dir / "run" / "checkpoint.bin").string(), "--out",
               (s.dir / "eval").string()})
              .code == kExitOk);
  CHECK(slurp(s.dir / "run" / "metrics.jsonl") == slurp(s.dir / "eval" / "eval_metrics.jsonl"));
}

TEST_CASE("eval: truncated or missing checkpoint exits 4") {
  Scratch s("truncated");
  const auto cfg = s.write("tiny.conf", kTinyConfig);
  REQUIRE(cli({"train", "--config", cfg.string(), "--out", (s.dir / "run").string()}).code == kExitOk);
  const std::string bytes = slurp(s.dir / "run" / "checkpoint.bin");
  std::ofstream(s.dir / "cut.bin", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
  CHECK(cli({"eval", "--checkpoint", (s.dir / "cut.bin").string(), "--out", (s.dir / "e").string()}).code ==
        kExitCheckpoint);
  CHECK(cli({"eval", "--checkpoint", (s.dir / "none.bin").string(), "--out", (s.dir / "e").string()}).code ==
        kExitCheckpoint);
}

TEST_CASE("eval: bad split or k exits 2") {
  Scratch s("eval_bad");
  const auto cfg = s.write("tiny.conf", kTinyConfig);
  REQUIRE(cli({"train", "--config", cfg.string(), "--out", (s.dir / "run").string()}).code == kExitOk);
  const std::string ck = (s.dir / "run" / "checkpoint.bin").string();
  CHECK(cli({"eval", "--checkpoint", ck, "--split", "holdout", "--out", (s.dir / "e").string()}).code == kExitConfig);
  CHECK(cli({"eval", "--checkpoint", ck, "--k", "0", "--out", (s.dir / "e").string()}).code == kExitConfig);
}

const char* kSpecDefaults = R"(
d_model = 16
n_heads = 2
steps = 3
batch_size = 8
data_size = 100
eval_k = 1
seeds = 0, 1
)";

TEST_CASE("compare: two arms by two seeds gives four run records") {
  Scratch s("compare");
  const auto spec = s.write("spec.conf", std::string(kSpecDefaults) +
                                             "[arm disjoint]\nshared_layers = 0\nearly_layers = 1\n"
                                             "[arm shared]\nshared_layers = 2\n");
  const Result r = cli({"compare", "--spec", spec.string(), "--out", (s.dir / "cmp").string(), "--jobs", "2"});
  REQUIRE(r.code == kExitOk);
  const auto records = read_jsonl(s.dir / "cmp" / "runs.jsonl");
  CHECK(records.size() == 8);  // two directions per run
  std::set<std::string> runs;
  for (const auto& rec : records) runs.insert(rec["arm"].get<std::string>() + std::to_string(rec["seed"].get<int>()));
  CHECK(runs.size() == 4);
  CHECK(count_files(s.dir / "cmp", "checkpoint.bin") == 4);
  CHECK(fs::exists(s.dir / "cmp" / "manifest.json"));
  CHECK(fs::exists(s.dir / "cmp" / "comparison.csv"));
}

TEST_CASE("compare: mismatched budgets exit 2 without writing checkpoints") {
  Scratch s("mismatch");
  const auto spec =
      s.write("spec.conf", std::string(kSpecDefaults) + "[arm a]\nshared_layers = 1\n[arm b]\nshared_layers = 4\n");
  const Result r = cli({"compare", "--spec", spec.string(), "--out", (s.dir / "cmp").string()});
  CHECK(r.code == kExitConfig);
  CHECK(r.err.find("budget") != std::string::npos);
  CHECK(count_files(s.dir, "checkpoint.bin") == 0);
}

TEST_CASE("sweep: comparison table covers fractions 1, 0.5 and 0.25") {
  Scratch s("sweep");
  const auto spec = s.write("spec.conf", std::string(kSpecDefaults) +
                                             "seeds = 0\n[arm disjoint]\nshared_layers = 0\nearly_layers = 1\n"
                                             "[arm shared]\nshared_layers = 2\n");
  REQUIRE(cli({"sweep", "--spec", spec.string(), "--out", (s.dir / "sw").string()}).code == kExitOk);
  std::istringstream csv(slurp(s.dir / "sw" / "comparison.csv"));
  std::string line;
  std::getline(csv, line);
  CHECK(line.rfind("fraction,", 0) == 0);
  std::set<std::string> fractions;
  while (std::getline(csv, line)) fractions.insert(line.substr(0, line.find(',')));
  CHECK(fractions == std::set<std::string>{"1", "0.5", "0.25"});
}

TEST_CASE("environment overrides apply to --out and --jobs only") {
  Scratch s("env");
  const auto cfg = s.write("tiny.conf", kTinyConfig);
  const fs::path env_out = s.dir / "from_env";
  ::setenv("MMSHARE_OUT", env_out.string().c_str(), 1);
  CHECK(cli({"train", "--config", cfg.string()}).code == kExitOk);
  CHECK(fs::exists(env_out / "checkpoint.bin"));

  // an explicit flag wins over the environment
  CHECK(cli({"train", "--config", cfg.string(), "--out", (s.dir / "flag").string()}).code == kExitOk);
  CHECK(fs::exists(s.dir / "flag" / "checkpoint.bin"));
  ::unsetenv("MMSHARE_OUT");

  ::setenv("MMSHARE_CONFIG", cfg.string().c_str(), 1);
  CHECK(cli({"train", "--out", (s.dir / "x").string()}).code == kExitConfig);
  ::unsetenv("MMSHARE_CONFIG");

  ::setenv("MMSHARE_JOBS", "0", 1);
  const auto spec = s.write("spec.conf", std::string(kSpecDefaults) + "[arm a]\n");
  CHECK(cli({"compare", "--spec", spec.string(), "--out", (s.dir / "c").string()}).code == kExitConfig);
  ::setenv("MMSHARE_JOBS", "2", 1);
  CHECK(cli({"compare", "--spec", spec.string(), "--out", (s.dir / "c").string()}).code == kExitOk);
  ::unsetenv("MMSHARE_JOBS");
}

TEST_CASE("nothing is written outside --out") {
  Scratch s("confined");
  const auto cfg = s.write("tiny.conf", kTinyConfig);
  fs::create_directories(s.dir / "cwd");
  const fs::path old = fs::current_path();
  fs::current_path(s.dir / "cwd");
  const int code = cli({"train", "--config", cfg.string(), "--out", (s.dir / "run").string()}).code;
  fs::current_path(old);
  CHECK(code == kExitOk);
  CHECK(fs::is_empty(s.dir / "cwd"));
  std::set<std::string> top;
  for (const auto& e : fs::directory_iterator(s.dir)) top.insert(e.path().filename().string());
  CHECK(top == std::set<std::string>{"cwd", "run", "tiny.conf"});
}

TEST_CASE("params prints the breakdown") {
  Scratch s("params");
  const auto cfg = s.write("tiny.conf", kTinyConfig);
  const Result r = cli({"params", "--config", cfg.string()});
  CHECK(r.code == kExitOk);
  CHECK(r.out.find("shared") != std::string::npos);
  CHECK(r.out.find("matched") != std::string::npos);
}

TEST_CASE("generate exports a dataset") {
  Scratch s("generate");
  CHECK(cli({"generate", "--n", "50", "--out", (s.dir / "data").string()}).code == kExitOk);
  CHECK(fs::exists(s.dir / "data" / "captions.tsv"));
  CHECK(Json::parse(slurp(s.dir / "data" / "manifest.json"))["n"] == 50);
}
