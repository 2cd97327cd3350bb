#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "mmshare/experiment.hpp"
#include "mmshare/report.hpp"

using namespace mmshare;

namespace {

const char* kTinyDefaults = R"(
d_model = 16
n_heads = 2
steps = 3
batch_size = 8
data_size = 100
eval_k = 1, 5
seeds = 0, 1
)";

std::string tiny_spec(const std::string& arms) { return std::string(kTinyDefaults) + arms; }

const char* kMatchedArms = R"(
[arm disjoint]
shared_layers = 0
early_layers = 1

[arm shared]
shared_layers = 2
)";

/// Parameter counts by name prefix, independent of group bookkeeping.
std::map<std::string, Index> enumerate_by_prefix(const EncoderModel<float>& model) {
  std::map<std::string, Index> counts;
  for (const auto& e : model.parameters().entries()) {
    const std::string& n = e.param->name;
    const std::string head = n.substr(0, n.find('.'));
    std::string key = head;
    if (head == "embed") key = "embedders";
    if (head == "identifier") key = "identifiers";
    if (head == "log_temperature") key = "temperature";
    counts[key] += e.param->value.size();
  }
  return counts;
}

std::filesystem::path fresh_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("mmshare_test_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

}  // namespace

TEST_CASE("spec parsing: defaults, arms and overrides") {
  const ExperimentSpec spec = parse_experiment_spec(tiny_spec(R"(
fractions = 1, 0.5
baseline = disjoint

[arm disjoint]
shared_layers = 0
early_layers = 2
match_budget = false

[arm shared]
shared_layers = auto
)"));
  REQUIRE(spec.arms.size() == 2);
  CHECK(spec.seeds == std::vector<std::uint64_t>{0, 1});
  CHECK(spec.fractions_or({}) == std::vector<double>{1.0, 0.5});
  CHECK(spec.baseline == "disjoint");
  CHECK_FALSE(spec.arm("disjoint").match_budget);
  CHECK(spec.arm("disjoint").config.model.early_layers == 2);
  CHECK(spec.arm("disjoint").config.model.d_model == 16);
  CHECK(spec.arm("shared").auto_shared_depth);
  CHECK(spec.arm("shared").config.steps == 3);
}

TEST_CASE("spec parsing: an arm with no keys takes the defaults") {
  const ExperimentSpec spec = parse_experiment_spec(tiny_spec("[arm  plain ]\n"));
  REQUIRE(spec.arms.size() == 1);
  CHECK(spec.arms[0].name == "plain");
  CHECK(spec.arms[0].config.model.shared_layers == 4);
  CHECK(spec.arms[0].config.steps == 3);
}

TEST_CASE("spec parsing: baseline defaults to the first arm") {
  const ExperimentSpec spec = parse_experiment_spec(tiny_spec(kMatchedArms));
  CHECK(spec.baseline == "disjoint");
  CHECK_FALSE(spec.fractions.has_value());
  CHECK(spec.fractions_or({1.0, 0.5, 0.25}).size() == 3);
}

TEST_CASE("spec parsing: errors") {
  CHECK_THROWS_AS(parse_experiment_spec("steps = 3\n"), ConfigError);
  CHECK_THROWS_AS(parse_experiment_spec(tiny_spec("[arm a]\nbogus = 1\n")), ConfigError);
  CHECK_THROWS_AS(parse_experiment_spec(tiny_spec("[arm a]\n[arm a]\n")), ConfigError);
  CHECK_THROWS_AS(parse_experiment_spec(tiny_spec("[arm a]\nsteps = 2\n[arm b]\n[arm a]\n")), ConfigError);
  CHECK_THROWS_AS(parse_experiment_spec(tiny_spec("[arm]\n")), ConfigError);
  CHECK_THROWS_AS(parse_experiment_spec(tiny_spec("[]\n")), ConfigError);
  CHECK_THROWS_AS(parse_experiment_spec(tiny_spec("[lane a]\n")), ConfigError);
  CHECK_THROWS_AS(parse_experiment_spec(tiny_spec("fractions = 0\n[arm a]\n")), ConfigError);
  CHECK_THROWS_AS(parse_experiment_spec(tiny_spec("fractions = 1.5\n[arm a]\n")), ConfigError);
  CHECK_THROWS_AS(parse_experiment_spec(tiny_spec("baseline = nope\n[arm a]\n")), ConfigError);
  CHECK_THROWS_AS(parse_experiment_spec(tiny_spec("[arm a]\nshared_layers = auto\n")), ConfigError);
  CHECK_THROWS_AS(parse_experiment_spec(tiny_spec("[arm a]\nn_heads = 3\n")), ConfigError);
}

TEST_CASE("budget: disjoint 2+2 against shared 4 at the default width") {
  ModelConfig disjoint;
  disjoint.shared_layers = 0;
  disjoint.early_layers = 2;
  ModelConfig shared;
  shared.shared_layers = 4;

  for (const ModelConfig* c : {&disjoint, &shared}) {
    EncoderModel<float> model(*c, 0);
    const auto counts = enumerate_by_prefix(model);
    const ParamBreakdown p = model.count_params();
    auto count = [&](const char* k) { return counts.count(k) ? counts.at(k) : Index{0}; };
    CHECK(p.embedders == count("embedders"));
    CHECK(p.identifiers == count("identifiers"));
    CHECK(p.early == count("early"));
    CHECK(p.shared == count("shared"));
    CHECK(p.late == count("late"));
    CHECK(p.projection == count("projection"));
    CHECK(p.temperature == count("temperature"));
    CHECK(params_for(*c).total() == p.total());
  }
  const ParamBreakdown a = params_for(disjoint), b = params_for(shared);
  CHECK(budget_gap(b, a) < 0.02);
  CHECK(a.early == 2 * 2 * transformer_layer_param_count(64, 4));
  CHECK(b.shared == 4 * transformer_layer_param_count(64, 4));
}

TEST_CASE("budget: mismatch is a config error naming both counts") {
  ExperimentSpec spec = parse_experiment_spec(tiny_spec(R"(
[arm disjoint]
shared_layers = 0
early_layers = 1

[arm shared]
shared_layers = 4
)"));
  const Index base = params_for(spec.arm("disjoint").config.model).matched_total();
  const Index big = params_for(spec.arm("shared").config.model).matched_total();
  try {
    enforce_budget(spec);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find(std::to_string(base)) != std::string::npos);
    CHECK(msg.find(std::to_string(big)) != std::string::npos);
  }
}

TEST_CASE("budget: arms outside the budget rule are not checked") {
  ExperimentSpec spec = parse_experiment_spec(tiny_spec(R"(
[arm disjoint]
shared_layers = 0
early_layers = 1

[arm wide]
shared_layers = 6
match_budget = false
)"));
  CHECK_NOTHROW(enforce_budget(spec));
}

TEST_CASE("budget: automatic shared depth") {
  ExperimentSpec spec = parse_experiment_spec(tiny_spec(R"(
[arm disjoint]
shared_layers = 0
early_layers = 3

[arm shared]
shared_layers = auto
)"));
  enforce_budget(spec);
  CHECK(spec.arm("shared").config.model.shared_layers == 6);
  CHECK_FALSE(spec.arm("shared").auto_shared_depth);
}

TEST_CASE("budget: identifier parameters are excluded from matching") {
  ExperimentSpec spec = parse_experiment_spec(tiny_spec(R"(
[arm disjoint]
shared_layers = 0
early_layers = 1

[arm token]
shared_layers = 2
identifier = token
)"));
  CHECK_NOTHROW(enforce_budget(spec));
  const ParamBreakdown p = params_for(spec.arm("token").config.model);
  CHECK(p.identifiers == 2 * 16);
}

TEST_CASE("relative difference") {
  CHECK(relative_difference(0.42, 0.40) == doctest::Approx(5.0));
  CHECK(relative_difference(0.30, 0.40) == doctest::Approx(-25.0));
  CHECK(relative_difference(0.5, 0.5) == 0.0);
  CHECK(std::isnan(relative_difference(0.1, 0.0)));
}

TEST_CASE("run directory names") {
  CHECK(run_directory_name("shared", 2, 1.0) == "shared-s2-f1");
  CHECK(run_directory_name("disjoint", 0, 0.25) == "disjoint-s0-f0.25");
}

TEST_CASE("comparison: two arms by two seeds gives four runs") {
  const auto dir = fresh_dir("compare");
  ExperimentSpec spec = parse_experiment_spec(tiny_spec(kMatchedArms));
  RunOptions options;
  options.jobs = 2;
  options.out = dir;
  const ComparisonReport report = run_comparison(spec, options);
  REQUIRE(report.runs.size() == 4);
  std::set<std::pair<std::string, std::uint64_t>> seen;
  for (const auto& r : report.runs) {
    seen.insert({r.arm, r.seed});
    CHECK(r.fraction == 1.0);
    CHECK(r.train_pairs == 80);
    CHECK(std::filesystem::exists(dir / "runs" / run_directory_name(r.arm, r.seed, 1.0) / "checkpoint.bin"));
    CHECK(std::filesystem::exists(dir / "runs" / run_directory_name(r.arm, r.seed, 1.0) / "manifest.json"));
  }
  CHECK(seen.size() == 4);
  // 1 fraction x 2 arms x 2 directions x 2 ks
  CHECK(report.summary.size() == 8);
  for (const auto& row : report.summary) {
    CHECK(row.per_seed.size() == 2);
    if (row.arm == "disjoint" && row.mean > 0) CHECK(row.relative_diff == 0.0);
  }

  write_comparison(dir, report, spec);
  for (const char* f : {"runs.jsonl", "results.csv", "comparison.csv", "manifest.json"})
    CHECK(std::filesystem::exists(dir / f));
  CHECK(read_jsonl(dir / "runs.jsonl").size() == 8);
  std::filesystem::remove_all(dir);
}

TEST_CASE("comparison: parallel and serial runs agree exactly") {
  ExperimentSpec spec = parse_experiment_spec(tiny_spec(kMatchedArms));
  RunOptions serial, parallel;
  parallel.jobs = 4;
  const ComparisonReport a = run_comparison(spec, serial);
  const ComparisonReport b = run_comparison(spec, parallel);
  REQUIRE(a.runs.size() == b.runs.size());
  for (std::size_t i = 0; i < a.runs.size(); ++i) {
    CHECK(a.runs[i].arm == b.runs[i].arm);
    CHECK(a.runs[i].final_loss == b.runs[i].final_loss);
    for (int d = 0; d < 2; ++d) CHECK(a.runs[i].reports[d].recall == b.runs[i].reports[d].recall);
  }
}

TEST_CASE("comparison: mismatched budget fails before training") {
  const auto dir = fresh_dir("mismatch");
  ExperimentSpec spec = parse_experiment_spec(tiny_spec("[arm a]\nshared_layers = 1\n[arm b]\nshared_layers = 3\n"));
  RunOptions options;
  options.out = dir;
  CHECK_THROWS_AS(run_comparison(spec, options), ConfigError);
  CHECK_FALSE(std::filesystem::exists(dir / "runs"));
}

TEST_CASE("size sweep: fractions 1, 0.5 and 0.25") {
  ExperimentSpec spec = parse_experiment_spec(tiny_spec(kMatchedArms));
  spec.seeds = {0};
  const ComparisonReport report = run_size_sweep(spec);
  REQUIRE(report.runs.size() == 6);
  std::map<double, std::size_t> pairs;
  for (const auto& r : report.runs) pairs[r.fraction] = r.train_pairs;
  CHECK(pairs.size() == 3);
  CHECK(pairs.at(1.0) == 80);
  CHECK(pairs.at(0.5) == 40);
  CHECK(pairs.at(0.25) == 20);
  std::map<std::string, std::set<double>> fractions_per_arm;
  for (const auto& row : report.summary) fractions_per_arm[row.arm].insert(row.fraction);
  CHECK(fractions_per_arm["disjoint"] == std::set<double>{0.25, 0.5, 1.0});
  CHECK(fractions_per_arm["shared"] == std::set<double>{0.25, 0.5, 1.0});
}

TEST_CASE("early and late ablation arms build, train and report") {
  ExperimentSpec spec = parse_experiment_spec(tiny_spec(R"(
seeds = 0
[arm early]
early_layers = 2
shared_layers = 2
[arm late]
late_layers = 2
shared_layers = 2
)"));
  const Index per_layer = transformer_layer_param_count(16, 4);
  const ParamBreakdown early = params_for(spec.arm("early").config.model);
  const ParamBreakdown late = params_for(spec.arm("late").config.model);
  CHECK(early.early == 2 * 2 * per_layer);
  CHECK(early.late == 0);
  CHECK(late.late == 2 * 2 * per_layer);
  CHECK(late.early == 0);
  CHECK(early.modality_specific() == late.modality_specific());
  CHECK(early.total() == late.total());

  const ComparisonReport report = run_comparison(spec);
  REQUIRE(report.runs.size() == 2);
  for (const auto& r : report.runs) {
    CHECK(std::isfinite(r.final_loss));
    CHECK(r.reports[0].recall.size() == 2);
  }
}

TEST_CASE("bundled configs and specs load and meet their budgets") {
  const std::filesystem::path dir = MMSHARE_CONFIG_DIR;
  int specs = 0, configs = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    CAPTURE(e.path().string());
    if (e.path().extension() == ".spec") {
      ExperimentSpec spec = load_experiment_spec(e.path());
      CHECK_NOTHROW(enforce_budget(spec));
      ++specs;
    } else if (e.path().extension() == ".conf") {
      CHECK_NOTHROW(load_train_config(e.path()));
      ++configs;
    }
  }
  CHECK(specs >= 3);
  CHECK(configs >= 2);
}
