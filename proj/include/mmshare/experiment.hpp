#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mmshare/config.hpp"
#include "mmshare/train.hpp"

namespace mmshare {

/// One architecture in a comparison.
struct ArmSpec {
  std::string name;
  TrainConfig config;
  /// Participates in the budget check against the baseline arm.
  bool match_budget = true;
  /// `shared_layers = auto`: deepen the shared stack until the budget matches.
  bool auto_shared_depth = false;
};

/// Arms x seeds x fractions plus the budget rule.
///
///   steps = 2000          # top-level keys are defaults for every arm
///   seeds = 0, 1, 2
///   fractions = 1, 0.5, 0.25
///   baseline = disjoint
///
///   [arm disjoint]
///   shared_layers = 0
///   early_layers = 2
///
///   [arm shared]
///   shared_layers = auto
struct ExperimentSpec {
  std::vector<ArmSpec> arms;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::optional<std::vector<double>> fractions;
  std::string baseline;  // defaults to the first arm
  double budget_tolerance = 0.02;
  Split eval_split = Split::Test;

  const ArmSpec& arm(std::string_view name) const;
  const ArmSpec& baseline_arm() const { return arm(baseline); }
  /// Fractions when given, else the supplied default.
  std::vector<double> fractions_or(std::vector<double> fallback) const;
};

ExperimentSpec parse_experiment_spec(std::string_view text);
ExperimentSpec load_experiment_spec(const std::filesystem::path& path);

/// Parameter breakdown of the model a config builds.
ParamBreakdown params_for(const ModelConfig& model);

/// |a - b| / b on the identifier-free totals.
double budget_gap(const ParamBreakdown& arm, const ParamBreakdown& baseline);

/// Resolves `shared_layers = auto` arms and throws ConfigError if any
/// budget-matched arm differs from the baseline by the tolerance or more.
void enforce_budget(ExperimentSpec& spec);

/// (shared - specific) / specific * 100. NaN when specific is 0.
double relative_difference(double shared, double specific);

struct RunRecord {
  std::string arm;
  std::uint64_t seed = 0;
  double fraction = 1.0;
  ParamBreakdown params;
  std::string config_hash;
  std::size_t train_pairs = 0;
  double final_loss = 0;
  std::array<RetrievalReport, 2> reports;
};

/// Mean recall over seeds for one (fraction, arm, direction, k) cell and its
/// relative difference against the baseline arm's mean.
struct SummaryRow {
  double fraction = 1.0;
  std::string arm;
  Index params = 0;
  Direction direction = Direction::ImageToText;
  Index k = 1;
  std::vector<double> per_seed;
  double mean = 0;
  double relative_diff = 0;
};

struct ComparisonReport {
  std::string baseline;
  std::vector<RunRecord> runs;  // fraction-major, then arm, then seed
  std::vector<SummaryRow> summary;
};

struct RunOptions {
  std::size_t jobs = 1;
  /// When set, each run writes its artifacts under out/runs/<arm>-s<seed>-f<fraction>/.
  std::optional<std::filesystem::path> out;
  /// Progress lines; may be null.
  std::ostream* log = nullptr;
};

/// Trains every arm x seed x fraction. Budgets are enforced before any
/// training starts.
ComparisonReport run_comparison(ExperimentSpec spec, const RunOptions& options = {});
/// run_comparison with fractions defaulting to {1, 0.5, 0.25}.
ComparisonReport run_size_sweep(ExperimentSpec spec, const RunOptions& options = {});

/// runs.jsonl, results.csv, comparison.csv, manifest.json.
void write_comparison(const std::filesystem::path& dir, const ComparisonReport& report, const ExperimentSpec& spec);

std::string run_directory_name(const std::string& arm, std::uint64_t seed, double fraction);

}  // namespace mmshare
