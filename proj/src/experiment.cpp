#include "mmshare/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

#include "mmshare/report.hpp"

namespace mmshare {

namespace {

constexpr Index kMaxAutoDepth = 64;

bool parse_bool(const ConfigEntry& e) {
  if (e.value == "true" || e.value == "1" || e.value == "yes") return true;
  if (e.value == "false" || e.value == "0" || e.value == "no") return false;
  throw ConfigError(e.key + ": expected true or false, got '" + e.value + "' (line " + std::to_string(e.line) + ")");
}

void apply_run_key(TrainConfig& c, const ConfigEntry& e) {
  if (!apply_config_entry(c, e)) throw ConfigError(e.key + ": unknown key (line " + std::to_string(e.line) + ")");
}

std::string format_fraction(double f) { return format_double(f); }

std::string trim_copy(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  return b == std::string::npos ? std::string() : s.substr(b, s.find_last_not_of(" \t") - b + 1);
}

}  // namespace

const ArmSpec& ExperimentSpec::arm(std::string_view name) const {
  for (const auto& a : arms)
    if (a.name == name) return a;
  throw ConfigError("no arm named '" + std::string(name) + "'");
}

std::vector<double> ExperimentSpec::fractions_or(std::vector<double> fallback) const {
  return fractions ? *fractions : std::move(fallback);
}

ExperimentSpec parse_experiment_spec(std::string_view text) {
  ExperimentSpec spec;
  std::vector<ConfigEntry> defaults;
  std::vector<std::pair<std::string, std::vector<ConfigEntry>>> sections;
  for (auto& e : parse_key_values(text)) {
    if (e.section.empty()) {
      if (e.key == "seeds") {
        spec.seeds.clear();
        for (Index s : parse_index_list(e.key, e.value)) {
          if (s < 0) throw ConfigError("seeds: must be >= 0");
          spec.seeds.push_back(static_cast<std::uint64_t>(s));
        }
      } else if (e.key == "fractions") {
        spec.fractions = parse_double_list(e.key, e.value);
      } else if (e.key == "baseline") {
        spec.baseline = e.value;
      } else if (e.key == "budget_tolerance") {
        spec.budget_tolerance = parse_double_list(e.key, e.value).at(0);
      } else if (e.key == "split") {
        try {
          spec.eval_split = parse_split(e.value);
        } catch (const InputError& err) {
          throw ConfigError(std::string("split: ") + err.what());
        }
      } else {
        defaults.push_back(std::move(e));
      }
      continue;
    }
    if (e.section.rfind("arm ", 0) != 0) {
      throw ConfigError("line " + std::to_string(e.line) + ": unknown section [" + e.section + "], expected [arm NAME]");
    }
    if (e.key.empty()) {
      sections.emplace_back(trim_copy(e.section.substr(4)), std::vector<ConfigEntry>{});
      continue;
    }
    sections.back().second.push_back(std::move(e));
  }

  for (auto& [name, entries] : sections) {
    if (name.empty()) throw ConfigError("arm sections need a name: [arm NAME]");
    for (const auto& a : spec.arms)
      if (a.name == name) throw ConfigError("arm '" + name + "' is defined twice");
    ArmSpec arm;
    arm.name = name;
    arm.config.model.proj_dim = 0;
    for (const auto& e : defaults) apply_run_key(arm.config, e);
    for (const auto& e : entries) {
      if (e.key == "match_budget") arm.match_budget = parse_bool(e);
      else if (e.key == "shared_layers" && e.value == "auto") arm.auto_shared_depth = true;
      else apply_run_key(arm.config, e);
    }
    resolve_defaults(arm.config);
    spec.arms.push_back(std::move(arm));
  }

  if (spec.arms.empty()) throw ConfigError("experiment needs at least one [arm NAME] section");
  if (spec.baseline.empty()) spec.baseline = spec.arms.front().name;
  const ArmSpec& base = spec.baseline_arm();
  if (base.auto_shared_depth) throw ConfigError("baseline arm '" + base.name + "' cannot use shared_layers = auto");
  if (spec.seeds.empty()) throw ConfigError("seeds: needs at least one value");
  if (spec.fractions) {
    if (spec.fractions->empty()) throw ConfigError("fractions: needs at least one value");
    for (double f : *spec.fractions)
      if (!(f > 0.0 && f <= 1.0)) throw ConfigError("fractions: values must be in (0, 1], got " + format_double(f));
  }
  if (!(spec.budget_tolerance > 0.0)) throw ConfigError("budget_tolerance: must be > 0");
  for (const auto& a : spec.arms) {
    if (a.auto_shared_depth) continue;
    try {
      a.config.validate();
    } catch (const ConfigError& err) {
      throw ConfigError("arm '" + a.name + "': " + err.what());
    }
  }
  return spec;
}

ExperimentSpec load_experiment_spec(const std::filesystem::path& path) {
  return parse_experiment_spec(read_text_file(path));
}

ParamBreakdown params_for(const ModelConfig& model) { return EncoderModel<float>(model, 0).count_params(); }

double budget_gap(const ParamBreakdown& arm, const ParamBreakdown& baseline) {
  const double a = static_cast<double>(arm.matched_total());
  const double b = static_cast<double>(baseline.matched_total());
  return std::abs(a - b) / b;
}

void enforce_budget(ExperimentSpec& spec) {
  const ParamBreakdown base = params_for(spec.baseline_arm().config.model);
  for (auto& arm : spec.arms) {
    if (arm.auto_shared_depth) {
      Index best = -1;
      double best_gap = std::numeric_limits<double>::infinity();
      for (Index depth = 0; depth <= kMaxAutoDepth; ++depth) {
        arm.config.model.shared_layers = depth;
        if (depth == 0 && arm.config.model.early_layers + arm.config.model.late_layers == 0) continue;
        const ParamBreakdown p = params_for(arm.config.model);
        const double gap = budget_gap(p, base);
        if (gap < best_gap) {
          best_gap = gap;
          best = depth;
        }
        if (p.matched_total() > base.matched_total()) break;
      }
      if (best < 0 || best_gap >= spec.budget_tolerance) {
        throw ConfigError("arm '" + arm.name + "': no shared depth brings the parameter count within " +
                          format_double(spec.budget_tolerance * 100) + "% of baseline '" + spec.baseline + "'");
      }
      arm.config.model.shared_layers = best;
      arm.auto_shared_depth = false;
      arm.config.validate();
    }
    if (!arm.match_budget || arm.name == spec.baseline) continue;
    const ParamBreakdown p = params_for(arm.config.model);
    const double gap = budget_gap(p, base);
    if (gap >= spec.budget_tolerance) {
      std::ostringstream msg;
      msg << "budget mismatch: arm '" << arm.name << "' has " << p.matched_total() << " parameters, baseline '"
          << spec.baseline << "' has " << base.matched_total() << " (gap " << std::setprecision(4) << gap * 100
          << "%, tolerance " << spec.budget_tolerance * 100 << "%; identifier parameters excluded)";
      throw ConfigError(msg.str());
    }
  }
}

double relative_difference(double shared, double specific) {
  if (specific == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return (shared - specific) / specific * 100.0;
}

std::string run_directory_name(const std::string& arm, std::uint64_t seed, double fraction) {
  return arm + "-s" + std::to_string(seed) + "-f" + format_fraction(fraction);
}

namespace {

struct Job {
  const ArmSpec* arm;
  std::uint64_t seed;
  double fraction;
  const Dataset* data;
};

RunRecord run_job(const Job& job, const ExperimentSpec& spec, const RunOptions& options) {
  TrainConfig config = job.arm->config;
  config.seed = job.seed;
  config.train_fraction = job.fraction;
  config.validate();

  TrainResult result = train(config, *job.data);
  const auto& ks = config.eval_k;
  auto reports = evaluate_retrieval(result.model, *job.data, spec.eval_split, ks);
  label_reports(reports, config);
  if (options.out) {
    write_run_artifacts(*options.out / "runs" / run_directory_name(job.arm->name, job.seed, job.fraction), config,
                        result, reports, spec.eval_split);
  }

  RunRecord rec;
  rec.arm = job.arm->name;
  rec.seed = job.seed;
  rec.fraction = job.fraction;
  rec.params = result.model.count_params();
  rec.config_hash = config_hash(config);
  rec.train_pairs = job.data->train.size();
  rec.final_loss = result.loss_trace.empty() ? 0.0 : result.loss_trace.back();
  rec.reports = reports;
  return rec;
}

std::vector<SummaryRow> summarize(const std::vector<RunRecord>& runs, const ExperimentSpec& spec,
                                  const std::vector<double>& fractions) {
  std::vector<SummaryRow> rows;
  for (double f : fractions) {
    std::map<std::pair<int, Index>, double> baseline_mean;
    std::vector<SummaryRow> block;
    for (const auto& arm : spec.arms) {
      for (int d = 0; d < 2; ++d) {
        for (Index k : arm.config.eval_k) {
          SummaryRow row;
          row.fraction = f;
          row.arm = arm.name;
          row.direction = d == 0 ? Direction::ImageToText : Direction::TextToImage;
          row.k = k;
          for (const auto& r : runs) {
            if (r.arm != arm.name || r.fraction != f) continue;
            row.params = r.params.total();
            row.per_seed.push_back(r.reports[d].at(k));
          }
          double total = 0;
          for (double v : row.per_seed) total += v;
          row.mean = row.per_seed.empty() ? 0.0 : total / static_cast<double>(row.per_seed.size());
          if (arm.name == spec.baseline) baseline_mean[{d, k}] = row.mean;
          block.push_back(std::move(row));
        }
      }
    }
    for (auto& row : block) {
      const auto it = baseline_mean.find({static_cast<int>(row.direction), row.k});
      row.relative_diff = it == baseline_mean.end() ? std::numeric_limits<double>::quiet_NaN()
                                                    : relative_difference(row.mean, it->second);
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

}  // namespace

ComparisonReport run_comparison(ExperimentSpec spec, const RunOptions& options) {
  enforce_budget(spec);
  const std::vector<double> fractions = spec.fractions_or({1.0});

  // One dataset per (size, seed, fraction); arms sharing data settings share it.
  std::map<std::tuple<std::size_t, std::uint64_t, double>, Dataset> datasets;
  std::vector<Job> jobs;
  for (double f : fractions) {
    for (const auto& arm : spec.arms) {
      const auto key = std::make_tuple(arm.config.data_size, arm.config.data_seed, f);
      if (!datasets.count(key)) {
        Dataset full = generate_dataset(arm.config.data_size, arm.config.data_seed);
        datasets.emplace(key, f < 1.0 ? subsample(full, f, arm.config.data_seed) : full);
      }
      for (std::uint64_t seed : spec.seeds) jobs.push_back({&arm, seed, f, &datasets.at(key)});
    }
  }

  std::vector<std::optional<RunRecord>> results(jobs.size());
  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;
  std::exception_ptr failure;
  auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= jobs.size()) return;
      {
        std::lock_guard<std::mutex> lock(log_mutex);
        if (failure) return;
        if (options.log) {
          *options.log << "[" << i + 1 << "/" << jobs.size() << "] " << jobs[i].arm->name << " seed "
                       << jobs[i].seed << " fraction " << format_fraction(jobs[i].fraction) << std::endl;
        }
      }
      try {
        results[i] = run_job(jobs[i], spec, options);
      } catch (...) {
        std::lock_guard<std::mutex> lock(log_mutex);
        if (!failure) failure = std::current_exception();
        return;
      }
    }
  };
  const std::size_t n_threads = std::clamp<std::size_t>(options.jobs, 1, std::max<std::size_t>(1, jobs.size()));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);

  ComparisonReport report;
  report.baseline = spec.baseline;
  for (auto& r : results) report.runs.push_back(std::move(*r));
  report.summary = summarize(report.runs, spec, fractions);
  return report;
}

ComparisonReport run_size_sweep(ExperimentSpec spec, const RunOptions& options) {
  spec.fractions = spec.fractions_or({1.0, 0.5, 0.25});
  return run_comparison(std::move(spec), options);
}

void write_comparison(const std::filesystem::path& dir, const ComparisonReport& report, const ExperimentSpec& spec) {
  std::filesystem::create_directories(dir);

  std::vector<Json> records;
  for (const auto& r : report.runs) {
    for (const auto& rep : r.reports) {
      Json rec = retrieval_record(rep, spec.eval_split);
      Json head{{"arm", r.arm}, {"fraction", r.fraction}, {"params", r.params.total()},
                {"matched_params", r.params.matched_total()}, {"train_pairs", r.train_pairs},
                {"final_loss", r.final_loss}};
      head.update(rec);
      records.push_back(std::move(head));
    }
  }
  write_jsonl(dir / "runs.jsonl", records);

  {
    std::ofstream out(dir / "results.csv");
    if (!out) throw InputError("cannot write " + (dir / "results.csv").string());
    out << "arm,seed,fraction,params,direction,k,recall\n" << std::setprecision(17);
    for (const auto& r : report.runs)
      for (const auto& rep : r.reports)
        for (std::size_t i = 0; i < rep.ks.size(); ++i)
          out << r.arm << ',' << r.seed << ',' << format_fraction(r.fraction) << ',' << r.params.total() << ','
              << to_string(rep.direction) << ',' << rep.ks[i] << ',' << rep.recall[i] << '\n';
  }

  {
    std::ofstream out(dir / "comparison.csv");
    if (!out) throw InputError("cannot write " + (dir / "comparison.csv").string());
    out << "fraction,arm,params,direction,k,mean_recall,per_seed,relative_diff_pct\n" << std::setprecision(17);
    for (const auto& row : report.summary) {
      out << format_fraction(row.fraction) << ',' << row.arm << ',' << row.params << ',' << to_string(row.direction)
          << ',' << row.k << ',' << row.mean << ',';
      for (std::size_t i = 0; i < row.per_seed.size(); ++i) out << (i ? ";" : "") << row.per_seed[i];
      out << ',';
      if (std::isnan(row.relative_diff)) out << "nan";
      else out << row.relative_diff;
      out << '\n';
    }
  }

  Json arms = Json::array();
  for (const auto& a : spec.arms) {
    const ParamBreakdown p = params_for(a.config.model);
    arms.push_back(Json{{"name", a.name},
                        {"config_hash", config_hash(a.config)},
                        {"params", p.total()},
                        {"matched_params", p.matched_total()},
                        {"modality_specific_params", p.modality_specific()},
                        {"config", canonical_text(a.config)}});
  }
  Json seeds = spec.seeds;
  Json fractions = Json::array();
  for (const auto& r : report.runs)
    if (std::find(fractions.begin(), fractions.end(), Json(r.fraction)) == fractions.end()) fractions.push_back(r.fraction);
  write_json(dir / "manifest.json", Json{{"tool", "mmshare"},
                                         {"version", kToolVersion},
                                         {"baseline", spec.baseline},
                                         {"budget_tolerance", spec.budget_tolerance},
                                         {"split", to_string(spec.eval_split)},
                                         {"seeds", seeds},
                                         {"fractions", fractions},
                                         {"arms", arms},
                                         {"artifacts", {"runs.jsonl", "results.csv", "comparison.csv"}}});
}

}  // namespace mmshare
