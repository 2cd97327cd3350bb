#include "mmshare/cli.hpp"

#include <algorithm>
#include <iomanip>

#include <CLI11.hpp>

#include "mmshare/checkpoint.hpp"
#include "mmshare/experiment.hpp"
#include "mmshare/report.hpp"

namespace mmshare {

namespace {

namespace fs = std::filesystem;

void print_reports(std::ostream& out, const std::array<RetrievalReport, 2>& reports, Split split) {
  for (const auto& r : reports) {
    out << to_string(r.direction) << ' ' << to_string(split) << " (" << r.n_queries << " queries)";
    for (std::size_t i = 0; i < r.ks.size(); ++i)
      out << "  R@" << r.ks[i] << " = " << std::fixed << std::setprecision(4) << r.recall[i];
    out << std::defaultfloat << '\n';
  }
}

void print_breakdown(std::ostream& out, const ParamBreakdown& p) {
  out << "embedders    " << p.embedders << '\n'
      << "identifiers  " << p.identifiers << '\n'
      << "early        " << p.early << '\n'
      << "shared       " << p.shared << '\n'
      << "late         " << p.late << '\n'
      << "projection   " << p.projection << '\n'
      << "temperature  " << p.temperature << '\n'
      << "total        " << p.total() << '\n'
      << "matched      " << p.matched_total() << '\n';
}

struct TrainArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
};

int cmd_train(const TrainArgs& a, std::ostream& out) {
  TrainConfig config = load_train_config(a.config);
  if (a.seed) config.seed = *a.seed;
  const Dataset data = dataset_for(config);
  const fs::path dir = a.out;
  out << "config " << config_hash(config) << ", " << data.train.size() << " training pairs, " << config.steps
      << " steps\n";
  TrainOptions options;
  options.on_eval = [&](std::size_t step, EncoderModel<float>& model) {
    auto reports = evaluate_retrieval(model, data, Split::Val, config.eval_k);
    out << "step " << step << ": ";
    print_reports(out, reports, Split::Val);
  };
  TrainResult result = train(config, data, options);
  auto reports = evaluate_retrieval(result.model, data, Split::Test, config.eval_k);
  label_reports(reports, config);
  write_run_artifacts(dir, config, result, reports, Split::Test);
  if (!result.loss_trace.empty()) out << "final loss " << result.loss_trace.back() << '\n';
  print_reports(out, reports, Split::Test);
  out << "wrote " << (dir / "checkpoint.bin").string() << '\n';
  return kExitOk;
}

struct EvalArgs {
  std::string checkpoint;
  std::string split = "test";
  std::vector<Index> k;
  std::string out = "out";
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const Split split = parse_split(a.split);
  Checkpoint ck = load_checkpoint(a.checkpoint);
  const std::vector<Index> ks = a.k.empty() ? ck.config.eval_k : a.k;
  for (Index k : ks)
    if (k < 1) throw ConfigError("--k: values must be >= 1, got " + std::to_string(k));
  const Dataset data = dataset_for(ck.config);
  auto reports = evaluate_retrieval(ck.model, data, split, ks);
  label_reports(reports, ck.config);
  print_reports(out, reports, split);
  fs::create_directories(a.out);
  write_jsonl(fs::path(a.out) / "eval_metrics.jsonl",
              {retrieval_record(reports[0], split), retrieval_record(reports[1], split)});
  Json manifest = run_manifest(ck.config, {"eval_metrics.jsonl"});
  manifest["checkpoint"] = a.checkpoint;
  manifest["split"] = to_string(split);
  manifest["k"] = ks;
  write_json(fs::path(a.out) / "eval_manifest.json", manifest);
  return kExitOk;
}

struct ExperimentArgs {
  std::string spec;
  std::string out = "out";
  std::size_t jobs = 1;
};

int cmd_experiment(const ExperimentArgs& a, bool sweep, std::ostream& out) {
  if (a.jobs < 1) throw ConfigError("--jobs: must be >= 1");
  ExperimentSpec spec = load_experiment_spec(a.spec);
  if (sweep) spec.fractions = spec.fractions_or({1.0, 0.5, 0.25});
  enforce_budget(spec);
  for (const auto& arm : spec.arms) {
    out << "arm " << arm.name << ": " << params_for(arm.config.model).matched_total() << " matched params, shared "
        << arm.config.model.shared_layers << ", early " << arm.config.model.early_layers << ", late "
        << arm.config.model.late_layers << '\n';
  }
  RunOptions options;
  options.jobs = a.jobs;
  options.out = fs::path(a.out);
  options.log = &out;
  const ComparisonReport report = run_comparison(spec, options);
  write_comparison(a.out, report, spec);

  out << "fraction  arm  direction  k  mean  rel.diff%\n";
  for (const auto& row : report.summary) {
    out << format_double(row.fraction) << "  " << row.arm << "  " << to_string(row.direction) << "  " << row.k
        << "  " << std::fixed << std::setprecision(4) << row.mean << "  " << std::setprecision(2) << row.relative_diff
        << std::defaultfloat << '\n';
  }
  out << "wrote " << (fs::path(a.out) / "comparison.csv").string() << '\n';
  return kExitOk;
}

struct GenerateArgs {
  std::size_t n = 2560;
  std::uint64_t seed = 0;
  std::string out = "out";
};

int cmd_generate(const GenerateArgs& a, std::ostream& out) {
  const Dataset data = generate_dataset(a.n, a.seed);
  export_dataset(data, a.out);
  write_json(fs::path(a.out) / "manifest.json", Json{{"tool", "mmshare"},
                                                      {"version", kToolVersion},
                                                      {"n", a.n},
                                                      {"seed", a.seed},
                                                      {"artifacts", {"captions.tsv", "images/"}}});
  out << data.size() << " pairs (" << data.train.size() << " train, " << data.val.size() << " val, "
      << data.test.size() << " test) written to " << a.out << '\n';
  return kExitOk;
}

int cmd_params(const std::string& config_path, std::ostream& out) {
  const TrainConfig config = load_train_config(config_path);
  print_breakdown(out, params_for(config.model));
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Shared-encoder multimodal contrastive training", "mmshare"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Train one model and write checkpoint, loss trace and metrics");
  train_cmd->add_option("--config", train_args.config, "Run config file")->required();
  train_cmd->add_option("--seed", train_args.seed, "Override the config seed");
  train_cmd->add_option("--out", train_args.out, "Output directory")->envname("MMSHARE_OUT");

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "Retrieval recall of a checkpoint");
  eval_cmd->add_option("--checkpoint", eval_args.checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--split", eval_args.split, "train, val or test")->capture_default_str();
  eval_cmd->add_option("--k", eval_args.k, "Comma-separated k values")->delimiter(',');
  eval_cmd->add_option("--out", eval_args.out, "Output directory")->envname("MMSHARE_OUT");

  ExperimentArgs compare_args, sweep_args;
  auto add_experiment = [&](const char* name, const char* help, ExperimentArgs& a) {
    auto* cmd = app.add_subcommand(name, help);
    cmd->add_option("--spec", a.spec, "Experiment spec file")->required();
    cmd->add_option("--out", a.out, "Output directory")->envname("MMSHARE_OUT");
    cmd->add_option("--jobs", a.jobs, "Parallel runs")->envname("MMSHARE_JOBS");
    return cmd;
  };
  auto* compare_cmd = add_experiment("compare", "Matched-budget comparison of arms", compare_args);
  auto* sweep_cmd = add_experiment("sweep", "Comparison across training-set fractions", sweep_args);

  GenerateArgs gen_args;
  auto* gen_cmd = app.add_subcommand("generate", "Export a synthetic dataset");
  gen_cmd->add_option("--n", gen_args.n, "Number of pairs")->capture_default_str();
  gen_cmd->add_option("--seed", gen_args.seed, "Dataset seed")->capture_default_str();
  gen_cmd->add_option("--out", gen_args.out, "Output directory")->envname("MMSHARE_OUT");

  std::string params_config;
  auto* params_cmd = app.add_subcommand("params", "Parameter breakdown of a run config");
  params_cmd->add_option("--config", params_config, "Run config file")->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*train_cmd) return cmd_train(train_args, out);
    if (*eval_cmd) return cmd_eval(eval_args, out);
    if (*compare_cmd) return cmd_experiment(compare_args, false, out);
    if (*sweep_cmd) return cmd_experiment(sweep_args, true, out);
    if (*gen_cmd) return cmd_generate(gen_args, out);
    if (*params_cmd) return cmd_params(params_config, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DivergenceError& e) {
    err << "diverged: " << e.what() << '\n';
    return kExitDivergence;
  } catch (const CheckpointError& e) {
    err << "checkpoint error: " << e.what() << '\n';
    return kExitCheckpoint;
  } catch (const InputError& e) {
    err << "input error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitFailure;
}

}  // namespace mmshare
