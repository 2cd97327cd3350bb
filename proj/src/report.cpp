#include "mmshare/report.hpp"

#include <fstream>
#include <iomanip>

#include "mmshare/checkpoint.hpp"

namespace mmshare {

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  return out;
}

}  // namespace

void label_reports(std::array<RetrievalReport, 2>& reports, const TrainConfig& config) {
  const std::string hash = config_hash(config);
  for (auto& r : reports) {
    r.seed = config.seed;
    r.config_hash = hash;
    r.train_fraction = config.train_fraction;
  }
}

Json retrieval_record(const RetrievalReport& report, Split split) {
  Json recall = Json::object();
  for (std::size_t i = 0; i < report.ks.size(); ++i) recall[std::to_string(report.ks[i])] = report.recall[i];
  return Json{{"direction", to_string(report.direction)},
              {"split", to_string(split)},
              {"n_queries", report.n_queries},
              {"seed", report.seed},
              {"config_hash", report.config_hash},
              {"train_fraction", report.train_fraction},
              {"recall", recall}};
}

void write_jsonl(const std::filesystem::path& path, const std::vector<Json>& records) {
  auto out = open_out(path);
  for (const auto& r : records) out << r.dump() << '\n';
}

std::vector<Json> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read " + path.string());
  std::vector<Json> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(Json::parse(line));
  return out;
}

void write_loss_trace(const std::filesystem::path& path, const std::vector<double>& trace) {
  auto out = open_out(path);
  out << "step,loss\n" << std::setprecision(17);
  for (std::size_t i = 0; i < trace.size(); ++i) out << i + 1 << ',' << trace[i] << '\n';
}

Json run_manifest(const TrainConfig& config, const std::vector<std::string>& artifacts) {
  Json resolved = Json::object();
  for (const auto& e : parse_key_values(canonical_text(config))) resolved[e.key] = e.value;
  return Json{{"tool", "mmshare"},
              {"version", kToolVersion},
              {"config_hash", config_hash(config)},
              {"seed", config.seed},
              {"config", resolved},
              {"artifacts", artifacts}};
}

void write_json(const std::filesystem::path& path, const Json& value) {
  auto out = open_out(path);
  out << value.dump(2) << '\n';
}

void write_run_artifacts(const std::filesystem::path& dir, const TrainConfig& config, const TrainResult& result,
                         const std::array<RetrievalReport, 2>& reports, Split split) {
  std::filesystem::create_directories(dir);
  save_checkpoint(dir / "checkpoint.bin", config, result.model);
  write_loss_trace(dir / "loss_trace.csv", result.loss_trace);
  write_jsonl(dir / "metrics.jsonl", {retrieval_record(reports[0], split), retrieval_record(reports[1], split)});
  write_json(dir / "manifest.json",
             run_manifest(config, {"checkpoint.bin", "loss_trace.csv", "metrics.jsonl"}));
}

}  // namespace mmshare
