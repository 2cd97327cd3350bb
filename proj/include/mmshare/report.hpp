#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmshare/config.hpp"
#include "mmshare/train.hpp"

namespace mmshare {

inline constexpr const char* kToolVersion = "0.1.0";

using Json = nlohmann::ordered_json;

/// Stamps seed, config hash and train fraction from the config onto reports.
void label_reports(std::array<RetrievalReport, 2>& reports, const TrainConfig& config);

/// One JSON object per direction:
/// {"direction","split","n_queries","seed","config_hash","train_fraction","recall":{"1":..}}
Json retrieval_record(const RetrievalReport& report, Split split);

void write_jsonl(const std::filesystem::path& path, const std::vector<Json>& records);
std::vector<Json> read_jsonl(const std::filesystem::path& path);

/// `step,loss` rows, one per training step.
void write_loss_trace(const std::filesystem::path& path, const std::vector<double>& trace);

/// Resolved config, its hash, seed, artifact names relative to the manifest
/// and tool version. Contains nothing run-dependent beyond those.
Json run_manifest(const TrainConfig& config, const std::vector<std::string>& artifacts);
void write_json(const std::filesystem::path& path, const Json& value);

/// checkpoint.bin, loss_trace.csv, metrics.jsonl and manifest.json in dir.
void write_run_artifacts(const std::filesystem::path& dir, const TrainConfig& config, const TrainResult& result,
                         const std::array<RetrievalReport, 2>& reports, Split split);

}  // namespace mmshare
