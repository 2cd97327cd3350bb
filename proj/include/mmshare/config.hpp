#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "mmshare/model.hpp"
#include "mmshare/optim.hpp"

namespace mmshare {

/// Everything that determines one training run.
struct TrainConfig {
  ModelConfig model;
  std::size_t steps = 2000;
  std::size_t batch_size = 64;
  AdamConfig adam;
  std::uint64_t seed = 0;
  std::size_t eval_every = 0;  // 0 = only at the end
  std::vector<Index> eval_k{1, 5, 10};
  std::size_t data_size = 2560;
  std::uint64_t data_seed = 0;
  double train_fraction = 1.0;

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

/// One `key = value` line; `section` is the enclosing `[...]` header text or
/// empty for the top level.
struct ConfigEntry {
  std::string section;
  std::string key;
  std::string value;
  int line = 0;
};

/// Line-oriented parser shared by run configs and experiment specs. `#` starts
/// a comment; blank lines are ignored; `[name]` opens a section and is itself
/// reported as an entry with an empty key.
std::vector<ConfigEntry> parse_key_values(std::string_view text);

std::string read_text_file(const std::filesystem::path& path);

/// Applies one entry to a config. Returns false for unknown keys; throws
/// ConfigError for malformed values. `auto` (stored as 0) is accepted for
/// modality_dim and proj_dim.
bool apply_config_entry(TrainConfig& config, const ConfigEntry& entry);

/// Fills derived defaults: modality_dim for the feature-vector identifier and
/// proj_dim = d_model when left at 0.
void resolve_defaults(TrainConfig& config);

/// Parses, resolves and validates a run config. Unknown keys are errors.
TrainConfig parse_train_config(std::string_view text);
TrainConfig load_train_config(const std::filesystem::path& path);

/// Resolved config as `key = value` lines in a fixed key order; parsing it
/// back yields an identical config.
std::string canonical_text(const TrainConfig& config);

/// 16 hex digits of FNV-1a 64 over canonical_text.
std::string config_hash(const TrainConfig& config);
std::uint64_t fnv1a64(std::string_view bytes);

/// Shortest decimal text that round-trips the double.
std::string format_double(double value);

std::vector<Index> parse_index_list(std::string_view field, std::string_view text);
std::vector<double> parse_double_list(std::string_view field, std::string_view text);

}  // namespace mmshare
