#pragma once

#include <filesystem>
#include <istream>
#include <ostream>

#include "mmshare/config.hpp"
#include "mmshare/model.hpp"

namespace mmshare {

/// Checkpoint layout, all integers little-endian:
///
///   magic      8 bytes  "MMSHCKPT"
///   version    u32      kCheckpointVersion
///   config     u64 length + bytes, canonical_text() of the run config
///   count      u32      number of parameters
///   per parameter, in model order:
///     name     u64 length + bytes
///     rank     u32
///     dims     rank x u64
///     payload  product(dims) x f32
///
/// Nothing may follow the last payload.
inline constexpr char kCheckpointMagic[8] = {'M', 'M', 'S', 'H', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  TrainConfig config;
  EncoderModel<float> model;
};

void save_checkpoint(std::ostream& os, const TrainConfig& config, const EncoderModel<float>& model);
void save_checkpoint(const std::filesystem::path& path, const TrainConfig& config, const EncoderModel<float>& model);

/// Throws CheckpointError on any malformed, truncated or inconsistent input.
Checkpoint load_checkpoint(std::istream& is);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace mmshare
