#include "mmshare/checkpoint.hpp"

#include <algorithm>
#include <fstream>

#include "mmshare/binary_io.hpp"

namespace mmshare {

namespace {

constexpr std::uint64_t kMaxStringBytes = 1 << 20;
constexpr std::uint32_t kMaxRank = 8;

}  // namespace

void save_checkpoint(std::ostream& os, const TrainConfig& config, const EncoderModel<float>& model) {
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  binary::write_le<std::uint32_t>(os, kCheckpointVersion);
  binary::write_string(os, canonical_text(config));
  const auto& entries = model.parameters().entries();
  binary::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    const auto& p = *e.param;
    binary::write_string(os, p.name);
    binary::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(p.value.rank()));
    for (Index d : p.value.shape()) binary::write_le<std::uint64_t>(os, static_cast<std::uint64_t>(d));
    for (float v : p.value.storage()) binary::write_f32(os, v);
  }
  if (!os) throw CheckpointError("failed writing checkpoint");
}

void save_checkpoint(const std::filesystem::path& path, const TrainConfig& config, const EncoderModel<float>& model) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot open " + path.string() + " for writing");
  save_checkpoint(os, config, model);
}

Checkpoint load_checkpoint(std::istream& is) {
  char magic[sizeof(kCheckpointMagic)];
  if (!is.read(magic, sizeof(magic)) || !std::equal(magic, magic + sizeof(magic), kCheckpointMagic)) {
    throw CheckpointError("not a checkpoint (bad magic)");
  }
  const auto version = binary::read_le<std::uint32_t>(is);
  if (version != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));

  TrainConfig config;
  try {
    config = parse_train_config(binary::read_string(is, kMaxStringBytes));
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("embedded config is invalid: ") + e.what());
  }
  EncoderModel<float> model(config.model, config.seed);

  const auto count = binary::read_le<std::uint32_t>(is);
  const auto& entries = model.parameters().entries();
  if (count != entries.size()) {
    throw CheckpointError("checkpoint holds " + std::to_string(count) + " parameters, config implies " +
                          std::to_string(entries.size()));
  }
  for (const auto& e : entries) {
    auto& p = *e.param;
    const std::string name = binary::read_string(is, kMaxStringBytes);
    if (name != p.name) throw CheckpointError("expected parameter " + p.name + ", found " + name);
    const auto rank = binary::read_le<std::uint32_t>(is);
    if (rank == 0 || rank > kMaxRank) throw CheckpointError("bad rank for " + name);
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(static_cast<Index>(binary::read_le<std::uint64_t>(is)));
    if (shape != p.value.shape()) {
      throw CheckpointError("shape mismatch for " + name + ": " + shape_string(shape) + " vs " +
                            shape_string(p.value.shape()));
    }
    for (auto& v : p.value.storage()) v = binary::read_f32(is);
  }
  if (is.peek() != std::char_traits<char>::eof()) throw CheckpointError("trailing bytes after last parameter");
  return Checkpoint{std::move(config), std::move(model)};
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  return load_checkpoint(is);
}

}  // namespace mmshare
