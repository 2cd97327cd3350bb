#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "mmshare/model.hpp"
#include "mmshare/tensor.hpp"

namespace mmshare {

enum class ObjectShape : std::uint8_t { Square, Circle, Triangle, Cross };

inline constexpr int kGridSize = 4;          // 4 x 4 layout of cells
inline constexpr int kCellPixels = 8;
inline constexpr int kImageSize = kGridSize * kCellPixels;
inline constexpr int kImageChannels = 3;
inline constexpr int kMaxObjects = 4;
inline constexpr int kNumShapes = 4;
inline constexpr int kNumColors = 8;
inline constexpr int kCaptionLength = 12;    // kMaxObjects x (color, shape, position)

// Vocabulary layout.
inline constexpr std::int32_t kPadToken = 0;
inline constexpr std::int32_t kClsReservedToken = 1;
inline constexpr std::int32_t kFirstShapeToken = 2;
inline constexpr std::int32_t kFirstColorToken = kFirstShapeToken + kNumShapes;
inline constexpr std::int32_t kFirstPositionToken = kFirstColorToken + kNumColors;
inline constexpr std::int32_t kVocabSize = kFirstPositionToken + kGridSize * kGridSize;

std::string token_name(std::int32_t id);
std::int32_t token_id(std::string_view name);

struct SceneObject {
  ObjectShape shape = ObjectShape::Square;
  int color = 0;  // palette index
  int cell = 0;   // row * kGridSize + col

  friend bool operator==(const SceneObject&, const SceneObject&) = default;
};

/// Objects sorted by cell (row-major), no two sharing a cell, 1..4 of them.
struct Scene {
  std::vector<SceneObject> objects;
  std::uint64_t seed = 0;
};

/// Throws InputError if the scene breaks its invariants.
void validate_scene(const Scene& scene);

Scene random_scene(std::uint64_t seed);

/// (color, shape, position) per object in row-major cell order, padded.
TokenSequence caption_for(const Scene& scene);

/// Flat-colored primitives on black, values in [0, 1], shape 3 x 32 x 32.
TensorF render(const Scene& scene);

struct PairedExample {
  std::uint64_t pair_id = 0;
  Scene scene;
  TensorF image;
  TokenSequence caption;
};

enum class Split { Train, Val, Test };
std::string_view to_string(Split s);
Split parse_split(std::string_view text);

/// Examples plus disjoint train/val/test index lists. Examples are shared
/// between a dataset and its subsamples.
struct Dataset {
  std::shared_ptr<const std::vector<PairedExample>> examples;
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
  std::uint64_t seed = 0;

  const std::vector<std::size_t>& indices(Split s) const;
  std::size_t size() const { return examples ? examples->size() : 0; }
  const PairedExample& at(std::size_t index) const { return (*examples)[index]; }
};

/// n examples with unique captions, pair_id = position. Split 80/10/10 by a
/// seeded hash of pair_id. Pure function of (n, seed).
Dataset generate_dataset(std::size_t n, std::uint64_t seed);

/// Keeps ceil(fraction * |train|) training examples; val and test untouched.
/// Subsamples with equal seeds are nested.
Dataset subsample(const Dataset& dataset, double fraction, std::uint64_t seed);

/// Writes images/<pair_id>.f32 (raw little-endian float32, 3x32x32, CHW) and
/// captions.tsv with one `pair_id<TAB>split<TAB>id id ...` line per example.
void export_dataset(const Dataset& dataset, const std::filesystem::path& dir);

}  // namespace mmshare
