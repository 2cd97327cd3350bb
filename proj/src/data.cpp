#include "mmshare/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "mmshare/binary_io.hpp"
#include "mmshare/rng.hpp"

namespace mmshare {

namespace {

constexpr std::array<std::string_view, kNumShapes> kShapeNames{"square", "circle", "triangle", "cross"};
constexpr std::array<std::string_view, kNumColors> kColorNames{"red",     "green", "blue",  "yellow",
                                                               "magenta", "cyan",  "white", "orange"};
constexpr std::array<std::array<float, 3>, kNumColors> kPalette{{
    {1.0f, 0.0f, 0.0f},
    {0.0f, 1.0f, 0.0f},
    {0.0f, 0.0f, 1.0f},
    {1.0f, 1.0f, 0.0f},
    {1.0f, 0.0f, 1.0f},
    {0.0f, 1.0f, 1.0f},
    {1.0f, 1.0f, 1.0f},
    {1.0f, 0.5f, 0.0f},
}};

// Seeds for the split and subsample orderings are kept apart from scene seeds.
constexpr std::uint64_t kSplitSalt = 0x5b1170d3a9c4e2f1ULL;
constexpr std::uint64_t kSubsampleSalt = 0x2c9e7a15f04b6d83ULL;

bool covers(ObjectShape shape, int x, int y) {
  // Local cell coordinates 0..7, a one-pixel black margin on every side.
  const double cx = x + 0.5 - 4.0, cy = y + 0.5 - 4.0;
  if (x < 1 || x > 6 || y < 1 || y > 6) return false;
  switch (shape) {
    case ObjectShape::Square: return true;
    case ObjectShape::Circle: return cx * cx + cy * cy <= 9.0;
    case ObjectShape::Triangle: return std::abs(cx) <= 0.5 * (y - 0.5);
    case ObjectShape::Cross: return std::abs(cx) < 1.0 || std::abs(cy) < 1.0;
  }
  return false;
}

}  // namespace

std::string token_name(std::int32_t id) {
  if (id == kPadToken) return "<pad>";
  if (id == kClsReservedToken) return "<cls>";
  if (id >= kFirstShapeToken && id < kFirstColorToken) return std::string(kShapeNames[id - kFirstShapeToken]);
  if (id >= kFirstColorToken && id < kFirstPositionToken) return std::string(kColorNames[id - kFirstColorToken]);
  if (id >= kFirstPositionToken && id < kVocabSize) {
    const int cell = id - kFirstPositionToken;
    return "pos-" + std::to_string(cell / kGridSize) + "-" + std::to_string(cell % kGridSize);
  }
  throw InputError("token id " + std::to_string(id) + " outside vocabulary");
}

std::int32_t token_id(std::string_view name) {
  for (std::int32_t id = 0; id < kVocabSize; ++id)
    if (token_name(id) == name) return id;
  throw InputError("unknown token '" + std::string(name) + "'");
}

void validate_scene(const Scene& scene) {
  const auto k = scene.objects.size();
  if (k < 1 || k > static_cast<std::size_t>(kMaxObjects)) {
    throw InputError("scene must hold 1.." + std::to_string(kMaxObjects) + " objects, has " + std::to_string(k));
  }
  std::set<int> cells;
  for (const auto& o : scene.objects) {
    if (o.cell < 0 || o.cell >= kGridSize * kGridSize) throw InputError("object cell out of range");
    if (o.color < 0 || o.color >= kNumColors) throw InputError("object color out of range");
    if (!cells.insert(o.cell).second) throw InputError("two objects share cell " + std::to_string(o.cell));
  }
}

Scene random_scene(std::uint64_t seed) {
  Rng rng(seed);
  const int k = 1 + static_cast<int>(rng.below(kMaxObjects));
  std::vector<int> cells(kGridSize * kGridSize);
  for (int i = 0; i < kGridSize * kGridSize; ++i) cells[static_cast<std::size_t>(i)] = i;
  rng.shuffle(cells);
  Scene scene;
  scene.seed = seed;
  for (int i = 0; i < k; ++i) {
    SceneObject o;
    o.cell = cells[static_cast<std::size_t>(i)];
    o.shape = static_cast<ObjectShape>(rng.below(kNumShapes));
    o.color = static_cast<int>(rng.below(kNumColors));
    scene.objects.push_back(o);
  }
  std::sort(scene.objects.begin(), scene.objects.end(),
            [](const SceneObject& a, const SceneObject& b) { return a.cell < b.cell; });
  return scene;
}

TokenSequence caption_for(const Scene& scene) {
  validate_scene(scene);
  std::vector<SceneObject> objects = scene.objects;
  std::sort(objects.begin(), objects.end(), [](const SceneObject& a, const SceneObject& b) { return a.cell < b.cell; });
  TokenSequence caption;
  caption.reserve(kCaptionLength);
  for (const auto& o : objects) {
    caption.push_back(kFirstColorToken + o.color);
    caption.push_back(kFirstShapeToken + static_cast<std::int32_t>(o.shape));
    caption.push_back(kFirstPositionToken + o.cell);
  }
  caption.resize(kCaptionLength, kPadToken);
  return caption;
}

TensorF render(const Scene& scene) {
  validate_scene(scene);
  TensorF image({kImageChannels, kImageSize, kImageSize});
  for (const auto& o : scene.objects) {
    const int row0 = (o.cell / kGridSize) * kCellPixels, col0 = (o.cell % kGridSize) * kCellPixels;
    for (int y = 0; y < kCellPixels; ++y) {
      for (int x = 0; x < kCellPixels; ++x) {
        if (!covers(o.shape, x, y)) continue;
        for (int c = 0; c < kImageChannels; ++c)
          image[(c * kImageSize + row0 + y) * kImageSize + col0 + x] = kPalette[static_cast<std::size_t>(o.color)][static_cast<std::size_t>(c)];
      }
    }
  }
  return image;
}

std::string_view to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

Split parse_split(std::string_view text) {
  if (text == "train") return Split::Train;
  if (text == "val") return Split::Val;
  if (text == "test") return Split::Test;
  throw InputError("split: expected train, val or test, got '" + std::string(text) + "'");
}

const std::vector<std::size_t>& Dataset::indices(Split s) const {
  switch (s) {
    case Split::Train: return train;
    case Split::Val: return val;
    case Split::Test: return test;
  }
  return test;
}

Dataset generate_dataset(std::size_t n, std::uint64_t seed) {
  if (n < 1) throw InputError("generate_dataset: n must be >= 1");
  auto examples = std::make_shared<std::vector<PairedExample>>();
  examples->reserve(n);
  std::set<TokenSequence> seen;
  std::uint64_t draw = 0;
  for (std::size_t i = 0; i < n; ++i) {
    // Redraw until the caption is new, so every caption names exactly one image.
    for (int attempt = 0;; ++attempt) {
      if (attempt > 10000) throw InputError("generate_dataset: cannot find enough distinct scenes");
      Scene scene = random_scene(mix64(seed, draw++));
      TokenSequence caption = caption_for(scene);
      if (!seen.insert(caption).second) continue;
      PairedExample ex;
      ex.pair_id = i;
      ex.image = render(scene);
      ex.caption = std::move(caption);
      ex.scene = std::move(scene);
      examples->push_back(std::move(ex));
      break;
    }
  }

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  const std::uint64_t split_seed = seed ^ kSplitSalt;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto ha = mix64(split_seed, (*examples)[a].pair_id), hb = mix64(split_seed, (*examples)[b].pair_id);
    return ha != hb ? ha < hb : a < b;
  });
  const auto n_train = static_cast<std::size_t>(std::floor(0.8 * static_cast<double>(n)));
  const auto n_train_val = static_cast<std::size_t>(std::floor(0.9 * static_cast<double>(n)));

  Dataset d;
  d.seed = seed;
  d.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  d.val.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.begin() + static_cast<std::ptrdiff_t>(n_train_val));
  d.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train_val), order.end());
  for (auto* v : {&d.train, &d.val, &d.test}) std::sort(v->begin(), v->end());
  d.examples = std::move(examples);
  return d;
}

Dataset subsample(const Dataset& dataset, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw InputError("subsample: fraction must be in (0, 1], got " + std::to_string(fraction));
  }
  Dataset out = dataset;
  if (dataset.train.empty()) return out;
  const double n = static_cast<double>(dataset.train.size());
  auto keep = static_cast<std::size_t>(std::ceil(fraction * n - 1e-9));
  keep = std::clamp<std::size_t>(keep, 1, dataset.train.size());

  std::vector<std::size_t> order = dataset.train;
  const std::uint64_t s = seed ^ kSubsampleSalt;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto ha = mix64(s, dataset.at(a).pair_id), hb = mix64(s, dataset.at(b).pair_id);
    return ha != hb ? ha < hb : a < b;
  });
  order.resize(keep);
  std::sort(order.begin(), order.end());
  out.train = std::move(order);
  return out;
}

void export_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "images");
  std::vector<std::string_view> split_of(dataset.size(), "none");
  for (Split s : {Split::Train, Split::Val, Split::Test})
    for (std::size_t i : dataset.indices(s)) split_of[i] = to_string(s);

  std::ofstream index(dir / "captions.tsv");
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto& ex = dataset.at(i);
    std::ofstream img(dir / "images" / (std::to_string(ex.pair_id) + ".f32"), std::ios::binary);
    for (float v : ex.image.storage()) binary::write_f32(img, v);
    index << ex.pair_id << '\t' << split_of[i] << '\t';
    for (std::size_t t = 0; t < ex.caption.size(); ++t) index << (t ? " " : "") << ex.caption[t];
    index << '\n';
  }
  if (!index) throw InputError("export_dataset: failed writing " + (dir / "captions.tsv").string());
}

}  // namespace mmshare
