#include <doctest.h>

#include <algorithm>
#include <fstream>
#include <set>

#include "mmshare/data.hpp"

using namespace mmshare;

namespace {

bool is_subset(std::vector<std::size_t> small, std::vector<std::size_t> large) {
  std::sort(small.begin(), small.end());
  std::sort(large.begin(), large.end());
  return std::includes(large.begin(), large.end(), small.begin(), small.end());
}

}  // namespace

TEST_CASE("vocabulary layout") {
  CHECK(kVocabSize == 30);
  CHECK(token_name(kPadToken) == "<pad>");
  CHECK(token_id("red") >= kFirstColorToken);
  CHECK(token_name(token_id("triangle")) == "triangle");
  CHECK(token_name(token_id("pos-3-2")) == "pos-3-2");
  CHECK_THROWS_AS(token_name(kVocabSize), InputError);
  CHECK_THROWS_AS(token_id("teal-ish"), InputError);
}

TEST_CASE("caption of a single red square in the top-left cell") {
  Scene s;
  s.objects.push_back({ObjectShape::Square, 0, 0});
  const TokenSequence cap = caption_for(s);
  REQUIRE(cap.size() == static_cast<std::size_t>(kCaptionLength));
  CHECK(token_name(cap[0]) == "red");
  CHECK(token_name(cap[1]) == "square");
  CHECK(token_name(cap[2]) == "pos-0-0");
  for (std::size_t i = 3; i < cap.size(); ++i) CHECK(cap[i] == kPadToken);
}

TEST_CASE("captions list objects in cell order") {
  Scene s;
  s.objects.push_back({ObjectShape::Circle, 1, 2});
  s.objects.push_back({ObjectShape::Cross, 3, 13});
  const TokenSequence cap = caption_for(s);
  CHECK(token_name(cap[2]) == "pos-0-2");
  CHECK(token_name(cap[4]) == "cross");
  CHECK(token_name(cap[5]) == "pos-3-1");
}

TEST_CASE("scene invariants") {
  Scene empty;
  CHECK_THROWS_AS(validate_scene(empty), InputError);
  Scene clash;
  clash.objects = {{ObjectShape::Square, 0, 5}, {ObjectShape::Circle, 1, 5}};
  CHECK_THROWS_AS(validate_scene(clash), InputError);
  Scene crowded;
  for (int i = 0; i < 5; ++i) crowded.objects.push_back({ObjectShape::Square, 0, i});
  CHECK_THROWS_AS(validate_scene(crowded), InputError);
  for (std::uint64_t seed = 0; seed < 200; ++seed) CHECK_NOTHROW(validate_scene(random_scene(seed)));
}

TEST_CASE("rendering: flat colours on black inside the object's cell") {
  Scene s;
  s.objects.push_back({ObjectShape::Square, 0, 5});  // row 1, col 1
  const TensorF img = render(s);
  REQUIRE(img.shape() == Shape{3, 32, 32});
  auto px = [&](int c, int y, int x) { return img[(c * 32 + y) * 32 + x]; };
  CHECK(px(0, 12, 12) > 0.0f);
  CHECK(px(0, 8, 8) == 0.0f);  // one-pixel margin
  CHECK(px(0, 2, 2) == 0.0f);
  for (Index i = 0; i < img.size(); ++i) {
    CHECK(img[i] >= 0.0f);
    CHECK(img[i] <= 1.0f);
  }
  CHECK(render(s) == img);
}

TEST_CASE("shapes render differently") {
  std::vector<TensorF> imgs;
  for (auto shape : {ObjectShape::Square, ObjectShape::Circle, ObjectShape::Triangle, ObjectShape::Cross}) {
    Scene s;
    s.objects.push_back({shape, 2, 0});
    imgs.push_back(render(s));
  }
  for (std::size_t a = 0; a < imgs.size(); ++a)
    for (std::size_t b = a + 1; b < imgs.size(); ++b) CHECK_FALSE(imgs[a] == imgs[b]);
}

TEST_CASE("generation is deterministic") {
  const Dataset a = generate_dataset(50, 7), b = generate_dataset(50, 7), c = generate_dataset(50, 8);
  bool same = a.train == b.train && a.val == b.val && a.test == b.test;
  bool differs = false;
  for (std::size_t i = 0; i < 50; ++i) {
    same = same && a.at(i).caption == b.at(i).caption && a.at(i).image == b.at(i).image;
    differs = differs || !(a.at(i).caption == c.at(i).caption);
  }
  CHECK(same);
  CHECK(differs);
}

TEST_CASE("splits are disjoint and cover the dataset") {
  for (std::size_t n : {1, 2, 10, 37, 2560}) {
    CAPTURE(n);
    const Dataset d = generate_dataset(n, 3);
    std::set<std::size_t> all(d.train.begin(), d.train.end());
    all.insert(d.val.begin(), d.val.end());
    all.insert(d.test.begin(), d.test.end());
    CHECK(d.train.size() + d.val.size() + d.test.size() == n);
    CHECK(all.size() == n);
  }
  const Dataset d = generate_dataset(2560, 0);
  CHECK(d.train.size() == 2048);
  CHECK(d.test.size() == 256);
}

TEST_CASE("examples: unique ids and captions, valid tokens") {
  const Dataset d = generate_dataset(500, 1);
  std::set<TokenSequence> captions;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto& ex = d.at(i);
    CHECK(ex.pair_id == i);
    CHECK(ex.caption == caption_for(ex.scene));
    CHECK(ex.image == render(ex.scene));
    for (auto id : ex.caption) CHECK((id >= 0 && id < kVocabSize));
    captions.insert(ex.caption);
  }
  CHECK(captions.size() == d.size());
}

TEST_CASE("degenerate sizes") { CHECK_THROWS_AS(generate_dataset(0, 1), InputError); }

TEST_CASE("subsample sizes, identity and nesting") {
  const Dataset d = generate_dataset(1250, 4);
  REQUIRE(d.train.size() == 1000);
  CHECK(subsample(d, 1.0, 9).train == d.train);
  CHECK(subsample(d, 0.5, 9).train.size() == 500);
  CHECK(subsample(d, 0.25, 9).train.size() == 250);
  CHECK(subsample(d, 0.001, 9).train.size() == 1);
  CHECK(is_subset(subsample(d, 0.25, 9).train, subsample(d, 0.5, 9).train));
  CHECK(is_subset(subsample(d, 0.5, 9).train, d.train));
  CHECK(subsample(d, 0.5, 9).test == d.test);
  CHECK(subsample(d, 0.5, 9).val == d.val);
  CHECK_THROWS_AS(subsample(d, 0.0, 9), InputError);
  CHECK_THROWS_AS(subsample(d, 1.5, 9), InputError);
}

TEST_CASE("split names") {
  CHECK(parse_split("test") == Split::Test);
  CHECK(to_string(Split::Val) == "val");
  CHECK_THROWS_AS(parse_split("holdout"), InputError);
}

TEST_CASE("export writes raw images and a caption index") {
  const auto dir = std::filesystem::temp_directory_path() / "mmshare_test_export";
  std::filesystem::remove_all(dir);
  const Dataset d = generate_dataset(5, 2);
  export_dataset(d, dir);
  CHECK(std::filesystem::file_size(dir / "images" / "3.f32") == 3 * 32 * 32 * 4);
  std::ifstream in(dir / "captions.tsv");
  int lines = 0;
  for (std::string line; std::getline(in, line);) ++lines;
  CHECK(lines == 5);
  std::filesystem::remove_all(dir);
}
