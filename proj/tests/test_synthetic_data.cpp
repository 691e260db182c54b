#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "fido/synthetic_data.hpp"
#include "test_support.hpp"

using namespace fido;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

}  // namespace

TEST_CASE("defaults and ground truth") {
  SyntheticConfig cfg;
  cfg.samples_per_class = 20;
  const Dataset d = generate(cfg, 1);
  CHECK(d.train.size() + d.test.size() == 40);
  for (const auto* split : {&d.train, &d.test}) {
    for (const auto& s : *split) {
      CHECK(s.gt_mask.count() == 36);
      CHECK(s.image.shape() == Shape{3, 32, 32});
      CHECK((s.image.data() >= 0.0).all());
      CHECK((s.image.data() <= 1.0).all());
      CHECK(((s.image.data() * 255.0 - (s.image.data() * 255.0).round()).abs() < 1e-9).all());
      const BBox box = bbox_from_mask(s.gt_mask);
      CHECK(box.width() == 6);
      CHECK(box.height() == 6);
    }
  }
}

TEST_CASE("validation") {
  SyntheticConfig cfg;
  cfg.patch_side = 64;
  CHECK_THROWS_WITH_AS(generate(cfg, 1), doctest::Contains("--image-side"), ConfigError);
  CHECK_THROWS_WITH_AS(generate(cfg, 1), doctest::Contains("--patch-side"), ConfigError);
  cfg = SyntheticConfig{};
  cfg.classes = 1;
  CHECK_THROWS_AS(generate(cfg, 1), ConfigError);
  cfg = SyntheticConfig{};
  cfg.test_fraction = 1.0;
  CHECK_THROWS_AS(generate(cfg, 1), ConfigError);
}

TEST_CASE("same seed gives identical dataset bytes") {
  SyntheticConfig cfg;
  cfg.samples_per_class = 10;
  const auto a = fido::test::scratch_dir("data_a"), b = fido::test::scratch_dir("data_b");
  save_dataset(a.string(), generate(cfg, 1));
  save_dataset(b.string(), generate(cfg, 1));
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    ++files;
    CHECK(slurp(e.path()) == slurp(b / fs::relative(e.path(), a)));
  }
  CHECK(files == 1 + 2 * 20);
  const Dataset back = load_dataset(a.string());
  const Dataset orig = generate(cfg, 1);
  REQUIRE(back.test.size() == orig.test.size());
  for (std::size_t i = 0; i < back.test.size(); ++i) {
    CHECK(back.test[i].id == orig.test[i].id);
    CHECK(back.test[i].label == orig.test[i].label);
    CHECK((back.test[i].gt_mask == orig.test[i].gt_mask).all());
    CHECK(((back.test[i].image.data() - orig.test[i].image.data()).abs() < 1e-12).all());
  }
  CHECK(!(generate(cfg, 2).train[0].image == orig.train[0].image));
}

TEST_CASE("malformed manifest is reported") {
  const auto dir = fido::test::scratch_dir("bad_manifest");
  std::ofstream(dir / "manifest.json") << "{ not json";
  CHECK_THROWS_AS(load_dataset(dir.string()), FormatError);
  CHECK_THROWS_AS(load_dataset((dir / "absent").string()), std::runtime_error);
}

TEST_CASE("split is disjoint and balanced") {
  SyntheticConfig cfg;
  cfg.samples_per_class = 40;
  const Dataset d = generate(cfg, 3);
  std::set<std::string> ids;
  for (const auto& s : d.train) ids.insert(s.id);
  for (const auto& s : d.test) CHECK(ids.count(s.id) == 0);
  CHECK(d.test.size() == 20);
  int ones = 0;
  for (const auto& s : d.test) ones += s.label;
  CHECK(ones == 10);
}

TEST_CASE("pixels outside the patch are identically distributed across classes") {
  SyntheticConfig cfg;
  cfg.samples_per_class = 1000;
  const Dataset d = generate(cfg, 11);
  double sum[2][3] = {}, sq[2][3] = {}, n[2] = {};
  for (const auto* split : {&d.train, &d.test}) {
    for (const auto& s : *split) {
      for (Index c = 0; c < 3; ++c) {
        for (Index p = 0; p < 1024; ++p) {
          if (s.gt_mask.data()[p]) continue;
          const double v = s.image[c * 1024 + p];
          sum[s.label][c] += v;
          sq[s.label][c] += v * v;
        }
      }
      n[s.label] += double(1024 - 36);
    }
  }
  for (Index c = 0; c < 3; ++c) {
    const double m0 = sum[0][c] / n[0], m1 = sum[1][c] / n[1];
    const double v0 = sq[0][c] / n[0] - m0 * m0, v1 = sq[1][c] / n[1] - m1 * m1;
    CHECK(std::abs(m0 - m1) < 0.01);
    CHECK(std::abs(v0 - v1) < 0.01);
  }
}

TEST_CASE("patch colours differ between classes") {
  const auto red = patch_color(0, 2, 3), yellow = patch_color(1, 2, 3);
  CHECK(red != yellow);
  CHECK(red[0] == yellow[0]);
  CHECK(yellow[1] > red[1]);
}
