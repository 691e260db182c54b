#include "fido/synthetic_data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "fido/png_io.hpp"
#include "fido/rng.hpp"

namespace fido {

namespace fs = std::filesystem;
using nlohmann::json;

void SyntheticConfig::validate() const {
  if (image_side < 4) throw ConfigError("--image-side must be >= 4");
  if (channels != 1 && channels != 3) throw ConfigError("channels must be 1 or 3");
  if (patch_side < 1) throw ConfigError("--patch-side must be >= 1");
  if (patch_side > image_side) {
    throw ConfigError("--patch-side (" + std::to_string(patch_side) + ") exceeds --image-side (" +
                      std::to_string(image_side) + ")");
  }
  if (classes < 2) throw ConfigError("--classes must be >= 2");
  if (samples_per_class < 2) throw ConfigError("--samples-per-class must be >= 2");
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ConfigError("--test-fraction must lie in (0,1)");
  if (!(noise_amplitude >= 0.0) || !(background_amplitude >= 0.0)) throw ConfigError("amplitudes must be >= 0");
}

std::vector<double> patch_color(Index label, Index classes, Index channels) {
  const double frac = classes > 1 ? double(label) / double(classes - 1) : 0.0;
  if (channels == 1) return {0.1 + 0.8 * frac};
  // HSV with hue in [0, 1/6]: red ... yellow, saturation 0.85, value 0.92.
  const double v = 0.92, s = 0.85;
  const double hue6 = frac;  // hue * 6 in [0, 1]
  return {v, v * (1.0 - s * (1.0 - hue6)), v * (1.0 - s)};
}

namespace {

double quantize(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

// Smooth field: bilinear interpolation of a coarse normal grid with one cell
// per 8 pixels.
std::vector<double> smooth_field(Rng& rng, Index side) {
  const Index cells = std::max<Index>(2, side / 8);
  const Index grid = cells + 1;
  std::vector<double> coarse(std::size_t(grid * grid));
  for (double& c : coarse) c = rng.normal();
  std::vector<double> field(std::size_t(side * side));
  const double scale = double(cells) / double(side);
  for (Index y = 0; y < side; ++y) {
    const double gy = (double(y) + 0.5) * scale;
    const Index y0 = std::min<Index>(Index(gy), cells - 1);
    const double ty = gy - double(y0);
    for (Index x = 0; x < side; ++x) {
      const double gx = (double(x) + 0.5) * scale;
      const Index x0 = std::min<Index>(Index(gx), cells - 1);
      const double tx = gx - double(x0);
      auto at = [&](Index yy, Index xx) { return coarse[std::size_t(yy * grid + xx)]; };
      field[std::size_t(y * side + x)] = (1 - ty) * ((1 - tx) * at(y0, x0) + tx * at(y0, x0 + 1)) +
                                         ty * ((1 - tx) * at(y0 + 1, x0) + tx * at(y0 + 1, x0 + 1));
    }
  }
  return field;
}

LabeledSample make_sample(const SyntheticConfig& cfg, std::uint64_t seed, Index index) {
  Rng rng(derive_seed(derive_seed(seed, cfg.background_seed), std::uint64_t(index)));
  const Index side = cfg.image_side, hw = side * side;
  LabeledSample s;
  s.label = int(index % cfg.classes);
  s.image = Tensor<double>({cfg.channels, side, side});
  for (Index c = 0; c < cfg.channels; ++c) {
    const std::vector<double> field = smooth_field(rng, side);
    for (Index p = 0; p < hw; ++p) s.image[c * hw + p] = 0.45 + cfg.background_amplitude * field[std::size_t(p)];
  }
  const auto span = std::uint64_t(side - cfg.patch_side + 1);
  const auto py = Index(rng.below(span));
  const auto px = Index(rng.below(span));
  s.gt_mask = BinaryMask::Constant(side, side, false);
  s.gt_mask.block(py, px, cfg.patch_side, cfg.patch_side).setConstant(true);
  if (!cfg.ablate_patch) {
    const std::vector<double> color = patch_color(s.label, cfg.classes, cfg.channels);
    for (Index c = 0; c < cfg.channels; ++c) {
      for (Index y = py; y < py + cfg.patch_side; ++y) {
        for (Index x = px; x < px + cfg.patch_side; ++x) s.image[c * hw + y * side + x] = color[std::size_t(c)];
      }
    }
  }
  for (Index i = 0; i < s.image.size(); ++i) s.image[i] = quantize(s.image[i] + cfg.noise_amplitude * rng.normal());
  char id[32];
  std::snprintf(id, sizeof(id), "s%05ld", long(index));
  s.id = id;
  return s;
}

json config_json(const SyntheticConfig& c) {
  return {{"image_side", c.image_side},           {"channels", c.channels},
          {"patch_side", c.patch_side},           {"classes", c.classes},
          {"samples_per_class", c.samples_per_class}, {"test_fraction", c.test_fraction},
          {"background_seed", c.background_seed}, {"noise_amplitude", c.noise_amplitude},
          {"background_amplitude", c.background_amplitude}, {"ablate_patch", c.ablate_patch}};
}

SyntheticConfig config_from_json(const json& j) {
  SyntheticConfig c;
  c.image_side = j.at("image_side").get<Index>();
  c.channels = j.at("channels").get<Index>();
  c.patch_side = j.at("patch_side").get<Index>();
  c.classes = j.at("classes").get<Index>();
  c.samples_per_class = j.at("samples_per_class").get<Index>();
  c.test_fraction = j.at("test_fraction").get<double>();
  c.background_seed = j.at("background_seed").get<std::uint64_t>();
  c.noise_amplitude = j.at("noise_amplitude").get<double>();
  c.background_amplitude = j.at("background_amplitude").get<double>();
  c.ablate_patch = j.value("ablate_patch", false);
  return c;
}

}  // namespace

Dataset generate(const SyntheticConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Dataset d;
  d.config = cfg;
  d.seed = seed;
  const auto test_per_class = std::max<Index>(1, Index(std::llround(double(cfg.samples_per_class) * cfg.test_fraction)));
  const Index train_per_class = cfg.samples_per_class - test_per_class;
  if (train_per_class < 1) throw ConfigError("--test-fraction leaves no training samples");
  const Index total = cfg.classes * cfg.samples_per_class;
  for (Index i = 0; i < total; ++i) {
    LabeledSample s = make_sample(cfg, seed, i);
    (i / cfg.classes < train_per_class ? d.train : d.test).push_back(std::move(s));
  }
  return d;
}

std::vector<int> labels_of(std::span<const LabeledSample> samples) {
  std::vector<int> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.label);
  return out;
}

void save_dataset(const std::string& dir, const Dataset& data) {
  fs::create_directories(fs::path(dir) / "images");
  fs::create_directories(fs::path(dir) / "masks");
  json manifest;
  manifest["config"] = config_json(data.config);
  manifest["seed"] = data.seed;
  for (const auto* split : {&data.train, &data.test}) {
    json list = json::array();
    for (const auto& s : *split) {
      const std::string image = "images/" + s.id + ".png";
      const std::string mask = "masks/" + s.id + ".png";
      png::write((fs::path(dir) / image).string(), png::from_tensor(s.image));
      png::write((fs::path(dir) / mask).string(), png::from_tensor(mask_to_tensor<double>(s.gt_mask)));
      list.push_back({{"id", s.id}, {"label", s.label}, {"image", image}, {"mask", mask}});
    }
    manifest[split == &data.train ? "train" : "test"] = std::move(list);
  }
  std::ofstream os(fs::path(dir) / "manifest.json", std::ios::binary);
  os << manifest.dump(2) << '\n';
  if (!os) throw std::runtime_error("cannot write manifest in " + dir);
}

Dataset load_dataset(const std::string& dir) {
  std::ifstream is(fs::path(dir) / "manifest.json");
  if (!is) throw std::runtime_error("no manifest.json in dataset directory " + dir);
  json manifest;
  try {
    manifest = json::parse(is);
  } catch (const json::exception& e) {
    throw FormatError("malformed manifest.json in " + dir + ": " + e.what());
  }
  Dataset d;
  d.config = config_from_json(manifest.at("config"));
  d.seed = manifest.at("seed").get<std::uint64_t>();
  for (const char* name : {"train", "test"}) {
    auto& split = std::string(name) == "train" ? d.train : d.test;
    for (const auto& entry : manifest.at(name)) {
      LabeledSample s;
      s.id = entry.at("id").get<std::string>();
      s.label = entry.at("label").get<int>();
      s.image = png::to_tensor<double>(png::read((fs::path(dir) / entry.at("image").get<std::string>()).string()));
      const auto mask = png::to_tensor<double>(png::read((fs::path(dir) / entry.at("mask").get<std::string>()).string()));
      s.gt_mask = threshold_mask(mask.reshaped({mask.dim(1), mask.dim(2)}), 0.5);
      split.push_back(std::move(s));
    }
  }
  return d;
}

}  // namespace fido
