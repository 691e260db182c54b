#pragma once

// Desk-scale fine-grained task: every class shares the same low-frequency
// background distribution and differs only in the colour of one small square
// patch, whose pixels form the ground-truth mask.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fido/binary_mask.hpp"
#include "fido/tensor.hpp"

namespace fido {

struct SyntheticConfig {
  Index image_side = 32;
  Index channels = 3;
  Index patch_side = 6;
  Index classes = 2;
  Index samples_per_class = 400;
  double test_fraction = 0.25;
  std::uint64_t background_seed = 0;
  /// Std-dev of the per-pixel noise added on top of background and patch.
  double noise_amplitude = 0.03;
  /// Std-dev of the smooth per-channel background field.
  double background_amplitude = 0.18;
  /// Control experiment: leave the patch unpainted (gt mask is still recorded).
  bool ablate_patch = false;

  void validate() const;
};

struct LabeledSample {
  std::string id;
  Tensor<double> image;  // (C,H,W), values k/255
  int label = 0;
  BinaryMask gt_mask;    // H×W, patch_side² positives
};

struct Dataset {
  SyntheticConfig config;
  std::uint64_t seed = 0;
  std::vector<LabeledSample> train;
  std::vector<LabeledSample> test;
};

/// RGB colour of the class patch (hues from red towards yellow).
std::vector<double> patch_color(Index label, Index classes, Index channels);

/// Deterministic in (cfg, seed); train and test are disjoint.
Dataset generate(const SyntheticConfig& cfg, std::uint64_t seed);

/// Directory layout: manifest.json, images/<id>.png, masks/<id>.png (0/255).
void save_dataset(const std::string& dir, const Dataset& data);
Dataset load_dataset(const std::string& dir);

template <typename Scalar>
std::vector<Tensor<Scalar>> images_of(std::span<const LabeledSample> samples) {
  std::vector<Tensor<Scalar>> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.image.cast<Scalar>());
  return out;
}

std::vector<int> labels_of(std::span<const LabeledSample> samples);

}  // namespace fido
