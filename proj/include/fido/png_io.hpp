#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "fido/errors.hpp"
#include "fido/tensor.hpp"

namespace fido::png {

/// 8-bit image with interleaved channels (1 = gray, 3 = RGB).
struct Image8 {
  int width = 0;
  int height = 0;
  int channels = 1;
  std::vector<std::uint8_t> pixels;
};

void write(const std::string& path, const Image8& image);
Image8 read(const std::string& path);

inline std::uint8_t to_byte(double v) {
  return std::uint8_t(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// (C,H,W) or (H,W) tensor in [0,1] to bytes; value = round(255 * v).
template <typename Scalar>
Image8 from_tensor(const Tensor<Scalar>& t) {
  Image8 img;
  if (t.rank() == 2) {
    img.channels = 1;
    img.height = int(t.dim(0));
    img.width = int(t.dim(1));
  } else if (t.rank() == 3 && (t.dim(0) == 1 || t.dim(0) == 3)) {
    img.channels = int(t.dim(0));
    img.height = int(t.dim(1));
    img.width = int(t.dim(2));
  } else {
    throw ShapeError("png: cannot encode tensor of shape " + shape_string(t.shape()));
  }
  const Index hw = Index(img.height) * img.width;
  img.pixels.resize(std::size_t(hw * img.channels));
  for (Index c = 0; c < img.channels; ++c) {
    for (Index p = 0; p < hw; ++p) img.pixels[std::size_t(p * img.channels + c)] = to_byte(double(t[c * hw + p]));
  }
  return img;
}

/// Bytes to a (C,H,W) tensor in [0,1].
template <typename Scalar>
Tensor<Scalar> to_tensor(const Image8& img) {
  const Index hw = Index(img.height) * img.width;
  Tensor<Scalar> t({Index(img.channels), Index(img.height), Index(img.width)});
  for (Index c = 0; c < img.channels; ++c) {
    for (Index p = 0; p < hw; ++p) t[c * hw + p] = Scalar(img.pixels[std::size_t(p * img.channels + c)]) / Scalar(255);
  }
  return t;
}

}  // namespace fido::png
