#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <string>

#include "fido/errors.hpp"
#include "fido/tensor.hpp"

namespace fido {

/// H×W boolean mask, row-major like every image tensor.
using BinaryMask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Pixel box [x0, x1) × [y0, y1).
struct BBox {
  Index x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  Index width() const { return x1 - x0; }
  Index height() const { return y1 - y0; }
  bool valid_for(Index w, Index h) const { return 0 <= x0 && x0 < x1 && x1 <= w && 0 <= y0 && y0 < y1 && y1 <= h; }
  friend bool operator==(const BBox&, const BBox&) = default;
};

/// Positive iff value > tau (ties are negative).
template <typename Scalar>
BinaryMask threshold_mask(const Tensor<Scalar>& theta, double tau = 0.5) {
  if (theta.rank() != 2) throw ShapeError("threshold_mask expects an H×W map, got " + shape_string(theta.shape()));
  BinaryMask m(theta.dim(0), theta.dim(1));
  for (Index i = 0; i < theta.size(); ++i) m.data()[i] = double(theta[i]) > tau;
  return m;
}

/// Tight box around the positive pixels; an empty mask yields the full image.
inline BBox bbox_from_mask(const BinaryMask& mask) {
  const Index h = mask.rows(), w = mask.cols();
  BBox box{w, h, -1, -1};
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      if (!mask(y, x)) continue;
      box.x0 = std::min(box.x0, x);
      box.y0 = std::min(box.y0, y);
      box.x1 = std::max(box.x1, x + 1);
      box.y1 = std::max(box.y1, y + 1);
    }
  }
  if (box.x1 < 0) return {0, 0, w, h};
  return box;
}

/// |a ∩ b| / |a ∪ b|; 1 when both are empty.
inline double iou(const BinaryMask& a, const BinaryMask& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError("iou: mask shapes differ (" + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                     " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()) + ")");
  }
  const auto inter = (a && b).count();
  const auto uni = (a || b).count();
  if (uni == 0) return 1.0;
  return double(inter) / double(uni);
}

template <typename Scalar>
Tensor<Scalar> mask_to_tensor(const BinaryMask& m) {
  Tensor<Scalar> t({m.rows(), m.cols()});
  for (Index i = 0; i < m.size(); ++i) t[i] = m.data()[i] ? Scalar(1) : Scalar(0);
  return t;
}

}  // namespace fido
