#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>

#include "fido/binary_mask.hpp"
#include "fido/classifier.hpp"
#include "fido/objectives.hpp"
#include "fido/rng.hpp"
#include "fido/tensor.hpp"

namespace fido {

/// sqrt(theta_ssr * (1 - theta_sdr)), element-wise.
template <typename Scalar>
Tensor<Scalar> joint_mask(const Tensor<Scalar>& theta_ssr, const Tensor<Scalar>& theta_sdr) {
  if (theta_ssr.shape() != theta_sdr.shape()) {
    throw ShapeError("joint_mask: shapes differ " + shape_string(theta_ssr.shape()) + " vs " +
                     shape_string(theta_sdr.shape()));
  }
  return Tensor<Scalar>(theta_ssr.shape(), (theta_ssr.data() * (Scalar(1) - theta_sdr.data())).sqrt());
}

/// Total variation of an attribution map; lower means more coherent.
template <typename Scalar>
double coherency_tv(const Tensor<Scalar>& theta) {
  return double(total_variation(theta));
}

/// Grows the shorter side of `box` to a square around the same centre,
/// shifting and finally clipping it to the image.
inline BBox square_box(const BBox& box, Index width, Index height) {
  const Index side = std::min(std::max(box.width(), box.height()), std::min(width, height));
  auto fit = [side](Index lo, Index hi, Index limit) {
    const Index len = hi - lo;
    if (len >= side) return std::pair{lo, hi};
    Index start = lo - (side - len) / 2;
    start = std::clamp<Index>(start, 0, limit - side);
    return std::pair{start, start + side};
  };
  auto [x0, x1] = fit(box.x0, box.x1, width);
  auto [y0, y1] = fit(box.y0, box.y1, height);
  return {x0, y0, x1, y1};
}

/// Bilinear resize of the `box` region of a (C,H,W) image to (C,out_h,out_w),
/// sampling at pixel centres; identity when the box is the full image and the
/// size is unchanged.
template <typename Scalar>
Tensor<Scalar> crop_resize(const Tensor<Scalar>& image, const BBox& box, Index out_h, Index out_w) {
  if (image.rank() != 3) throw ShapeError("crop_resize expects (C,H,W), got " + shape_string(image.shape()));
  const Index c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (!box.valid_for(w, h)) {
    throw ShapeError("crop_resize: degenerate or out-of-bounds box (" + std::to_string(box.x0) + "," +
                     std::to_string(box.y0) + "," + std::to_string(box.x1) + "," + std::to_string(box.y1) + ")");
  }
  if (out_h < 1 || out_w < 1) throw ShapeError("crop_resize: output size must be positive");
  Tensor<Scalar> out({c, out_h, out_w});
  const double sy = double(box.height()) / double(out_h);
  const double sx = double(box.width()) / double(out_w);
  for (Index i = 0; i < out_h; ++i) {
    const double fy = std::clamp(double(box.y0) + (double(i) + 0.5) * sy - 0.5, double(box.y0), double(box.y1 - 1));
    const auto y0 = Index(std::floor(fy));
    const Index y1 = std::min(y0 + 1, box.y1 - 1);
    const double ty = fy - double(y0);
    for (Index j = 0; j < out_w; ++j) {
      const double fx =
          std::clamp(double(box.x0) + (double(j) + 0.5) * sx - 0.5, double(box.x0), double(box.x1 - 1));
      const auto x0 = Index(std::floor(fx));
      const Index x1 = std::min(x0 + 1, box.x1 - 1);
      const double tx = fx - double(x0);
      for (Index ch = 0; ch < c; ++ch) {
        auto at = [&](Index y, Index x) { return double(image[(ch * h + y) * w + x]); };
        const double v = (1 - ty) * ((1 - tx) * at(y0, x0) + tx * at(y0, x1)) + ty * ((1 - tx) * at(y1, x0) + tx * at(y1, x1));
        out[(ch * out_h + i) * out_w + j] = Scalar(v);
      }
    }
  }
  return out;
}

enum class TtaMethod { None, GtBbox, GtBboxOnly, RandomCrop, CenterCrop, FidoJoint };

inline const char* to_string(TtaMethod m) {
  switch (m) {
    case TtaMethod::None: return "none";
    case TtaMethod::GtBbox: return "gt_bbox";
    case TtaMethod::GtBboxOnly: return "gt_bbox_only";
    case TtaMethod::RandomCrop: return "random_crop";
    case TtaMethod::CenterCrop: return "center_crop";
    case TtaMethod::FidoJoint: return "fido_joint";
  }
  return "?";
}

inline TtaMethod parse_tta_method(const std::string& s) {
  for (auto m : {TtaMethod::None, TtaMethod::GtBbox, TtaMethod::GtBboxOnly, TtaMethod::RandomCrop,
                 TtaMethod::CenterCrop, TtaMethod::FidoJoint}) {
    if (s == to_string(m)) return m;
  }
  throw ConfigError("unknown TTA method '" + s + "'");
}

inline constexpr double kHeuristicCropFraction = 0.75;

inline BBox center_crop_box(Index width, Index height, double fraction = kHeuristicCropFraction) {
  const Index cw = std::max<Index>(1, Index(std::lround(double(width) * fraction)));
  const Index ch = std::max<Index>(1, Index(std::lround(double(height) * fraction)));
  const Index x0 = (width - cw) / 2, y0 = (height - ch) / 2;
  return {x0, y0, x0 + cw, y0 + ch};
}

inline BBox random_crop_box(Index width, Index height, Rng& rng, double fraction = kHeuristicCropFraction) {
  const Index cw = std::max<Index>(1, Index(std::lround(double(width) * fraction)));
  const Index ch = std::max<Index>(1, Index(std::lround(double(height) * fraction)));
  const auto x0 = Index(rng.below(std::uint64_t(width - cw + 1)));
  const auto y0 = Index(rng.below(std::uint64_t(height - ch + 1)));
  return {x0, y0, x0 + cw, y0 + ch};
}

/// Side information a TTA method may need.
template <typename Scalar>
struct TtaInputs {
  std::optional<BBox> gt_box;           // gt_bbox, gt_bbox_only
  const Tensor<Scalar>* joint = nullptr;  // fido_joint attribution map (H×W)
  std::uint64_t seed = 0;               // random_crop
  double threshold = 0.5;
};

/// Crop box chosen by `method` (squared); nullopt for TtaMethod::None.
template <typename Scalar>
std::optional<BBox> tta_crop_box(const Tensor<Scalar>& image, TtaMethod method, const TtaInputs<Scalar>& in) {
  const Index h = image.dim(1), w = image.dim(2);
  switch (method) {
    case TtaMethod::None: return std::nullopt;
    case TtaMethod::GtBbox:
    case TtaMethod::GtBboxOnly:
      if (!in.gt_box) throw ConfigError(std::string(to_string(method)) + " needs a ground-truth box");
      return square_box(*in.gt_box, w, h);
    case TtaMethod::RandomCrop: {
      Rng rng(in.seed);
      return square_box(random_crop_box(w, h, rng), w, h);
    }
    case TtaMethod::CenterCrop: return square_box(center_crop_box(w, h), w, h);
    case TtaMethod::FidoJoint:
      if (!in.joint) throw ConfigError("fido_joint needs an attribution map");
      return square_box(bbox_from_mask(threshold_mask(*in.joint, in.threshold)), w, h);
  }
  return std::nullopt;
}

/// Single-crop test-time augmentation. none: plain prediction;
/// gt_bbox_only: prediction on the crop; others: mean of the full-image and
/// crop probability vectors.
template <typename Scalar>
Tensor<Scalar> tta_predict(const ClassifierModel<Scalar>& model, const Tensor<Scalar>& image, TtaMethod method,
                           const TtaInputs<Scalar>& in = {}) {
  const std::optional<BBox> box = tta_crop_box(image, method, in);
  if (!box) return model.predict_proba(image);
  const InputSpec& spec = model.input_spec();
  Tensor<Scalar> crop = crop_resize(image, *box, spec.height, spec.width);
  if (method == TtaMethod::GtBboxOnly) return model.predict_proba(crop);
  Tensor<Scalar> full = model.predict_proba(image);
  Tensor<Scalar> part = model.predict_proba(crop);
  return Tensor<Scalar>(full.shape(), (full.data() + part.data()) / Scalar(2));
}

template <typename Scalar>
Index argmax(const Tensor<Scalar>& p) {
  Index best = 0;
  p.data().maxCoeff(&best);
  return best;
}

}  // namespace fido
