#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fido/autodiff.hpp"
#include "fido/concrete_dropout.hpp"
#include "fido/rng.hpp"
#include "fido/tensor.hpp"

namespace fido {

enum class InfillKind { GaussianBlur, Constant, UniformRandom };

inline const char* to_string(InfillKind k) {
  switch (k) {
    case InfillKind::GaussianBlur: return "gaussian_blur";
    case InfillKind::Constant: return "constant";
    case InfillKind::UniformRandom: return "uniform_random";
  }
  return "?";
}

inline InfillKind parse_infill_kind(const std::string& s) {
  if (s == "gaussian_blur" || s == "blur") return InfillKind::GaussianBlur;
  if (s == "constant") return InfillKind::Constant;
  if (s == "uniform_random") return InfillKind::UniformRandom;
  throw ConfigError("unsupported infill kind '" + s + "'");
}

struct InfillSpec {
  InfillKind kind = InfillKind::GaussianBlur;
  /// Blur standard deviation in pixels; unset means min(H, W) / 8.
  std::optional<double> blur_sigma;
  double constant_value = 0.0;
  std::uint64_t seed = 0;
};

/// Normalized 1-D Gaussian truncated at radius ceil(3 sigma).
inline std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma > 0.0)) throw ConfigError("blur_sigma must be positive");
  const auto radius = Index(std::ceil(3.0 * sigma));
  std::vector<double> k(std::size_t(2 * radius + 1));
  double total = 0.0;
  for (Index i = -radius; i <= radius; ++i) {
    const double v = std::exp(-double(i * i) / (2.0 * sigma * sigma));
    k[std::size_t(i + radius)] = v;
    total += v;
  }
  for (double& v : k) v /= total;
  return k;
}

/// Half-sample symmetric reflection of an index into [0, n).
inline Index reflect_index(Index i, Index n) {
  const Index period = 2 * n;
  Index m = i % period;
  if (m < 0) m += period;
  return m < n ? m : period - 1 - m;
}

/// Separable Gaussian blur of a (C,H,W) image with reflected borders.
template <typename Scalar>
Tensor<Scalar> gaussian_blur(const Tensor<Scalar>& image, double sigma) {
  if (image.rank() != 3) throw ShapeError("gaussian_blur expects (C,H,W), got " + shape_string(image.shape()));
  const Index c = image.dim(0), h = image.dim(1), w = image.dim(2);
  const std::vector<double> k = gaussian_kernel(sigma);
  const Index radius = Index(k.size() / 2);
  std::vector<double> tmp(std::size_t(c * h * w));
  for (Index ch = 0; ch < c; ++ch) {
    for (Index i = 0; i < h; ++i) {
      for (Index j = 0; j < w; ++j) {
        double acc = 0.0;
        for (Index d = -radius; d <= radius; ++d) {
          acc += k[std::size_t(d + radius)] * double(image[(ch * h + i) * w + reflect_index(j + d, w)]);
        }
        tmp[std::size_t((ch * h + i) * w + j)] = acc;
      }
    }
  }
  Tensor<Scalar> out(image.shape());
  for (Index ch = 0; ch < c; ++ch) {
    for (Index i = 0; i < h; ++i) {
      for (Index j = 0; j < w; ++j) {
        double acc = 0.0;
        for (Index d = -radius; d <= radius; ++d) {
          acc += k[std::size_t(d + radius)] * tmp[std::size_t((ch * h + reflect_index(i + d, h)) * w + j)];
        }
        out[(ch * h + i) * w + j] = Scalar(acc);
      }
    }
  }
  return out;
}

/// Replacement content for perturbed pixels, same shape as the (C,H,W) input.
template <typename Scalar>
Tensor<Scalar> make_infill(const Tensor<Scalar>& image, const InfillSpec& spec) {
  if (image.rank() != 3) throw ShapeError("make_infill expects (C,H,W), got " + shape_string(image.shape()));
  switch (spec.kind) {
    case InfillKind::GaussianBlur: {
      const double sigma = spec.blur_sigma.value_or(double(std::min(image.dim(1), image.dim(2))) / 8.0);
      return gaussian_blur(image, sigma);
    }
    case InfillKind::Constant:
      return Tensor<Scalar>::full(image.shape(), Scalar(spec.constant_value));
    case InfillKind::UniformRandom: {
      Rng rng(spec.seed);
      Tensor<Scalar> out(image.shape());
      for (Index i = 0; i < out.size(); ++i) out[i] = Scalar(rng.uniform());
      return out;
    }
  }
  throw ConfigError("unsupported infill kind");
}

/// phi = (1 - z) * x + z * x_hat for every mask row. x and x_hat are (C,H,W);
/// z is (B,H,W) and covers all channels of a pixel. Result: (B,C,H,W).
/// Differentiable w.r.t. z: d phi / d z = x_hat - x.
template <typename Scalar>
Var<Scalar> compose(const Tensor<Scalar>& x, const Tensor<Scalar>& x_hat, const Var<Scalar>& z) {
  if (x.rank() != 3 || x.shape() != x_hat.shape()) {
    throw ShapeError("compose: image " + shape_string(x.shape()) + " and infill " + shape_string(x_hat.shape()) +
                     " must both be (C,H,W)");
  }
  const Index c = x.dim(0), h = x.dim(1), w = x.dim(2), hw = h * w;
  if (z.shape().size() != 3 || z.shape()[1] != h || z.shape()[2] != w) {
    throw ShapeError("compose: mask " + shape_string(z.shape()) + " does not match image " + shape_string(x.shape()));
  }
  const Index b = z.shape()[0];
  using Array = typename Tensor<Scalar>::Array;
  auto diff = std::make_shared<Array>(x_hat.data() - x.data());
  Tensor<Scalar> out({b, c, h, w});
  const Array& zv = z.value().data();
  for (Index r = 0; r < b; ++r) {
    for (Index ch = 0; ch < c; ++ch) {
      out.data().segment((r * c + ch) * hw, hw) =
          (Scalar(1) - zv.segment(r * hw, hw)) * x.data().segment(ch * hw, hw) +
          zv.segment(r * hw, hw) * x_hat.data().segment(ch * hw, hw);
    }
  }
  const std::size_t iz = z.id();
  return z.tape().record("compose", std::move(out), {z},
                         [iz, diff, b, c, hw](Tape<Scalar>& t, const Tensor<Scalar>& g) {
                           auto& dz = t.grad(iz).data();
                           for (Index r = 0; r < b; ++r) {
                             for (Index ch = 0; ch < c; ++ch) {
                               dz.segment(r * hw, hw) += g.data().segment((r * c + ch) * hw, hw) *
                                                         diff->segment(ch * hw, hw);
                             }
                           }
                         });
}

template <typename Scalar>
Tensor<Scalar> compose(const Tensor<Scalar>& x, const Tensor<Scalar>& x_hat, const MaskBatch<Scalar>& z) {
  Tape<Scalar> tape(NumericMode::Permissive);
  return compose(x, x_hat, tape.constant(z.values)).value();
}

}  // namespace fido
