#pragma once

// Relaxed Bernoulli (concrete) dropout masks driven by per-pixel logits.
//
// Both samplers compute z = sigmoid((logit(theta) + logit(eta)) / t) with
// theta = sigmoid(vartheta). The original form evaluates the chain literally;
// the simplified form uses logit(sigmoid(v)) = v and reduces to
// sigmoid((vartheta + eta_hat) / t).

#include <cstdint>
#include <stdexcept>
#include <string>

#include "fido/autodiff.hpp"
#include "fido/rng.hpp"
#include "fido/tensor.hpp"

namespace fido {

enum class Formulation { Original, Simplified };

inline const char* to_string(Formulation f) { return f == Formulation::Original ? "original" : "simplified"; }

inline Formulation parse_formulation(const std::string& s) {
  if (s == "original") return Formulation::Original;
  if (s == "simplified") return Formulation::Simplified;
  throw ConfigError("unknown formulation '" + s + "' (expected original|simplified)");
}

inline constexpr double kDefaultTemperature = 0.1;

/// log(eta / (1 - eta)) for eta strictly inside (0, 1).
template <typename Scalar>
Scalar noise_logit(Scalar eta) {
  if (!(eta > Scalar(0) && eta < Scalar(1))) {
    throw std::domain_error("noise_logit: eta must lie in (0,1), got " + std::to_string(double(eta)));
  }
  return std::log(eta / (Scalar(1) - eta));
}

/// Unconstrained mask logits vartheta; theta = sigmoid(vartheta) is the
/// per-pixel drop probability.
template <typename Scalar>
struct MaskParams {
  Tensor<Scalar> logits;

  static MaskParams zeros(Index height, Index width) { return {Tensor<Scalar>({height, width})}; }

  Index height() const { return logits.dim(0); }
  Index width() const { return logits.dim(1); }

  Tensor<Scalar> theta() const {
    return Tensor<Scalar>(logits.shape(), (Scalar(1) + (-logits.data()).exp()).inverse());
  }
};

/// Uniform noise eta and its logit eta_hat, both of the same shape.
template <typename Scalar>
struct NoiseDraw {
  Tensor<Scalar> eta;
  Tensor<Scalar> eta_hat;

  static NoiseDraw draw(Rng& rng, const Shape& shape) {
    NoiseDraw d{Tensor<Scalar>(shape), Tensor<Scalar>(shape)};
    for (Index i = 0; i < d.eta.size(); ++i) {
      d.eta[i] = rng.open_unit<Scalar>();
      d.eta_hat[i] = noise_logit(d.eta[i]);
    }
    return d;
  }
};

template <typename Scalar>
struct MaskBatch {
  Tensor<Scalar> values;  // (B,H,W), entries in [0,1]
  Formulation formulation = Formulation::Simplified;
  Scalar temperature = Scalar(kDefaultTemperature);

  Index batch() const { return values.dim(0); }
};

namespace detail {
inline void check_temperature(double t) {
  if (!(t > 0.0)) throw ConfigError("temperature must be positive, got " + std::to_string(t));
}
}  // namespace detail

/// Literal chain: theta = sigmoid(v), then log(theta / (1 - theta)), then the
/// outer sigmoid. Saturated theta yields inf/nan intermediates, which a strict
/// tape rejects.
template <typename Scalar>
Var<Scalar> sample_original(const Var<Scalar>& logits, const Var<Scalar>& eta_hat, Scalar t) {
  detail::check_temperature(double(t));
  Var<Scalar> theta = sigmoid(logits);
  Var<Scalar> log_ratio = log(theta / (Scalar(1) - theta));
  return sigmoid((log_ratio + eta_hat) / t);
}

/// sigmoid((v + eta_hat) / t); finite for every finite input.
template <typename Scalar>
Var<Scalar> sample_simplified(const Var<Scalar>& logits, const Var<Scalar>& eta_hat, Scalar t) {
  detail::check_temperature(double(t));
  return sigmoid((logits + eta_hat) / t);
}

template <typename Scalar>
Var<Scalar> sample(Formulation f, const Var<Scalar>& logits, const Var<Scalar>& eta_hat, Scalar t) {
  return f == Formulation::Original ? sample_original(logits, eta_hat, t) : sample_simplified(logits, eta_hat, t);
}

/// Replicates an H×W tensor into (B,H,W).
template <typename Scalar>
Tensor<Scalar> replicate_rows(const Tensor<Scalar>& plane, Index rows) {
  Shape shape{rows};
  shape.insert(shape.end(), plane.shape().begin(), plane.shape().end());
  return Tensor<Scalar>(std::move(shape), plane.data().replicate(rows, 1));
}

/// Samples one mask per row of `eta_hat` (shape (B,H,W)) without recording
/// gradients.
template <typename Scalar>
MaskBatch<Scalar> sample_masks(const MaskParams<Scalar>& params, const Tensor<Scalar>& eta_hat, Scalar t,
                               Formulation f, NumericMode mode = NumericMode::Strict) {
  if (eta_hat.rank() != 3 || eta_hat.dim(1) != params.height() || eta_hat.dim(2) != params.width()) {
    throw ShapeError("noise " + shape_string(eta_hat.shape()) + " does not match mask " +
                     shape_string(params.logits.shape()));
  }
  Tape<Scalar> tape(mode);
  Var<Scalar> v = tape.constant(replicate_rows(params.logits, eta_hat.dim(0)));
  Var<Scalar> n = tape.constant(eta_hat);
  return {sample(f, v, n, t).value(), f, t};
}

/// B independent noise draws from a generator seeded with `seed`, each turned
/// into a mask with the chosen formulation. Identical seeds give bitwise
/// identical batches, and both formulations consume the same noise.
template <typename Scalar>
MaskBatch<Scalar> sample_batch(const MaskParams<Scalar>& params, Index batch, Scalar t, std::uint64_t seed,
                               Formulation f, NumericMode mode = NumericMode::Strict) {
  if (batch < 1) throw ConfigError("sample_batch: batch size must be >= 1");
  Rng rng(seed);
  auto noise = NoiseDraw<Scalar>::draw(rng, {batch, params.height(), params.width()});
  return sample_masks(params, noise.eta_hat, t, f, mode);
}

}  // namespace fido
