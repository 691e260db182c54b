#pragma once

#include <cmath>
#include <optional>
#include <string>

#include "fido/autodiff.hpp"
#include "fido/tensor.hpp"

namespace fido {

/// SSR keeps the smallest region that sustains the score; SDR perturbs the
/// smallest region that destroys it.
enum class ObjectiveKind { SSR, SDR };

inline const char* to_string(ObjectiveKind k) { return k == ObjectiveKind::SSR ? "ssr" : "sdr"; }

inline ObjectiveKind parse_objective(const std::string& s) {
  if (s == "ssr" || s == "SSR") return ObjectiveKind::SSR;
  if (s == "sdr" || s == "SDR") return ObjectiveKind::SDR;
  throw ConfigError("unknown objective '" + s + "' (expected ssr|sdr)");
}

struct LossConfig {
  double lambda_l1 = 0.001;
  double tv_weight = 0.01;
  double prob_clamp_eps = 1e-6;
  /// Apply TV to every sampled mask (inside the batch mean) instead of to theta.
  bool tv_on_samples = false;

  void validate() const {
    if (!(lambda_l1 >= 0.0)) throw ConfigError("lambda_l1 must be >= 0");
    if (!(tv_weight >= 0.0)) throw ConfigError("tv_weight must be >= 0");
    if (!(prob_clamp_eps > 0.0 && prob_clamp_eps < 0.5)) throw ConfigError("prob_clamp_eps must lie in (0, 0.5)");
  }
};

/// log(p / (1 - p)) after clamping p into [eps, 1 - eps].
template <typename Scalar>
Scalar log_odds(Scalar p, Scalar eps = Scalar(1e-6)) {
  const Scalar q = std::min(std::max(p, eps), Scalar(1) - eps);
  return std::log(q / (Scalar(1) - q));
}

template <typename Scalar>
Var<Scalar> log_odds(const Var<Scalar>& p, Scalar eps = Scalar(1e-6)) {
  Var<Scalar> q = clamp(p, eps, Scalar(1) - eps);
  return log(q / (Scalar(1) - q));
}

/// Sum of squared neighbour differences of an H×W map (plain value, no tape).
template <typename Scalar>
Scalar total_variation(const Tensor<Scalar>& m) {
  Tape<Scalar> tape(NumericMode::Permissive);
  return total_variation(tape.constant(m)).value().item();
}

/// Per-row Monte-Carlo terms: SSR: -s + lambda * |1 - z|_1, SDR: s + lambda * |z|_1.
/// scores: (B), z: (B,H,W). Adds tv_weight * TV(z_row) when cfg.tv_on_samples.
template <typename Scalar>
Var<Scalar> row_losses(ObjectiveKind kind, const Var<Scalar>& scores, const Var<Scalar>& z, const LossConfig& cfg) {
  cfg.validate();
  if (z.shape().size() != 3 || z.shape()[0] < 1) {
    throw ShapeError("objective needs a non-empty (B,H,W) mask batch, got " + shape_string(z.shape()));
  }
  if (scores.shape() != Shape{z.shape()[0]}) {
    throw ShapeError("scores " + shape_string(scores.shape()) + " not aligned with mask batch " +
                     shape_string(z.shape()));
  }
  const auto lambda = Scalar(cfg.lambda_l1);
  Var<Scalar> rows = kind == ObjectiveKind::SSR
                         ? -scores + sum(Scalar(1) - z, {1, 2}) * lambda
                         : scores + sum(z, {1, 2}) * lambda;
  if (cfg.tv_on_samples && cfg.tv_weight > 0.0) rows = rows + total_variation(z) * Scalar(cfg.tv_weight);
  return rows;
}

/// Batch mean of row_losses plus tv_weight * TV(theta) when theta is given and
/// TV is not applied per sample.
template <typename Scalar>
Var<Scalar> objective_loss(ObjectiveKind kind, const Var<Scalar>& scores, const Var<Scalar>& z,
                           const LossConfig& cfg, const std::optional<Var<Scalar>>& theta = std::nullopt) {
  Var<Scalar> loss = mean(row_losses(kind, scores, z, cfg));
  if (theta && !cfg.tv_on_samples && cfg.tv_weight > 0.0) loss = loss + total_variation(*theta) * Scalar(cfg.tv_weight);
  return loss;
}

template <typename Scalar>
Var<Scalar> ssr_loss(const Var<Scalar>& scores, const Var<Scalar>& z, const LossConfig& cfg,
                     const std::optional<Var<Scalar>>& theta = std::nullopt) {
  return objective_loss(ObjectiveKind::SSR, scores, z, cfg, theta);
}

template <typename Scalar>
Var<Scalar> sdr_loss(const Var<Scalar>& scores, const Var<Scalar>& z, const LossConfig& cfg,
                     const std::optional<Var<Scalar>>& theta = std::nullopt) {
  return objective_loss(ObjectiveKind::SDR, scores, z, cfg, theta);
}

}  // namespace fido
