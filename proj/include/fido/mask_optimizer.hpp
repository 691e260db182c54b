#pragma once

// The FIDO loop. Each step draws B noise fields, samples relaxed masks, blends
// the image with its infill, scores the blends with the classifier's log-odds
// and moves the mask logits along the Monte-Carlo gradient of the SSR or SDR
// objective.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fido/autodiff.hpp"
#include "fido/binary_mask.hpp"
#include "fido/classifier.hpp"
#include "fido/concrete_dropout.hpp"
#include "fido/evaluation.hpp"
#include "fido/infill.hpp"
#include "fido/objectives.hpp"
#include "fido/optim.hpp"
#include "fido/rng.hpp"

namespace fido {

enum class MaskOptimizerKind { Adam, Sgd };

struct FidoConfig {
  ObjectiveKind objective = ObjectiveKind::SSR;
  Formulation formulation = Formulation::Simplified;
  Index batch_size = 8;
  int steps = 100;
  double temperature = kDefaultTemperature;
  LossConfig loss;
  MaskOptimizerKind optimizer = MaskOptimizerKind::Adam;
  double learning_rate = 0.05;
  std::uint64_t seed = 0;
  Precision precision = Precision::Single;
  NumericMode mode = NumericMode::Strict;
  InfillSpec infill;

  void validate() const {
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
    if (steps < 1) throw ConfigError("steps must be >= 1");
    if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
    if (!(learning_rate >= 0.0)) throw ConfigError("mask learning rate must be >= 0");
    loss.validate();
  }
};

struct TraceStep {
  double loss = 0.0;
  double grad_mean_abs = 0.0;
  /// Per-pixel variance of the per-sample gradients across the batch, averaged over pixels.
  double grad_var = 0.0;
  long nonfinite_count = 0;
};

struct OptimizationTrace {
  std::vector<TraceStep> steps;

  long total_nonfinite() const {
    long n = 0;
    for (const auto& s : steps) n += s.nonfinite_count;
    return n;
  }
  double mean_grad_var() const {
    double acc = 0.0;
    for (const auto& s : steps) acc += s.grad_var;
    return steps.empty() ? 0.0 : acc / double(steps.size());
  }
};

/// Writes the trace as CSV: step,loss,grad_mean_abs,grad_var,nonfinite_count.
std::string trace_csv(const OptimizationTrace& trace);

/// Loss and gradients of one Monte-Carlo step.
template <typename Scalar>
struct StepGradient {
  Scalar loss = 0;
  Tensor<Scalar> gradient;     // H×W, d loss / d vartheta
  Tensor<Scalar> per_sample;   // (B,H,W), gradient of each row's loss (incl. regularizer share)
};

/// One differentiable evaluation of the objective at `logits` with frozen
/// noise `eta_hat` (B,H,W). Per-sample gradients come from giving every batch
/// row its own copy of the logits, so one backward pass yields all of them.
template <typename Scalar>
StepGradient<Scalar> objective_gradient(const Tensor<Scalar>& image, const Tensor<Scalar>& infill, Index target,
                                        const ClassifierModel<Scalar>& model, const FidoConfig& cfg,
                                        const Tensor<Scalar>& logits, const Tensor<Scalar>& eta_hat) {
  const Index b = eta_hat.dim(0);
  Tape<Scalar> tape(cfg.mode);
  Var<Scalar> rows_logits = tape.variable(replicate_rows(logits, b));
  Var<Scalar> noise = tape.constant(eta_hat);
  Var<Scalar> z = sample(cfg.formulation, rows_logits, noise, Scalar(cfg.temperature));
  Var<Scalar> probs = model.probabilities(compose(image, infill, z));
  Var<Scalar> scores = log_odds(pick(probs, std::vector<Index>(std::size_t(b), target)), Scalar(cfg.loss.prob_clamp_eps));
  Var<Scalar> loss = mean(row_losses(cfg.objective, scores, z, cfg.loss));
  std::optional<Var<Scalar>> plane;
  if (!cfg.loss.tv_on_samples && cfg.loss.tv_weight > 0.0) {
    plane = tape.variable(logits);
    loss = loss + total_variation(sigmoid(*plane)) * Scalar(cfg.loss.tv_weight);
  }
  auto grads = tape.backward(loss);
  StepGradient<Scalar> out;
  out.loss = loss.value().item();
  const Tensor<Scalar>& g_rows = grads[rows_logits];
  const Index hw = logits.size();
  out.gradient = Tensor<Scalar>(logits.shape());
  for (Index r = 0; r < b; ++r) out.gradient.data() += g_rows.data().segment(r * hw, hw);
  out.per_sample = Tensor<Scalar>(g_rows.shape(), g_rows.data() * Scalar(b));
  if (plane) {
    const Tensor<Scalar>& g_plane = grads[*plane];
    out.gradient.data() += g_plane.data();
    for (Index r = 0; r < b; ++r) out.per_sample.data().segment(r * hw, hw) += g_plane.data();
  }
  return out;
}

template <typename Scalar>
struct MaskRun {
  MaskParams<Scalar> params;
  OptimizationTrace trace;
};

/// Called after every completed step (1-based) with the current logits.
template <typename Scalar>
using StepCallback = std::function<void(int step, const MaskParams<Scalar>& params, const OptimizationTrace& trace)>;

/// Optimizes the mask logits for class `target` of a (C,H,W) image.
/// Deterministic given cfg.seed. In strict mode a non-finite loss or gradient
/// raises NumericError carrying the step index; in permissive mode non-finite
/// gradient entries are counted in the trace and skipped in the update.
template <typename Scalar>
MaskRun<Scalar> optimize_mask(const Tensor<Scalar>& image, Index target, const ClassifierModel<Scalar>& model,
                              const FidoConfig& cfg, std::optional<Tensor<Scalar>> infill = std::nullopt,
                              const StepCallback<Scalar>& on_step = {}) {
  cfg.validate();
  if (image.shape() != model.input_spec().shape()) {
    throw ShapeError("optimize_mask: image " + shape_string(image.shape()) + " does not match the model input " +
                     shape_string(model.input_spec().shape()));
  }
  if (target < 0 || target >= model.classes()) throw ConfigError("target class out of range");
  const Tensor<Scalar> x_hat = infill ? *infill : make_infill(image, cfg.infill);
  const Index h = image.dim(1), w = image.dim(2), b = cfg.batch_size;

  MaskRun<Scalar> run{MaskParams<Scalar>::zeros(h, w), {}};
  AdamOptions adam_opt;
  adam_opt.learning_rate = cfg.learning_rate;
  Adam<Scalar> adam(run.params.logits.shape(), adam_opt);
  Rng rng(cfg.seed);

  for (int step = 0; step < cfg.steps; ++step) {
    auto noise = NoiseDraw<Scalar>::draw(rng, {b, h, w});
    StepGradient<Scalar> sg;
    try {
      sg = objective_gradient(image, x_hat, target, model, cfg, run.params.logits, noise.eta_hat);
    } catch (const NumericError& e) {
      throw NumericError(e.what(), step);
    }
    TraceStep ts;
    ts.loss = double(sg.loss);
    ts.nonfinite_count = long(sg.gradient.count_nonfinite());
    if (cfg.mode == NumericMode::Strict && (!std::isfinite(ts.loss) || ts.nonfinite_count > 0)) {
      throw NumericError("non-finite loss or gradient", step);
    }
    auto& g = sg.gradient.data();
    g = g.isFinite().select(g, Scalar(0));
    ts.grad_mean_abs = double(g.abs().mean());
    if (b > 1) {
      const Index hw = h * w;
      Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic>> ps(sg.per_sample.raw(), hw, b);
      const auto mean_col = ps.rowwise().mean();
      const Eigen::Array<double, Eigen::Dynamic, 1> var =
          ((ps.colwise() - mean_col).square().rowwise().sum() / Scalar(b - 1)).template cast<double>();
      ts.grad_var = var.isFinite().select(var, 0.0).mean();
    }
    if (cfg.optimizer == MaskOptimizerKind::Adam) {
      adam.step(run.params.logits, sg.gradient);
    } else {
      run.params.logits.data() -= Scalar(cfg.learning_rate) * g;
    }
    run.trace.steps.push_back(ts);
    if (on_step) on_step(step + 1, run.params, run.trace);
  }
  return run;
}

/// Attribution maps in retention orientation: theta_ssr and theta_sdr are the
/// probabilities that a pixel keeps its original value (1 - sigmoid(vartheta)).
/// SSR retains the evidence, SDR perturbs it, so the joint map
/// sqrt(theta_ssr * (1 - theta_sdr)) is high on the evidence.
template <typename Scalar>
struct AttributionResult {
  Tensor<Scalar> theta_ssr;
  Tensor<Scalar> theta_sdr;
  Tensor<Scalar> theta_joint;
  OptimizationTrace trace_ssr;
  OptimizationTrace trace_sdr;
  FidoConfig config;
  int steps = 0;
  double seconds = 0.0;  // wall time of both runs up to this snapshot
};

template <typename Scalar>
Tensor<Scalar> retention_map(const MaskParams<Scalar>& params) {
  return Tensor<Scalar>(params.logits.shape(), (Scalar(1) + params.logits.data().exp()).inverse());
}

inline std::uint64_t objective_seed(std::uint64_t seed, ObjectiveKind kind) {
  return derive_seed(seed, kind == ObjectiveKind::SSR ? 1 : 2);
}

/// Runs SSR and SDR (independent noise streams derived from cfg.seed) and
/// fuses them. With `snapshot_steps`, returns one result per listed step
/// count, taken from the same runs; otherwise a single result after cfg.steps.
template <typename Scalar>
std::vector<AttributionResult<Scalar>> estimate_pair_snapshots(const Tensor<Scalar>& image, Index target,
                                                               const ClassifierModel<Scalar>& model,
                                                               const FidoConfig& cfg, std::vector<int> snapshot_steps) {
  if (snapshot_steps.empty()) snapshot_steps.push_back(cfg.steps);
  std::sort(snapshot_steps.begin(), snapshot_steps.end());
  FidoConfig run_cfg = cfg;
  run_cfg.steps = snapshot_steps.back();
  run_cfg.validate();
  const Tensor<Scalar> x_hat = make_infill(image, cfg.infill);

  std::vector<AttributionResult<Scalar>> results(snapshot_steps.size());
  for (ObjectiveKind kind : {ObjectiveKind::SSR, ObjectiveKind::SDR}) {
    FidoConfig c = run_cfg;
    c.objective = kind;
    c.seed = objective_seed(cfg.seed, kind);
    const auto start = std::chrono::steady_clock::now();
    auto capture = [&](int step, const MaskParams<Scalar>& p, const OptimizationTrace& trace) {
      for (std::size_t i = 0; i < snapshot_steps.size(); ++i) {
        if (snapshot_steps[i] != step) continue;
        auto& r = results[i];
        r.seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        (kind == ObjectiveKind::SSR ? r.theta_ssr : r.theta_sdr) = retention_map(p);
        (kind == ObjectiveKind::SSR ? r.trace_ssr : r.trace_sdr) = trace;
      }
    };
    optimize_mask<Scalar>(image, target, model, c, x_hat, StepCallback<Scalar>(capture));
  }
  for (std::size_t i = 0; i < results.size(); ++i) {
    auto& r = results[i];
    r.theta_joint = joint_mask(r.theta_ssr, r.theta_sdr);
    r.config = cfg;
    r.config.steps = snapshot_steps[i];
    r.steps = snapshot_steps[i];
  }
  return results;
}

template <typename Scalar>
AttributionResult<Scalar> estimate_pair(const Tensor<Scalar>& image, Index target, const ClassifierModel<Scalar>& model,
                                        const FidoConfig& cfg) {
  return estimate_pair_snapshots(image, target, model, cfg, {cfg.steps}).front();
}

/// SDR drop probability sigmoid(vartheta) recovered from the retention map.
template <typename Scalar>
Tensor<Scalar> drop_map(const Tensor<Scalar>& retention) {
  return Tensor<Scalar>(retention.shape(), Scalar(1) - retention.data());
}

/// Mask-quality numbers for one attribution result.
struct MaskScores {
  double iou_ssr = 0, iou_sdr = 0, iou_joint = 0;
  double tv_ssr = 0, tv_sdr = 0, tv_joint = 0;
};

/// IoU against the ground truth after thresholding at 0.5. The SSR and joint
/// maps are thresholded directly; the SDR map is thresholded in its drop
/// orientation (the region whose removal destroys the score).
template <typename Scalar>
MaskScores score_masks(const AttributionResult<Scalar>& r, const BinaryMask& gt, double tau = 0.5) {
  MaskScores s;
  s.iou_ssr = iou(threshold_mask(r.theta_ssr, tau), gt);
  s.iou_sdr = iou(threshold_mask(drop_map(r.theta_sdr), tau), gt);
  s.iou_joint = iou(threshold_mask(r.theta_joint, tau), gt);
  s.tv_ssr = coherency_tv(r.theta_ssr);
  s.tv_sdr = coherency_tv(r.theta_sdr);
  s.tv_joint = coherency_tv(r.theta_joint);
  return s;
}

struct ComparisonCell {
  Index batch_size = 8;
  int steps = 100;
  Formulation formulation = Formulation::Simplified;
};

struct ComparisonRecord {
  ComparisonCell cell;
  double grad_var = 0.0;            // mean over steps and both objectives
  double precision_deviation = 0.0; // mean |grad(single) - grad(double)| at the final SSR logits
  long nonfinite = 0;
  double wall_seconds = 0.0;
  MaskScores scores;
};

/// Mean absolute difference between the single- and double-precision
/// objective gradients at `logits`, sharing one noise draw (drawn in single
/// precision so both runs see identical values).
template <typename Scalar>
double precision_deviation(const Tensor<Scalar>& image, Index target, const ClassifierModel<Scalar>& model,
                           const FidoConfig& cfg, const Tensor<Scalar>& logits, std::uint64_t seed) {
  Rng rng(seed);
  auto noise = NoiseDraw<float>::draw(rng, {cfg.batch_size, logits.dim(0), logits.dim(1)});
  FidoConfig c = cfg;
  c.mode = NumericMode::Permissive;
  const Tensor<float> img_f = image.template cast<float>();
  const Tensor<double> img_d = image.template cast<double>();
  auto single = objective_gradient(img_f, make_infill(img_f, c.infill), target, model.template cast<float>(), c,
                                   logits.template cast<float>(), noise.eta_hat);
  auto dbl = objective_gradient(img_d, make_infill(img_d, c.infill), target, model.template cast<double>(), c,
                                logits.template cast<double>(), noise.eta_hat.template cast<double>());
  const auto diff = (single.gradient.data().template cast<double>() - dbl.gradient.data()).abs();
  return diff.isFinite().select(diff, 0.0).mean();
}

/// Runs every (B, steps, formulation) cell on one image with shared seeds.
template <typename Scalar>
std::vector<ComparisonRecord> compare_formulations(const Tensor<Scalar>& image, Index target, const BinaryMask& gt,
                                                   const ClassifierModel<Scalar>& model, const FidoConfig& base,
                                                   const std::vector<ComparisonCell>& grid) {
  std::vector<ComparisonRecord> out;
  for (const auto& cell : grid) {
    FidoConfig cfg = base;
    cfg.batch_size = cell.batch_size;
    cfg.steps = cell.steps;
    cfg.formulation = cell.formulation;
    if (cell.formulation == Formulation::Original) cfg.mode = NumericMode::Permissive;
    const auto t0 = std::chrono::steady_clock::now();
    AttributionResult<Scalar> r = estimate_pair(image, target, model, cfg);
    const auto t1 = std::chrono::steady_clock::now();
    ComparisonRecord rec;
    rec.cell = cell;
    rec.wall_seconds = std::chrono::duration<double>(t1 - t0).count();
    rec.grad_var = 0.5 * (r.trace_ssr.mean_grad_var() + r.trace_sdr.mean_grad_var());
    rec.nonfinite = r.trace_ssr.total_nonfinite() + r.trace_sdr.total_nonfinite();
    rec.scores = score_masks(r, gt);
    FidoConfig ssr_cfg = cfg;
    ssr_cfg.objective = ObjectiveKind::SSR;
    const Tensor<Scalar> final_logits(r.theta_ssr.shape(), ((Scalar(1) / r.theta_ssr.data()) - Scalar(1)).log());
    rec.precision_deviation =
        precision_deviation(image, target, model, ssr_cfg, final_logits, derive_seed(base.seed, 99));
    out.push_back(rec);
  }
  return out;
}

inline std::string trace_csv(const OptimizationTrace& trace) {
  std::string s = "step,loss,grad_mean_abs,grad_var,nonfinite_count\n";
  char line[160];
  for (std::size_t i = 0; i < trace.steps.size(); ++i) {
    const auto& t = trace.steps[i];
    std::snprintf(line, sizeof(line), "%zu,%.9g,%.9g,%.9g,%ld\n", i + 1, t.loss, t.grad_mean_abs, t.grad_var,
                  t.nonfinite_count);
    s += line;
  }
  return s;
}

}  // namespace fido
