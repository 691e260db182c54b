#include "fido/cli.hpp"

#include <atomic>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "fido/classifier.hpp"
#include "fido/evaluation.hpp"
#include "fido/manifest.hpp"
#include "fido/mask_optimizer.hpp"
#include "fido/png_io.hpp"
#include "fido/synthetic_data.hpp"
#include "fido/tensor_io.hpp"

namespace fido::cli {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;
using Clock = std::chrono::steady_clock;

Precision parse_precision(const std::string& s) {
  if (s == "single" || s == "float") return Precision::Single;
  if (s == "double") return Precision::Double;
  throw ConfigError("--precision must be single or double, got '" + s + "'");
}

NumericMode parse_mode(const std::string& s) {
  if (s == "strict") return NumericMode::Strict;
  if (s == "permissive") return NumericMode::Permissive;
  throw ConfigError("--numeric-mode must be strict or permissive, got '" + s + "'");
}

template <typename F>
decltype(auto) with_precision(Precision p, F&& f) {
  if (p == Precision::Single) return f(float{});
  return f(double{});
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  os << text;
  if (!os) throw std::runtime_error("cannot write " + path.string());
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn) {
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex lock;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < std::min<std::size_t>(std::size_t(jobs), n); ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> g(lock);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

/// One manifest per output directory.
struct Manifest {
  json doc;
  Clock::time_point start = Clock::now();

  explicit Manifest(const std::string& command) { doc["command"] = command; }
  void input(const std::string& name, const fs::path& path) {
    doc["inputs"][name] = {{"path", path.string()}, {"sha1", file_blob_sha1(path.string())}};
  }
  void output(const fs::path& dir, const std::string& file) {
    doc["outputs"][file] = file_blob_sha1((dir / file).string());
  }
  void write(const fs::path& dir, bool with_time = true) {
    if (with_time) doc["wall_time_seconds"] = seconds_since(start);
    write_file(dir / "manifest.json", doc.dump(2) + "\n");
  }
};

/// Mask-optimizer flags shared by explain, benchmark and tta.
struct FidoFlags {
  std::string formulation = "simplified";
  Index batch_size = FidoConfig{}.batch_size;
  int steps = FidoConfig{}.steps;
  double temperature = kDefaultTemperature;
  double learning_rate = FidoConfig{}.learning_rate;
  double lambda_l1 = LossConfig{}.lambda_l1;
  double tv_weight = LossConfig{}.tv_weight;
  bool tv_on_samples = false;
  std::string infill = "gaussian_blur";
  double blur_sigma = 0.0;
  double constant_value = 0.0;
  std::string mode = "permissive";
  std::string precision = "single";
  std::uint64_t seed = 1;

  void add_to(CLI::App* app, bool grid) {
    if (!grid) {
      app->add_option("--formulation", formulation, "original | simplified")->capture_default_str();
      app->add_option("--batch-size", batch_size, "Masks per optimization step (B)")->capture_default_str();
      app->add_option("--steps", steps, "Optimization steps")->capture_default_str();
    }
    app->add_option("--temperature", temperature, "Concrete relaxation temperature t")->capture_default_str();
    app->add_option("--mask-lr", learning_rate, "Adam learning rate on the mask logits")->capture_default_str();
    app->add_option("--lambda", lambda_l1, "L1 sparsity weight")->capture_default_str();
    app->add_option("--tv-weight", tv_weight, "Total-variation weight")->capture_default_str();
    app->add_flag("--tv-on-samples", tv_on_samples, "Apply TV to each sampled mask instead of theta");
    app->add_option("--infill", infill, "gaussian_blur | constant | uniform_random")->capture_default_str();
    app->add_option("--blur-sigma", blur_sigma, "Blur sigma in pixels (0: side/8)")->capture_default_str();
    app->add_option("--infill-value", constant_value, "Value for constant infill")->capture_default_str();
    app->add_option("--numeric-mode", mode, "strict | permissive")->capture_default_str();
    app->add_option("--precision", precision, "single | double")->capture_default_str();
    app->add_option("--seed", seed, "Base seed")->capture_default_str();
  }

  FidoConfig config() const {
    FidoConfig c;
    c.formulation = parse_formulation(formulation);
    c.batch_size = batch_size;
    c.steps = steps;
    c.temperature = temperature;
    c.learning_rate = learning_rate;
    c.loss.lambda_l1 = lambda_l1;
    c.loss.tv_weight = tv_weight;
    c.loss.tv_on_samples = tv_on_samples;
    c.infill.kind = parse_infill_kind(infill);
    if (blur_sigma > 0.0) c.infill.blur_sigma = blur_sigma;
    c.infill.constant_value = constant_value;
    c.seed = seed;
    c.precision = parse_precision(precision);
    c.mode = parse_mode(mode);
    c.validate();
    return c;
  }
};

json config_json(const FidoConfig& c) {
  return {{"formulation", to_string(c.formulation)},
          {"batch_size", c.batch_size},
          {"steps", c.steps},
          {"temperature", c.temperature},
          {"mask_lr", c.learning_rate},
          {"lambda", c.loss.lambda_l1},
          {"tv_weight", c.loss.tv_weight},
          {"tv_on_samples", c.loss.tv_on_samples},
          {"prob_clamp_eps", c.loss.prob_clamp_eps},
          {"infill", to_string(c.infill.kind)},
          {"blur_sigma", c.infill.blur_sigma ? json(*c.infill.blur_sigma) : json("side/8")},
          {"numeric_mode", c.mode == NumericMode::Strict ? "strict" : "permissive"},
          {"precision", to_string(c.precision)},
          {"seed", c.seed}};
}

// ---------------------------------------------------------------- generate-dataset

struct GenerateFlags {
  std::string out;
  std::uint64_t seed = 1;
  SyntheticConfig cfg;
};

int cmd_generate(const GenerateFlags& f, std::ostream& out) {
  Manifest manifest("generate-dataset");
  Dataset d = generate(f.cfg, f.seed);
  save_dataset(f.out, d);
  // The dataset manifest doubles as the run manifest; no wall time so that
  // repeated runs produce identical directories.
  const fs::path path = fs::path(f.out) / "manifest.json";
  std::ifstream is(path);
  json doc = json::parse(is);
  doc["command"] = "generate-dataset";
  doc["precision"] = "double";
  write_file(path, doc.dump(2) + "\n");
  out << "wrote " << d.train.size() << " train and " << d.test.size() << " test samples to " << f.out << "\n";
  return kOk;
}

// ---------------------------------------------------------------- train

struct TrainFlags {
  std::string data;
  std::string out;
  std::string precision = "single";
  TrainConfig cfg{.seed = 1};
  Architecture arch;
};

int cmd_train(const TrainFlags& f, std::ostream& out, std::ostream& err) {
  f.cfg.validate();
  const Precision prec = parse_precision(f.precision);
  Manifest manifest("train");
  const Dataset d = load_dataset(f.data);
  const fs::path dir(f.out);
  fs::create_directories(dir);
  return with_precision(prec, [&](auto tag) {
    using S = decltype(tag);
    const auto train_x = images_of<S>(d.train);
    const auto train_y = labels_of(d.train);
    const auto test_x = images_of<S>(d.test);
    const auto test_y = labels_of(d.test);
    const InputSpec spec{d.config.channels, d.config.image_side, d.config.image_side};
    auto model = ClassifierModel<S>::build(spec, d.config.classes, f.cfg.seed, f.arch);
    const TrainReport report = train<S>(model, train_x, train_y, f.cfg);
    model.save((dir / "weights.fmwt").string());
    std::string csv = "epoch,loss\n";
    for (std::size_t e = 0; e < report.epoch_loss.size(); ++e) csv += std::to_string(e + 1) + "," + num(report.epoch_loss[e]) + "\n";
    write_file(dir / "loss_curve.csv", csv);
    const double train_acc = accuracy<S>(model, train_x, train_y);
    const double test_acc = accuracy<S>(model, test_x, test_y);
    manifest.doc["config"] = {{"epochs", f.cfg.epochs},
                              {"lr", f.cfg.learning_rate},
                              {"adam_epsilon", f.cfg.adam_epsilon},
                              {"weight_decay", f.cfg.weight_decay},
                              {"batch_size", f.cfg.batch_size},
                              {"conv1", f.arch.conv1_channels},
                              {"conv2", f.arch.conv2_channels},
                              {"parameters", model.parameter_count()}};
    manifest.doc["seed"] = f.cfg.seed;
    manifest.doc["precision"] = to_string(prec);
    manifest.doc["train_accuracy"] = train_acc;
    manifest.doc["test_accuracy"] = test_acc;
    manifest.input("dataset_manifest", fs::path(f.data) / "manifest.json");
    manifest.output(dir, "weights.fmwt");
    manifest.output(dir, "loss_curve.csv");
    manifest.write(dir);
    err << "final loss " << num(report.epoch_loss.back()) << "\n";
    out << "train_accuracy=" << num(train_acc) << " test_accuracy=" << num(test_acc) << "\n";
    return kOk;
  });
}

// ---------------------------------------------------------------- explain

struct ExplainFlags {
  std::string weights;
  std::string data;
  std::string image_id;
  std::string image;
  int target = -1;
  std::vector<std::string> objectives;
  std::string out;
  FidoFlags fido;
};

png::Image8 overlay(const Tensor<double>& image, const BinaryMask& mask) {
  const Index c = image.dim(0), h = image.dim(1), w = image.dim(2), hw = h * w;
  png::Image8 img{int(w), int(h), 3, std::vector<std::uint8_t>(std::size_t(hw * 3))};
  const double tint[3] = {1.0, 0.1, 0.1};
  for (Index p = 0; p < hw; ++p) {
    for (Index k = 0; k < 3; ++k) {
      double v = image[(c == 3 ? k : 0) * hw + p];
      if (mask.data()[p]) v = 0.45 * v + 0.55 * tint[k];
      img.pixels[std::size_t(p * 3 + k)] = png::to_byte(v);
    }
  }
  return img;
}

template <typename S>
void write_map(const fs::path& dir, const std::string& name, const Tensor<S>& theta, Manifest& m) {
  save_tensor((dir / (name + ".tnsr")).string(), theta);
  png::write((dir / (name + ".png")).string(), png::from_tensor(theta));
  m.output(dir, name + ".tnsr");
  m.output(dir, name + ".png");
}

int cmd_explain(const ExplainFlags& f, std::ostream& out) {
  if (f.data.empty() == f.image.empty()) throw ConfigError("explain needs exactly one of --image or --data/--image-id");
  if (!f.data.empty() && f.image_id.empty()) throw ConfigError("--data requires --image-id");
  FidoConfig cfg = f.fido.config();
  std::vector<ObjectiveKind> kinds;
  for (const auto& o : f.objectives) {
    const ObjectiveKind k = parse_objective(o);
    if (std::find(kinds.begin(), kinds.end(), k) == kinds.end()) kinds.push_back(k);
  }
  if (kinds.empty()) kinds = {ObjectiveKind::SSR, ObjectiveKind::SDR};

  Manifest manifest("explain");
  Tensor<double> image;
  std::optional<int> label;
  if (!f.image.empty()) {
    image = png::to_tensor<double>(png::read(f.image));
    manifest.input("image", f.image);
  } else {
    const Dataset d = load_dataset(f.data);
    for (const auto* split : {&d.test, &d.train}) {
      for (const auto& s : *split) {
        if (s.id == f.image_id) {
          image = s.image;
          label = s.label;
        }
      }
    }
    if (image.size() == 0) throw ConfigError("image id '" + f.image_id + "' not found in " + f.data);
    manifest.input("dataset_manifest", fs::path(f.data) / "manifest.json");
    manifest.doc["image_id"] = f.image_id;
  }
  manifest.input("weights", f.weights);
  const fs::path dir(f.out);
  fs::create_directories(dir);

  return with_precision(cfg.precision, [&](auto tag) {
    using S = decltype(tag);
    const auto model = ClassifierModel<S>::load(f.weights);
    const Tensor<S> x = image.cast<S>();
    const Index target = f.target >= 0 ? Index(f.target) : argmax(model.predict_proba(x));
    const Tensor<S> x_hat = make_infill(x, cfg.infill);
    std::optional<Tensor<S>> ssr, sdr;
    for (ObjectiveKind kind : kinds) {
      FidoConfig c = cfg;
      c.objective = kind;
      c.seed = objective_seed(cfg.seed, kind);
      MaskRun<S> run = optimize_mask<S>(x, target, model, c, x_hat);
      const Tensor<S> theta = retention_map(run.params);
      const std::string name = std::string("theta_") + to_string(kind);
      write_map(dir, name, theta, manifest);
      const std::string trace = std::string("trace_") + to_string(kind) + ".csv";
      write_file(dir / trace, trace_csv(run.trace));
      manifest.output(dir, trace);
      manifest.doc["nonfinite_count"][to_string(kind)] = run.trace.total_nonfinite();
      manifest.doc["tv"][to_string(kind)] = coherency_tv(theta);
      (kind == ObjectiveKind::SSR ? ssr : sdr) = theta;
    }
    BinaryMask highlight;
    if (ssr && sdr) {
      const Tensor<S> joint = joint_mask(*ssr, *sdr);
      write_map(dir, "theta_joint", joint, manifest);
      manifest.doc["tv"]["joint"] = coherency_tv(joint);
      highlight = threshold_mask(joint);
    } else {
      highlight = ssr ? threshold_mask(*ssr) : threshold_mask(drop_map(*sdr));
    }
    png::write((dir / "overlay.png").string(), overlay(image, highlight));
    manifest.output(dir, "overlay.png");
    manifest.doc["config"] = config_json(cfg);
    manifest.doc["seed"] = cfg.seed;
    manifest.doc["precision"] = to_string(cfg.precision);
    manifest.doc["target_class"] = target;
    if (label) manifest.doc["label"] = *label;
    manifest.write(dir);
    out << "explained class " << target << " into " << f.out << "\n";
    return kOk;
  });
}

// ---------------------------------------------------------------- benchmark

struct BenchmarkFlags {
  std::string weights;
  std::string data;
  std::string out;
  std::string batch_sizes = "2,4,8,16,32";
  std::string steps = "10,30,50,100";
  std::string formulations = "original,simplified";
  int images = 20;
  int jobs = 0;
  FidoFlags fido;
};

struct BenchRow {
  double iou[3] = {0, 0, 0};  // ssr, sdr, joint
  double tv[3] = {0, 0, 0};
  long nonfinite[3] = {0, 0, 0};
  double seconds = 0;
};

template <typename T>
std::vector<T> parse_grid(const std::string& s, const char* flag) {
  std::vector<T> out;
  for (const auto& item : split_list(s)) {
    try {
      std::size_t used = 0;
      const long v = std::stol(item, &used);
      if (used != item.size() || v < 1) throw std::invalid_argument(item);
      out.push_back(T(v));
    } catch (const std::exception&) {
      throw ConfigError(std::string(flag) + ": '" + item + "' is not a positive integer");
    }
  }
  if (out.empty()) throw ConfigError(std::string(flag) + ": grid is empty");
  return out;
}

int cmd_benchmark(const BenchmarkFlags& f, std::ostream& out) {
  const auto batch_sizes = parse_grid<Index>(f.batch_sizes, "--batch-sizes");
  auto step_grid = parse_grid<int>(f.steps, "--steps");
  std::sort(step_grid.begin(), step_grid.end());
  step_grid.erase(std::unique(step_grid.begin(), step_grid.end()), step_grid.end());
  std::vector<Formulation> forms;
  for (const auto& s : split_list(f.formulations)) forms.push_back(parse_formulation(s));
  if (forms.empty()) throw ConfigError("--formulations: grid is empty");
  if (f.images < 1) throw ConfigError("--images must be >= 1");
  const FidoConfig base = f.fido.config();
  const int jobs = resolve_jobs(f.jobs);

  Manifest manifest("benchmark");
  const Dataset d = load_dataset(f.data);
  const std::size_t n_img = std::min<std::size_t>(std::size_t(f.images), d.test.size());
  const fs::path dir(f.out);
  fs::create_directories(dir);

  return with_precision(base.precision, [&](auto tag) {
    using S = decltype(tag);
    const auto model = ClassifierModel<S>::load(f.weights);
    const std::span<const LabeledSample> samples(d.test.data(), n_img);
    const auto xs = images_of<S>(samples);
    const auto ys = labels_of(samples);
    const double acc = accuracy<S>(model, xs, ys);

    // Task = (formulation, B, image); each yields one row per steps snapshot.
    const std::size_t n_tasks = forms.size() * batch_sizes.size() * n_img;
    std::vector<std::vector<BenchRow>> results(n_tasks);
    parallel_for(n_tasks, jobs, [&](std::size_t t) {
      const std::size_t img = t % n_img;
      const std::size_t bi = (t / n_img) % batch_sizes.size();
      const std::size_t fi = t / (n_img * batch_sizes.size());
      FidoConfig cfg = base;
      cfg.formulation = forms[fi];
      cfg.batch_size = batch_sizes[bi];
      cfg.seed = base.seed + img;
      const auto snaps = estimate_pair_snapshots<S>(xs[img], Index(ys[img]), model, cfg, step_grid);
      for (const auto& r : snaps) {
        BenchRow row;
        const MaskScores sc = score_masks(r, samples[img].gt_mask);
        row.iou[0] = sc.iou_ssr, row.iou[1] = sc.iou_sdr, row.iou[2] = sc.iou_joint;
        row.tv[0] = sc.tv_ssr, row.tv[1] = sc.tv_sdr, row.tv[2] = sc.tv_joint;
        row.nonfinite[0] = r.trace_ssr.total_nonfinite();
        row.nonfinite[1] = r.trace_sdr.total_nonfinite();
        row.nonfinite[2] = row.nonfinite[0] + row.nonfinite[1];
        row.seconds = r.seconds;
        results[t].push_back(row);
      }
    });

    static const char* kObjectives[3] = {"ssr", "sdr", "joint"};
    std::string rows = "formulation,objective,batch_size,steps,seed,image,iou,tv,nonfinite_count\n";
    std::string report = "method,accuracy,mean_iou,mean_tv,batch_size,steps,formulation,seed\n";
    std::string timings = "formulation,batch_size,steps,image,seconds\n";
    for (std::size_t fi = 0; fi < forms.size(); ++fi) {
      for (std::size_t bi = 0; bi < batch_sizes.size(); ++bi) {
        for (std::size_t si = 0; si < step_grid.size(); ++si) {
          const std::string cell_prefix = std::string(to_string(forms[fi])) + ",";
          const std::string cell_b = std::to_string(batch_sizes[bi]) + "," + std::to_string(step_grid[si]);
          for (int o = 0; o < 3; ++o) {
            double iou_sum = 0, tv_sum = 0, nf_sum = 0;
            for (std::size_t img = 0; img < n_img; ++img) {
              const BenchRow& r = results[(fi * batch_sizes.size() + bi) * n_img + img][si];
              iou_sum += r.iou[o], tv_sum += r.tv[o], nf_sum += double(r.nonfinite[o]);
              rows += cell_prefix + kObjectives[o] + "," + cell_b + "," + std::to_string(base.seed + img) + "," +
                      samples[img].id + "," + num(r.iou[o]) + "," + num(r.tv[o]) + "," +
                      std::to_string(r.nonfinite[o]) + "\n";
              if (o == 0) {
                timings += cell_prefix + cell_b + "," + samples[img].id + "," + num(r.seconds) + "\n";
              }
            }
            const double n = double(n_img);
            rows += cell_prefix + kObjectives[o] + "," + cell_b + "," + std::to_string(base.seed) + ",mean," +
                    num(iou_sum / n) + "," + num(tv_sum / n) + "," + num(nf_sum / n) + "\n";
            report += std::string("fido_") + kObjectives[o] + "," + num(acc) + "," + num(iou_sum / n) + "," +
                      num(tv_sum / n) + "," + cell_b + "," + to_string(forms[fi]) + "," + std::to_string(base.seed) +
                      "\n";
          }
        }
      }
    }
    write_file(dir / "benchmark_rows.csv", rows);
    write_file(dir / "benchmark_report.csv", report);
    write_file(dir / "timings.csv", timings);
    manifest.doc["config"] = config_json(base);
    manifest.doc["config"]["batch_sizes"] = batch_sizes;
    manifest.doc["config"]["steps"] = step_grid;
    manifest.doc["config"]["images"] = n_img;
    manifest.doc["seed"] = base.seed;
    manifest.doc["precision"] = to_string(base.precision);
    manifest.doc["jobs"] = jobs;
    manifest.input("weights", f.weights);
    manifest.input("dataset_manifest", fs::path(f.data) / "manifest.json");
    manifest.output(dir, "benchmark_rows.csv");
    manifest.output(dir, "benchmark_report.csv");
    manifest.write(dir);
    out << "benchmarked " << n_tasks << " runs over " << n_img << " images into " << f.out << "\n";
    return kOk;
  });
}

// ---------------------------------------------------------------- tta

struct TtaFlags {
  std::string weights;
  std::string data;
  std::string out;
  std::string methods = "none,gt_bbox,gt_bbox_only,random_crop,center_crop,fido_joint";
  int images = 0;
  int jobs = 0;
  FidoFlags fido;
};

int cmd_tta(const TtaFlags& f, std::ostream& out) {
  std::vector<TtaMethod> methods;
  for (const auto& s : split_list(f.methods)) methods.push_back(parse_tta_method(s));
  if (methods.empty()) throw ConfigError("--methods: list is empty");
  if (f.images < 0) throw ConfigError("--images must be >= 0");
  const FidoConfig cfg = f.fido.config();
  const int jobs = resolve_jobs(f.jobs);
  const bool need_fido = std::find(methods.begin(), methods.end(), TtaMethod::FidoJoint) != methods.end();

  Manifest manifest("tta");
  const Dataset d = load_dataset(f.data);
  const std::size_t n_img = f.images == 0 ? d.test.size() : std::min<std::size_t>(std::size_t(f.images), d.test.size());
  const fs::path dir(f.out);
  fs::create_directories(dir);

  return with_precision(cfg.precision, [&](auto tag) {
    using S = decltype(tag);
    const auto model = ClassifierModel<S>::load(f.weights);
    const std::span<const LabeledSample> samples(d.test.data(), n_img);
    const auto xs = images_of<S>(samples);

    struct PerImage {
      std::vector<int> correct;
      double iou = 0, tv = 0;
    };
    std::vector<PerImage> per(n_img);
    parallel_for(n_img, jobs, [&](std::size_t i) {
      const std::uint64_t seed = cfg.seed + i;
      TtaInputs<S> in;
      in.gt_box = bbox_from_mask(samples[i].gt_mask);
      in.seed = derive_seed(seed, 3);
      std::optional<Tensor<S>> joint;
      if (need_fido) {
        FidoConfig c = cfg;
        c.seed = seed;
        const Index predicted = argmax(model.predict_proba(xs[i]));
        const auto r = estimate_pair<S>(xs[i], predicted, model, c);
        joint = r.theta_joint;
        per[i].iou = iou(threshold_mask(r.theta_joint), samples[i].gt_mask);
        per[i].tv = coherency_tv(r.theta_joint);
        in.joint = &*joint;
      }
      for (TtaMethod m : methods) {
        per[i].correct.push_back(argmax(tta_predict(model, xs[i], m, in)) == samples[i].label ? 1 : 0);
      }
    });

    std::string csv = "method,accuracy,mean_iou,mean_tv,batch_size,steps,formulation,seed\n";
    json accs;
    for (std::size_t k = 0; k < methods.size(); ++k) {
      double hits = 0, iou_sum = 0, tv_sum = 0;
      for (const auto& p : per) hits += p.correct[k], iou_sum += p.iou, tv_sum += p.tv;
      const double n = double(n_img);
      const double acc = hits / n;
      accs[to_string(methods[k])] = acc;
      csv += std::string(to_string(methods[k])) + "," + num(acc) + ",";
      if (methods[k] == TtaMethod::FidoJoint) {
        csv += num(iou_sum / n) + "," + num(tv_sum / n) + "," + std::to_string(cfg.batch_size) + "," +
               std::to_string(cfg.steps) + "," + to_string(cfg.formulation) + ",";
      } else {
        csv += ",,,,,";
      }
      csv += std::to_string(cfg.seed) + "\n";
      out << to_string(methods[k]) << " accuracy=" << num(acc) << "\n";
    }
    write_file(dir / "tta.csv", csv);
    manifest.doc["config"] = config_json(cfg);
    manifest.doc["config"]["images"] = n_img;
    manifest.doc["seed"] = cfg.seed;
    manifest.doc["precision"] = to_string(cfg.precision);
    manifest.doc["jobs"] = jobs;
    manifest.doc["accuracy"] = accs;
    manifest.input("weights", f.weights);
    manifest.input("dataset_manifest", fs::path(f.data) / "manifest.json");
    manifest.output(dir, "tta.csv");
    manifest.write(dir);
    return kOk;
  });
}

std::string defaults_table() {
  const SyntheticConfig s;
  const TrainConfig t;
  const FidoConfig m;
  std::ostringstream os;
  os << "\nDefaults:\n"
     << "  dataset    image side " << s.image_side << ", channels " << s.channels << ", patch side " << s.patch_side
     << ", classes " << s.classes << ", samples/class " << s.samples_per_class << ", test fraction "
     << s.test_fraction << ", background amplitude " << s.background_amplitude << ", noise amplitude "
     << s.noise_amplitude << "\n"
     << "  classifier conv 3x3 " << Architecture{}.conv1_channels << " -> " << Architecture{}.conv2_channels
     << " channels, avg-pool 2, dense; AdamW lr " << t.learning_rate << ", eps " << t.adam_epsilon
     << ", weight decay " << t.weight_decay << ", batch " << t.batch_size << ", epochs " << t.epochs << "\n"
     << "  masks      B " << m.batch_size << ", steps " << m.steps << ", t " << m.temperature << ", Adam lr "
     << m.learning_rate << ", lambda " << m.loss.lambda_l1 << ", tv weight " << m.loss.tv_weight
     << ", prob clamp " << m.loss.prob_clamp_eps << ", infill gaussian blur sigma side/8, init vartheta 0\n"
     << "  evaluation threshold > 0.5, crop fraction " << kHeuristicCropFraction << ", squared crops\n"
     << "  runtime    seed 1, precision single, numeric mode permissive (CLI), jobs $FIDO_MASKS_JOBS or 1\n"
     << "Exit codes: 0 success, 1 runtime failure, 2 usage error.\n";
  return os.str();
}

}  // namespace

int resolve_jobs(int requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("FIDO_MASKS_JOBS")) {
    try {
      const int v = std::stoi(env);
      if (v > 0) return v;
    } catch (const std::exception&) {
    }
    throw ConfigError(std::string("FIDO_MASKS_JOBS must be a positive integer, got '") + env + "'");
  }
  return 1;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Perturbation-based attribution masks (SSR/SDR) with concrete-dropout samplers", "fido_masks"};
  app.footer(defaults_table());
  app.require_subcommand(1);

  GenerateFlags gen;
  auto* g = app.add_subcommand("generate-dataset", "Write a synthetic fine-grained dataset");
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--seed", gen.seed, "Dataset seed")->capture_default_str();
  g->add_option("--image-side", gen.cfg.image_side, "Image side in pixels")->capture_default_str();
  g->add_option("--patch-side", gen.cfg.patch_side, "Class patch side in pixels")->capture_default_str();
  g->add_option("--classes", gen.cfg.classes, "Number of classes")->capture_default_str();
  g->add_option("--samples-per-class", gen.cfg.samples_per_class, "Samples per class")->capture_default_str();
  g->add_option("--test-fraction", gen.cfg.test_fraction, "Held-out fraction")->capture_default_str();
  g->add_option("--background-amplitude", gen.cfg.background_amplitude, "Smooth background std-dev")
      ->capture_default_str();
  g->add_option("--noise-amplitude", gen.cfg.noise_amplitude, "Pixel noise std-dev")->capture_default_str();
  g->add_option("--background-seed", gen.cfg.background_seed, "Background stream")->capture_default_str();
  g->add_flag("--ablate-patch", gen.cfg.ablate_patch, "Leave the class patch unpainted");

  TrainFlags tr;
  auto* t = app.add_subcommand("train", "Train the classifier");
  t->add_option("--data", tr.data, "Dataset directory")->required();
  t->add_option("--out", tr.out, "Output directory")->required();
  t->add_option("--seed", tr.cfg.seed, "Initialization and shuffling seed")->capture_default_str();
  t->add_option("--epochs", tr.cfg.epochs, "Epochs")->capture_default_str();
  t->add_option("--lr", tr.cfg.learning_rate, "AdamW learning rate")->capture_default_str();
  t->add_option("--adam-epsilon", tr.cfg.adam_epsilon, "AdamW epsilon")->capture_default_str();
  t->add_option("--weight-decay", tr.cfg.weight_decay, "Decoupled weight decay")->capture_default_str();
  t->add_option("--batch-size", tr.cfg.batch_size, "Mini-batch size")->capture_default_str();
  t->add_option("--conv1", tr.arch.conv1_channels, "First conv channels")->capture_default_str();
  t->add_option("--conv2", tr.arch.conv2_channels, "Second conv channels")->capture_default_str();
  t->add_option("--precision", tr.precision, "single | double")->capture_default_str();

  ExplainFlags ex;
  auto* e = app.add_subcommand("explain", "Estimate SSR/SDR/joint masks for one image");
  e->add_option("--weights", ex.weights, "Weight file")->required();
  e->add_option("--data", ex.data, "Dataset directory (with --image-id)");
  e->add_option("--image-id", ex.image_id, "Sample id inside --data");
  e->add_option("--image", ex.image, "PNG image");
  e->add_option("--class", ex.target, "Class to explain (default: predicted)");
  e->add_option("--objective", ex.objectives, "ssr | sdr, repeatable (default: both)");
  e->add_option("--out", ex.out, "Output directory")->required();
  ex.fido.add_to(e, false);

  BenchmarkFlags bm;
  auto* b = app.add_subcommand("benchmark", "IoU/TV over a grid of batch sizes, steps and formulations");
  b->add_option("--weights", bm.weights, "Weight file")->required();
  b->add_option("--data", bm.data, "Dataset directory")->required();
  b->add_option("--out", bm.out, "Output directory")->required();
  b->add_option("--batch-sizes", bm.batch_sizes, "Comma-separated B grid")->capture_default_str();
  b->add_option("--steps", bm.steps, "Comma-separated steps grid")->capture_default_str();
  b->add_option("--formulations", bm.formulations, "Comma-separated formulations")->capture_default_str();
  b->add_option("--images", bm.images, "Number of test images")->capture_default_str();
  b->add_option("--jobs", bm.jobs, "Worker threads (0: $FIDO_MASKS_JOBS or 1)")->capture_default_str();
  bm.fido.add_to(b, true);

  TtaFlags tt;
  auto* a = app.add_subcommand("tta", "Single-crop test-time augmentation accuracy");
  a->add_option("--weights", tt.weights, "Weight file")->required();
  a->add_option("--data", tt.data, "Dataset directory")->required();
  a->add_option("--out", tt.out, "Output directory")->required();
  a->add_option("--methods", tt.methods, "Comma-separated TTA methods")->capture_default_str();
  a->add_option("--images", tt.images, "Number of test images (0: all)")->capture_default_str();
  a->add_option("--jobs", tt.jobs, "Worker threads (0: $FIDO_MASKS_JOBS or 1)")->capture_default_str();
  tt.fido.add_to(a, false);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& pe) {
    const int code = app.exit(pe, out, err);
    return code == 0 ? kOk : kUsageError;
  }

  try {
    if (*g) return cmd_generate(gen, out);
    if (*t) return cmd_train(tr, out, err);
    if (*e) return cmd_explain(ex, out);
    if (*b) return cmd_benchmark(bm, out);
    if (*a) return cmd_tta(tt, out);
  } catch (const ConfigError& ce) {
    err << "error: " << ce.what() << "\n";
    return kUsageError;
  } catch (const std::exception& ex_) {
    err << "error: " << ex_.what() << "\n";
    return kRuntimeError;
  }
  return kUsageError;
}

}  // namespace fido::cli
