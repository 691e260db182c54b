// Acceptance suite: one PASS/FAIL line per criterion. Exit status is non-zero
// when any criterion fails. Usage: fido_acceptance [work-dir [criteria]]

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "fido/autodiff.hpp"
#include "fido/classifier.hpp"
#include "fido/cli.hpp"
#include "fido/concrete_dropout.hpp"
#include "fido/evaluation.hpp"
#include "fido/infill.hpp"
#include "fido/mask_optimizer.hpp"
#include "fido/objectives.hpp"
#include "fido/synthetic_data.hpp"
#include "test_support.hpp"

using namespace fido;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;

void report(int id, bool pass, const std::string& detail) {
  if (!pass) ++failures;
  std::cout << (pass ? "PASS" : "FAIL") << " criterion " << id << ": " << detail << std::endl;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

// ------------------------------------------------------------ 1

void equivalence() {
  const auto t0 = Clock::now();
  Rng rng(101);
  const int n = 100000;
  const double temps[3] = {0.05, 0.1, 0.5};
  double worst = 0;
  for (double t : temps) {
    const int m = n / 3 + (t == 0.05 ? n % 3 : 0);
    Tensor<double> v({m}), eta_hat({m});
    for (Index i = 0; i < m; ++i) {
      v[i] = rng.uniform(-15, 15);
      eta_hat[i] = noise_logit(rng.uniform(0.001, 0.999));
    }
    Tape<double> tape;
    const auto a = sample_original(tape.constant(v), tape.constant(eta_hat), t).value();
    const auto b = sample_simplified(tape.constant(v), tape.constant(eta_hat), t).value();
    worst = std::max(worst, (a.data() - b.data()).abs().maxCoeff());
  }
  const double secs = seconds_since(t0);
  report(1, worst < 1e-10 && secs < 10,
         "max |z_original - z_simplified| = " + fmt("%.3g", worst) + " over 1e5 triples (< 1e-10), " +
             fmt("%.2f", secs) + " s (< 10 s)");
}

// ------------------------------------------------------------ 2

using Build = std::function<Var<double>(const Var<double>&)>;

struct PrimitiveCase {
  const char* name;
  double lo, hi;
  Shape shape;
  std::function<Build(Rng&)> make;
};

std::vector<PrimitiveCase> primitive_cases() {
  auto fixed = [](Build b) { return [b](Rng&) { return b; }; };
  auto with_other = [](Shape s, double lo, double hi, std::function<Var<double>(const Var<double>&, const Var<double>&)> op) {
    return [s, lo, hi, op](Rng& rng) -> Build {
      const Tensor<double> y = test::random_tensor(rng, s, lo, hi);
      const Tensor<double> w = test::random_tensor(rng, s, -1, 1);
      return [y, w, op](const Var<double>& v) { return sum(op(v, v.tape().constant(y)) * v.tape().constant(w)); };
    };
  };
  // Random output weights make every coordinate of the gradient distinct.
  auto weighted = [](Shape s, std::function<Var<double>(const Var<double>&)> op) {
    return [s, op](Rng& rng) -> Build {
      const Tensor<double> w = test::random_tensor(rng, s, -1, 1);
      return [w, op](const Var<double>& v) { return sum(op(v) * v.tape().constant(w)); };
    };
  };
  const Shape s{3, 4};
  std::vector<PrimitiveCase> c;
  c.push_back({"add", -2, 2, s, with_other(s, -2, 2, [](auto a, auto b) { return a + b; })});
  c.push_back({"sub", -2, 2, s, with_other(s, -2, 2, [](auto a, auto b) { return b - a; })});
  c.push_back({"mul", -2, 2, s, with_other(s, -2, 2, [](auto a, auto b) { return a * b; })});
  c.push_back({"div", 0.5, 2, s, with_other(s, 0.5, 2, [](auto a, auto b) { return b / a; })});
  c.push_back({"neg", -2, 2, s, weighted(s, [](auto a) { return -a; })});
  c.push_back({"scalar_ops", -2, 2, s, weighted(s, [](auto a) { return (a + 0.3) * 1.7 - 0.2 + (0.5 - a) / 3.0; })});
  c.push_back({"rdiv_scalar", 0.5, 2, s, weighted(s, [](auto a) { return 2.0 / a; })});
  c.push_back({"sigmoid", -6, 6, s, weighted(s, [](auto a) { return sigmoid(a); })});
  c.push_back({"log", 0.1, 3, s, weighted(s, [](auto a) { return log(a); })});
  c.push_back({"exp", -3, 3, s, weighted(s, [](auto a) { return exp(a); })});
  c.push_back({"sqrt", 0.1, 3, s, weighted(s, [](auto a) { return sqrt(a); })});
  c.push_back({"abs", -2, 2, s, weighted(s, [](auto a) { return abs(a); })});
  c.push_back({"square", -2, 2, s, weighted(s, [](auto a) { return square(a); })});
  c.push_back({"relu", -2, 2, s, weighted(s, [](auto a) { return relu(a); })});
  c.push_back({"clamp", -2, 2, s, weighted(s, [](auto a) { return clamp(a, -1.0, 1.0); })});
  c.push_back({"reshape", -2, 2, s, weighted(Shape{2, 6}, [](auto a) { return reshape(a, {2, 6}); })});
  c.push_back({"sum", -2, 2, s, fixed([](const Var<double>& a) { return square(sum(a)); })});
  c.push_back({"mean", -2, 2, s, fixed([](const Var<double>& a) { return square(mean(a)); })});
  c.push_back({"sum_axes", -2, 2, s, weighted(Shape{3}, [](auto a) { return square(sum(a, {1})); })});
  c.push_back({"mean_axes", -2, 2, s, weighted(Shape{4}, [](auto a) { return square(mean(a, {0})); })});
  c.push_back({"softmax", -3, 3, s, weighted(s, [](auto a) { return softmax(a); })});
  c.push_back({"log_softmax", -3, 3, s, weighted(s, [](auto a) { return log_softmax(a); })});
  c.push_back({"pick", -3, 3, s, fixed([](const Var<double>& a) { return sum(square(pick(a, {1, 3, 0}))); })});
  c.push_back({"total_variation", -2, 2, s, fixed([](const Var<double>& a) { return total_variation(a); })});
  c.push_back({"avg_pool2d", -2, 2, Shape{1, 2, 4, 4},
               weighted(Shape{1, 2, 2, 2}, [](auto a) { return avg_pool2d(a, 2); })});
  c.push_back({"conv2d_input", -1, 1, Shape{2, 5, 5}, [](Rng& rng) -> Build {
                 const Tensor<double> k = test::random_tensor(rng, {3, 2, 3, 3}, -1, 1);
                 const Tensor<double> w = test::random_tensor(rng, {3, 5, 5}, -1, 1);
                 return [k, w](const Var<double>& v) {
                   return sum(conv2d(v, v.tape().constant(k), {1, 1}) * v.tape().constant(w));
                 };
               }});
  c.push_back({"conv2d_kernel", -1, 1, Shape{3, 2, 3, 3}, [](Rng& rng) -> Build {
                 const Tensor<double> x = test::random_tensor(rng, {2, 2, 5, 5}, -1, 1);
                 const Tensor<double> w = test::random_tensor(rng, {2, 3, 5, 5}, -1, 1);
                 return [x, w](const Var<double>& v) {
                   return sum(conv2d(v.tape().constant(x), v, {1, 1}) * v.tape().constant(w));
                 };
               }});
  c.push_back({"linear", -1, 1, Shape{2, 4}, [](Rng& rng) -> Build {
                 const Tensor<double> wt = test::random_tensor(rng, {3, 4}, -1, 1);
                 const Tensor<double> b = test::random_tensor(rng, {3}, -1, 1);
                 const Tensor<double> w = test::random_tensor(rng, {2, 3}, -1, 1);
                 return [wt, b, w](const Var<double>& v) {
                   auto& t = v.tape();
                   return sum(linear(v, t.constant(wt), t.constant(b)) * t.constant(w));
                 };
               }});
  c.push_back({"compose", 0, 1, Shape{2, 4, 4}, [](Rng& rng) -> Build {
                 const Tensor<double> x = test::random_tensor(rng, {3, 4, 4}, 0, 1);
                 const Tensor<double> xh = test::random_tensor(rng, {3, 4, 4}, 0, 1);
                 const Tensor<double> w = test::random_tensor(rng, {2, 3, 4, 4}, -1, 1);
                 return [x, xh, w](const Var<double>& v) { return sum(compose(x, xh, v) * v.tape().constant(w)); };
               }});
  c.push_back({"log_odds", 0.01, 0.99, s, weighted(s, [](auto a) { return log_odds(a, 1e-6); })});
  return c;
}

struct OracleStats {
  int cases = 0;
  double worst = 0;
};

void gradient_oracle() {
  const auto t0 = Clock::now();
  const int n = 100;
  Rng rng(202);

  OracleStats prim;
  std::string worst_prim;
  int primitives = 0;
  for (const auto& pc : primitive_cases()) {
    ++primitives;
    for (int i = 0; i < n; ++i) {
      const Build b = pc.make(rng);
      const double e = test::gradient_error(b, test::random_tensor(rng, pc.shape, pc.lo, pc.hi));
      ++prim.cases;
      if (!(e <= prim.worst)) {
        prim.worst = e;
        worst_prim = pc.name;
      }
    }
  }

  OracleStats simp;
  for (int i = 0; i < n; ++i) {
    const double t = std::array{0.05, 0.1, 0.5}[i % 3];
    const Tensor<double> eta_hat = NoiseDraw<double>::draw(rng, {3, 4, 4}).eta_hat;
    const Tensor<double> w = test::random_tensor(rng, {3, 4, 4}, -1, 1);
    Build b = [&](const Var<double>& v) {
      return sum(sample_simplified(v, v.tape().constant(eta_hat), t) * v.tape().constant(w));
    };
    simp.worst = std::max(simp.worst, test::gradient_error(b, test::random_tensor(rng, {3, 4, 4}, -4, 4)));
    ++simp.cases;
  }

  OracleStats loss[2];
  for (int i = 0; i < n; ++i) {
    const auto model = ClassifierModel<double>::build(InputSpec{3, 8, 8}, 3, 1000 + i, Architecture{4, 4});
    const Tensor<double> x = test::random_tensor(rng, {3, 8, 8}, 0, 1);
    const Tensor<double> xh = make_infill(x, InfillSpec{});
    const Tensor<double> eta_hat = NoiseDraw<double>::draw(rng, {2, 8, 8}).eta_hat;
    const Tensor<double> theta = test::random_tensor(rng, {8, 8}, -2, 2);
    const Index target = Index(i % 3);
    for (int k = 0; k < 2; ++k) {
      FidoConfig cfg;
      cfg.objective = k == 0 ? ObjectiveKind::SSR : ObjectiveKind::SDR;
      cfg.batch_size = 2;
      cfg.precision = Precision::Double;
      const auto g = objective_gradient(x, xh, target, model, cfg, theta, eta_hat);
      auto value = [&](const Tensor<double>& probe) {
        return objective_gradient(x, xh, target, model, cfg, probe, eta_hat).loss;
      };
      const auto fd = finite_difference_gradient<double>(value, theta, 1e-6);
      loss[k].worst = std::max(loss[k].worst, test::relative_error(g.gradient, fd));
      ++loss[k].cases;
    }
  }

  const double secs = seconds_since(t0);
  const bool ok = prim.worst < 1e-4 && simp.worst < 1e-4 && loss[0].worst < 1e-4 && loss[1].worst < 1e-4 &&
                  prim.cases >= 100 * primitives && simp.cases >= 100 && loss[0].cases >= 100 && secs < 60;
  report(2, ok,
         "worst relative error: primitives " + fmt("%.2e", prim.worst) + " (" + worst_prim + ", " +
             std::to_string(primitives) + " ops x 100 cases), sample_simplified " + fmt("%.2e", simp.worst) +
             ", SSR " + fmt("%.2e", loss[0].worst) + ", SDR " + fmt("%.2e", loss[1].worst) + " (< 1e-4); " +
             fmt("%.1f", secs) + " s (< 60 s)");
}

// ------------------------------------------------------------ 3

long count_nonfinite(const Tensor<float>& t) { return long((!t.data().isFinite()).count()); }

void stability() {
  const auto t0 = Clock::now();
  const Index n = 100001;  // step 0.01
  Tensor<float> v({n});
  for (Index i = 0; i < n; ++i) v[i] = float(-500.0 + 0.01 * double(i));
  const Tensor<float> eta_hat = Tensor<float>::full({n}, noise_logit(0.5f));
  long bad[2] = {0, 0};
  for (int k = 0; k < 2; ++k) {
    Tape<float> tape(NumericMode::Permissive);
    auto x = tape.variable(v);
    auto z = k == 0 ? sample_original(x, tape.constant(eta_hat), 0.1f) : sample_simplified(x, tape.constant(eta_hat), 0.1f);
    const auto g = tape.backward(sum(z));
    bad[k] = count_nonfinite(z.value()) + count_nonfinite(g[x]);
  }
  const double secs = seconds_since(t0);
  report(3, bad[1] == 0 && bad[0] >= 1 && secs < 5,
         "non-finite outputs+gradients over 100001 points in [-500,500]: simplified " + std::to_string(bad[1]) +
             " (= 0), original " + std::to_string(bad[0]) + " (>= 1); " + fmt("%.2f", secs) + " s (< 5 s)");
}

// ------------------------------------------------------------ 4

template <typename S>
Tensor<S> dz_dv(Formulation f, const Tensor<S>& v, const Tensor<S>& eta_hat) {
  Tape<S> tape(NumericMode::Permissive);
  auto x = tape.variable(v);
  auto z = sample(f, x, tape.constant(eta_hat), S(0.1));
  return tape.backward(sum(z))[x];
}

void precision_ordering() {
  const auto t0 = Clock::now();
  const Index grid = 2401, draws = 64;  // step 0.01 over [-12, 12]
  Tensor<float> v({draws, grid});
  for (Index k = 0; k < draws; ++k) {
    for (Index i = 0; i < grid; ++i) v[k * grid + i] = float(-12.0 + 0.01 * double(i));
  }
  Rng rng(404);
  const Tensor<float> eta_hat = NoiseDraw<float>::draw(rng, {draws, grid}).eta_hat;
  double dev[2] = {0, 0};
  for (int k = 0; k < 2; ++k) {
    const auto f = k == 0 ? Formulation::Original : Formulation::Simplified;
    const auto gs = dz_dv<float>(f, v, eta_hat).cast<double>();
    const auto gd = dz_dv<double>(f, v.cast<double>(), eta_hat.cast<double>());
    dev[k] = (gs.data() - gd.data()).abs().mean();
  }
  const double secs = seconds_since(t0);
  report(4, dev[1] <= dev[0] && secs < 10,
         "mean |dz/dv single - double|: simplified " + fmt("%.4g", dev[1]) + " <= original " + fmt("%.4g", dev[0]) +
             " (" + std::to_string(grid) + " grid points x " + std::to_string(draws) + " shared draws); " +
             fmt("%.2f", secs) + " s (< 10 s)");
}

// ------------------------------------------------------------ 5

void unit_values() {
  double worst = 0;
  worst = std::max(worst, std::abs(log_odds(0.5) - 0.0));
  worst = std::max(worst, std::abs(total_variation(Tensor<double>({2, 2}, {0, 1, 1, 0})) - 4.0));
  const auto j = joint_mask(Tensor<double>::scalar(0.5).reshaped({1, 1}), Tensor<double>::scalar(0.5).reshaped({1, 1}));
  worst = std::max(worst, std::abs(j[0] - 0.5));
  Rng rng(505);
  const Tensor<double> x = test::random_tensor(rng, {3, 6, 6}, 0, 1);
  const Tensor<double> xh = test::random_tensor(rng, {3, 6, 6}, 0, 1);
  Tape<double> tape;
  const auto zero = compose(x, xh, tape.constant(Tensor<double>({1, 6, 6}))).value();
  const auto one = compose(x, xh, tape.constant(Tensor<double>::full({1, 6, 6}, 1.0))).value();
  worst = std::max(worst, (zero.data() - x.data()).abs().maxCoeff());
  worst = std::max(worst, (one.data() - xh.data()).abs().maxCoeff());
  report(5, worst <= 1e-12,
         "log_odds(0.5)=0, TV(checkerboard 2x2)=4, joint(0.5,0.5)=0.5, compose(z=0)=x, compose(z=1)=x_hat; max error " +
             fmt("%.3g", worst) + " (<= 1e-12)");
}

// ------------------------------------------------------------ CLI helpers

struct CliResult {
  int code;
  std::string out, err;
};

CliResult cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  if (code != 0) std::cerr << "fido_masks " << args.front() << " failed (" << code << "): " << err.str();
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

using Table = std::vector<std::map<std::string, std::string>>;

Table read_csv(const fs::path& p) {
  std::istringstream is(slurp(p));
  std::string line;
  std::getline(is, line);
  std::vector<std::string> header;
  {
    std::istringstream hs(line);
    for (std::string c; std::getline(hs, c, ',');) header.push_back(c);
  }
  Table rows;
  while (std::getline(is, line)) {
    std::map<std::string, std::string> row;
    std::istringstream ls(line);
    std::string c;
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (!std::getline(ls, c, ',')) c.clear();
      row[header[i]] = c;
    }
    rows.push_back(row);
  }
  return rows;
}

double lookup(const Table& t, const std::string& method, const std::string& column, int b = -1, int steps = -1,
              const std::string& formulation = "") {
  for (const auto& r : t) {
    if (r.at("method") != method) continue;
    if (b >= 0 && r.at("batch_size") != std::to_string(b)) continue;
    if (steps >= 0 && r.at("steps") != std::to_string(steps)) continue;
    if (!formulation.empty() && r.at("formulation") != formulation) continue;
    return std::stod(r.at(column));
  }
  throw std::runtime_error("no row for " + method + " " + column);
}

// ------------------------------------------------------------ 6, 7

struct Pipeline {
  fs::path data, model, weights, bench;
  bool ok = false;
};

Pipeline toy_pipeline(const fs::path& work) {
  Pipeline p{work / "data", work / "model", work / "model" / "weights.fmwt", work / "benchmark"};
  const auto t0 = Clock::now();
  bool ran = cli({"generate-dataset", "--out", p.data.string(), "--seed", "1"}).code == 0;
  const auto t_train = Clock::now();
  const auto tr = cli({"train", "--data", p.data.string(), "--out", p.model.string(), "--seed", "1"});
  const double train_secs = seconds_since(t_train);
  ran = ran && tr.code == 0;
  double test_acc = 0;
  if (ran) test_acc = std::stod(tr.out.substr(tr.out.find("test_accuracy=") + 14));
  ran = ran && cli({"benchmark", "--weights", p.weights.string(), "--data", p.data.string(), "--out", p.bench.string(),
                    "--batch-sizes", "2,4,8,16", "--steps", "30,100", "--formulations", "original,simplified",
                    "--images", "20", "--jobs", "1", "--seed", "1"})
                    .code == 0;
  const double total = seconds_since(t0);
  if (!ran) {
    report(6, false, "pipeline did not complete");
    return p;
  }
  p.ok = true;

  const Table t = read_csv(p.bench / "benchmark_report.csv");
  bool a = true;
  std::string cells;
  for (int b : {2, 4, 8, 16}) {
    for (int s : {30, 100}) {
      const double o = lookup(t, "fido_joint", "mean_iou", b, s, "original");
      const double q = lookup(t, "fido_joint", "mean_iou", b, s, "simplified");
      a = a && q >= o;
      cells += " B" + std::to_string(b) + "/s" + std::to_string(s) + " " + fmt("%.4f", q) + " vs " + fmt("%.4f", o) + ";";
    }
  }
  auto drop = [&](const char* f) {
    return lookup(t, "fido_joint", "mean_iou", 16, 100, f) - lookup(t, "fido_joint", "mean_iou", 2, 100, f);
  };
  const double drop_o = drop("original"), drop_s = drop("simplified");
  const bool b_ok = drop_s < drop_o;
  const bool acc_ok = test_acc >= 0.95 && train_secs < 180;
  report(6, a && b_ok && acc_ok && total < 1800,
         "test accuracy " + fmt("%.4f", test_acc) + " (>= 0.95) trained in " + fmt("%.1f", train_secs) +
             " s (< 180 s); (a) joint IoU simplified vs original:" + cells + " " + (a ? "all >=" : "NOT all >=") +
             "; (b) IoU(B16)-IoU(B2) at 100 steps: simplified " + fmt("%.6g", drop_s) + " vs original " +
             fmt("%.6g", drop_o) + " (" + (b_ok ? "smaller" : "NOT smaller") + "); total " + fmt("%.0f", total) +
             " s (< 1800 s)");

  bool tv_ok = true;
  std::string tv;
  for (const char* m : {"fido_ssr", "fido_sdr", "fido_joint"}) {
    const double o = lookup(t, m, "mean_tv", 8, 100, "original");
    const double q = lookup(t, m, "mean_tv", 8, 100, "simplified");
    tv_ok = tv_ok && q < o;
    tv += std::string(" ") + m + " " + fmt("%.9g", q) + " vs " + fmt("%.9g", o) + (q < o ? " (lower)" : " (NOT lower)") + ";";
  }
  report(7, tv_ok, "mean TV at B=8, 100 steps, simplified vs original:" + tv);
  return p;
}

// ------------------------------------------------------------ 8

void tta(const Pipeline& p, const fs::path& work) {
  if (!p.ok) {
    report(8, false, "pipeline unavailable");
    return;
  }
  const fs::path out = work / "tta";
  if (cli({"tta", "--weights", p.weights.string(), "--data", p.data.string(), "--out", out.string(), "--methods",
           "none,gt_bbox,fido_joint", "--jobs", "1", "--seed", "1"})
          .code != 0) {
    report(8, false, "tta did not complete");
    return;
  }
  const Table t = read_csv(out / "tta.csv");
  const double none = lookup(t, "none", "accuracy"), gt = lookup(t, "gt_bbox", "accuracy"),
               fido = lookup(t, "fido_joint", "accuracy");
  report(8, none <= fido && std::abs(fido - gt) <= 0.02,
         "accuracy none " + fmt("%.4f", none) + " <= fido_joint " + fmt("%.4f", fido) + ", |fido_joint - gt_bbox " +
             fmt("%.4f", gt) + "| = " + fmt("%.4f", std::abs(fido - gt)) + " (<= 0.02)");
}

// ------------------------------------------------------------ 9

std::map<std::string, std::string> outputs(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    const auto ext = e.path().extension();
    if (e.is_regular_file() && (ext == ".csv" || ext == ".tnsr" || ext == ".fmwt" || ext == ".png") &&
        e.path().filename() != "timings.csv") {
      files[fs::relative(e.path(), dir).string()] = slurp(e.path());
    }
  }
  return files;
}

void determinism(const fs::path& work) {
  const auto t0 = Clock::now();
  std::vector<std::string> diffs;
  int compared = 0;
  auto twice = [&](const std::string& name, const std::function<std::vector<std::string>(const fs::path&)>& args,
                   const fs::path& a, const fs::path& b) {
    const bool ok = cli(args(a)).code == 0 && cli(args(b)).code == 0;
    const auto fa = outputs(a), fb = outputs(b);
    compared += int(fa.size());
    if (!ok || fa.empty() || fa != fb) diffs.push_back(name);
  };
  const fs::path d = work / "determinism";
  fs::remove_all(d);

  twice("generate-dataset",
        [](const fs::path& o) {
          return std::vector<std::string>{"generate-dataset", "--out", o.string(), "--seed", "7", "--samples-per-class", "30"};
        },
        d / "data_a", d / "data_b");
  if (slurp(d / "data_a" / "manifest.json") != slurp(d / "data_b" / "manifest.json")) diffs.push_back("dataset manifest");
  const std::string data = (d / "data_a").string();

  twice("train",
        [&](const fs::path& o) {
          return std::vector<std::string>{"train", "--data", data, "--out", o.string(), "--seed", "7", "--epochs", "3"};
        },
        d / "model_a", d / "model_b");
  const std::string weights = (d / "model_a" / "weights.fmwt").string();
  const std::string image_id = load_dataset(data).test.front().id;

  for (const char* prec : {"single", "double"}) {
    twice(std::string("explain ") + prec,
          [&](const fs::path& o) {
            return std::vector<std::string>{"explain", "--weights", weights, "--data", data, "--image-id", image_id,
                                            "--steps", "20", "--precision", prec, "--seed", "7", "--out", o.string()};
          },
          d / (std::string("explain_a_") + prec), d / (std::string("explain_b_") + prec));
  }

  auto bench = [&](const char* jobs) {
    return [&, jobs](const fs::path& o) {
      return std::vector<std::string>{"benchmark", "--weights", weights, "--data", data, "--out", o.string(),
                                      "--batch-sizes", "2,4", "--steps", "5,10", "--images", "4", "--seed", "7",
                                      "--jobs", jobs};
    };
  };
  twice("benchmark jobs=1", bench("1"), d / "bench_a", d / "bench_b");
  twice("benchmark jobs=3", bench("3"), d / "bench_c", d / "bench_d");
  if (outputs(d / "bench_a") != outputs(d / "bench_c")) diffs.push_back("benchmark jobs=1 vs jobs=3");

  auto tta_args = [&](const char* jobs) {
    return [&, jobs](const fs::path& o) {
      return std::vector<std::string>{"tta", "--weights", weights, "--data", data, "--out", o.string(), "--images", "6",
                                      "--steps", "10", "--seed", "7", "--jobs", jobs};
    };
  };
  twice("tta jobs=1", tta_args("1"), d / "tta_a", d / "tta_b");
  twice("tta jobs=3", tta_args("3"), d / "tta_c", d / "tta_d");
  if (outputs(d / "tta_a") != outputs(d / "tta_c")) diffs.push_back("tta jobs=1 vs jobs=3");

  std::string detail = "generate-dataset, train, explain (single, double), benchmark and tta run twice; " +
                       std::to_string(compared) + " CSV/tensor/weight/PNG files compared; jobs=1 vs jobs=3 compared";
  if (!diffs.empty()) {
    detail += "; differing:";
    for (const auto& s : diffs) detail += " [" + s + "]";
  }
  report(9, diffs.empty(), detail + "; " + fmt("%.1f", seconds_since(t0)) + " s");
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::current_path() / "acceptance_work";
  const std::string only = argc > 2 ? argv[2] : "";  // e.g. "125": run a subset
  auto selected = [&](int id) { return only.empty() || only.find(char('0' + id)) != std::string::npos; };
  fs::create_directories(work);

  const auto guard = [&](int id, const std::function<void()>& f) {
    if (!selected(id)) return;
    try {
      f();
    } catch (const std::exception& e) {
      report(id, false, std::string("threw: ") + e.what());
    }
  };
  guard(1, equivalence);
  guard(2, gradient_oracle);
  guard(3, stability);
  guard(4, precision_ordering);
  guard(5, unit_values);
  Pipeline p;
  if (selected(6) || selected(7) || selected(8)) {
    fs::remove_all(work / "benchmark");
    try {
      p = toy_pipeline(work);
    } catch (const std::exception& e) {
      report(6, false, std::string("threw: ") + e.what());
    }
  }
  guard(8, [&] { tta(p, work); });
  guard(9, [&] { determinism(work); });
  std::cout << (failures == 0 ? "ALL PASS" : std::to_string(failures) + " criteria FAILED") << std::endl;
  return failures == 0 ? 0 : 1;
}
