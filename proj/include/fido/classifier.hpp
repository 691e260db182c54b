#pragma once

// Small CNN for the toy task:
//   conv3x3(C -> c1) + ReLU + avgpool2 -> conv3x3(c1 -> c2) + ReLU + avgpool2
//   -> dense(c2 * H/4 * W/4 -> classes) -> softmax

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "fido/autodiff.hpp"
#include "fido/optim.hpp"
#include "fido/rng.hpp"
#include "fido/tensor.hpp"
#include "fido/tensor_io.hpp"

namespace fido {

struct InputSpec {
  Index channels = 3;
  Index height = 32;
  Index width = 32;

  Shape shape() const { return {channels, height, width}; }
  friend bool operator==(const InputSpec&, const InputSpec&) = default;
};

struct Architecture {
  Index conv1_channels = 16;
  Index conv2_channels = 32;
};

struct TrainConfig {
  int epochs = 30;
  double learning_rate = 1e-2;
  double adam_epsilon = 0.1;
  double weight_decay = 0.0;
  int batch_size = 32;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (!(learning_rate >= 0.0)) throw ConfigError("learning rate must be >= 0");
    if (!(adam_epsilon > 0.0)) throw ConfigError("adam epsilon must be positive");
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  }
};

struct TrainReport {
  std::vector<double> epoch_loss;  // mean cross-entropy per epoch
};

template <typename Scalar>
class ClassifierModel {
 public:
  static constexpr std::size_t kParamCount = 6;
  static constexpr std::uint32_t kWeightFileVersion = 1;

  ClassifierModel() = default;

  /// He-normal initialization, deterministic in `seed`.
  static ClassifierModel build(const InputSpec& input, Index classes, std::uint64_t seed, Architecture arch = {}) {
    if (classes < 2) throw ConfigError("classifier needs at least 2 classes");
    if (input.channels < 1 || input.height < 4 || input.width < 4 || input.height % 4 || input.width % 4) {
      throw ConfigError("input height and width must be positive multiples of 4");
    }
    if (arch.conv1_channels < 1 || arch.conv2_channels < 1) throw ConfigError("conv channel counts must be >= 1");
    ClassifierModel m;
    m.input_ = input;
    m.classes_ = classes;
    const Index c1 = arch.conv1_channels, c2 = arch.conv2_channels;
    const Index features = c2 * (input.height / 4) * (input.width / 4);
    Rng rng(seed);
    auto he = [&rng](Shape shape, Index fan_in) {
      Tensor<Scalar> t(std::move(shape));
      const double scale = std::sqrt(2.0 / double(fan_in));
      for (Index i = 0; i < t.size(); ++i) t[i] = Scalar(scale * rng.normal());
      return t;
    };
    m.params_[0] = he({c1, input.channels, 3, 3}, input.channels * 9);
    m.params_[1] = Tensor<Scalar>({c1});
    m.params_[2] = he({c2, c1, 3, 3}, c1 * 9);
    m.params_[3] = Tensor<Scalar>({c2});
    m.params_[4] = he({classes, features}, features);
    m.params_[5] = Tensor<Scalar>({classes});
    return m;
  }

  const InputSpec& input_spec() const { return input_; }
  Index classes() const { return classes_; }
  const std::array<Tensor<Scalar>, kParamCount>& parameters() const { return params_; }
  std::array<Tensor<Scalar>, kParamCount>& parameters() { return params_; }

  Index parameter_count() const {
    Index n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
  }

  /// Records the parameters on `tape`, as variables when training.
  std::array<Var<Scalar>, kParamCount> bind(Tape<Scalar>& tape, bool trainable) const {
    std::array<Var<Scalar>, kParamCount> vars;
    for (std::size_t i = 0; i < kParamCount; ++i) {
      vars[i] = trainable ? tape.variable(params_[i]) : tape.constant(params_[i]);
    }
    return vars;
  }

  /// Logits (N, classes) for an (N,C,H,W) batch.
  Var<Scalar> logits(const Var<Scalar>& images, const std::array<Var<Scalar>, kParamCount>& p) const {
    const Shape& s = images.shape();
    if (s.size() != 4 || s[1] != input_.channels || s[2] != input_.height || s[3] != input_.width) {
      throw ShapeError("classifier expects (N," + std::to_string(input_.channels) + "," +
                       std::to_string(input_.height) + "," + std::to_string(input_.width) + "), got " +
                       shape_string(s));
    }
    Var<Scalar> h = avg_pool2d(relu(conv2d(images, p[0], std::optional(p[1]), {1, 1})), 2);
    h = avg_pool2d(relu(conv2d(h, p[2], std::optional(p[3]), {1, 1})), 2);
    h = reshape(h, {s[0], h.size() / s[0]});
    return linear(h, p[4], p[5]);
  }

  /// Class probabilities (N, classes) recorded on the caller's tape; the
  /// parameters enter as constants.
  Var<Scalar> probabilities(const Var<Scalar>& images) const {
    return softmax(logits(images, bind(images.tape(), false)));
  }

  /// p(c|x) for one (C,H,W) image.
  Tensor<Scalar> predict_proba(const Tensor<Scalar>& image) const {
    if (image.shape() != input_.shape()) {
      throw ShapeError("predict_proba: image " + shape_string(image.shape()) + " does not match input spec " +
                       shape_string(input_.shape()));
    }
    Tensor<Scalar> batch = predict_proba_batch(image.reshaped({1, input_.channels, input_.height, input_.width}));
    return batch.reshaped({classes_});
  }

  /// Row-wise probabilities for an (N,C,H,W) batch.
  Tensor<Scalar> predict_proba_batch(const Tensor<Scalar>& images) const {
    Tape<Scalar> tape(NumericMode::Permissive);
    return probabilities(tape.constant(images)).value();
  }

  template <typename Other>
  ClassifierModel<Other> cast() const {
    ClassifierModel<Other> out;
    out.input_ = input_;
    out.classes_ = classes_;
    for (std::size_t i = 0; i < kParamCount; ++i) out.params_[i] = params_[i].template cast<Other>();
    return out;
  }

  /// Weight file: "FMWT", u32 version, u32 layer count, u32 channels, height,
  /// width, classes, then weight and bias blob of each layer.
  void save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    os.write("FMWT", 4);
    io::write_u32(os, kWeightFileVersion);
    io::write_u32(os, std::uint32_t(kParamCount / 2));
    io::write_u32(os, std::uint32_t(input_.channels));
    io::write_u32(os, std::uint32_t(input_.height));
    io::write_u32(os, std::uint32_t(input_.width));
    io::write_u32(os, std::uint32_t(classes_));
    for (const auto& p : params_) write_tensor(os, p);
    if (!os) throw std::runtime_error("failed writing " + path);
  }

  static ClassifierModel load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open weight file " + path);
    io::expect_magic(is, "FMWT", "weight file");
    const auto version = io::read_u32(is, "version");
    if (version != kWeightFileVersion) throw FormatError("unsupported weight file version " + std::to_string(version));
    const auto layers = io::read_u32(is, "layer count");
    if (layers != kParamCount / 2) throw FormatError("weight file has " + std::to_string(layers) + " layers, expected 3");
    ClassifierModel m;
    m.input_.channels = Index(io::read_u32(is, "channels"));
    m.input_.height = Index(io::read_u32(is, "height"));
    m.input_.width = Index(io::read_u32(is, "width"));
    m.classes_ = Index(io::read_u32(is, "classes"));
    for (auto& p : m.params_) p = read_tensor_as<Scalar>(is);
    m.check_consistency();
    return m;
  }

 private:
  template <typename>
  friend class ClassifierModel;

  void check_consistency() const {
    const auto& p = params_;
    const bool ok = p[0].rank() == 4 && p[0].dim(1) == input_.channels && p[1].shape() == Shape{p[0].dim(0)} &&
                    p[2].rank() == 4 && p[2].dim(1) == p[0].dim(0) && p[3].shape() == Shape{p[2].dim(0)} &&
                    p[4].shape() == Shape{classes_, p[2].dim(0) * (input_.height / 4) * (input_.width / 4)} &&
                    p[5].shape() == Shape{classes_};
    if (!ok) throw FormatError("weight file tensors are inconsistent with the stored architecture");
  }

  InputSpec input_;
  Index classes_ = 0;
  std::array<Tensor<Scalar>, kParamCount> params_;
};

/// Stacks (C,H,W) images into an (N,C,H,W) batch.
template <typename Scalar>
Tensor<Scalar> stack_images(std::span<const Tensor<Scalar>> images, std::span<const std::size_t> order = {}) {
  const std::size_t n = order.empty() ? images.size() : order.size();
  if (n == 0) throw ShapeError("stack_images: empty batch");
  const Tensor<Scalar>& first = images[order.empty() ? 0 : order[0]];
  Shape shape{Index(n)};
  shape.insert(shape.end(), first.shape().begin(), first.shape().end());
  Tensor<Scalar> out(shape);
  const Index per = first.size();
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor<Scalar>& img = images[order.empty() ? i : order[i]];
    if (img.shape() != first.shape()) throw ShapeError("stack_images: mixed image shapes");
    out.data().segment(Index(i) * per, per) = img.data();
  }
  return out;
}

/// Mean cross-entropy minimization with Adam(W); mutates `model`.
template <typename Scalar>
TrainReport train(ClassifierModel<Scalar>& model, std::span<const Tensor<Scalar>> images, std::span<const int> labels,
                  const TrainConfig& cfg) {
  cfg.validate();
  if (images.empty()) throw ConfigError("training set is empty");
  if (images.size() != labels.size()) throw ConfigError("images and labels differ in length");
  for (int y : labels) {
    if (y < 0 || y >= model.classes()) {
      throw ConfigError("label " + std::to_string(y) + " out of range for " + std::to_string(model.classes()) +
                        " classes");
    }
  }
  AdamOptions opt;
  opt.learning_rate = cfg.learning_rate;
  opt.epsilon = cfg.adam_epsilon;
  opt.weight_decay = cfg.weight_decay;
  std::vector<Adam<Scalar>> adam;
  for (const auto& p : model.parameters()) adam.emplace_back(p.shape(), opt);

  TrainReport report;
  std::vector<std::size_t> order(images.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(cfg.seed, std::uint64_t(epoch)));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += std::size_t(cfg.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + std::size_t(cfg.batch_size));
      std::span<const std::size_t> idx(order.data() + start, stop - start);
      std::vector<Index> targets;
      for (std::size_t i : idx) targets.push_back(labels[i]);
      Tape<Scalar> tape;
      auto params = model.bind(tape, true);
      Var<Scalar> x = tape.constant(stack_images(images, idx));
      Var<Scalar> loss = -mean(pick(log_softmax(model.logits(x, params)), targets));
      auto grads = tape.backward(loss);
      for (std::size_t k = 0; k < params.size(); ++k) adam[k].step(model.parameters()[k], grads[params[k]]);
      total += double(loss.value().item()) * double(idx.size());
    }
    report.epoch_loss.push_back(total / double(order.size()));
  }
  return report;
}

/// Fraction of images whose arg-max prediction equals the label.
template <typename Scalar>
double accuracy(const ClassifierModel<Scalar>& model, std::span<const Tensor<Scalar>> images,
                std::span<const int> labels, std::size_t chunk = 64) {
  if (images.empty()) return 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < images.size(); start += chunk) {
    const std::size_t stop = std::min(images.size(), start + chunk);
    std::vector<std::size_t> idx(stop - start);
    std::iota(idx.begin(), idx.end(), start);
    Tensor<Scalar> p = model.predict_proba_batch(stack_images(images, std::span<const std::size_t>(idx)));
    const Index c = model.classes();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      Index best = 0;
      for (Index k = 1; k < c; ++k) {
        if (p[Index(i) * c + k] > p[Index(i) * c + best]) best = k;
      }
      if (best == labels[start + i]) ++correct;
    }
  }
  return double(correct) / double(images.size());
}

}  // namespace fido
