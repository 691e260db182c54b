#pragma once

#include <cmath>

#include "fido/tensor.hpp"

namespace fido {

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  /// Decoupled (AdamW) weight decay.
  double weight_decay = 0.0;
};

/// Adam / AdamW state for one parameter tensor.
template <typename Scalar>
class Adam {
 public:
  Adam(const Shape& shape, AdamOptions opt) : opt_(opt), m_(shape), v_(shape) {}

  void step(Tensor<Scalar>& param, const Tensor<Scalar>& grad) {
    ++t_;
    const auto b1 = Scalar(opt_.beta1), b2 = Scalar(opt_.beta2);
    m_.data() = b1 * m_.data() + (Scalar(1) - b1) * grad.data();
    v_.data() = b2 * v_.data() + (Scalar(1) - b2) * grad.data().square();
    const auto c1 = Scalar(1.0 - std::pow(opt_.beta1, double(t_)));
    const auto c2 = Scalar(1.0 - std::pow(opt_.beta2, double(t_)));
    const auto lr = Scalar(opt_.learning_rate);
    if (opt_.weight_decay != 0.0) param.data() -= lr * Scalar(opt_.weight_decay) * param.data();
    param.data() -= lr * (m_.data() / c1) / ((v_.data() / c2).sqrt() + Scalar(opt_.epsilon));
  }

  long steps() const { return t_; }

 private:
  AdamOptions opt_;
  Tensor<Scalar> m_, v_;
  long t_ = 0;
};

}  // namespace fido
