#include <doctest.h>

#include <numeric>

#include "fido/infill.hpp"
#include "test_support.hpp"

using namespace fido;
using fido::test::random_tensor;

TEST_CASE("make_infill examples") {
  const Tensor<double> flat = Tensor<double>::full({3, 16, 16}, 0.37);
  InfillSpec blur;
  CHECK((make_infill(flat, blur).data() - 0.37).abs().maxCoeff() < 1e-6);

  InfillSpec zero{InfillKind::Constant};
  CHECK((make_infill(flat, zero).data() == 0.0).all());

  Rng rng(8);
  const Tensor<double> img = random_tensor(rng, {1, 16, 16}, 0, 1);
  InfillSpec wide;
  wide.blur_sigma = 200.0;
  CHECK((make_infill(img, wide).data() - img.data().mean()).abs().maxCoeff() < 0.02);

  InfillSpec uniform{InfillKind::UniformRandom};
  uniform.seed = 5;
  const auto u = make_infill(img, uniform);
  CHECK(u.shape() == img.shape());
  CHECK(u == make_infill(img, uniform));
  CHECK((u.data() >= 0.0).all());
  CHECK((u.data() < 1.0).all());

  CHECK_THROWS_AS(parse_infill_kind("gan"), ConfigError);
  InfillSpec bad;
  bad.blur_sigma = 0.0;
  CHECK_THROWS_AS(make_infill(img, bad), ConfigError);
}

TEST_CASE("blur kernel is normalized and removes fine detail") {
  for (double s : {0.5, 1.0, 4.0, 9.3}) {
    const auto k = gaussian_kernel(s);
    CHECK(std::abs(std::accumulate(k.begin(), k.end(), 0.0) - 1.0) < 1e-9);
    CHECK(k.size() == std::size_t(2 * std::ceil(3 * s) + 1));
  }
  Tensor<double> checker({1, 8, 8});
  for (Index i = 0; i < 64; ++i) checker[i] = double(((i / 8) + (i % 8)) % 2);
  const auto b = gaussian_blur(checker, 4.0);
  CHECK((b.data() - 0.5).abs().maxCoeff() < 0.05);
  CHECK(reflect_index(-1, 5) == 0);
  CHECK(reflect_index(5, 5) == 4);
  CHECK(reflect_index(-7, 5) == 3);
}

TEST_CASE("compose identities") {
  Rng rng(2);
  const Tensor<double> x = random_tensor(rng, {3, 4, 5}, 0, 1);
  const Tensor<double> xh = random_tensor(rng, {3, 4, 5}, 0, 1);
  auto rows = [](double v) { return MaskBatch<double>{Tensor<double>::full({2, 4, 5}, v)}; };
  const auto zero = compose(x, xh, rows(0.0));
  const auto one = compose(x, xh, rows(1.0));
  const auto half = compose(x, xh, rows(0.5));
  for (Index r = 0; r < 2; ++r) {
    CHECK((zero.data().segment(r * 60, 60) == x.data()).all());
    CHECK((one.data().segment(r * 60, 60) == xh.data()).all());
    CHECK(((half.data().segment(r * 60, 60) - (x.data() + xh.data()) / 2).abs() < 1e-15).all());
  }
  CHECK_THROWS_AS(compose(x, xh, MaskBatch<double>{Tensor<double>({2, 5, 4})}), ShapeError);
  CHECK_THROWS_AS(compose(x, Tensor<double>({3, 4, 4}), rows(0.0)), ShapeError);
}

TEST_CASE("compose range and derivative") {
  Rng rng(12);
  const Tensor<double> x = random_tensor(rng, {3, 4, 4}, 0, 1);
  const Tensor<double> xh = random_tensor(rng, {3, 4, 4}, 0, 1);
  const Tensor<double> z = random_tensor(rng, {3, 4, 4}, 0, 1);
  const auto phi = compose(x, xh, MaskBatch<double>{z});
  CHECK((phi.data() >= 0.0).all());
  CHECK((phi.data() <= 1.0).all());

  // Seeding the adjoint with one channel's indicator recovers x_hat - x.
  for (Index ch = 0; ch < 3; ++ch) {
    Tape<double> tape;
    auto zv = tape.variable(z);
    auto out = compose(x, xh, zv);
    Tensor<double> seed(out.shape());
    for (Index r = 0; r < 3; ++r) seed.data().segment((r * 3 + ch) * 16, 16).setOnes();
    const auto g = tape.backward(out, seed);
    for (Index r = 0; r < 3; ++r) {
      CHECK(((g[zv].data().segment(r * 16, 16) - (xh.data() - x.data()).segment(ch * 16, 16)).abs() < 1e-15).all());
    }
  }
  CHECK(fido::test::gradient_error([&](const Var<double>& v) { return sum(square(compose(x, xh, v))); }, z) < 1e-6);
}
