#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "../common/fixtures.hpp"
#include "mmclip/error.hpp"
#include "mmclip/network.hpp"

using namespace mmclip;
using mmclip::testing::dense_oracle;
using mmclip::testing::random_tensor;

namespace {

Network small_mlp(std::uint64_t seed) {
  Network net({3}, {LayerSpec::dense(6, Activation::relu, true),
                    LayerSpec::dense(5, Activation::relu, true),
                    LayerSpec::dense(4, Activation::none, false)});
  net.init_weights(seed);
  Rng rng(seed + 100);
  for (std::size_t l = 0; l < 3; ++l) net.params(l)[1] = random_tensor(rng, {net.params(l)[1].size()});
  return net;
}

}  // namespace

TEST_CASE("fixture architectures") {
  const Network m = mlp3(64, 10);
  CHECK(m.num_classes() == 10);
  CHECK(m.clippable_layers() == std::vector<std::size_t>{0, 1});
  CHECK(m.bound_length(0) == 128);
  CHECK(m.bound_length(1) == 64);
  CHECK(m.layers().back().activation == Activation::none);

  const Network c = cnn_s(8, 8, 10);
  CHECK(c.num_classes() == 10);
  for (std::size_t l : c.clippable_layers())
    CHECK(c.bound_length(l) == c.output_shape(l)[0]);  // one bound per feature map
  for (std::size_t l = 1; l < c.layers().size(); ++l)
    CHECK(c.layer_input_shape(l) == c.output_shape(l - 1));
}

TEST_CASE("single dense layer returns the weight column of a basis input") {
  Network net({3}, {LayerSpec::dense(2, Activation::none, false)});
  net.params(0)[0] = Tensor({3, 2}, {1.0, 2.0, 3.0, 4.0, 5.0, 6.0});
  const Tensor y = forward(net, Tensor({1, 3}, {1.0, 0.0, 0.0}));
  CHECK(y == Tensor({1, 2}, {1.0, 2.0}));
}

TEST_CASE("dense network matches the scalar oracle with and without clipping") {
  Rng rng(5);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Network net = small_mlp(seed);
    const Tensor x = random_tensor(rng, {7, 3}, 0.0, 1.0);
    std::vector<std::vector<double>> z{{}, {}};
    for (std::size_t i = 0; i < 6; ++i) z[0].push_back(rng.uniform(0.01, 0.8));
    for (std::size_t i = 0; i < 5; ++i) z[1].push_back(rng.uniform(0.01, 0.8));
    const BoundVectors bounds({Tensor({6}, z[0]), Tensor({5}, z[1])});
    const Tensor plain = forward(net, x), clipped = bounded_forward(net, bounds, x);
    for (std::size_t n = 0; n < 7; ++n) {
      std::vector<double> row(x.data().begin() + n * 3, x.data().begin() + n * 3 + 3);
      const auto a = dense_oracle(net, {}, row), b = dense_oracle(net, z, row);
      for (std::size_t k = 0; k < 4; ++k) {
        CHECK(plain[n * 4 + k] == doctest::Approx(a[k]).epsilon(1e-12));
        CHECK(clipped[n * 4 + k] == doctest::Approx(b[k]).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("one clipped hidden neuron contributes its bound") {
  Network net({1}, {LayerSpec::dense(1, Activation::relu, true),
                    LayerSpec::dense(2, Activation::none, false)});
  net.params(0)[0] = Tensor({1, 1}, {2.0});
  net.params(1)[0] = Tensor({1, 2}, {1.0, 0.0});
  const BoundVectors z({Tensor::from({0.5})});
  CHECK(bounded_forward(net, z, Tensor({1, 1}, {1.0}))[0] == 0.5);
  CHECK(forward(net, Tensor({1, 1}, {1.0}))[0] == 2.0);
}

TEST_CASE("infinite beta gives identity clipping") {
  Rng rng(9);
  const Network net = mlp3(16, 5);
  Network trained = net;
  trained.init_weights(4);
  const Tensor clean = random_tensor(rng, {20, 16}, 0.0, 1.0);
  const BoundVectors z = init_bounds(trained, clean, std::numeric_limits<double>::infinity());
  const Tensor x = random_tensor(rng, {50, 16}, 0.0, 1.0);
  CHECK(bounded_forward(trained, z, x) == forward(trained, x));
}

TEST_CASE("bounds above every activation leave the network unchanged") {
  Rng rng(2);
  Network net = cnn_s(8, 8, 4);
  net.init_weights(1);
  const Tensor x = random_tensor(rng, {10, 1, 8, 8}, 0.0, 1.0);
  const BoundVectors z = init_bounds(net, x, 1.0);
  CHECK(bounded_forward(net, z, x) == forward(net, x));
}

TEST_CASE("init_bounds is beta times the observed maxima, floored") {
  Rng rng(3);
  Network net = small_mlp(1);
  // a dead unit: zero weights and a negative bias
  for (std::size_t i = 0; i < 3; ++i) net.params(0)[0][i * 6 + 2] = 0.0;
  net.params(0)[1][2] = -1.0;
  const Tensor clean = random_tensor(rng, {12, 3}, 0.0, 1.0);
  const BoundVectors z = init_bounds(net, clean, 2.0);

  std::vector<double> max0(6, -1e300), max1(5, -1e300);
  for (std::size_t n = 0; n < 12; ++n) {
    std::vector<double> x(clean.data().begin() + n * 3, clean.data().begin() + n * 3 + 3);
    std::vector<std::vector<double>> h;
    dense_oracle(net, {}, x, &h);
    const auto& h1 = h[0];
    const auto& h2 = h[1];
    for (std::size_t j = 0; j < 6; ++j) max0[j] = std::max(max0[j], h1[j]);
    for (std::size_t j = 0; j < 5; ++j) max1[j] = std::max(max1[j], h2[j]);
  }
  for (std::size_t j = 0; j < 6; ++j)
    CHECK(z[0][j] == doctest::Approx(std::max(2.0 * max0[j], BoundVectors::kFloor)));
  for (std::size_t j = 0; j < 5; ++j)
    CHECK(z[1][j] == doctest::Approx(std::max(2.0 * max1[j], BoundVectors::kFloor)));
  CHECK(z[0][2] == BoundVectors::kFloor);
  CHECK_THROWS_AS(init_bounds(net, clean, 0.5), InvalidArgument);
}

TEST_CASE("bound vectors are floored and checked against the network") {
  const BoundVectors z({Tensor::from({-1.0, 0.0, 5.0})});
  CHECK(z[0] == Tensor::from({BoundVectors::kFloor, BoundVectors::kFloor, 5.0}));
  const Network net = mlp3(4, 3);
  CHECK_THROWS_AS(z.check_compatible(net), ShapeError);
  CHECK_NOTHROW(BoundVectors::unbounded(net).check_compatible(net));
  CHECK_THROWS_AS(bounded_forward(net, z, Tensor({1, 4})), ShapeError);
}

TEST_CASE("forward yields one logit per class") {
  Rng rng(1);
  Network net = mlp3(12, 7);
  net.init_weights(0);
  const Tensor y = forward(net, random_tensor(rng, {3, 12}, 0.0, 1.0));
  CHECK(y.shape() == Shape{3, 7});
  CHECK(y.all_finite());
}

TEST_CASE("network construction rejects inconsistent layers") {
  CHECK_THROWS(Network({3}, {}));
  CHECK_THROWS(Network({3}, {LayerSpec::conv(2, 3, 0, Activation::relu, true)}));
  CHECK_THROWS(Network({3}, {LayerSpec::dense(4, Activation::relu, true)}));
  CHECK_THROWS(Network({3}, {LayerSpec::dense(1, Activation::none, false)}));
}
