#pragma once

// Small networks shared by unit and acceptance tests.

#include <algorithm>
#include <cstdint>
#include <vector>

#include "gradcheck.hpp"
#include "mmclip/datagen.hpp"
#include "mmclip/network.hpp"
#include "mmclip/trainer.hpp"

namespace mmclip::testing {

// 2 -> 16 -> 16 -> classes with random biases, so margins are not centered.
inline Network two_input_mlp(std::uint64_t seed, std::size_t classes = 3) {
  Network net({2}, {LayerSpec::dense(16, Activation::relu, true),
                    LayerSpec::dense(16, Activation::relu, true),
                    LayerSpec::dense(classes, Activation::none, false)});
  net.init_weights(seed);
  Rng rng = Rng::derive(seed, 77);
  for (std::size_t l = 0; l < net.layers().size(); ++l)
    for (double& v : net.params(l)[1].data()) v = rng.uniform(-0.5, 0.5);
  return net;
}

// Logits f_k = w_k . x + b_k over a 2-D input.
inline Network linear_net(const std::vector<double>& w, const std::vector<double>& b) {
  const std::size_t classes = b.size();
  Network net({w.size() / classes}, {LayerSpec::dense(classes, Activation::none, false)});
  net.params(0)[0] = Tensor({w.size() / classes, classes}, w);
  net.params(0)[1] = Tensor({classes}, b);
  return net;
}

// mlp3 trained on 10-class data with 5% of the samples carrying an additive
// chessboard trigger relabeled to class 0.
struct PoisonedFixture {
  CleanSet clean;  // 10 per class
  Dataset train;   // poisoned
  Dataset test;    // 20 per class, untriggered
  TriggerSpec trigger;
  Network net;
};

inline PoisonedFixture poisoned_fixture() {
  const Dataset all = synth_classes({.per_class = 140, .seed = 4});
  CleanSplit split = split_clean_set(all, 10, 5);
  auto [test, rest] = split_per_class(split.rest, 20, 8);
  PoisonedFixture f{std::move(split.clean), Dataset(), std::move(test),
                    chessboard_trigger(all.sample_shape(), 0.2, 0), mlp3(64, 10)};
  f.train = poison(rest, f.trigger, 0.05, 6);
  TrainConfig tc;
  tc.epochs = 30;
  tc.seed = 7;
  f.net = train(f.net, f.train, tc).net;
  return f;
}

// Scalar forward of a dense-only network, independent of the graph engine.
// `bounds` holds one vector per clippable layer, or is empty.
// `trace`, when given, receives the pre-clip output of every clippable layer.
inline std::vector<double> dense_oracle(const Network& net,
                                        const std::vector<std::vector<double>>& bounds,
                                        std::vector<double> x,
                                        std::vector<std::vector<double>>* trace = nullptr) {
  std::size_t b = 0;
  for (std::size_t l = 0; l < net.layers().size(); ++l) {
    const auto& spec = net.layers()[l];
    const Tensor& w = net.params(l)[0];
    const Tensor& bias = net.params(l)[1];
    const std::size_t in = w.dim(0), out = w.dim(1);
    std::vector<double> y(out);
    for (std::size_t j = 0; j < out; ++j) {
      double acc = bias[j];
      for (std::size_t i = 0; i < in; ++i) acc += x[i] * w[i * out + j];
      if (spec.activation == Activation::relu) acc = std::max(acc, 0.0);
      y[j] = acc;
    }
    if (spec.clippable && trace) trace->push_back(y);
    for (std::size_t j = 0; j < out; ++j) {
      double acc = y[j];
      if (spec.clippable && !bounds.empty()) acc = std::min(acc, bounds[b][j]);
      y[j] = acc;
    }
    if (spec.clippable) ++b;
    x = std::move(y);
  }
  return x;
}

}  // namespace mmclip::testing
