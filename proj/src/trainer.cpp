#include "mmclip/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "mmclip/graph.hpp"
#include "mmclip/random.hpp"

namespace mmclip {

namespace {
constexpr std::size_t kEvalChunk = 2048;
}

TrainConfig TrainConfig::overtrained(std::size_t factor) const {
  TrainConfig c = *this;
  c.epochs = epochs * factor;
  return c;
}

double TrainConfig::learning_rate_at(std::size_t epoch) const {
  double lr = learning_rate;
  if (2 * epoch >= epochs) lr *= lr_decay;
  if (4 * epoch >= 3 * epochs) lr *= lr_decay;
  return lr;
}

std::vector<int> argmax_rows(const Tensor& logits) {
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto row = logits.data().subspan(i * c, c);
    out[i] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

std::vector<int> predict(const Network& net, const std::optional<BoundVectors>& bounds,
                         const Tensor& batch) {
  std::vector<int> out;
  for (const Tensor& chunk : split_batch(batch, kEvalChunk)) {
    auto p = argmax_rows(logits(net, bounds, chunk));
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

Metrics score_predictions(const std::vector<int>& predicted, const Dataset& ds) {
  if (predicted.size() != ds.size()) throw InvalidArgument("prediction count differs from dataset size");
  const std::size_t classes = ds.num_classes();
  Metrics m;
  m.confusion.assign(classes, std::vector<std::size_t>(classes, 0));
  m.per_class_count.assign(classes, 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto y = static_cast<std::size_t>(ds.label(i));
    const auto p = static_cast<std::size_t>(predicted[i]);
    if (p >= classes) throw InvalidArgument("predicted label out of range");
    ++m.confusion[y][p];
    ++m.per_class_count[y];
    if (y == p) ++correct;
  }
  m.acc = ds.empty() ? 0.0 : 100.0 * static_cast<double>(correct) / static_cast<double>(ds.size());
  for (std::size_t c = 0; c < classes; ++c)
    m.per_class_acc.push_back(m.per_class_count[c] == 0
                                  ? std::numeric_limits<double>::quiet_NaN()
                                  : 100.0 * static_cast<double>(m.confusion[c][c]) /
                                        static_cast<double>(m.per_class_count[c]));
  return m;
}

Metrics evaluate(const Network& net, const std::optional<BoundVectors>& bounds,
                 const Dataset& ds) {
  if (ds.empty()) return score_predictions({}, ds);
  return score_predictions(predict(net, bounds, ds.inputs()), ds);
}

TrainResult train(const Network& net, const Dataset& ds, const TrainConfig& cfg,
                  const Dataset* test) {
  if (cfg.epochs == 0) throw InvalidArgument("train: epochs must be >= 1");
  if (cfg.batch_size == 0) throw InvalidArgument("train: batch size must be >= 1");
  if (ds.empty()) throw InvalidArgument("train: dataset is empty");
  if (ds.dim() != net.input_size())
    throw ShapeError("train: samples have " + std::to_string(ds.dim()) +
                     " values, network expects " + std::to_string(net.input_size()));

  TrainResult result{net, {}};
  Network& model = result.net;
  if (cfg.init_weights) model.init_weights(cfg.seed);

  // Momentum buffers mirror the parameter layout.
  std::vector<std::vector<Tensor>> velocity;
  for (std::size_t l = 0; l < model.layers().size(); ++l) {
    std::vector<Tensor> v;
    for (const Tensor& p : model.params(l)) v.emplace_back(p.shape());
    velocity.push_back(std::move(v));
  }

  Rng rng = Rng::derive(cfg.seed, 0x7261696e);
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.learning_rate_at(epoch);
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - start);
      std::span<const std::size_t> rows(order.data() + start, n);
      std::vector<int> labels;
      for (std::size_t r : rows) labels.push_back(ds.label(r));

      Graph g;
      ForwardTrace trace;
      NodeRef loss;
      try {
        trace = build_forward(g, model, ds.inputs(rows), nullptr, {.grad_weights = true});
        loss = g.softmax_ce(trace.logits, labels);
      } catch (const NonFiniteError& e) {
        throw TrainingDiverged(epoch, "training diverged in epoch " + std::to_string(epoch) +
                                          ": " + e.what());
      }
      loss_sum += g.value(loss).item() * static_cast<double>(n);
      const auto pred = argmax_rows(g.value(trace.logits));
      for (std::size_t i = 0; i < n; ++i) correct += pred[i] == labels[i];

      const Gradients grads = g.backward(loss);
      for (std::size_t l = 0; l < model.layers().size(); ++l) {
        const bool decays = model.layers()[l].kind == LayerKind::dense ||
                            model.layers()[l].kind == LayerKind::conv;
        for (std::size_t k = 0; k < model.params(l).size(); ++k) {
          Tensor& p = model.params(l)[k];
          Tensor& v = velocity[l][k];
          const Tensor& grad = grads[trace.weights[l][k]];
          const double wd = decays && k == 0 ? cfg.weight_decay : 0.0;
          for (std::size_t i = 0; i < p.size(); ++i) {
            v[i] = cfg.momentum * v[i] + grad[i] + wd * p[i];
            p[i] -= lr * v[i];
          }
        }
      }
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss = loss_sum / static_cast<double>(ds.size());
    rec.train_acc = 100.0 * static_cast<double>(correct) / static_cast<double>(ds.size());
    if (!std::isfinite(rec.loss))
      throw TrainingDiverged(epoch, "training loss is not finite in epoch " + std::to_string(epoch));
    if (test && !test->empty()) rec.test_acc = evaluate(model, std::nullopt, *test).acc;
    result.curve.push_back(rec);
  }
  return result;
}

}  // namespace mmclip
