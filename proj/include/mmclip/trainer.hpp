#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "mmclip/dataset.hpp"
#include "mmclip/error.hpp"
#include "mmclip/network.hpp"

namespace mmclip {

/// Minibatch SGD with momentum; the learning rate drops by `lr_decay` at
/// half and at three quarters of the run.
struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  double learning_rate = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double lr_decay = 0.1;
  std::uint64_t seed = 0;
  /// Start from fresh He-initialized weights drawn from `seed`.
  bool init_weights = true;

  /// Same run with five times the epochs, schedule stretched accordingly.
  TrainConfig overtrained(std::size_t factor = 5) const;
  double learning_rate_at(std::size_t epoch) const;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0.0;
  double train_acc = 0.0;
  std::optional<double> test_acc;
};

struct TrainResult {
  Network net;
  std::vector<EpochRecord> curve;
};

class TrainingDiverged : public Error {
 public:
  TrainingDiverged(std::size_t epoch, const std::string& what) : Error(what), epoch_(epoch) {}
  std::size_t epoch() const { return epoch_; }

 private:
  std::size_t epoch_;
};

/// Cross-entropy training of `net`'s architecture on `ds`. When `test` is
/// given its accuracy is recorded per epoch.
TrainResult train(const Network& net, const Dataset& ds, const TrainConfig& cfg,
                  const Dataset* test = nullptr);

struct Metrics {
  double acc = 0.0;                   // percent
  std::vector<double> per_class_acc;  // percent, NaN for classes with no samples
  std::vector<std::size_t> per_class_count;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
};

std::vector<int> predict(const Network& net, const std::optional<BoundVectors>& bounds,
                         const Tensor& batch);
Metrics evaluate(const Network& net, const std::optional<BoundVectors>& bounds,
                 const Dataset& ds);
/// Metrics of already-decided labels against ds's labels.
Metrics score_predictions(const std::vector<int>& predicted, const Dataset& ds);

/// Row-wise argmax of a [N, C] logit tensor (lowest index on ties).
std::vector<int> argmax_rows(const Tensor& logits);

}  // namespace mmclip
