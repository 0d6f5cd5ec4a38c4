#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "pnc/data.hpp"
#include "pnc/model.hpp"

namespace pnc {

struct TrainConfig {
  std::size_t epochs = 4;
  std::size_t batch_size = 64;
  double learning_rate = 0.05;
  double momentum = 0.9;
  /// Learning rate is multiplied by this factor after every epoch.
  double lr_decay = 0.5;
  std::uint64_t seed = 1;
};

struct TrainLog {
  std::vector<double> epoch_loss;
};

/// Cross-entropy training of all parameters; labels must already be 0..C-1.
TrainLog train_classifier(NetworkModel& net, const LabeledDataset& train, const TrainConfig& config);

using LogitFn = std::function<Tensor(const Tensor&)>;

/// Logits of `fn` over the whole dataset, evaluated in batches without a graph.
Tensor batched_logits(const LogitFn& fn, const LabeledDataset& ds, std::size_t batch_size = 256);

std::vector<std::size_t> argmax_rows(const Tensor& logits);

}  // namespace pnc
