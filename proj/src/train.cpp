#include "pnc/train.hpp"

#include <numeric>

#include <spdlog/spdlog.h>

#include "pnc/errors.hpp"
#include "pnc/optim.hpp"
#include "pnc/rng.hpp"

namespace pnc {

TrainLog train_classifier(NetworkModel& net, const LabeledDataset& train, const TrainConfig& config) {
  if (train.size() == 0) throw DataError("train_classifier: empty dataset");
  for (int label : train.labels) {
    if (label < 0 || static_cast<std::size_t>(label) >= net.num_classes) {
      throw DataError("train_classifier: label " + std::to_string(label) + " outside the network's classes");
    }
  }
  net.set_trainable(true);
  std::vector<Tensor> params = net.parameters();
  SgdState sgd{config.learning_rate, config.momentum, {}};
  Rng rng(config.seed, "train/order");
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  TrainLog log;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::span<const std::size_t> idx(order.data() + start, end - start);
      std::vector<std::size_t> labels;
      for (auto i : idx) labels.push_back(static_cast<std::size_t>(train.labels[i]));
      Tensor loss = cross_entropy(forward(net, make_batch(train, idx)), labels);
      if (!std::isfinite(loss.item())) {
        throw NumericError("train_classifier: non-finite loss in epoch " + std::to_string(epoch));
      }
      loss.backward();
      sgd_step(params, sgd);
      total += loss.item();
      ++batches;
    }
    log.epoch_loss.push_back(total / static_cast<double>(batches));
    spdlog::info("pretrain {} epoch {}/{} loss {:.5f} lr {:.4g}", net.arch_id, epoch + 1, config.epochs,
                 log.epoch_loss.back(), sgd.learning_rate);
    sgd.learning_rate *= config.lr_decay;
  }
  net.set_trainable(false);
  net.meta.epochs = config.epochs;
  net.meta.seed = config.seed;
  return log;
}

Tensor batched_logits(const LogitFn& fn, const LabeledDataset& ds, std::size_t batch_size) {
  if (ds.size() == 0) throw DataError("batched_logits: empty dataset");
  NoGradGuard guard;
  std::vector<double> values;
  std::size_t width = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < ds.size(); start += batch_size) {
    const std::size_t end = std::min(ds.size(), start + batch_size);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    Tensor logits = fn(make_batch(ds, idx));
    width = logits.dim(1);
    values.insert(values.end(), logits.data().begin(), logits.data().end());
  }
  return Tensor(Dims{ds.size(), width}, std::move(values));
}

std::vector<std::size_t> argmax_rows(const Tensor& logits) {
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j) {
      if (logits.data()[i * c + j] > logits.data()[i * c + best]) best = j;
    }
    out[i] = best;
  }
  return out;
}

}  // namespace pnc
