#include "pnc/zoo.hpp"

#include <algorithm>

#include <spdlog/spdlog.h>

#include "pnc/errors.hpp"
#include "pnc/eval.hpp"
#include "pnc/rng.hpp"
#include "pnc/train.hpp"

namespace pnc {

NetworkModel pretrain(const std::string& arch, const std::vector<int>& classes, const Mnist& data,
                      const RunConfig& config) {
  if (classes.size() < 2) throw ConfigError("pretrain: at least two classes are required");
  std::vector<int> sorted = classes;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) throw ConfigError("pretrain: duplicate class");

  NetworkModel net = build_network(arch, sorted.size(), derive_seed(config.seed, "pretrain"));
  TrainConfig tc;
  tc.epochs = config.pretrain_epochs;
  tc.batch_size = config.pretrain_batch;
  tc.learning_rate = config.pretrain_lr;
  tc.lr_decay = config.pretrain_lr_decay;
  tc.momentum = config.momentum;
  tc.seed = derive_seed(config.seed, "pretrain/order");
  train_classifier(net, class_split(data.train, sorted, true), tc);

  net.meta.classes = sorted;
  net.meta.seed = config.seed;
  net.meta.epochs = config.pretrain_epochs;
  const LogitFn fn = [&](const Tensor& x) { return forward(net, x); };
  net.meta.test_accuracy = accuracy(fn, class_split(data.test, sorted, false), sorted);
  spdlog::info("pretrain {} on {}: test accuracy {:.4f}", arch, class_list_str(sorted), net.meta.test_accuracy);
  return net;
}

NetworkModel load_or_pretrain(const std::filesystem::path& path, const std::string& arch,
                              const std::vector<int>& classes, const Mnist& data, const RunConfig& config) {
  std::vector<int> sorted = classes;
  std::sort(sorted.begin(), sorted.end());
  if (std::filesystem::exists(path)) {
    NetworkModel net = load_checkpoint(path);
    if (net.arch_id == arch && net.meta.classes == sorted && net.meta.seed == config.seed &&
        net.meta.epochs == config.pretrain_epochs) {
      return net;
    }
    spdlog::warn("{} does not match the requested network; retraining", path.string());
  }
  NetworkModel net = pretrain(arch, sorted, data, config);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  save_checkpoint(net, path);
  return net;
}

}  // namespace pnc
