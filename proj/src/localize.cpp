#include "pnc/localize.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <spdlog/spdlog.h>

#include "pnc/errors.hpp"
#include "pnc/optim.hpp"

namespace pnc {

std::vector<std::size_t> MaskSet::widths() const {
  std::vector<std::size_t> w;
  for (const auto& l : logits) w.push_back(l.size());
  return w;
}

BlockMasks MaskSet::soft() const {
  BlockMasks out;
  for (const auto& l : logits) out.push_back(sigmoid(l));
  return out;
}

std::vector<std::vector<double>> MaskSet::soft_values() const {
  NoGradGuard guard;
  std::vector<std::vector<double>> out;
  for (const auto& m : soft()) out.emplace_back(m.data().begin(), m.data().end());
  return out;
}

std::vector<Tensor> MaskSet::parameters(std::size_t from) const {
  return {logits.begin() + static_cast<std::ptrdiff_t>(std::min(from, logits.size())), logits.end()};
}

MaskSet MaskSet::clone() const {
  MaskSet c = *this;
  for (auto& l : c.logits) l = l.clone();
  return c;
}

std::vector<std::size_t> budgets_for_rate(const NetworkModel& net, double rate) {
  if (!(rate > 0.0 && rate <= 1.0)) throw ConfigError("budget rate " + std::to_string(rate) + " outside (0,1]");
  std::vector<std::size_t> out;
  for (auto w : net.maskable_widths()) {
    auto c = static_cast<std::size_t>(std::ceil(rate * static_cast<double>(w) - 1e-9));
    out.push_back(std::clamp<std::size_t>(c, 1, w));
  }
  return out;
}

MaskSet init_masks(const NetworkModel& net, const std::vector<std::size_t>& budgets) {
  const auto widths = net.maskable_widths();
  if (budgets.size() != widths.size()) {
    throw ContractError("init_masks: " + std::to_string(budgets.size()) + " budgets for " +
                        std::to_string(widths.size()) + " blocks");
  }
  MaskSet m;
  for (std::size_t b = 0; b < widths.size(); ++b) {
    if (budgets[b] < 1 || budgets[b] > widths[b]) {
      throw ContractError("init_masks: budget " + std::to_string(budgets[b]) + " for block " + std::to_string(b) +
                          " of width " + std::to_string(widths[b]));
    }
    m.logits.push_back(Tensor(Dims{widths[b]}, 0.0).set_requires_grad(true));
  }
  m.budgets = budgets;
  return m;
}

std::vector<std::size_t> BinaryMaskSet::budgets() const {
  std::vector<std::size_t> out;
  for (const auto& s : selected) out.push_back(s.size());
  return out;
}

std::vector<std::vector<double>> BinaryMaskSet::values() const {
  std::vector<std::vector<double>> out;
  for (std::size_t b = 0; b < widths.size(); ++b) {
    std::vector<double> v(widths[b], 0.0);
    for (auto i : selected[b]) v[i] = 1.0;
    out.push_back(std::move(v));
  }
  return out;
}

BlockMasks BinaryMaskSet::tensors() const {
  BlockMasks out;
  for (auto& v : values()) {
    const std::size_t n = v.size();
    out.emplace_back(Dims{n}, std::move(v));
  }
  return out;
}

std::vector<double> binarize_topk(std::span<const double> values, std::size_t budget) {
  if (budget > values.size()) {
    throw ContractError("binarize_topk: budget " + std::to_string(budget) + " exceeds width " +
                        std::to_string(values.size()));
  }
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });
  std::vector<double> out(values.size(), 0.0);
  for (std::size_t k = 0; k < budget; ++k) out[order[k]] = 1.0;
  return out;
}

BinaryMaskSet binarize_topk(const std::vector<std::vector<double>>& values, const std::vector<std::size_t>& budgets) {
  if (values.size() != budgets.size()) throw ContractError("binarize_topk: budget count differs from block count");
  BinaryMaskSet out;
  for (std::size_t b = 0; b < values.size(); ++b) {
    const auto bits = binarize_topk(values[b], budgets[b]);
    std::vector<std::size_t> sel;
    for (std::size_t i = 0; i < bits.size(); ++i) {
      if (bits[i] != 0.0) sel.push_back(i);
    }
    out.widths.push_back(values[b].size());
    out.selected.push_back(std::move(sel));
  }
  return out;
}

BinaryMaskSet binarize_topk(const MaskSet& masks) { return binarize_topk(masks.soft_values(), masks.budgets); }

std::vector<AnchorMask> sample_pairs(Rng& rng, std::size_t models, std::size_t masks, std::size_t count) {
  if (models == 0 || masks == 0) throw ContractError("sample_pairs: empty surrogate set");
  std::vector<AnchorMask> out(count);
  for (auto& p : out) {
    p.first = rng.below(models);
    p.second = rng.below(masks);
  }
  return out;
}

Tensor pair_batch(const LocalModelSet& set, const LabeledDataset& anchors, std::span<const AnchorMask> pairs) {
  const std::size_t n = anchors.image_size();
  Tensor out(Dims{pairs.size(), 1, anchors.height, anchors.width});
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    const auto& model = set.models.at(pairs[k].first);
    if (model.anchor >= anchors.size()) throw ContractError("pair_batch: anchor index outside the anchor dataset");
    const auto img = perturb(anchors.image(model.anchor), set.masks.at(pairs[k].second), set.grid);
    std::copy(img.begin(), img.end(), out.data().begin() + static_cast<std::ptrdiff_t>(k * n));
  }
  return out;
}

Tensor budget_penalty(const BlockMasks& soft, const std::vector<std::size_t>& budgets, std::size_t from, double beta) {
  Tensor total = Tensor::scalar(0.0);
  for (std::size_t b = from; b < soft.size(); ++b) {
    total = add(total, relu(add_scalar(sum(soft[b]), -static_cast<double>(budgets[b]))));
  }
  return scale(total, beta);
}

Tensor loc_loss(const NetworkModel& source, const MaskSet& masks, const LocalModelSet& surrogates,
                const LabeledDataset& anchors, std::span<const AnchorMask> pairs, double beta) {
  if (pairs.empty()) throw ContractError("loc_loss: empty minibatch");
  for (auto c : surrogates.classes) {
    if (c >= source.num_classes) {
      throw ContractError("loc_loss: surrogate output " + std::to_string(c) + " not produced by the source");
    }
  }
  if (masks.depth() != source.depth()) throw ContractError("loc_loss: mask set does not match the source depth");
  const std::size_t from = masks.active_from;
  BlockMasks soft = masks.soft();
  BlockMasks applied = soft;
  for (std::size_t b = 0; b < from && b < applied.size(); ++b) applied[b] = Tensor(Dims{soft[b].size()}, 1.0);

  const Tensor x = pair_batch(surrogates, anchors, pairs);
  const Tensor logits = forward(source, x, &applied);
  const Tensor selected = select_columns(logits, surrogates.classes);
  const Tensor target = predict_pairs(surrogates, pairs);
  const Tensor fit = scale(sum_sq(sub(selected, target)), 1.0 / static_cast<double>(pairs.size()));
  return add(fit, budget_penalty(soft, masks.budgets, from, beta));
}

MaskTrainResult train_masks(const NetworkModel& source, const LocalModelSet& surrogates,
                            const LabeledDataset& anchors, MaskSet init, const MaskTrainConfig& config) {
  const auto widths = source.maskable_widths();
  if (init.widths() != widths) throw ContractError("train_masks: mask widths do not match the source");
  for (std::size_t b = 0; b < widths.size(); ++b) {
    if (init.budgets[b] < 1 || init.budgets[b] > widths[b]) {
      throw ContractError("train_masks: budget " + std::to_string(init.budgets[b]) + " exceeds width " +
                          std::to_string(widths[b]) + " of block " + std::to_string(b));
    }
  }
  for (auto& l : init.logits) {
    if (l.is_leaf() && !l.requires_grad()) l.set_requires_grad(true);
  }

  MaskTrainResult result;
  Rng probe_rng(config.seed, "masks/probe");
  const auto probe = sample_pairs(probe_rng, surrogates.models.size(), surrogates.masks.size(), config.probe_pairs);
  auto probe_loss = [&](const MaskSet& m) {
    NoGradGuard guard;
    return loc_loss(source, m, surrogates, anchors, probe, config.beta).item();
  };
  result.initial_loss = probe_loss(init);

  std::vector<Tensor> params = init.parameters(init.active_from);
  SgdState sgd{config.learning_rate, config.momentum, {}};
  Rng rng(config.seed, "masks/train");
  for (std::size_t step = 0; step < config.steps; ++step) {
    const auto batch = sample_pairs(rng, surrogates.models.size(), surrogates.masks.size(), config.batch_size);
    Tensor loss = loc_loss(source, init, surrogates, anchors, batch, config.beta);
    if (!std::isfinite(loss.item())) throw NumericError("train_masks: non-finite loss at step " + std::to_string(step));
    loss.backward();
    sgd_step(params, sgd);
    result.step_losses.push_back(loss.item());
    if ((step + 1) % 50 == 0) spdlog::debug("masks step {} loss {:.5f}", step + 1, loss.item());
  }
  result.final_loss = probe_loss(init);
  spdlog::info("mask localization: probe loss {:.5f} -> {:.5f} over {} steps", result.initial_loss,
               result.final_loss, config.steps);
  result.masks = std::move(init);
  return result;
}

}  // namespace pnc
