#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "pnc/data.hpp"
#include "pnc/model.hpp"
#include "pnc/rng.hpp"
#include "pnc/surrogate.hpp"

namespace pnc {

constexpr double kBudgetPenaltyWeight = 0.1;

/// Learnable filter selection over every block of a source network. Soft
/// masks are the logistic function of unconstrained logits.
struct MaskSet {
  std::vector<Tensor> logits;
  std::vector<std::size_t> budgets;
  /// Masks apply to blocks [active_from, L) when grafted.
  std::size_t active_from = 0;

  std::size_t depth() const { return logits.size(); }
  std::vector<std::size_t> widths() const;
  /// sigmoid(logits), recorded on the graph when the logits require grad.
  BlockMasks soft() const;
  std::vector<std::vector<double>> soft_values() const;
  /// Logit tensors of blocks [from, L).
  std::vector<Tensor> parameters(std::size_t from) const;
  MaskSet clone() const;
};

/// c^l = ceil(rate * width^l), clamped to [1, width^l].
std::vector<std::size_t> budgets_for_rate(const NetworkModel& net, double rate);

/// Zero logits (soft value 0.5) with the given budgets.
MaskSet init_masks(const NetworkModel& net, const std::vector<std::size_t>& budgets);

/// Exactly c^l selected filters per block, kept as ascending index lists.
struct BinaryMaskSet {
  std::vector<std::size_t> widths;
  std::vector<std::vector<std::size_t>> selected;

  std::vector<std::size_t> budgets() const;
  std::vector<std::vector<double>> values() const;
  BlockMasks tensors() const;
  bool operator==(const BinaryMaskSet&) const = default;
};

/// Ones at the `budget` largest entries; ties go to the lower index.
std::vector<double> binarize_topk(std::span<const double> values, std::size_t budget);
BinaryMaskSet binarize_topk(const std::vector<std::vector<double>>& values, const std::vector<std::size_t>& budgets);
BinaryMaskSet binarize_topk(const MaskSet& masks);

/// (local model index, mask index) pair drawn from a surrogate set.
using AnchorMask = std::pair<std::size_t, std::size_t>;

std::vector<AnchorMask> sample_pairs(Rng& rng, std::size_t models, std::size_t masks, std::size_t count);

/// Perturbed anchor images for a minibatch of pairs, N x 1 x H x W.
Tensor pair_batch(const LocalModelSet& set, const LabeledDataset& anchors, std::span<const AnchorMask> pairs);

/// beta * sum_{l >= from} max(0, sum(m^l) - c^l).
Tensor budget_penalty(const BlockMasks& soft, const std::vector<std::size_t>& budgets, std::size_t from, double beta);

/// Mean squared distance between the masked source's selected logits on
/// perturbed anchors and the surrogate predictions, plus the budget penalty.
/// Only blocks >= masks.active_from are masked.
Tensor loc_loss(const NetworkModel& source, const MaskSet& masks, const LocalModelSet& surrogates,
                const LabeledDataset& anchors, std::span<const AnchorMask> pairs,
                double beta = kBudgetPenaltyWeight);

struct MaskTrainConfig {
  std::size_t steps = 300;
  std::size_t batch_size = 32;
  double learning_rate = 0.05;
  double momentum = 0.9;
  double beta = kBudgetPenaltyWeight;
  std::uint64_t seed = 1;
  std::size_t probe_pairs = 256;
};

struct MaskTrainResult {
  MaskSet masks;
  double initial_loss = 0.0;  // on a fixed probe set of pairs
  double final_loss = 0.0;
  std::vector<double> step_losses;
};

/// Optimizes only the mask logits; the source network is never written.
MaskTrainResult train_masks(const NetworkModel& source, const LocalModelSet& surrogates,
                            const LabeledDataset& anchors, MaskSet init, const MaskTrainConfig& config);

}  // namespace pnc
