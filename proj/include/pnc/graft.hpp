#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "pnc/config.hpp"
#include "pnc/eval.hpp"
#include "pnc/localize.hpp"
#include "pnc/model.hpp"
#include "pnc/surrogate.hpp"

namespace pnc {

/// Aligns target trunk features at the splice to the input the source
/// branch expects there: a 1x1 conv (optionally followed by average pooling)
/// for feature maps, a dense map for flat features; both rectified.
struct Adapter {
  LayerKind kind = LayerKind::conv;
  Tensor weight;
  Tensor bias;
  Dims in_dims;
  Dims out_dims;
  bool pool = false;

  Tensor apply(const Tensor& trunk) const;
  std::vector<Tensor> parameters() const { return {weight, bias}; }
  NamedTensors named_parameters() const;
};

/// Identity when the widths agree, Kaiming-uniform otherwise.
Adapter make_adapter(const Dims& trunk_dims, const Dims& branch_dims, Rng& rng);

/// Classifier over [trunk features | branch features]. Kept as two weight
/// blocks so the old-class logits start out bit-identical to the target's.
struct ExtendedHead {
  Tensor trunk_weight;   // (old + new) x trunk width
  Tensor branch_weight;  // (old + new) x branch width
  Tensor bias;           // old + new
  std::size_t old_classes = 0;
  std::size_t new_classes = 0;

  Tensor apply(const Tensor& trunk, const Tensor& branch) const;
  std::size_t out_width() const { return old_classes + new_classes; }
  std::vector<Tensor> parameters() const { return {trunk_weight, branch_weight, bias}; }
  NamedTensors named_parameters() const;
};

enum class NewRowInit {
  source,  // copy the source head's rows of the cloned classes onto the branch slice
  random,  // N(0, 1e-2) on the branch slice, zero bias
};

/// Old rows: the target head on the trunk slice, zero on the branch slice.
/// New rows: zero on the trunk slice, branch slice per `init`.
ExtendedHead make_extended_head(const Layer& target_head, const Layer& source_head,
                                const std::vector<std::size_t>& cloned_outputs, NewRowInit init, Rng& rng);

enum class MaskMode { soft, binary };

/// Provenance carried into packets.
struct CloneMeta {
  std::string target_file;  // checkpoint file names in the zoo, as hints
  std::string source_file;
  std::string config_digest;
  std::uint64_t seed = 0;
};

struct ClonedModel {
  std::shared_ptr<const NetworkModel> target;
  std::shared_ptr<const NetworkModel> source;
  MaskSet masks;
  std::optional<BinaryMaskSet> binary;
  std::size_t position = 0;
  Adapter adapter;
  ExtendedHead head;
  std::vector<int> original_classes;      // dataset labels of the old-class slice
  std::vector<int> cloned_classes;        // dataset labels of the new-class slice
  std::vector<std::size_t> cloned_outputs;  // source output indices of the cloned classes
  CloneMeta meta;

  /// Dataset label of every output column.
  std::vector<int> class_order() const;
  std::vector<Tensor> trainable(bool include_masks) const;
  ClonedModel clone() const;
};

/// Fresh adapter and head for splicing at `position`.
ClonedModel assemble(std::shared_ptr<const NetworkModel> target, std::shared_ptr<const NetworkModel> source,
                     const MaskSet& masks, std::size_t position, const std::vector<int>& cloned_classes,
                     std::uint64_t seed, NewRowInit init = NewRowInit::source);

struct ClonedOutputs {
  Tensor logits;
  Tensor target_logits;  // the frozen target's own logits on the same batch
};

ClonedOutputs cloned_forward_full(const ClonedModel& c, const Tensor& x, MaskMode mode);
Tensor cloned_forward(const ClonedModel& c, const Tensor& x, MaskMode mode);
LogitFn cloned_logit_fn(const ClonedModel& c, MaskMode mode = MaskMode::binary);

/// Affine map applied to the surrogate logits in the joint teacher.
struct TeacherCalibration {
  double scale = 1.0;
  double shift = 0.0;

  nlohmann::json to_json() const { return {{"scale", scale}, {"shift", shift}}; }
};

/// Distillation loss on perturbed anchors: old-class slice against the frozen
/// target, new-class slice against the surrogates, and (with weight
/// `joint_weight`) the whole output against [target logits, scale * surrogate
/// prediction + shift].
Tensor ins_loss(const ClonedModel& c, const LocalModelSet& surrogates, const LabeledDataset& anchors,
                std::span<const AnchorMask> pairs, double joint_weight, const TeacherCalibration& teacher = {},
                MaskMode mode = MaskMode::soft);

/// `scale` multiplies the surrogate logits, `shift` adds to them.
enum class TeacherMode { scale, shift };

/// Calibrates the surrogate logits against the target's so that the joint
/// teacher ranks a new class first on a `coverage` fraction of the clean
/// anchors. The two networks' logits are calibrated independently, so without
/// it the joint teacher follows whichever scale happens to be larger. Zero
/// coverage gives the identity map.
TeacherCalibration calibrate_teacher(const NetworkModel& target, const LocalModelSet& surrogates,
                                     const LabeledDataset& anchors, double coverage, TeacherMode mode);

struct InsertionConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double learning_rate = 0.01;
  double momentum = 0.9;
  double beta = kBudgetPenaltyWeight;
  double joint_weight = 1.0;
  TeacherCalibration teacher;
  std::size_t calibrate_epochs = 2;
  bool freeze_old_rows = true;
  NewRowInit new_rows = NewRowInit::source;
  std::uint64_t seed = 1;
};

struct FitResult {
  double initial_loss = 0.0;
  double convergence = 0.0;  // mean total loss of the final epoch
  std::vector<double> epoch_losses;
  double calibration_loss = 0.0;  // final-epoch mean insertion loss under binary masks
};

/// Joint SGD on mask logits (blocks >= R), adapter and head. Frozen
/// networks are never written.
FitResult fit_at_position(ClonedModel& c, const LocalModelSet& surrogates, const LabeledDataset& anchors,
                          const InsertionConfig& config);

/// Fixes the binary selection and fine-tunes adapter and head under it, so
/// the evaluated network is the one that was trained. Returns the final-epoch
/// mean insertion loss (an evaluation pass when no epochs are configured).
double calibrate_binary(ClonedModel& c, const LocalModelSet& surrogates, const LabeledDataset& anchors,
                        const InsertionConfig& config);

struct PositionRecord {
  std::size_t position = 0;
  FitResult fit;
  std::optional<AccuracyReport> accuracy;
  ClonedModel model;
};

struct PositionTrace {
  std::vector<PositionRecord> records;
  nlohmann::json to_json() const;
};

struct SearchResult {
  std::size_t position = 0;
  ClonedModel model;
  PositionTrace trace;
};

/// Held-out data for per-R accuracies in the trace.
struct EvalSet {
  const LabeledDataset* test = nullptr;
};

/// Score used to rank candidate positions. `total` is the final-epoch joint
/// loss; `insertion` is the final-epoch insertion loss of the binarized model.
enum class PositionCriterion { insertion, total };

double position_score(const FitResult& fit, PositionCriterion criterion);

/// Index of the record with the lowest score; ties go to the larger R.
std::size_t choose_position(const PositionTrace& trace, PositionCriterion criterion);

struct SearchConfig {
  InsertionConfig insertion;
  std::vector<std::size_t> positions;  // empty: L-1 down to 0
  bool parallel = false;               // independent positions, no warm start
  PositionCriterion select_by = PositionCriterion::insertion;
};

SearchResult search_position(std::shared_ptr<const NetworkModel> target,
                             std::shared_ptr<const NetworkModel> source, const LocalModelSet& surrogates,
                             const LabeledDataset& anchors, const MaskSet& masks,
                             const std::vector<int>& cloned_classes, const SearchConfig& config,
                             const EvalSet& eval = {});

struct CloneResult {
  ClonedModel model;
  PositionTrace trace;
  MaskTrainResult localization;
  AccuracyReport accuracy;
  LocalModelSet surrogates;
  nlohmann::json report;
};

InsertionConfig insertion_config(const RunConfig& config);

/// The sampled cloning data and the surrogates fitted on it.
struct CloneInputs {
  LabeledDataset anchors;
  LocalModelSet surrogates;
};

/// Stratified data-budget sample of the cloned classes' training items.
LabeledDataset clone_anchors(const Mnist& data, const RunConfig& config);

/// Fits the surrogate set of `source` on the cloned classes.
LocalModelSet clone_surrogates(const NetworkModel& source, const LabeledDataset& anchors, const RunConfig& config);

/// Raises ContractError unless `set` was fitted by `clone_surrogates` for
/// this source, these anchors and this config.
void check_surrogates(const LocalModelSet& set, const NetworkModel& source, const LabeledDataset& anchors,
                      const RunConfig& config);

/// subsample -> surrogates -> mask localization -> position search ->
/// binarize -> calibrate. A matching precomputed surrogate set skips the
/// fit. Stage failures are rethrown with the stage name.
CloneResult clone(const NetworkModel& target, const NetworkModel& source, const Mnist& data, const RunConfig& config,
                  const LocalModelSet* precomputed = nullptr);

/// Source output indices of dataset labels, via the source's class list.
std::vector<std::size_t> source_outputs(const NetworkModel& source, const std::vector<int>& classes);

}  // namespace pnc
