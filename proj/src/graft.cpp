#include "pnc/graft.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <limits>
#include <numeric>

#include <spdlog/spdlog.h>

#include "pnc/errors.hpp"
#include "pnc/optim.hpp"
#include "pnc/packet.hpp"

namespace pnc {

namespace {

Dims per_sample(const Tensor& t) { return Dims(t.dims().begin() + 1, t.dims().end()); }

// Identity when out == in, else Kaiming-uniform over fan-in `in`.
void init_map(Tensor& w, std::size_t out, std::size_t in, Rng& rng) {
  auto d = w.data();
  if (out == in) {
    for (std::size_t i = 0; i < out; ++i) d[i * in + i] = 1.0;
    return;
  }
  const double bound = std::sqrt(6.0 / static_cast<double>(in));
  for (auto& v : d) v = rng.uniform(-bound, bound);
}

std::string position_stream(const char* name, std::size_t r) { return std::string(name) + "/R" + std::to_string(r); }

}  // namespace

Tensor Adapter::apply(const Tensor& trunk) const {
  if (per_sample(trunk) != in_dims) {
    throw ShapeError("adapter: expects trunk features " + dims_str(in_dims) + ", got " + dims_str(per_sample(trunk)));
  }
  if (kind == LayerKind::conv) {
    Tensor y = relu(add_bias(conv2d(trunk, weight, 0), bias));
    if (pool) y = adaptive_avg_pool2d(y, out_dims[1], out_dims[2]);
    return y;
  }
  Dims shape{trunk.dim(0)};
  shape.insert(shape.end(), out_dims.begin(), out_dims.end());
  return relu(add_bias(matmul(flatten(trunk), transpose(weight)), bias)).reshape(shape);
}

NamedTensors Adapter::named_parameters() const { return {{"adapter.weight", weight}, {"adapter.bias", bias}}; }

Adapter make_adapter(const Dims& trunk_dims, const Dims& branch_dims, Rng& rng) {
  Adapter a;
  a.in_dims = trunk_dims;
  a.out_dims = branch_dims;
  if (trunk_dims.size() == 3 && branch_dims.size() == 3) {
    if (branch_dims[1] > trunk_dims[1] || branch_dims[2] > trunk_dims[2]) {
      throw ShapeError("adapter: cannot reduce trunk " + dims_str(trunk_dims) + " to branch input " +
                       dims_str(branch_dims));
    }
    a.kind = LayerKind::conv;
    a.pool = branch_dims[1] != trunk_dims[1] || branch_dims[2] != trunk_dims[2];
    a.weight = Tensor(Dims{branch_dims[0], trunk_dims[0], 1, 1});
    init_map(a.weight, branch_dims[0], trunk_dims[0], rng);
    a.bias = Tensor(Dims{branch_dims[0]}, 0.0);
  } else {
    a.kind = LayerKind::dense;
    const std::size_t in = product(trunk_dims), out = product(branch_dims);
    a.weight = Tensor(Dims{out, in});
    init_map(a.weight, out, in, rng);
    a.bias = Tensor(Dims{out}, 0.0);
  }
  a.weight.set_requires_grad(true);
  a.bias.set_requires_grad(true);
  return a;
}

Tensor ExtendedHead::apply(const Tensor& trunk, const Tensor& branch) const {
  const Tensor t = flatten(trunk), b = flatten(branch);
  if (t.dim(1) != trunk_weight.dim(1) || b.dim(1) != branch_weight.dim(1) || t.dim(0) != b.dim(0)) {
    throw ShapeError("extended head: features " + dims_str(t.dims()) + " + " + dims_str(b.dims()) +
                     " for weights " + dims_str(trunk_weight.dims()) + " + " + dims_str(branch_weight.dims()));
  }
  return add_bias(add(matmul(t, transpose(trunk_weight)), matmul(b, transpose(branch_weight))), bias);
}

NamedTensors ExtendedHead::named_parameters() const {
  return {{"head.trunk_weight", trunk_weight}, {"head.branch_weight", branch_weight}, {"head.bias", bias}};
}

ExtendedHead make_extended_head(const Layer& target_head, const Layer& source_head,
                                const std::vector<std::size_t>& cloned_outputs, NewRowInit init, Rng& rng) {
  if (cloned_outputs.empty()) throw ContractError("extended head: no new classes");
  ExtendedHead h;
  h.old_classes = target_head.weight.dim(0);
  h.new_classes = cloned_outputs.size();
  const std::size_t rows = h.old_classes + h.new_classes;
  const std::size_t trunk_width = target_head.weight.dim(1);
  const std::size_t branch_width = source_head.weight.dim(1);
  h.trunk_weight = Tensor(Dims{rows, trunk_width}, 0.0);
  h.branch_weight = Tensor(Dims{rows, branch_width}, 0.0);
  h.bias = Tensor(Dims{rows}, 0.0);
  const auto tw = target_head.weight.data();
  std::copy(tw.begin(), tw.end(), h.trunk_weight.data().begin());
  const auto tb = target_head.bias.data();
  std::copy(tb.begin(), tb.end(), h.bias.data().begin());
  auto bw = h.branch_weight.data();
  for (std::size_t k = 0; k < h.new_classes; ++k) {
    const std::size_t row = h.old_classes + k;
    if (init == NewRowInit::source) {
      const std::size_t src = cloned_outputs[k];
      if (src >= source_head.weight.dim(0)) throw ContractError("extended head: cloned output out of range");
      for (std::size_t j = 0; j < branch_width; ++j) bw[row * branch_width + j] = source_head.weight[src * branch_width + j];
      h.bias.data()[row] = source_head.bias[src];
    } else {
      for (std::size_t j = 0; j < branch_width; ++j) bw[row * branch_width + j] = 1e-2 * rng.normal();
    }
  }
  for (Tensor* t : {&h.trunk_weight, &h.branch_weight, &h.bias}) t->set_requires_grad(true);
  return h;
}

std::vector<int> ClonedModel::class_order() const {
  std::vector<int> order = original_classes;
  order.insert(order.end(), cloned_classes.begin(), cloned_classes.end());
  return order;
}

std::vector<Tensor> ClonedModel::trainable(bool include_masks) const {
  std::vector<Tensor> out;
  if (include_masks) out = masks.parameters(position);
  for (auto& t : adapter.parameters()) out.push_back(t);
  for (auto& t : head.parameters()) out.push_back(t);
  return out;
}

ClonedModel ClonedModel::clone() const {
  ClonedModel c = *this;
  c.masks = masks.clone();
  c.adapter.weight = adapter.weight.clone();
  c.adapter.bias = adapter.bias.clone();
  c.head.trunk_weight = head.trunk_weight.clone();
  c.head.branch_weight = head.branch_weight.clone();
  c.head.bias = head.bias.clone();
  return c;
}

std::vector<std::size_t> source_outputs(const NetworkModel& source, const std::vector<int>& classes) {
  std::vector<std::size_t> out;
  for (int label : classes) {
    if (source.meta.classes.empty()) {
      if (label < 0 || static_cast<std::size_t>(label) >= source.num_classes) {
        throw ConfigError("class " + std::to_string(label) + " is not an output of the source network");
      }
      out.push_back(static_cast<std::size_t>(label));
      continue;
    }
    const auto it = std::find(source.meta.classes.begin(), source.meta.classes.end(), label);
    if (it == source.meta.classes.end()) {
      throw ConfigError("class " + std::to_string(label) + " is not among the source's classes");
    }
    out.push_back(static_cast<std::size_t>(it - source.meta.classes.begin()));
  }
  return out;
}

ClonedModel assemble(std::shared_ptr<const NetworkModel> target, std::shared_ptr<const NetworkModel> source,
                     const MaskSet& masks, std::size_t position, const std::vector<int>& cloned_classes,
                     std::uint64_t seed, NewRowInit init) {
  if (target->depth() != source->depth()) {
    throw ContractError("graft: target has " + std::to_string(target->depth()) + " blocks, source " +
                        std::to_string(source->depth()));
  }
  if (position >= target->depth()) {
    throw ContractError("graft: R=" + std::to_string(position) + " outside [0," +
                        std::to_string(target->depth() - 1) + "]");
  }
  if (masks.widths() != source->maskable_widths()) throw ContractError("graft: masks do not match the source");
  ClonedModel c;
  c.target = std::move(target);
  c.source = std::move(source);
  c.masks = masks.clone();
  c.masks.active_from = position;
  c.position = position;
  c.original_classes = c.target->meta.classes;
  if (c.original_classes.empty()) {
    c.original_classes.resize(c.target->num_classes);
    std::iota(c.original_classes.begin(), c.original_classes.end(), 0);
  }
  for (int label : cloned_classes) {
    if (std::find(c.original_classes.begin(), c.original_classes.end(), label) != c.original_classes.end()) {
      throw ConfigError("class " + std::to_string(label) + " is already known to the target");
    }
  }
  c.cloned_classes = cloned_classes;
  c.cloned_outputs = source_outputs(*c.source, cloned_classes);
  Rng rng(seed, position_stream("graft/init", position));
  c.adapter = make_adapter(c.target->block_input_dims(position), c.source->block_input_dims(position), rng);
  c.head = make_extended_head(c.target->head, c.source->head, c.cloned_outputs, init, rng);
  return c;
}

ClonedOutputs cloned_forward_full(const ClonedModel& c, const Tensor& x, MaskMode mode) {
  const NetworkModel& t = *c.target;
  const NetworkModel& s = *c.source;
  const Tensor u = forward_prefix(t, x, c.position);
  const Tensor trunk = forward_suffix(t, u, c.position);
  BlockMasks masks;
  if (mode == MaskMode::soft) {
    masks = c.masks.soft();
  } else {
    masks = c.binary ? c.binary->tensors() : binarize_topk(c.masks).tensors();
  }
  const Tensor branch = forward_suffix(s, c.adapter.apply(u), c.position, &masks);
  return {c.head.apply(trunk, branch), apply_head(t.head, trunk)};
}

Tensor cloned_forward(const ClonedModel& c, const Tensor& x, MaskMode mode) {
  return cloned_forward_full(c, x, mode).logits;
}

LogitFn cloned_logit_fn(const ClonedModel& c, MaskMode mode) {
  return [&c, mode](const Tensor& x) { return cloned_forward(c, x, mode); };
}

Tensor ins_loss(const ClonedModel& c, const LocalModelSet& surrogates, const LabeledDataset& anchors,
                std::span<const AnchorMask> pairs, double joint_weight, const TeacherCalibration& teacher, MaskMode mode) {
  if (surrogates.classes != c.cloned_outputs) {
    throw ContractError("ins_loss: surrogate outputs do not match the cloned class map");
  }
  if (pairs.empty()) throw ContractError("ins_loss: empty minibatch");
  const Tensor x = pair_batch(surrogates, anchors, pairs);
  const ClonedOutputs out = cloned_forward_full(c, x, mode);
  const Tensor g = predict_pairs(surrogates, pairs);
  const Tensor old_slice = narrow(out.logits, 0, c.head.old_classes);
  const Tensor new_slice = narrow(out.logits, c.head.old_classes, c.head.new_classes);
  Tensor loss = add(kl_divergence(old_slice, out.target_logits), kl_divergence(new_slice, g));
  if (joint_weight > 0.0) {
    const Tensor joint = concat({out.target_logits, add_scalar(scale(g, teacher.scale), teacher.shift)});
    loss = add(loss, scale(kl_divergence(out.logits, joint), joint_weight));
  }
  return loss;
}

TeacherCalibration calibrate_teacher(const NetworkModel& target, const LocalModelSet& surrogates,
                                     const LabeledDataset& anchors, double coverage, TeacherMode mode) {
  if (!(coverage >= 0.0 && coverage <= 1.0)) throw ConfigError("teacher coverage must lie in [0,1]");
  if (coverage == 0.0) return {};
  if (surrogates.models.empty()) throw ContractError("calibrate_teacher: empty surrogate set");
  PatchMask clean;
  clean.bits.assign(surrogates.patch_count(), 1);
  NoGradGuard guard;
  std::vector<double> margins;
  for (const auto& m : surrogates.models) {
    const Tensor t = forward(target, image_tensor(anchors.image(m.anchor), anchors.height, anchors.width));
    const Tensor g = predict(m, clean);
    const double tmax = *std::max_element(t.data().begin(), t.data().end());
    const double gmax = *std::max_element(g.data().begin(), g.data().end());
    if (mode == TeacherMode::shift) {
      margins.push_back(tmax - gmax);
    } else {
      // No scale lifts a nonpositive surrogate logit above the target's.
      margins.push_back(gmax > 0.0 ? tmax / gmax : std::numeric_limits<double>::infinity());
    }
  }
  std::sort(margins.begin(), margins.end());
  const auto n = static_cast<double>(margins.size());
  const auto idx = static_cast<std::size_t>(std::max(0.0, std::ceil(coverage * n) - 1.0));
  const double q = margins[std::min(idx, margins.size() - 1)];
  if (!std::isfinite(q) || (mode == TeacherMode::scale && q <= 0.0)) {
    throw NumericError("calibrate_teacher: coverage " + std::to_string(coverage) +
                       " admits no usable teacher calibration");
  }
  TeacherCalibration cal;
  if (mode == TeacherMode::shift) {
    cal.shift = q;
  } else {
    cal.scale = q;
  }
  return cal;
}

namespace {

std::vector<AnchorMask> epoch_pairs(Rng& rng, std::size_t models, std::size_t masks) {
  std::vector<std::size_t> order(models);
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  std::vector<AnchorMask> pairs;
  pairs.reserve(models);
  for (auto m : order) pairs.emplace_back(m, rng.below(masks));
  return pairs;
}

// Zeroes the gradient of the head's old-class rows so they keep the target's values.
void freeze_old_rows(ExtendedHead& head) {
  for (Tensor* t : {&head.trunk_weight, &head.branch_weight, &head.bias}) {
    if (!t->has_grad()) continue;
    const std::size_t width = t->size() / head.out_width();
    auto g = t->mutable_grad();
    std::fill(g.begin(), g.begin() + static_cast<std::ptrdiff_t>(head.old_classes * width), 0.0);
  }
}

template <typename LossFn>
double run_epoch(const std::vector<AnchorMask>& pairs, std::size_t batch_size, LossFn&& loss_fn,
                 std::vector<Tensor>* params, SgdState* sgd, const std::string& what,
                 ExtendedHead* frozen_rows = nullptr) {
  double total = 0.0;
  for (std::size_t start = 0; start < pairs.size(); start += batch_size) {
    const std::size_t end = std::min(pairs.size(), start + batch_size);
    const std::span<const AnchorMask> batch(pairs.data() + start, end - start);
    Tensor loss = loss_fn(batch);
    if (!std::isfinite(loss.item())) throw NumericError(what + ": non-finite loss");
    total += loss.item() * static_cast<double>(batch.size());
    if (params) {
      loss.backward();
      if (frozen_rows) freeze_old_rows(*frozen_rows);
      sgd_step(*params, *sgd);
    }
  }
  return total / static_cast<double>(pairs.size());
}

}  // namespace

FitResult fit_at_position(ClonedModel& c, const LocalModelSet& surrogates, const LabeledDataset& anchors,
                          const InsertionConfig& config) {
  if (c.position >= c.source->depth()) throw ContractError("fit_at_position: R out of range");
  c.binary.reset();
  c.masks.active_from = c.position;
  const std::string what = "fit_at_position(R=" + std::to_string(c.position) + ")";
  auto loss_fn = [&](std::span<const AnchorMask> batch) {
    return add(loc_loss(*c.source, c.masks, surrogates, anchors, batch, config.beta),
               ins_loss(c, surrogates, anchors, batch, config.joint_weight, config.teacher, MaskMode::soft));
  };

  FitResult result;
  Rng rng(config.seed, position_stream("graft/train", c.position));
  std::vector<Tensor> params = c.trainable(true);
  SgdState sgd{config.learning_rate, config.momentum, {}};
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto pairs = epoch_pairs(rng, surrogates.models.size(), surrogates.masks.size());
    if (epoch == 0) {
      NoGradGuard guard;
      result.initial_loss = run_epoch(pairs, config.batch_size, loss_fn, nullptr, nullptr, what);
    }
    result.epoch_losses.push_back(run_epoch(pairs, config.batch_size, loss_fn, &params, &sgd, what,
                                            config.freeze_old_rows ? &c.head : nullptr));
    spdlog::debug("{} epoch {} loss {:.5f}", what, epoch + 1, result.epoch_losses.back());
  }
  result.convergence = result.epoch_losses.empty() ? result.initial_loss : result.epoch_losses.back();
  spdlog::info("{}: loss {:.5f} -> {:.5f}", what, result.initial_loss, result.convergence);
  return result;
}

double calibrate_binary(ClonedModel& c, const LocalModelSet& surrogates, const LabeledDataset& anchors,
                        const InsertionConfig& config) {
  c.binary = binarize_topk(c.masks);
  const std::string what = "calibrate(R=" + std::to_string(c.position) + ")";
  auto loss_fn = [&](std::span<const AnchorMask> batch) {
    return ins_loss(c, surrogates, anchors, batch, config.joint_weight, config.teacher, MaskMode::binary);
  };
  Rng rng(config.seed, position_stream("graft/calibrate", c.position));
  std::vector<Tensor> params = c.trainable(false);
  SgdState sgd{config.learning_rate, config.momentum, {}};
  if (config.calibrate_epochs == 0) {
    NoGradGuard guard;
    return run_epoch(epoch_pairs(rng, surrogates.models.size(), surrogates.masks.size()), config.batch_size, loss_fn,
                     nullptr, nullptr, what);
  }
  double last = 0.0;
  for (std::size_t epoch = 0; epoch < config.calibrate_epochs; ++epoch) {
    last = run_epoch(epoch_pairs(rng, surrogates.models.size(), surrogates.masks.size()), config.batch_size,
                     loss_fn, &params, &sgd, what, config.freeze_old_rows ? &c.head : nullptr);
  }
  return last;
}

double position_score(const FitResult& fit, PositionCriterion criterion) {
  return criterion == PositionCriterion::total ? fit.convergence : fit.calibration_loss;
}

std::size_t choose_position(const PositionTrace& trace, PositionCriterion criterion) {
  if (trace.records.empty()) throw ContractError("choose_position: empty trace");
  std::size_t best = 0;
  for (std::size_t i = 1; i < trace.records.size(); ++i) {
    const auto& rec = trace.records[i];
    const double score = position_score(rec.fit, criterion);
    const double best_score = position_score(trace.records[best].fit, criterion);
    if (score < best_score || (score == best_score && rec.position > trace.records[best].position)) best = i;
  }
  return best;
}

nlohmann::json PositionTrace::to_json() const {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : records) {
    nlohmann::json e{{"position", r.position},
                     {"initial_loss", r.fit.initial_loss},
                     {"convergence", r.fit.convergence},
                     {"epoch_losses", r.fit.epoch_losses},
                     {"calibration_loss", r.fit.calibration_loss}};
    if (r.accuracy) e["accuracy"] = r.accuracy->to_json();
    j.push_back(std::move(e));
  }
  return j;
}

SearchResult search_position(std::shared_ptr<const NetworkModel> target,
                             std::shared_ptr<const NetworkModel> source, const LocalModelSet& surrogates,
                             const LabeledDataset& anchors, const MaskSet& masks,
                             const std::vector<int>& cloned_classes, const SearchConfig& config,
                             const EvalSet& eval) {
  std::vector<std::size_t> positions = config.positions;
  if (positions.empty()) {
    for (std::size_t r = target->depth(); r-- > 0;) positions.push_back(r);
  }

  auto run_one = [&](std::size_t r, const MaskSet& start) {
    PositionRecord rec;
    rec.position = r;
    rec.model = assemble(target, source, start, r, cloned_classes, config.insertion.seed, config.insertion.new_rows);
    rec.fit = fit_at_position(rec.model, surrogates, anchors, config.insertion);
    rec.fit.calibration_loss = calibrate_binary(rec.model, surrogates, anchors, config.insertion);
    if (eval.test) {
      rec.accuracy = accuracy_report(cloned_logit_fn(rec.model), *eval.test, rec.model.original_classes,
                                     rec.model.cloned_classes, rec.model.class_order());
      spdlog::info("R={} ori {:.4f} tar {:.4f} avg {:.4f}", r, rec.accuracy->ori_acc, rec.accuracy->tar_acc,
                   rec.accuracy->avg_acc);
    }
    return rec;
  };

  SearchResult result;
  if (config.parallel) {
    std::vector<std::future<PositionRecord>> jobs;
    for (auto r : positions) jobs.push_back(std::async(std::launch::async, run_one, r, std::cref(masks)));
    for (auto& j : jobs) result.trace.records.push_back(j.get());
  } else {
    MaskSet current = masks.clone();
    for (auto r : positions) {
      result.trace.records.push_back(run_one(r, current));
      current = result.trace.records.back().model.masks.clone();
    }
  }
  if (result.trace.records.empty()) throw ContractError("search_position: no candidate positions");

  const PositionRecord& best = result.trace.records[choose_position(result.trace, config.select_by)];
  result.position = best.position;
  result.model = best.model.clone();
  return result;
}

InsertionConfig insertion_config(const RunConfig& config) {
  InsertionConfig ic;
  ic.epochs = config.epochs_per_step;
  ic.batch_size = config.batch_size;
  ic.learning_rate = config.learning_rate;
  ic.momentum = config.momentum;
  ic.beta = config.budget_penalty;
  ic.joint_weight = config.joint_kd_weight;
  ic.calibrate_epochs = config.calibrate_epochs;
  ic.freeze_old_rows = config.freeze_old_rows;
  if (config.new_row_init != "source" && config.new_row_init != "random") {
    throw ConfigError("new_row_init must be 'source' or 'random'");
  }
  ic.new_rows = config.new_row_init == "source" ? NewRowInit::source : NewRowInit::random;
  ic.seed = derive_seed(config.seed, "graft");
  return ic;
}

LabeledDataset clone_anchors(const Mnist& data, const RunConfig& config) {
  return subsample(class_split(data.train, config.cloned_classes, false), config.data_fraction,
                   derive_seed(config.seed, "data"));
}

LocalModelSet clone_surrogates(const NetworkModel& source, const LabeledDataset& anchors, const RunConfig& config) {
  const std::uint64_t seed = derive_seed(config.seed, "surrogates");
  const PatchGrid grid(config.grid_rows, config.grid_cols, anchors.height, anchors.width);
  const LogitFn source_fn = [&](const Tensor& x) { return forward(source, x); };
  LocalModelSet set = fit_set(source_fn, anchors, gen_masks(grid.patch_count(), config.mask_count, seed), grid,
                              source_outputs(source, config.cloned_classes), config.ridge_lambda,
                              config.locality_sigma);
  set.arch_id = source.arch_id;
  set.seed = seed;
  set.source_digest = checkpoint_digest(source);
  return set;
}

void check_surrogates(const LocalModelSet& set, const NetworkModel& source, const LabeledDataset& anchors,
                      const RunConfig& config) {
  auto fail = [](const std::string& what) { throw ContractError("precomputed surrogates: " + what); };
  if (set.source_digest != checkpoint_digest(source)) fail("fitted on a different source checkpoint");
  if (set.classes != source_outputs(source, config.cloned_classes)) fail("output classes differ");
  if (set.models.size() != anchors.size()) fail("anchor count differs from the data budget sample");
  if (set.seed != derive_seed(config.seed, "surrogates")) fail("fitted under a different seed");
  if (set.grid.rows() != config.grid_rows || set.grid.cols() != config.grid_cols) fail("patch grid differs");
  if (set.masks.size() != config.mask_count) fail("mask count differs");
  if (set.lambda != config.ridge_lambda || set.sigma != config.locality_sigma) fail("ridge or locality differs");
}

CloneResult clone(const NetworkModel& target_net, const NetworkModel& source_net, const Mnist& data,
                  const RunConfig& config, const LocalModelSet* precomputed) {
  validate_config(config);
  auto target = std::make_shared<const NetworkModel>(frozen_copy(target_net));
  auto source = std::make_shared<const NetworkModel>(frozen_copy(source_net));
  const std::uint64_t data_seed = derive_seed(config.seed, "data");
  const std::uint64_t surrogate_seed = derive_seed(config.seed, "surrogates");
  const std::uint64_t mask_seed = derive_seed(config.seed, "masks");
  const InsertionConfig ic = insertion_config(config);

  CloneResult out;
  LabeledDataset anchors;
  std::vector<std::size_t> outputs;
  std::string stage = "data";
  try {
    outputs = source_outputs(*source, config.cloned_classes);
    for (int label : config.cloned_classes) {
      if (std::find(target->meta.classes.begin(), target->meta.classes.end(), label) != target->meta.classes.end()) {
        throw ConfigError("cloned class " + std::to_string(label) + " is already a target class");
      }
    }
    anchors = clone_anchors(data, config);
    spdlog::info("clone: {} anchors from classes {}", anchors.size(), class_list_str(config.cloned_classes));

    stage = "surrogates";
    if (precomputed) {
      check_surrogates(*precomputed, *source, anchors, config);
      out.surrogates = *precomputed;
    } else {
      out.surrogates = clone_surrogates(*source, anchors, config);
    }

    stage = "localize";
    const auto budgets = config.budgets.empty() ? budgets_for_rate(*source, config.budget_rate) : config.budgets;
    MaskTrainConfig mc;
    mc.steps = config.mask_steps;
    mc.batch_size = config.mask_batch;
    mc.learning_rate = config.mask_lr;
    mc.momentum = config.momentum;
    mc.beta = config.budget_penalty;
    mc.seed = mask_seed;
    out.localization = train_masks(*source, out.surrogates, anchors, init_masks(*source, budgets), mc);

    stage = "search";
    SearchConfig sc;
    sc.insertion = ic;
    sc.insertion.teacher = calibrate_teacher(*target, out.surrogates, anchors, config.teacher_coverage,
                                             config.teacher_mode == "shift" ? TeacherMode::shift : TeacherMode::scale);
    spdlog::info("clone: joint teacher scale {:.4f} shift {:.4f}", sc.insertion.teacher.scale,
                 sc.insertion.teacher.shift);
    sc.parallel = config.parallel_sweep;
    sc.select_by = config.select_by == "total" ? PositionCriterion::total : PositionCriterion::insertion;
    if (config.fixed_position >= 0) sc.positions = {static_cast<std::size_t>(config.fixed_position)};
    const LabeledDataset test =
        class_split(data.test, [&] {
          std::vector<int> all = target->meta.classes;
          all.insert(all.end(), config.cloned_classes.begin(), config.cloned_classes.end());
          return all;
        }(), false);
    SearchResult sr = search_position(target, source, out.surrogates, anchors, out.localization.masks,
                                      config.cloned_classes, sc, EvalSet{&test});
    out.model = std::move(sr.model);
    out.model.meta.config_digest = config_digest(config);
    out.model.meta.seed = config.seed;
    out.trace = std::move(sr.trace);

    stage = "evaluate";
    for (const auto& rec : out.trace.records) {
      if (rec.position == out.model.position && rec.accuracy) out.accuracy = *rec.accuracy;
    }

    stage = "pack";
    const std::size_t packet_bytes = serialize_packet(out.model).size();
    const std::size_t source_bytes = serialize_checkpoint(*source).size();

    nlohmann::json& r = out.report;
    r["config"] = to_json(config);
    r["target"] = {{"architecture", target->arch_id},
                   {"classes", target->meta.classes},
                   {"test_accuracy", target->meta.test_accuracy}};
    r["source"] = {{"architecture", source->arch_id}, {"classes", source->meta.classes}};
    r["cloned_classes"] = config.cloned_classes;
    r["data_budget"] = config.data_fraction;
    r["anchors"] = anchors.size();
    r["budgets"] = budgets;
    r["teacher"] = sc.insertion.teacher.to_json();
    r["localization"] = {{"initial_loss", out.localization.initial_loss},
                         {"final_loss", out.localization.final_loss},
                         {"steps", config.mask_steps}};
    r["trace"] = out.trace.to_json();
    r["chosen_position"] = out.model.position;
    r["accuracy"] = out.accuracy.to_json();
    r["selected_filters"] = out.model.binary->selected;
    r["packet_bytes"] = packet_bytes;
    r["source_checkpoint_bytes"] = source_bytes;
    r["seeds"] = {{"root", config.seed},
                  {"data", data_seed},
                  {"surrogates", surrogate_seed},
                  {"masks", mask_seed},
                  {"graft", ic.seed}};
  } catch (const Error& e) {
    rethrow_in_stage(e, "clone/" + stage);
  }
  return out;
}

}  // namespace pnc
