#include <doctest.h>

#include "pnc/errors.hpp"
#include "pnc/packet.hpp"
#include "support.hpp"

using namespace pnc;

namespace {

ClonedModel toy_graft(const testing::ToyClone& t, std::size_t r, std::uint64_t seed = 3) {
  return assemble(t.target, t.source, init_masks(*t.source, {2, 2, 3}), r, {3}, seed);
}

void randomize(ClonedModel& c, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& l : c.masks.logits) {
    for (auto& v : l.data()) v = rng.uniform(-2.0, 2.0);
  }
  for (auto& v : c.adapter.bias.data()) v = rng.uniform(-0.5, 0.5);
  const std::size_t width = c.head.branch_weight.dim(1);
  auto bw = c.head.branch_weight.data();
  for (std::size_t i = c.head.old_classes * width; i < bw.size(); ++i) bw[i] += rng.uniform(-0.3, 0.3);
}

std::vector<AnchorMask> some_pairs(const testing::ToyClone& t, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  return sample_pairs(rng, t.surrogates.models.size(), t.surrogates.masks.size(), n);
}

/// Toy stand-in for MNIST: 8x8 digits 0..5.
Mnist toy_mnist() {
  Mnist m;
  m.train = testing::toy_dataset({0, 1, 2, 3, 4, 5}, 8, 1);
  m.test = testing::toy_dataset({0, 1, 2, 3, 4, 5}, 5, 2);
  m.test.split = Split::test;
  return m;
}

RunConfig toy_config() {
  RunConfig c;
  c.target_classes = {0, 1, 2};
  c.source_classes = {3, 4, 5};
  c.cloned_classes = {3};
  c.target_arch = c.source_arch = "toy";
  c.data_fraction = 1.0;
  c.mask_count = 12;
  c.grid_rows = c.grid_cols = 2;
  c.mask_steps = 10;
  c.mask_batch = 4;
  c.epochs_per_step = 2;
  c.batch_size = 4;
  c.calibrate_epochs = 1;
  c.teacher_coverage = 0.0;
  return c;
}

}  // namespace

TEST_CASE("initial old-class logits equal the target's bit-exactly at every R") {
  const auto t = testing::toy_clone();
  Rng rng(1);
  const Tensor x = testing::random_tensor({4, 1, 8, 8}, rng, 0.0, 1.0);
  const Tensor want = forward(*t.target, x);
  for (std::size_t r = 0; r < 3; ++r) {
    ClonedModel c = toy_graft(t, r);
    randomize(c, 10 + r);
    for (MaskMode mode : {MaskMode::soft, MaskMode::binary}) {
      const ClonedOutputs out = cloned_forward_full(c, x, mode);
      CHECK(out.logits.dims() == Dims{4, 4});
      CHECK(bit_equal(out.target_logits, want));
      CHECK(bit_equal(narrow(out.logits, 0, 3), want));
    }
  }
}

TEST_CASE("extended head widths and row initialization") {
  const auto t = testing::toy_clone();
  const ClonedModel c = toy_graft(t, 1);
  CHECK(c.head.old_classes == 3);
  CHECK(c.head.new_classes == 1);
  CHECK(c.head.trunk_weight.dims() == Dims{4, 6});
  CHECK(c.head.branch_weight.dims() == Dims{4, 6});
  CHECK(c.class_order() == std::vector<int>{0, 1, 2, 3});
  CHECK(c.cloned_outputs == std::vector<std::size_t>{0});
  for (std::size_t j = 0; j < 6; ++j) {
    CHECK(c.head.branch_weight[3 * 6 + j] == t.source->head.weight[j]);
    CHECK(c.head.trunk_weight[3 * 6 + j] == 0.0);
    CHECK(c.head.branch_weight[j] == 0.0);
  }
  CHECK(c.head.bias[3] == t.source->head.bias[0]);

  const ClonedModel r = assemble(t.target, t.source, init_masks(*t.source, {2, 2, 3}), 1, {3}, 3, NewRowInit::random);
  double norm = 0.0;
  for (std::size_t j = 0; j < 6; ++j) norm += std::abs(r.head.branch_weight[3 * 6 + j]);
  CHECK(norm > 0.0);
  CHECK(norm < 0.2);
  CHECK(r.head.bias[3] == 0.0);
}

TEST_CASE("homogeneous adapters start as the identity") {
  const auto t = testing::toy_clone();
  for (std::size_t r = 0; r < 3; ++r) {
    const ClonedModel c = toy_graft(t, r);
    Rng rng(2);
    Dims d{3};
    const Dims& in = t.target->block_input_dims(r);
    d.insert(d.end(), in.begin(), in.end());
    const Tensor u = testing::random_tensor(d, rng, 0.0, 1.0);
    CHECK(bit_equal(c.adapter.apply(u), u));
  }
}

TEST_CASE("assemble rejects bad positions and overlapping classes") {
  const auto t = testing::toy_clone();
  const MaskSet m = init_masks(*t.source, {2, 2, 3});
  CHECK_THROWS_AS(assemble(t.target, t.source, m, 3, {3}, 1), ContractError);
  auto overlapping = std::make_shared<const NetworkModel>(testing::toy_net({3, 4, 5}, 9));
  CHECK_THROWS_AS(assemble(overlapping, t.source, m, 1, {3}, 1), ConfigError);
  CHECK_THROWS_AS(assemble(t.target, t.source, m, 1, {7}, 1), ConfigError);
}

TEST_CASE("ins_loss without the joint term is the two slice divergences") {
  const auto t = testing::toy_clone();
  ClonedModel c = toy_graft(t, 1);
  randomize(c, 4);
  const auto pairs = some_pairs(t, 6, 5);
  const Tensor x = pair_batch(t.surrogates, t.anchors, pairs);
  const ClonedOutputs out = cloned_forward_full(c, x, MaskMode::soft);
  double kl = 0.0;
  for (std::size_t n = 0; n < pairs.size(); ++n) {
    double zs = 0.0, zt = 0.0;
    for (std::size_t k = 0; k < 3; ++k) {
      zs += std::exp(out.logits[n * 4 + k]);
      zt += std::exp(out.target_logits[n * 3 + k]);
    }
    for (std::size_t k = 0; k < 3; ++k) {
      const double p = std::exp(out.target_logits[n * 3 + k]) / zt;
      const double q = std::exp(out.logits[n * 4 + k]) / zs;
      kl += p * std::log(p / q);
    }
  }
  kl /= static_cast<double>(pairs.size());
  CHECK(ins_loss(c, t.surrogates, t.anchors, pairs, 0.0).item() == doctest::Approx(kl).epsilon(1e-12));
}

TEST_CASE("joint term matches a hand-built teacher") {
  const auto t = testing::toy_clone();
  ClonedModel c = toy_graft(t, 0);
  randomize(c, 6);
  const auto pairs = some_pairs(t, 5, 7);
  const TeacherCalibration teacher{1.7, -0.4};
  const Tensor x = pair_batch(t.surrogates, t.anchors, pairs);
  const ClonedOutputs out = cloned_forward_full(c, x, MaskMode::soft);
  const Tensor g = predict_pairs(t.surrogates, pairs);
  Tensor joint(Dims{pairs.size(), 4});
  for (std::size_t n = 0; n < pairs.size(); ++n) {
    for (std::size_t k = 0; k < 3; ++k) joint.data()[n * 4 + k] = out.target_logits[n * 3 + k];
    joint.data()[n * 4 + 3] = 1.7 * g[n] - 0.4;
  }
  const double expect = ins_loss(c, t.surrogates, t.anchors, pairs, 0.0).item() +
                        0.6 * kl_divergence(out.logits, joint).item();
  CHECK(ins_loss(c, t.surrogates, t.anchors, pairs, 0.6, teacher).item() == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("ins_loss gradients match central differences") {
  const auto t = testing::toy_clone();
  for (std::size_t r = 0; r < 3; ++r) {
    ClonedModel c = toy_graft(t, r);
    randomize(c, 20 + r);
    const auto pairs = some_pairs(t, 6, 30 + r);
    auto loss = [&] { return ins_loss(c, t.surrogates, t.anchors, pairs, 1.0, TeacherCalibration{1.3, 0.5}); };
    CHECK(testing::fd_error(loss, c.trainable(true)) < 1e-6);
  }
}

TEST_CASE("ins_loss rejects surrogates of other classes") {
  const auto t = testing::toy_clone();
  const ClonedModel c = toy_graft(t, 1);
  LocalModelSet other = t.surrogates;
  other.classes = {1};
  const auto pairs = some_pairs(t, 2, 1);
  CHECK_THROWS_AS(ins_loss(c, other, t.anchors, pairs, 1.0), ContractError);
  CHECK_THROWS_AS(ins_loss(c, t.surrogates, t.anchors, {}, 1.0), ContractError);
}

TEST_CASE("fit_at_position trains only the graft and keeps old rows") {
  const auto t = testing::toy_clone();
  const std::string target_bytes = serialize_checkpoint(*t.target);
  const std::string source_bytes = serialize_checkpoint(*t.source);
  ClonedModel c = toy_graft(t, 1);
  const Tensor old_trunk = c.head.trunk_weight.clone(), old_bias = c.head.bias.clone();
  const Tensor adapter_before = c.adapter.weight.clone();
  InsertionConfig cfg;
  cfg.epochs = 4;
  cfg.batch_size = 3;
  const FitResult fit = fit_at_position(c, t.surrogates, t.anchors, cfg);
  CHECK(fit.epoch_losses.size() == 4);
  CHECK(fit.convergence == fit.epoch_losses.back());
  CHECK(serialize_checkpoint(*t.target) == target_bytes);
  CHECK(serialize_checkpoint(*t.source) == source_bytes);
  CHECK(!bit_equal(c.adapter.weight, adapter_before));
  for (std::size_t i = 0; i < 3 * 6; ++i) CHECK(c.head.trunk_weight[i] == old_trunk[i]);
  for (std::size_t i = 0; i < 3; ++i) CHECK(c.head.bias[i] == old_bias[i]);
  for (double v : c.masks.logits[0].data()) CHECK(v == 0.0);

  Rng rng(3);
  const Tensor x = testing::random_tensor({3, 1, 8, 8}, rng, 0.0, 1.0);
  c.binary = binarize_topk(c.masks);
  CHECK(bit_equal(narrow(cloned_forward(c, x, MaskMode::binary), 0, 3), forward(*t.target, x)));
}

TEST_CASE("fitting is deterministic") {
  const auto t = testing::toy_clone();
  InsertionConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 4;
  ClonedModel a = toy_graft(t, 2), b = toy_graft(t, 2);
  const FitResult fa = fit_at_position(a, t.surrogates, t.anchors, cfg);
  const FitResult fb = fit_at_position(b, t.surrogates, t.anchors, cfg);
  CHECK(fa.epoch_losses == fb.epoch_losses);
  CHECK(bit_equal(a.head.branch_weight, b.head.branch_weight));
}

TEST_CASE("calibrate_binary fixes the selection and reports an insertion loss") {
  const auto t = testing::toy_clone();
  ClonedModel c = toy_graft(t, 1);
  randomize(c, 8);
  InsertionConfig cfg;
  cfg.batch_size = 4;
  cfg.calibrate_epochs = 0;
  const Tensor head_before = c.head.branch_weight.clone();
  const double eval_only = calibrate_binary(c, t.surrogates, t.anchors, cfg);
  REQUIRE(c.binary.has_value());
  CHECK(*c.binary == binarize_topk(c.masks));
  CHECK(bit_equal(c.head.branch_weight, head_before));
  CHECK(eval_only > 0.0);
  cfg.calibrate_epochs = 2;
  calibrate_binary(c, t.surrogates, t.anchors, cfg);
  CHECK(!bit_equal(c.head.branch_weight, head_before));
}

TEST_CASE("position search walks R downwards and picks the lowest score") {
  const auto t = testing::toy_clone();
  SearchConfig cfg;
  cfg.insertion.epochs = 2;
  cfg.insertion.batch_size = 4;
  cfg.insertion.calibrate_epochs = 1;
  for (PositionCriterion crit : {PositionCriterion::insertion, PositionCriterion::total}) {
    cfg.select_by = crit;
    const SearchResult s = search_position(t.target, t.source, t.surrogates, t.anchors,
                                           init_masks(*t.source, {2, 2, 3}), {3}, cfg);
    REQUIRE(s.trace.records.size() == 3);
    CHECK(s.trace.records[0].position == 2);
    CHECK(s.trace.records[2].position == 0);
    double best = 1e300;
    std::size_t best_r = 0;
    for (const auto& rec : s.trace.records) {
      const double v = position_score(rec.fit, crit);
      if (v < best || (v == best && rec.position > best_r)) {
        best = v;
        best_r = rec.position;
      }
    }
    CHECK(s.position == best_r);
    CHECK(s.model.position == best_r);
    CHECK(s.model.binary.has_value());
    CHECK(s.trace.to_json().size() == 3);
  }
}

TEST_CASE("position choice takes the lowest score, ties to the larger R") {
  FitResult f;
  f.convergence = 1.0;
  f.calibration_loss = 0.5;
  CHECK(position_score(f, PositionCriterion::total) == 1.0);
  CHECK(position_score(f, PositionCriterion::insertion) == 0.5);

  auto record = [](std::size_t r, double total, double insertion) {
    PositionRecord rec;
    rec.position = r;
    rec.fit.convergence = total;
    rec.fit.calibration_loss = insertion;
    return rec;
  };
  PositionTrace trace;
  trace.records.push_back(record(2, 0.9, 0.40));
  trace.records.push_back(record(1, 1.5, 0.30));
  trace.records.push_back(record(0, 1.7, 0.30));
  CHECK(choose_position(trace, PositionCriterion::total) == 0);
  CHECK(choose_position(trace, PositionCriterion::insertion) == 1);
  trace.records[0].fit.calibration_loss = 0.30;
  CHECK(choose_position(trace, PositionCriterion::insertion) == 0);
  CHECK_THROWS_AS(choose_position(PositionTrace{}, PositionCriterion::total), ContractError);
}

TEST_CASE("teacher calibration hits the requested coverage") {
  const auto t = testing::toy_clone();
  CHECK(calibrate_teacher(*t.target, t.surrogates, t.anchors, 0.0, TeacherMode::scale).scale == 1.0);
  CHECK_THROWS_AS(calibrate_teacher(*t.target, t.surrogates, t.anchors, 1.2, TeacherMode::scale), ConfigError);

  PatchMask clean{std::vector<std::uint8_t>(4, 1)};
  std::vector<double> ratios, gaps;
  for (const auto& m : t.surrogates.models) {
    const Tensor logits = forward(*t.target, image_tensor(t.anchors.image(m.anchor), 8, 8));
    const double tmax = std::max({logits[0], logits[1], logits[2]});
    const double g = predict(m, clean)[0];
    ratios.push_back(g > 0.0 ? tmax / g : std::numeric_limits<double>::infinity());
    gaps.push_back(tmax - g);
  }
  const TeacherCalibration shift = calibrate_teacher(*t.target, t.surrogates, t.anchors, 0.5, TeacherMode::shift);
  CHECK(shift.scale == 1.0);
  CHECK(shift.shift == quantile(gaps, 0.5));
  std::size_t covered = 0;
  for (double gap : gaps) covered += gap <= shift.shift;
  CHECK(covered >= gaps.size() / 2);

  const bool finite = std::isfinite(quantile(ratios, 0.5)) && quantile(ratios, 0.5) > 0.0;
  if (finite) {
    const TeacherCalibration sc = calibrate_teacher(*t.target, t.surrogates, t.anchors, 0.5, TeacherMode::scale);
    CHECK(sc.scale == quantile(ratios, 0.5));
    CHECK(sc.shift == 0.0);
  } else {
    CHECK_THROWS_AS(calibrate_teacher(*t.target, t.surrogates, t.anchors, 0.5, TeacherMode::scale), NumericError);
  }
}

TEST_CASE("source outputs map labels through the source class list") {
  const NetworkModel src = testing::toy_net({5, 7, 9}, 1);
  CHECK(source_outputs(src, {9, 5}) == std::vector<std::size_t>{2, 0});
  CHECK_THROWS_AS(source_outputs(src, {6}), ConfigError);
  const NetworkModel bare = build_toy(4, 1);
  CHECK(source_outputs(bare, {3}) == std::vector<std::size_t>{3});
  CHECK_THROWS_AS(source_outputs(bare, {4}), ConfigError);
}

TEST_CASE("end-to-end clone on a toy digit set") {
  const Mnist data = toy_mnist();
  const NetworkModel target = testing::toy_net({0, 1, 2}, 4);
  const NetworkModel source = testing::toy_net({3, 4, 5}, 5);
  const std::string target_bytes = serialize_checkpoint(target);
  const RunConfig cfg = toy_config();

  const CloneResult r = clone(target, source, data, cfg);
  CHECK(r.model.position < 3);
  CHECK(r.trace.records.size() == 3);
  CHECK(r.surrogates.models.size() == 8);
  CHECK(r.report["chosen_position"] == r.model.position);
  CHECK(r.report.contains("config"));
  CHECK(r.report["packet_bytes"].get<std::size_t>() == serialize_packet(r.model).size());
  CHECK(serialize_checkpoint(target) == target_bytes);
  CHECK(r.accuracy.ori_count == 15);
  CHECK(r.accuracy.tar_count == 5);

  SUBCASE("precomputed surrogates give the same run") {
    const LabeledDataset anchors = clone_anchors(data, cfg);
    const LocalModelSet pre = clone_surrogates(source, anchors, cfg);
    const CloneResult again = clone(target, source, data, cfg, &pre);
    CHECK(again.report.dump() == r.report.dump());
  }
  SUBCASE("mismatched surrogates are refused") {
    const LabeledDataset anchors = clone_anchors(data, cfg);
    LocalModelSet pre = clone_surrogates(source, anchors, cfg);
    pre.seed += 1;
    CHECK_THROWS_AS(clone(target, source, data, cfg, &pre), ContractError);
    LocalModelSet other = clone_surrogates(testing::toy_net({3, 4, 5}, 6), anchors, cfg);
    CHECK_THROWS_AS(clone(target, source, data, cfg, &other), ContractError);
  }
  SUBCASE("errors carry the failing stage") {
    RunConfig bad = cfg;
    bad.cloned_classes = {1};
    try {
      clone(target, source, data, bad);
      FAIL("expected an error");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("clone/data") != std::string::npos);
    }
  }
}
