#include <doctest.h>

#include <numeric>

#include "pnc/errors.hpp"
#include "support.hpp"

using namespace pnc;

namespace {

MaskSet random_masks(const NetworkModel& net, double rate, std::uint64_t seed) {
  MaskSet m = init_masks(net, budgets_for_rate(net, rate));
  Rng rng(seed);
  for (auto& l : m.logits) {
    for (auto& v : l.data()) v = rng.uniform(-2.0, 2.0);
  }
  return m;
}

std::size_t count_ones(const std::vector<double>& v) {
  return static_cast<std::size_t>(std::count(v.begin(), v.end(), 1.0));
}

}  // namespace

TEST_CASE("budgets are ceil(rate * width) clamped to [1, width]") {
  const NetworkModel net = build_lenet(5, 1);
  CHECK(budgets_for_rate(net, 0.5) == std::vector<std::size_t>{3, 8, 42});
  CHECK(budgets_for_rate(net, 0.25) == std::vector<std::size_t>{2, 4, 21});
  CHECK(budgets_for_rate(net, 1.0) == net.maskable_widths());
  CHECK(budgets_for_rate(net, 0.01) == std::vector<std::size_t>{1, 1, 1});
  CHECK_THROWS_AS(budgets_for_rate(net, 0.0), ConfigError);
  CHECK_THROWS_AS(budgets_for_rate(net, 1.01), ConfigError);
  CHECK_THROWS_AS(init_masks(net, {3, 17, 42}), ContractError);
  CHECK_THROWS_AS(init_masks(net, {3, 8}), ContractError);
}

TEST_CASE("binarize_topk examples") {
  CHECK(binarize_topk(std::vector<double>{0.9, 0.1, 0.8, 0.3}, 2) == std::vector<double>{1, 0, 1, 0});
  CHECK(binarize_topk(std::vector<double>{0.5, 0.5, 0.5}, 2) == std::vector<double>{1, 1, 0});
  CHECK(binarize_topk(std::vector<double>{0.2, 0.7, 0.7, 0.1}, 1) == std::vector<double>{0, 1, 0, 0});
  CHECK(binarize_topk(std::vector<double>{0.2, 0.7}, 0) == std::vector<double>{0, 0});
  CHECK_THROWS_AS(binarize_topk(std::vector<double>{0.2, 0.7}, 3), ContractError);
}

TEST_CASE("binarize_topk: exact count, idempotent, permutation-equivariant") {
  Rng rng(2);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 1 + rng.below(40), c = rng.below(n + 1);
    std::vector<double> v(n);
    for (auto& x : v) x = static_cast<double>(rng.below(6)) / 5.0;  // many ties
    const auto bits = binarize_topk(v, c);
    REQUIRE(count_ones(bits) == c);
    CHECK(binarize_topk(bits, c) == bits);
    CHECK(binarize_topk(v, c) == bits);
    // every kept value is >= every dropped one
    double kept_min = 2.0, dropped_max = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (bits[i] == 1.0) {
        kept_min = std::min(kept_min, v[i]);
      } else {
        dropped_max = std::max(dropped_max, v[i]);
      }
    }
    CHECK(kept_min >= dropped_max);
    // ties resolve to lower indices
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        if (v[i] == v[j] && bits[j] == 1.0) CHECK(bits[i] == 1.0);
      }
    }
    std::vector<double> distinct(n);
    for (auto& x : distinct) x = rng.uniform();
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    std::vector<double> permuted(n);
    for (std::size_t i = 0; i < n; ++i) permuted[i] = distinct[perm[i]];
    const auto a = binarize_topk(distinct, c), b = binarize_topk(permuted, c);
    for (std::size_t i = 0; i < n; ++i) CHECK(b[i] == a[perm[i]]);
  }
}

TEST_CASE("binary mask sets hold ascending indices") {
  const NetworkModel net = build_lenet(5, 1);
  const MaskSet m = random_masks(net, 0.5, 3);
  const BinaryMaskSet bin = binarize_topk(m);
  CHECK(bin.budgets() == m.budgets);
  for (const auto& s : bin.selected) CHECK(std::is_sorted(s.begin(), s.end()));
  CHECK(binarize_topk(bin.values(), bin.budgets()) == bin);
}

TEST_CASE("full-budget binary masks reproduce the unmasked source bit-exactly") {
  for (const char* arch : {"lenet", "plaincnn"}) {
    const NetworkModel net = build_network(arch, 5, 4);
    const BinaryMaskSet full = binarize_topk(random_masks(net, 1.0, 5));
    Rng rng(6);
    const Tensor x = testing::random_tensor({3, 1, 28, 28}, rng, 0.0, 1.0);
    const BlockMasks t = full.tensors();
    CHECK(bit_equal(forward(net, x, &t), forward(net, x)));
  }
}

TEST_CASE("budget penalty is beta times the summed excess") {
  const BlockMasks soft{Tensor::from({0.9, 0.8, 0.1}), Tensor::from({0.2, 0.2})};
  CHECK(budget_penalty(soft, {1, 1}, 0, 0.1).item() == doctest::Approx(0.1 * 0.8).epsilon(1e-14));
  CHECK(budget_penalty(soft, {1, 1}, 1, 0.1).item() == 0.0);
  CHECK(budget_penalty(soft, {3, 2}, 0, 0.1).item() == 0.0);
}

TEST_CASE("loc_loss is the mean squared surrogate gap plus the penalty") {
  const auto t = testing::toy_clone();
  MaskSet m = random_masks(*t.source, 0.5, 7);
  Rng rng(8);
  const auto pairs = sample_pairs(rng, t.surrogates.models.size(), t.surrogates.masks.size(), 5);

  const BlockMasks soft = m.soft();
  const Tensor logits = forward(*t.source, pair_batch(t.surrogates, t.anchors, pairs), &soft);
  double fit = 0.0;
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    const double g = predict(t.surrogates.models[pairs[k].first], t.surrogates.masks[pairs[k].second])[0];
    const double d = logits[k * 3 + 0] - g;
    fit += d * d;
  }
  fit /= static_cast<double>(pairs.size());
  double excess = 0.0;
  for (std::size_t b = 0; b < soft.size(); ++b) {
    double s = 0.0;
    for (double v : soft[b].data()) s += v;
    excess += std::max(0.0, s - static_cast<double>(m.budgets[b]));
  }
  CHECK(loc_loss(*t.source, m, t.surrogates, t.anchors, pairs, 0.1).item() ==
        doctest::Approx(fit + 0.1 * excess).epsilon(1e-12));
}

TEST_CASE("loc_loss gradients match central differences") {
  const auto t = testing::toy_clone();
  for (std::size_t from : {0u, 1u, 2u}) {
    MaskSet m = random_masks(*t.source, 0.34, 9 + from);
    m.active_from = from;
    Rng rng(10);
    const auto pairs = sample_pairs(rng, t.surrogates.models.size(), t.surrogates.masks.size(), 8);
    auto loss = [&] { return loc_loss(*t.source, m, t.surrogates, t.anchors, pairs, 0.1); };
    CHECK(testing::fd_error(loss, m.logits) < 1e-6);
  }
}

TEST_CASE("blocks below the active position are unmasked and unpenalized") {
  const auto t = testing::toy_clone();
  MaskSet m = random_masks(*t.source, 0.34, 11);
  m.active_from = 2;
  Rng rng(12);
  const auto pairs = sample_pairs(rng, t.surrogates.models.size(), t.surrogates.masks.size(), 6);
  const double base = loc_loss(*t.source, m, t.surrogates, t.anchors, pairs).item();
  for (std::size_t b = 0; b < 2; ++b) {
    for (auto& v : m.logits[b].data()) v = -9.0;
  }
  CHECK(loc_loss(*t.source, m, t.surrogates, t.anchors, pairs).item() == base);
}

TEST_CASE("loc_loss rejects mismatched inputs") {
  const auto t = testing::toy_clone();
  const MaskSet m = random_masks(*t.source, 0.5, 1);
  CHECK_THROWS_AS(loc_loss(*t.source, m, t.surrogates, t.anchors, {}), ContractError);
  LocalModelSet wide = t.surrogates;
  wide.classes = {7};
  const std::vector<AnchorMask> pairs{{0, 0}};
  CHECK_THROWS_AS(loc_loss(*t.source, m, wide, t.anchors, pairs), ContractError);
}

TEST_CASE("train_masks lowers the probe loss and never writes the source") {
  const auto t = testing::toy_clone();
  const std::string before = serialize_checkpoint(*t.source);
  MaskTrainConfig cfg;
  cfg.steps = 60;
  cfg.batch_size = 8;
  cfg.probe_pairs = 40;
  const MaskTrainResult r = train_masks(*t.source, t.surrogates, t.anchors, init_masks(*t.source, {2, 2, 3}), cfg);
  CHECK(r.step_losses.size() == 60);
  CHECK(r.final_loss < r.initial_loss);
  CHECK(serialize_checkpoint(*t.source) == before);
  for (const auto& p : t.source->parameters()) CHECK(!p.has_grad());

  const MaskTrainResult again = train_masks(*t.source, t.surrogates, t.anchors, init_masks(*t.source, {2, 2, 3}), cfg);
  for (std::size_t b = 0; b < 3; ++b) CHECK(bit_equal(again.masks.logits[b], r.masks.logits[b]));
}

TEST_CASE("zero steps leave the masks unchanged") {
  const auto t = testing::toy_clone();
  MaskTrainConfig cfg;
  cfg.steps = 0;
  cfg.probe_pairs = 10;
  const MaskSet init = random_masks(*t.source, 0.5, 13);
  const MaskTrainResult r = train_masks(*t.source, t.surrogates, t.anchors, init.clone(), cfg);
  CHECK(r.initial_loss == r.final_loss);
  for (std::size_t b = 0; b < 3; ++b) CHECK(bit_equal(r.masks.logits[b], init.logits[b]));
}

TEST_CASE("train_masks validates budgets") {
  const auto t = testing::toy_clone();
  MaskSet bad = init_masks(*t.source, {1, 1, 1});
  bad.budgets[1] = 9;
  CHECK_THROWS_AS(train_masks(*t.source, t.surrogates, t.anchors, bad, {}), ContractError);
}
