#include <doctest.h>

#include "pnc/errors.hpp"
#include "support.hpp"

using namespace pnc;

namespace {

/// Solves (X^T diag(w) X + lambda D) W = X^T diag(w) Y by Gaussian
/// elimination with partial pivoting on explicitly summed normal equations.
std::vector<double> oracle_ridge(const Tensor& x, const Tensor& y, const std::vector<double>& w, double lambda) {
  const std::size_t n = x.dim(0), k = x.dim(1), c = y.dim(1);
  std::vector<std::vector<double>> a(k, std::vector<double>(k + c, 0.0));
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      for (std::size_t r = 0; r < n; ++r) a[i][j] += x[r * k + i] * w[r] * x[r * k + j];
    }
    for (std::size_t j = 0; j < c; ++j) {
      for (std::size_t r = 0; r < n; ++r) a[i][k + j] += x[r * k + i] * w[r] * y[r * c + j];
    }
    if (i + 1 < k) a[i][i] += lambda;
  }
  for (std::size_t col = 0; col < k; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < k; ++r) {
      if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
    }
    std::swap(a[col], a[piv]);
    for (std::size_t r = 0; r < k; ++r) {
      if (r == col) continue;
      const double f = a[r][col] / a[col][col];
      for (std::size_t j = col; j < k + c; ++j) a[r][j] -= f * a[col][j];
    }
  }
  std::vector<double> out(k * c);
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = a[i][k + j] / a[i][i];
  }
  return out;
}

double rel_error(std::span<const double> got, const std::vector<double>& want) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < want.size(); ++i) {
    num = std::max(num, std::abs(got[i] - want[i]));
    den = std::max(den, std::abs(want[i]));
  }
  return num / std::max(den, 1e-300);
}

/// A network that is exactly linear in the pixels: logits = flatten(x) * A.
LogitFn linear_net(const Tensor& a) {
  return [a](const Tensor& x) { return matmul(flatten(x), a); };
}

LocalModelSet scaled_copy(const LocalModelSet& s, double f) {
  LocalModelSet out = s;
  for (auto& m : out.models) m.weights = scale(m.weights, f);
  return out;
}

}  // namespace

TEST_CASE("locality weight is the Gaussian kernel of the drop fraction") {
  PatchMask full{std::vector<std::uint8_t>(16, 1)};
  CHECK(locality_weight(full) == 1.0);
  PatchMask half{std::vector<std::uint8_t>(16, 0)};
  for (std::size_t i = 0; i < 8; ++i) half.bits[i] = 1;
  CHECK(locality_weight(half, 0.5) == doctest::Approx(std::exp(-1.0)).epsilon(1e-15));
  PatchMask none{std::vector<std::uint8_t>(16, 0)};
  CHECK(locality_weight(none, 0.5) == doctest::Approx(std::exp(-4.0)).epsilon(1e-15));
}

TEST_CASE("design matrix has one row per mask and a trailing constant column") {
  const auto masks = gen_masks(4, 3, 1);
  const Tensor x = design_matrix(masks);
  REQUIRE(x.dims() == Dims{3, 5});
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c = 0; c < 4; ++c) CHECK(x[r * 5 + c] == masks[r].bits[c]);
    CHECK(x[r * 5 + 4] == 1.0);
  }
}

TEST_CASE("weighted ridge matches the normal-equation oracle") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t p = 4 + rng.below(13), n = p + 5 + rng.below(90), c = 1 + rng.below(5);
    const auto masks = gen_masks(p, n, 100 + static_cast<std::uint64_t>(trial));
    const Tensor x = design_matrix(masks);
    const Tensor y = testing::random_tensor({n, c}, rng, -10.0, 10.0);
    std::vector<double> w;
    for (const auto& m : masks) w.push_back(locality_weight(m, 0.5));
    const double lambda = trial % 2 ? 1e-3 : rng.uniform(0.0, 2.0);
    const Tensor got = solve_weighted_ridge(x, y, w, lambda);
    CHECK(rel_error(got.data(), oracle_ridge(x, y, w, lambda)) < 1e-9);
  }
}

TEST_CASE("ridge solve rejects singular systems and bad shapes") {
  const std::vector<PatchMask> same(10, PatchMask{std::vector<std::uint8_t>(4, 1)});
  const Tensor x = design_matrix(same);
  const Tensor y(Dims{10, 1}, 1.0);
  const std::vector<double> w(10, 1.0);
  CHECK_THROWS_AS(solve_weighted_ridge(x, y, w, 0.0), NumericError);
  CHECK_THROWS_AS(solve_weighted_ridge(x, Tensor(Dims{9, 1}), w, 1e-3), ShapeError);
  CHECK_THROWS_AS(solve_weighted_ridge(x, y, w, -1.0), ContractError);
}

TEST_CASE("a network linear in the patches is recovered exactly") {
  Rng rng(4);
  const PatchGrid grid(4, 4);
  const Tensor a = testing::random_tensor({784, 3}, rng);
  const LogitFn net = linear_net(a);
  std::vector<double> image(784);
  for (auto& v : image) v = rng.uniform();
  const auto masks = gen_masks(16, 100, 5);
  const LocalModel m = fit_local_model(net, image, masks, grid, {0, 2}, 0.0);

  std::vector<double> expect(17 * 2, 0.0);  // intercept stays 0
  for (std::size_t y = 0; y < 28; ++y) {
    for (std::size_t x = 0; x < 28; ++x) {
      const std::size_t p = grid.patch_of(y, x), px = y * 28 + x;
      expect[p * 2 + 0] += image[px] * a[px * 3 + 0];
      expect[p * 2 + 1] += image[px] * a[px * 3 + 2];
    }
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < expect.size(); ++i) worst = std::max(worst, std::abs(m.weights[i] - expect[i]));
  CHECK(worst < 1e-9);
  CHECK(m.residual < 1e-18);
  const auto heldout = gen_masks(16, 30, 6);
  CHECK(fidelity(m, net, image, heldout, grid) < 1e-18);
}

TEST_CASE("infinite ridge leaves only the weighted-mean intercept") {
  Rng rng(5);
  const auto masks = gen_masks(6, 40, 7);
  const Tensor x = design_matrix(masks);
  const Tensor y = testing::random_tensor({40, 2}, rng);
  std::vector<double> w;
  for (const auto& m : masks) w.push_back(locality_weight(m));
  const Tensor sol = solve_weighted_ridge(x, y, w, 1e12);
  for (std::size_t i = 0; i < 6 * 2; ++i) CHECK(std::abs(sol[i]) < 1e-8);
  for (std::size_t j = 0; j < 2; ++j) {
    double num = 0.0, den = 0.0;
    for (std::size_t r = 0; r < 40; ++r) {
      num += w[r] * y[r * 2 + j];
      den += w[r];
    }
    CHECK(sol[12 + j] == doctest::Approx(num / den).epsilon(1e-6));
  }
}

TEST_CASE("fit_local_model needs more masks than coefficients") {
  const auto t = testing::toy_clone();
  const LogitFn fn = [src = t.source](const Tensor& x) { return forward(*src, x); };
  CHECK_THROWS_AS(fit_local_model(fn, t.anchors.image(0), gen_masks(4, 5, 1), PatchGrid(2, 2, 8, 8), {0}),
                  ContractError);
  CHECK_THROWS_AS(fit_local_model(fn, t.anchors.image(0), gen_masks(4, 12, 1), PatchGrid(2, 2, 8, 8), {}),
                  ContractError);
}

TEST_CASE("predict equals the design row times the weights") {
  const auto t = testing::toy_clone();
  const Tensor x = design_matrix(t.surrogates.masks);
  for (std::size_t k = 0; k < t.surrogates.masks.size(); ++k) {
    const Tensor p = predict(t.surrogates.models[1], t.surrogates.masks[k]);
    double s = 0.0;
    for (std::size_t i = 0; i < 5; ++i) s += x[k * 5 + i] * t.surrogates.models[1].weights[i];
    CHECK(p[0] == doctest::Approx(s).epsilon(1e-14));
  }
  const std::vector<std::pair<std::size_t, std::size_t>> pairs{{0, 3}, {2, 1}};
  const Tensor stacked = predict_pairs(t.surrogates, pairs);
  CHECK(stacked[1] == predict(t.surrogates.models[2], t.surrogates.masks[1])[0]);
}

TEST_CASE("conditional similarity is a symmetric, scale-free cosine") {
  const auto a = testing::toy_clone(11).surrogates;
  const auto b = testing::toy_clone(21).surrogates;
  CHECK(sim_conditional(a, a) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(sim_conditional(a, b) == sim_conditional(b, a));
  CHECK(sim_conditional(a, scaled_copy(b, 3.0)) == doctest::Approx(sim_conditional(a, b)).epsilon(1e-12));
  CHECK(sim_conditional(a, scaled_copy(a, -1.0)) == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK_THROWS_AS(sim_conditional(a, scaled_copy(a, 0.0)), NumericError);
}

TEST_CASE("nearest-rank quantile") {
  CHECK(quantile({5, 1, 4, 2, 3}, 0.5) == 3);
  CHECK(quantile({1, 2, 3, 4, 5, 6, 7, 8, 9, 10}, 0.9) == 9);
  CHECK(quantile({7}, 0.0) == 7);
  CHECK_THROWS_AS(quantile({}, 0.5), NumericError);
  CHECK_THROWS_AS(quantile({1}, 1.5), ContractError);
}

TEST_CASE("surrogate quality reports one entry per anchor") {
  const auto t = testing::toy_clone();
  const LogitFn fn = [src = t.source](const Tensor& x) { return forward(*src, x); };
  const SurrogateQuality q = surrogate_quality(t.surrogates, fn, t.anchors, 20, 9);
  CHECK(q.fidelity.size() == t.anchors.size());
  CHECK(q.residual.size() == t.anchors.size());
  CHECK(q.median_fidelity == quantile(q.fidelity, 0.5));
  for (std::size_t i = 0; i < q.residual.size(); ++i) CHECK(q.residual[i] == t.surrogates.models[i].residual);
  CHECK_THROWS_AS(surrogate_quality(t.surrogates, fn, t.anchors, 0, 9), ContractError);
}

TEST_CASE("surrogate files round trip and reject corruption") {
  auto t = testing::toy_clone();
  t.surrogates.seed = 77;
  t.surrogates.source_digest = "00ff";
  const auto dir = testing::scratch("surrogates");
  save_surrogates(t.surrogates, dir / "g.pncg");
  const LocalModelSet back = load_surrogates(dir / "g.pncg");
  CHECK(back.seed == 77);
  CHECK(back.source_digest == "00ff");
  CHECK(back.arch_id == "toy");
  CHECK(back.masks == t.surrogates.masks);
  CHECK(back.classes == t.surrogates.classes);
  REQUIRE(back.models.size() == t.surrogates.models.size());
  for (std::size_t i = 0; i < back.models.size(); ++i) {
    CHECK(bit_equal(back.models[i].weights, t.surrogates.models[i].weights));
    CHECK(back.models[i].residual == t.surrogates.models[i].residual);
  }
  const std::string bytes = serialize_surrogates(t.surrogates);
  CHECK(serialize_surrogates(back) == bytes);
  CHECK_THROWS_AS(parse_surrogates(bytes.substr(0, bytes.size() - 1)), FormatError);
  CHECK_THROWS_AS(parse_surrogates("PNCX" + bytes.substr(4)), FormatError);
}

TEST_CASE("select_outputs keeps the chosen columns") {
  Rng rng(6);
  const PatchGrid grid(2, 2, 8, 8);
  const LogitFn net = linear_net(testing::random_tensor({64, 4}, rng));
  const auto anchors = testing::toy_dataset({1}, 2, 3);
  const LocalModelSet set = fit_set(net, anchors, gen_masks(4, 12, 4), grid, {0, 1, 2, 3});
  const LocalModelSet sub = select_outputs(set, {2});
  CHECK(sub.classes == std::vector<std::size_t>{2});
  for (std::size_t i = 0; i < 5; ++i) CHECK(sub.models[0].weights[i] == set.models[0].weights[i * 4 + 2]);
  CHECK_THROWS_AS(select_outputs(set, {4}), ContractError);
}
