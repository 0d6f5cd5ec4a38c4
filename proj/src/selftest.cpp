#include "pnc/selftest.hpp"

#include <algorithm>
#include <cmath>

#include "pnc/errors.hpp"
#include "pnc/graft.hpp"
#include "pnc/localize.hpp"
#include "pnc/rng.hpp"
#include "pnc/surrogate.hpp"

namespace pnc {

CheckResult check_gradient(const std::string& name, const std::function<Tensor()>& loss, std::vector<Tensor> inputs,
                           double step, double tolerance) {
  for (auto& t : inputs) {
    t.zero_grad();
    if (!t.requires_grad()) t.set_requires_grad(true);
  }
  loss().backward();
  std::vector<std::vector<double>> analytic;
  for (auto& t : inputs) {
    if (t.has_grad()) {
      analytic.emplace_back(t.grad().begin(), t.grad().end());
    } else {
      analytic.emplace_back(t.size(), 0.0);
    }
    t.zero_grad();
  }
  CheckResult r{name, 0.0, tolerance};
  NoGradGuard guard;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto d = inputs[k].data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double saved = d[i];
      d[i] = saved + step;
      const double up = loss().item();
      d[i] = saved - step;
      const double down = loss().item();
      d[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[k][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-3});
      r.error = std::max(r.error, std::abs(a - numeric) / denom);
    }
  }
  return r;
}

namespace {

Tensor random_tensor(Rng& rng, Dims dims, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(dims));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Dense Gaussian elimination with partial pivoting.
std::vector<double> gauss_solve(std::vector<double> a, std::vector<double> b, std::size_t n, std::size_t cols) {
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r) {
      if (std::abs(a[r * n + c]) > std::abs(a[piv * n + c])) piv = r;
    }
    for (std::size_t j = 0; j < n; ++j) std::swap(a[c * n + j], a[piv * n + j]);
    for (std::size_t j = 0; j < cols; ++j) std::swap(b[c * cols + j], b[piv * cols + j]);
    for (std::size_t r = c + 1; r < n; ++r) {
      const double f = a[r * n + c] / a[c * n + c];
      for (std::size_t j = c; j < n; ++j) a[r * n + j] -= f * a[c * n + j];
      for (std::size_t j = 0; j < cols; ++j) b[r * cols + j] -= f * b[c * cols + j];
    }
  }
  std::vector<double> x(n * cols, 0.0);
  for (std::size_t r = n; r-- > 0;) {
    for (std::size_t j = 0; j < cols; ++j) {
      double s = b[r * cols + j];
      for (std::size_t k = r + 1; k < n; ++k) s -= a[r * n + k] * x[k * cols + j];
      x[r * cols + j] = s / a[r * n + r];
    }
  }
  return x;
}

LabeledDataset toy_anchors(Rng& rng, std::size_t count) {
  LabeledDataset ds;
  ds.height = 8;
  ds.width = 8;
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<double> img(64);
    for (auto& v : img) v = rng.uniform();
    ds.push_back(img, 0);
  }
  return ds;
}

}  // namespace

std::vector<CheckResult> run_selftest(std::uint64_t seed) {
  std::vector<CheckResult> out;
  Rng rng(seed, "selftest");

  {
    Tensor a = random_tensor(rng, {3, 4}), b = random_tensor(rng, {4, 5}), w = random_tensor(rng, {3, 5});
    out.push_back(check_gradient("grad/matmul", [&] { return sum(mul(matmul(a, b), w)); }, {a, b}));
  }
  {
    Tensor x = random_tensor(rng, {2, 2, 5, 5}), k = random_tensor(rng, {3, 2, 3, 3});
    Tensor w = random_tensor(rng, {2, 3, 5, 5});
    out.push_back(check_gradient("grad/conv2d_pad1", [&] { return sum(mul(conv2d(x, k, 1), w)); }, {x, k}));
    Tensor w2 = random_tensor(rng, {2, 3, 3, 3});
    out.push_back(check_gradient("grad/conv2d_valid", [&] { return sum(mul(conv2d(x, k, 0), w2)); }, {x, k}));
  }
  {
    Tensor x = random_tensor(rng, {2, 2, 4, 6}), w = random_tensor(rng, {2, 2, 2, 3});
    out.push_back(check_gradient("grad/maxpool2x2", [&] { return sum(mul(maxpool2x2(x), w)); }, {x}));
    Tensor w2 = random_tensor(rng, {2, 2, 3, 4});
    out.push_back(check_gradient("grad/adaptive_avg_pool2d",
                                 [&] { return sum(mul(adaptive_avg_pool2d(x, 3, 4), w2)); }, {x}));
  }
  {
    Tensor x = random_tensor(rng, {4, 6}), w = random_tensor(rng, {4, 6});
    out.push_back(check_gradient("grad/relu", [&] { return sum(mul(relu(x), w)); }, {x}));
    out.push_back(check_gradient("grad/sigmoid", [&] { return sum(mul(sigmoid(scale(x, 3.0)), w)); }, {x}));
    out.push_back(check_gradient("grad/softmax", [&] { return sum(mul(softmax(x), w)); }, {x}));
    out.push_back(check_gradient("grad/log_softmax", [&] { return sum(mul(log_softmax(x), w)); }, {x}));
    out.push_back(check_gradient("grad/sum_sq_mean", [&] { return add(sum_sq(x), mean(mul(x, w))); }, {x, w}));
    Tensor t = random_tensor(rng, {4, 6}, -3.0, 3.0);
    out.push_back(check_gradient("grad/kl_divergence", [&] { return kl_divergence(x, t); }, {x}));
    const std::vector<std::size_t> labels{0, 3, 5, 2};
    out.push_back(check_gradient("grad/cross_entropy", [&] { return cross_entropy(x, labels); }, {x}));
    Tensor y = random_tensor(rng, {4, 2}), wc = random_tensor(rng, {4, 8});
    out.push_back(check_gradient("grad/concat", [&] { return sum(mul(concat({x, y}), wc)); }, {x, y}));
    Tensor wn = random_tensor(rng, {4, 3});
    out.push_back(check_gradient("grad/narrow_select", [&] {
      return add(sum(mul(narrow(x, 2, 3), wn)), sum_sq(select_columns(x, {5, 0, 5})));
    }, {x}));
  }
  {
    Tensor x = random_tensor(rng, {2, 3, 2, 2}), b = random_tensor(rng, {3}), m = random_tensor(rng, {3});
    Tensor w = random_tensor(rng, {2, 3, 2, 2});
    out.push_back(check_gradient("grad/add_bias_scale_channels",
                                 [&] { return sum(mul(scale_channels(add_bias(x, b), m), w)); }, {x, b, m}));
  }

  {
    // Toy loc_loss and ins_loss against finite differences.
    auto source = std::make_shared<NetworkModel>(build_toy(4, derive_seed(seed, "selftest/source")));
    auto target = std::make_shared<NetworkModel>(build_toy(3, derive_seed(seed, "selftest/target")));
    source->meta.classes = {4, 5, 6, 7};
    target->meta.classes = {0, 1, 2};
    source->set_trainable(false);
    target->set_trainable(false);
    const LabeledDataset anchors = toy_anchors(rng, 4);
    const PatchGrid grid(2, 2, 8, 8);
    const LogitFn fn = [&](const Tensor& x) { return forward(*source, x); };
    const LocalModelSet g = fit_set(fn, anchors, gen_masks(4, 12, seed), grid, {1, 2});
    MaskSet masks = init_masks(*source, budgets_for_rate(*source, 0.5));
    for (auto& l : masks.logits) {
      for (auto& v : l.data()) v = rng.uniform(-1.0, 1.0);
    }
    const std::vector<AnchorMask> pairs{{0, 0}, {1, 3}, {2, 5}, {3, 7}, {1, 11}};
    out.push_back(check_gradient("grad/loc_loss",
                                 [&] { return loc_loss(*source, masks, g, anchors, pairs, 0.1); },
                                 masks.logits));
    ClonedModel c = assemble(target, source, masks, 1, {5, 6}, seed);
    for (auto& v : c.head.branch_weight.data()) v = rng.uniform(-0.5, 0.5);
    // Move the adapter off its identity start: zero inputs would otherwise sit on the rectifier kink.
    for (auto& v : c.adapter.weight.data()) v += rng.uniform(-0.2, 0.2);
    for (auto& v : c.adapter.bias.data()) v = rng.uniform(0.1, 0.3) * (rng.coin() ? 1.0 : -1.0);
    out.push_back(check_gradient("grad/ins_loss",
                                 [&] { return ins_loss(c, g, anchors, pairs, 1.0, TeacherCalibration{1.3, 0.5}, MaskMode::soft); },
                                 c.trainable(true)));
  }

  {
    // Blocked kernel against the textbook triple loop.
    const std::size_t m = 7, k = 13, n = 5;
    Tensor a = random_tensor(rng, {m, k}), b = random_tensor(rng, {k, n});
    const Tensor c = matmul(a, b);
    double err = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
        err = std::max(err, std::abs(s - c[i * n + j]));
      }
    }
    out.push_back({"oracle/gemm_triple_loop", err, 0.0});
  }

  {
    // Weighted ridge against hand-built normal equations.
    const auto masks = gen_masks(6, 20, seed);
    const Tensor x = design_matrix(masks);
    const Tensor y = random_tensor(rng, {20, 3}, -5.0, 5.0);
    std::vector<double> w;
    for (const auto& mk : masks) w.push_back(locality_weight(mk, 0.5));
    const double lambda = 1e-3;
    const Tensor sol = solve_weighted_ridge(x, y, w, lambda);
    const std::size_t p = 7;
    std::vector<double> gram(p * p, 0.0), rhs(p * 3, 0.0);
    for (std::size_t r = 0; r < 20; ++r) {
      for (std::size_t i = 0; i < p; ++i) {
        for (std::size_t j = 0; j < p; ++j) gram[i * p + j] += w[r] * x[r * p + i] * x[r * p + j];
        for (std::size_t j = 0; j < 3; ++j) rhs[i * 3 + j] += w[r] * x[r * p + i] * y[r * 3 + j];
      }
    }
    for (std::size_t i = 0; i + 1 < p; ++i) gram[i * p + i] += lambda;
    const auto ref = gauss_solve(gram, rhs, p, 3);
    double err = 0.0;
    for (std::size_t i = 0; i < ref.size(); ++i) {
      err = std::max(err, std::abs(ref[i] - sol[i]) / std::max(1.0, std::abs(ref[i])));
    }
    out.push_back({"oracle/ridge_normal_equations", err, 1e-9});
  }

  {
    // KL(p||p) = 0 and KL >= 0 over random distributions.
    double self_err = 0.0, negativity = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
      const std::size_t n = 2 + rng.below(9);
      Tensor p = random_tensor(rng, {1, n}, -6.0, 6.0), q = random_tensor(rng, {1, n}, -6.0, 6.0);
      self_err = std::max(self_err, std::abs(kl_divergence(p, p).item()));
      negativity = std::max(negativity, -kl_divergence(q, p).item());
    }
    out.push_back({"property/kl_self_zero", self_err, 1e-12});
    out.push_back({"property/kl_nonnegative", std::max(0.0, negativity), 0.0});
  }
  return out;
}

nlohmann::json selftest_json(const std::vector<CheckResult>& results) {
  nlohmann::json checks = nlohmann::json::array();
  bool all = true;
  for (const auto& r : results) {
    checks.push_back({{"name", r.name}, {"error", r.error}, {"tolerance", r.tolerance}, {"passed", r.passed()}});
    all = all && r.passed();
  }
  return {{"passed", all}, {"checks", checks}};
}

}  // namespace pnc
