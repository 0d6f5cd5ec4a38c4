#include "pnc/surrogate.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "pnc/binary_io.hpp"
#include "pnc/errors.hpp"

namespace pnc {

namespace {
constexpr std::string_view kMagic = "PNCG";
constexpr std::uint32_t kVersion = 1;
constexpr double kMinRcond = 1e-13;

using MatrixRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::string mask_string(const PatchMask& m) {
  std::string s;
  for (auto b : m.bits) s.push_back(b ? '1' : '0');
  return s;
}

PatchMask parse_mask(const std::string& s, const std::string& context) {
  PatchMask m;
  for (char c : s) {
    if (c != '0' && c != '1') throw FormatError(context + ": mask string contains '" + std::string(1, c) + "'");
    m.bits.push_back(c == '1' ? 1 : 0);
  }
  return m;
}

Tensor gather_outputs(const Tensor& logits, const std::vector<std::size_t>& classes) {
  return select_columns(logits, classes);
}

}  // namespace

double locality_weight(const PatchMask& mask, double sigma) {
  const double d = 1.0 - mask.density();
  return std::exp(-(d * d) / (sigma * sigma));
}

Tensor design_matrix(std::span<const PatchMask> masks) {
  if (masks.empty()) throw ContractError("design_matrix: no masks");
  const std::size_t p = masks.front().size();
  Tensor x(Dims{masks.size(), p + 1});
  for (std::size_t r = 0; r < masks.size(); ++r) {
    if (masks[r].size() != p) throw ShapeError("design_matrix: masks of differing length");
    for (std::size_t c = 0; c < p; ++c) x.data()[r * (p + 1) + c] = masks[r].bits[c];
    x.data()[r * (p + 1) + p] = 1.0;
  }
  return x;
}

Tensor solve_weighted_ridge(const Tensor& design, const Tensor& targets, std::span<const double> row_weights,
                            double lambda) {
  if (design.rank() != 2 || targets.rank() != 2 || design.dim(0) != targets.dim(0) ||
      row_weights.size() != design.dim(0)) {
    throw ShapeError("solve_weighted_ridge: design " + dims_str(design.dims()) + ", targets " +
                     dims_str(targets.dims()) + ", " + std::to_string(row_weights.size()) + " weights");
  }
  if (lambda < 0.0) throw ContractError("solve_weighted_ridge: negative ridge");
  const auto n = static_cast<Eigen::Index>(design.dim(0));
  const auto k = static_cast<Eigen::Index>(design.dim(1));
  const auto c = static_cast<Eigen::Index>(targets.dim(1));
  Eigen::Map<const MatrixRM> x(design.data().data(), n, k);
  Eigen::Map<const MatrixRM> y(targets.data().data(), n, c);
  Eigen::Map<const Eigen::VectorXd> w(row_weights.data(), n);

  Eigen::MatrixXd gram = x.transpose() * w.asDiagonal() * x;
  for (Eigen::Index i = 0; i + 1 < k; ++i) gram(i, i) += lambda;
  const Eigen::MatrixXd rhs = x.transpose() * w.asDiagonal() * y;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(gram);
  const Eigen::VectorXd pivots = ldlt.vectorD().cwiseAbs();
  const bool degenerate = !(pivots.minCoeff() > kMinRcond * pivots.maxCoeff());
  if (ldlt.info() != Eigen::Success || degenerate || !(ldlt.rcond() > kMinRcond)) {
    throw NumericError("solve_weighted_ridge: normal equations are singular (rcond " +
                       std::to_string(ldlt.rcond()) + ", lambda " + std::to_string(lambda) + ")");
  }
  const Eigen::MatrixXd sol = ldlt.solve(rhs);
  if (!sol.allFinite()) throw NumericError("solve_weighted_ridge: non-finite solution");
  Tensor out(Dims{static_cast<std::size_t>(k), static_cast<std::size_t>(c)});
  Eigen::Map<MatrixRM>(out.data().data(), k, c) = sol;
  return out;
}

LocalModel fit_local_model(const LogitFn& net, std::span<const double> image, std::span<const PatchMask> masks,
                           const PatchGrid& grid, const std::vector<std::size_t>& classes, double lambda,
                           double sigma) {
  const std::size_t p = grid.patch_count();
  if (masks.size() <= p + 1) {
    throw ContractError("fit_local_model: need more than P+1=" + std::to_string(p + 1) + " masks, got " +
                        std::to_string(masks.size()));
  }
  if (classes.empty()) throw ContractError("fit_local_model: empty output class list");
  Tensor targets;
  {
    NoGradGuard guard;
    targets = gather_outputs(net(perturb_batch(image, masks, grid)), classes);
  }
  std::vector<double> weights;
  for (const auto& m : masks) weights.push_back(locality_weight(m, sigma));
  const Tensor design = design_matrix(masks);

  LocalModel model;
  model.classes = classes;
  model.weights = solve_weighted_ridge(design, targets, weights, lambda);

  NoGradGuard guard;
  const Tensor fitted = matmul(design, model.weights);
  model.residual = sum_sq(sub(fitted, targets)).item() / static_cast<double>(masks.size());
  return model;
}

LocalModelSet fit_set(const LogitFn& net, const LabeledDataset& anchors, std::vector<PatchMask> masks,
                      const PatchGrid& grid, const std::vector<std::size_t>& classes, double lambda, double sigma) {
  if (anchors.size() == 0) throw DataError("fit_set: no anchor samples");
  LocalModelSet set;
  set.grid = grid;
  set.classes = classes;
  set.lambda = lambda;
  set.sigma = sigma;
  set.models.reserve(anchors.size());
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    LocalModel m = fit_local_model(net, anchors.image(i), masks, grid, classes, lambda, sigma);
    m.anchor = i;
    set.models.push_back(std::move(m));
  }
  set.masks = std::move(masks);
  return set;
}

Tensor predict(const LocalModel& model, const PatchMask& mask) {
  const std::size_t p = model.weights.dim(0) - 1, c = model.weights.dim(1);
  if (mask.size() != p) {
    throw ShapeError("predict: mask of length " + std::to_string(mask.size()) + " for a model over " +
                     std::to_string(p) + " patches");
  }
  Tensor out(Dims{c});
  const double* w = model.weights.data().data();
  for (std::size_t j = 0; j < c; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < p; ++i) {
      if (mask.bits[i]) s += w[i * c + j];
    }
    out.data()[j] = s + w[p * c + j];
  }
  return out;
}

Tensor predict_pairs(const LocalModelSet& set, std::span<const std::pair<std::size_t, std::size_t>> pairs) {
  const std::size_t c = set.output_width();
  Tensor out(Dims{pairs.size(), c});
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    const auto [model, mask] = pairs[k];
    if (model >= set.models.size() || mask >= set.masks.size()) throw ContractError("predict_pairs: index out of range");
    Tensor row = predict(set.models[model], set.masks[mask]);
    std::copy(row.data().begin(), row.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(k * c));
  }
  return out;
}

namespace {
std::vector<double> mean_coefficients(const LocalModelSet& set) {
  if (set.models.empty()) throw NumericError("sim_conditional: empty local model set");
  const std::size_t p = set.patch_count(), c = set.output_width();
  std::vector<double> mean(p * c, 0.0);
  for (const auto& m : set.models) {
    for (std::size_t i = 0; i < p * c; ++i) mean[i] += m.weights.data()[i];
  }
  for (auto& v : mean) v /= static_cast<double>(set.models.size());
  return mean;
}
}  // namespace

double sim_conditional(const LocalModelSet& a, const LocalModelSet& b) {
  if (a.patch_count() != b.patch_count() || a.output_width() != b.output_width()) {
    throw ShapeError("sim_conditional: sets differ in patch count or output width");
  }
  const auto va = mean_coefficients(a);
  const auto vb = mean_coefficients(b);
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < va.size(); ++i) {
    dot += va[i] * vb[i];
    na += va[i] * va[i];
    nb += vb[i] * vb[i];
  }
  if (na == 0.0 || nb == 0.0) throw NumericError("sim_conditional: zero-norm coefficient matrix");
  const double s = dot / (std::sqrt(na) * std::sqrt(nb));
  return std::clamp(s, -1.0, 1.0);
}

double fidelity(const LocalModel& model, const LogitFn& net, std::span<const double> image,
                std::span<const PatchMask> heldout, const PatchGrid& grid) {
  if (heldout.empty()) throw ContractError("fidelity: no held-out masks");
  NoGradGuard guard;
  const Tensor actual = gather_outputs(net(perturb_batch(image, heldout, grid)), model.classes);
  double total = 0.0;
  const std::size_t c = model.classes.size();
  for (std::size_t k = 0; k < heldout.size(); ++k) {
    const Tensor g = predict(model, heldout[k]);
    for (std::size_t j = 0; j < c; ++j) {
      const double d = actual.data()[k * c + j] - g.data()[j];
      total += d * d;
    }
  }
  return total / static_cast<double>(heldout.size());
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw NumericError("quantile: empty sample");
  if (!(q >= 0.0 && q <= 1.0)) throw ContractError("quantile: level outside [0,1]");
  std::sort(values.begin(), values.end());
  const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(values.size())));
  return values[rank == 0 ? 0 : rank - 1];
}

nlohmann::json SurrogateQuality::to_json() const {
  return {{"median_fidelity", median_fidelity},
          {"residual_p90", residual_p90},
          {"fidelity", fidelity},
          {"residual", residual}};
}

SurrogateQuality surrogate_quality(const LocalModelSet& set, const LogitFn& net, const LabeledDataset& anchors,
                                   std::size_t heldout_count, std::uint64_t seed) {
  if (heldout_count == 0) throw ContractError("surrogate_quality: no held-out masks");
  auto heldout = gen_masks(set.patch_count(), heldout_count + 1, seed);
  heldout.erase(heldout.begin());
  SurrogateQuality q;
  for (const auto& m : set.models) {
    if (m.anchor >= anchors.size()) throw ContractError("surrogate_quality: anchor index out of range");
    q.fidelity.push_back(fidelity(m, net, anchors.image(m.anchor), heldout, set.grid));
    q.residual.push_back(m.residual);
  }
  q.median_fidelity = quantile(q.fidelity, 0.5);
  q.residual_p90 = quantile(q.residual, 0.9);
  return q;
}

LocalModelSet select_outputs(const LocalModelSet& set, const std::vector<std::size_t>& positions) {
  LocalModelSet out = set;
  out.classes.clear();
  for (auto p : positions) {
    if (p >= set.classes.size()) throw ContractError("select_outputs: position out of range");
    out.classes.push_back(set.classes[p]);
  }
  for (auto& m : out.models) {
    m.weights = select_columns(m.weights, positions);
    m.classes = out.classes;
  }
  return out;
}

std::string serialize_surrogates(const LocalModelSet& set) {
  nlohmann::json masks = nlohmann::json::array();
  for (const auto& m : set.masks) masks.push_back(mask_string(m));
  nlohmann::json anchors = nlohmann::json::array();
  nlohmann::json residuals = nlohmann::json::array();
  for (const auto& m : set.models) {
    anchors.push_back(m.anchor);
    residuals.push_back(m.residual);
  }
  nlohmann::json header = {
      {"grid", {{"rows", set.grid.rows()}, {"cols", set.grid.cols()}, {"height", set.grid.height()},
                {"width", set.grid.width()}}},
      {"classes", set.classes},
      {"lambda", set.lambda},
      {"sigma", set.sigma},
      {"seed", set.seed},
      {"architecture", set.arch_id},
      {"source_digest", set.source_digest},
      {"masks", masks},
      {"anchors", anchors},
      {"residuals", residuals},
  };
  ByteWriter w;
  w.raw(kMagic);
  w.u32(kVersion);
  w.blob(header.dump());
  w.u32(static_cast<std::uint32_t>(set.models.size()));
  for (const auto& m : set.models) {
    for (double v : m.weights.data()) w.f64(v);
  }
  return w.bytes();
}

LocalModelSet parse_surrogates(std::string_view bytes, const std::string& context) {
  ByteReader r(bytes, context);
  if (r.remaining() < 4 || r.raw(4) != kMagic) throw FormatError(context + ": bad magic, not a PNCG file");
  const auto version = r.u32();
  if (version != kVersion) throw FormatError(context + ": unsupported surrogate version " + std::to_string(version));
  LocalModelSet set;
  std::vector<std::size_t> anchors;
  std::vector<double> residuals;
  try {
    const auto h = nlohmann::json::parse(r.blob());
    const auto& g = h.at("grid");
    set.grid = PatchGrid(g.at("rows").get<std::size_t>(), g.at("cols").get<std::size_t>(),
                         g.at("height").get<std::size_t>(), g.at("width").get<std::size_t>());
    set.classes = h.at("classes").get<std::vector<std::size_t>>();
    set.lambda = h.at("lambda").get<double>();
    set.sigma = h.at("sigma").get<double>();
    set.seed = h.at("seed").get<std::uint64_t>();
    set.arch_id = h.at("architecture").get<std::string>();
    set.source_digest = h.at("source_digest").get<std::string>();
    for (const auto& m : h.at("masks")) set.masks.push_back(parse_mask(m.get<std::string>(), context));
    anchors = h.at("anchors").get<std::vector<std::size_t>>();
    residuals = h.at("residuals").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(context + ": bad header (" + e.what() + ")");
  } catch (const ConfigError& e) {
    throw FormatError(context + ": " + e.what());
  }
  for (const auto& m : set.masks) {
    if (m.size() != set.grid.patch_count()) throw FormatError(context + ": mask length does not match the grid");
  }
  const auto count = r.u32();
  if (count != anchors.size() || count != residuals.size()) throw FormatError(context + ": model count mismatch");
  if (set.classes.empty()) throw FormatError(context + ": empty class list");
  const std::size_t rows = set.grid.patch_count() + 1, cols = set.classes.size();
  for (std::uint32_t k = 0; k < count; ++k) {
    LocalModel m;
    m.anchor = anchors[k];
    m.residual = residuals[k];
    m.classes = set.classes;
    std::vector<double> w(rows * cols);
    for (auto& v : w) v = r.f64();
    m.weights = Tensor(Dims{rows, cols}, std::move(w));
    set.models.push_back(std::move(m));
  }
  r.expect_end();
  return set;
}

void save_surrogates(const LocalModelSet& set, const std::filesystem::path& path) {
  write_file(path, serialize_surrogates(set));
}

LocalModelSet load_surrogates(const std::filesystem::path& path) {
  return parse_surrogates(read_file(path), path.filename().string());
}

}  // namespace pnc
