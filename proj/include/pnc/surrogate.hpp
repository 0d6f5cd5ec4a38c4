#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pnc/data.hpp"
#include "pnc/tensor.hpp"
#include "pnc/train.hpp"

namespace pnc {

constexpr double kDefaultRidge = 1e-3;
constexpr double kDefaultLocalitySigma = 0.5;

/// Linear stand-in for a network around one anchor image: maps a patch mask
/// (plus a constant term) to the network's logits on the selected outputs.
struct LocalModel {
  std::size_t anchor = 0;
  Tensor weights;                    // (P+1) x C; row P is the intercept
  std::vector<std::size_t> classes;  // output indices of the modelled network
  double residual = 0.0;             // mean squared error over the fitting masks
};

struct LocalModelSet {
  PatchGrid grid{4, 4};
  std::vector<PatchMask> masks;
  std::vector<LocalModel> models;
  std::vector<std::size_t> classes;
  std::string arch_id;
  double lambda = kDefaultRidge;
  double sigma = kDefaultLocalitySigma;
  std::uint64_t seed = 0;
  std::string source_digest;  // hex FNV-1a of the modelled checkpoint, when known

  std::size_t patch_count() const { return grid.patch_count(); }
  std::size_t output_width() const { return classes.size(); }
};

/// exp(-(1 - density(b))^2 / sigma^2).
double locality_weight(const PatchMask& mask, double sigma = kDefaultLocalitySigma);

/// Solves min_W sum_b w_b ||y_b - x_b W||^2 + lambda ||W without its last row||^2
/// in closed form. `design` is |B| x (P+1) with the constant column last.
Tensor solve_weighted_ridge(const Tensor& design, const Tensor& targets, std::span<const double> row_weights,
                            double lambda);

Tensor design_matrix(std::span<const PatchMask> masks);

LocalModel fit_local_model(const LogitFn& net, std::span<const double> image, std::span<const PatchMask> masks,
                           const PatchGrid& grid, const std::vector<std::size_t>& classes,
                           double lambda = kDefaultRidge, double sigma = kDefaultLocalitySigma);

/// One local model per item of `anchors`, in dataset order.
LocalModelSet fit_set(const LogitFn& net, const LabeledDataset& anchors, std::vector<PatchMask> masks,
                      const PatchGrid& grid, const std::vector<std::size_t>& classes,
                      double lambda = kDefaultRidge, double sigma = kDefaultLocalitySigma);

/// [b, 1] . W, as a length-C tensor.
Tensor predict(const LocalModel& model, const PatchMask& mask);

/// Stacked predictions for (model index, mask index) pairs, N x C.
Tensor predict_pairs(const LocalModelSet& set, std::span<const std::pair<std::size_t, std::size_t>> pairs);

/// Cosine similarity of the two sets' mean coefficient matrices.
double sim_conditional(const LocalModelSet& a, const LocalModelSet& b);

/// Mean over `heldout` of ||net(perturb(x, b))|classes - g(b)||^2.
double fidelity(const LocalModel& model, const LogitFn& net, std::span<const double> image,
                std::span<const PatchMask> heldout, const PatchGrid& grid);

/// Held-out fidelity against fitting residuals, one entry per anchor.
struct SurrogateQuality {
  std::vector<double> fidelity;
  std::vector<double> residual;
  double median_fidelity = 0.0;
  double residual_p90 = 0.0;

  nlohmann::json to_json() const;
};

/// Scores every model of `set` on `heldout_count` fresh random masks drawn
/// under `seed` (the all-ones mask is left out, it is always in the fitting set).
SurrogateQuality surrogate_quality(const LocalModelSet& set, const LogitFn& net, const LabeledDataset& anchors,
                                   std::size_t heldout_count, std::uint64_t seed);

/// Value at rank ceil(q * n) of the sorted sample (nearest rank).
double quantile(std::vector<double> values, double q);

/// Keeps the listed output columns (positions into `set.classes`).
LocalModelSet select_outputs(const LocalModelSet& set, const std::vector<std::size_t>& positions);

// Surrogate set file: magic "PNCG", u32 version, u32-prefixed JSON header,
// u32 model count, then (P+1) x C f64 weights per model.
std::string serialize_surrogates(const LocalModelSet& set);
LocalModelSet parse_surrogates(std::string_view bytes, const std::string& context = "surrogates");
void save_surrogates(const LocalModelSet& set, const std::filesystem::path& path);
LocalModelSet load_surrogates(const std::filesystem::path& path);

}  // namespace pnc
