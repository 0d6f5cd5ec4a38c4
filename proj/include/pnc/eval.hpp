#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pnc/config.hpp"
#include "pnc/data.hpp"
#include "pnc/model.hpp"
#include "pnc/surrogate.hpp"
#include "pnc/train.hpp"

namespace pnc {

struct ClassAccuracy {
  int label = 0;
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

/// Top-1 accuracy per label. Output k of `fn` stands for dataset label
/// class_order[k]; a label missing from class_order is a DataError.
std::vector<ClassAccuracy> per_class_accuracy(const LogitFn& fn, const LabeledDataset& ds,
                                              const std::vector<int>& class_order);

/// Pooled top-1 accuracy of `fn` on `ds`.
double accuracy(const LogitFn& fn, const LabeledDataset& ds, const std::vector<int>& class_order);

struct AccuracyReport {
  double ori_acc = 0.0;  // pooled over the original classes
  double tar_acc = 0.0;  // pooled over the cloned classes
  double avg_acc = 0.0;  // pooled over both
  double ori_macro = 0.0;
  double tar_macro = 0.0;
  double avg_macro = 0.0;
  std::size_t ori_count = 0;
  std::size_t tar_count = 0;
  std::vector<ClassAccuracy> per_class;

  nlohmann::json to_json() const;
};

/// Combines per-class counts, splitting them by membership in `original`.
AccuracyReport summarize(const std::vector<ClassAccuracy>& per_class, const std::vector<int>& original,
                         const std::vector<int>& cloned);

/// Evaluates `fn` on the test items of the original and cloned classes.
AccuracyReport accuracy_report(const LogitFn& fn, const LabeledDataset& test, const std::vector<int>& original,
                               const std::vector<int>& cloned, const std::vector<int>& class_order);

enum class SimilarityMode { source_source, source_module };

struct SimilarityMatrix {
  std::vector<std::vector<double>> values;  // values[i][j]
  std::vector<std::string> row_labels;
  std::vector<std::string> col_labels;
  SimilarityMode mode = SimilarityMode::source_source;

  std::size_t size() const { return values.size(); }
  double diagonal_mean() const;
  double off_diagonal_mean() const;
  nlohmann::json to_json() const;
};

/// Entry (i,j) = sim_conditional(source_sets[i], source_sets[j]) without
/// modules, or sim_conditional(source_sets[j], module_sets[i]) with them.
SimilarityMatrix similarity_matrix(const std::vector<LocalModelSet>& source_sets,
                                   const std::vector<LocalModelSet>* module_sets = nullptr);

/// Binary PGM (P5) heat image, one cell per entry, darker for higher values.
void write_heat_pgm(const SimilarityMatrix& m, const std::filesystem::path& path, std::size_t cell = 16);

struct SimilarityStudy {
  SimilarityMatrix source;
  SimilarityMatrix module;
  nlohmann::json report;
};

/// Ten one-class localizations on a ten-way source and both similarity matrices.
SimilarityStudy similarity_study(const NetworkModel& source, const Mnist& data, const RunConfig& config);

enum class SweepAxis { budget, position };

struct SweepRow {
  double value = 0.0;  // budget rate or R
  AccuracyReport accuracy;
  double convergence = 0.0;       // final-epoch joint loss
  double calibration_loss = 0.0;  // final-epoch insertion loss under binary masks
  std::size_t position = 0;
  std::size_t packet_bytes = 0;
};

struct SweepResult {
  SweepAxis axis = SweepAxis::budget;
  std::vector<SweepRow> rows;
  std::size_t argmin_position = 0;  // position axis: R chosen by the configured selection score
  std::string csv() const;
  nlohmann::json to_json() const;
};

/// Budget axis: one clone run per budget rate (each searching R unless the
/// config fixes it). Position axis: one clone run whose trace gives a row per R.
SweepResult sweep(const NetworkModel& target, const NetworkModel& source, const Mnist& data, const RunConfig& config,
                  SweepAxis axis, const std::vector<double>& values);

}  // namespace pnc
