#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace pnc {

/// Every knob of the pipeline. Each field has a default; the effective value
/// set is echoed into every report.
struct RunConfig {
  std::string data_dir = "data/mnist";
  std::string output_dir = "runs";
  std::uint64_t seed = 7;

  std::vector<int> target_classes{0, 1, 2, 3, 4};
  std::vector<int> source_classes{5, 6, 7, 8, 9};
  std::vector<int> cloned_classes{5};
  std::string target_arch = "lenet";
  std::string source_arch = "lenet";

  // surrogates
  double data_fraction = 0.3;
  std::size_t mask_count = 100;
  std::size_t grid_rows = 4;
  std::size_t grid_cols = 4;
  double ridge_lambda = 1e-3;
  double locality_sigma = 0.5;

  // localization
  double budget_rate = 0.5;
  std::vector<std::size_t> budgets;  // explicit per-block budgets; empty -> budget_rate
  std::size_t mask_steps = 300;
  std::size_t mask_batch = 32;
  double mask_lr = 0.05;
  double budget_penalty = 0.1;

  // insertion
  std::size_t epochs_per_step = 10;
  std::size_t batch_size = 32;
  double learning_rate = 0.01;
  double momentum = 0.9;
  double joint_kd_weight = 1.0;
  double teacher_coverage = 0.985;
  std::string teacher_mode = "scale";  // "scale" | "shift"
  bool freeze_old_rows = true;
  std::size_t calibrate_epochs = 2;
  std::string new_row_init = "source";  // "source" | "random"
  std::string select_by = "insertion";  // "insertion" | "total"
  bool parallel_sweep = false;
  int fixed_position = -1;  // >= 0 restricts the search to one R

  // pretraining
  std::size_t pretrain_epochs = 4;
  std::size_t pretrain_batch = 64;
  double pretrain_lr = 0.05;
  double pretrain_lr_decay = 0.5;

  // similarity matrix
  std::size_t sim_anchors_per_class = 200;
};

nlohmann::json to_json(const RunConfig& config);
/// Overlays the keys of `j` onto `base`. Unknown keys and wrong types raise ConfigError.
RunConfig merge_config(const RunConfig& base, const nlohmann::json& j);
RunConfig load_config(const std::filesystem::path& path, const RunConfig& base = {});
/// Range checks that do not depend on data or checkpoints.
void validate_config(const RunConfig& config);

/// Parses "0-4", "5,6,7", "5" or mixes such as "0-2,7".
std::vector<int> parse_class_list(const std::string& text);
std::string class_list_str(const std::vector<int>& classes);

/// FNV-1a digest of the canonical JSON dump.
std::string config_digest(const RunConfig& config);

}  // namespace pnc
