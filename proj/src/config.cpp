#include "pnc/config.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "pnc/binary_io.hpp"
#include "pnc/errors.hpp"

namespace pnc {

using nlohmann::json;

#define PNC_CONFIG_FIELDS(X) \
  X(data_dir)                \
  X(output_dir)              \
  X(seed)                    \
  X(target_classes)          \
  X(source_classes)          \
  X(cloned_classes)          \
  X(target_arch)             \
  X(source_arch)             \
  X(data_fraction)           \
  X(mask_count)              \
  X(grid_rows)               \
  X(grid_cols)               \
  X(ridge_lambda)            \
  X(locality_sigma)          \
  X(budget_rate)             \
  X(budgets)                 \
  X(mask_steps)              \
  X(mask_batch)              \
  X(mask_lr)                 \
  X(budget_penalty)          \
  X(epochs_per_step)         \
  X(batch_size)              \
  X(learning_rate)           \
  X(momentum)                \
  X(joint_kd_weight)         \
  X(teacher_coverage)        \
  X(teacher_mode)            \
  X(freeze_old_rows)         \
  X(calibrate_epochs)        \
  X(new_row_init)            \
  X(select_by)               \
  X(parallel_sweep)          \
  X(fixed_position)          \
  X(pretrain_epochs)         \
  X(pretrain_batch)          \
  X(pretrain_lr)             \
  X(pretrain_lr_decay)       \
  X(sim_anchors_per_class)

json to_json(const RunConfig& c) {
  json j;
#define PNC_TO(name) j[#name] = c.name;
  PNC_CONFIG_FIELDS(PNC_TO)
#undef PNC_TO
  return j;
}

RunConfig merge_config(const RunConfig& base, const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  static const std::set<std::string> known = {
#define PNC_NAME(name) #name,
      PNC_CONFIG_FIELDS(PNC_NAME)
#undef PNC_NAME
  };
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown config key '" + key + "'");
  }
  RunConfig c = base;
  try {
#define PNC_FROM(name) \
  if (j.contains(#name)) j.at(#name).get_to(c.name);
    PNC_CONFIG_FIELDS(PNC_FROM)
#undef PNC_FROM
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config value has the wrong type: ") + e.what());
  }
  return c;
}

RunConfig load_config(const std::filesystem::path& path, const RunConfig& base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return merge_config(base, j);
}

namespace {

void check_classes(const std::vector<int>& classes, const char* name) {
  if (classes.empty()) throw ConfigError(std::string(name) + " is empty");
  std::set<int> seen;
  for (int c : classes) {
    if (c < 0 || c > 9) throw ConfigError(std::string(name) + " contains label " + std::to_string(c));
    if (!seen.insert(c).second) throw ConfigError(std::string(name) + " repeats label " + std::to_string(c));
  }
}

}  // namespace

void validate_config(const RunConfig& c) {
  check_classes(c.target_classes, "target_classes");
  check_classes(c.source_classes, "source_classes");
  check_classes(c.cloned_classes, "cloned_classes");
  if (!(c.data_fraction > 0.0 && c.data_fraction <= 1.0)) throw ConfigError("data_fraction must lie in (0,1]");
  if (!(c.budget_rate > 0.0 && c.budget_rate <= 1.0)) throw ConfigError("budget_rate must lie in (0,1]");
  if (c.grid_rows == 0 || c.grid_cols == 0 || c.grid_rows > 28 || c.grid_cols > 28) {
    throw ConfigError("grid must be between 1x1 and 28x28");
  }
  if (c.mask_count <= c.grid_rows * c.grid_cols + 1) {
    throw ConfigError("mask_count must exceed the patch count plus one (" +
                      std::to_string(c.grid_rows * c.grid_cols + 1) + ")");
  }
  if (c.ridge_lambda < 0.0) throw ConfigError("ridge_lambda must be nonnegative");
  if (!(c.locality_sigma > 0.0)) throw ConfigError("locality_sigma must be positive");
  if (c.mask_batch == 0 || c.batch_size == 0 || c.pretrain_batch == 0) throw ConfigError("batch sizes must be positive");
  if (!(c.momentum >= 0.0 && c.momentum < 1.0)) throw ConfigError("momentum must lie in [0,1)");
  if (!(c.learning_rate > 0.0) || !(c.mask_lr > 0.0) || !(c.pretrain_lr > 0.0)) {
    throw ConfigError("learning rates must be positive");
  }
  if (c.joint_kd_weight < 0.0 || c.budget_penalty < 0.0) throw ConfigError("loss weights must be nonnegative");
  if (!(c.teacher_coverage >= 0.0 && c.teacher_coverage <= 1.0)) throw ConfigError("teacher_coverage must lie in [0,1]");
  if (c.new_row_init != "source" && c.new_row_init != "random") throw ConfigError("new_row_init must be 'source' or 'random'");
  if (c.teacher_mode != "scale" && c.teacher_mode != "shift") throw ConfigError("teacher_mode must be 'scale' or 'shift'");
  if (c.select_by != "insertion" && c.select_by != "total") throw ConfigError("select_by must be 'insertion' or 'total'");
  if (c.sim_anchors_per_class == 0) throw ConfigError("sim_anchors_per_class must be positive");
}

std::vector<int> parse_class_list(const std::string& text) {
  std::vector<int> out;
  std::size_t pos = 0;
  auto bad = [&] { return ConfigError("malformed class list '" + text + "'"); };
  auto parse_int = [&](const std::string& s) {
    if (s.empty() || !std::all_of(s.begin(), s.end(), [](char ch) { return ch >= '0' && ch <= '9'; })) throw bad();
    return std::stoi(s);
  };
  while (pos <= text.size()) {
    auto comma = text.find(',', pos);
    if (comma == std::string::npos) comma = text.size();
    const std::string item = text.substr(pos, comma - pos);
    const auto dash = item.find('-');
    if (dash == std::string::npos) {
      out.push_back(parse_int(item));
    } else {
      const int lo = parse_int(item.substr(0, dash));
      const int hi = parse_int(item.substr(dash + 1));
      if (hi < lo) throw bad();
      for (int c = lo; c <= hi; ++c) out.push_back(c);
    }
    pos = comma + 1;
  }
  return out;
}

std::string class_list_str(const std::vector<int>& classes) {
  std::string s;
  for (std::size_t i = 0; i < classes.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(classes[i]);
  }
  return s;
}

std::string config_digest(const RunConfig& config) { return hex64(fnv1a64(to_json(config).dump())); }

}  // namespace pnc
