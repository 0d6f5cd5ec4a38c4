#include "pnc/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include <spdlog/spdlog.h>

#include "pnc/errors.hpp"
#include "pnc/graft.hpp"
#include "pnc/localize.hpp"
#include "pnc/packet.hpp"

namespace pnc {

std::vector<ClassAccuracy> per_class_accuracy(const LogitFn& fn, const LabeledDataset& ds,
                                              const std::vector<int>& class_order) {
  std::map<int, ClassAccuracy> by_label;
  for (int label : ds.labels) {
    if (std::find(class_order.begin(), class_order.end(), label) == class_order.end()) {
      throw DataError("accuracy: label " + std::to_string(label) + " has no output column");
    }
    by_label[label].label = label;
  }
  const Tensor logits = batched_logits(fn, ds);
  if (logits.dim(1) != class_order.size()) {
    throw ShapeError("accuracy: " + std::to_string(logits.dim(1)) + " outputs for " +
                     std::to_string(class_order.size()) + " mapped classes");
  }
  const auto pred = argmax_rows(logits);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto& entry = by_label[ds.labels[i]];
    ++entry.total;
    if (class_order[pred[i]] == ds.labels[i]) ++entry.correct;
  }
  std::vector<ClassAccuracy> out;
  for (auto& [label, entry] : by_label) out.push_back(entry);
  return out;
}

double accuracy(const LogitFn& fn, const LabeledDataset& ds, const std::vector<int>& class_order) {
  std::size_t correct = 0, total = 0;
  for (const auto& c : per_class_accuracy(fn, ds, class_order)) {
    correct += c.correct;
    total += c.total;
  }
  return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

nlohmann::json AccuracyReport::to_json() const {
  nlohmann::json pc = nlohmann::json::array();
  for (const auto& c : per_class) {
    pc.push_back({{"label", c.label}, {"correct", c.correct}, {"total", c.total}, {"accuracy", c.accuracy()}});
  }
  return {{"ori_acc", ori_acc},     {"tar_acc", tar_acc},     {"avg_acc", avg_acc},
          {"ori_macro", ori_macro}, {"tar_macro", tar_macro}, {"avg_macro", avg_macro},
          {"ori_count", ori_count}, {"tar_count", tar_count}, {"per_class", pc}};
}

AccuracyReport summarize(const std::vector<ClassAccuracy>& per_class, const std::vector<int>& original,
                         const std::vector<int>& cloned) {
  AccuracyReport r;
  r.per_class = per_class;
  std::size_t ori_correct = 0, tar_correct = 0;
  double ori_sum = 0.0, tar_sum = 0.0;
  std::size_t ori_n = 0, tar_n = 0;
  for (const auto& c : per_class) {
    const bool is_ori = std::find(original.begin(), original.end(), c.label) != original.end();
    const bool is_tar = std::find(cloned.begin(), cloned.end(), c.label) != cloned.end();
    if (is_ori) {
      ori_correct += c.correct;
      r.ori_count += c.total;
      ori_sum += c.accuracy();
      ++ori_n;
    } else if (is_tar) {
      tar_correct += c.correct;
      r.tar_count += c.total;
      tar_sum += c.accuracy();
      ++tar_n;
    }
  }
  auto ratio = [](std::size_t a, std::size_t b) { return b ? static_cast<double>(a) / static_cast<double>(b) : 0.0; };
  r.ori_acc = ratio(ori_correct, r.ori_count);
  r.tar_acc = ratio(tar_correct, r.tar_count);
  r.avg_acc = ratio(ori_correct + tar_correct, r.ori_count + r.tar_count);
  r.ori_macro = ori_n ? ori_sum / static_cast<double>(ori_n) : 0.0;
  r.tar_macro = tar_n ? tar_sum / static_cast<double>(tar_n) : 0.0;
  r.avg_macro = ori_n + tar_n ? (ori_sum + tar_sum) / static_cast<double>(ori_n + tar_n) : 0.0;
  return r;
}

AccuracyReport accuracy_report(const LogitFn& fn, const LabeledDataset& test, const std::vector<int>& original,
                               const std::vector<int>& cloned, const std::vector<int>& class_order) {
  std::vector<int> all = original;
  all.insert(all.end(), cloned.begin(), cloned.end());
  return summarize(per_class_accuracy(fn, class_split(test, all, false), class_order), original, cloned);
}

double SimilarityMatrix::diagonal_mean() const {
  if (values.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) s += values[i][i];
  return s / static_cast<double>(values.size());
}

double SimilarityMatrix::off_diagonal_mean() const {
  const std::size_t n = values.size();
  if (n < 2) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i != j) s += values[i][j];
    }
  }
  return s / static_cast<double>(n * (n - 1));
}

nlohmann::json SimilarityMatrix::to_json() const {
  return {{"mode", mode == SimilarityMode::source_source ? "source-source" : "source-module"},
          {"rows", row_labels},
          {"cols", col_labels},
          {"values", values},
          {"diagonal_mean", diagonal_mean()},
          {"off_diagonal_mean", off_diagonal_mean()}};
}

SimilarityMatrix similarity_matrix(const std::vector<LocalModelSet>& source_sets,
                                   const std::vector<LocalModelSet>* module_sets) {
  const std::size_t n = source_sets.size();
  if (n == 0) throw ContractError("similarity_matrix: no local model sets");
  if (module_sets && module_sets->size() != n) {
    throw ContractError("similarity_matrix: " + std::to_string(module_sets->size()) + " module sets for " +
                        std::to_string(n) + " sub-datasets");
  }
  for (const auto& s : source_sets) {
    if (s.classes != source_sets.front().classes) throw ContractError("similarity_matrix: class sets differ");
  }
  if (module_sets) {
    for (const auto& s : *module_sets) {
      if (s.classes != source_sets.front().classes) throw ContractError("similarity_matrix: class sets differ");
    }
  }
  SimilarityMatrix m;
  m.mode = module_sets ? SimilarityMode::source_module : SimilarityMode::source_source;
  m.values.assign(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    m.row_labels.push_back((module_sets ? "module:" : "D") + std::to_string(i));
    m.col_labels.push_back("D" + std::to_string(i));
    for (std::size_t j = 0; j < n; ++j) {
      m.values[i][j] = module_sets ? sim_conditional(source_sets[j], (*module_sets)[i])
                                   : sim_conditional(source_sets[i], source_sets[j]);
    }
  }
  return m;
}

void write_heat_pgm(const SimilarityMatrix& m, const std::filesystem::path& path, std::size_t cell) {
  const std::size_t n = m.size();
  if (n == 0 || cell == 0) throw ContractError("write_heat_pgm: empty matrix");
  const std::size_t side = n * cell;
  std::string pixels(side * side, '\0');
  for (std::size_t y = 0; y < side; ++y) {
    for (std::size_t x = 0; x < side; ++x) {
      const double v = std::clamp(m.values[y / cell][x / cell], 0.0, 1.0);
      pixels[y * side + x] = static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * (1.0 - v))));
    }
  }
  std::ostringstream os;
  os << "P5\n" << side << ' ' << side << "\n255\n" << pixels;
  write_file(path, os.str());
}

SimilarityStudy similarity_study(const NetworkModel& source, const Mnist& data, const RunConfig& config) {
  if (source.num_classes != 10) throw ConfigError("similarity study needs a ten-way source network");
  validate_config(config);
  const PatchGrid grid(config.grid_rows, config.grid_cols, data.train.height, data.train.width);
  const auto masks = gen_masks(grid.patch_count(), config.mask_count, derive_seed(config.seed, "surrogates"));
  std::vector<std::size_t> all(10);
  for (std::size_t i = 0; i < 10; ++i) all[i] = i;
  const auto budgets = config.budgets.empty() ? budgets_for_rate(source, config.budget_rate) : config.budgets;
  const LogitFn source_fn = [&](const Tensor& x) { return forward(source, x); };

  std::vector<LocalModelSet> source_sets, module_sets;
  nlohmann::json per_class = nlohmann::json::array();
  for (int label = 0; label < 10; ++label) {
    const auto tag = "sim/" + std::to_string(label);
    LabeledDataset sub = subsample(class_split(data.train, {label}, false), config.data_fraction,
                                   derive_seed(config.seed, tag + "/data"));
    LabeledDataset anchors;
    anchors.height = sub.height;
    anchors.width = sub.width;
    for (std::size_t i = 0; i < std::min(sub.size(), config.sim_anchors_per_class); ++i) {
      anchors.push_back(sub.image(i), sub.labels[i]);
    }
    source_sets.push_back(fit_set(source_fn, anchors, masks, grid, all, config.ridge_lambda, config.locality_sigma));

    MaskTrainConfig mc;
    mc.steps = config.mask_steps;
    mc.batch_size = config.mask_batch;
    mc.learning_rate = config.mask_lr;
    mc.momentum = config.momentum;
    mc.beta = config.budget_penalty;
    mc.seed = derive_seed(config.seed, tag + "/masks");
    const LocalModelSet own = select_outputs(source_sets.back(), {static_cast<std::size_t>(label)});
    const MaskTrainResult loc = train_masks(source, own, anchors, init_masks(source, budgets), mc);
    const BlockMasks module_masks = binarize_topk(loc.masks).tensors();
    const LogitFn module_fn = [&](const Tensor& x) { return forward(source, x, &module_masks); };
    module_sets.push_back(fit_set(module_fn, anchors, masks, grid, all, config.ridge_lambda, config.locality_sigma));
    per_class.push_back({{"label", label},
                         {"anchors", anchors.size()},
                         {"localization_initial", loc.initial_loss},
                         {"localization_final", loc.final_loss}});
    spdlog::info("similarity: class {} localized ({:.4f} -> {:.4f})", label, loc.initial_loss, loc.final_loss);
  }

  SimilarityStudy study;
  study.source = similarity_matrix(source_sets);
  study.module = similarity_matrix(source_sets, &module_sets);
  study.report = {{"config", to_json(config)},
                  {"source_matrix", study.source.to_json()},
                  {"module_matrix", study.module.to_json()},
                  {"per_class", per_class},
                  {"gap", study.module.diagonal_mean() - study.module.off_diagonal_mean()}};
  return study;
}

std::string SweepResult::csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "axis,value,position,convergence,calibration_loss,ori_acc,tar_acc,avg_acc,ori_macro,tar_macro,avg_macro,packet_bytes\n";
  for (const auto& r : rows) {
    os << (axis == SweepAxis::budget ? "budget" : "position") << ',' << r.value << ',' << r.position << ','
       << r.convergence << ',' << r.calibration_loss << ',' << r.accuracy.ori_acc << ',' << r.accuracy.tar_acc << ',' << r.accuracy.avg_acc << ','
       << r.accuracy.ori_macro << ',' << r.accuracy.tar_macro << ',' << r.accuracy.avg_macro << ',' << r.packet_bytes
       << '\n';
  }
  return os.str();
}

nlohmann::json SweepResult::to_json() const {
  nlohmann::json rows_j = nlohmann::json::array();
  for (const auto& r : rows) {
    rows_j.push_back({{"value", r.value},
                      {"position", r.position},
                      {"convergence", r.convergence},
                      {"calibration_loss", r.calibration_loss},
                      {"packet_bytes", r.packet_bytes},
                      {"accuracy", r.accuracy.to_json()}});
  }
  nlohmann::json j{{"axis", axis == SweepAxis::budget ? "budget" : "position"}, {"rows", rows_j}};
  if (axis == SweepAxis::position) j["argmin_position"] = argmin_position;
  return j;
}

SweepResult sweep(const NetworkModel& target, const NetworkModel& source, const Mnist& data, const RunConfig& config,
                  SweepAxis axis, const std::vector<double>& values) {
  SweepResult result;
  result.axis = axis;
  if (axis == SweepAxis::budget) {
    for (double v : values) {
      if (!(v > 0.0 && v <= 1.0)) throw ConfigError("sweep: budget rate " + std::to_string(v) + " outside (0,1]");
      RunConfig c = config;
      c.budget_rate = v;
      c.budgets.clear();
      const CloneResult run = clone(target, source, data, c);
      SweepRow row;
      row.value = v;
      row.accuracy = run.accuracy;
      row.position = run.model.position;
      for (const auto& rec : run.trace.records) {
        if (rec.position == row.position) {
          row.convergence = rec.fit.convergence;
          row.calibration_loss = rec.fit.calibration_loss;
        }
      }
      row.packet_bytes = run.report.at("packet_bytes").get<std::size_t>();
      result.rows.push_back(std::move(row));
    }
    return result;
  }

  RunConfig c = config;
  c.fixed_position = -1;
  const CloneResult run = clone(target, source, data, c);
  for (double v : values) {
    if (v < 0.0 || v != std::floor(v) || static_cast<std::size_t>(v) >= target.depth()) {
      throw ConfigError("sweep: position " + std::to_string(v) + " outside [0," + std::to_string(target.depth() - 1) +
                        "]");
    }
  }
  for (const auto& rec : run.trace.records) {
    if (!values.empty() &&
        std::find(values.begin(), values.end(), static_cast<double>(rec.position)) == values.end()) {
      continue;
    }
    SweepRow row;
    row.value = static_cast<double>(rec.position);
    row.position = rec.position;
    row.convergence = rec.fit.convergence;
    row.calibration_loss = rec.fit.calibration_loss;
    if (rec.accuracy) row.accuracy = *rec.accuracy;
    row.packet_bytes = serialize_packet(rec.model).size();
    result.rows.push_back(std::move(row));
  }
  result.argmin_position = run.model.position;
  return result;
}

}  // namespace pnc
