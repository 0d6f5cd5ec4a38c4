#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "pnc/config.hpp"
#include "pnc/errors.hpp"
#include "pnc/eval.hpp"
#include "pnc/graft.hpp"
#include "pnc/packet.hpp"
#include "pnc/selftest.hpp"
#include "pnc/zoo.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;
constexpr int kExitProvenance = 5;

int exit_code_for(const std::string& kind) {
  if (kind == "config") return kExitConfig;
  if (kind == "data" || kind == "format" || kind == "zoo") return kExitData;
  if (kind == "provenance") return kExitProvenance;
  return kExitNumeric;
}

struct Common {
  std::string config_file;
  std::vector<std::string> sets;
  std::optional<std::string> data_dir;
  std::optional<std::uint64_t> seed;
  bool error_json = false;
};

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Defaults, then the config file, then --set overrides, then dedicated flags.
pnc::RunConfig effective_config(const Common& common) {
  pnc::RunConfig config;
  if (!common.config_file.empty()) config = pnc::load_config(common.config_file, config);
  json overlay = json::object();
  for (const auto& kv : common.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw pnc::ConfigError("--set expects key=value, got '" + kv + "'");
    const std::string key = kv.substr(0, eq), text = kv.substr(eq + 1);
    json value = json::parse(text, nullptr, false);
    overlay[key] = value.is_discarded() ? json(text) : value;
  }
  config = pnc::merge_config(config, overlay);
  if (common.data_dir) config.data_dir = *common.data_dir;
  if (common.seed) config.seed = *common.seed;
  pnc::validate_config(config);
  return config;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw pnc::DataError("cannot write " + path.string());
  out << text;
  if (!out) throw pnc::DataError("write failed for " + path.string());
}

/// Report to `path`, or to stdout when no path is given.
void emit(json report, const std::string& command, const std::string& path) {
  report["command"] = command;
  report["timestamp"] = utc_timestamp();
  const std::string text = report.dump(2) + "\n";
  if (path.empty()) {
    std::cout << text;
  } else {
    write_text(path, text);
  }
}

pnc::Mnist load_data(const pnc::RunConfig& config) { return pnc::load_mnist(config.data_dir); }

}  // namespace

int main(int argc, char** argv) {
  auto logger = spdlog::stderr_color_mt("pnc");
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::info);
  if (const char* level = std::getenv("PNC_LOG")) spdlog::set_level(spdlog::level::from_str(level));

  Common common;
  for (int i = 1; i < argc; ++i) {
    if (std::string(argv[i]) == "--error-json") common.error_json = true;
  }
  auto fail = [&](const std::string& kind, const std::string& message, int code) {
    if (common.error_json) {
      std::cout << json{{"error", kind}, {"message", message}, {"exit_code", code}}.dump() << "\n";
    } else {
      std::cerr << "pnc: " << kind << " error: " << message << "\n";
    }
    return code;
  };

  CLI::App app{"Partial network cloning on MNIST"};
  app.require_subcommand(1);
  app.fallthrough();
  app.option_defaults()->always_capture_default();
  app.add_option("--config", common.config_file, "JSON run config")->check(CLI::ExistingFile);
  app.add_option("--set", common.sets, "Config override key=value (value parsed as JSON)");
  app.add_option("--data", common.data_dir, "MNIST IDX directory");
  app.add_option("--seed", common.seed, "Root seed");
  app.add_flag("--error-json", common.error_json, "Print errors as one JSON line on stdout");

  std::string arch = "lenet", classes, out, report, ckpt, target, source, packet, zoo, surrogates, axis = "budget",
              values, pgm;
  bool repair_flag = false;

  auto* pretrain = app.add_subcommand("pretrain", "Train a classifier on a class subset");
  pretrain->add_option("--arch", arch, "lenet | plaincnn | toy");
  pretrain->add_option("--classes", classes, "Class list, e.g. 0-4")->required();
  pretrain->add_option("--out", out, "Checkpoint path")->required();
  pretrain->add_option("--report", report, "Report path");

  auto* surr = app.add_subcommand("surrogates", "Fit the local surrogate set of a source network");
  surr->add_option("--ckpt", ckpt, "Source checkpoint")->required()->check(CLI::ExistingFile);
  surr->add_option("--classes", classes, "Classes to clone");
  surr->add_option("--out", out, "Surrogate set path")->required();
  surr->add_option("--report", report, "Report path");

  auto* clone_cmd = app.add_subcommand("clone", "Clone classes of the source into the target");
  clone_cmd->add_option("--target", target, "Target checkpoint")->required()->check(CLI::ExistingFile);
  clone_cmd->add_option("--source", source, "Source checkpoint")->required()->check(CLI::ExistingFile);
  clone_cmd->add_option("--classes", classes, "Classes to clone");
  clone_cmd->add_option("--surrogates", surrogates, "Precomputed surrogate set")->check(CLI::ExistingFile);
  clone_cmd->add_option("--out", out, "Packet path")->required();
  clone_cmd->add_option("--report", report, "Report path");

  auto* eval_cmd = app.add_subcommand("eval", "Accuracy of a packet or a checkpoint");
  eval_cmd->add_option("--packet", packet, "Clone packet")->check(CLI::ExistingFile);
  eval_cmd->add_option("--zoo", zoo, "Directory holding the packet's checkpoints");
  eval_cmd->add_option("--ckpt", ckpt, "Plain checkpoint")->check(CLI::ExistingFile);
  eval_cmd->add_option("--report", report, "Report path");

  auto* sim = app.add_subcommand("simmatrix", "Similarity matrices of a ten-way source");
  sim->add_option("--source", source, "Ten-way source checkpoint")->required()->check(CLI::ExistingFile);
  sim->add_option("--report", report, "Report path");
  sim->add_option("--pgm", pgm, "Heat image prefix");

  auto* sweep_cmd = app.add_subcommand("sweep", "Budget or position sweep");
  sweep_cmd->add_option("--target", target, "Target checkpoint")->required()->check(CLI::ExistingFile);
  sweep_cmd->add_option("--source", source, "Source checkpoint")->required()->check(CLI::ExistingFile);
  sweep_cmd->add_option("--axis", axis, "budget | position")->check(CLI::IsMember({"budget", "position"}));
  sweep_cmd->add_option("--values", values, "Comma separated axis values");
  sweep_cmd->add_option("--out", out, "CSV path");
  sweep_cmd->add_option("--report", report, "Report path");

  auto* pack_cmd = app.add_subcommand("pack", "Rewrite a packet in canonical form after validation");
  pack_cmd->add_option("--packet", packet, "Input packet")->required()->check(CLI::ExistingFile);
  pack_cmd->add_option("--zoo", zoo, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
  pack_cmd->add_option("--out", out, "Output packet")->required();

  auto* unpack_cmd = app.add_subcommand("unpack", "Attach a packet to its zoo checkpoints");
  unpack_cmd->add_option("--packet", packet, "Packet")->required()->check(CLI::ExistingFile);
  unpack_cmd->add_option("--zoo", zoo, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
  unpack_cmd->add_flag("--repair", repair_flag, "Retrain masks, adapter and head at the packet's R on D_t");
  unpack_cmd->add_option("--out", out, "Packet path for the repaired model");
  unpack_cmd->add_option("--report", report, "Report path");

  auto* detach_cmd = app.add_subcommand("detach", "Recover the pristine target from a packet");
  detach_cmd->add_option("--packet", packet, "Packet")->required()->check(CLI::ExistingFile);
  detach_cmd->add_option("--zoo", zoo, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
  detach_cmd->add_option("--out", out, "Checkpoint path")->required();

  auto* self = app.add_subcommand("selftest", "Gradient checks and oracle comparisons");
  self->add_option("--report", report, "Report path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    return fail("config", e.what(), kExitConfig);
  }

  try {
    pnc::RunConfig config = effective_config(common);

    if (*pretrain) {
      const auto cls = pnc::parse_class_list(classes);
      const pnc::Mnist data = load_data(config);
      const pnc::NetworkModel net = pnc::pretrain(arch, cls, data, config);
      pnc::save_checkpoint(net, out);
      emit({{"config", pnc::to_json(config)},
            {"architecture", arch},
            {"classes", net.meta.classes},
            {"parameters", pnc::parameter_count(net)},
            {"test_accuracy", net.meta.test_accuracy},
            {"checkpoint_digest", pnc::checkpoint_digest(net)}},
           "pretrain", report);
    } else if (*surr) {
      if (!classes.empty()) config.cloned_classes = pnc::parse_class_list(classes);
      const pnc::NetworkModel net = pnc::load_checkpoint(ckpt);
      const pnc::Mnist data = load_data(config);
      const pnc::LabeledDataset anchors = pnc::clone_anchors(data, config);
      const pnc::LocalModelSet set = pnc::clone_surrogates(net, anchors, config);
      pnc::save_surrogates(set, out);
      const pnc::LogitFn fn = [&](const pnc::Tensor& x) { return pnc::forward(net, x); };
      const auto quality =
          pnc::surrogate_quality(set, fn, anchors, config.mask_count, pnc::derive_seed(config.seed, "heldout"));
      emit({{"config", pnc::to_json(config)},
            {"anchors", set.models.size()},
            {"classes", set.classes},
            {"median_fidelity", quality.median_fidelity},
            {"residual_p90", quality.residual_p90}},
           "surrogates", report);
    } else if (*clone_cmd) {
      if (!classes.empty()) config.cloned_classes = pnc::parse_class_list(classes);
      const pnc::NetworkModel t = pnc::load_checkpoint(target);
      const pnc::NetworkModel s = pnc::load_checkpoint(source);
      const pnc::Mnist data = load_data(config);
      std::optional<pnc::LocalModelSet> pre;
      if (!surrogates.empty()) pre = pnc::load_surrogates(surrogates);
      pnc::CloneResult result = pnc::clone(t, s, data, config, pre ? &*pre : nullptr);
      result.model.meta.target_file = fs::path(target).filename().string();
      result.model.meta.source_file = fs::path(source).filename().string();
      result.report["packet_bytes"] = pnc::pack(result.model, out);
      emit(result.report, "clone", report);
    } else if (*eval_cmd) {
      if (packet.empty() == ckpt.empty()) throw pnc::ConfigError("eval needs exactly one of --packet or --ckpt");
      if (!packet.empty()) {
        if (zoo.empty()) throw pnc::ConfigError("eval --packet needs --zoo");
        const pnc::ClonedModel c = pnc::unpack(packet, zoo);
        const pnc::Mnist data = load_data(config);
        const auto acc = pnc::accuracy_report(pnc::cloned_logit_fn(c), data.test, c.original_classes,
                                              c.cloned_classes, c.class_order());
        emit({{"packet", fs::path(packet).filename().string()}, {"position", c.position}, {"accuracy", acc.to_json()}},
             "eval", report);
      } else {
        const pnc::NetworkModel net = pnc::load_checkpoint(ckpt);
        const pnc::Mnist data = load_data(config);
        const pnc::LogitFn fn = [&](const pnc::Tensor& x) { return pnc::forward(net, x); };
        const auto per_class = pnc::per_class_accuracy(
            fn, pnc::class_split(data.test, net.meta.classes, false), net.meta.classes);
        const auto acc = pnc::summarize(per_class, net.meta.classes, {});
        emit({{"checkpoint", fs::path(ckpt).filename().string()},
              {"checkpoint_digest", pnc::checkpoint_digest(net)},
              {"accuracy", acc.to_json()}},
             "eval", report);
      }
    } else if (*sim) {
      const pnc::NetworkModel s = pnc::load_checkpoint(source);
      const pnc::Mnist data = load_data(config);
      const pnc::SimilarityStudy study = pnc::similarity_study(s, data, config);
      if (!pgm.empty()) {
        pnc::write_heat_pgm(study.source, pgm + "_source.pgm");
        pnc::write_heat_pgm(study.module, pgm + "_module.pgm");
      }
      emit(study.report, "simmatrix", report);
    } else if (*sweep_cmd) {
      const pnc::NetworkModel t = pnc::load_checkpoint(target);
      const pnc::NetworkModel s = pnc::load_checkpoint(source);
      const pnc::Mnist data = load_data(config);
      std::vector<double> vals;
      if (values.empty()) {
        if (axis == "budget") vals = {0.25, 0.5, 0.75, 1.0};
      } else {
        std::stringstream ss(values);
        for (std::string item; std::getline(ss, item, ',');) {
          try {
            vals.push_back(std::stod(item));
          } catch (const std::exception&) {
            throw pnc::ConfigError("--values: '" + item + "' is not a number");
          }
        }
      }
      const auto result = pnc::sweep(t, s, data, config, axis == "budget" ? pnc::SweepAxis::budget
                                                                          : pnc::SweepAxis::position, vals);
      if (!out.empty()) write_text(out, result.csv());
      emit({{"config", pnc::to_json(config)}, {"sweep", result.to_json()}}, "sweep", report);
    } else if (*pack_cmd) {
      const pnc::ClonedModel c = pnc::unpack(packet, zoo);
      const std::size_t bytes = pnc::pack(c, out);
      emit({{"packet", out}, {"bytes", bytes}}, "pack", "");
    } else if (*unpack_cmd) {
      pnc::ClonedModel c = pnc::unpack(packet, zoo);
      json r{{"header", pnc::packet_header(pnc::read_file(packet), packet)}};
      if (repair_flag) {
        if (out.empty()) throw pnc::ConfigError("unpack --repair needs --out");
        config.cloned_classes = c.cloned_classes;
        const pnc::Mnist data = load_data(config);
        const pnc::LabeledDataset anchors = pnc::clone_anchors(data, config);
        const pnc::LocalModelSet set = pnc::clone_surrogates(*c.source, anchors, config);
        pnc::InsertionConfig ic = pnc::insertion_config(config);
        ic.teacher = pnc::calibrate_teacher(*c.target, set, anchors, config.teacher_coverage,
                                            config.teacher_mode == "shift" ? pnc::TeacherMode::shift
                                                                           : pnc::TeacherMode::scale);
        const pnc::FitResult fit = pnc::repair(c, set, anchors, ic);
        r["repair"] = {{"initial_loss", fit.initial_loss},
                       {"convergence", fit.convergence},
                       {"calibration_loss", fit.calibration_loss},
                       {"packet_bytes", pnc::pack(c, out)}};
      }
      emit(r, "unpack", report);
    } else if (*detach_cmd) {
      const pnc::ClonedModel c = pnc::unpack(packet, zoo);
      const pnc::NetworkModel t = pnc::detach(c);
      pnc::save_checkpoint(t, out);
      emit({{"checkpoint", out}, {"checkpoint_digest", pnc::checkpoint_digest(t)}}, "detach", "");
    } else if (*self) {
      const auto results = pnc::run_selftest(config.seed);
      emit(pnc::selftest_json(results), "selftest", report);
      for (const auto& r : results) {
        if (!r.passed()) return fail("numeric", "self check '" + r.name + "' failed", kExitNumeric);
      }
    }
  } catch (const pnc::Error& e) {
    return fail(e.kind(), e.what(), exit_code_for(e.kind()));
  } catch (const json::exception& e) {
    return fail("format", e.what(), kExitData);
  } catch (const fs::filesystem_error& e) {
    return fail("data", e.what(), kExitData);
  } catch (const std::exception& e) {
    return fail("internal", e.what(), 1);
  }
  return 0;
}
