#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "pnc/config.hpp"
#include "pnc/data.hpp"
#include "pnc/model.hpp"

namespace pnc {

/// Trains `arch` from scratch on `classes` (outputs in ascending label order)
/// and records its test accuracy in the checkpoint metadata.
NetworkModel pretrain(const std::string& arch, const std::vector<int>& classes, const Mnist& data,
                      const RunConfig& config);

/// Loads `path` when it holds a checkpoint of `arch` over `classes`,
/// otherwise pretrains and saves it there.
NetworkModel load_or_pretrain(const std::filesystem::path& path, const std::string& arch,
                              const std::vector<int>& classes, const Mnist& data, const RunConfig& config);

}  // namespace pnc
