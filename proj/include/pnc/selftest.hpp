#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pnc/tensor.hpp"

namespace pnc {

struct CheckResult {
  std::string name;
  double error = 0.0;  // worst relative error observed
  double tolerance = 0.0;
  bool passed() const { return error <= tolerance; }
};

/// Compares reverse-mode gradients of `loss` w.r.t. every entry of `inputs`
/// with central differences. Relative error is |a - n| / max(|a|, |n|, 1e-3).
CheckResult check_gradient(const std::string& name, const std::function<Tensor()>& loss, std::vector<Tensor> inputs,
                           double step = 1e-6, double tolerance = 1e-6);

/// Gradient checks of every primitive and of both training losses on toy
/// instances, plus kernel, ridge and divergence oracles.
std::vector<CheckResult> run_selftest(std::uint64_t seed);

nlohmann::json selftest_json(const std::vector<CheckResult>& results);

}  // namespace pnc
