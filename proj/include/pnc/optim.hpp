#pragma once

#include <unordered_map>
#include <vector>

#include "pnc/tensor.hpp"

namespace pnc {

/// SGD with heavy-ball momentum; velocity buffers are keyed by parameter storage.
struct SgdState {
  double learning_rate = 0.01;
  double momentum = 0.0;
  std::unordered_map<const TensorImpl*, std::vector<double>> velocity;
};

/// v <- momentum * v + grad; p <- p - lr * v; grads are cleared afterwards.
/// Throws ContractError when a parameter carries no gradient.
void sgd_step(std::vector<Tensor>& params, SgdState& state);

}  // namespace pnc
