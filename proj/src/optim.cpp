#include "pnc/optim.hpp"

#include "pnc/errors.hpp"

namespace pnc {

void sgd_step(std::vector<Tensor>& params, SgdState& state) {
  if (!(state.learning_rate >= 0.0)) throw ContractError("sgd_step: learning rate must be non-negative");
  if (state.momentum < 0.0 || state.momentum >= 1.0) throw ContractError("sgd_step: momentum must lie in [0,1)");
  for (const auto& p : params) {
    if (!p.has_grad()) throw ContractError("sgd_step: parameter of dims " + dims_str(p.dims()) + " has no gradient");
  }
  for (auto& p : params) {
    auto& v = state.velocity[p.impl().get()];
    if (v.size() != p.size()) v.assign(p.size(), 0.0);
    const auto g = p.grad();
    auto w = p.data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = state.momentum * v[i] + g[i];
      w[i] -= state.learning_rate * v[i];
    }
    p.zero_grad();
  }
}

}  // namespace pnc
