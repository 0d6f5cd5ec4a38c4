#include "pnc/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_set>

#include "pnc/errors.hpp"

namespace pnc {

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

std::size_t product(const Dims& dims) {
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

std::string dims_str(const Dims& dims) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) os << ',';
    os << dims[i];
  }
  os << ']';
  return os.str();
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

Tensor::Tensor(Dims dims, double fill) : impl_(std::make_shared<TensorImpl>()) {
  for (auto d : dims) {
    if (d == 0) throw ShapeError("tensor: zero extent in " + dims_str(dims));
  }
  impl_->data.assign(product(dims), fill);
  impl_->dims = std::move(dims);
}

Tensor::Tensor(Dims dims, std::vector<double> values) : impl_(std::make_shared<TensorImpl>()) {
  if (product(dims) != values.size()) {
    throw ShapeError("tensor: dims " + dims_str(dims) + " do not match " +
                     std::to_string(values.size()) + " values");
  }
  impl_->dims = std::move(dims);
  impl_->data = std::move(values);
}

Tensor Tensor::scalar(double v) { return Tensor(Dims{}, std::vector<double>{v}); }

Tensor Tensor::from(std::initializer_list<double> values) {
  return Tensor(Dims{values.size()}, std::vector<double>(values));
}

Tensor Tensor::wrap(std::shared_ptr<TensorImpl> impl) {
  Tensor t;
  t.impl_ = std::move(impl);
  return t;
}

const Dims& Tensor::dims() const { return impl_->dims; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= impl_->dims.size()) {
    throw ShapeError("tensor: axis " + std::to_string(axis) + " out of range for " + dims_str(dims()));
  }
  return impl_->dims[axis];
}

std::size_t Tensor::size() const { return impl_->data.size(); }
std::span<double> Tensor::data() { return impl_->data; }
std::span<const double> Tensor::data() const { return impl_->data; }
const std::vector<double>& Tensor::values() const { return impl_->data; }

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item: tensor of dims " + dims_str(dims()) + " is not a scalar");
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  if (!is_leaf()) throw ContractError("set_requires_grad: only leaf tensors can be toggled");
  impl_->requires_grad = on;
  if (!on) impl_->grad.clear();
  return *this;
}

bool Tensor::has_grad() const { return !impl_->grad.empty(); }
std::span<const double> Tensor::grad() const { return impl_->grad; }

std::span<double> Tensor::mutable_grad() {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() { impl_->grad.clear(); }
bool Tensor::is_leaf() const { return impl_->grad_fn == nullptr; }

Tensor Tensor::detach() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->dims = impl_->dims;
  impl->data = impl_->data;
  return wrap(std::move(impl));
}

Tensor Tensor::clone() const {
  Tensor t = detach();
  t.impl_->requires_grad = impl_->requires_grad && is_leaf();
  return t;
}

void Tensor::backward() const {
  if (size() != 1) {
    throw ContractError("backward: loss must be a scalar, got dims " + dims_str(dims()));
  }
  if (!impl_->grad_fn) throw ContractError("backward: loss was not produced by a live graph");
  if (impl_->grad_fn->consumed) {
    throw ContractError("backward: graph already swept; run a new forward pass");
  }

  // Iterative post-order DFS gives a topological order (inputs before outputs).
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> visited;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack{{impl_.get(), 0}};
  visited.insert(impl_.get());
  while (!stack.empty()) {
    auto& [t, next] = stack.back();
    const auto* node = t->grad_fn.get();
    if (node && next < node->inputs.size()) {
      TensorImpl* in = node->inputs[next++].get();
      if (in->requires_grad && !visited.count(in)) {
        visited.insert(in);
        stack.emplace_back(in, 0);
      }
      continue;
    }
    order.push_back(t);
    stack.pop_back();
  }

  impl_->grad.assign(1, 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* t = *it;
    Node* node = t->grad_fn.get();
    if (!node) continue;
    if (node->consumed) throw ContractError("backward: graph node '" + node->op + "' already swept");
    if (!t->grad.empty()) node->backward(t->grad);
    node->consumed = true;
    std::vector<double>().swap(t->grad);
  }
  for (TensorImpl* t : order) {
    if (t->grad_fn) {
      t->grad_fn->backward = nullptr;
      t->grad_fn->inputs.clear();
    }
  }
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.dims() != b.dims()) return false;
  return std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0;
}

bool all_finite(std::span<const double> v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

}  // namespace pnc
