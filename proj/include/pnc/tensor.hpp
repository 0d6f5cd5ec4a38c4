#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace pnc {

using Dims = std::vector<std::size_t>;

std::size_t product(const Dims& dims);
std::string dims_str(const Dims& dims);

struct TensorImpl;

// A recorded primitive. Holds its inputs and a closure that scatters the
// output adjoint into them. Released after one backward traversal.
struct Node {
  std::string op;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(std::span<const double> grad_out)> backward;
  bool consumed = false;
};

struct TensorImpl {
  Dims dims;
  std::vector<double> data;
  std::vector<double> grad;  // empty when absent
  bool requires_grad = false;
  std::shared_ptr<Node> grad_fn;
};

/// Dense row-major float64 tensor with optional reverse-mode gradient.
///
/// `Tensor` is a handle: copies share storage. Use `clone()` for a deep copy
/// and `detach()` for a copy cut from the graph.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Dims dims, double fill = 0.0);
  Tensor(Dims dims, std::vector<double> values);

  static Tensor scalar(double v);
  static Tensor from(std::initializer_list<double> values);

  bool defined() const { return impl_ != nullptr; }
  const Dims& dims() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return dims().size(); }
  std::size_t size() const;

  std::span<double> data();
  std::span<const double> data() const;
  const std::vector<double>& values() const;
  double item() const;
  double operator[](std::size_t i) const { return data()[i]; }

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  /// Reverse-mode sweep from this scalar. Populates `grad` on every leaf that
  /// requires it; each graph may be swept once.
  void backward() const;

  Tensor detach() const;
  Tensor clone() const;
  Tensor reshape(Dims dims) const;

  bool is_leaf() const;
  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }
  static Tensor wrap(std::shared_ptr<TensorImpl> impl);

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

bool grad_enabled();

bool bit_equal(const Tensor& a, const Tensor& b);
bool all_finite(std::span<const double> v);

// Primitive operations. All of them record a graph node when grad mode is
// on and any input requires grad.

Tensor matmul(const Tensor& a, const Tensor& b);      // [m,k] x [k,n]
Tensor transpose(const Tensor& a);                    // rank 2
Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t pad = 0);  // stride 1
Tensor maxpool2x2(const Tensor& x);
Tensor adaptive_avg_pool2d(const Tensor& x, std::size_t out_h, std::size_t out_w);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);         // elementwise, same dims
Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);
Tensor add_bias(const Tensor& x, const Tensor& b);    // b broadcast along axis 1
Tensor scale_channels(const Tensor& x, const Tensor& m);  // m broadcast along axis 1
Tensor concat(const std::vector<Tensor>& parts);      // along axis 1
Tensor narrow(const Tensor& x, std::size_t start, std::size_t length);  // axis 1
Tensor select_columns(const Tensor& x, const std::vector<std::size_t>& cols);  // rank 2
Tensor flatten(const Tensor& x);                      // [N, rest]
Tensor softmax(const Tensor& x);                      // rows of a rank-2 tensor
Tensor log_softmax(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_sq(const Tensor& x);

/// KL(softmax(teacher) || softmax(student)) per row, averaged over rows.
/// The teacher is treated as a constant.
Tensor kl_divergence(const Tensor& student_logits, const Tensor& teacher_logits);

/// Mean over rows of -log softmax(logits)[label].
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);

// Raw kernels, exposed for oracles and hot loops.
namespace kernels {
// C[m,n] (+)= A[m,k] * B[k,n]; every C entry sums over k in ascending order.
void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
          std::size_t n, bool accumulate);
void transpose(const double* a, double* out, std::size_t rows, std::size_t cols);
}  // namespace kernels

}  // namespace pnc
