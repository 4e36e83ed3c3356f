#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace panp {

class Rng;

namespace detail {
struct TensorImpl;
struct Node;
}  // namespace detail

/// Dense row-major tensor of 64-bit floats with optional reverse-mode
/// gradient recording. Handles share storage; values are written at
/// construction and only grad buffers mutate afterwards. The computation
/// record behind an expression is freed by backward().
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<size_t> shape, bool requires_grad = false);
  Tensor(std::vector<size_t> shape, std::vector<double> data, bool requires_grad = false);

  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor full(std::vector<size_t> shape, double value, bool requires_grad = false);
  static Tensor randn(std::vector<size_t> shape, Rng& rng, double stddev = 1.0,
                      bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<size_t>& shape() const;
  size_t rank() const;
  size_t numel() const;
  size_t rows() const;  // rank-2 only
  size_t cols() const;  // rank-2 only
  std::string shape_str() const;

  const std::vector<double>& data() const;
  std::vector<double>& data();
  double value() const;  // requires numel() == 1
  double at(size_t i) const;
  double at(size_t i, size_t j) const;

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool has_grad() const;
  const std::vector<double>& grad() const;  // throws if no grad was populated
  void zero_grad();

  /// Value-only copy: fresh storage, no grad, no tape node.
  Tensor detach_copy() const;

  // Shared handle; internal, exposed for the op implementations.
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Disables tape recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_enabled();

// Elementwise / broadcast arithmetic. Broadcasting is limited to
// scalar <-> tensor and a trailing-axis vector against matrix rows;
// anything else is a shape error.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);

Tensor matmul(const Tensor& a, const Tensor& b);     // [m x k] . [k x n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [q x d] . [n x d]^T -> [q x n]

Tensor softmax(const Tensor& x, size_t axis);
Tensor gelu(const Tensor& x);      // exact erf form x * Phi(x)
Tensor softplus(const Tensor& x);  // log(1 + exp(x)), overflow-safe
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

Tensor sum(const Tensor& x);                  // full reduction -> scalar
Tensor mean_rows(const Tensor& x);            // [n x d] -> [d]
Tensor repeat_rows(const Tensor& v, size_t n);  // [d] -> [n x d]
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& x, size_t c0, size_t c1);  // half-open column range
Tensor reshape(const Tensor& x, std::vector<size_t> shape);

/// Gather rows of a rank-2 tensor as a fresh constant (no gradient flow).
Tensor rows_at(const Tensor& m, const std::vector<size_t>& idx);

/// Reverse-topological sweep from a scalar loss. Gradients accumulate
/// additively across fan-out; the tape behind the loss is freed afterwards.
void backward(const Tensor& loss);

/// Max over elements of |analytic - central difference| /
/// (|analytic| + |central| + 1e-8) for a scalar-valued f of one tensor.
double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double h = 1e-5);

/// Same relative-error measure, taken over every element of every tensor in
/// `wrt` for a scalar-valued closure that reads them. The closure must be
/// deterministic (reseed any sampling internally).
double grad_check_params(const std::function<Tensor()>& f, const std::vector<Tensor>& wrt,
                         double h = 1e-5);

}  // namespace panp
