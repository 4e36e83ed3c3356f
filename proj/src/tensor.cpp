#include "panp/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include "panp/rng.hpp"

namespace panp {

namespace detail {

struct Node {
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  TensorImpl* out = nullptr;  // non-owning; the output impl owns this node
  std::function<void(const std::vector<double>&)> run;
};

struct TensorImpl {
  std::vector<size_t> shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;
  std::shared_ptr<Node> node;
};

}  // namespace detail

using detail::Node;
using detail::TensorImpl;

namespace {

thread_local int g_no_grad_depth = 0;

size_t shape_numel(const std::vector<size_t>& shape) {
  size_t n = 1;
  for (size_t d : shape) n *= d;
  return n;
}

std::string shape_to_str(const std::vector<size_t>& shape) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ")";
  return os.str();
}

bool tracked(const TensorImpl& t) { return t.requires_grad || t.node != nullptr; }

std::vector<double>& ensure_grad(TensorImpl& t) {
  if (t.grad.size() != t.data.size()) t.grad.assign(t.data.size(), 0.0);
  return t.grad;
}

/// Attaches a tape node to `out` when recording is on and any input is
/// tracked. The closure receives the output gradient and must accumulate
/// (+=) into the input grads it is responsible for.
void attach(Tensor& out, const std::vector<Tensor>& inputs,
            std::function<void(const std::vector<double>&)> run) {
  if (g_no_grad_depth > 0) return;
  bool any = false;
  for (const auto& t : inputs)
    if (t.defined() && tracked(*t.impl_)) {
      any = true;
      break;
    }
  if (!any) return;
  auto node = std::make_shared<Node>();
  for (const auto& t : inputs)
    if (t.defined()) node->inputs.push_back(t.impl_);
  node->out = out.impl_.get();
  node->run = std::move(run);
  out.impl_->node = node;
  out.impl_->requires_grad = true;
}

void check_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw std::invalid_argument(std::string(op) + ": undefined tensor operand");
}

void check_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2)
    throw std::invalid_argument(std::string(op) + ": expected a rank-2 tensor, got shape " +
                                t.shape_str());
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor::Tensor(std::vector<size_t> shape, bool requires_grad) {
  impl_ = std::make_shared<TensorImpl>();
  impl_->data.assign(shape_numel(shape), 0.0);
  impl_->shape = std::move(shape);
  impl_->requires_grad = requires_grad;
}

Tensor::Tensor(std::vector<size_t> shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != data.size())
    throw std::invalid_argument("Tensor: shape " + shape_to_str(shape) + " needs " +
                                std::to_string(shape_numel(shape)) + " values, got " +
                                std::to_string(data.size()));
  impl_ = std::make_shared<TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({1}, {value}, requires_grad);
}

Tensor Tensor::full(std::vector<size_t> shape, double value, bool requires_grad) {
  Tensor t(std::move(shape), requires_grad);
  std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
  return t;
}

Tensor Tensor::randn(std::vector<size_t> shape, Rng& rng, double stddev, bool requires_grad) {
  Tensor t(std::move(shape), requires_grad);
  for (auto& v : t.impl_->data) v = stddev * rng.gauss();
  return t;
}

const std::vector<size_t>& Tensor::shape() const { return impl_->shape; }
size_t Tensor::rank() const { return impl_->shape.size(); }
size_t Tensor::numel() const { return impl_->data.size(); }

size_t Tensor::rows() const {
  check_rank2(*this, "rows");
  return impl_->shape[0];
}

size_t Tensor::cols() const {
  check_rank2(*this, "cols");
  return impl_->shape[1];
}

std::string Tensor::shape_str() const { return shape_to_str(impl_->shape); }

const std::vector<double>& Tensor::data() const { return impl_->data; }
std::vector<double>& Tensor::data() { return impl_->data; }

double Tensor::value() const {
  if (numel() != 1)
    throw std::invalid_argument("Tensor::value: tensor of shape " + shape_str() +
                                " is not a scalar");
  return impl_->data[0];
}

double Tensor::at(size_t i) const { return impl_->data.at(i); }

double Tensor::at(size_t i, size_t j) const {
  check_rank2(*this, "at");
  return impl_->data.at(i * impl_->shape[1] + j);
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }
void Tensor::set_requires_grad(bool value) { impl_->requires_grad = value; }
bool Tensor::has_grad() const { return impl_ && impl_->grad.size() == impl_->data.size(); }

const std::vector<double>& Tensor::grad() const {
  if (!has_grad())
    throw std::runtime_error("Tensor::grad: no gradient populated for tensor of shape " +
                             shape_str());
  return impl_->grad;
}

void Tensor::zero_grad() { impl_->grad.clear(); }

Tensor Tensor::detach_copy() const {
  return Tensor(impl_->shape, impl_->data, false);
}

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }
bool grad_enabled() { return g_no_grad_depth == 0; }

// ---------------------------------------------------------------------------
// Binary elementwise / broadcast ops
// ---------------------------------------------------------------------------

namespace {

enum class BinKind { Add, Sub, Mul, Div };

// Broadcast layouts: Full (same shape), Row (b is a vector applied to each
// row of matrix a), Scal (b is a single value).
enum class Layout { Full, Row, Scal };

bool rowvec_applies(const Tensor& m, const Tensor& v) {
  return m.rank() == 2 && v.rank() == 1 && m.shape()[1] == v.shape()[0];
}

double apply_kind(BinKind k, double x, double y) {
  switch (k) {
    case BinKind::Add: return x + y;
    case BinKind::Sub: return x - y;
    case BinKind::Mul: return x * y;
    case BinKind::Div: return x / y;
  }
  return 0.0;
}

Tensor binary_core(const Tensor& a, const Tensor& b, BinKind kind, Layout layout,
                   const char* name) {
  const size_t n = a.numel();
  const size_t d = layout == Layout::Row ? a.shape()[1] : 0;
  Tensor out(a.shape());
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.impl_->data.data();
  switch (layout) {
    case Layout::Full:
      for (size_t i = 0; i < n; ++i) po[i] = apply_kind(kind, pa[i], pb[i]);
      break;
    case Layout::Row:
      for (size_t i = 0; i < n; ++i) po[i] = apply_kind(kind, pa[i], pb[i % d]);
      break;
    case Layout::Scal:
      for (size_t i = 0; i < n; ++i) po[i] = apply_kind(kind, pa[i], pb[0]);
      break;
  }
  attach(out, {a, b}, [ai = a.impl_, bi = b.impl_, kind, layout, n, d](const std::vector<double>& g) {
    const double* pa = ai->data.data();
    const double* pb = bi->data.data();
    auto bindex = [layout, d](size_t i) { return layout == Layout::Full ? i
                                          : layout == Layout::Row      ? i % d
                                                                       : size_t{0}; };
    if (tracked(*ai)) {
      auto& ga = ensure_grad(*ai);
      switch (kind) {
        case BinKind::Add:
        case BinKind::Sub:
          for (size_t i = 0; i < n; ++i) ga[i] += g[i];
          break;
        case BinKind::Mul:
          for (size_t i = 0; i < n; ++i) ga[i] += g[i] * pb[bindex(i)];
          break;
        case BinKind::Div:
          for (size_t i = 0; i < n; ++i) ga[i] += g[i] / pb[bindex(i)];
          break;
      }
    }
    if (tracked(*bi)) {
      auto& gb = ensure_grad(*bi);
      switch (kind) {
        case BinKind::Add:
          for (size_t i = 0; i < n; ++i) gb[bindex(i)] += g[i];
          break;
        case BinKind::Sub:
          for (size_t i = 0; i < n; ++i) gb[bindex(i)] -= g[i];
          break;
        case BinKind::Mul:
          for (size_t i = 0; i < n; ++i) gb[bindex(i)] += g[i] * pa[i];
          break;
        case BinKind::Div:
          for (size_t i = 0; i < n; ++i) {
            const double bv = pb[bindex(i)];
            gb[bindex(i)] -= g[i] * pa[i] / (bv * bv);
          }
          break;
      }
    }
  });
  (void)name;
  return out;
}

// a is a single value, b carries the shape (Sub/Div only; Add/Mul commute).
Tensor binary_scalar_lhs(const Tensor& a, const Tensor& b, BinKind kind) {
  const size_t n = b.numel();
  Tensor out(b.shape());
  const double a0 = a.data()[0];
  const double* pb = b.data().data();
  double* po = out.impl_->data.data();
  for (size_t i = 0; i < n; ++i) po[i] = apply_kind(kind, a0, pb[i]);
  attach(out, {a, b}, [ai = a.impl_, bi = b.impl_, kind, n](const std::vector<double>& g) {
    const double a0 = ai->data[0];
    const double* pb = bi->data.data();
    if (tracked(*ai)) {
      auto& ga = ensure_grad(*ai);
      for (size_t i = 0; i < n; ++i)
        ga[0] += kind == BinKind::Sub ? g[i] : g[i] / pb[i];
    }
    if (tracked(*bi)) {
      auto& gb = ensure_grad(*bi);
      for (size_t i = 0; i < n; ++i)
        gb[i] += kind == BinKind::Sub ? -g[i] : -g[i] * a0 / (pb[i] * pb[i]);
    }
  });
  return out;
}

[[noreturn]] void broadcast_error(const char* op, const Tensor& a, const Tensor& b) {
  throw std::invalid_argument(std::string(op) + ": shapes " + a.shape_str() + " and " +
                              b.shape_str() +
                              " do not broadcast (allowed: same shape, scalar, row vector)");
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_defined(a, "add");
  check_defined(b, "add");
  if (a.shape() == b.shape()) return binary_core(a, b, BinKind::Add, Layout::Full, "add");
  if (b.numel() == 1) return binary_core(a, b, BinKind::Add, Layout::Scal, "add");
  if (a.numel() == 1) return binary_core(b, a, BinKind::Add, Layout::Scal, "add");
  if (rowvec_applies(a, b)) return binary_core(a, b, BinKind::Add, Layout::Row, "add");
  if (rowvec_applies(b, a)) return binary_core(b, a, BinKind::Add, Layout::Row, "add");
  broadcast_error("add", a, b);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_defined(a, "sub");
  check_defined(b, "sub");
  if (a.shape() == b.shape()) return binary_core(a, b, BinKind::Sub, Layout::Full, "sub");
  if (b.numel() == 1) return binary_core(a, b, BinKind::Sub, Layout::Scal, "sub");
  if (a.numel() == 1) return binary_scalar_lhs(a, b, BinKind::Sub);
  if (rowvec_applies(a, b)) return binary_core(a, b, BinKind::Sub, Layout::Row, "sub");
  broadcast_error("sub", a, b);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_defined(a, "mul");
  check_defined(b, "mul");
  if (a.shape() == b.shape()) return binary_core(a, b, BinKind::Mul, Layout::Full, "mul");
  if (b.numel() == 1) return binary_core(a, b, BinKind::Mul, Layout::Scal, "mul");
  if (a.numel() == 1) return binary_core(b, a, BinKind::Mul, Layout::Scal, "mul");
  if (rowvec_applies(a, b)) return binary_core(a, b, BinKind::Mul, Layout::Row, "mul");
  if (rowvec_applies(b, a)) return binary_core(b, a, BinKind::Mul, Layout::Row, "mul");
  broadcast_error("mul", a, b);
}

Tensor div(const Tensor& a, const Tensor& b) {
  check_defined(a, "div");
  check_defined(b, "div");
  if (a.shape() == b.shape()) return binary_core(a, b, BinKind::Div, Layout::Full, "div");
  if (b.numel() == 1) return binary_core(a, b, BinKind::Div, Layout::Scal, "div");
  if (a.numel() == 1) return binary_scalar_lhs(a, b, BinKind::Div);
  if (rowvec_applies(a, b)) return binary_core(a, b, BinKind::Div, Layout::Row, "div");
  broadcast_error("div", a, b);
}

Tensor add_scalar(const Tensor& a, double c) {
  check_defined(a, "add_scalar");
  Tensor out(a.shape());
  const size_t n = a.numel();
  for (size_t i = 0; i < n; ++i) out.impl_->data[i] = a.data()[i] + c;
  attach(out, {a}, [ai = a.impl_, n](const std::vector<double>& g) {
    if (!tracked(*ai)) return;
    auto& ga = ensure_grad(*ai);
    for (size_t i = 0; i < n; ++i) ga[i] += g[i];
  });
  return out;
}

Tensor mul_scalar(const Tensor& a, double c) {
  check_defined(a, "mul_scalar");
  Tensor out(a.shape());
  const size_t n = a.numel();
  for (size_t i = 0; i < n; ++i) out.impl_->data[i] = a.data()[i] * c;
  attach(out, {a}, [ai = a.impl_, c, n](const std::vector<double>& g) {
    if (!tracked(*ai)) return;
    auto& ga = ensure_grad(*ai);
    for (size_t i = 0; i < n; ++i) ga[i] += g[i] * c;
  });
  return out;
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_defined(a, "matmul");
  check_defined(b, "matmul");
  check_rank2(a, "matmul");
  check_rank2(b, "matmul");
  const size_t m = a.shape()[0], k = a.shape()[1];
  const size_t k2 = b.shape()[0], n = b.shape()[1];
  if (k != k2)
    throw std::invalid_argument("matmul: inner dimensions disagree for shapes " + a.shape_str() +
                                " and " + b.shape_str());
  Tensor out({m, n});
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.impl_->data.data();
  for (size_t i = 0; i < m; ++i) {
    double* orow = po + i * n;
    for (size_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      const double* brow = pb + p * n;
      for (size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  attach(out, {a, b}, [ai = a.impl_, bi = b.impl_, m, k, n](const std::vector<double>& g) {
    const double* pa = ai->data.data();
    const double* pb = bi->data.data();
    if (tracked(*ai)) {
      auto& ga = ensure_grad(*ai);  // dA = g . B^T
      for (size_t i = 0; i < m; ++i)
        for (size_t p = 0; p < k; ++p) {
          const double* grow = g.data() + i * n;
          const double* brow = pb + p * n;
          double acc = 0.0;
          for (size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          ga[i * k + p] += acc;
        }
    }
    if (tracked(*bi)) {
      auto& gb = ensure_grad(*bi);  // dB = A^T . g
      for (size_t i = 0; i < m; ++i)
        for (size_t p = 0; p < k; ++p) {
          const double av = pa[i * k + p];
          const double* grow = g.data() + i * n;
          double* gbrow = gb.data() + p * n;
          for (size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
        }
    }
  });
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  check_defined(a, "matmul_nt");
  check_defined(b, "matmul_nt");
  check_rank2(a, "matmul_nt");
  check_rank2(b, "matmul_nt");
  const size_t q = a.shape()[0], d = a.shape()[1];
  const size_t n = b.shape()[0], d2 = b.shape()[1];
  if (d != d2)
    throw std::invalid_argument("matmul_nt: trailing dimensions disagree for shapes " +
                                a.shape_str() + " and " + b.shape_str());
  Tensor out({q, n});
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.impl_->data.data();
  for (size_t i = 0; i < q; ++i)
    for (size_t j = 0; j < n; ++j) {
      const double* arow = pa + i * d;
      const double* brow = pb + j * d;
      double acc = 0.0;
      for (size_t p = 0; p < d; ++p) acc += arow[p] * brow[p];
      po[i * n + j] = acc;
    }
  attach(out, {a, b}, [ai = a.impl_, bi = b.impl_, q, d, n](const std::vector<double>& g) {
    const double* pa = ai->data.data();
    const double* pb = bi->data.data();
    if (tracked(*ai)) {
      auto& ga = ensure_grad(*ai);  // dA[i,:] += sum_j g[i,j] * B[j,:]
      for (size_t i = 0; i < q; ++i)
        for (size_t j = 0; j < n; ++j) {
          const double gv = g[i * n + j];
          const double* brow = pb + j * d;
          double* garow = ga.data() + i * d;
          for (size_t p = 0; p < d; ++p) garow[p] += gv * brow[p];
        }
    }
    if (tracked(*bi)) {
      auto& gb = ensure_grad(*bi);  // dB[j,:] += sum_i g[i,j] * A[i,:]
      for (size_t i = 0; i < q; ++i)
        for (size_t j = 0; j < n; ++j) {
          const double gv = g[i * n + j];
          const double* arow = pa + i * d;
          double* gbrow = gb.data() + j * d;
          for (size_t p = 0; p < d; ++p) gbrow[p] += gv * arow[p];
        }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalization
// ---------------------------------------------------------------------------

Tensor softmax(const Tensor& x, size_t axis) {
  check_defined(x, "softmax");
  if (axis >= x.rank())
    throw std::invalid_argument("softmax: axis " + std::to_string(axis) +
                                " out of range for shape " + x.shape_str());
  const auto& shape = x.shape();
  const size_t axis_len = shape[axis];
  size_t outer = 1, inner = 1;
  for (size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  Tensor out(shape);
  const double* px = x.data().data();
  double* po = out.impl_->data.data();
  for (size_t o = 0; o < outer; ++o)
    for (size_t in = 0; in < inner; ++in) {
      const size_t base = o * axis_len * inner + in;
      double m = px[base];
      for (size_t t = 1; t < axis_len; ++t) m = std::max(m, px[base + t * inner]);
      double s = 0.0;
      for (size_t t = 0; t < axis_len; ++t) {
        const double e = std::exp(px[base + t * inner] - m);
        po[base + t * inner] = e;
        s += e;
      }
      const double inv = 1.0 / s;
      for (size_t t = 0; t < axis_len; ++t) po[base + t * inner] *= inv;
    }
  attach(out, {x},
         [xi = x.impl_, oy = out.impl_.get(), outer, inner, axis_len](const std::vector<double>& g) {
           if (!tracked(*xi)) return;
           auto& gx = ensure_grad(*xi);
           const double* py = oy->data.data();
           for (size_t o = 0; o < outer; ++o)
             for (size_t in = 0; in < inner; ++in) {
               const size_t base = o * axis_len * inner + in;
               double dot = 0.0;
               for (size_t t = 0; t < axis_len; ++t)
                 dot += g[base + t * inner] * py[base + t * inner];
               for (size_t t = 0; t < axis_len; ++t) {
                 const size_t idx = base + t * inner;
                 gx[idx] += py[idx] * (g[idx] - dot);
               }
             }
         });
  return out;
}

namespace {

double gauss_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

double gauss_pdf(double x) {
  return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
}

double softplus_val(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid_val(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

}  // namespace

Tensor gelu(const Tensor& x) {
  check_defined(x, "gelu");
  Tensor out(x.shape());
  const size_t n = x.numel();
  for (size_t i = 0; i < n; ++i) {
    const double v = x.data()[i];
    out.impl_->data[i] = v * gauss_cdf(v);
  }
  attach(out, {x}, [xi = x.impl_, n](const std::vector<double>& g) {
    if (!tracked(*xi)) return;
    auto& gx = ensure_grad(*xi);
    for (size_t i = 0; i < n; ++i) {
      const double v = xi->data[i];
      gx[i] += g[i] * (gauss_cdf(v) + v * gauss_pdf(v));
    }
  });
  return out;
}

Tensor softplus(const Tensor& x) {
  check_defined(x, "softplus");
  Tensor out(x.shape());
  const size_t n = x.numel();
  for (size_t i = 0; i < n; ++i) out.impl_->data[i] = softplus_val(x.data()[i]);
  attach(out, {x}, [xi = x.impl_, n](const std::vector<double>& g) {
    if (!tracked(*xi)) return;
    auto& gx = ensure_grad(*xi);
    for (size_t i = 0; i < n; ++i) gx[i] += g[i] * sigmoid_val(xi->data[i]);
  });
  return out;
}

Tensor exp(const Tensor& x) {
  check_defined(x, "exp");
  Tensor out(x.shape());
  const size_t n = x.numel();
  for (size_t i = 0; i < n; ++i) out.impl_->data[i] = std::exp(x.data()[i]);
  attach(out, {x}, [xi = x.impl_, oy = out.impl_.get(), n](const std::vector<double>& g) {
    if (!tracked(*xi)) return;
    auto& gx = ensure_grad(*xi);
    for (size_t i = 0; i < n; ++i) gx[i] += g[i] * oy->data[i];
  });
  return out;
}

Tensor log(const Tensor& x) {
  check_defined(x, "log");
  Tensor out(x.shape());
  const size_t n = x.numel();
  for (size_t i = 0; i < n; ++i) out.impl_->data[i] = std::log(x.data()[i]);
  attach(out, {x}, [xi = x.impl_, n](const std::vector<double>& g) {
    if (!tracked(*xi)) return;
    auto& gx = ensure_grad(*xi);
    for (size_t i = 0; i < n; ++i) gx[i] += g[i] / xi->data[i];
  });
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  check_defined(x, "layer_norm");
  check_defined(gain, "layer_norm");
  check_defined(bias, "layer_norm");
  if (x.rank() == 0) throw std::invalid_argument("layer_norm: empty input");
  const size_t width = x.shape().back();
  if (gain.shape() != std::vector<size_t>{width} || bias.shape() != std::vector<size_t>{width})
    throw std::invalid_argument("layer_norm: gain/bias must have shape (" +
                                std::to_string(width) + "), got " + gain.shape_str() + " and " +
                                bias.shape_str());
  const size_t n_rows = x.numel() / width;
  Tensor out(x.shape());
  // Saved per-row statistics for the backward sweep.
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(n_rows);
  const double* px = x.data().data();
  const double* pg = gain.data().data();
  const double* pbv = bias.data().data();
  double* po = out.impl_->data.data();
  for (size_t r = 0; r < n_rows; ++r) {
    const double* row = px + r * width;
    double mean = 0.0;
    for (size_t j = 0; j < width; ++j) mean += row[j];
    mean /= static_cast<double>(width);
    double var = 0.0;
    for (size_t j = 0; j < width; ++j) {
      const double c = row[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(width);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (size_t j = 0; j < width; ++j) {
      const double xh = (row[j] - mean) * is;
      xhat[r * width + j] = xh;
      po[r * width + j] = xh * pg[j] + pbv[j];
    }
  }
  attach(out, {x, gain, bias},
         [xi = x.impl_, gi = gain.impl_, bi = bias.impl_, xhat = std::move(xhat),
          inv_std = std::move(inv_std), n_rows, width](const std::vector<double>& g) {
           const double* pg = gi->data.data();
           if (tracked(*gi)) {
             auto& gg = ensure_grad(*gi);
             for (size_t r = 0; r < n_rows; ++r)
               for (size_t j = 0; j < width; ++j)
                 gg[j] += g[r * width + j] * xhat[r * width + j];
           }
           if (tracked(*bi)) {
             auto& gb = ensure_grad(*bi);
             for (size_t r = 0; r < n_rows; ++r)
               for (size_t j = 0; j < width; ++j) gb[j] += g[r * width + j];
           }
           if (tracked(*xi)) {
             auto& gx = ensure_grad(*xi);
             const double w = static_cast<double>(width);
             for (size_t r = 0; r < n_rows; ++r) {
               double sum_dxh = 0.0, sum_dxh_xh = 0.0;
               for (size_t j = 0; j < width; ++j) {
                 const double dxh = g[r * width + j] * pg[j];
                 sum_dxh += dxh;
                 sum_dxh_xh += dxh * xhat[r * width + j];
               }
               for (size_t j = 0; j < width; ++j) {
                 const double dxh = g[r * width + j] * pg[j];
                 gx[r * width + j] +=
                     inv_std[r] * (dxh - sum_dxh / w - xhat[r * width + j] * sum_dxh_xh / w);
               }
             }
           }
         });
  return out;
}

// ---------------------------------------------------------------------------
// Reductions and shape ops
// ---------------------------------------------------------------------------

Tensor sum(const Tensor& x) {
  check_defined(x, "sum");
  double s = 0.0;
  for (double v : x.data()) s += v;
  Tensor out = Tensor::scalar(s);
  attach(out, {x}, [xi = x.impl_](const std::vector<double>& g) {
    if (!tracked(*xi)) return;
    auto& gx = ensure_grad(*xi);
    for (auto& v : gx) v += g[0];
  });
  return out;
}

Tensor mean_rows(const Tensor& x) {
  check_defined(x, "mean_rows");
  check_rank2(x, "mean_rows");
  const size_t n = x.shape()[0], d = x.shape()[1];
  Tensor out({d});
  const double* px = x.data().data();
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < d; ++j) out.impl_->data[j] += px[i * d + j];
  const double inv = 1.0 / static_cast<double>(n);
  for (auto& v : out.impl_->data) v *= inv;
  attach(out, {x}, [xi = x.impl_, n, d, inv](const std::vector<double>& g) {
    if (!tracked(*xi)) return;
    auto& gx = ensure_grad(*xi);
    for (size_t i = 0; i < n; ++i)
      for (size_t j = 0; j < d; ++j) gx[i * d + j] += g[j] * inv;
  });
  return out;
}

Tensor repeat_rows(const Tensor& v, size_t n) {
  check_defined(v, "repeat_rows");
  if (v.rank() != 1)
    throw std::invalid_argument("repeat_rows: expected a vector, got shape " + v.shape_str());
  if (n == 0) throw std::invalid_argument("repeat_rows: row count must be positive");
  const size_t d = v.shape()[0];
  Tensor out({n, d});
  for (size_t i = 0; i < n; ++i)
    std::copy(v.data().begin(), v.data().end(), out.impl_->data.begin() + i * d);
  attach(out, {v}, [vi = v.impl_, n, d](const std::vector<double>& g) {
    if (!tracked(*vi)) return;
    auto& gv = ensure_grad(*vi);
    for (size_t i = 0; i < n; ++i)
      for (size_t j = 0; j < d; ++j) gv[j] += g[i * d + j];
  });
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no tensors given");
  size_t n = 0, total = 0;
  for (size_t k = 0; k < parts.size(); ++k) {
    check_defined(parts[k], "concat_cols");
    check_rank2(parts[k], "concat_cols");
    if (k == 0)
      n = parts[k].shape()[0];
    else if (parts[k].shape()[0] != n)
      throw std::invalid_argument("concat_cols: row counts disagree: " + parts[0].shape_str() +
                                  " vs " + parts[k].shape_str());
    total += parts[k].shape()[1];
  }
  Tensor out({n, total});
  std::vector<size_t> offsets(parts.size());
  size_t off = 0;
  for (size_t k = 0; k < parts.size(); ++k) {
    offsets[k] = off;
    const size_t w = parts[k].shape()[1];
    for (size_t i = 0; i < n; ++i)
      std::copy(parts[k].data().begin() + i * w, parts[k].data().begin() + (i + 1) * w,
                out.impl_->data.begin() + i * total + off);
    off += w;
  }
  std::vector<std::shared_ptr<TensorImpl>> impls;
  for (const auto& p : parts) impls.push_back(p.impl_);
  attach(out, parts, [impls, offsets, n, total](const std::vector<double>& g) {
    for (size_t k = 0; k < impls.size(); ++k) {
      if (!tracked(*impls[k])) continue;
      auto& gp = ensure_grad(*impls[k]);
      const size_t w = impls[k]->shape[1];
      for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < w; ++j) gp[i * w + j] += g[i * total + offsets[k] + j];
    }
  });
  return out;
}

Tensor slice_cols(const Tensor& x, size_t c0, size_t c1) {
  check_defined(x, "slice_cols");
  check_rank2(x, "slice_cols");
  const size_t n = x.shape()[0], d = x.shape()[1];
  if (c0 >= c1 || c1 > d)
    throw std::invalid_argument("slice_cols: range [" + std::to_string(c0) + ", " +
                                std::to_string(c1) + ") invalid for shape " + x.shape_str());
  const size_t w = c1 - c0;
  Tensor out({n, w});
  for (size_t i = 0; i < n; ++i)
    std::copy(x.data().begin() + i * d + c0, x.data().begin() + i * d + c1,
              out.impl_->data.begin() + i * w);
  attach(out, {x}, [xi = x.impl_, n, d, c0, w](const std::vector<double>& g) {
    if (!tracked(*xi)) return;
    auto& gx = ensure_grad(*xi);
    for (size_t i = 0; i < n; ++i)
      for (size_t j = 0; j < w; ++j) gx[i * d + c0 + j] += g[i * w + j];
  });
  return out;
}

Tensor reshape(const Tensor& x, std::vector<size_t> shape) {
  check_defined(x, "reshape");
  if (shape_numel(shape) != x.numel())
    throw std::invalid_argument("reshape: cannot view " + x.shape_str() + " as " +
                                shape_to_str(shape));
  Tensor out(std::move(shape), x.data());
  attach(out, {x}, [xi = x.impl_](const std::vector<double>& g) {
    if (!tracked(*xi)) return;
    auto& gx = ensure_grad(*xi);
    for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
  return out;
}

Tensor rows_at(const Tensor& m, const std::vector<size_t>& idx) {
  check_defined(m, "rows_at");
  check_rank2(m, "rows_at");
  const size_t d = m.shape()[1];
  Tensor out({idx.size(), d});
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= m.shape()[0])
      throw std::invalid_argument("rows_at: index " + std::to_string(idx[i]) +
                                  " out of range for shape " + m.shape_str());
    std::copy(m.data().begin() + idx[i] * d, m.data().begin() + (idx[i] + 1) * d,
              out.impl_->data.begin() + i * d);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Backward sweep
// ---------------------------------------------------------------------------

void backward(const Tensor& loss) {
  check_defined(loss, "backward");
  if (loss.numel() != 1)
    throw std::invalid_argument("backward requires a scalar loss, got shape " + loss.shape_str());
  auto root = loss.impl_;
  ensure_grad(*root);
  root->grad[0] = 1.0;
  if (!root->node) return;

  // Iterative post-order DFS over the tape.
  struct Frame {
    std::shared_ptr<Node> node;
    size_t next_child = 0;
  };
  std::vector<std::shared_ptr<Node>> order;
  std::unordered_set<Node*> visited;
  std::vector<Frame> stack;
  stack.push_back({root->node});
  visited.insert(root->node.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_child < f.node->inputs.size()) {
      const auto& child = f.node->inputs[f.next_child++];
      if (child->node && !visited.count(child->node.get())) {
        visited.insert(child->node.get());
        stack.push_back({child->node});
      }
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node& n = **it;
    if (n.out->grad.empty()) continue;  // no gradient reached this branch
    n.run(n.out->grad);
  }

  // Free the tape: models are small, one record per forward pass.
  for (auto& n : order) {
    if (n->out) n->out->node.reset();
    n->inputs.clear();
    n->run = nullptr;
  }
}

// ---------------------------------------------------------------------------
// Finite-difference checking
// ---------------------------------------------------------------------------

double grad_check_params(const std::function<Tensor()>& f, const std::vector<Tensor>& wrt,
                         double h) {
  for (const auto& t : wrt) {
    if (!t.defined()) throw std::invalid_argument("grad_check_params: undefined tensor in wrt");
    t.impl_->grad.clear();
    t.impl_->requires_grad = true;
  }
  Tensor loss = f();
  if (loss.numel() != 1)
    throw std::invalid_argument("grad_check_params: f must be scalar-valued");
  backward(loss);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(wrt.size());
  for (const auto& t : wrt) {
    if (t.has_grad())
      analytic.push_back(t.impl_->grad);
    else
      analytic.emplace_back(t.numel(), 0.0);
  }

  double worst = 0.0;
  NoGradGuard no_grad;
  for (size_t k = 0; k < wrt.size(); ++k) {
    auto& vals = wrt[k].impl_->data;
    for (size_t i = 0; i < vals.size(); ++i) {
      const double saved = vals[i];
      vals[i] = saved + h;
      const double up = f().value();
      vals[i] = saved - h;
      const double down = f().value();
      vals[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[k][i];
      const double rel = std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-8);
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double h) {
  return grad_check_params([&]() { return f(x); }, {x}, h);
}

}  // namespace panp
