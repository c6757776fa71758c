#include "rpp/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "rpp/error.hpp"

namespace rpp {

using detail::Node;
using detail::TensorImpl;

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

thread_local std::uint64_t g_next_node_id = 1;
thread_local std::string g_fault_op;
thread_local double g_fault_factor = 1.0;
thread_local bool g_grad_enabled = true;

std::shared_ptr<TensorImpl> new_impl(Shape shape, std::vector<double> data) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return impl;
}

using BackwardFn = std::function<void(std::span<const double>)>;

// Wires `out` into the graph when any input needs a gradient.
Tensor attach(std::shared_ptr<TensorImpl> out, const char* op, std::initializer_list<const Tensor*> inputs,
              BackwardFn fn) {
  bool any = false;
  for (const Tensor* t : inputs) any = any || t->requires_grad();
  if (any && g_grad_enabled) {
    auto node = std::make_shared<Node>();
    node->id = g_next_node_id++;
    node->op = op;
    for (const Tensor* t : inputs) node->inputs.push_back(t->impl_ptr());
    node->backward = std::move(fn);
    out->requires_grad = true;
    out->node = std::move(node);
  }
  return Tensor::wrap(std::move(out));
}

std::size_t norm_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  require(a >= 0 && a < r, ErrorKind::kDimension, "axis " + std::to_string(axis) + " out of range for rank " +
                                                       std::to_string(rank));
  return static_cast<std::size_t>(a);
}

bool is_suffix(const Shape& full, const Shape& tail) {
  if (tail.size() > full.size()) return false;
  return std::equal(tail.begin(), tail.end(), full.end() - static_cast<std::ptrdiff_t>(tail.size()));
}

void require_suffix(const Tensor& a, const Tensor& b, const char* op) {
  require(is_suffix(a.shape(), b.shape()), ErrorKind::kDimension,
          std::string(op) + ": cannot broadcast " + shape_str(b.shape()) + " onto " + shape_str(a.shape()));
}

void require_defined(const Tensor& t, const char* op) {
  require(t.defined(), ErrorKind::kUsage, std::string(op) + ": undefined tensor");
}

}  // namespace

// ---- Tensor ----------------------------------------------------------------

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  auto impl = new_impl(std::move(shape), std::vector<double>(n, value));
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  require(shape_numel(shape) == values.size(), ErrorKind::kDimension,
          "shape " + shape_str(shape) + " does not hold " + std::to_string(values.size()) + " values");
  auto impl = new_impl(std::move(shape), std::move(values));
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

Tensor Tensor::randn(Shape shape, double stddev, std::mt19937_64& rng, bool requires_grad) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = dist(rng);
  return from(std::move(shape), std::move(v), requires_grad);
}

const Shape& Tensor::shape() const {
  require_defined(*this, "shape");
  return impl_->shape;
}

std::size_t Tensor::dim(int axis) const { return shape()[norm_axis(axis, rank())]; }

std::size_t Tensor::numel() const { return impl_ ? impl_->data.size() : 0; }

std::span<const double> Tensor::data() const {
  require_defined(*this, "data");
  return impl_->data;
}

std::span<double> Tensor::mutable_data() {
  require_defined(*this, "mutable_data");
  return impl_->data;
}

double Tensor::item() const {
  require(numel() == 1, ErrorKind::kUsage, "item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
  require(is_leaf(), ErrorKind::kUsage, "requires_grad can only be toggled on leaves");
  impl_->requires_grad = on;
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  require_defined(*this, "grad");
  return impl_->grad;
}

std::span<double> Tensor::mutable_grad() {
  require_defined(*this, "grad");
  return impl_->ensure_grad();
}

void Tensor::zero_grad() {
  if (impl_ && !impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return from(shape(), impl_->data); }

bool Tensor::is_leaf() const { return impl_ && !impl_->node; }

// ---- backward --------------------------------------------------------------

void backward(const Tensor& root) {
  require_defined(root, "backward");
  require(root.numel() == 1, ErrorKind::kUsage, "backward needs a scalar root, got " + shape_str(root.shape()));
  if (!root.requires_grad()) return;

  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> seen;
  std::vector<TensorImpl*> stack{root.impl()};
  seen.insert(root.impl());
  while (!stack.empty()) {
    TensorImpl* t = stack.back();
    stack.pop_back();
    if (!t->node) continue;
    order.push_back(t);
    for (const auto& in : t->node->inputs) {
      if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in.get());
    }
  }
  std::sort(order.begin(), order.end(), [](TensorImpl* a, TensorImpl* b) { return a->node->id > b->node->id; });

  for (TensorImpl* t : order) t->grad.assign(t->data.size(), 0.0);
  root.impl()->ensure_grad()[0] += 1.0;

  std::vector<double> faulty;
  for (TensorImpl* t : order) {
    std::span<const double> g = t->grad;
    if (!g_fault_op.empty() && t->node->op == g_fault_op) {
      faulty.assign(g.begin(), g.end());
      for (double& v : faulty) v *= g_fault_factor;
      g = faulty;
    }
    t->node->backward(g);
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void zero_grads(std::span<Tensor> tensors) {
  for (Tensor& t : tensors) t.zero_grad();
}

void set_backward_fault(std::string op, double factor) {
  g_fault_op = std::move(op);
  g_fault_factor = factor;
}

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_suffix(a, b, "add");
  const auto& ad = a.data();
  const auto& bd = b.data();
  const std::size_t nb = bd.size();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] + bd[i % nb];
  TensorImpl* ai = a.impl();
  TensorImpl* bi = b.impl();
  return attach(new_impl(a.shape(), std::move(out)), "add", {&a, &b}, [ai, bi, nb](std::span<const double> g) {
    if (ai->requires_grad) {
      auto ga = ai->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (bi->requires_grad) {
      auto gb = bi->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % nb] += g[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

Tensor mul(const Tensor& a, const Tensor& b) {
  require_suffix(a, b, "mul");
  const auto& ad = a.data();
  const auto& bd = b.data();
  const std::size_t nb = bd.size();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] * bd[i % nb];
  TensorImpl* ai = a.impl();
  TensorImpl* bi = b.impl();
  return attach(new_impl(a.shape(), std::move(out)), "mul", {&a, &b}, [ai, bi, nb](std::span<const double> g) {
    if (ai->requires_grad) {
      auto ga = ai->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bi->data[i % nb];
    }
    if (bi->requires_grad) {
      auto gb = bi->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % nb] += g[i] * ai->data[i];
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v *= s;
  TensorImpl* ai = a.impl();
  return attach(new_impl(a.shape(), std::move(out)), "scale", {&a}, [ai, s](std::span<const double> g) {
    auto ga = ai->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

Tensor add_scalar(const Tensor& a, double s) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v += s;
  TensorImpl* ai = a.impl();
  return attach(new_impl(a.shape(), std::move(out)), "add_scalar", {&a}, [ai](std::span<const double> g) {
    auto ga = ai->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Tensor exp(const Tensor& x) {
  std::vector<double> out(x.numel());
  const auto& xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(xd[i]);
  auto impl = new_impl(x.shape(), std::move(out));
  TensorImpl* xi = x.impl();
  TensorImpl* oi = impl.get();
  return attach(std::move(impl), "exp", {&x}, [xi, oi](std::span<const double> g) {
    auto gx = xi->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * oi->data[i];
  });
}

Tensor log(const Tensor& x, double floor) {
  std::vector<double> out(x.numel());
  const auto& xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    require(xd[i] > 0.0 || floor > 0.0, ErrorKind::kNumeric, "log of non-positive value without floor");
    out[i] = std::log(std::max(xd[i], floor));
  }
  TensorImpl* xi = x.impl();
  return attach(new_impl(x.shape(), std::move(out)), "log", {&x}, [xi, floor](std::span<const double> g) {
    auto gx = xi->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xi->data[i] > floor) gx[i] += g[i] / xi->data[i];
    }
  });
}

Tensor gelu(const Tensor& x) {
  std::vector<double> out(x.numel());
  const auto& xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 0.5 * xd[i] * (1.0 + std::erf(xd[i] * std::numbers::sqrt2 / 2.0));
  TensorImpl* xi = x.impl();
  return attach(new_impl(x.shape(), std::move(out)), "gelu", {&x}, [xi](std::span<const double> g) {
    auto gx = xi->ensure_grad();
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xi->data[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      gx[i] += g[i] * (cdf + v * pdf);
    }
  });
}

// ---- matmul ----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() >= 2 && b.rank() >= 2, ErrorKind::kDimension,
          "matmul needs rank >= 2, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const std::size_t m = a.dim(-2), k = a.dim(-1), k2 = b.dim(-2), n = b.dim(-1);
  const Shape abatch(a.shape().begin(), a.shape().end() - 2);
  const Shape bbatch(b.shape().begin(), b.shape().end() - 2);
  require(k == k2 && (abatch == bbatch || abatch.empty() || bbatch.empty()), ErrorKind::kDimension,
          "matmul shape mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));

  Shape out_shape = abatch.empty() ? bbatch : abatch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  const std::size_t batches = shape_numel(abatch.empty() ? bbatch : abatch);
  const auto rows = static_cast<Eigen::Index>(m), inner = static_cast<Eigen::Index>(k),
             cols = static_cast<Eigen::Index>(n);

  std::vector<double> out(batches * m * n, 0.0);
  const bool b_shared = bbatch.empty();
  const bool a_shared = abatch.empty() && !bbatch.empty();
  if (b_shared) {
    // Fold every batch of a into one tall GEMM.
    const auto tall = static_cast<Eigen::Index>(batches * m);
    MutMap(out.data(), tall, cols).noalias() =
        ConstMap(a.data().data(), tall, inner) * ConstMap(b.data().data(), inner, cols);
  } else {
    for (std::size_t i = 0; i < batches; ++i) {
      const double* ap = a.data().data() + (a_shared ? 0 : i * m * k);
      const double* bp = b.data().data() + i * k * n;
      MutMap(out.data() + i * m * n, rows, cols).noalias() = ConstMap(ap, rows, inner) * ConstMap(bp, inner, cols);
    }
  }

  TensorImpl* ai = a.impl();
  TensorImpl* bi = b.impl();
  return attach(new_impl(std::move(out_shape), std::move(out)), "matmul", {&a, &b},
                [=](std::span<const double> g) {
                  if (b_shared) {
                    const auto tall = static_cast<Eigen::Index>(batches * m);
                    ConstMap gm(g.data(), tall, cols);
                    if (ai->requires_grad) {
                      MutMap(ai->ensure_grad().data(), tall, inner).noalias() +=
                          gm * ConstMap(bi->data.data(), inner, cols).transpose();
                    }
                    if (bi->requires_grad) {
                      MutMap(bi->ensure_grad().data(), inner, cols).noalias() +=
                          ConstMap(ai->data.data(), tall, inner).transpose() * gm;
                    }
                    return;
                  }
                  for (std::size_t i = 0; i < batches; ++i) {
                    ConstMap gm(g.data() + i * m * n, rows, cols);
                    const std::size_t aoff = a_shared ? 0 : i * m * k;
                    const std::size_t boff = i * k * n;
                    if (ai->requires_grad) {
                      MutMap(ai->ensure_grad().data() + aoff, rows, inner).noalias() +=
                          gm * ConstMap(bi->data.data() + boff, inner, cols).transpose();
                    }
                    if (bi->requires_grad) {
                      MutMap(bi->ensure_grad().data() + boff, inner, cols).noalias() +=
                          ConstMap(ai->data.data() + aoff, rows, inner).transpose() * gm;
                    }
                  }
                });
}

Tensor transpose(const Tensor& a) {
  require(a.rank() >= 2, ErrorKind::kDimension, "transpose needs rank >= 2");
  const std::size_t r = a.dim(-2), c = a.dim(-1);
  const std::size_t batches = a.numel() / (r * c);
  Shape out_shape = a.shape();
  std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
  std::vector<double> out(a.numel());
  const auto& ad = a.data();
  for (std::size_t bt = 0; bt < batches; ++bt)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[bt * r * c + j * r + i] = ad[bt * r * c + i * c + j];
  TensorImpl* ai = a.impl();
  return attach(new_impl(std::move(out_shape), std::move(out)), "transpose", {&a},
                [ai, r, c, batches](std::span<const double> g) {
                  auto ga = ai->ensure_grad();
                  for (std::size_t bt = 0; bt < batches; ++bt)
                    for (std::size_t i = 0; i < r; ++i)
                      for (std::size_t j = 0; j < c; ++j) ga[bt * r * c + i * c + j] += g[bt * r * c + j * r + i];
                });
}

// ---- row-wise ops ----------------------------------------------------------

Tensor softmax(const Tensor& x) {
  require(x.rank() >= 1 && x.dim(-1) >= 1, ErrorKind::kDimension, "softmax over empty axis");
  const std::size_t n = x.dim(-1);
  const std::size_t rows = x.numel() / n;
  const auto& xd = x.data();
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xd.data() + r * n;
    double* o = out.data() + r * n;
    const double mx = *std::max_element(in, in + n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) total += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < n; ++j) o[j] /= total;
  }
  auto impl = new_impl(x.shape(), std::move(out));
  TensorImpl* xi = x.impl();
  TensorImpl* oi = impl.get();
  return attach(std::move(impl), "softmax", {&x}, [xi, oi, n, rows](std::span<const double> g) {
    auto gx = xi->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = oi->data.data() + r * n;
      const double* gr = g.data() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += gr[j] * y[j];
      for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += y[j] * (gr[j] - dot);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t d = x.dim(-1);
  require(d >= 1 && gamma.shape() == Shape{d} && beta.shape() == Shape{d}, ErrorKind::kDimension,
          "layer_norm: x " + shape_str(x.shape()) + ", gamma " + shape_str(gamma.shape()) + ", beta " +
              shape_str(beta.shape()));
  require(eps > 0.0, ErrorKind::kConfig, "layer_norm eps must be positive");
  const std::size_t rows = x.numel() / d;
  const auto& xd = x.data();
  const auto& gd = gamma.data();
  const auto& bd = beta.data();
  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xd.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += in[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(d);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (in[j] - mu) * rstd[r];
      xhat[r * d + j] = h;
      out[r * d + j] = h * gd[j] + bd[j];
    }
  }
  TensorImpl* xi = x.impl();
  TensorImpl* gi = gamma.impl();
  TensorImpl* bi = beta.impl();
  return attach(new_impl(x.shape(), std::move(out)), "layer_norm", {&x, &gamma, &beta},
                [=, xhat = std::move(xhat), rstd = std::move(rstd)](std::span<const double> g) {
                  const double inv_d = 1.0 / static_cast<double>(d);
                  for (std::size_t r = 0; r < rows; ++r) {
                    const double* gr = g.data() + r * d;
                    const double* h = xhat.data() + r * d;
                    if (gi->requires_grad) {
                      auto gg = gi->ensure_grad();
                      for (std::size_t j = 0; j < d; ++j) gg[j] += gr[j] * h[j];
                    }
                    if (bi->requires_grad) {
                      auto gb = bi->ensure_grad();
                      for (std::size_t j = 0; j < d; ++j) gb[j] += gr[j];
                    }
                    if (xi->requires_grad) {
                      auto gx = xi->ensure_grad();
                      double mean_dh = 0.0, mean_dh_h = 0.0;
                      for (std::size_t j = 0; j < d; ++j) {
                        const double dh = gr[j] * gi->data[j];
                        mean_dh += dh;
                        mean_dh_h += dh * h[j];
                      }
                      mean_dh *= inv_d;
                      mean_dh_h *= inv_d;
                      for (std::size_t j = 0; j < d; ++j) {
                        const double dh = gr[j] * gi->data[j];
                        gx[r * d + j] += rstd[r] * (dh - mean_dh - h[j] * mean_dh_h);
                      }
                    }
                  }
                });
}

Tensor l2_normalize(const Tensor& x) {
  const std::size_t d = x.dim(-1);
  const std::size_t rows = x.numel() / d;
  const auto& xd = x.data();
  std::vector<double> out(x.numel());
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) ss += xd[r * d + j] * xd[r * d + j];
    norms[r] = std::sqrt(ss);
    require(norms[r] > 0.0, ErrorKind::kNumeric, "l2_normalize of a zero vector");
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xd[r * d + j] / norms[r];
  }
  auto impl = new_impl(x.shape(), std::move(out));
  TensorImpl* xi = x.impl();
  TensorImpl* oi = impl.get();
  return attach(std::move(impl), "l2_normalize", {&x},
                [xi, oi, d, rows, norms = std::move(norms)](std::span<const double> g) {
                  auto gx = xi->ensure_grad();
                  for (std::size_t r = 0; r < rows; ++r) {
                    const double* y = oi->data.data() + r * d;
                    const double* gr = g.data() + r * d;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < d; ++j) dot += y[j] * gr[j];
                    for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += (gr[j] - y[j] * dot) / norms[r];
                  }
                });
}

// ---- reductions ------------------------------------------------------------

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  TensorImpl* xi = x.impl();
  return attach(new_impl({1}, {total}), "sum", {&x}, [xi](std::span<const double> g) {
    auto gx = xi->ensure_grad();
    for (double& v : gx) v += g[0];
  });
}

Tensor mean(const Tensor& x) {
  require(x.numel() > 0, ErrorKind::kDimension, "mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor sum_last(const Tensor& x) {
  const std::size_t n = x.dim(-1);
  const std::size_t rows = x.numel() / n;
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  if (out_shape.empty()) out_shape = {1};
  std::vector<double> out(rows, 0.0);
  const auto& xd = x.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r] += xd[r * n + j];
  TensorImpl* xi = x.impl();
  return attach(new_impl(std::move(out_shape), std::move(out)), "sum_last", {&x},
                [xi, n, rows](std::span<const double> g) {
                  auto gx = xi->ensure_grad();
                  for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += g[r];
                });
}

// ---- structural ------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
  require(shape_numel(shape) == x.numel(), ErrorKind::kDimension,
          "reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  TensorImpl* xi = x.impl();
  return attach(new_impl(std::move(shape), std::vector<double>(x.data().begin(), x.data().end())), "reshape", {&x},
                [xi](std::span<const double> g) {
                  auto gx = xi->ensure_grad();
                  for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  require(!parts.empty(), ErrorKind::kUsage, "concat of nothing");
  const std::size_t ax = norm_axis(axis, parts[0].rank());
  Shape out_shape = parts[0].shape();
  out_shape[ax] = 0;
  for (const Tensor& p : parts) {
    Shape s = p.shape();
    require(s.size() == out_shape.size(), ErrorKind::kDimension, "concat rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      require(i == ax || s[i] == parts[0].shape()[i], ErrorKind::kDimension,
              "concat shape mismatch: " + shape_str(s) + " vs " + shape_str(parts[0].shape()));
    }
    out_shape[ax] += s[ax];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= out_shape[i];
  for (std::size_t i = ax + 1; i < out_shape.size(); ++i) inner *= out_shape[i];
  const std::size_t out_row = out_shape[ax] * inner;

  std::vector<double> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    offsets.push_back(off);
    const std::size_t row = p.shape()[ax] * inner;
    const auto& pd = p.data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(pd.data() + o * row, row, out.data() + o * out_row + off);
    off += row;
  }

  auto impl = new_impl(std::move(out_shape), std::move(out));
  bool any = false;
  for (const Tensor& p : parts) any = any || p.requires_grad();
  if (!any || !g_grad_enabled) return Tensor::wrap(std::move(impl));

  std::vector<TensorImpl*> ins;
  for (const Tensor& p : parts) ins.push_back(p.impl());
  auto node = std::make_shared<Node>();
  node->id = g_next_node_id++;
  node->op = "concat";
  for (const Tensor& p : parts) node->inputs.push_back(p.impl_ptr());
  node->backward = [ins, offsets, outer, out_row, inner, ax](std::span<const double> g) {
    for (std::size_t pi = 0; pi < ins.size(); ++pi) {
      if (!ins[pi]->requires_grad) continue;
      auto gp = ins[pi]->ensure_grad();
      const std::size_t row = ins[pi]->shape[ax] * inner;
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < row; ++j) gp[o * row + j] += g[o * out_row + offsets[pi] + j];
    }
  };
  impl->requires_grad = true;
  impl->node = std::move(node);
  return Tensor::wrap(std::move(impl));
}

Tensor slice(const Tensor& x, int axis, std::size_t start, std::size_t length) {
  const std::size_t ax = norm_axis(axis, x.rank());
  require(start + length <= x.shape()[ax], ErrorKind::kDimension,
          "slice [" + std::to_string(start) + ", " + std::to_string(start + length) + ") out of " +
              shape_str(x.shape()));
  Shape out_shape = x.shape();
  out_shape[ax] = length;
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= out_shape[i];
  for (std::size_t i = ax + 1; i < out_shape.size(); ++i) inner *= out_shape[i];
  const std::size_t in_row = x.shape()[ax] * inner, out_row = length * inner, off = start * inner;
  std::vector<double> out(outer * out_row);
  const auto& xd = x.data();
  for (std::size_t o = 0; o < outer; ++o) std::copy_n(xd.data() + o * in_row + off, out_row, out.data() + o * out_row);
  TensorImpl* xi = x.impl();
  return attach(new_impl(std::move(out_shape), std::move(out)), "slice", {&x},
                [=](std::span<const double> g) {
                  auto gx = xi->ensure_grad();
                  for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t j = 0; j < out_row; ++j) gx[o * in_row + off + j] += g[o * out_row + j];
                });
}

Tensor replace_rows(const Tensor& x, std::size_t start, const Tensor& prompt) {
  require(x.rank() >= 2 && prompt.rank() == 2 && prompt.dim(-1) == x.dim(-1) &&
              start + prompt.dim(0) <= x.dim(-2),
          ErrorKind::kDimension,
          "replace_rows: prompt " + shape_str(prompt.shape()) + " at row " + std::to_string(start) + " of " +
              shape_str(x.shape()));
  const std::size_t seq = x.dim(-2), d = x.dim(-1), m = prompt.dim(0);
  const std::size_t batches = x.numel() / (seq * d);
  std::vector<double> out(x.data().begin(), x.data().end());
  const auto& pd = prompt.data();
  for (std::size_t b = 0; b < batches; ++b) std::copy(pd.begin(), pd.end(), out.begin() + (b * seq + start) * d);
  TensorImpl* xi = x.impl();
  TensorImpl* pi = prompt.impl();
  return attach(new_impl(x.shape(), std::move(out)), "replace_rows", {&x, &prompt},
                [=](std::span<const double> g) {
                  if (xi->requires_grad) {
                    auto gx = xi->ensure_grad();
                    for (std::size_t b = 0; b < batches; ++b)
                      for (std::size_t s = 0; s < seq; ++s) {
                        if (s >= start && s < start + m) continue;
                        for (std::size_t j = 0; j < d; ++j) gx[(b * seq + s) * d + j] += g[(b * seq + s) * d + j];
                      }
                  }
                  if (pi->requires_grad) {
                    auto gp = pi->ensure_grad();
                    for (std::size_t b = 0; b < batches; ++b)
                      for (std::size_t i = 0; i < m * d; ++i) gp[i] += g[(b * seq + start) * d + i];
                  }
                });
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  require(table.rank() == 2, ErrorKind::kDimension, "embedding table must be rank 2");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<double> out(ids.size() * d);
  const auto& td = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] >= 0 && static_cast<std::size_t>(ids[i]) < vocab, ErrorKind::kInput,
            "token id " + std::to_string(ids[i]) + " outside vocab of " + std::to_string(vocab));
    std::copy_n(td.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  TensorImpl* ti = table.impl();
  std::vector<int> idx(ids.begin(), ids.end());
  return attach(new_impl({ids.size(), d}, std::move(out)), "embedding", {&table},
                [ti, d, idx = std::move(idx)](std::span<const double> g) {
                  auto gt = ti->ensure_grad();
                  for (std::size_t i = 0; i < idx.size(); ++i)
                    for (std::size_t j = 0; j < d; ++j) gt[static_cast<std::size_t>(idx[i]) * d + j] += g[i * d + j];
                });
}

Tensor gather_columns(const Tensor& x, std::span<const int> index, std::size_t k) {
  require(x.rank() == 2 && index.size() == x.dim(0) * k, ErrorKind::kDimension,
          "gather_columns: " + std::to_string(index.size()) + " indices for " + shape_str(x.shape()) + " x " +
              std::to_string(k));
  const std::size_t n = x.dim(0), u = x.dim(1);
  std::vector<double> out(n * k);
  const auto& xd = x.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      const int c = index[i * k + j];
      require(c >= 0 && static_cast<std::size_t>(c) < u, ErrorKind::kDimension,
              "gather_columns index " + std::to_string(c) + " out of " + std::to_string(u));
      out[i * k + j] = xd[i * u + static_cast<std::size_t>(c)];
    }
  TensorImpl* xi = x.impl();
  std::vector<int> idx(index.begin(), index.end());
  return attach(new_impl({n, k}, std::move(out)), "gather_columns", {&x},
                [xi, n, u, k, idx = std::move(idx)](std::span<const double> g) {
                  auto gx = xi->ensure_grad();
                  for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < k; ++j) gx[i * u + static_cast<std::size_t>(idx[i * k + j])] += g[i * k + j];
                });
}

Tensor pick(const Tensor& x, std::span<const int> index) {
  require(x.rank() == 2 && x.dim(0) == index.size(), ErrorKind::kDimension,
          "pick: " + std::to_string(index.size()) + " indices for " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), k = x.dim(1);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    require(index[i] >= 0 && static_cast<std::size_t>(index[i]) < k, ErrorKind::kDimension,
            "pick index " + std::to_string(index[i]) + " out of " + std::to_string(k));
    out[i] = x.data()[i * k + static_cast<std::size_t>(index[i])];
  }
  TensorImpl* xi = x.impl();
  std::vector<int> idx(index.begin(), index.end());
  return attach(new_impl({n}, std::move(out)), "pick", {&x}, [xi, k, idx = std::move(idx)](std::span<const double> g) {
    auto gx = xi->ensure_grad();
    for (std::size_t i = 0; i < idx.size(); ++i) gx[i * k + static_cast<std::size_t>(idx[i])] += g[i];
  });
}

Tensor split_heads(const Tensor& x, std::size_t heads) {
  require(x.rank() == 3 && heads > 0 && x.dim(2) % heads == 0, ErrorKind::kDimension,
          "split_heads: " + shape_str(x.shape()) + " into " + std::to_string(heads) + " heads");
  const std::size_t b = x.dim(0), s = x.dim(1), dh = x.dim(2) / heads, d = x.dim(2);
  std::vector<double> out(x.numel());
  const auto& xd = x.data();
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t si = 0; si < s; ++si)
      for (std::size_t h = 0; h < heads; ++h)
        std::copy_n(xd.data() + (bi * s + si) * d + h * dh, dh, out.data() + ((bi * heads + h) * s + si) * dh);
  TensorImpl* xi = x.impl();
  return attach(new_impl({b, heads, s, dh}, std::move(out)), "split_heads", {&x}, [=](std::span<const double> g) {
    auto gx = xi->ensure_grad();
    for (std::size_t bi = 0; bi < b; ++bi)
      for (std::size_t si = 0; si < s; ++si)
        for (std::size_t h = 0; h < heads; ++h)
          for (std::size_t j = 0; j < dh; ++j)
            gx[(bi * s + si) * d + h * dh + j] += g[((bi * heads + h) * s + si) * dh + j];
  });
}

Tensor merge_heads(const Tensor& x) {
  require(x.rank() == 4, ErrorKind::kDimension, "merge_heads needs [B, h, S, dh], got " + shape_str(x.shape()));
  const std::size_t b = x.dim(0), heads = x.dim(1), s = x.dim(2), dh = x.dim(3), d = heads * dh;
  std::vector<double> out(x.numel());
  const auto& xd = x.data();
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t si = 0; si < s; ++si)
        std::copy_n(xd.data() + ((bi * heads + h) * s + si) * dh, dh, out.data() + (bi * s + si) * d + h * dh);
  TensorImpl* xi = x.impl();
  return attach(new_impl({b, s, d}, std::move(out)), "merge_heads", {&x}, [=](std::span<const double> g) {
    auto gx = xi->ensure_grad();
    for (std::size_t bi = 0; bi < b; ++bi)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t si = 0; si < s; ++si)
          for (std::size_t j = 0; j < dh; ++j)
            gx[((bi * heads + h) * s + si) * dh + j] += g[(bi * s + si) * d + h * dh + j];
  });
}

}  // namespace rpp
