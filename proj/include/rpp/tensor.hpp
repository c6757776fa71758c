#pragma once

// Dense float64 tensors with tape-free reverse-mode autodiff.
//
// Every op that has at least one input with requires_grad() produces a
// result carrying a graph node. Nodes are numbered in creation order, so
// backward() replays them in exact reverse insertion order without an
// explicit tape object.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace rpp {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct TensorImpl;
}

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value);
  static Tensor randn(Shape shape, double stddev, std::mt19937_64& rng, bool requires_grad = false);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(int axis) const;  // negative axes count from the end
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const double> data() const;
  // Direct writes are only meaningful on leaves (parameters, inputs).
  std::span<double> mutable_data();
  double item() const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  // Copy of the values, cut from the graph.
  Tensor detach() const;
  bool is_leaf() const;

  detail::TensorImpl* impl() const noexcept { return impl_.get(); }
  const std::shared_ptr<detail::TensorImpl>& impl_ptr() const noexcept { return impl_; }
  static Tensor wrap(std::shared_ptr<detail::TensorImpl> impl) { return Tensor(std::move(impl)); }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;
};

namespace detail {

struct Node {
  std::uint64_t id = 0;
  std::string op;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  // Receives d(root)/d(output) and accumulates into inputs.
  std::function<void(std::span<const double>)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::shared_ptr<Node> node;  // null for leaves

  std::span<double> ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

// Runs reverse-mode accumulation from a scalar root. Leaf gradients
// accumulate across calls; intermediate gradients are reset each call.
void backward(const Tensor& root);

// While alive, ops on this thread build no graph (evaluation mode).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Zeroes the grad slot of each tensor.
void zero_grads(std::span<Tensor> tensors);

// Test-only hook: scales the upstream gradient handed to every node whose
// op name equals `op` (empty string disables). Used as a negative control
// for gradient checking.
void set_backward_fault(std::string op, double factor = 1.1);

// ---- ops -----------------------------------------------------------------

// b's shape must equal a's shape or a trailing suffix of it.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

// [.., m, k] x [.., k, n]; batch dims equal, or one side has none.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);  // swaps the last two axes

Tensor softmax(const Tensor& x);  // last axis, max-subtracted
Tensor exp(const Tensor& x);
// log(max(x, floor)); zero gradient where the floor is active.
Tensor log(const Tensor& x, double floor = 0.0);
Tensor gelu(const Tensor& x);  // exact erf form
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
Tensor l2_normalize(const Tensor& x);  // last axis

Tensor sum(const Tensor& x);   // -> scalar
Tensor mean(const Tensor& x);  // -> scalar
Tensor sum_last(const Tensor& x);  // [.., n] -> [..]

Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, std::size_t start, std::size_t length);

// Rep(X, P): rows [start, start+M) of the second-to-last axis replaced by
// `prompt` [M, d], broadcast across leading dims.
Tensor replace_rows(const Tensor& x, std::size_t start, const Tensor& prompt);

// Row gather: table [V, d], ids -> [ids.size(), d].
Tensor embedding(const Tensor& table, std::span<const int> ids);
// x [N, U], `index` laid out [N, k] -> [N, k] with out[i][j] = x[i][index[i*k+j]].
Tensor gather_columns(const Tensor& x, std::span<const int> index, std::size_t k);
// x [N, K], one index per row -> [N].
Tensor pick(const Tensor& x, std::span<const int> index);

// [B, S, h*dh] <-> [B, h, S, dh]
Tensor split_heads(const Tensor& x, std::size_t heads);
Tensor merge_heads(const Tensor& x);

}  // namespace rpp
