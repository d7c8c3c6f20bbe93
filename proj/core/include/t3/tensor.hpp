#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace t3 {

using Shape = std::vector<std::size_t>;

/// Thrown on any shape or rank disagreement between operands.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
struct TensorImpl;

/// One recorded operation in the backward graph. `backward_fn` reads the
/// output's gradient and accumulates into the gradients of `inputs`.
template <typename T>
struct GraphNode {
  std::string op_name;
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  std::function<void(TensorImpl<T>& out)> backward_fn;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::shared_ptr<GraphNode<T>> node;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

/// Dense row-major n-d array with reverse-mode autodiff.
///
/// A Tensor is a cheap handle; copies alias the same storage. Use `clone()`
/// for a deep copy and `detach()` for a graph-free alias of the values.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);
  explicit Tensor(std::shared_ptr<TensorImpl<T>> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(const Shape& shape);
  static Tensor ones(const Shape& shape);
  static Tensor full(const Shape& shape, T value);
  static Tensor scalar(T value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  std::vector<T>& values() { return impl_->data; }
  const std::vector<T>& values() const { return impl_->data; }

  bool has_grad() const { return impl_->grad.size() == impl_->data.size() && !impl_->data.empty(); }
  std::span<T> grad() { return impl_->grad; }
  std::span<const T> grad() const { return impl_->grad; }
  void zero_grad();

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on = true);
  bool is_leaf() const { return impl_->node == nullptr; }
  std::string op_name() const { return impl_->node ? impl_->node->op_name : std::string(); }

  T item() const;
  T at(std::initializer_list<std::size_t> index) const;

  /// Reverse sweep from this scalar. Leaf gradients accumulate across calls.
  void backward() const;

  Tensor detach() const;
  Tensor clone() const;

  const std::shared_ptr<TensorImpl<T>>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

struct InitScheme {
  enum class Kind { kZeros, kOnes, kTruncatedNormal, kUniform };
  Kind kind = Kind::kZeros;
  double a = 0.0;  // std for truncated normal, lower bound for uniform
  double b = 0.0;  // upper bound for uniform

  static InitScheme zeros() { return {Kind::kZeros}; }
  static InitScheme ones() { return {Kind::kOnes}; }
  static InitScheme truncated_normal(double std) { return {Kind::kTruncatedNormal, std}; }
  static InitScheme uniform(double lo, double hi) { return {Kind::kUniform, lo, hi}; }
};

/// Deterministic for a fixed seed. Truncated normal resamples beyond 2 std.
template <typename T>
Tensor<T> init_tensor(const Shape& shape, const InitScheme& scheme, std::uint64_t seed);

/// splitmix64 finalizer; used to derive independent sub-seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt);
std::uint64_t hash_name(std::string_view name);

}  // namespace t3
