#pragma once

#include <span>
#include <vector>

#include "t3/tensor.hpp"

// Differentiable tensor operations. Every op records a backward node when
// any input requires grad and grad mode is on.
namespace t3 {

/// Epsilon added to denominators (div, sqrt backward) and log arguments.
double guard_epsilon();
void set_guard_epsilon(double eps);

// Elementwise binary ops with NumPy-style broadcasting.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);

// Elementwise unary ops.
template <typename T> Tensor<T> scale(const Tensor<T>& x, T factor);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& x, T value);
template <typename T> Tensor<T> power(const Tensor<T>& x, T exponent);
template <typename T> Tensor<T> exp(const Tensor<T>& x);
template <typename T> Tensor<T> log(const Tensor<T>& x);
template <typename T> Tensor<T> sqrt(const Tensor<T>& x);
/// Exact (erf-based) GELU.
template <typename T> Tensor<T> gelu(const Tensor<T>& x);

// Reductions. A negative axis counts from the end.
template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);
template <typename T> Tensor<T> sum(const Tensor<T>& x, int axis, bool keepdim = false);
template <typename T> Tensor<T> mean(const Tensor<T>& x, int axis, bool keepdim = false);
/// Population variance (divides by n).
template <typename T> Tensor<T> variance(const Tensor<T>& x, int axis, bool keepdim = false);

/// Max-subtracted softmax along `axis`.
template <typename T> Tensor<T> softmax(const Tensor<T>& x, int axis);

/// Normalizes the last axis to zero mean / unit variance, then applies
/// `gain` and `bias` (both shaped like the last axis).
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5));
/// Same normalization without the affine part.
template <typename T> Tensor<T> standardize(const Tensor<T>& x, T eps);

/// [..., m, k] x [..., k, n]. Batch dims must match, or one side is 2-D.
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// 3x3 kernel, stride 1, zero padding 1. x: [B,C,H,W], kernel: [O,C,3,3].
template <typename T> Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel);

// Shape manipulation.
template <typename T> Tensor<T> reshape(const Tensor<T>& x, const Shape& shape);
template <typename T> Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& order);
template <typename T> Tensor<T> transpose(const Tensor<T>& x, int axis0, int axis1);
template <typename T> Tensor<T> slice(const Tensor<T>& x, int axis, std::size_t start, std::size_t length);
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis);
template <typename T> Tensor<T> broadcast_to(const Tensor<T>& x, const Shape& shape);
/// x: [B, T, D]; rows[b] lists token indices to take for sample b (all the
/// same length K). Returns [B, K, D].
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<std::vector<std::size_t>>& rows);

// Losses (mean-reduced scalars).
template <typename T> Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels);
template <typename T> Tensor<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target);

template <typename T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T> Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }

/// Converts values between precisions; the result is a detached leaf.
template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& x) {
  std::vector<To> out(x.values().begin(), x.values().end());
  return Tensor<To>(x.shape(), std::move(out));
}

}  // namespace t3
