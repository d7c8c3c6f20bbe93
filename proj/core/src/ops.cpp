#include "t3/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace t3 {

namespace {

double g_guard_eps = 1e-12;

template <typename T>
using BackwardFn = std::function<void(TensorImpl<T>&)>;

template <typename T>
Tensor<T> make_output(Shape shape, std::vector<T> data, const char* op,
                      std::initializer_list<const Tensor<T>*> inputs, BackwardFn<T> backward) {
  Tensor<T> out(std::move(shape), std::move(data));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto* in : inputs) any = any || in->requires_grad();
  if (!any) return out;
  auto node = std::make_shared<GraphNode<T>>();
  node->op_name = op;
  for (const auto* in : inputs) node->inputs.push_back(in->impl());
  node->backward_fn = std::move(backward);
  out.impl()->node = std::move(node);
  out.impl()->requires_grad = true;
  return out;
}

std::size_t norm_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

// ---- broadcasting ----------------------------------------------------------

enum class BMode { kSame, kScalarB, kScalarA, kSuffixB, kSuffixA, kGeneral };

struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> stride_a, stride_b;  // aligned to `out`, 0 where broadcast
  BMode mode = BMode::kGeneral;
  std::size_t na = 1, nb = 1;
};

std::vector<std::size_t> aligned_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  const std::size_t off = out.size() - in.size();
  for (std::size_t i = in.size(); i-- > 0;) {
    strides[i + off] = in[i] == 1 ? 0 : stride;
    stride *= in[i];
  }
  return strides;
}

bool is_suffix(const Shape& small, const Shape& big) {
  std::size_t lead = 0;
  while (lead < small.size() && small[lead] == 1) ++lead;
  const std::size_t len = small.size() - lead;
  if (len > big.size()) return false;
  return std::equal(small.begin() + lead, small.end(), big.end() - len);
}

BroadcastPlan plan_broadcast(const Shape& a, const Shape& b) {
  BroadcastPlan p;
  const std::size_t rank = std::max(a.size(), b.size());
  p.out.assign(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("shapes " + shape_str(a) + " and " + shape_str(b) + " do not broadcast");
    }
    p.out[i] = std::max(da, db);
  }
  p.na = shape_numel(a);
  p.nb = shape_numel(b);
  p.stride_a = aligned_strides(a, p.out);
  p.stride_b = aligned_strides(b, p.out);
  const std::size_t nout = shape_numel(p.out);
  if (p.na == nout && p.nb == nout) {
    p.mode = BMode::kSame;
  } else if (p.nb == 1 && p.na == nout) {
    p.mode = BMode::kScalarB;
  } else if (p.na == 1 && p.nb == nout) {
    p.mode = BMode::kScalarA;
  } else if (p.na == nout && is_suffix(b, p.out)) {
    p.mode = BMode::kSuffixB;
  } else if (p.nb == nout && is_suffix(a, p.out)) {
    p.mode = BMode::kSuffixA;
  }
  return p;
}

// Calls f(i_out, i_a, i_b) for every output element.
template <typename F>
void visit(const BroadcastPlan& p, F&& f) {
  const std::size_t n = shape_numel(p.out);
  switch (p.mode) {
    case BMode::kSame:
      for (std::size_t i = 0; i < n; ++i) f(i, i, i);
      return;
    case BMode::kScalarB:
      for (std::size_t i = 0; i < n; ++i) f(i, i, std::size_t{0});
      return;
    case BMode::kScalarA:
      for (std::size_t i = 0; i < n; ++i) f(i, std::size_t{0}, i);
      return;
    case BMode::kSuffixB:
      for (std::size_t i = 0; i < n;) {
        for (std::size_t j = 0; j < p.nb; ++j, ++i) f(i, i, j);
      }
      return;
    case BMode::kSuffixA:
      for (std::size_t i = 0; i < n;) {
        for (std::size_t j = 0; j < p.na; ++j, ++i) f(i, j, i);
      }
      return;
    case BMode::kGeneral:
      break;
  }
  const std::size_t rank = p.out.size();
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < n; ++i) {
    f(i, ia, ib);
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      ia += p.stride_a[d];
      ib += p.stride_b[d];
      if (idx[d] < p.out[d]) break;
      ia -= p.stride_a[d] * p.out[d];
      ib -= p.stride_b[d] * p.out[d];
      idx[d] = 0;
    }
  }
}

template <typename T, typename Fwd, typename Da, typename Db>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, const char* name, Fwd fwd, Da da, Db db) {
  auto plan = std::make_shared<BroadcastPlan>(plan_broadcast(a.shape(), b.shape()));
  std::vector<T> out(shape_numel(plan->out));
  const auto& av = a.values();
  const auto& bv = b.values();
  visit(*plan, [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = fwd(av[ia], bv[ib]); });
  auto ai = a.impl();
  auto bi = b.impl();
  return make_output<T>(plan->out, std::move(out), name, {&a, &b},
                        [ai, bi, plan, da, db](TensorImpl<T>& o) {
                          const auto& g = o.grad;
                          const auto& x = ai->data;
                          const auto& y = bi->data;
                          if (ai->requires_grad) {
                            ai->ensure_grad();
                            auto& gx = ai->grad;
                            visit(*plan, [&](std::size_t i, std::size_t ia, std::size_t ib) {
                              gx[ia] += g[i] * da(x[ia], y[ib]);
                            });
                          }
                          if (bi->requires_grad) {
                            bi->ensure_grad();
                            auto& gy = bi->grad;
                            visit(*plan, [&](std::size_t i, std::size_t ia, std::size_t ib) {
                              gy[ib] += g[i] * db(x[ia], y[ib]);
                            });
                          }
                        });
}

// dfn(x, y) gives dy/dx from input x and output y.
template <typename T, typename Fwd, typename Dfn>
Tensor<T> unary_op(const Tensor<T>& x, const char* name, Fwd fwd, Dfn dfn) {
  const auto& xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  auto xi = x.impl();
  return make_output<T>(x.shape(), std::move(out), name, {&x}, [xi, dfn](TensorImpl<T>& o) {
    xi->ensure_grad();
    const auto& g = o.grad;
    for (std::size_t i = 0; i < g.size(); ++i) xi->grad[i] += g[i] * dfn(xi->data[i], o.data[i]);
  });
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

}  // namespace

double guard_epsilon() { return g_guard_eps; }
void set_guard_epsilon(double eps) {
  if (!(eps >= 0)) throw std::invalid_argument("guard epsilon must be >= 0");
  g_guard_eps = eps;
}

// ---- elementwise binary ----------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  const T eps = static_cast<T>(g_guard_eps);
  return binary_op<T>(
      a, b, "div", [eps](T x, T y) { return x / (y + eps); }, [eps](T, T y) { return T(1) / (y + eps); },
      [eps](T x, T y) { return -x / ((y + eps) * (y + eps)); });
}

// ---- elementwise unary -----------------------------------------------------

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return unary_op<T>(
      x, "scale", [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T value) {
  return unary_op<T>(
      x, "add_scalar", [value](T v) { return v + value; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> power(const Tensor<T>& x, T exponent) {
  return unary_op<T>(
      x, "power", [exponent](T v) { return std::pow(v, exponent); },
      [exponent](T v, T) { return exponent * std::pow(v, exponent - T(1)); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return unary_op<T>(
      x, "exp", [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  const T eps = static_cast<T>(g_guard_eps);
  return unary_op<T>(
      x, "log", [eps](T v) { return std::log(v + eps); }, [eps](T v, T) { return T(1) / (v + eps); });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& x) {
  const T eps = static_cast<T>(g_guard_eps);
  return unary_op<T>(
      x, "sqrt", [](T v) { return std::sqrt(v); }, [eps](T, T y) { return T(0.5) / (y + eps); });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T kInvSqrt2 = static_cast<T>(0.70710678118654752440);
  constexpr T kInvSqrt2Pi = static_cast<T>(0.39894228040143267794);
  return unary_op<T>(
      x, "gelu", [](T v) { return T(0.5) * v * (T(1) + std::erf(v * kInvSqrt2)); },
      [](T v, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(v * kInvSqrt2));
        return cdf + v * kInvSqrt2Pi * std::exp(T(-0.5) * v * v);
      });
}

// ---- reductions ------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.values()) s += v;
  auto xi = x.impl();
  return make_output<T>(Shape{1}, {s}, "sum", {&x}, [xi](TensorImpl<T>& o) {
    xi->ensure_grad();
    for (auto& g : xi->grad) g += o.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

namespace {
Shape reduced_shape(const Shape& s, std::size_t axis, bool keepdim) {
  Shape out = s;
  if (keepdim) {
    out[axis] = 1;
  } else {
    out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
    if (out.empty()) out.push_back(1);
  }
  return out;
}
}  // namespace

template <typename T>
Tensor<T> sum(const Tensor<T>& x, int axis, bool keepdim) {
  const std::size_t ax = norm_axis(axis, x.rank());
  const AxisSplit sp = split_at(x.shape(), ax);
  std::vector<T> out(sp.outer * sp.inner, T(0));
  const auto& xv = x.values();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t k = 0; k < sp.n; ++k) {
      const T* src = xv.data() + (o * sp.n + k) * sp.inner;
      T* dst = out.data() + o * sp.inner;
      for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
    }
  auto xi = x.impl();
  return make_output<T>(reduced_shape(x.shape(), ax, keepdim), std::move(out), "sum_axis", {&x},
                        [xi, sp](TensorImpl<T>& o) {
                          xi->ensure_grad();
                          for (std::size_t a = 0; a < sp.outer; ++a)
                            for (std::size_t k = 0; k < sp.n; ++k) {
                              T* dst = xi->grad.data() + (a * sp.n + k) * sp.inner;
                              const T* g = o.grad.data() + a * sp.inner;
                              for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += g[i];
                            }
                        });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x, int axis, bool keepdim) {
  const std::size_t ax = norm_axis(axis, x.rank());
  return scale(sum(x, axis, keepdim), T(1) / static_cast<T>(x.dim(ax)));
}

template <typename T>
Tensor<T> variance(const Tensor<T>& x, int axis, bool keepdim) {
  Tensor<T> centered = sub(x, mean(x, axis, true));
  return mean(mul(centered, centered), axis, keepdim);
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const std::size_t ax = norm_axis(axis, x.rank());
  const AxisSplit sp = split_at(x.shape(), ax);
  const auto& xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.n * sp.inner + i;
      T mx = xv[base];
      for (std::size_t k = 1; k < sp.n; ++k) mx = std::max(mx, xv[base + k * sp.inner]);
      T total = 0;
      for (std::size_t k = 0; k < sp.n; ++k) {
        const T e = std::exp(xv[base + k * sp.inner] - mx);
        out[base + k * sp.inner] = e;
        total += e;
      }
      const T inv = T(1) / total;
      for (std::size_t k = 0; k < sp.n; ++k) out[base + k * sp.inner] *= inv;
    }
  auto xi = x.impl();
  return make_output<T>(x.shape(), std::move(out), "softmax", {&x}, [xi, sp](TensorImpl<T>& o) {
    xi->ensure_grad();
    const auto& y = o.data;
    const auto& g = o.grad;
    for (std::size_t a = 0; a < sp.outer; ++a)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = a * sp.n * sp.inner + i;
        T dot = 0;
        for (std::size_t k = 0; k < sp.n; ++k) dot += g[base + k * sp.inner] * y[base + k * sp.inner];
        for (std::size_t k = 0; k < sp.n; ++k) {
          const std::size_t j = base + k * sp.inner;
          xi->grad[j] += y[j] * (g[j] - dot);
        }
      }
  });
}

// ---- normalization ---------------------------------------------------------

namespace {

template <typename T>
struct RowStats {
  std::vector<T> xhat;
  std::vector<T> rstd;
};

template <typename T>
std::shared_ptr<RowStats<T>> row_standardize(const std::vector<T>& x, std::size_t rows, std::size_t width, T eps) {
  auto st = std::make_shared<RowStats<T>>();
  st->xhat.resize(x.size());
  st->rstd.resize(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = x.data() + r * width;
    // Shifted by the first element, so a constant row has an exact mean.
    T mu = 0;
    for (std::size_t i = 0; i < width; ++i) mu += src[i] - src[0];
    mu = src[0] + mu / static_cast<T>(width);
    T var = 0;
    for (std::size_t i = 0; i < width; ++i) var += (src[i] - mu) * (src[i] - mu);
    var /= static_cast<T>(width);
    const T rstd = T(1) / std::sqrt(var + eps);
    st->rstd[r] = rstd;
    T* dst = st->xhat.data() + r * width;
    for (std::size_t i = 0; i < width; ++i) dst[i] = (src[i] - mu) * rstd;
  }
  return st;
}

// dx = rstd * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat)) per row.
template <typename T>
void row_standardize_backward(const RowStats<T>& st, const T* dxhat, T* dx, std::size_t r, std::size_t width) {
  const T* xh = st.xhat.data() + r * width;
  T m1 = 0, m2 = 0;
  for (std::size_t i = 0; i < width; ++i) {
    m1 += dxhat[i];
    m2 += dxhat[i] * xh[i];
  }
  m1 /= static_cast<T>(width);
  m2 /= static_cast<T>(width);
  const T rstd = st.rstd[r];
  for (std::size_t i = 0; i < width; ++i) dx[i] += rstd * (dxhat[i] - m1 - xh[i] * m2);
}

}  // namespace

template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  const std::size_t width = x.shape().back();
  if (gain.numel() != width || bias.numel() != width) {
    throw ShapeError("layernorm affine shapes " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                     " do not match last dim of " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / width;
  auto st = row_standardize(x.values(), rows, width, eps);
  std::vector<T> out(x.numel());
  const auto& gv = gain.values();
  const auto& bv = bias.values();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < width; ++i) out[r * width + i] = st->xhat[r * width + i] * gv[i] + bv[i];
  auto xi = x.impl();
  auto gi = gain.impl();
  auto bi = bias.impl();
  return make_output<T>(x.shape(), std::move(out), "layernorm", {&x, &gain, &bias},
                        [xi, gi, bi, st, rows, width](TensorImpl<T>& o) {
                          const auto& g = o.grad;
                          if (gi->requires_grad || bi->requires_grad) {
                            gi->ensure_grad();
                            bi->ensure_grad();
                            for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t i = 0; i < width; ++i) {
                                gi->grad[i] += g[r * width + i] * st->xhat[r * width + i];
                                bi->grad[i] += g[r * width + i];
                              }
                          }
                          if (xi->requires_grad) {
                            xi->ensure_grad();
                            std::vector<T> dxhat(width);
                            for (std::size_t r = 0; r < rows; ++r) {
                              for (std::size_t i = 0; i < width; ++i) dxhat[i] = g[r * width + i] * gi->data[i];
                              row_standardize_backward(*st, dxhat.data(), xi->grad.data() + r * width, r, width);
                            }
                          }
                        });
}

template <typename T>
Tensor<T> standardize(const Tensor<T>& x, T eps) {
  const std::size_t width = x.shape().back();
  const std::size_t rows = x.numel() / width;
  auto st = row_standardize(x.values(), rows, width, eps);
  auto xi = x.impl();
  return make_output<T>(x.shape(), st->xhat, "standardize", {&x}, [xi, st, rows, width](TensorImpl<T>& o) {
    xi->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r)
      row_standardize_backward(*st, o.grad.data() + r * width, xi->grad.data() + r * width, r, width);
  });
}

// ---- matmul ----------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError("matmul needs rank >= 2 operands, got " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.shape()[a.rank() - 2];
  const std::size_t k = a.shape().back();
  const std::size_t kb = b.shape()[b.rank() - 2];
  const std::size_t n = b.shape().back();
  if (k != kb) {
    throw ShapeError("matmul inner dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  const Shape batch_b(b.shape().begin(), b.shape().end() - 2);
  // Three layouts: b is a plain matrix (rows of a fold into m), a is a plain
  // matrix, or both carry identical batch dims.
  enum class Layout { kFoldA, kBroadcastA, kBatched } layout;
  Shape out_shape;
  std::size_t batches = 1;
  std::size_t rows = m;
  if (batch_b.empty()) {
    layout = Layout::kFoldA;
    rows = a.numel() / k;
    out_shape = a.shape();
    out_shape.back() = n;
  } else if (batch_a.empty()) {
    layout = Layout::kBroadcastA;
    batches = shape_numel(batch_b);
    out_shape = batch_b;
    out_shape.push_back(m);
    out_shape.push_back(n);
  } else {
    if (batch_a != batch_b) {
      throw ShapeError("matmul batch dims differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    layout = Layout::kBatched;
    batches = shape_numel(batch_a);
    out_shape = batch_a;
    out_shape.push_back(m);
    out_shape.push_back(n);
  }
  std::vector<T> out(shape_numel(out_shape));
  const std::size_t sa = layout == Layout::kBroadcastA ? 0 : rows * k;
  const std::size_t sb = layout == Layout::kFoldA ? 0 : k * n;
  const std::size_t so = rows * n;
  const T* ap = a.values().data();
  const T* bp = b.values().data();
  for (std::size_t i = 0; i < batches; ++i) {
    MapMat<T>(out.data() + i * so, rows, n).noalias() =
        CMapMat<T>(ap + i * sa, rows, k) * CMapMat<T>(bp + i * sb, k, n);
  }
  auto ai = a.impl();
  auto bi = b.impl();
  return make_output<T>(out_shape, std::move(out), "matmul", {&a, &b},
                        [ai, bi, batches, rows, k, n, sa, sb, so](TensorImpl<T>& o) {
                          if (ai->requires_grad) ai->ensure_grad();
                          if (bi->requires_grad) bi->ensure_grad();
                          for (std::size_t i = 0; i < batches; ++i) {
                            CMapMat<T> g(o.grad.data() + i * so, rows, n);
                            if (ai->requires_grad) {
                              MapMat<T>(ai->grad.data() + i * sa, rows, k).noalias() +=
                                  g * CMapMat<T>(bi->data.data() + i * sb, k, n).transpose();
                            }
                            if (bi->requires_grad) {
                              MapMat<T>(bi->grad.data() + i * sb, k, n).noalias() +=
                                  CMapMat<T>(ai->data.data() + i * sa, rows, k).transpose() * g;
                            }
                          }
                        });
}

// ---- conv2d ----------------------------------------------------------------

namespace {

// cols: [C*9, H*W]
template <typename T>
void im2col(const T* x, std::size_t c, std::size_t h, std::size_t w, T* cols) {
  for (std::size_t ch = 0; ch < c; ++ch)
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        T* dst = cols + ((ch * 3 + static_cast<std::size_t>(ky)) * 3 + static_cast<std::size_t>(kx)) * h * w;
        for (std::size_t y = 0; y < h; ++y) {
          const long sy = static_cast<long>(y) + ky - 1;
          for (std::size_t xx = 0; xx < w; ++xx) {
            const long sx = static_cast<long>(xx) + kx - 1;
            const bool inside = sy >= 0 && sx >= 0 && sy < static_cast<long>(h) && sx < static_cast<long>(w);
            dst[y * w + xx] = inside ? x[(ch * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)] : T(0);
          }
        }
      }
}

template <typename T>
void col2im_add(const T* cols, std::size_t c, std::size_t h, std::size_t w, T* dx) {
  for (std::size_t ch = 0; ch < c; ++ch)
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        const T* src = cols + ((ch * 3 + static_cast<std::size_t>(ky)) * 3 + static_cast<std::size_t>(kx)) * h * w;
        for (std::size_t y = 0; y < h; ++y) {
          const long sy = static_cast<long>(y) + ky - 1;
          if (sy < 0 || sy >= static_cast<long>(h)) continue;
          for (std::size_t xx = 0; xx < w; ++xx) {
            const long sx = static_cast<long>(xx) + kx - 1;
            if (sx < 0 || sx >= static_cast<long>(w)) continue;
            dx[(ch * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)] += src[y * w + xx];
          }
        }
      }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel) {
  if (x.rank() != 4 || kernel.rank() != 4) {
    throw ShapeError("conv2d expects [B,C,H,W] and [O,C,3,3], got " + shape_str(x.shape()) + " and " +
                     shape_str(kernel.shape()));
  }
  if (kernel.dim(2) != 3 || kernel.dim(3) != 3) {
    throw ShapeError("conv2d supports 3x3 kernels only, got " + shape_str(kernel.shape()));
  }
  if (kernel.dim(1) != x.dim(1)) {
    throw ShapeError("conv2d channel mismatch: input " + shape_str(x.shape()) + " kernel " + shape_str(kernel.shape()));
  }
  const std::size_t bsz = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3), oc = kernel.dim(0);
  const std::size_t hw = h * w, ck = c * 9;
  auto cols = std::make_shared<std::vector<T>>(bsz * ck * hw);
  std::vector<T> out(bsz * oc * hw);
  CMapMat<T> kmat(kernel.values().data(), oc, ck);
  for (std::size_t b = 0; b < bsz; ++b) {
    T* cb = cols->data() + b * ck * hw;
    im2col(x.values().data() + b * c * hw, c, h, w, cb);
    MapMat<T>(out.data() + b * oc * hw, oc, hw).noalias() = kmat * CMapMat<T>(cb, ck, hw);
  }
  auto xi = x.impl();
  auto ki = kernel.impl();
  return make_output<T>(Shape{bsz, oc, h, w}, std::move(out), "conv2d", {&x, &kernel},
                        [xi, ki, cols, bsz, c, h, w, oc, hw, ck](TensorImpl<T>& o) {
                          if (ki->requires_grad) ki->ensure_grad();
                          if (xi->requires_grad) xi->ensure_grad();
                          std::vector<T> dcols(ck * hw);
                          for (std::size_t b = 0; b < bsz; ++b) {
                            CMapMat<T> g(o.grad.data() + b * oc * hw, oc, hw);
                            const T* cb = cols->data() + b * ck * hw;
                            if (ki->requires_grad) {
                              MapMat<T>(ki->grad.data(), oc, ck).noalias() += g * CMapMat<T>(cb, ck, hw).transpose();
                            }
                            if (xi->requires_grad) {
                              MapMat<T>(dcols.data(), ck, hw).noalias() =
                                  CMapMat<T>(ki->data.data(), oc, ck).transpose() * g;
                              col2im_add(dcols.data(), c, h, w, xi->grad.data() + b * c * hw);
                            }
                          }
                        });
}

// ---- shape manipulation ----------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, const Shape& shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  auto xi = x.impl();
  return make_output<T>(shape, x.values(), "reshape", {&x}, [xi](TensorImpl<T>& o) {
    xi->ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) xi->grad[i] += o.grad[i];
  });
}

namespace {

// Calls f(out_index, in_index) in output order for a permutation.
template <typename F>
void visit_permute(const Shape& in_shape, const std::vector<std::size_t>& order, F&& f) {
  const std::size_t rank = in_shape.size();
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank - 1; i-- > 0;) in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
  Shape out_shape(rank);
  std::vector<std::size_t> strides(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = in_shape[order[i]];
    strides[i] = in_strides[order[i]];
  }
  const std::size_t n = shape_numel(in_shape);
  const std::size_t inner_len = out_shape[rank - 1];
  const std::size_t inner_stride = strides[rank - 1];
  std::vector<std::size_t> idx(rank, 0);
  std::size_t src = 0;
  for (std::size_t i = 0; i < n; i += inner_len) {
    for (std::size_t j = 0; j < inner_len; ++j) f(i + j, src + j * inner_stride);
    for (std::size_t d = rank - 1; d-- > 0;) {
      ++idx[d];
      src += strides[d];
      if (idx[d] < out_shape[d]) break;
      src -= strides[d] * out_shape[d];
      idx[d] = 0;
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& order) {
  const std::size_t rank = x.rank();
  if (order.size() != rank) throw ShapeError("permute order rank mismatch for " + shape_str(x.shape()));
  std::vector<bool> used(rank, false);
  for (std::size_t o : order) {
    if (o >= rank || used[o]) throw ShapeError("invalid permutation for " + shape_str(x.shape()));
    used[o] = true;
  }
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = x.dim(order[i]);
  std::vector<T> out(x.numel());
  const auto& xv = x.values();
  visit_permute(x.shape(), order, [&](std::size_t o, std::size_t s) { out[o] = xv[s]; });
  auto xi = x.impl();
  return make_output<T>(out_shape, std::move(out), "permute", {&x}, [xi, order](TensorImpl<T>& o) {
    xi->ensure_grad();
    visit_permute(xi->shape, order, [&](std::size_t oi, std::size_t s) { xi->grad[s] += o.grad[oi]; });
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x, int axis0, int axis1) {
  const std::size_t a0 = norm_axis(axis0, x.rank());
  const std::size_t a1 = norm_axis(axis1, x.rank());
  std::vector<std::size_t> order(x.rank());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::swap(order[a0], order[a1]);
  return permute(x, order);
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, std::size_t start, std::size_t length) {
  const std::size_t ax = norm_axis(axis, x.rank());
  if (length == 0 || start + length > x.dim(ax)) {
    throw ShapeError("slice [" + std::to_string(start) + ", +" + std::to_string(length) + ") out of range for " +
                     shape_str(x.shape()));
  }
  const AxisSplit sp = split_at(x.shape(), ax);
  Shape out_shape = x.shape();
  out_shape[ax] = length;
  std::vector<T> out(sp.outer * length * sp.inner);
  const auto& xv = x.values();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    std::copy_n(xv.data() + (o * sp.n + start) * sp.inner, length * sp.inner, out.data() + o * length * sp.inner);
  }
  auto xi = x.impl();
  return make_output<T>(out_shape, std::move(out), "slice", {&x}, [xi, sp, start, length](TensorImpl<T>& o) {
    xi->ensure_grad();
    for (std::size_t a = 0; a < sp.outer; ++a) {
      T* dst = xi->grad.data() + (a * sp.n + start) * sp.inner;
      const T* g = o.grad.data() + a * length * sp.inner;
      for (std::size_t i = 0; i < length * sp.inner; ++i) dst[i] += g[i];
    }
  });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const std::size_t ax = norm_axis(axis, parts[0].rank());
  Shape out_shape = parts[0].shape();
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != out_shape.size()) throw ShapeError("concat rank mismatch at " + shape_str(s));
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != ax && s[i] != parts[0].dim(i)) {
        throw ShapeError("concat shapes " + shape_str(parts[0].shape()) + " and " + shape_str(s) + " disagree");
      }
    }
    out_shape[ax] += s[ax];
  }
  const AxisSplit sp = split_at(out_shape, ax);
  std::vector<T> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t len = p.dim(ax) * sp.inner;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      std::copy_n(p.values().data() + o * len, len, out.data() + o * sp.n * sp.inner + offset);
    }
    offset += len;
  }
  Tensor<T> result(out_shape, std::move(out));
  if (!grad_enabled()) return result;
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (!any) return result;
  auto node = std::make_shared<GraphNode<T>>();
  node->op_name = "concat";
  for (const auto& p : parts) node->inputs.push_back(p.impl());
  std::vector<std::shared_ptr<TensorImpl<T>>> ins = node->inputs;
  node->backward_fn = [ins, offsets, sp, ax](TensorImpl<T>& o) {
    for (std::size_t k = 0; k < ins.size(); ++k) {
      auto& in = *ins[k];
      if (!in.requires_grad) continue;
      in.ensure_grad();
      const std::size_t len = in.shape[ax] * sp.inner;
      for (std::size_t a = 0; a < sp.outer; ++a) {
        const T* g = o.grad.data() + a * sp.n * sp.inner + offsets[k];
        T* dst = in.grad.data() + a * len;
        for (std::size_t i = 0; i < len; ++i) dst[i] += g[i];
      }
    }
  };
  result.impl()->node = std::move(node);
  result.impl()->requires_grad = true;
  return result;
}

template <typename T>
Tensor<T> broadcast_to(const Tensor<T>& x, const Shape& shape) {
  auto plan = std::make_shared<BroadcastPlan>(plan_broadcast(shape, x.shape()));
  if (plan->out != shape) {
    throw ShapeError("cannot broadcast " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  std::vector<T> out(shape_numel(shape));
  const auto& xv = x.values();
  visit(*plan, [&](std::size_t i, std::size_t, std::size_t ib) { out[i] = xv[ib]; });
  auto xi = x.impl();
  return make_output<T>(shape, std::move(out), "broadcast_to", {&x}, [xi, plan](TensorImpl<T>& o) {
    xi->ensure_grad();
    visit(*plan, [&](std::size_t i, std::size_t, std::size_t ib) { xi->grad[ib] += o.grad[i]; });
  });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<std::vector<std::size_t>>& rows) {
  if (x.rank() != 3) throw ShapeError("gather_rows expects [B,T,D], got " + shape_str(x.shape()));
  const std::size_t bsz = x.dim(0), tok = x.dim(1), d = x.dim(2);
  if (rows.size() != bsz) throw ShapeError("gather_rows: index batch differs from " + shape_str(x.shape()));
  const std::size_t k = rows.empty() ? 0 : rows[0].size();
  if (k == 0) throw ShapeError("gather_rows: empty index list");
  for (const auto& r : rows) {
    if (r.size() != k) throw ShapeError("gather_rows: ragged index lists");
    for (std::size_t t : r) {
      if (t >= tok) throw ShapeError("gather_rows: index " + std::to_string(t) + " out of range");
    }
  }
  std::vector<T> out(bsz * k * d);
  for (std::size_t b = 0; b < bsz; ++b)
    for (std::size_t j = 0; j < k; ++j)
      std::copy_n(x.values().data() + (b * tok + rows[b][j]) * d, d, out.data() + (b * k + j) * d);
  auto xi = x.impl();
  return make_output<T>(Shape{bsz, k, d}, std::move(out), "gather_rows", {&x},
                        [xi, rows, tok, k, d](TensorImpl<T>& o) {
                          xi->ensure_grad();
                          for (std::size_t b = 0; b < rows.size(); ++b)
                            for (std::size_t j = 0; j < k; ++j) {
                              T* dst = xi->grad.data() + (b * tok + rows[b][j]) * d;
                              const T* g = o.grad.data() + (b * k + j) * d;
                              for (std::size_t i = 0; i < d; ++i) dst[i] += g[i];
                            }
                        });
}

// ---- losses ----------------------------------------------------------------

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy expects [B,C], got " + shape_str(logits.shape()));
  const std::size_t bsz = logits.dim(0), nc = logits.dim(1);
  if (labels.size() != bsz) throw ShapeError("cross_entropy: label count differs from batch");
  auto probs = std::make_shared<std::vector<T>>(logits.numel());
  std::vector<int> lab(labels.begin(), labels.end());
  T loss = 0;
  const auto& z = logits.values();
  for (std::size_t b = 0; b < bsz; ++b) {
    const int y = lab[b];
    if (y < 0 || static_cast<std::size_t>(y) >= nc) throw std::out_of_range("class label out of range");
    const T* row = z.data() + b * nc;
    const T mx = *std::max_element(row, row + nc);
    T total = 0;
    for (std::size_t c = 0; c < nc; ++c) {
      (*probs)[b * nc + c] = std::exp(row[c] - mx);
      total += (*probs)[b * nc + c];
    }
    for (std::size_t c = 0; c < nc; ++c) (*probs)[b * nc + c] /= total;
    loss += std::log(total) + mx - row[y];
  }
  loss /= static_cast<T>(bsz);
  auto li = logits.impl();
  return make_output<T>(Shape{1}, {loss}, "cross_entropy", {&logits}, [li, probs, lab, bsz, nc](TensorImpl<T>& o) {
    li->ensure_grad();
    const T s = o.grad[0] / static_cast<T>(bsz);
    for (std::size_t b = 0; b < bsz; ++b)
      for (std::size_t c = 0; c < nc; ++c) {
        const T onehot = static_cast<std::size_t>(lab[b]) == c ? T(1) : T(0);
        li->grad[b * nc + c] += s * ((*probs)[b * nc + c] - onehot);
      }
  });
}

template <typename T>
Tensor<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("mse_loss shapes differ: " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  }
  Tensor<T> diff = sub(pred, target);
  return mean(mul(diff, diff));
}

#define T3_INSTANTIATE_OPS(T)                                                                  \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> scale(const Tensor<T>&, T);                                               \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                          \
  template Tensor<T> power(const Tensor<T>&, T);                                               \
  template Tensor<T> exp(const Tensor<T>&);                                                    \
  template Tensor<T> log(const Tensor<T>&);                                                    \
  template Tensor<T> sqrt(const Tensor<T>&);                                                   \
  template Tensor<T> gelu(const Tensor<T>&);                                                   \
  template Tensor<T> sum(const Tensor<T>&);                                                    \
  template Tensor<T> mean(const Tensor<T>&);                                                   \
  template Tensor<T> sum(const Tensor<T>&, int, bool);                                         \
  template Tensor<T> mean(const Tensor<T>&, int, bool);                                        \
  template Tensor<T> variance(const Tensor<T>&, int, bool);                                    \
  template Tensor<T> softmax(const Tensor<T>&, int);                                           \
  template Tensor<T> layernorm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);       \
  template Tensor<T> standardize(const Tensor<T>&, T);                                         \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> reshape(const Tensor<T>&, const Shape&);                                  \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<std::size_t>&);               \
  template Tensor<T> transpose(const Tensor<T>&, int, int);                                    \
  template Tensor<T> slice(const Tensor<T>&, int, std::size_t, std::size_t);                   \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, int);                               \
  template Tensor<T> broadcast_to(const Tensor<T>&, const Shape&);                             \
  template Tensor<T> gather_rows(const Tensor<T>&, const std::vector<std::vector<std::size_t>>&); \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const int>);                    \
  template Tensor<T> mse_loss(const Tensor<T>&, const Tensor<T>&);

T3_INSTANTIATE_OPS(float)
T3_INSTANTIATE_OPS(double)

}  // namespace t3
