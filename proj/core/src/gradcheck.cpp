#include "t3/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace t3 {

namespace {

double rel_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

double eval_scalar(const std::function<Tensor<double>()>& f) {
  NoGradGuard guard;
  Tensor<double> v = f();
  if (v.numel() != 1) throw ShapeError("gradient check needs a scalar function, got " + shape_str(v.shape()));
  return v.item();
}

}  // namespace

GradCheckResult finite_diff_check_params(const std::function<Tensor<double>()>& f, std::vector<Tensor<double>> params,
                                         const GradCheckOptions& opts) {
  if (!(opts.eps > 0)) throw std::invalid_argument("finite difference eps must be > 0");
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  Tensor<double> loss = f();
  if (loss.numel() != 1) throw ShapeError("gradient check needs a scalar function, got " + shape_str(loss.shape()));
  loss.backward();

  GradCheckResult result;
  std::mt19937_64 rng(opts.seed);
  for (auto& p : params) {
    std::vector<double> analytic(p.numel(), 0.0);
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());
    std::vector<std::size_t> coords(p.numel());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (opts.max_coords_per_tensor > 0 && coords.size() > opts.max_coords_per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opts.max_coords_per_tensor);
    }
    auto values = p.data();
    for (std::size_t i : coords) {
      const double saved = values[i];
      values[i] = saved + opts.eps;
      const double up = eval_scalar(f);
      values[i] = saved - opts.eps;
      const double down = eval_scalar(f);
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * opts.eps);
      result.max_rel_error = std::max(result.max_rel_error, rel_error(analytic[i], numeric, opts.floor));
      ++result.coords_checked;
    }
  }
  return result;
}

double finite_diff_check(const std::function<Tensor<double>(const Tensor<double>&)>& f, Tensor<double> x,
                         double eps) {
  GradCheckOptions opts;
  opts.eps = eps;
  return finite_diff_check_params([&] { return f(x); }, {x}, opts).max_rel_error;
}

}  // namespace t3
