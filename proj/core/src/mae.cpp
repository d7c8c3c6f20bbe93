#include "t3/mae.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace t3 {

std::size_t MaskPlan::masked_count() const {
  if (masked.empty()) return 0;
  return static_cast<std::size_t>(std::count(masked[0].begin(), masked[0].end(), true));
}

std::vector<std::vector<std::size_t>> MaskPlan::visible_index() const {
  std::vector<std::vector<std::size_t>> out(masked.size());
  for (std::size_t b = 0; b < masked.size(); ++b) {
    for (std::size_t t = 0; t < masked[b].size(); ++t) {
      if (!masked[b][t]) out[b].push_back(t);
    }
  }
  return out;
}

MaskPlan make_mask(std::size_t batch, double ratio, std::uint64_t seed, std::size_t tokens) {
  if (!(ratio >= 0.0 && ratio < 1.0)) throw std::invalid_argument("mask ratio must be in [0, 1)");
  if (tokens == 0 || batch == 0) throw std::invalid_argument("mask needs a non-empty batch and token grid");
  const auto n_masked = static_cast<std::size_t>(std::lround(static_cast<double>(tokens) * ratio));
  if (n_masked >= tokens) throw std::invalid_argument("mask ratio leaves no visible patch");
  MaskPlan plan;
  plan.tokens = tokens;
  plan.ratio = ratio;
  plan.seed = seed;
  plan.masked.assign(batch, std::vector<bool>(tokens, false));
  std::vector<std::size_t> perm(tokens);
  for (std::size_t b = 0; b < batch; ++b) {
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::mt19937_64 rng(mix_seed(seed, b));
    std::shuffle(perm.begin(), perm.end(), rng);
    for (std::size_t i = 0; i < n_masked; ++i) plan.masked[b][perm[i]] = true;
  }
  return plan;
}

template <typename T>
Tensor<T> normalize_targets(const Tensor<T>& patches, T eps) {
  return standardize(patches, eps);
}

template <typename T>
Tensor<T> mae_loss(const Tensor<T>& pred, const Tensor<T>& target, const MaskPlan& plan) {
  if (pred.shape() != target.shape() || pred.rank() != 3) {
    throw ShapeError("mae_loss shape mismatch: " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  }
  const std::size_t B = pred.dim(0), N = pred.dim(1);
  if (plan.batch() != B || plan.tokens != N) throw ShapeError("mask plan does not match prediction shape");
  std::vector<T> m(B * N);
  std::size_t total = 0;
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < N; ++t) {
      m[b * N + t] = plan.masked[b][t] ? T(1) : T(0);
      total += plan.masked[b][t] ? 1 : 0;
    }
  }
  if (total == 0) throw std::invalid_argument("mae_loss: no masked patches");
  Tensor<T> diff = sub(pred, target);
  Tensor<T> per_patch = mean(mul(diff, diff), -1);  // [B,N]
  Tensor<T> weights(Shape{B, N}, std::move(m));
  return scale(sum(mul(per_patch, weights)), T(1) / static_cast<T>(total));
}

namespace {

template <typename T>
const MaeDecoder<T>& mae_decoder_of(const T3Model<T>& model) {
  const std::string id = model.mae_task();
  if (id.empty()) throw std::invalid_argument("model has no reconstruction decoder");
  return std::get<MaeDecoder<T>>(model.decoder(id).head);
}

}  // namespace

template <typename T>
Tensor<T> mae_forward(const T3Model<T>& model, const std::string& sensor, const Tensor<T>& images, double ratio,
                      std::uint64_t seed, MaskPlan* plan_out) {
  const MaeDecoder<T>& dec = mae_decoder_of(model);
  Tensor<T> patches = model.to_patches(images);
  MaskPlan plan = make_mask(patches.dim(0), ratio, seed, patches.dim(1));
  if (plan.masked_count() == 0) throw std::invalid_argument("mae step with mask ratio producing no masked patches");
  const auto visible = plan.visible_index();
  Tensor<T> tokens = model.trunk_tokens(sensor, patches, nullptr, nullptr, &visible);
  Tensor<T> pred = dec(tokens, visible);
  Tensor<T> target = normalize_targets(patches.detach());
  Tensor<T> loss = mae_loss(pred, target, plan);
  if (plan_out) *plan_out = std::move(plan);
  return loss;
}

template <typename T>
Tensor<T> mae_reconstruct(const T3Model<T>& model, const std::string& sensor, const Tensor<T>& images,
                          const MaskPlan& plan) {
  const MaeDecoder<T>& dec = mae_decoder_of(model);
  Tensor<T> patches = model.to_patches(images);
  const auto visible = plan.visible_index();
  Tensor<T> tokens = model.trunk_tokens(sensor, patches, nullptr, nullptr, &visible);
  return dec(tokens, visible);
}

#define T3_INSTANTIATE_MAE(T)                                                                                       \
  template Tensor<T> normalize_targets(const Tensor<T>&, T);                                                       \
  template Tensor<T> mae_loss(const Tensor<T>&, const Tensor<T>&, const MaskPlan&);                                \
  template Tensor<T> mae_forward(const T3Model<T>&, const std::string&, const Tensor<T>&, double, std::uint64_t,   \
                                 MaskPlan*);                                                                       \
  template Tensor<T> mae_reconstruct(const T3Model<T>&, const std::string&, const Tensor<T>&, const MaskPlan&);

T3_INSTANTIATE_MAE(float)
T3_INSTANTIATE_MAE(double)

}  // namespace t3
