#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "t3/model.hpp"

namespace t3 {

/// Per-sample patch mask. masked[b][t] is true when patch t of sample b is
/// hidden from the encoder.
struct MaskPlan {
  std::size_t tokens = 0;
  double ratio = 0.0;
  std::uint64_t seed = 0;
  std::vector<std::vector<bool>> masked;

  std::size_t batch() const { return masked.size(); }
  /// Masked patches per sample (identical for every sample).
  std::size_t masked_count() const;
  /// Ascending indices of the visible patches, per sample.
  std::vector<std::vector<std::size_t>> visible_index() const;
};

/// round(tokens * ratio) masked patches per sample, drawn from an independent
/// permutation per sample. ratio must lie in [0, 1).
MaskPlan make_mask(std::size_t batch, double ratio, std::uint64_t seed, std::size_t tokens = 196);

/// Standardizes each patch row to zero mean and unit variance: (x - mu) /
/// sqrt(var + eps). Last axis is the patch axis.
template <typename T>
Tensor<T> normalize_targets(const Tensor<T>& patches, T eps = T(1e-6));

/// Mean squared error over masked patches only: per-patch MSE averaged over
/// every masked (sample, patch) pair. Throws when nothing is masked.
template <typename T>
Tensor<T> mae_loss(const Tensor<T>& pred, const Tensor<T>& target, const MaskPlan& plan);

/// Forward pass of one masked-reconstruction step for a single-sensor batch.
/// Returns the loss tensor; the caller runs backward.
template <typename T>
Tensor<T> mae_forward(const T3Model<T>& model, const std::string& sensor, const Tensor<T>& images, double ratio,
                      std::uint64_t seed, MaskPlan* plan_out = nullptr);

/// Reconstruction of every patch (visible patches pass through the decoder
/// too) in normalized-patch space: [B, T, patch_dim].
template <typename T>
Tensor<T> mae_reconstruct(const T3Model<T>& model, const std::string& sensor, const Tensor<T>& images,
                          const MaskPlan& plan);

}  // namespace t3
