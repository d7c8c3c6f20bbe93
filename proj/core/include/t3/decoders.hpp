#pragma once

#include <string>
#include <variant>
#include <vector>

#include "t3/vit.hpp"

namespace t3 {

enum class DecoderKind { kMaeRecon, kClassifier, kVolRegressor, kPose };

std::string to_string(DecoderKind kind);
/// Accepts "mae_recon", "classifier", "vol_regressor", "pose".
DecoderKind parse_decoder_kind(const std::string& name);

struct DecoderSpec {
  DecoderKind kind = DecoderKind::kClassifier;
  std::size_t num_classes = 0;  // classifier only
  std::size_t dof = 0;          // pose only: 3 or 6
  std::size_t arity = 1;        // images consumed per prediction

  static DecoderSpec mae() { return {DecoderKind::kMaeRecon, 0, 0, 1}; }
  static DecoderSpec classifier(std::size_t classes) { return {DecoderKind::kClassifier, classes, 0, 1}; }
  static DecoderSpec vol_regressor() { return {DecoderKind::kVolRegressor, 0, 0, 1}; }
  static DecoderSpec pose(std::size_t dof, std::size_t arity = 2) { return {DecoderKind::kPose, 0, dof, arity}; }

  std::size_t output_dim() const;
  void validate() const;
};

struct MaeDecoderConfig {
  std::size_t dim = 512;
  std::size_t heads = 16;
  std::size_t layers = 8;
};

/// Hidden widths of the CLS-token MLP heads.
inline const std::vector<std::size_t> kMlpHeadHidden{256, 128, 64};
/// Hidden widths of the pose MLP after pooling.
inline const std::vector<std::size_t> kPoseMlpHidden{256, 64};

/// Fully connected stack with GELU between layers and no output activation.
template <typename T>
class Mlp {
 public:
  Mlp() = default;
  Mlp(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out, const std::string& name,
      std::uint64_t seed);

  Tensor<T> operator()(const Tensor<T>& x) const;
  void collect(const std::string& prefix, NamedParams<T>& out) const;
  Linear<T>& last() { return layers_.back(); }

 private:
  std::vector<Linear<T>> layers_;
};

/// Classifier / variance-of-Laplacian regressor: reads only the CLS token.
template <typename T>
class MlpHead {
 public:
  MlpHead() = default;
  MlpHead(std::size_t dim, std::size_t out, const std::string& name, std::uint64_t seed);

  /// tokens: [B, N, D] with CLS at index 0, or [B, D] already-extracted CLS.
  Tensor<T> operator()(const Tensor<T>& tokens) const;
  void collect(const std::string& prefix, NamedParams<T>& out) const;
  Mlp<T>& mlp() { return mlp_; }

 private:
  Mlp<T> mlp_;
};

/// conv3x3 - norm - gelu - conv3x3 - norm, plus identity skip, then gelu.
/// The norm standardizes each channel over spatial positions with a
/// per-channel affine.
template <typename T>
class ResBlock {
 public:
  ResBlock() = default;
  ResBlock(std::size_t channels, const std::string& name, std::uint64_t seed);

  Tensor<T> operator()(const Tensor<T>& x) const;
  void collect(const std::string& prefix, NamedParams<T>& out) const;

 private:
  Tensor<T> conv1_, conv2_;             // [C,C,3,3]
  Tensor<T> gain1_, bias1_, gain2_, bias2_;  // [C,1]
};

template <typename T>
Tensor<T> channel_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias);

/// Drops the CLS token and lays the patch tokens out row-major on a square
/// grid: [B, T+1, C] -> [B, C, g, g].
template <typename T>
Tensor<T> token_map_reshape(const Tensor<T>& tokens);

/// Two residual conv blocks, spatial average pooling, MLP to `dof`.
/// Input channels are arity * D (the dual path concatenates channel-wise).
template <typename T>
class PoseDecoder {
 public:
  PoseDecoder() = default;
  PoseDecoder(std::size_t in_channels, std::size_t dof, const std::string& name, std::uint64_t seed);

  /// One trunk output per input image, each [B, T+1, D].
  Tensor<T> operator()(const std::vector<Tensor<T>>& trunk_outputs) const;
  /// map: [B, C', g, g].
  Tensor<T> from_map(const Tensor<T>& map) const;
  void collect(const std::string& prefix, NamedParams<T>& out) const;
  Mlp<T>& mlp() { return mlp_; }
  std::size_t in_channels() const { return channels_; }

 private:
  std::size_t channels_ = 0;
  std::vector<ResBlock<T>> blocks_;
  Mlp<T> mlp_;
};

/// Reconstruction decoder shared by all sensors during masked pre-training.
template <typename T>
class MaeDecoder {
 public:
  MaeDecoder() = default;
  MaeDecoder(std::size_t trunk_dim, const MaeDecoderConfig& cfg, const ViTConfig& geometry, const std::string& name,
             std::uint64_t seed);

  /// Projects the visible trunk tokens ([B, 1+V, D], CLS first), inserts the
  /// learned mask token at every masked position and unshuffles into
  /// original patch order. Output: [B, T+1, dim].
  Tensor<T> fill_masked(const Tensor<T>& visible_tokens,
                        const std::vector<std::vector<std::size_t>>& visible_index) const;
  /// tokens: [B, T+1, dim] -> per-patch pixel predictions [B, T, patch_dim].
  Tensor<T> decode(const Tensor<T>& tokens) const;
  Tensor<T> operator()(const Tensor<T>& visible_tokens,
                       const std::vector<std::vector<std::size_t>>& visible_index) const {
    return decode(fill_masked(visible_tokens, visible_index));
  }

  void collect(const std::string& prefix, NamedParams<T>& out) const;
  const Tensor<T>& mask_token() const { return mask_token_; }

 private:
  MaeDecoderConfig cfg_;
  std::size_t tokens_ = 0;
  std::size_t patch_dim_ = 0;
  Linear<T> embed_;
  Tensor<T> mask_token_;  // [1,1,dim]
  Tensor<T> pos_embed_;   // [1,T+1,dim]
  std::vector<TransformerBlock<T>> blocks_;
  LayerNorm<T> norm_;
  Linear<T> head_;
};

/// A task decoder of any kind, tagged with its spec.
template <typename T>
struct Decoder {
  DecoderSpec spec;
  std::variant<MlpHead<T>, PoseDecoder<T>, MaeDecoder<T>> head;

  static Decoder make(const DecoderSpec& spec, std::size_t trunk_dim, const MaeDecoderConfig& mae,
                      const ViTConfig& geometry, const std::string& name, std::uint64_t seed);
  void collect(const std::string& prefix, NamedParams<T>& out) const;
  std::size_t param_count() const;
};

/// Closed-form parameter counts.
std::size_t mlp_param_count(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out);
std::size_t mae_decoder_param_count(std::size_t trunk_dim, const MaeDecoderConfig& cfg, std::size_t tokens,
                                    std::size_t patch_dim);

}  // namespace t3
