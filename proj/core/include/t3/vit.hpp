#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "t3/ops.hpp"
#include "t3/tensor.hpp"

namespace t3 {

template <typename T>
using NamedParams = std::vector<std::pair<std::string, Tensor<T>>>;

struct ViTConfig {
  std::size_t embed_dim = 192;
  std::size_t heads = 3;
  std::size_t layers = 3;
  double mlp_ratio = 4.0;
  std::size_t patch_size = 16;
  std::size_t image_size = 224;
  bool with_cls_token = true;

  std::size_t grid() const { return image_size / patch_size; }
  /// Patch tokens per image (196 at 224/16).
  std::size_t tokens() const { return grid() * grid(); }
  std::size_t patch_dim() const { return 3 * patch_size * patch_size; }
  std::size_t head_dim() const { return embed_dim / heads; }
  std::size_t mlp_hidden() const { return static_cast<std::size_t>(static_cast<double>(embed_dim) * mlp_ratio); }
  void validate() const;
};

/// Per-layer softmax weights captured during a forward pass, each shaped
/// [B, H, N, N].
struct AttentionTrace {
  std::vector<Tensor<double>> layers;
  bool empty() const { return layers.empty(); }
  /// Weights of one sample in layer `layer`: [H, N, N].
  Tensor<double> sample(std::size_t layer, std::size_t index) const;
};

template <typename T>
struct Linear {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out]

  Linear() = default;
  Linear(std::size_t in, std::size_t out, const std::string& name, std::uint64_t seed);

  Tensor<T> operator()(const Tensor<T>& x) const { return add(matmul(x, weight), bias); }
  void collect(const std::string& prefix, NamedParams<T>& out) const;
};

template <typename T>
struct LayerNorm {
  Tensor<T> gain;
  Tensor<T> bias;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t width);

  Tensor<T> operator()(const Tensor<T>& x) const { return layernorm(x, gain, bias, T(1e-6)); }
  void collect(const std::string& prefix, NamedParams<T>& out) const;
};

template <typename T>
class Attention {
 public:
  Attention() = default;
  Attention(std::size_t dim, std::size_t heads, const std::string& name, std::uint64_t seed);

  /// softmax(Q K^T / sqrt(head_dim)) V per head, followed by the output
  /// projection. Appends the weights to `trace` when given.
  Tensor<T> operator()(const Tensor<T>& x, AttentionTrace* trace = nullptr) const;
  void collect(const std::string& prefix, NamedParams<T>& out) const;

  Linear<T> qkv;
  Linear<T> proj;

 private:
  std::size_t heads_ = 1;
};

/// Pre-norm residual block: x + attn(ln1(x)), then + mlp(ln2(.)).
template <typename T>
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(std::size_t dim, std::size_t heads, double mlp_ratio, const std::string& name, std::uint64_t seed);

  Tensor<T> operator()(const Tensor<T>& x, AttentionTrace* trace = nullptr) const;
  void collect(const std::string& prefix, NamedParams<T>& out) const;

  LayerNorm<T> ln1;
  Attention<T> attn;
  LayerNorm<T> ln2;
  Linear<T> fc1;
  Linear<T> fc2;
};

/// A stack of transformer blocks, optionally fronted by a patch embedding
/// (linear projection, CLS token, learned positional embeddings) and
/// optionally closed by a final layer norm.
template <typename T>
class ViTStack {
 public:
  struct Options {
    bool patch_embed = true;
    bool final_norm = false;
  };

  ViTStack() = default;
  ViTStack(const ViTConfig& cfg, Options opts, const std::string& name, std::uint64_t seed);

  const ViTConfig& config() const { return cfg_; }

  /// patches: [B, T, patch_dim]. When `keep` is given, only those patch rows
  /// (per sample) are embedded; positional embeddings follow the original
  /// indices. Output: [B, K(+1), D].
  Tensor<T> embed(const Tensor<T>& patches, const std::vector<std::vector<std::size_t>>* keep = nullptr) const;
  Tensor<T> run_blocks(Tensor<T> x, AttentionTrace* trace = nullptr) const;
  /// embed + run_blocks (+ final norm).
  Tensor<T> forward(const Tensor<T>& patches, AttentionTrace* trace = nullptr,
                    const std::vector<std::vector<std::size_t>>* keep = nullptr) const;

  void collect(const std::string& prefix, NamedParams<T>& out) const;
  std::size_t param_count() const;

  /// Skips positional embeddings in embed(); only for equivariance checks.
  void set_use_positional(bool on) { use_pos_ = on; }

  std::vector<TransformerBlock<T>>& blocks() { return blocks_; }
  const std::vector<TransformerBlock<T>>& blocks() const { return blocks_; }

 private:
  ViTConfig cfg_;
  Options opts_;
  bool use_pos_ = true;
  Linear<T> patch_proj_;
  Tensor<T> cls_token_;  // [1,1,D]
  Tensor<T> pos_embed_;  // [1, T(+1), D]
  std::vector<TransformerBlock<T>> blocks_;
  std::optional<LayerNorm<T>> norm_;
};

/// [B,3,S,S] (or [3,S,S]) -> [B, (S/p)^2, p*p*3]; each row is one patch
/// flattened as (row, col, channel), patches in row-major order.
template <typename T>
Tensor<T> patchify(const Tensor<T>& images, std::size_t patch_size = 16, std::size_t image_size = 224);
template <typename T>
Tensor<T> unpatchify(const Tensor<T>& patches, std::size_t patch_size = 16);

/// Head-averaged layer weights multiplied in sequence (A_L ... A_1) for one
/// sample: [N, N].
Tensor<double> joint_attention_matrix(const AttentionTrace& trace, std::size_t sample = 0);
/// CLS row of the joint matrix over patch tokens, min-max normalized to
/// [0,1]. A constant row maps to all zeros.
std::vector<double> joint_attention_row(const AttentionTrace& trace, std::size_t sample = 0);
/// joint_attention_row reshaped to [grid, grid].
Tensor<double> joint_attention_map(const AttentionTrace& trace, std::size_t sample = 0);

/// Closed-form parameter count of one transformer block.
std::size_t block_param_count(std::size_t dim, double mlp_ratio = 4.0);

}  // namespace t3
