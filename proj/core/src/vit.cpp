#include "t3/vit.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

namespace t3 {

namespace {

template <typename T>
Tensor<T> trunc_normal(const Shape& shape, const std::string& name, std::uint64_t seed) {
  Tensor<double> d = init_tensor<double>(shape, InitScheme::truncated_normal(0.02), mix_seed(seed, hash_name(name)));
  return cast<T>(d).set_requires_grad(true);
}

template <typename T>
Tensor<T> param_zeros(const Shape& shape) {
  return Tensor<T>::zeros(shape).set_requires_grad(true);
}

template <typename T>
Tensor<T> param_ones(const Shape& shape) {
  return Tensor<T>::ones(shape).set_requires_grad(true);
}

}  // namespace

void ViTConfig::validate() const {
  if (embed_dim == 0 || heads == 0 || embed_dim % heads != 0) {
    throw std::invalid_argument("embed_dim " + std::to_string(embed_dim) + " is not divisible by heads " +
                                std::to_string(heads));
  }
  if (patch_size == 0 || image_size % patch_size != 0) {
    throw std::invalid_argument("image_size must be a multiple of patch_size");
  }
  if (!(mlp_ratio > 0)) throw std::invalid_argument("mlp_ratio must be positive");
}

Tensor<double> AttentionTrace::sample(std::size_t layer, std::size_t index) const {
  const Tensor<double>& w = layers.at(layer);
  const std::size_t heads = w.dim(1), n = w.dim(2);
  if (index >= w.dim(0)) throw std::out_of_range("attention trace sample out of range");
  const std::size_t len = heads * n * n;
  std::vector<double> out(w.values().begin() + static_cast<std::ptrdiff_t>(index * len),
                          w.values().begin() + static_cast<std::ptrdiff_t>((index + 1) * len));
  return Tensor<double>({heads, n, n}, std::move(out));
}

// ---- Linear / LayerNorm ----------------------------------------------------

template <typename T>
Linear<T>::Linear(std::size_t in, std::size_t out, const std::string& name, std::uint64_t seed)
    : weight(trunc_normal<T>({in, out}, name + ".weight", seed)), bias(param_zeros<T>({out})) {}

template <typename T>
void Linear<T>::collect(const std::string& prefix, NamedParams<T>& out) const {
  out.emplace_back(prefix + ".weight", weight);
  out.emplace_back(prefix + ".bias", bias);
}

template <typename T>
LayerNorm<T>::LayerNorm(std::size_t width) : gain(param_ones<T>({width})), bias(param_zeros<T>({width})) {}

template <typename T>
void LayerNorm<T>::collect(const std::string& prefix, NamedParams<T>& out) const {
  out.emplace_back(prefix + ".gain", gain);
  out.emplace_back(prefix + ".bias", bias);
}

// ---- Attention -------------------------------------------------------------

template <typename T>
Attention<T>::Attention(std::size_t dim, std::size_t heads, const std::string& name, std::uint64_t seed)
    : qkv(dim, 3 * dim, name + ".qkv", seed), proj(dim, dim, name + ".proj", seed), heads_(heads) {
  if (dim % heads != 0) throw std::invalid_argument("attention dim not divisible by heads");
}

template <typename T>
Tensor<T> Attention<T>::operator()(const Tensor<T>& x, AttentionTrace* trace) const {
  if (x.rank() != 3) throw ShapeError("attention expects [B,N,D], got " + shape_str(x.shape()));
  const std::size_t bsz = x.dim(0), n = x.dim(1), dim = x.dim(2);
  const std::size_t hd = dim / heads_;
  Tensor<T> packed = reshape(qkv(x), {bsz, n, 3, heads_, hd});
  packed = permute(packed, {2, 0, 3, 1, 4});  // [3, B, H, N, hd]
  const Shape head_shape{bsz, heads_, n, hd};
  Tensor<T> q = reshape(slice(packed, 0, 0, 1), head_shape);
  Tensor<T> k = reshape(slice(packed, 0, 1, 1), head_shape);
  Tensor<T> v = reshape(slice(packed, 0, 2, 1), head_shape);
  const T inv_scale = T(1) / std::sqrt(static_cast<T>(hd));
  Tensor<T> weights = softmax(scale(matmul(q, transpose(k, -1, -2)), inv_scale), -1);
  if (trace != nullptr) trace->layers.push_back(cast<double>(weights));
  Tensor<T> mixed = permute(matmul(weights, v), {0, 2, 1, 3});  // [B, N, H, hd]
  return proj(reshape(mixed, {bsz, n, dim}));
}

template <typename T>
void Attention<T>::collect(const std::string& prefix, NamedParams<T>& out) const {
  qkv.collect(prefix + ".qkv", out);
  proj.collect(prefix + ".proj", out);
}

// ---- TransformerBlock ------------------------------------------------------

template <typename T>
TransformerBlock<T>::TransformerBlock(std::size_t dim, std::size_t heads, double mlp_ratio, const std::string& name,
                                      std::uint64_t seed)
    : ln1(dim),
      attn(dim, heads, name + ".attn", seed),
      ln2(dim),
      fc1(dim, static_cast<std::size_t>(static_cast<double>(dim) * mlp_ratio), name + ".fc1", seed),
      fc2(static_cast<std::size_t>(static_cast<double>(dim) * mlp_ratio), dim, name + ".fc2", seed) {}

template <typename T>
Tensor<T> TransformerBlock<T>::operator()(const Tensor<T>& x, AttentionTrace* trace) const {
  Tensor<T> h = add(x, attn(ln1(x), trace));
  return add(h, fc2(gelu(fc1(ln2(h)))));
}

template <typename T>
void TransformerBlock<T>::collect(const std::string& prefix, NamedParams<T>& out) const {
  ln1.collect(prefix + ".ln1", out);
  attn.collect(prefix + ".attn", out);
  ln2.collect(prefix + ".ln2", out);
  fc1.collect(prefix + ".fc1", out);
  fc2.collect(prefix + ".fc2", out);
}

// ---- ViTStack --------------------------------------------------------------

template <typename T>
ViTStack<T>::ViTStack(const ViTConfig& cfg, Options opts, const std::string& name, std::uint64_t seed)
    : cfg_(cfg), opts_(opts) {
  cfg_.validate();
  const std::size_t d = cfg_.embed_dim;
  if (opts_.patch_embed) {
    patch_proj_ = Linear<T>(cfg_.patch_dim(), d, name + ".patch_proj", seed);
    if (cfg_.with_cls_token) cls_token_ = trunc_normal<T>({1, 1, d}, name + ".cls_token", seed);
    const std::size_t positions = cfg_.tokens() + (cfg_.with_cls_token ? 1 : 0);
    pos_embed_ = trunc_normal<T>({1, positions, d}, name + ".pos_embed", seed);
  }
  blocks_.reserve(cfg_.layers);
  for (std::size_t i = 0; i < cfg_.layers; ++i) {
    blocks_.emplace_back(d, cfg_.heads, cfg_.mlp_ratio, name + ".blocks." + std::to_string(i), seed);
  }
  if (opts_.final_norm) norm_.emplace(d);
}

template <typename T>
Tensor<T> ViTStack<T>::embed(const Tensor<T>& patches, const std::vector<std::vector<std::size_t>>* keep) const {
  if (!opts_.patch_embed) throw std::logic_error("this stack has no patch embedding");
  if (patches.rank() != 3 || patches.dim(1) != cfg_.tokens() || patches.dim(2) != cfg_.patch_dim()) {
    throw ShapeError("expected patches [B," + std::to_string(cfg_.tokens()) + "," + std::to_string(cfg_.patch_dim()) +
                     "], got " + shape_str(patches.shape()));
  }
  const std::size_t bsz = patches.dim(0), d = cfg_.embed_dim, t = cfg_.tokens();
  const std::size_t first = cfg_.with_cls_token ? 1 : 0;
  Tensor<T> x = keep ? patch_proj_(gather_rows(patches, *keep)) : patch_proj_(patches);
  if (use_pos_) {
    Tensor<T> pos = slice(pos_embed_, 1, first, t);
    if (keep) pos = gather_rows(broadcast_to(pos, {bsz, t, d}), *keep);
    x = add(x, pos);
  }
  if (cfg_.with_cls_token) {
    Tensor<T> cls = use_pos_ ? add(cls_token_, slice(pos_embed_, 1, 0, 1)) : cls_token_;
    x = concat<T>({broadcast_to(cls, {bsz, 1, d}), x}, 1);
  }
  return x;
}

template <typename T>
Tensor<T> ViTStack<T>::run_blocks(Tensor<T> x, AttentionTrace* trace) const {
  if (x.rank() != 3 || x.dim(2) != cfg_.embed_dim) {
    throw ShapeError("stack expects [B,N," + std::to_string(cfg_.embed_dim) + "], got " + shape_str(x.shape()));
  }
  for (const auto& block : blocks_) x = block(x, trace);
  if (norm_) x = (*norm_)(x);
  return x;
}

template <typename T>
Tensor<T> ViTStack<T>::forward(const Tensor<T>& patches, AttentionTrace* trace,
                               const std::vector<std::vector<std::size_t>>* keep) const {
  return run_blocks(opts_.patch_embed ? embed(patches, keep) : patches, trace);
}

template <typename T>
void ViTStack<T>::collect(const std::string& prefix, NamedParams<T>& out) const {
  if (opts_.patch_embed) {
    patch_proj_.collect(prefix + ".patch_proj", out);
    if (cfg_.with_cls_token) out.emplace_back(prefix + ".cls_token", cls_token_);
    out.emplace_back(prefix + ".pos_embed", pos_embed_);
  }
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(prefix + ".blocks." + std::to_string(i), out);
  if (norm_) norm_->collect(prefix + ".norm", out);
}

template <typename T>
std::size_t ViTStack<T>::param_count() const {
  NamedParams<T> params;
  collect("", params);
  std::size_t n = 0;
  for (const auto& [name, p] : params) n += p.numel();
  return n;
}

std::size_t block_param_count(std::size_t dim, double mlp_ratio) {
  const std::size_t hidden = static_cast<std::size_t>(static_cast<double>(dim) * mlp_ratio);
  const std::size_t attention = 3 * dim * dim + 3 * dim + dim * dim + dim;
  const std::size_t mlp = dim * hidden + hidden + hidden * dim + dim;
  const std::size_t norms = 4 * dim;
  return attention + mlp + norms;
}

// ---- patchify --------------------------------------------------------------

template <typename T>
Tensor<T> patchify(const Tensor<T>& images, std::size_t patch_size, std::size_t image_size) {
  const bool single = images.rank() == 3;
  Tensor<T> x = single ? reshape(images, {1, images.dim(0), images.dim(1), images.dim(2)}) : images;
  if (x.rank() != 4 || x.dim(1) != 3 || x.dim(2) != image_size || x.dim(3) != image_size) {
    throw ShapeError("patchify expects [B,3," + std::to_string(image_size) + "," + std::to_string(image_size) +
                     "], got " + shape_str(images.shape()));
  }
  if (image_size % patch_size != 0) throw ShapeError("image size not divisible by patch size");
  const std::size_t bsz = x.dim(0), g = image_size / patch_size, p = patch_size;
  x = reshape(x, {bsz, 3, g, p, g, p});
  x = permute(x, {0, 2, 4, 3, 5, 1});
  return single ? reshape(x, {g * g, p * p * 3}) : reshape(x, {bsz, g * g, p * p * 3});
}

template <typename T>
Tensor<T> unpatchify(const Tensor<T>& patches, std::size_t patch_size) {
  const bool single = patches.rank() == 2;
  Tensor<T> x = single ? reshape(patches, {1, patches.dim(0), patches.dim(1)}) : patches;
  const std::size_t bsz = x.dim(0), t = x.dim(1), p = patch_size;
  const auto g = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(t))));
  if (g * g != t || x.dim(2) != p * p * 3) throw ShapeError("unpatchify: bad patch tensor " + shape_str(patches.shape()));
  x = reshape(x, {bsz, g, g, p, p, 3});
  x = permute(x, {0, 5, 1, 3, 2, 4});
  return single ? reshape(x, {3, g * p, g * p}) : reshape(x, {bsz, 3, g * p, g * p});
}

// ---- joint attention -------------------------------------------------------

Tensor<double> joint_attention_matrix(const AttentionTrace& trace, std::size_t sample) {
  if (trace.empty()) throw std::invalid_argument("empty attention trace");
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const std::size_t n = trace.layers[0].dim(2);
  Mat joint;
  for (std::size_t l = 0; l < trace.layers.size(); ++l) {
    const Tensor<double>& w = trace.layers[l];
    if (w.rank() != 4 || w.dim(2) != n || w.dim(3) != n) {
      throw ShapeError("attention layer " + std::to_string(l) + " has shape " + shape_str(w.shape()) +
                       ", expected [B,H," + std::to_string(n) + "," + std::to_string(n) + "]");
    }
    Tensor<double> s = trace.sample(l, sample);
    const std::size_t heads = s.dim(0);
    Mat avg = Mat::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    for (std::size_t h = 0; h < heads; ++h) {
      avg += Eigen::Map<const Mat>(s.values().data() + h * n * n, static_cast<Eigen::Index>(n),
                                   static_cast<Eigen::Index>(n));
    }
    avg /= static_cast<double>(heads);
    joint = l == 0 ? avg : Mat(avg * joint);
  }
  std::vector<double> out(joint.data(), joint.data() + joint.size());
  return Tensor<double>({n, n}, std::move(out));
}

std::vector<double> joint_attention_row(const AttentionTrace& trace, std::size_t sample) {
  Tensor<double> joint = joint_attention_matrix(trace, sample);
  const std::size_t n = joint.dim(0);
  if (n < 2) throw ShapeError("joint attention needs a CLS token plus at least one patch token");
  std::vector<double> row(joint.values().begin() + 1, joint.values().begin() + static_cast<std::ptrdiff_t>(n));
  const auto [lo, hi] = std::minmax_element(row.begin(), row.end());
  const double low = *lo, range = *hi - *lo;
  for (double& v : row) v = range > 0 ? (v - low) / range : 0.0;
  return row;
}

Tensor<double> joint_attention_map(const AttentionTrace& trace, std::size_t sample) {
  std::vector<double> row = joint_attention_row(trace, sample);
  const auto g = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(row.size()))));
  if (g * g != row.size()) {
    throw ShapeError("patch token count " + std::to_string(row.size()) + " is not a square grid");
  }
  return Tensor<double>({g, g}, std::move(row));
}

template struct Linear<float>;
template struct Linear<double>;
template struct LayerNorm<float>;
template struct LayerNorm<double>;
template class Attention<float>;
template class Attention<double>;
template class TransformerBlock<float>;
template class TransformerBlock<double>;
template class ViTStack<float>;
template class ViTStack<double>;
template Tensor<float> patchify(const Tensor<float>&, std::size_t, std::size_t);
template Tensor<double> patchify(const Tensor<double>&, std::size_t, std::size_t);
template Tensor<float> unpatchify(const Tensor<float>&, std::size_t);
template Tensor<double> unpatchify(const Tensor<double>&, std::size_t);

}  // namespace t3
