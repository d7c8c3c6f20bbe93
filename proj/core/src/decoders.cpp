#include "t3/decoders.hpp"

#include <cmath>
#include <stdexcept>

namespace t3 {

std::string to_string(DecoderKind kind) {
  switch (kind) {
    case DecoderKind::kMaeRecon:
      return "mae_recon";
    case DecoderKind::kClassifier:
      return "classifier";
    case DecoderKind::kVolRegressor:
      return "vol_regressor";
    case DecoderKind::kPose:
      return "pose";
  }
  return "unknown";
}

DecoderKind parse_decoder_kind(const std::string& name) {
  if (name == "mae_recon") return DecoderKind::kMaeRecon;
  if (name == "classifier") return DecoderKind::kClassifier;
  if (name == "vol_regressor") return DecoderKind::kVolRegressor;
  if (name == "pose") return DecoderKind::kPose;
  throw std::invalid_argument("unknown task type '" + name + "'");
}

std::size_t DecoderSpec::output_dim() const {
  switch (kind) {
    case DecoderKind::kClassifier:
      return num_classes;
    case DecoderKind::kVolRegressor:
      return 1;
    case DecoderKind::kPose:
      return dof;
    case DecoderKind::kMaeRecon:
      return 0;
  }
  return 0;
}

void DecoderSpec::validate() const {
  if (kind == DecoderKind::kClassifier && num_classes < 2) {
    throw std::invalid_argument("classifier needs at least 2 classes");
  }
  if (kind == DecoderKind::kPose && dof != 3 && dof != 6) throw std::invalid_argument("pose dof must be 3 or 6");
  if (arity != 1 && arity != 2) throw std::invalid_argument("decoder arity must be 1 or 2");
  if (arity == 2 && kind != DecoderKind::kPose) throw std::invalid_argument("only pose decoders take image pairs");
}

namespace {

template <typename T>
Tensor<T> conv_kernel(std::size_t out, std::size_t in, const std::string& name, std::uint64_t seed) {
  Tensor<double> d = init_tensor<double>({out, in, 3, 3}, InitScheme::truncated_normal(0.02), mix_seed(seed, hash_name(name)));
  return cast<T>(d).set_requires_grad(true);
}

}  // namespace

// ---- Mlp / MlpHead ---------------------------------------------------------

template <typename T>
Mlp<T>::Mlp(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out, const std::string& name,
            std::uint64_t seed) {
  std::size_t prev = in;
  for (std::size_t i = 0; i < hidden.size(); ++i) {
    layers_.emplace_back(prev, hidden[i], name + ".layers." + std::to_string(i), seed);
    prev = hidden[i];
  }
  layers_.emplace_back(prev, out, name + ".layers." + std::to_string(hidden.size()), seed);
}

template <typename T>
Tensor<T> Mlp<T>::operator()(const Tensor<T>& x) const {
  Tensor<T> h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = layers_[i](h);
    if (i + 1 < layers_.size()) h = gelu(h);
  }
  return h;
}

template <typename T>
void Mlp<T>::collect(const std::string& prefix, NamedParams<T>& out) const {
  for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].collect(prefix + ".layers." + std::to_string(i), out);
}

template <typename T>
MlpHead<T>::MlpHead(std::size_t dim, std::size_t out, const std::string& name, std::uint64_t seed)
    : mlp_(dim, kMlpHeadHidden, out, name + ".mlp", seed) {}

template <typename T>
Tensor<T> MlpHead<T>::operator()(const Tensor<T>& tokens) const {
  if (tokens.rank() == 2) return mlp_(tokens);
  if (tokens.rank() != 3) throw ShapeError("MLP head expects [B,N,D] or [B,D], got " + shape_str(tokens.shape()));
  return mlp_(reshape(slice(tokens, 1, 0, 1), {tokens.dim(0), tokens.dim(2)}));
}

template <typename T>
void MlpHead<T>::collect(const std::string& prefix, NamedParams<T>& out) const {
  mlp_.collect(prefix + ".mlp", out);
}

// ---- pose decoder ----------------------------------------------------------

template <typename T>
Tensor<T> channel_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias) {
  const Shape shape = x.shape();
  Tensor<T> flat = standardize(reshape(x, {shape[0], shape[1], shape[2] * shape[3]}), T(1e-5));
  return reshape(add(mul(flat, gain), bias), shape);
}

template <typename T>
ResBlock<T>::ResBlock(std::size_t channels, const std::string& name, std::uint64_t seed)
    : conv1_(conv_kernel<T>(channels, channels, name + ".conv1", seed)),
      conv2_(conv_kernel<T>(channels, channels, name + ".conv2", seed)),
      gain1_(Tensor<T>::ones({channels, 1}).set_requires_grad(true)),
      bias1_(Tensor<T>::zeros({channels, 1}).set_requires_grad(true)),
      gain2_(Tensor<T>::ones({channels, 1}).set_requires_grad(true)),
      bias2_(Tensor<T>::zeros({channels, 1}).set_requires_grad(true)) {}

template <typename T>
Tensor<T> ResBlock<T>::operator()(const Tensor<T>& x) const {
  Tensor<T> h = gelu(channel_norm(conv2d(x, conv1_), gain1_, bias1_));
  h = channel_norm(conv2d(h, conv2_), gain2_, bias2_);
  return gelu(add(x, h));
}

template <typename T>
void ResBlock<T>::collect(const std::string& prefix, NamedParams<T>& out) const {
  out.emplace_back(prefix + ".conv1", conv1_);
  out.emplace_back(prefix + ".norm1.gain", gain1_);
  out.emplace_back(prefix + ".norm1.bias", bias1_);
  out.emplace_back(prefix + ".conv2", conv2_);
  out.emplace_back(prefix + ".norm2.gain", gain2_);
  out.emplace_back(prefix + ".norm2.bias", bias2_);
}

template <typename T>
Tensor<T> token_map_reshape(const Tensor<T>& tokens) {
  if (tokens.rank() != 3 || tokens.dim(1) < 2) {
    throw ShapeError("token_map_reshape expects [B,T+1,C], got " + shape_str(tokens.shape()));
  }
  const std::size_t bsz = tokens.dim(0), t = tokens.dim(1) - 1, c = tokens.dim(2);
  const auto g = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(t))));
  if (g * g != t) throw ShapeError(std::to_string(t) + " patch tokens do not form a square map");
  Tensor<T> patches = slice(tokens, 1, 1, t);
  return reshape(permute(patches, {0, 2, 1}), {bsz, c, g, g});
}

template <typename T>
PoseDecoder<T>::PoseDecoder(std::size_t in_channels, std::size_t dof, const std::string& name, std::uint64_t seed)
    : channels_(in_channels), mlp_(in_channels, kPoseMlpHidden, dof, name + ".mlp", seed) {
  for (int i = 0; i < 2; ++i) blocks_.emplace_back(in_channels, name + ".res" + std::to_string(i), seed);
}

template <typename T>
Tensor<T> PoseDecoder<T>::operator()(const std::vector<Tensor<T>>& trunk_outputs) const {
  if (trunk_outputs.empty()) throw std::invalid_argument("pose decoder needs at least one input");
  std::vector<Tensor<T>> maps;
  for (const auto& t : trunk_outputs) maps.push_back(token_map_reshape(t));
  return from_map(maps.size() == 1 ? maps[0] : concat(maps, 1));
}

template <typename T>
Tensor<T> PoseDecoder<T>::from_map(const Tensor<T>& map) const {
  if (map.rank() != 4 || map.dim(1) != channels_) {
    throw ShapeError("pose decoder expects [B," + std::to_string(channels_) + ",g,g], got " + shape_str(map.shape()));
  }
  Tensor<T> h = map;
  for (const auto& block : blocks_) h = block(h);
  const Shape s = h.shape();
  Tensor<T> pooled = mean(reshape(h, {s[0], s[1], s[2] * s[3]}), 2);
  return mlp_(pooled);
}

template <typename T>
void PoseDecoder<T>::collect(const std::string& prefix, NamedParams<T>& out) const {
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(prefix + ".res" + std::to_string(i), out);
  mlp_.collect(prefix + ".mlp", out);
}

// ---- MAE decoder -----------------------------------------------------------

template <typename T>
MaeDecoder<T>::MaeDecoder(std::size_t trunk_dim, const MaeDecoderConfig& cfg, const ViTConfig& geometry,
                          const std::string& name, std::uint64_t seed)
    : cfg_(cfg),
      tokens_(geometry.tokens()),
      patch_dim_(geometry.patch_dim()),
      embed_(trunk_dim, cfg.dim, name + ".embed", seed),
      norm_(cfg.dim),
      head_(cfg.dim, geometry.patch_dim(), name + ".head", seed) {
  if (cfg.heads == 0 || cfg.dim % cfg.heads != 0) throw std::invalid_argument("MAE decoder dim not divisible by heads");
  auto init = [&](const Shape& shape, const std::string& suffix) {
    Tensor<double> d = init_tensor<double>(shape, InitScheme::truncated_normal(0.02), mix_seed(seed, hash_name(name + suffix)));
    return cast<T>(d).set_requires_grad(true);
  };
  mask_token_ = init({1, 1, cfg.dim}, ".mask_token");
  pos_embed_ = init({1, tokens_ + 1, cfg.dim}, ".pos_embed");
  for (std::size_t i = 0; i < cfg.layers; ++i) {
    blocks_.emplace_back(cfg.dim, cfg.heads, 4.0, name + ".blocks." + std::to_string(i), seed);
  }
}

template <typename T>
Tensor<T> MaeDecoder<T>::fill_masked(const Tensor<T>& visible_tokens,
                                     const std::vector<std::vector<std::size_t>>& visible_index) const {
  if (visible_tokens.rank() != 3) throw ShapeError("MAE decoder expects [B,1+V,D], got " + shape_str(visible_tokens.shape()));
  const std::size_t bsz = visible_tokens.dim(0), v = visible_tokens.dim(1) - 1;
  if (visible_index.size() != bsz) throw ShapeError("visible index batch differs from token batch");
  Tensor<T> x = embed_(visible_tokens);
  Tensor<T> cls = slice(x, 1, 0, 1);
  const std::size_t masked = tokens_ - v;
  std::vector<Tensor<T>> parts;
  if (v > 0) parts.push_back(slice(x, 1, 1, v));
  if (masked > 0) parts.push_back(broadcast_to(mask_token_, {bsz, masked, cfg_.dim}));
  Tensor<T> full = parts.size() == 1 ? parts[0] : concat(parts, 1);

  // Visible tokens sit first (in the order given), mask tokens after; map
  // every original patch position to its slot in `full`.
  std::vector<std::vector<std::size_t>> restore(bsz, std::vector<std::size_t>(tokens_));
  for (std::size_t b = 0; b < bsz; ++b) {
    if (visible_index[b].size() != v) throw ShapeError("visible index length differs from visible token count");
    std::vector<bool> is_visible(tokens_, false);
    for (std::size_t r = 0; r < v; ++r) {
      const std::size_t t = visible_index[b][r];
      if (t >= tokens_ || is_visible[t]) throw std::invalid_argument("invalid visible patch index");
      is_visible[t] = true;
      restore[b][t] = r;
    }
    std::size_t next = v;
    for (std::size_t t = 0; t < tokens_; ++t) {
      if (!is_visible[t]) restore[b][t] = next++;
    }
  }
  Tensor<T> seq = concat<T>({cls, gather_rows(full, restore)}, 1);
  return add(seq, pos_embed_);
}

template <typename T>
Tensor<T> MaeDecoder<T>::decode(const Tensor<T>& tokens) const {
  if (tokens.rank() != 3 || tokens.dim(1) != tokens_ + 1 || tokens.dim(2) != cfg_.dim) {
    throw ShapeError("MAE decoder expects [B," + std::to_string(tokens_ + 1) + "," + std::to_string(cfg_.dim) +
                     "], got " + shape_str(tokens.shape()));
  }
  Tensor<T> x = tokens;
  for (const auto& block : blocks_) x = block(x);
  x = head_(norm_(x));
  return slice(x, 1, 1, tokens_);
}

template <typename T>
void MaeDecoder<T>::collect(const std::string& prefix, NamedParams<T>& out) const {
  embed_.collect(prefix + ".embed", out);
  out.emplace_back(prefix + ".mask_token", mask_token_);
  out.emplace_back(prefix + ".pos_embed", pos_embed_);
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(prefix + ".blocks." + std::to_string(i), out);
  norm_.collect(prefix + ".norm", out);
  head_.collect(prefix + ".head", out);
}

// ---- Decoder ---------------------------------------------------------------

template <typename T>
Decoder<T> Decoder<T>::make(const DecoderSpec& spec, std::size_t trunk_dim, const MaeDecoderConfig& mae,
                            const ViTConfig& geometry, const std::string& name, std::uint64_t seed) {
  spec.validate();
  Decoder<T> d;
  d.spec = spec;
  switch (spec.kind) {
    case DecoderKind::kMaeRecon:
      d.head = MaeDecoder<T>(trunk_dim, mae, geometry, name, seed);
      break;
    case DecoderKind::kClassifier:
    case DecoderKind::kVolRegressor:
      d.head = MlpHead<T>(trunk_dim, spec.output_dim(), name, seed);
      break;
    case DecoderKind::kPose:
      d.head = PoseDecoder<T>(spec.arity * trunk_dim, spec.dof, name, seed);
      break;
  }
  return d;
}

template <typename T>
void Decoder<T>::collect(const std::string& prefix, NamedParams<T>& out) const {
  std::visit([&](const auto& h) { h.collect(prefix, out); }, head);
}

template <typename T>
std::size_t Decoder<T>::param_count() const {
  NamedParams<T> params;
  collect("", params);
  std::size_t n = 0;
  for (const auto& [name, p] : params) n += p.numel();
  return n;
}

std::size_t mlp_param_count(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out) {
  std::size_t n = 0, prev = in;
  for (std::size_t h : hidden) {
    n += prev * h + h;
    prev = h;
  }
  return n + prev * out + out;
}

std::size_t mae_decoder_param_count(std::size_t trunk_dim, const MaeDecoderConfig& cfg, std::size_t tokens,
                                    std::size_t patch_dim) {
  const std::size_t d = cfg.dim;
  return (trunk_dim * d + d) + d + (tokens + 1) * d + cfg.layers * block_param_count(d) + 2 * d + (d * patch_dim + patch_dim);
}

template class Mlp<float>;
template class Mlp<double>;
template class MlpHead<float>;
template class MlpHead<double>;
template class ResBlock<float>;
template class ResBlock<double>;
template class PoseDecoder<float>;
template class PoseDecoder<double>;
template class MaeDecoder<float>;
template class MaeDecoder<double>;
template struct Decoder<float>;
template struct Decoder<double>;
template Tensor<float> channel_norm(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&);
template Tensor<double> channel_norm(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&);
template Tensor<float> token_map_reshape(const Tensor<float>&);
template Tensor<double> token_map_reshape(const Tensor<double>&);

}  // namespace t3
