#include <gtest/gtest.h>

#include <cmath>

#include "t3/decoders.hpp"
#include "t3/gradcheck.hpp"
#include "t3/trainer.hpp"
#include "test_util.hpp"

using namespace t3;
using t3::testing::rand_tensor;

namespace {

template <typename T>
void zero_last(Mlp<T>& mlp) {
  std::fill(mlp.last().weight.values().begin(), mlp.last().weight.values().end(), T(0));
  std::fill(mlp.last().bias.values().begin(), mlp.last().bias.values().end(), T(0));
}

std::vector<Tensor<double>> leaves(const NamedParams<double>& params) {
  std::vector<Tensor<double>> ts;
  for (const auto& [n, p] : params) ts.push_back(p);
  return ts;
}

ViTConfig nano_geometry() {
  ViTConfig g;
  g.embed_dim = 64;
  g.heads = 2;
  return g;
}

}  // namespace

TEST(DecoderSpec, ParseAndValidate) {
  EXPECT_EQ(parse_decoder_kind("pose"), DecoderKind::kPose);
  EXPECT_EQ(to_string(DecoderKind::kVolRegressor), "vol_regressor");
  EXPECT_THROW(parse_decoder_kind("segment"), std::invalid_argument);
  EXPECT_THROW(DecoderSpec::pose(4).validate(), std::invalid_argument);
  EXPECT_THROW(DecoderSpec::classifier(1).validate(), std::invalid_argument);
  DecoderSpec dual_cls = DecoderSpec::classifier(6);
  dual_cls.arity = 2;
  EXPECT_THROW(dual_cls.validate(), std::invalid_argument);
  EXPECT_EQ(DecoderSpec::pose(6).output_dim(), 6u);
  EXPECT_EQ(DecoderSpec::vol_regressor().output_dim(), 1u);
}

TEST(MlpHead, ClassifierParamCountByHand) {
  const std::size_t D = 192, C = 6;
  MlpHead<float> head(D, C, "c", 1);
  NamedParams<float> p;
  head.collect("c", p);
  std::size_t n = 0;
  for (auto& [k, t] : p) n += t.numel();
  EXPECT_EQ(n, D * 256 + 256 + 256 * 128 + 128 + 128 * 64 + 64 + 64 * C + C);
  EXPECT_EQ(mlp_param_count(D, kMlpHeadHidden, C), n);
}

TEST(MlpHead, ZeroFinalLayerGivesUniformSoftmax) {
  MlpHead<double> head(16, 6, "c", 2);
  zero_last(head.mlp());
  auto logits = head(Tensor<double>::zeros({3, 5, 16}));
  EXPECT_EQ(logits.shape(), (Shape{3, 6}));
  auto probs = softmax(logits, -1);
  for (double v : probs.data()) EXPECT_NEAR(v, 1.0 / 6, 1e-15);
  std::vector<int> labels{0, 3, 5};
  EXPECT_NEAR(cross_entropy(logits, std::span<const int>(labels)).item(), std::log(6.0), 1e-12);
  EXPECT_NEAR(std::log(6.0), 1.7918, 1e-4);
}

TEST(MlpHead, ReadsOnlyClsToken) {
  MlpHead<double> head(16, 4, "c", 3);
  auto tokens = rand_tensor({2, 5, 16}, 4, -1, 1, false);
  auto y = head(tokens);
  auto perm = gather_rows(tokens, {{0, 4, 2, 3, 1}, {0, 2, 1, 4, 3}});
  EXPECT_EQ(head(perm).values(), y.values());
  auto cls_only = reshape(slice(tokens, 1, 0, 1), {2, 16});
  EXPECT_EQ(head(cls_only).values(), y.values());
}

TEST(MlpHead, VolRegressorMse) {
  MlpHead<double> head(16, 1, "v", 4);
  auto y = head(rand_tensor({4, 3, 16}, 5, -1, 1, false));
  EXPECT_EQ(y.shape(), (Shape{4, 1}));
  EXPECT_EQ(mse_loss(y, y.detach()).item(), 0.0);
  EXPECT_DOUBLE_EQ(mse_loss(Tensor<double>({1, 1}, {0.0}), Tensor<double>({1, 1}, {2.0})).item(), 4.0);
}

TEST(MlpHead, GradientAtNanoWidth) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    MlpHead<double> head(64, 6, "c", seed);
    auto x = rand_tensor({2, 3, 64}, seed + 10);
    std::vector<int> labels{1, 4};
    NamedParams<double> p;
    head.collect("c", p);
    auto ts = leaves(p);
    ts.push_back(x);
    GradCheckOptions o;
    o.max_coords_per_tensor = 64;
    o.eps = 1e-5;
    o.seed = seed;
    auto r = finite_diff_check_params([&] { return cross_entropy(head(x), std::span<const int>(labels)); }, ts, o);
    EXPECT_LT(r.max_rel_error, 1e-4) << "seed " << seed;
  }
}

TEST(TokenMap, RowMajorLayout) {
  std::vector<double> v(197 * 2);
  for (std::size_t t = 0; t < 197; ++t) {
    v[t * 2] = static_cast<double>(t);
    v[t * 2 + 1] = -static_cast<double>(t);
  }
  auto map = token_map_reshape(Tensor<double>({1, 197, 2}, v));
  EXPECT_EQ(map.shape(), (Shape{1, 2, 14, 14}));
  EXPECT_EQ(map.at({0, 0, 0, 0}), 1.0);
  EXPECT_EQ(map.at({0, 0, 1, 0}), 15.0);
  EXPECT_EQ(map.at({0, 1, 1, 0}), -15.0);
  EXPECT_EQ(map.at({0, 0, 13, 13}), 196.0);
}

TEST(TokenMap, FlattenRecoversOrder) {
  auto tokens = rand_tensor({2, 197, 3}, 6, -1, 1, false);
  auto map = token_map_reshape(tokens);
  auto back = permute(reshape(map, {2, 3, 196}), {0, 2, 1});
  auto expect = slice(tokens, 1, 1, 196);
  EXPECT_EQ(back.values(), expect.values());
}

TEST(TokenMap, RejectsNonSquare) {
  EXPECT_THROW(token_map_reshape(Tensor<double>::zeros({1, 11, 4})), ShapeError);
  EXPECT_THROW(token_map_reshape(Tensor<double>::zeros({11, 4})), ShapeError);
}

TEST(PoseDecoder, ZeroFinalLayerGivesZeroPose) {
  for (std::size_t dof : {3u, 6u}) {
    PoseDecoder<float> pose(8, dof, "p", 7);
    zero_last(pose.mlp());
    auto y = pose({rand_tensor<float>({2, 197, 8}, 8, -1, 1, false)});
    EXPECT_EQ(y.shape(), (Shape{2, dof}));
    for (float v : y.data()) EXPECT_EQ(v, 0.0f);
  }
}

TEST(PoseDecoder, DualPathConcatenatesChannels) {
  PoseDecoder<double> pose(2 * 4, 3, "p", 9);
  auto a = rand_tensor({1, 197, 4}, 10, -1, 1, false);
  auto b = rand_tensor({1, 197, 4}, 11, -1, 1, false);
  auto via_pair = pose({a, b});
  auto via_map = pose.from_map(concat<double>({token_map_reshape(a), token_map_reshape(b)}, 1));
  EXPECT_EQ(via_pair.values(), via_map.values());
  EXPECT_THROW(pose({a}), ShapeError);
}

TEST(PoseDecoder, DualPathParameterGrowth) {
  const std::size_t C = 16;
  auto count = [](const PoseDecoder<float>& p) {
    NamedParams<float> ps;
    p.collect("p", ps);
    std::size_t n = 0;
    for (auto& [k, t] : ps) n += t.numel();
    return n;
  };
  auto hand = [](std::size_t c) {
    const std::size_t res = 2 * (c * c * 9) + 4 * c;
    return 2 * res + (c * 256 + 256) + (256 * 64 + 64) + (64 * 3 + 3);
  };
  EXPECT_EQ(count(PoseDecoder<float>(C, 3, "p", 1)), hand(C));
  EXPECT_EQ(count(PoseDecoder<float>(2 * C, 3, "p", 1)), hand(2 * C));
  // The MLP tail beyond its input layer is unchanged by the channel doubling.
  EXPECT_EQ(hand(2 * C) - hand(C) - 256 * C, 2 * (2 * (27 * C * C) + 4 * C));
}

TEST(PoseDecoder, GradientAtNanoWidth) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    PoseDecoder<double> pose(2 * 8, 3, "p", seed);
    auto a = rand_tensor({2, 197, 8}, seed + 20);
    auto b = rand_tensor({2, 197, 8}, seed + 30);
    auto target = rand_tensor({2, 3}, seed + 40, -1, 1, false);
    NamedParams<double> p;
    pose.collect("p", p);
    auto ts = leaves(p);
    ts.push_back(a);
    ts.push_back(b);
    GradCheckOptions o;
    o.max_coords_per_tensor = 24;
    o.seed = seed;
    auto r = finite_diff_check_params([&] { return mse_loss(pose({a, b}), target); }, ts, o);
    EXPECT_LT(r.max_rel_error, 1e-4) << "seed " << seed;
  }
}

TEST(ChannelNorm, PerChannelStandardization) {
  auto x = rand_tensor({2, 3, 4, 4}, 12, -3, 5, false);
  auto y = channel_norm(x, Tensor<double>::ones({3, 1}), Tensor<double>::zeros({3, 1}));
  for (std::size_t bc = 0; bc < 6; ++bc) {
    double m = 0, v = 0;
    for (std::size_t i = 0; i < 16; ++i) m += y.values()[bc * 16 + i];
    m /= 16;
    for (std::size_t i = 0; i < 16; ++i) v += std::pow(y.values()[bc * 16 + i] - m, 2);
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v / 16, 1.0, 1e-3);
  }
}

TEST(MaeDecoder, ParamCountByHandAtFullWidth) {
  const std::size_t D = 192, W = 512;
  MaeDecoder<float> dec(D, MaeDecoderConfig{}, ViTConfig{}, "m", 1);
  NamedParams<float> p;
  dec.collect("m", p);
  std::size_t n = 0;
  for (auto& [k, t] : p) n += t.numel();
  const std::size_t block = 12 * W * W + 13 * W;
  const std::size_t hand = (D * W + W) + W + 197 * W + 8 * block + 2 * W + (W * 768 + 768);
  EXPECT_EQ(n, hand);
  EXPECT_EQ(mae_decoder_param_count(D, MaeDecoderConfig{}, 196, 768), hand);
}

TEST(MaeDecoder, OutputsOnePredictionPerPatch) {
  MaeDecoder<float> dec(16, MaeDecoderConfig{16, 2, 1}, nano_geometry(), "m", 2);
  std::vector<std::vector<std::size_t>> vis{{0, 5, 100}, {1, 2, 195}};
  auto y = dec(rand_tensor<float>({2, 4, 16}, 13, -1, 1, false), vis);
  EXPECT_EQ(y.shape(), (Shape{2, 196, 768}));
  EXPECT_THROW(dec.decode(Tensor<float>::zeros({1, 196, 16})), ShapeError);
  std::vector<std::vector<std::size_t>> dup{{3, 3, 4}, {1, 2, 195}};
  EXPECT_THROW(dec(rand_tensor<float>({2, 4, 16}, 13, -1, 1, false), dup), std::invalid_argument);
}

TEST(MaeDecoder, MaskTokenReceivesGradient) {
  MaeDecoder<double> dec(16, MaeDecoderConfig{16, 2, 1}, nano_geometry(), "m", 3);
  std::vector<std::vector<std::size_t>> vis{{0, 1, 2}};
  auto y = dec(rand_tensor({1, 4, 16}, 14, -1, 1, false), vis);
  sum(mul(y, y)).backward();
  ASSERT_TRUE(dec.mask_token().has_grad());
  double norm = 0;
  for (double g : dec.mask_token().grad()) norm += g * g;
  EXPECT_GT(norm, 0.0);
}

TEST(MaeDecoder, VisiblePositionsKeepTheirOrder) {
  // With every patch visible, a shuffled visible order must unshuffle to the
  // same result as the identity order.
  MaeDecoder<double> dec(8, MaeDecoderConfig{8, 2, 1}, nano_geometry(), "m", 4);
  std::vector<std::size_t> ident(196), rev(196);
  for (std::size_t i = 0; i < 196; ++i) {
    ident[i] = i;
    rev[i] = 195 - i;
  }
  auto tokens = rand_tensor({1, 197, 8}, 15, -1, 1, false);
  std::vector<std::size_t> order{0};
  for (std::size_t i = 0; i < 196; ++i) order.push_back(1 + rev[i]);
  auto shuffled = gather_rows(tokens, {order});
  auto a = dec(tokens, {ident});
  auto b = dec(shuffled, {rev});
  for (std::size_t i = 0; i < a.numel(); ++i) ASSERT_NEAR(a.values()[i], b.values()[i], 1e-12);
}

TEST(MaeDecoder, GradientAtNanoWidth) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    MaeDecoder<double> dec(64, MaeDecoderConfig{64, 2, 2}, nano_geometry(), "m", seed);
    std::vector<std::vector<std::size_t>> vis{{3, 70, 150}};
    auto x = rand_tensor({1, 4, 64}, seed + 50);
    auto w = rand_tensor({1, 196, 768}, seed + 60, -1, 1, false);
    NamedParams<double> p;
    dec.collect("m", p);
    auto ts = leaves(p);
    ts.push_back(x);
    GradCheckOptions o;
    o.max_coords_per_tensor = 12;
    o.seed = seed;
    o.eps = 1e-5;
    auto r = finite_diff_check_params([&] { return mean(mul(dec(x, vis), w)); }, ts, o);
    EXPECT_LT(r.max_rel_error, 1e-4) << "seed " << seed;
  }
}

TEST(DecoderFactory, BuildsEachKind) {
  const ViTConfig geo = nano_geometry();
  auto cls = Decoder<float>::make(DecoderSpec::classifier(6), 64, {64, 2, 2}, geo, "c", 1);
  EXPECT_TRUE(std::holds_alternative<MlpHead<float>>(cls.head));
  EXPECT_EQ(cls.param_count(), mlp_param_count(64, kMlpHeadHidden, 6));
  auto pose = Decoder<float>::make(DecoderSpec::pose(3, 2), 64, {64, 2, 2}, geo, "p", 1);
  ASSERT_TRUE(std::holds_alternative<PoseDecoder<float>>(pose.head));
  EXPECT_EQ(std::get<PoseDecoder<float>>(pose.head).in_channels(), 128u);
  auto mae = Decoder<float>::make(DecoderSpec::mae(), 64, {64, 2, 2}, geo, "m", 1);
  EXPECT_EQ(mae.param_count(), mae_decoder_param_count(64, {64, 2, 2}, 196, 768));
}
