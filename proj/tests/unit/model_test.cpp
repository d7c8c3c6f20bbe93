#include <gtest/gtest.h>

#include <random>

#include "t3/model.hpp"
#include "t3/trainer.hpp"
#include "test_util.hpp"

using namespace t3;
using t3::testing::rand_tensor;

namespace {

ModelSpec nano_spec() {
  ModelSpec s;
  s.size = size_config("nano");
  s.sensors = {"gelA", "gelB", "digit"};
  s.share_map = {{"gelA", "wedge"}, {"gelB", "wedge"}, {"digit", "digit"}};
  s.tasks = {{"cls", DecoderSpec::classifier(6), "object_id"},
             {"vol", DecoderSpec::vol_regressor(), "sigma"},
             {"pose", DecoderSpec::pose(3, 2), "pose3"}};
  return s;
}

double grad_norm(const NamedParams<float>& params) {
  double s = 0;
  for (const auto& [n, p] : params) {
    if (!p.has_grad()) continue;
    for (float g : p.grad()) s += static_cast<double>(g) * g;
  }
  return s;
}

template <typename T>
void zero_last(Decoder<T>& d) {
  auto& mlp = std::get<PoseDecoder<T>>(d.head).mlp();
  std::fill(mlp.last().weight.values().begin(), mlp.last().weight.values().end(), T(0));
  std::fill(mlp.last().bias.values().begin(), mlp.last().bias.values().end(), T(0));
}

}  // namespace

TEST(SizeConfig, NetworkSizeTable) {
  auto check = [](const std::string& n, std::size_t d, std::size_t h, std::size_t le, std::size_t lt) {
    const SizeConfig s = size_config(n);
    EXPECT_EQ(s.dim, d) << n;
    EXPECT_EQ(s.heads, h) << n;
    EXPECT_EQ(s.enc_layers, le) << n;
    EXPECT_EQ(s.trunk_layers, lt) << n;
  };
  check("tiny", 192, 3, 3, 9);
  check("small", 384, 6, 3, 9);
  check("medium", 768, 12, 3, 9);
  check("large", 1024, 8, 3, 9);
  check("nano", 64, 2, 2, 3);
  EXPECT_EQ(size_config("tiny").mae.dim, 512u);
  EXPECT_EQ(size_config("tiny").mae.heads, 16u);
  EXPECT_EQ(size_config("tiny").mae.layers, 8u);
  EXPECT_THROW(size_config("huge"), std::invalid_argument);
}

TEST(ModelSpecJson, RoundTrip) {
  ModelSpec s = nano_spec();
  ModelSpec back = model_spec_from_json(to_json(s));
  EXPECT_EQ(to_json(back).dump(), to_json(s).dump());
  auto j = to_json(s);
  j["tasks"][0]["kind"] = "segmentation";
  EXPECT_THROW(model_spec_from_json(j), std::invalid_argument);
}

TEST(Assemble, SharedGroupHasOneEncoder) {
  auto m = T3Model<float>::assemble(nano_spec(), 1);
  std::size_t encoders = 0;
  for (const auto& c : m.components()) encoders += c.rfind("encoder.", 0) == 0;
  EXPECT_EQ(encoders, 2u);
  EXPECT_EQ(&m.encoder(m.group_of("gelA")), &m.encoder(m.group_of("gelB")));
  EXPECT_EQ(m.trunk().blocks().size(), 3u);
}

TEST(Assemble, TinyTrunkShape) {
  ModelSpec s;
  s.size = size_config("tiny");
  s.sensors = {"a"};
  s.share_map = {{"a", "a"}};
  auto m = T3Model<float>::assemble(s, 1);
  EXPECT_EQ(m.trunk().blocks().size(), 9u);
  EXPECT_EQ(m.trunk().config().embed_dim, 192u);
  EXPECT_EQ(m.encoder("a").blocks().size(), 3u);
}

TEST(Assemble, Deterministic) {
  auto a = T3Model<float>::assemble(nano_spec(), 7);
  auto b = T3Model<float>::assemble(nano_spec(), 7);
  auto c = T3Model<float>::assemble(nano_spec(), 8);
  auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].first, pb[i].first);
    EXPECT_EQ(pa[i].second.values(), pb[i].second.values());
    any_diff |= pa[i].second.values() != pc[i].second.values();
  }
  EXPECT_TRUE(any_diff);
}

TEST(Assemble, RejectsIncompleteShareMap) {
  ModelSpec s = nano_spec();
  s.share_map.erase("digit");
  EXPECT_THROW(T3Model<float>::assemble(s, 1), std::invalid_argument);
}

TEST(ParamCount, NanoByHand) {
  const std::size_t D = 64;
  auto block = [](std::size_t d) { return 4 * d * d + 4 * d + 8 * d * d + 5 * d + 4 * d; };
  const std::size_t enc = (768 * D + D) + D + 197 * D + 2 * block(D);
  const std::size_t trunk = 3 * block(D) + 2 * D;
  const std::size_t cls = D * 256 + 256 + 256 * 128 + 128 + 128 * 64 + 64 + 64 * 6 + 6;
  const std::size_t vol = D * 256 + 256 + 256 * 128 + 128 + 128 * 64 + 64 + 64 * 1 + 1;
  const std::size_t C = 2 * D;
  const std::size_t pose = 2 * (2 * 9 * C * C + 4 * C) + (C * 256 + 256) + (256 * 64 + 64) + (64 * 3 + 3);
  auto m = T3Model<float>::assemble(nano_spec(), 1);
  EXPECT_EQ(m.param_count(), 2 * enc + trunk + cls + vol + pose);
}

TEST(ParamCount, AddingDecoderIsAdditive) {
  auto m = T3Model<float>::assemble(nano_spec(), 1);
  const std::size_t before = m.param_count();
  m.add_task({"cls2", DecoderSpec::classifier(4), "object_id"});
  EXPECT_EQ(m.param_count() - before, m.decoder("cls2").param_count());
  EXPECT_THROW(m.add_task({"cls2", DecoderSpec::classifier(4), "object_id"}), std::invalid_argument);
}

TEST(ParamCount, TinyWithMaeDecoder) {
  ModelSpec s;
  s.size = size_config("tiny");
  s.sensors = {"a"};
  s.share_map = {{"a", "a"}};
  s.tasks = {{"mae", DecoderSpec::mae(), ""}};
  auto m = T3Model<float>::assemble(s, 1);
  // 1 encoder + trunk ~ 5.5M, the 8-layer 512-wide decoder ~ 25.7M.
  EXPECT_GT(m.param_count(), 25'000'000u);
  EXPECT_LT(m.param_count(), 40'000'000u);
}

TEST(Forward, ClassifierShapeAndSoftmax) {
  auto m = T3Model<float>::assemble(nano_spec(), 2);
  auto x = rand_tensor<float>({2, 3, 224, 224}, 3, -1, 1, false);
  auto y = m.forward_single("gelA", "cls", x);
  EXPECT_EQ(y.shape(), (Shape{2, 6}));
  auto p = softmax(y, -1);
  for (std::size_t r = 0; r < 2; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 6; ++c) s += p.at({r, c});
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Forward, SharedEncoderGivesIdenticalOutputs) {
  auto m = T3Model<float>::assemble(nano_spec(), 3);
  auto x = rand_tensor<float>({1, 3, 224, 224}, 4, -1, 1, false);
  EXPECT_EQ(m.forward_single("gelA", "cls", x).values(), m.forward_single("gelB", "cls", x).values());
  EXPECT_NE(m.forward_single("gelA", "cls", x).values(), m.forward_single("digit", "cls", x).values());
}

TEST(Forward, ArityAndIdErrors) {
  auto m = T3Model<float>::assemble(nano_spec(), 4);
  auto x = rand_tensor<float>({1, 3, 224, 224}, 5, -1, 1, false);
  EXPECT_THROW(m.forward_single("gelA", "pose", x), std::invalid_argument);
  EXPECT_THROW(m.forward_dual("gelA", "cls", x, x), std::invalid_argument);
  EXPECT_THROW(m.forward("gelA", "pose", {x}), std::invalid_argument);
  EXPECT_THROW(m.forward_single("nosuch", "cls", x), std::invalid_argument);
  EXPECT_THROW(m.forward_single("gelA", "nosuch", x), std::invalid_argument);
  auto x2 = rand_tensor<float>({2, 3, 224, 224}, 6, -1, 1, false);
  EXPECT_THROW(m.forward_dual("gelA", "pose", x, x2), ShapeError);
}

TEST(Forward, DualPose) {
  auto m = T3Model<float>::assemble(nano_spec(), 5);
  auto a = rand_tensor<float>({2, 3, 224, 224}, 7, -1, 1, false);
  auto b = rand_tensor<float>({2, 3, 224, 224}, 8, -1, 1, false);
  auto ab = m.forward_dual("gelA", "pose", a, b);
  auto ba = m.forward_dual("gelA", "pose", b, a);
  EXPECT_EQ(ab.shape(), (Shape{2, 3}));
  EXPECT_NE(ab.values(), ba.values());
  EXPECT_EQ(m.forward("gelA", "pose", {a, b}).values(), ab.values());
  zero_last(m.decoder("pose"));
  auto same = m.forward_dual("gelA", "pose", a, a);
  for (float v : same.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Routing, TrainableSetIsExact) {
  auto m = T3Model<float>::assemble(nano_spec(), 6);
  auto comps = m.trainable_components("gelB", "vol");
  EXPECT_EQ(comps, (std::vector<std::string>{"encoder.wedge", "trunk", "decoder.vol"}));
  std::size_t n = 0;
  for (auto& [k, p] : m.trainable_set("gelB", "vol")) {
    n += p.numel();
    EXPECT_TRUE(k.rfind("encoder.wedge", 0) == 0 || k.rfind("trunk", 0) == 0 || k.rfind("decoder.vol", 0) == 0) << k;
  }
  std::size_t expect = 0;
  for (const auto& c : comps)
    for (auto& [k, p] : m.component_parameters(c)) expect += p.numel();
  EXPECT_EQ(n, expect);
  EXPECT_THROW(m.trainable_set("gelB", "nosuch"), std::invalid_argument);
}

TEST(Routing, GradientsStayInsideThePairing) {
  auto m = T3Model<float>::assemble(nano_spec(), 7);
  auto x = rand_tensor<float>({2, 3, 224, 224}, 9, -1, 1, false);
  const std::vector<int> labels{1, 2};
  m.zero_grad();
  cross_entropy(m.forward_single("digit", "cls", x), std::span<const int>(labels)).backward();
  EXPECT_EQ(grad_norm(m.component_parameters("encoder.wedge")), 0.0);
  EXPECT_EQ(grad_norm(m.component_parameters("decoder.vol")), 0.0);
  EXPECT_EQ(grad_norm(m.component_parameters("decoder.pose")), 0.0);
  EXPECT_GT(grad_norm(m.component_parameters("trunk")), 0.0);
  EXPECT_GT(grad_norm(m.component_parameters("encoder.digit")), 0.0);
  EXPECT_GT(grad_norm(m.component_parameters("decoder.cls")), 0.0);
}

TEST(Substitute, RoutesThroughDonor) {
  auto m = T3Model<float>::assemble(nano_spec(), 8);
  const std::size_t before = m.param_count();
  m.substitute_encoder("mini", "digit");
  EXPECT_EQ(m.param_count(), before);
  auto x = rand_tensor<float>({1, 3, 224, 224}, 10, -1, 1, false);
  EXPECT_EQ(m.forward_single("mini", "cls", x).values(), m.forward_single("digit", "cls", x).values());
  EXPECT_THROW(m.substitute_encoder("mini", "digit"), std::invalid_argument);
  EXPECT_THROW(m.substitute_encoder("other", "nosuch"), std::invalid_argument);
}

TEST(AddSensor, NewGroupGetsFreshEncoder) {
  auto m = T3Model<float>::assemble(nano_spec(), 9);
  const std::size_t before = m.param_count();
  m.add_sensor("gelC", "wedge");
  EXPECT_EQ(m.param_count(), before);
  m.add_sensor("tac", "tac");
  EXPECT_EQ(m.param_count() - before, m.encoder("tac").param_count());
}

TEST(Freeze, FlagsPerComponent) {
  auto m = T3Model<float>::assemble(nano_spec(), 10);
  m.set_frozen("trunk", true);
  EXPECT_TRUE(m.is_frozen("trunk"));
  EXPECT_FALSE(m.is_frozen("encoder.wedge"));
  m.set_frozen("trunk", false);
  EXPECT_TRUE(m.frozen().empty());
  EXPECT_THROW(m.set_frozen("nosuch", true), std::invalid_argument);
}
