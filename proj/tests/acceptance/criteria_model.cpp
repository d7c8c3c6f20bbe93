// Gradient, routing, masking and attention criteria.

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "criteria.hpp"
#include "op_cases.hpp"
#include "t3/gradcheck.hpp"
#include "t3/mae.hpp"
#include "t3/synthgel.hpp"
#include "t3/trainer.hpp"
#include "t3/vit.hpp"

namespace t3::acceptance {

using testing::rand_tensor;

namespace {

constexpr std::uint64_t kSeeds[] = {1, 2, 3, 4, 5};
constexpr double kGradTol = 1e-4;

std::vector<Tensor<double>> leaves(const NamedParams<double>& params) {
  std::vector<Tensor<double>> out;
  for (const auto& [name, p] : params) out.push_back(p);
  return out;
}

struct ModuleCase {
  std::string name;
  // Builds the closure and the tensors to perturb for one seed.
  std::function<std::pair<std::function<Tensor<double>()>, std::vector<Tensor<double>>>(std::uint64_t)> make;
  std::size_t max_coords = 0;
  double eps = 1e-6;
};

std::vector<ModuleCase> module_cases() {
  using Built = std::pair<std::function<Tensor<double>()>, std::vector<Tensor<double>>>;
  std::vector<ModuleCase> c;
  c.push_back({"patchify", [](std::uint64_t s) -> Built {
                 auto x = rand_tensor({1, 3, 8, 8}, s);
                 return {[=] { return testing::weighted_sum(patchify(x, 4, 8), s + 1); }, {x}};
               }});
  c.push_back({"linear", [](std::uint64_t s) -> Built {
                 auto lin = std::make_shared<Linear<double>>(6, 5, "l", s);
                 auto x = rand_tensor({2, 3, 6}, s + 2);
                 NamedParams<double> p;
                 lin->collect("l", p);
                 auto ts = leaves(p);
                 ts.push_back(x);
                 return {[=] { return testing::weighted_sum((*lin)(x), s + 3); }, ts};
               }});
  c.push_back({"layernorm_module", [](std::uint64_t s) -> Built {
                 auto ln = std::make_shared<LayerNorm<double>>(8);
                 ln->gain = rand_tensor({8}, s + 4, 0.5, 1.5);
                 ln->bias = rand_tensor({8}, s + 5);
                 auto x = rand_tensor({2, 3, 8}, s + 6);
                 return {[=] { return testing::weighted_sum((*ln)(x), s + 7); }, {ln->gain, ln->bias, x}};
               }});
  c.push_back({"attention", [](std::uint64_t s) -> Built {
                 auto attn = std::make_shared<Attention<double>>(8, 2, "a", s);
                 auto x = rand_tensor({2, 5, 8}, s + 8);
                 NamedParams<double> p;
                 attn->collect("a", p);
                 auto ts = leaves(p);
                 ts.push_back(x);
                 return {[=] { return testing::weighted_sum((*attn)(x), s + 9); }, ts};
               }});
  c.push_back({"transformer_block", [](std::uint64_t s) -> Built {
                 auto blk = std::make_shared<TransformerBlock<double>>(8, 2, 4.0, "b", s);
                 auto x = rand_tensor({1, 4, 8}, s + 10);
                 NamedParams<double> p;
                 blk->collect("b", p);
                 auto ts = leaves(p);
                 ts.push_back(x);
                 return {[=] { return testing::weighted_sum((*blk)(x), s + 11); }, ts};
               },
               0, 1e-5});
  c.push_back({"mlp_head", [](std::uint64_t s) -> Built {
                 auto head = std::make_shared<MlpHead<double>>(16, 6, "h", s);
                 auto x = rand_tensor({2, 3, 16}, s + 12);
                 NamedParams<double> p;
                 head->collect("h", p);
                 auto ts = leaves(p);
                 ts.push_back(x);
                 static const std::vector<int> labels{1, 4};
                 return {[=] { return cross_entropy((*head)(x), std::span<const int>(labels)); }, ts};
               },
               0, 1e-5});
  c.push_back({"channel_norm", [](std::uint64_t s) -> Built {
                 auto x = rand_tensor({2, 3, 4, 4}, s + 13);
                 auto g = rand_tensor({3, 1}, s + 14, 0.5, 1.5);
                 auto b = rand_tensor({3, 1}, s + 15);
                 return {[=] { return testing::weighted_sum(channel_norm(x, g, b), s + 16); }, {x, g, b}};
               }});
  c.push_back({"token_map_reshape", [](std::uint64_t s) -> Built {
                 auto x = rand_tensor({2, 5, 3}, s + 17);
                 return {[=] { return testing::weighted_sum(token_map_reshape(x), s + 18); }, {x}};
               }});
  c.push_back({"pose_decoder", [](std::uint64_t s) -> Built {
                 auto pose = std::make_shared<PoseDecoder<double>>(2 * 8, 3, "p", s);
                 auto a = rand_tensor({2, 197, 8}, s + 19);
                 auto b = rand_tensor({2, 197, 8}, s + 20);
                 auto target = rand_tensor({2, 3}, s + 21, -1, 1, false);
                 NamedParams<double> p;
                 pose->collect("p", p);
                 auto ts = leaves(p);
                 ts.push_back(a);
                 ts.push_back(b);
                 return {[=] { return mse_loss((*pose)({a, b}), target); }, ts};
               },
               24});
  c.push_back({"mae_decoder", [](std::uint64_t s) -> Built {
                 ViTConfig g;
                 g.embed_dim = 64;
                 g.heads = 2;
                 auto dec = std::make_shared<MaeDecoder<double>>(64, MaeDecoderConfig{64, 2, 2}, g, "m", s);
                 auto x = rand_tensor({1, 4, 64}, s + 22);
                 auto w = rand_tensor({1, 196, 768}, s + 23, -1, 1, false);
                 const std::vector<std::vector<std::size_t>> vis{{3, 70, 150}};
                 NamedParams<double> p;
                 dec->collect("m", p);
                 auto ts = leaves(p);
                 ts.push_back(x);
                 return {[=] { return mean(mul((*dec)(x, vis), w)); }, ts};
               },
               12, 1e-5});
  c.push_back({"mae_loss_normalized_targets", [](std::uint64_t s) -> Built {
                 auto pred = rand_tensor({2, 196, 12}, s + 24);
                 auto raw = rand_tensor({2, 196, 12}, s + 25);
                 const MaskPlan plan = make_mask(2, 0.75, s);
                 return {[=] { return mae_loss(pred, normalize_targets(raw), plan); }, {pred, raw}};
               },
               64});
  return c;
}

struct PathCase {
  std::string task;
  std::function<Tensor<double>(const T3Model<double>&, const Tensor<double>&, const Tensor<double>&, std::uint64_t)>
      loss;
};

}  // namespace

Outcome criterion_1(const std::string&) {
  const Stopwatch clock;
  double worst = 0.0;
  std::string worst_case;
  std::size_t checks = 0, failures = 0;
  auto record = [&](const std::string& name, std::uint64_t seed, double err) {
    ++checks;
    if (err > worst) {
      worst = err;
      worst_case = name + " seed " + std::to_string(seed);
    }
    if (!(err < kGradTol)) {
      ++failures;
      note(cat("FAIL ", name, " seed ", seed, " rel ", err));
    }
  };

  const auto ops = testing::op_cases();
  for (std::size_t i = 0; i < ops.size(); ++i) {
    for (std::uint64_t seed : kSeeds) {
      record(ops[i].name, seed, finite_diff_check(ops[i].f, rand_tensor(ops[i].shape, seed * 7919 + i, ops[i].lo,
                                                                            ops[i].hi)));
    }
  }
  note(cat(ops.size(), " elementary ops done at ", clock.seconds(), " s"));

  for (const auto& mc : module_cases()) {
    for (std::uint64_t seed : kSeeds) {
      auto [f, ts] = mc.make(seed);
      GradCheckOptions o;
      o.eps = mc.eps;
      o.max_coords_per_tensor = mc.max_coords;
      o.seed = seed;
      record(mc.name, seed, finite_diff_check_params(f, ts, o).max_rel_error);
    }
  }
  note(cat("modules done at ", clock.seconds(), " s"));

  // Full encoder -> trunk -> decoder paths of a nano model in 64-bit.
  const std::vector<PathCase> paths = {
      {"object_cls",
       [](const T3Model<double>& m, const Tensor<double>& x, const Tensor<double>&, std::uint64_t s) {
         const std::vector<int> label{static_cast<int>(s % kNumProbes)};
         return cross_entropy(m.forward("synth0", "object_cls", {x}), std::span<const int>(label));
       }},
      {"vol",
       [](const T3Model<double>& m, const Tensor<double>& x, const Tensor<double>&, std::uint64_t) {
         return mse_loss(m.forward("synth0", "vol", {x}), Tensor<double>({1, 1}, {0.7}));
       }},
      {"pose3",
       [](const T3Model<double>& m, const Tensor<double>& x, const Tensor<double>& y, std::uint64_t) {
         return mse_loss(m.forward("synth0", "pose3", {x, y}), Tensor<double>({1, 3}, {0.4, -0.3, 0.8}));
       }},
      {"mae",
       [](const T3Model<double>& m, const Tensor<double>& x, const Tensor<double>&, std::uint64_t s) {
         return mae_forward(m, "synth0", x, 0.75, s);
       }},
  };
  const ModelSpec spec = nano_spec({"synth0"}, {"object_cls", "vol", "pose3", "mae"});
  for (std::uint64_t seed : kSeeds) {
    const auto model = T3Model<double>::assemble(spec, seed);
    for (const auto& pc : paths) {
      auto x = rand_tensor({1, 3, 224, 224}, seed + 100);
      auto y = rand_tensor({1, 3, 224, 224}, seed + 200, -1, 1, pc.task == "pose3");
      auto ts = leaves(model.trainable_set("synth0", pc.task));
      // Reconstruction targets are a detached copy of the input, so the
      // input is not a variable of the masked loss.
      if (pc.task != "mae") ts.push_back(x);
      if (pc.task == "pose3") ts.push_back(y);
      GradCheckOptions o;
      o.eps = 1e-5;
      o.max_coords_per_tensor = 2;
      o.seed = seed;
      record("nano path " + pc.task, seed,
             finite_diff_check_params([&] { return pc.loss(model, x, y, seed); }, ts, o).max_rel_error);
    }
    note(cat("nano paths seed ", seed, " done at ", clock.seconds(), " s"));
  }

  const double secs = clock.seconds();
  const bool pass = failures == 0 && secs < 300.0;
  return {pass, cat(checks, " checks, ", failures, " above ", kGradTol, ", worst ", worst, " (", worst_case, "), ",
                    secs, " s (budget 300 s)")};
}

Outcome criterion_2(const std::string&) {
  const std::vector<std::string> tasks{"object_cls", "vol", "pose3"};
  std::vector<std::string> sensors;
  for (const auto& st : default_styles(3)) sensors.push_back(st.name);
  auto model = T3Model<float>::assemble(nano_spec(sensors, tasks), 11);

  std::vector<PairingDataset> data;
  for (std::size_t s = 0; s < sensors.size(); ++s) {
    for (const auto& t : tasks) data.push_back(synth_pairing(s, t, 4, 20 + s));
  }
  TrainConfig cfg = TrainConfig::defaults(Stage::kPretrain2, 100);
  cfg.batch_size = 2;
  cfg.weighting = Weighting::parse("uniform");
  cfg.seed = 5;

  std::size_t violations = 0, stale_updates = 0, silent_routes = 0;
  std::map<std::string, std::size_t> visits;
  std::map<std::string, std::vector<float>> frozen_copy;
  RunOptions opts;
  opts.after_backward = [&](std::size_t step, const std::string& sensor, const std::string& task) {
    ++visits[sensor + "/" + task];
    const auto active = model.trainable_components(sensor, task);
    const std::set<std::string> on(active.begin(), active.end());
    frozen_copy.clear();
    bool any_active_grad = false;
    for (const auto& comp : model.components()) {
      for (const auto& [name, p] : model.component_parameters(comp)) {
        const bool has = p.has_grad();
        if (on.count(comp)) {
          if (has) any_active_grad |= std::any_of(p.grad().begin(), p.grad().end(), [](float g) { return g != 0.0f; });
          continue;
        }
        frozen_copy[name] = p.values();
        if (has && std::any_of(p.grad().begin(), p.grad().end(), [](float g) { return g != 0.0f; })) {
          ++violations;
          note(cat("step ", step, " ", sensor, "/", task, ": nonzero gradient in ", name));
        }
      }
    }
    if (!any_active_grad) ++silent_routes;
  };
  opts.on_step = [&](std::size_t, double) {
    for (const auto& comp : model.components()) {
      for (const auto& [name, p] : model.component_parameters(comp)) {
        auto it = frozen_copy.find(name);
        if (it != frozen_copy.end() && it->second != p.values()) ++stale_updates;
      }
    }
  };
  run_stage(model, data, cfg, opts);

  std::size_t steps = 0;
  for (const auto& [k, v] : visits) steps += v;
  const bool pass = violations == 0 && stale_updates == 0 && silent_routes == 0 && steps == 100;
  return {pass, cat(steps, " steps over ", visits.size(), "/9 pairings, ", violations,
                    " nonzero off-route gradients, ", stale_updates, " off-route parameter changes, ", silent_routes,
                    " steps without an on-route gradient")};
}

Outcome criterion_3(const std::string&) {
  const std::vector<double> ratios{0.3, 0.4, 0.5, 0.6, 0.7, 0.75, 0.8, 0.9};

  // Loss ignores predictions at visible patches.
  std::size_t invariance_failures = 0, grad_leaks = 0;
  for (std::uint64_t seed : kSeeds) {
    for (double r : ratios) {
      const MaskPlan plan = make_mask(4, r, seed);
      auto pred = rand_tensor<float>({4, 196, 768}, seed + 1, -2, 2, true);
      const auto target = rand_tensor<float>({4, 196, 768}, seed + 2, -2, 2, false);
      const Tensor<float> base = mae_loss(pred, target, plan);
      base.backward();
      auto altered = pred.clone();
      auto noise = rand_tensor<float>({4, 196, 768}, seed + 3, -50, 50, false);
      for (std::size_t b = 0; b < 4; ++b) {
        for (std::size_t t = 0; t < 196; ++t) {
          const std::size_t off = (b * 196 + t) * 768;
          if (plan.masked[b][t]) continue;
          std::copy_n(noise.values().begin() + static_cast<std::ptrdiff_t>(off), 768,
                      altered.values().begin() + static_cast<std::ptrdiff_t>(off));
          for (std::size_t k = 0; k < 768; ++k) grad_leaks += pred.grad()[off + k] != 0.0f;
        }
      }
      if (mae_loss(altered, target, plan).item() != base.item()) ++invariance_failures;
    }
  }

  // Masked counts.
  std::size_t count_failures = 0;
  for (double r : ratios) {
    const auto want = static_cast<std::size_t>(std::lround(196.0 * r));
    for (std::uint64_t seed : kSeeds) {
      const MaskPlan plan = make_mask(8, r, seed);
      const auto vis = plan.visible_index();
      for (std::size_t b = 0; b < 8; ++b) {
        const auto masked = static_cast<std::size_t>(std::count(plan.masked[b].begin(), plan.masked[b].end(), true));
        if (masked != want || vis[b].size() != 196 - want) ++count_failures;
      }
    }
  }

  // Nano pre-training on 64 images.
  const Stopwatch clock;
  PairingDataset images = synth_pairing(0, "object_cls", 64, 31);
  auto model = T3Model<float>::assemble(nano_spec({images.sensor}, {"mae"}), 3);
  TrainConfig cfg = TrainConfig::defaults(Stage::kPretrain1, 2000);
  cfg.base_lr = 1e-3;
  cfg.seed = 3;
  const std::vector<PairingDataset> data{images};
  const PairingSampler sampler({{images.sensor, images.task, images.samples.size()}}, cfg.batch_size, cfg.weighting,
                               cfg.seed);
  const PairingDraw first = sampler.draw(0);
  double initial = 0.0, tail = 0.0;
  RunOptions opts;
  opts.on_step = [&](std::size_t step, double loss) {
    if (step == 1) initial = loss;
    if (step > cfg.steps - 50) tail += loss / 50.0;
    if (step % 250 == 0) note(cat("mae step ", step, " loss ", loss, " at ", clock.seconds(), " s"));
  };
  run_stage(model, data, cfg, opts);
  double replay = 0.0;
  {
    NoGradGuard ng;
    replay = stage_loss(model, images, cfg, 0, first).item();
  }
  const double secs = clock.seconds();
  const double reduction = 1.0 - replay / initial;

  const bool pass = invariance_failures == 0 && grad_leaks == 0 && count_failures == 0 && reduction >= 0.5 &&
                    secs < 600.0;
  return {pass, cat("invariance failures ", invariance_failures, ", visible-patch gradient leaks ", grad_leaks,
                    ", masked-count mismatches ", count_failures, "; step-1 loss ", initial,
                    ", same batch and mask after 2000 steps ", replay, " (reduction ", 100.0 * reduction,
                    "%, need >= 50%), mean of last 50 steps ", tail, ", ", secs, " s (budget 600 s)")};
}

Outcome criterion_8(const std::string&) {
  constexpr double kRowTol = 1e-6;
  const auto model = T3Model<double>::assemble(nano_spec({"synth0"}, {"object_cls"}), 8);
  double worst_row = 0.0, map_lo = 1.0, map_hi = 0.0;
  bool negative = false;
  std::size_t rows = 0;
  for (std::uint64_t seed : kSeeds) {
    NoGradGuard ng;
    const auto x = rand_tensor({2, 3, 224, 224}, seed, -1, 1, false);
    AttentionTrace enc, trunk;
    model.trunk_tokens("synth0", model.to_patches(x), &enc, &trunk);
    for (const AttentionTrace* tr : {&enc, &trunk}) {
      for (const auto& w : tr->layers) {
        const std::size_t n = w.dim(3);
        for (std::size_t r = 0; r < w.numel() / n; ++r) {
          double s = 0.0;
          for (std::size_t k = 0; k < n; ++k) {
            const double v = w.values()[r * n + k];
            negative |= v < 0.0;
            s += v;
          }
          worst_row = std::max(worst_row, std::abs(s - 1.0));
          ++rows;
        }
      }
      for (std::size_t b = 0; b < 2; ++b) {
        const Tensor<double> map = joint_attention_map(*tr, b);
        if (map.shape() != Shape{14, 14}) throw std::runtime_error("joint map is not 14x14");
        const auto [lo, hi] = std::minmax_element(map.values().begin(), map.values().end());
        map_lo = std::min(map_lo, *lo);
        map_hi = std::max(map_hi, *hi);
      }
    }
  }

  // Two layers, three tokens; layer 1 has two heads that get averaged.
  AttentionTrace hand;
  hand.layers.push_back(Tensor<double>({1, 2, 3, 3}, {0.5, 0.25, 0.25, 0.2, 0.6, 0.2, 0.1, 0.3, 0.6,  //
                                                      0.3, 0.3, 0.4, 0.4, 0.4, 0.2, 0.3, 0.1, 0.6}));
  hand.layers.push_back(Tensor<double>({1, 1, 3, 3}, {0.6, 0.3, 0.1, 0.1, 0.8, 0.1, 0.25, 0.25, 0.5}));
  // Head average [[.4,.275,.325],[.3,.5,.2],[.2,.2,.6]], left-multiplied by layer 2.
  const std::vector<double> expected{0.35, 0.335, 0.315, 0.30, 0.4475, 0.2525, 0.275, 0.29375, 0.43125};
  const Tensor<double> joint = joint_attention_matrix(hand);
  double hand_err = 0.0;
  for (std::size_t i = 0; i < expected.size(); ++i) hand_err = std::max(hand_err, std::abs(joint.values()[i] - expected[i]));
  const auto cls_row = joint_attention_row(hand);
  hand_err = std::max({hand_err, std::abs(cls_row.at(0) - 1.0), std::abs(cls_row.at(1) - 0.0)});

  const bool pass = worst_row <= kRowTol && !negative && map_lo >= 0.0 && map_hi <= 1.0 && hand_err <= 1e-9;
  return {pass, cat(rows, " attention rows, max |row sum - 1| ", worst_row, ", negative weights ",
                    negative ? "yes" : "no", ", joint maps span [", map_lo, ", ", map_hi, "], hand case error ",
                    hand_err)};
}

}  // namespace t3::acceptance
