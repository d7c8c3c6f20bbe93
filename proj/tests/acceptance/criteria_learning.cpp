// Learning criteria: overfitting, transfer, zero-shot encoder substitution.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <set>

#include "criteria.hpp"
#include "t3/checkpoint.hpp"
#include "t3/synthgel.hpp"
#include "t3/trainer.hpp"

namespace fs = std::filesystem;

namespace t3::acceptance {

namespace {

constexpr std::uint64_t kSeeds[] = {1, 2, 3, 4, 5};

// One-sided sign test: P(X >= wins) for X ~ Binomial(n, 1/2).
double sign_test_p(std::size_t wins, std::size_t n) {
  double p = 0.0;
  for (std::size_t k = wins; k <= n; ++k) {
    double c = 1.0;
    for (std::size_t i = 0; i < k; ++i) c = c * static_cast<double>(n - i) / static_cast<double>(i + 1);
    p += c;
  }
  return p / std::pow(2.0, static_cast<double>(n));
}

double mean_of(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); }

double sample_sd(const std::vector<double>& v) {
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

std::string list(const std::vector<double>& v) {
  std::string out;
  for (double x : v) out += (out.empty() ? "" : " ") + cat(x);
  return out;
}

// First records of a pairing, taken round-robin over the probe classes so
// every class is present.
PairingDataset balanced_objects(std::size_t style_index, std::size_t n, std::uint64_t seed) {
  const PairingDataset pool = synth_pairing(style_index, "object_cls", 12 * n, seed);
  std::vector<std::vector<const Sample*>> by_class(kNumProbes);
  for (const auto& s : pool.samples) by_class.at(s.labels.at("object_id").get<std::size_t>()).push_back(&s);
  PairingDataset out{pool.sensor, pool.task, {}};
  for (std::size_t round = 0; out.samples.size() < n; ++round) {
    bool any = false;
    for (const auto& cls : by_class) {
      if (round >= cls.size() || out.samples.size() == n) continue;
      out.samples.push_back(*cls[round]);
      any = true;
    }
    if (!any) throw std::runtime_error("not enough records to fill a balanced set");
  }
  return out;
}

T3Model<float> load(const std::string& path) { return model_from_checkpoint<float>(read_checkpoint(path)); }

}  // namespace

Outcome criterion_4(const std::string&) {
  const Stopwatch clock;
  const PairingDataset train = balanced_objects(0, 16, 41);
  std::set<int> classes;
  for (const auto& s : train.samples) classes.insert(s.labels.at("object_id").get<int>());
  auto model = T3Model<float>::assemble(nano_spec({train.sensor}, {"object_cls"}), 4);
  TrainConfig cfg = TrainConfig::defaults(Stage::kFinetune, 2000);
  cfg.base_lr = 1e-3;
  cfg.weight_decay = 0.0;
  cfg.augment = false;
  cfg.seed = 4;
  const TaskSpec task = model.task("object_cls");

  std::optional<TrainState> state;
  double acc = evaluate(model, train, task).value;
  std::size_t step = 0;
  while (acc < 1.0 && step < cfg.steps) {
    RunOptions opts;
    opts.max_steps = 25;
    state = run_stage(model, {train}, cfg, opts, std::move(state));
    step = state->step;
    acc = evaluate(model, train, task).value;
    if (step % 100 == 0) note(cat("step ", step, " train top-1 ", acc, " at ", clock.seconds(), " s"));
  }
  const bool pass = acc == 1.0 && step <= 2000 && classes.size() == 6;
  return {pass, cat("train top-1 ", acc, " after ", step, " steps on 16 samples covering ", classes.size(),
                    " classes (", clock.seconds(), " s)")};
}

Outcome criterion_5(const std::string& workdir) {
  const Stopwatch clock;
  const std::string task_id = "object_cls";
  const std::vector<PairingDataset> sources{synth_pairing(0, task_id, 200, 51), synth_pairing(1, task_id, 200, 52)};
  const std::string target = default_styles(3)[2].name;

  // Stage I (reconstruction) then stage II (supervised) on the two source styles.
  auto model = T3Model<float>::assemble(nano_spec({sources[0].sensor, sources[1].sensor}, {task_id, "mae"}), 7);
  TrainConfig s1 = TrainConfig::defaults(Stage::kPretrain1, 400);
  s1.base_lr = 1e-3;
  s1.seed = 7;
  run_stage(model, sources, s1);
  note(cat("stage I done at ", clock.seconds(), " s"));
  TrainConfig s2 = TrainConfig::defaults(Stage::kPretrain2, 1500);
  s2.base_lr = 1e-3;
  s2.seed = 7;
  run_stage(model, sources, s2);
  const std::string ckpt = (fs::path(workdir) / "pretrained.ckpt").string();
  save_checkpoint(ckpt, model);
  note(cat("stage II done at ", clock.seconds(), " s"));

  const PairingDataset val = synth_pairing(2, task_id, 150, 59, 500000);
  std::vector<double> pre, scratch;
  for (std::uint64_t seed : kSeeds) {
    const PairingDataset train = synth_pairing(2, task_id, 200, 59, 1000 * seed);
    // Both arms share one fine-tune config.
    TrainConfig ft = TrainConfig::defaults(Stage::kFinetune, 500);
    ft.base_lr = 5e-4;
    ft.seed = seed;

    auto p = load(ckpt);
    p.substitute_encoder(target, model.group_of(sources[0].sensor));
    run_stage(p, {train}, ft);
    pre.push_back(evaluate(p, val, p.task(task_id)).value);

    auto s = T3Model<float>::assemble(nano_spec({target}, {task_id}), 100 + seed);
    run_stage(s, {train}, ft);
    scratch.push_back(evaluate(s, val, s.task(task_id)).value);
    note(cat("seed ", seed, ": pretrained ", pre.back(), ", scratch ", scratch.back(), " at ", clock.seconds(), " s"));
  }

  std::vector<double> diff;
  std::size_t wins = 0;
  for (std::size_t i = 0; i < pre.size(); ++i) {
    diff.push_back(pre[i] - scratch[i]);
    wins += pre[i] > scratch[i];
  }
  const double p_value = sign_test_p(wins, pre.size());
  const double sd = sample_sd(diff);
  const double effect = sd > 0 ? mean_of(diff) / sd : std::numeric_limits<double>::infinity();
  const double secs = clock.seconds();
  const bool pass = mean_of(pre) > mean_of(scratch) && p_value < 0.05 && secs < 1800.0;
  return {pass, cat("val top-1 pretrained [", list(pre), "] mean ", mean_of(pre), ", scratch [", list(scratch),
                    "] mean ", mean_of(scratch), "; wins ", wins, "/5, sign test p ", p_value,
                    ", mean paired gain ", mean_of(diff), ", paired effect size d ", effect, "; ", secs,
                    " s (budget 1800 s)")};
}

Outcome criterion_6(const std::string& workdir) {
  const Stopwatch clock;
  const std::string task_id = "pose3";
  const std::string group = "source";
  const std::vector<PairingDataset> sources{synth_pairing(0, task_id, 160, 61), synth_pairing(1, task_id, 160, 62)};
  const std::size_t target_style = 4;
  const std::string target = default_styles(6)[target_style].name;

  auto model = T3Model<float>::assemble(nano_spec({sources[0].sensor, sources[1].sensor}, {task_id}, group), 6);
  TrainConfig src = TrainConfig::defaults(Stage::kPretrain2, 700);
  src.base_lr = 1e-3;
  src.weight_decay = 0.0;
  src.seed = 6;
  run_stage(model, sources, src);
  const std::string ckpt = (fs::path(workdir) / "source.ckpt").string();
  save_checkpoint(ckpt, model);
  note(cat("source training done at ", clock.seconds(), " s"));

  std::size_t zero_shot_wins = 0, finetune_wins = 0;
  std::vector<double> base, zero, tuned;
  for (std::uint64_t seed : kSeeds) {
    const PairingDataset val = synth_pairing(target_style, task_id, 64, 69, 500000 + 1000 * seed);
    const PairingDataset train = synth_pairing(target_style, task_id, 200, 69, 10000 * seed);
    auto m = load(ckpt);
    m.substitute_encoder(target, group);
    const EvalResult z = evaluate(m, val, m.task(task_id));
    TrainConfig ft = TrainConfig::defaults(Stage::kFinetune, 100);
    ft.base_lr = 1e-4;
    ft.seed = seed;
    run_stage(m, {train}, ft);
    const EvalResult f = evaluate(m, val, m.task(task_id));
    base.push_back(z.baseline_rmse);
    zero.push_back(z.value);
    tuned.push_back(f.value);
    zero_shot_wins += z.value < z.baseline_rmse;
    finetune_wins += f.value < z.value;
    note(cat("seed ", seed, ": baseline ", z.baseline_rmse, ", zero-shot ", z.value, ", fine-tuned ", f.value, " at ",
             clock.seconds(), " s"));
  }
  const double secs = clock.seconds();
  const bool pass = zero_shot_wins >= 4 && finetune_wins >= 4 && secs < 1800.0;
  return {pass, cat("pose RMSE baseline [", list(base), "], zero-shot [", list(zero), "], after fine-tuning on 200 [",
                    list(tuned), "]; zero-shot below baseline on ", zero_shot_wins, "/5, fine-tuning improves on ",
                    finetune_wins, "/5; ", secs, " s")};
}

}  // namespace t3::acceptance
