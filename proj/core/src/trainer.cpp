#include "t3/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include "t3/mae.hpp"

namespace t3 {

static_assert(std::endian::native == std::endian::little, "optimizer blobs assume a little-endian host");

std::string to_string(Stage s) {
  switch (s) {
    case Stage::kPretrain1:
      return "pretrain1";
    case Stage::kPretrain2:
      return "pretrain2";
    case Stage::kFinetune:
      return "finetune";
  }
  return "?";
}

Stage parse_stage(const std::string& s) {
  if (s == "pretrain1") return Stage::kPretrain1;
  if (s == "pretrain2") return Stage::kPretrain2;
  if (s == "finetune") return Stage::kFinetune;
  throw std::invalid_argument("unknown stage '" + s + "'");
}

TrainConfig TrainConfig::defaults(Stage stage, std::size_t steps) {
  TrainConfig c;
  c.stage = stage;
  c.steps = steps;
  c.base_lr = stage == Stage::kFinetune ? 5e-5 : 1e-4;
  c.warmup_steps = steps * 5 / 100;
  return c;
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
  if (!(steps > warmup_steps)) throw std::invalid_argument("steps must exceed warmup_steps");
  if (!(base_lr >= 0.0) || !(weight_decay >= 0.0)) throw std::invalid_argument("lr and weight decay must be >= 0");
  if (stage == Stage::kPretrain1 && !(mask_ratio >= 0.0 && mask_ratio < 1.0)) {
    throw std::invalid_argument("mask_ratio must be in [0, 1)");
  }
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"stage", to_string(c.stage)},
          {"steps", c.steps},
          {"batch_size", c.batch_size},
          {"base_lr", c.base_lr},
          {"weight_decay", c.weight_decay},
          {"warmup_steps", c.warmup_steps},
          {"mask_ratio", c.mask_ratio},
          {"pairing_weighting", c.weighting.str()},
          {"seed", c.seed},
          {"eval_every", c.eval_every},
          {"checkpoint_every", c.checkpoint_every},
          {"augment", c.augment}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  const Stage stage = parse_stage(j.at("stage").get<std::string>());
  const auto steps = j.value("steps", std::size_t{100});
  TrainConfig c = TrainConfig::defaults(stage, steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.base_lr = j.value("base_lr", c.base_lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.mask_ratio = j.value("mask_ratio", c.mask_ratio);
  if (j.contains("pairing_weighting")) c.weighting = Weighting::parse(j.at("pairing_weighting").get<std::string>());
  c.seed = j.value("seed", c.seed);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.augment = j.value("augment", c.augment);
  return c;
}

double lr_at(std::size_t step, const TrainConfig& cfg) {
  if (step < cfg.warmup_steps) return cfg.base_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  if (step >= cfg.steps) return 0.0;
  const double span = static_cast<double>(cfg.steps - cfg.warmup_steps);
  const double progress = static_cast<double>(step - cfg.warmup_steps) / span;
  return cfg.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---- optimizer ----------------------------------------------------------------

namespace {

template <typename U>
void put(std::string& out, U v) {
  char b[sizeof(U)];
  std::memcpy(b, &v, sizeof(U));
  out.append(b, sizeof(U));
}

template <typename U>
U take(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(U) > in.size()) throw std::runtime_error("truncated optimizer state");
  U v;
  std::memcpy(&v, in.data() + pos, sizeof(U));
  pos += sizeof(U);
  return v;
}

constexpr char kAdamMagic[8] = {'T', '3', 'A', 'D', 'A', 'M', '1', '\0'};

}  // namespace

template <typename T>
std::string AdamState<T>::serialize() const {
  std::string out(kAdamMagic, 8);
  put<std::uint32_t>(out, sizeof(T));
  put(out, beta1);
  put(out, beta2);
  put(out, eps);
  put<std::uint64_t>(out, moments.size());
  for (const auto& [name, mo] : moments) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint64_t>(out, mo.t);
    put<std::uint64_t>(out, mo.m.size());
    out.append(reinterpret_cast<const char*>(mo.m.data()), mo.m.size() * sizeof(T));
    out.append(reinterpret_cast<const char*>(mo.v.data()), mo.v.size() * sizeof(T));
  }
  return out;
}

template <typename T>
AdamState<T> AdamState<T>::deserialize(const std::string& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kAdamMagic, 8) != 0) {
    throw std::runtime_error("not an optimizer state blob");
  }
  std::size_t pos = 8;
  if (take<std::uint32_t>(bytes, pos) != sizeof(T)) throw std::runtime_error("optimizer state precision mismatch");
  AdamState<T> s;
  s.beta1 = take<double>(bytes, pos);
  s.beta2 = take<double>(bytes, pos);
  s.eps = take<double>(bytes, pos);
  const auto count = take<std::uint64_t>(bytes, pos);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = take<std::uint32_t>(bytes, pos);
    if (pos + len > bytes.size()) throw std::runtime_error("truncated optimizer state");
    std::string name = bytes.substr(pos, len);
    pos += len;
    AdamMoments<T> mo;
    mo.t = take<std::uint64_t>(bytes, pos);
    const auto n = take<std::uint64_t>(bytes, pos);
    if (pos + 2 * n * sizeof(T) > bytes.size()) throw std::runtime_error("truncated optimizer state");
    mo.m.resize(n);
    mo.v.resize(n);
    std::memcpy(mo.m.data(), bytes.data() + pos, n * sizeof(T));
    pos += n * sizeof(T);
    std::memcpy(mo.v.data(), bytes.data() + pos, n * sizeof(T));
    pos += n * sizeof(T);
    s.moments.emplace(std::move(name), std::move(mo));
  }
  return s;
}

bool skip_weight_decay(const std::string& name, const Shape& shape) {
  if (shape.size() <= 1) return true;
  auto ends_with = [&](const char* suffix) {
    const std::size_t n = std::strlen(suffix);
    return name.size() >= n && name.compare(name.size() - n, n, suffix) == 0;
  };
  return ends_with(".gain") || ends_with(".bias") || ends_with("cls_token") || ends_with("pos_embed") ||
         ends_with("mask_token");
}

template <typename T>
void optimizer_step(const NamedParams<T>& params, AdamState<T>& state, double lr, double weight_decay) {
  for (const auto& [name, p_const] : params) {
    Tensor<T> p = p_const;
    if (!p.has_grad()) continue;
    auto& mo = state.moments[name];
    const std::size_t n = p.numel();
    if (mo.m.empty()) {
      mo.m.assign(n, T(0));
      mo.v.assign(n, T(0));
    }
    if (mo.m.size() != n) throw ShapeError("optimizer state for '" + name + "' does not match the parameter shape");
    mo.t += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(mo.t));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(mo.t));
    const double decay = skip_weight_decay(name, p.shape()) ? 1.0 : 1.0 - lr * weight_decay;
    auto w = p.data();
    auto g = p.grad();
    for (std::size_t i = 0; i < n; ++i) {
      const double gi = static_cast<double>(g[i]);
      const double m = state.beta1 * static_cast<double>(mo.m[i]) + (1.0 - state.beta1) * gi;
      const double v = state.beta2 * static_cast<double>(mo.v[i]) + (1.0 - state.beta2) * gi * gi;
      mo.m[i] = static_cast<T>(m);
      mo.v[i] = static_cast<T>(v);
      const double update = (m / bc1) / (std::sqrt(v / bc2) + state.eps);
      w[i] = static_cast<T>(static_cast<double>(w[i]) * decay - lr * update);
    }
  }
}

FreezeSubset parse_freeze(const std::string& s) {
  if (s == "none") return FreezeSubset::kNone;
  if (s == "trunk") return FreezeSubset::kTrunk;
  if (s == "encoders") return FreezeSubset::kEncoders;
  throw std::invalid_argument("unknown freeze subset '" + s + "'");
}

template <typename T>
void freeze(T3Model<T>& model, FreezeSubset subset) {
  for (const auto& c : model.components()) {
    bool on = false;
    if (subset == FreezeSubset::kTrunk) on = c == "trunk";
    if (subset == FreezeSubset::kEncoders) on = c.rfind("encoder.", 0) == 0;
    model.set_frozen(c, on);
  }
}

// ---- metrics -------------------------------------------------------------------

nlohmann::json MetricRow::to_json() const {
  return {{"step", step},       {"stage", stage},   {"pairing", pairing}, {"loss", loss}, {"metric_name", metric_name},
          {"metric_value", metric_value}, {"lr", lr}};
}

nlohmann::json TrainState::summary() const {
  nlohmann::json j{{"step", step}, {"log_rows", log.size()}};
  if (best_metric) j["best_metric"] = *best_metric;
  return j;
}

double top1_accuracy(const Tensor<float>& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) throw ShapeError("top1: logits/labels mismatch");
  if (labels.empty()) throw std::invalid_argument("top1: empty batch");
  const std::size_t C = logits.dim(1);
  auto d = logits.data();
  std::size_t hit = 0;
  for (std::size_t b = 0; b < labels.size(); ++b) {
    const auto row = d.subspan(b * C, C);
    const auto arg = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    hit += arg == labels[b] ? 1 : 0;
  }
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

double rmse(const std::vector<double>& pred, const std::vector<double>& target) {
  if (pred.size() != target.size() || pred.empty()) throw std::invalid_argument("rmse: size mismatch or empty");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - target[i]) * (pred[i] - target[i]);
  return std::sqrt(s / static_cast<double>(pred.size()));
}

EvalResult evaluate(const T3Model<float>& model, const PairingDataset& val, const TaskSpec& task,
                    std::size_t batch_size) {
  if (val.samples.empty()) throw std::invalid_argument("evaluate: empty validation set");
  if (batch_size == 0) throw std::invalid_argument("evaluate: batch_size must be >= 1");
  NoGradGuard ng;
  EvalResult r;
  r.task = task.id;
  r.n = val.samples.size();
  std::size_t hits = 0;
  double mae_sum = 0.0;
  std::vector<double> pred, target;
  for (std::size_t begin = 0; begin < val.samples.size(); begin += batch_size) {
    const std::size_t end = std::min(val.samples.size(), begin + batch_size);
    std::vector<std::size_t> idx(end - begin);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = begin + i;
    const PairingBatch<float> b = make_batch<float>(val, task, idx, std::nullopt);
    switch (task.decoder.kind) {
      case DecoderKind::kClassifier: {
        const Tensor<float> logits = model.forward(val.sensor, task.id, b.images);
        hits += static_cast<std::size_t>(std::lround(top1_accuracy(logits, b.class_labels) * idx.size()));
        break;
      }
      case DecoderKind::kVolRegressor:
      case DecoderKind::kPose: {
        const Tensor<float> out = model.forward(val.sensor, task.id, b.images);
        for (float v : out.data()) pred.push_back(v);
        for (float v : b.targets.data()) target.push_back(v);
        break;
      }
      case DecoderKind::kMaeRecon:
        mae_sum += static_cast<double>(mae_forward(model, val.sensor, b.images[0], 0.8, 0).item()) *
                   static_cast<double>(idx.size());
        break;
    }
  }
  switch (task.decoder.kind) {
    case DecoderKind::kClassifier:
      r.metric = "top1";
      r.value = static_cast<double>(hits) / static_cast<double>(r.n);
      break;
    case DecoderKind::kVolRegressor:
    case DecoderKind::kPose: {
      r.metric = "rmse";
      r.value = rmse(pred, target);
      const std::size_t k = task.decoder.output_dim();
      std::vector<double> mean(k, 0.0);
      for (std::size_t i = 0; i < target.size(); ++i) mean[i % k] += target[i];
      for (auto& m : mean) m /= static_cast<double>(r.n);
      std::vector<double> base(target.size());
      for (std::size_t i = 0; i < target.size(); ++i) base[i] = mean[i % k];
      r.baseline_rmse = rmse(base, target);
      break;
    }
    case DecoderKind::kMaeRecon:
      r.metric = "mae_loss";
      r.value = mae_sum / static_cast<double>(r.n);
      break;
  }
  return r;
}

// ---- training loop ---------------------------------------------------------------

namespace {

constexpr std::uint64_t kAugmentSalt = 0xa11ce;
constexpr std::uint64_t kMaskSalt = 0x3a5c;

TaskSpec batch_task(const T3Model<float>& model, const PairingDataset& data, Stage stage) {
  if (stage == Stage::kPretrain1) {
    // Reconstruction reads images only; pose pairings keep their no-flip policy.
    TaskSpec t{data.task, DecoderSpec::mae(), ""};
    if (model.has_task(data.task) && model.task(data.task).decoder.kind == DecoderKind::kPose) {
      t.decoder.kind = DecoderKind::kPose;
    }
    return t;
  }
  return model.task(data.task);
}

bool higher_is_better(const std::string& metric) { return metric == "top1"; }

}  // namespace

Tensor<float> stage_loss(const T3Model<float>& model, const PairingDataset& data, const TrainConfig& cfg,
                         std::size_t step, const PairingDraw& draw) {
  const TaskSpec task = batch_task(model, data, cfg.stage);
  std::optional<std::uint64_t> aug;
  if (cfg.augment) aug = mix_seed(cfg.seed ^ kAugmentSalt, step);
  if (cfg.stage == Stage::kPretrain1) {
    TaskSpec images_only = task;
    images_only.decoder.arity = 1;
    const DecoderKind kind = images_only.decoder.kind;
    images_only.decoder.kind = DecoderKind::kMaeRecon;
    AugmentOptions ao;
    ao.spatial = kind != DecoderKind::kPose;
    const PairingBatch<float> b = make_batch<float>(data, images_only, draw.indices, aug, ao);
    return mae_forward(model, data.sensor, b.images[0], cfg.mask_ratio, mix_seed(cfg.seed ^ kMaskSalt, step));
  }
  const PairingBatch<float> b = make_batch<float>(data, task, draw.indices, aug);
  const Tensor<float> out = model.forward(data.sensor, task.id, b.images);
  if (task.decoder.kind == DecoderKind::kClassifier) return cross_entropy(out, std::span<const int>(b.class_labels));
  return mse_loss(out, b.targets);
}

std::map<std::string, std::string> trainer_members(const TrainConfig& cfg, const TrainState& state) {
  return {{"optimizer.bin", state.optimizer.serialize()},
          {"train_config.json", to_json(cfg).dump(2)},
          {"train_state.json", state.summary().dump(2)}};
}

TrainState restore_state(const Checkpoint& ckpt) {
  TrainState s;
  const auto summary = nlohmann::json::parse(ckpt.member("train_state.json"));
  s.step = summary.at("step").get<std::size_t>();
  if (summary.contains("best_metric")) s.best_metric = summary.at("best_metric").get<double>();
  s.optimizer = AdamState<float>::deserialize(ckpt.member("optimizer.bin"));
  return s;
}

TrainState run_stage(T3Model<float>& model, const std::vector<PairingDataset>& data, const TrainConfig& cfg,
                     const RunOptions& opts, std::optional<TrainState> resume) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("run_stage: no pairings");
  if (cfg.stage == Stage::kPretrain1 && model.mae_task().empty()) {
    throw std::invalid_argument("pretrain1 needs a reconstruction decoder");
  }
  std::vector<PairingInfo> infos;
  std::vector<std::size_t> data_index;
  for (std::size_t i = 0; i < data.size(); ++i) {
    model.group_of(data[i].sensor);
    if (cfg.stage != Stage::kPretrain1) model.task(data[i].task);
    if (data[i].samples.size() >= cfg.batch_size) data_index.push_back(i);
    infos.push_back({data[i].sensor, data[i].task, data[i].samples.size()});
  }
  const PairingSampler sampler(infos, cfg.batch_size, cfg.weighting, cfg.seed);

  TrainState state = resume ? std::move(*resume) : TrainState{};
  std::ofstream log;
  if (!opts.metric_log_path.empty()) {
    log.open(opts.metric_log_path, std::ios::app);
    if (!log) throw std::runtime_error("cannot open metric log '" + opts.metric_log_path + "'");
  }
  auto emit = [&](MetricRow row) {
    if (log.is_open()) {
      log << row.to_json().dump() << "\n";
      log.flush();
    }
    state.log.push_back(std::move(row));
  };
  auto checkpoint = [&] {
    if (!opts.checkpoint_path.empty()) save_checkpoint(opts.checkpoint_path, model, trainer_members(cfg, state));
  };
  auto run_eval = [&](std::size_t step) {
    for (std::size_t i = 0; i < opts.val.size() && i < data.size(); ++i) {
      if (!opts.val[i]) continue;
      const TaskSpec task = cfg.stage == Stage::kPretrain1 ? model.task(model.mae_task()) : model.task(data[i].task);
      const EvalResult r = evaluate(model, *opts.val[i], task);
      MetricRow row{step, to_string(cfg.stage), data[i].sensor + "/" + data[i].task, 0.0, r.metric, r.value,
                    lr_at(step, cfg)};
      if (!state.best_metric || (higher_is_better(r.metric) ? r.value > *state.best_metric : r.value < *state.best_metric)) {
        state.best_metric = r.value;
      }
      emit(row);
    }
  };

  const std::size_t stop = opts.max_steps ? std::min(cfg.steps, state.step + *opts.max_steps) : cfg.steps;
  const std::string stage = to_string(cfg.stage);
  while (state.step < stop) {
    const std::size_t step = state.step;
    const PairingDraw draw = sampler.draw(step);
    const PairingDataset& ds = data[data_index.at(draw.pairing)];
    model.zero_grad();
    const Tensor<float> loss = stage_loss(model, ds, cfg, step, draw);
    const double value = static_cast<double>(loss.item());
    if (!std::isfinite(value)) {
      NanAbort e("non-finite loss at step " + std::to_string(step + 1) + " on pairing " + ds.sensor + "/" + ds.task);
      e.step = step + 1;
      throw e;
    }
    loss.backward();
    const std::string task_id = cfg.stage == Stage::kPretrain1 ? model.mae_task() : ds.task;
    if (opts.after_backward) opts.after_backward(step, ds.sensor, task_id);
    NamedParams<float> params;
    for (const auto& c : model.trainable_components(ds.sensor, task_id)) {
      if (model.is_frozen(c)) continue;
      NamedParams<float> part = model.component_parameters(c);
      params.insert(params.end(), part.begin(), part.end());
    }
    const double lr = lr_at(step, cfg);
    optimizer_step(params, state.optimizer, lr, cfg.weight_decay);
    state.step = step + 1;
    emit({state.step, stage, ds.sensor + "/" + ds.task, value, "loss", value, lr});
    if (opts.on_step) opts.on_step(state.step, value);
    const bool last = state.step == cfg.steps;
    if (cfg.eval_every && state.step % cfg.eval_every == 0 && !last) run_eval(state.step);
    if (cfg.checkpoint_every && state.step % cfg.checkpoint_every == 0 && !last) checkpoint();
  }
  if (state.step == cfg.steps) run_eval(state.step);
  checkpoint();
  return state;
}

template struct AdamState<float>;
template struct AdamState<double>;
template void optimizer_step(const NamedParams<float>&, AdamState<float>&, double, double);
template void optimizer_step(const NamedParams<double>&, AdamState<double>&, double, double);
template void freeze(T3Model<float>&, FreezeSubset);
template void freeze(T3Model<double>&, FreezeSubset);

}  // namespace t3
