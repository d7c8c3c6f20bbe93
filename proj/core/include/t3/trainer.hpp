#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "t3/checkpoint.hpp"
#include "t3/datapipe.hpp"
#include "t3/model.hpp"

namespace t3 {

enum class Stage { kPretrain1, kPretrain2, kFinetune };
std::string to_string(Stage s);
Stage parse_stage(const std::string& s);

struct TrainConfig {
  Stage stage = Stage::kPretrain2;
  std::size_t steps = 100;
  std::size_t batch_size = 8;
  double base_lr = 1e-4;
  double weight_decay = 0.05;
  std::size_t warmup_steps = 5;
  double mask_ratio = 0.8;
  Weighting weighting;
  std::uint64_t seed = 0;
  std::size_t eval_every = 0;       // 0: evaluate only at the end
  std::size_t checkpoint_every = 0;  // 0: checkpoint only at the end
  bool augment = true;

  /// Stage defaults: lr 1e-4 for pre-training, 5e-5 for fine-tuning, warmup 5%.
  static TrainConfig defaults(Stage stage, std::size_t steps);
  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
/// Missing fields keep the stage defaults.
TrainConfig train_config_from_json(const nlohmann::json& j);

/// Linear warmup from 0 to base_lr, then cosine decay to 0 at cfg.steps.
double lr_at(std::size_t step, const TrainConfig& cfg);

template <typename T>
struct AdamMoments {
  std::vector<T> m;
  std::vector<T> v;
  std::uint64_t t = 0;
};

template <typename T>
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::map<std::string, AdamMoments<T>> moments;

  std::string serialize() const;
  static AdamState deserialize(const std::string& bytes);
};

/// Parameters that receive no weight decay: vectors, norm gains/biases and
/// the learned tokens and positional tables.
bool skip_weight_decay(const std::string& name, const Shape& shape);

/// One AdamW update with decoupled decay: p -= lr * (wd * p + mhat / (sqrt(vhat) + eps)).
template <typename T>
void optimizer_step(const NamedParams<T>& params, AdamState<T>& state, double lr, double weight_decay);

enum class FreezeSubset { kNone, kTrunk, kEncoders };
FreezeSubset parse_freeze(const std::string& s);
template <typename T>
void freeze(T3Model<T>& model, FreezeSubset subset);

struct MetricRow {
  std::size_t step = 0;
  std::string stage;
  std::string pairing;
  double loss = 0.0;
  std::string metric_name;
  double metric_value = 0.0;
  double lr = 0.0;

  nlohmann::json to_json() const;
};

struct TrainState {
  std::size_t step = 0;
  AdamState<float> optimizer;
  std::optional<double> best_metric;
  std::vector<MetricRow> log;

  nlohmann::json summary() const;
};

struct EvalResult {
  std::string task;
  std::string metric;  // "top1", "rmse" or "mae_loss"
  double value = 0.0;
  double baseline_rmse = 0.0;  // dataset-average predictor, regression only
  std::size_t n = 0;
};

/// Classification: top-1 accuracy. Regression: RMSE over every label
/// component, with the RMSE of the val-mean predictor as baseline.
EvalResult evaluate(const T3Model<float>& model, const PairingDataset& val, const TaskSpec& task,
                    std::size_t batch_size = 16);

double top1_accuracy(const Tensor<float>& logits, const std::vector<int>& labels);
double rmse(const std::vector<double>& pred, const std::vector<double>& target);

struct NanAbort : std::runtime_error {
  using std::runtime_error::runtime_error;
  std::size_t step = 0;
};

struct RunOptions {
  /// Checkpoint written at the end and every checkpoint_every steps.
  std::string checkpoint_path;
  /// Newline-delimited JSON metric rows, appended.
  std::string metric_log_path;
  /// Validation data per pairing index, evaluated every eval_every steps.
  std::vector<const PairingDataset*> val;
  /// Called after every optimizer step with (step, loss).
  std::function<void(std::size_t, double)> on_step;
  /// Called after backward and before the optimizer update.
  std::function<void(std::size_t, const std::string& sensor, const std::string& task)> after_backward;
  /// Train for at most this many steps in this call (for split runs).
  std::optional<std::size_t> max_steps;
};

/// Runs one stage. Every step picks a pairing, builds a homogeneous batch,
/// computes the stage loss and updates only the unfrozen part of that
/// pairing's trainable set. Throws NanAbort on a non-finite loss, leaving
/// the last written checkpoint untouched.
TrainState run_stage(T3Model<float>& model, const std::vector<PairingDataset>& data, const TrainConfig& cfg,
                     const RunOptions& opts = {}, std::optional<TrainState> resume = std::nullopt);

/// Loss of one step without an update; used by tests and the CLI.
Tensor<float> stage_loss(const T3Model<float>& model, const PairingDataset& data, const TrainConfig& cfg,
                         std::size_t step, const PairingDraw& draw);

/// Extra checkpoint members for trainer state.
std::map<std::string, std::string> trainer_members(const TrainConfig& cfg, const TrainState& state);
/// Restores step, optimizer and best metric from a checkpoint.
TrainState restore_state(const Checkpoint& ckpt);

}  // namespace t3
