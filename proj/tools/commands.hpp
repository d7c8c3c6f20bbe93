#pragma once

#include <functional>
#include <nlohmann/json.hpp>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace t3::cli {

enum ExitCode { kOk = 0, kIoError = 1, kConfigError = 2, kNumericAbort = 3 };

/// Bad flags, config values or unresolvable pairings.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct SynthArgs {
  std::size_t styles = 3;
  std::size_t per_pairing = 100;
  std::size_t val_per_pairing = 0;
  std::vector<std::string> tasks{"object_cls"};
  std::uint64_t seed = 0;
  std::string out;
};

/// Stage flags. Unset optionals fall back to the config file, then to the
/// stage defaults.
struct TrainArgs {
  std::string stage;
  std::string config_path;
  std::optional<std::string> data, out, init, resume, donor_group, sensor, task, freeze, size, weighting;
  std::optional<std::size_t> steps, batch_size, warmup_steps, eval_every, checkpoint_every, limit;
  std::optional<double> lr, weight_decay, mask_ratio;
  std::optional<std::uint64_t> seed;
  bool no_augment = false;
};

struct EvalArgs {
  std::string ckpt, data, task;
  std::optional<std::string> sensor, donor_group;
  std::string split = "val";
  std::size_t limit = 0;
  bool baseline = false;
};

struct AttnvizArgs {
  std::string ckpt, image, sensor, out;
};

struct SweepArgs {
  std::vector<double> ratios{0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
  std::size_t steps = 60;
  std::size_t finetune_steps = 40;
  std::size_t batch_size = 4;
  std::size_t per_pairing = 24;
  std::uint64_t seed = 0;
  std::optional<std::string> data;
  std::string out;
};

int cmd_synth(const SynthArgs& a);
int cmd_train(const TrainArgs& a);
int cmd_eval(const EvalArgs& a);
int cmd_attnviz(const AttnvizArgs& a);
int cmd_mask_sweep(const SweepArgs& a);

/// Written to <out>/run_manifest.json before any work.
nlohmann::json run_manifest(const std::string& command, const std::string& config_path, const nlohmann::json& config,
                            std::uint64_t seed, const std::string& out);
void write_run_manifest(const std::string& out, const nlohmann::json& manifest);

/// Runs `body`, mapping exceptions to exit codes. On failure with a
/// non-empty `out`, leaves <out>/.failed holding the message.
int guarded(const std::string& out, const std::function<int()>& body);

}  // namespace t3::cli
