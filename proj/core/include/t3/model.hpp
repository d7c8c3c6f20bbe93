#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "t3/decoders.hpp"
#include "t3/vit.hpp"

namespace t3 {

/// Encoder width/heads/depth and trunk depth. The trunk shares the encoder
/// width and head count.
struct SizeConfig {
  std::string name;
  std::size_t dim = 0;
  std::size_t heads = 0;
  std::size_t enc_layers = 0;
  std::size_t trunk_layers = 0;
  MaeDecoderConfig mae;
};

/// tiny, small, medium, large (network-size table) and nano (CI scale).
SizeConfig size_config(const std::string& name);

struct TaskSpec {
  std::string id;
  DecoderSpec decoder;
  /// Label field read from shard records ("object_id", "sigma", "pose3", ...).
  std::string label;
};

struct ModelSpec {
  SizeConfig size;
  std::size_t image_size = 224;
  std::size_t patch_size = 16;
  std::vector<std::string> sensors;
  std::map<std::string, std::string> share_map;  // sensor -> encoder group
  std::vector<TaskSpec> tasks;

  ViTConfig encoder_config() const;
  ViTConfig trunk_config() const;
};

nlohmann::json to_json(const SizeConfig& s);
nlohmann::json to_json(const TaskSpec& t);
nlohmann::json to_json(const ModelSpec& m);
SizeConfig size_config_from_json(const nlohmann::json& j);
TaskSpec task_spec_from_json(const nlohmann::json& j);
ModelSpec model_spec_from_json(const nlohmann::json& j);

/// Sensor-specific encoders, one shared trunk, task-specific decoders.
///
/// Parameter names are prefixed by component: "encoder.<group>", "trunk",
/// "decoder.<task>". A batch is always routed through exactly one encoder
/// group and one decoder.
template <typename T>
class T3Model {
 public:
  static T3Model assemble(const ModelSpec& spec, std::uint64_t seed);

  T3Model(T3Model&&) noexcept = default;
  T3Model& operator=(T3Model&&) noexcept = default;
  T3Model(const T3Model&) = delete;
  T3Model& operator=(const T3Model&) = delete;

  const ModelSpec& spec() const { return spec_; }
  std::uint64_t seed() const { return seed_; }
  const ViTConfig& geometry() const { return enc_cfg_; }

  const std::string& group_of(const std::string& sensor) const;
  const TaskSpec& task(const std::string& id) const;
  bool has_sensor(const std::string& sensor) const { return spec_.share_map.count(sensor) != 0; }
  bool has_task(const std::string& id) const { return decoders_.count(id) != 0; }
  /// Id of the (single) masked-reconstruction task, or empty.
  std::string mae_task() const;

  ViTStack<T>& encoder(const std::string& group);
  const ViTStack<T>& encoder(const std::string& group) const;
  ViTStack<T>& trunk() { return trunk_; }
  const ViTStack<T>& trunk() const { return trunk_; }
  Decoder<T>& decoder(const std::string& task_id);
  const Decoder<T>& decoder(const std::string& task_id) const;

  /// images [B,3,S,S] -> patches [B,T,patch_dim].
  Tensor<T> to_patches(const Tensor<T>& images) const;
  /// Trunk(Enc_group(sensor)(patches)). `keep` restricts the encoder to the
  /// listed patch indices per sample.
  Tensor<T> trunk_tokens(const std::string& sensor, const Tensor<T>& patches, AttentionTrace* encoder_trace = nullptr,
                         AttentionTrace* trunk_trace = nullptr,
                         const std::vector<std::vector<std::size_t>>* keep = nullptr) const;

  Tensor<T> forward_single(const std::string& sensor, const std::string& task_id, const Tensor<T>& images) const;
  Tensor<T> forward_dual(const std::string& sensor, const std::string& task_id, const Tensor<T>& images_a,
                         const Tensor<T>& images_b) const;
  /// Dispatches on the task's arity.
  Tensor<T> forward(const std::string& sensor, const std::string& task_id, const std::vector<Tensor<T>>& images) const;

  NamedParams<T> parameters() const;
  std::vector<std::string> components() const;
  NamedParams<T> component_parameters(const std::string& component) const;
  /// Exactly {Enc_group(sensor), Trunk, Dec_task}.
  NamedParams<T> trainable_set(const std::string& sensor, const std::string& task_id) const;
  std::vector<std::string> trainable_components(const std::string& sensor, const std::string& task_id) const;

  /// Routes `new_sensor` through an existing encoder group; copies nothing.
  void substitute_encoder(const std::string& new_sensor, const std::string& donor_group);
  /// Registers a sensor, creating a fresh encoder when the group is new.
  void add_sensor(const std::string& sensor, const std::string& group);
  void add_task(const TaskSpec& task);

  std::size_t param_count() const;
  void zero_grad();

  /// Frozen components still receive gradients but are skipped by the
  /// optimizer.
  void set_frozen(const std::string& component, bool frozen);
  bool is_frozen(const std::string& component) const { return frozen_.count(component) != 0; }
  const std::set<std::string>& frozen() const { return frozen_; }

 private:
  T3Model() = default;
  void build_encoder(const std::string& group);
  void build_decoder(const TaskSpec& task);

  ModelSpec spec_;
  std::uint64_t seed_ = 0;
  ViTConfig enc_cfg_;
  ViTConfig trunk_cfg_;
  std::map<std::string, ViTStack<T>> encoders_;
  ViTStack<T> trunk_;
  std::map<std::string, Decoder<T>> decoders_;
  std::set<std::string> frozen_;
};

}  // namespace t3
