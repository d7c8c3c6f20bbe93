#include "t3/model.hpp"

#include <algorithm>
#include <stdexcept>

namespace t3 {

SizeConfig size_config(const std::string& name) {
  // Width, heads, encoder depth, trunk depth, then the MAE decoder (width,
  // heads, blocks). nano shrinks everything for CPU tests.
  if (name == "tiny") return {"tiny", 192, 3, 3, 9, {512, 16, 8}};
  if (name == "small") return {"small", 384, 6, 3, 9, {512, 16, 8}};
  if (name == "medium") return {"medium", 768, 12, 3, 9, {512, 16, 8}};
  if (name == "large") return {"large", 1024, 8, 3, 9, {512, 16, 8}};
  if (name == "nano") return {"nano", 64, 2, 2, 3, {64, 2, 2}};
  throw std::invalid_argument("unknown size config '" + name + "'");
}

ViTConfig ModelSpec::encoder_config() const {
  ViTConfig c;
  c.embed_dim = size.dim;
  c.heads = size.heads;
  c.layers = size.enc_layers;
  c.image_size = image_size;
  c.patch_size = patch_size;
  c.with_cls_token = true;
  return c;
}

ViTConfig ModelSpec::trunk_config() const {
  ViTConfig c = encoder_config();
  c.layers = size.trunk_layers;
  return c;
}

nlohmann::json to_json(const SizeConfig& s) {
  return {{"name", s.name},
          {"dim", s.dim},
          {"heads", s.heads},
          {"enc_layers", s.enc_layers},
          {"trunk_layers", s.trunk_layers},
          {"mae", {{"dim", s.mae.dim}, {"heads", s.mae.heads}, {"layers", s.mae.layers}}}};
}

nlohmann::json to_json(const TaskSpec& t) {
  nlohmann::json j{{"id", t.id}, {"kind", to_string(t.decoder.kind)}, {"label", t.label}};
  if (t.decoder.kind == DecoderKind::kClassifier) j["classes"] = t.decoder.num_classes;
  if (t.decoder.kind == DecoderKind::kPose) {
    j["dof"] = t.decoder.dof;
    j["arity"] = t.decoder.arity;
  }
  return j;
}

nlohmann::json to_json(const ModelSpec& m) {
  nlohmann::json tasks = nlohmann::json::array();
  for (const auto& t : m.tasks) tasks.push_back(to_json(t));
  return {{"size", to_json(m.size)},   {"image_size", m.image_size}, {"patch_size", m.patch_size},
          {"sensors", m.sensors},      {"share_map", m.share_map},   {"tasks", tasks}};
}

SizeConfig size_config_from_json(const nlohmann::json& j) {
  if (j.is_string()) return size_config(j.get<std::string>());
  SizeConfig s = j.contains("name") ? size_config(j.at("name").get<std::string>()) : SizeConfig{};
  s.name = j.value("name", s.name);
  s.dim = j.value("dim", s.dim);
  s.heads = j.value("heads", s.heads);
  s.enc_layers = j.value("enc_layers", s.enc_layers);
  s.trunk_layers = j.value("trunk_layers", s.trunk_layers);
  if (j.contains("mae")) {
    const auto& m = j.at("mae");
    s.mae.dim = m.value("dim", s.mae.dim);
    s.mae.heads = m.value("heads", s.mae.heads);
    s.mae.layers = m.value("layers", s.mae.layers);
  }
  return s;
}

TaskSpec task_spec_from_json(const nlohmann::json& j) {
  TaskSpec t;
  t.id = j.at("id").get<std::string>();
  const DecoderKind kind = parse_decoder_kind(j.at("kind").get<std::string>());
  switch (kind) {
    case DecoderKind::kMaeRecon:
      t.decoder = DecoderSpec::mae();
      break;
    case DecoderKind::kClassifier:
      t.decoder = DecoderSpec::classifier(j.at("classes").get<std::size_t>());
      break;
    case DecoderKind::kVolRegressor:
      t.decoder = DecoderSpec::vol_regressor();
      break;
    case DecoderKind::kPose:
      t.decoder = DecoderSpec::pose(j.value("dof", std::size_t{3}), j.value("arity", std::size_t{2}));
      break;
  }
  std::string default_label;
  switch (kind) {
    case DecoderKind::kClassifier:
      default_label = "object_id";
      break;
    case DecoderKind::kVolRegressor:
      default_label = "sigma";
      break;
    case DecoderKind::kPose:
      default_label = t.decoder.dof == 6 ? "pose6" : "pose3";
      break;
    case DecoderKind::kMaeRecon:
      break;
  }
  t.label = j.value("label", default_label);
  t.decoder.validate();
  return t;
}

ModelSpec model_spec_from_json(const nlohmann::json& j) {
  ModelSpec m;
  m.size = size_config_from_json(j.at("size"));
  m.image_size = j.value("image_size", m.image_size);
  m.patch_size = j.value("patch_size", m.patch_size);
  m.sensors = j.at("sensors").get<std::vector<std::string>>();
  if (j.contains("share_map")) {
    m.share_map = j.at("share_map").get<std::map<std::string, std::string>>();
  } else {
    for (const auto& s : m.sensors) m.share_map[s] = s;
  }
  for (const auto& t : j.at("tasks")) m.tasks.push_back(task_spec_from_json(t));
  return m;
}

// ---- T3Model ---------------------------------------------------------------

template <typename T>
T3Model<T> T3Model<T>::assemble(const ModelSpec& spec, std::uint64_t seed) {
  T3Model<T> m;
  m.spec_ = spec;
  m.spec_.tasks.clear();
  m.seed_ = seed;
  m.enc_cfg_ = spec.encoder_config();
  m.trunk_cfg_ = spec.trunk_config();
  m.enc_cfg_.validate();
  for (const auto& s : spec.sensors) {
    if (!spec.share_map.count(s)) throw std::invalid_argument("share_map has no entry for sensor '" + s + "'");
  }
  std::vector<std::string> groups;
  for (const auto& [sensor, group] : spec.share_map) groups.push_back(group);
  std::sort(groups.begin(), groups.end());
  groups.erase(std::unique(groups.begin(), groups.end()), groups.end());
  for (const auto& g : groups) m.build_encoder(g);
  m.trunk_ = ViTStack<T>(m.trunk_cfg_, {.patch_embed = false, .final_norm = true}, "trunk", seed);
  for (const auto& t : spec.tasks) m.add_task(t);
  return m;
}

template <typename T>
void T3Model<T>::build_encoder(const std::string& group) {
  encoders_.emplace(group, ViTStack<T>(enc_cfg_, {.patch_embed = true, .final_norm = false}, "encoder." + group, seed_));
}

template <typename T>
void T3Model<T>::build_decoder(const TaskSpec& task) {
  decoders_.emplace(task.id, Decoder<T>::make(task.decoder, trunk_cfg_.embed_dim, spec_.size.mae, enc_cfg_,
                                              "decoder." + task.id, seed_));
}

template <typename T>
const std::string& T3Model<T>::group_of(const std::string& sensor) const {
  auto it = spec_.share_map.find(sensor);
  if (it == spec_.share_map.end()) throw std::invalid_argument("unknown sensor '" + sensor + "'");
  return it->second;
}

template <typename T>
const TaskSpec& T3Model<T>::task(const std::string& id) const {
  for (const auto& t : spec_.tasks) {
    if (t.id == id) return t;
  }
  throw std::invalid_argument("unknown task '" + id + "'");
}

template <typename T>
std::string T3Model<T>::mae_task() const {
  for (const auto& t : spec_.tasks) {
    if (t.decoder.kind == DecoderKind::kMaeRecon) return t.id;
  }
  return {};
}

template <typename T>
ViTStack<T>& T3Model<T>::encoder(const std::string& group) {
  auto it = encoders_.find(group);
  if (it == encoders_.end()) throw std::invalid_argument("unknown encoder group '" + group + "'");
  return it->second;
}

template <typename T>
const ViTStack<T>& T3Model<T>::encoder(const std::string& group) const {
  auto it = encoders_.find(group);
  if (it == encoders_.end()) throw std::invalid_argument("unknown encoder group '" + group + "'");
  return it->second;
}

template <typename T>
Decoder<T>& T3Model<T>::decoder(const std::string& task_id) {
  auto it = decoders_.find(task_id);
  if (it == decoders_.end()) throw std::invalid_argument("unknown task '" + task_id + "'");
  return it->second;
}

template <typename T>
const Decoder<T>& T3Model<T>::decoder(const std::string& task_id) const {
  auto it = decoders_.find(task_id);
  if (it == decoders_.end()) throw std::invalid_argument("unknown task '" + task_id + "'");
  return it->second;
}

template <typename T>
Tensor<T> T3Model<T>::to_patches(const Tensor<T>& images) const {
  return patchify(images, enc_cfg_.patch_size, enc_cfg_.image_size);
}

template <typename T>
Tensor<T> T3Model<T>::trunk_tokens(const std::string& sensor, const Tensor<T>& patches, AttentionTrace* encoder_trace,
                                   AttentionTrace* trunk_trace,
                                   const std::vector<std::vector<std::size_t>>* keep) const {
  const ViTStack<T>& enc = encoder(group_of(sensor));
  return trunk_.run_blocks(enc.forward(patches, encoder_trace, keep), trunk_trace);
}

template <typename T>
Tensor<T> T3Model<T>::forward_single(const std::string& sensor, const std::string& task_id,
                                     const Tensor<T>& images) const {
  const Decoder<T>& dec = decoder(task_id);
  if (dec.spec.arity != 1) {
    throw std::invalid_argument("task '" + task_id + "' expects " + std::to_string(dec.spec.arity) + " images, got 1");
  }
  Tensor<T> tokens = trunk_tokens(sensor, to_patches(images));
  if (const auto* head = std::get_if<MlpHead<T>>(&dec.head)) return (*head)(tokens);
  if (const auto* pose = std::get_if<PoseDecoder<T>>(&dec.head)) return (*pose)({tokens});
  throw std::invalid_argument("task '" + task_id + "' is a reconstruction task; use mae_step");
}

template <typename T>
Tensor<T> T3Model<T>::forward_dual(const std::string& sensor, const std::string& task_id, const Tensor<T>& images_a,
                                   const Tensor<T>& images_b) const {
  const Decoder<T>& dec = decoder(task_id);
  if (dec.spec.arity != 2) {
    throw std::invalid_argument("task '" + task_id + "' expects " + std::to_string(dec.spec.arity) + " image(s), got 2");
  }
  if (images_a.rank() != 4 || images_b.rank() != 4 || images_a.dim(0) != images_b.dim(0)) {
    throw ShapeError("dual forward batch mismatch: " + shape_str(images_a.shape()) + " vs " +
                     shape_str(images_b.shape()));
  }
  Tensor<T> ta = trunk_tokens(sensor, to_patches(images_a));
  Tensor<T> tb = trunk_tokens(sensor, to_patches(images_b));
  return std::get<PoseDecoder<T>>(dec.head)({ta, tb});
}

template <typename T>
Tensor<T> T3Model<T>::forward(const std::string& sensor, const std::string& task_id,
                              const std::vector<Tensor<T>>& images) const {
  if (images.size() == 1) return forward_single(sensor, task_id, images[0]);
  if (images.size() == 2) return forward_dual(sensor, task_id, images[0], images[1]);
  throw std::invalid_argument("forward takes one or two image batches");
}

template <typename T>
std::vector<std::string> T3Model<T>::components() const {
  std::vector<std::string> out;
  for (const auto& [g, e] : encoders_) out.push_back("encoder." + g);
  out.push_back("trunk");
  for (const auto& [t, d] : decoders_) out.push_back("decoder." + t);
  return out;
}

template <typename T>
NamedParams<T> T3Model<T>::component_parameters(const std::string& component) const {
  NamedParams<T> out;
  if (component == "trunk") {
    trunk_.collect("trunk", out);
  } else if (component.rfind("encoder.", 0) == 0) {
    encoder(component.substr(8)).collect(component, out);
  } else if (component.rfind("decoder.", 0) == 0) {
    decoder(component.substr(8)).collect(component, out);
  } else {
    throw std::invalid_argument("unknown component '" + component + "'");
  }
  return out;
}

template <typename T>
NamedParams<T> T3Model<T>::parameters() const {
  NamedParams<T> out;
  for (const auto& c : components()) {
    NamedParams<T> part = component_parameters(c);
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

template <typename T>
std::vector<std::string> T3Model<T>::trainable_components(const std::string& sensor, const std::string& task_id) const {
  const std::string& group = group_of(sensor);
  decoder(task_id);
  return {"encoder." + group, "trunk", "decoder." + task_id};
}

template <typename T>
NamedParams<T> T3Model<T>::trainable_set(const std::string& sensor, const std::string& task_id) const {
  NamedParams<T> out;
  for (const auto& c : trainable_components(sensor, task_id)) {
    NamedParams<T> part = component_parameters(c);
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

template <typename T>
void T3Model<T>::substitute_encoder(const std::string& new_sensor, const std::string& donor_group) {
  if (spec_.share_map.count(new_sensor)) throw std::invalid_argument("sensor '" + new_sensor + "' already registered");
  if (!encoders_.count(donor_group)) throw std::invalid_argument("unknown donor group '" + donor_group + "'");
  spec_.sensors.push_back(new_sensor);
  spec_.share_map[new_sensor] = donor_group;
}

template <typename T>
void T3Model<T>::add_sensor(const std::string& sensor, const std::string& group) {
  if (spec_.share_map.count(sensor)) throw std::invalid_argument("sensor '" + sensor + "' already registered");
  if (!encoders_.count(group)) build_encoder(group);
  spec_.sensors.push_back(sensor);
  spec_.share_map[sensor] = group;
}

template <typename T>
void T3Model<T>::add_task(const TaskSpec& task) {
  if (decoders_.count(task.id)) throw std::invalid_argument("task '" + task.id + "' already registered");
  if (task.decoder.kind == DecoderKind::kMaeRecon && !mae_task().empty()) {
    throw std::invalid_argument("model already has a reconstruction decoder");
  }
  build_decoder(task);
  spec_.tasks.push_back(task);
}

template <typename T>
std::size_t T3Model<T>::param_count() const {
  std::size_t n = 0;
  for (const auto& [name, p] : parameters()) n += p.numel();
  return n;
}

template <typename T>
void T3Model<T>::zero_grad() {
  for (auto& [name, p] : parameters()) p.zero_grad();
}

template <typename T>
void T3Model<T>::set_frozen(const std::string& component, bool frozen) {
  const auto all = components();
  if (std::find(all.begin(), all.end(), component) == all.end()) {
    throw std::invalid_argument("unknown component '" + component + "'");
  }
  if (frozen) {
    frozen_.insert(component);
  } else {
    frozen_.erase(component);
  }
}

template class T3Model<float>;
template class T3Model<double>;

}  // namespace t3
