#include "t3/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <stdexcept>

#include "t3/tar.hpp"

namespace fs = std::filesystem;

namespace t3 {

void append_f32(std::string& out, float v) {
  std::uint32_t bits = std::bit_cast<std::uint32_t>(v);
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((bits >> (8 * i)) & 0xFFu);
  out.append(b, 4);
}

float read_f32(const char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<float>(bits);
}

const std::string& Checkpoint::member(const std::string& name) const {
  auto it = members.find(name);
  if (it == members.end()) throw std::runtime_error("checkpoint has no member '" + name + "'");
  return it->second;
}

template <typename T>
void save_checkpoint(const std::string& path, const T3Model<T>& model, const std::map<std::string, std::string>& extra) {
  nlohmann::json manifest{{"format", "t3-checkpoint"},
                          {"version", kCheckpointVersion},
                          {"dtype", "float32-le"},
                          {"seed", model.seed()},
                          {"model", to_json(model.spec())},
                          {"frozen", model.frozen()}};
  std::map<std::string, std::string> blobs;
  nlohmann::json comps = nlohmann::json::object();
  for (const auto& c : model.components()) {
    std::string blob;
    nlohmann::json params = nlohmann::json::array();
    for (const auto& [name, p] : model.component_parameters(c)) {
      params.push_back({{"name", name}, {"shape", p.shape()}});
      for (T v : p.data()) append_f32(blob, static_cast<float>(v));
    }
    comps[c] = {{"member", c + ".bin"}, {"params", params}};
    blobs[c + ".bin"] = std::move(blob);
  }
  manifest["components"] = comps;

  if (const auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  const std::string tmp = path + ".partial";
  try {
    TarWriter w(tmp);
    w.add("manifest.json", manifest.dump(2));
    for (const auto& [name, blob] : blobs) w.add(name, blob);
    for (const auto& [name, data] : extra) {
      if (name == "manifest.json" || blobs.count(name)) throw std::invalid_argument("reserved checkpoint member " + name);
      w.add(name, data);
    }
    w.finish();
    fs::rename(tmp, path);
  } catch (...) {
    std::error_code ec;
    fs::remove(tmp, ec);
    throw;
  }
}

Checkpoint read_checkpoint(const std::string& path) {
  std::size_t corrupt = 0;
  Checkpoint ck;
  for (auto& m : read_tar(path, &corrupt)) ck.members[m.name] = std::move(m.data);
  if (corrupt) throw std::runtime_error("checkpoint '" + path + "' is damaged");
  ck.manifest = nlohmann::json::parse(ck.member("manifest.json"));
  if (ck.manifest.value("format", "") != "t3-checkpoint") throw std::runtime_error("'" + path + "' is not a checkpoint");
  if (ck.manifest.value("version", 0) != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint version in '" + path + "'");
  }
  return ck;
}

template <typename T>
T3Model<T> model_from_checkpoint(const Checkpoint& ckpt) {
  const ModelSpec spec = model_spec_from_json(ckpt.manifest.at("model"));
  T3Model<T> model = T3Model<T>::assemble(spec, ckpt.manifest.at("seed").get<std::uint64_t>());
  load_parameters(model, ckpt, true);
  for (const auto& c : ckpt.manifest.value("frozen", std::vector<std::string>{})) model.set_frozen(c, true);
  return model;
}

template <typename T>
std::vector<std::string> load_parameters(T3Model<T>& model, const Checkpoint& ckpt, bool strict) {
  const auto& comps = ckpt.manifest.at("components");
  std::vector<std::string> loaded;
  for (const auto& c : model.components()) {
    if (!comps.contains(c)) {
      if (strict) throw std::runtime_error("checkpoint lacks component '" + c + "'");
      continue;
    }
    const auto& entry = comps.at(c);
    const std::string& blob = ckpt.member(entry.at("member").template get<std::string>());
    NamedParams<T> params = model.component_parameters(c);
    const auto& stored = entry.at("params");
    if (stored.size() != params.size()) throw std::runtime_error("parameter count mismatch in component '" + c + "'");
    std::size_t offset = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& [name, p] = params[i];
      if (stored[i].at("name").template get<std::string>() != name || stored[i].at("shape").template get<Shape>() != p.shape()) {
        throw std::runtime_error("parameter '" + name + "' does not match the checkpoint");
      }
      auto data = p.data();
      if ((offset + data.size()) * 4 > blob.size()) throw std::runtime_error("truncated blob for component '" + c + "'");
      for (std::size_t k = 0; k < data.size(); ++k) data[k] = static_cast<T>(read_f32(blob.data() + 4 * (offset + k)));
      offset += data.size();
    }
    if (offset * 4 != blob.size()) throw std::runtime_error("trailing bytes in blob for component '" + c + "'");
    loaded.push_back(c);
  }
  return loaded;
}

template void save_checkpoint(const std::string&, const T3Model<float>&, const std::map<std::string, std::string>&);
template void save_checkpoint(const std::string&, const T3Model<double>&, const std::map<std::string, std::string>&);
template T3Model<float> model_from_checkpoint(const Checkpoint&);
template T3Model<double> model_from_checkpoint(const Checkpoint&);
template std::vector<std::string> load_parameters(T3Model<float>&, const Checkpoint&, bool);
template std::vector<std::string> load_parameters(T3Model<double>&, const Checkpoint&, bool);

}  // namespace t3
