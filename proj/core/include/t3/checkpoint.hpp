#pragma once

#include <map>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "t3/model.hpp"

namespace t3 {

inline constexpr int kCheckpointVersion = 1;

/// A checkpoint archive: manifest.json, one float32 little-endian blob per
/// component ("encoder.<group>.bin", "trunk.bin", "decoder.<task>.bin"),
/// plus any extra members written by the caller.
struct Checkpoint {
  nlohmann::json manifest;
  std::map<std::string, std::string> members;

  bool has(const std::string& name) const { return members.count(name) != 0; }
  const std::string& member(const std::string& name) const;
};

template <typename T>
void save_checkpoint(const std::string& path, const T3Model<T>& model,
                     const std::map<std::string, std::string>& extra = {});

Checkpoint read_checkpoint(const std::string& path);

/// Rebuilds the model described by the manifest and loads every component.
template <typename T>
T3Model<T> model_from_checkpoint(const Checkpoint& ckpt);

/// Copies stored parameters into `model` for every component present in
/// both. With `strict`, a model component missing from the checkpoint is an
/// error. Returns the loaded component names.
template <typename T>
std::vector<std::string> load_parameters(T3Model<T>& model, const Checkpoint& ckpt, bool strict = true);

/// Little-endian float32 packing.
void append_f32(std::string& out, float v);
float read_f32(const char* p);

}  // namespace t3
