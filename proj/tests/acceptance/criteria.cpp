#include "criteria.hpp"

#include <iostream>

#include "t3/image.hpp"
#include "t3/synthgel.hpp"

namespace t3::acceptance {

PairingDataset synth_pairing(std::size_t style_index, const std::string& task, std::size_t n, std::uint64_t seed,
                             std::size_t first) {
  const auto style = default_styles(style_index + 1)[style_index];
  const Image flat = flat_image(style);
  SynthOptions opts;
  PairingDataset ds{style.name, task, {}};
  ds.samples.reserve(n);
  for (std::size_t i = first; i < first + n; ++i) {
    const auto r = synth_record(style, flat, task, seed, i, opts, "r" + std::to_string(i));
    Sample s{r.key, decode_jpeg(r.image_bytes), {}, r.labels};
    if (!r.pair_bytes.empty()) s.pair = decode_jpeg(r.pair_bytes);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

ModelSpec nano_spec(const std::vector<std::string>& sensors, const std::vector<std::string>& tasks,
                    const std::string& shared_group) {
  ModelSpec s;
  s.size = size_config("nano");
  for (const auto& name : sensors) {
    s.sensors.push_back(name);
    s.share_map[name] = shared_group.empty() ? name : shared_group;
  }
  for (const auto& t : tasks) s.tasks.push_back(standard_task(t));
  return s;
}

void note(const std::string& line) { std::cerr << "  " << line << std::endl; }

}  // namespace t3::acceptance
