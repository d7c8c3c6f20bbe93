#include "t3/synthgel.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <stdexcept>

namespace fs = std::filesystem;

namespace t3 {

namespace {

Light ring_light(double azimuth_deg, double z, std::array<double, 3> color) {
  const double a = azimuth_deg * std::numbers::pi / 180.0;
  const double r = std::sqrt(1.0 - z * z);
  return {{r * std::cos(a), r * std::sin(a), z}, color};
}

double smoothstep(double e0, double e1, double x) {
  const double t = std::clamp((x - e0) / (e1 - e0), 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

/// 1 inside [a, b], soft edges of width w.
double soft_box(double x, double a, double b, double w = 0.2) {
  return smoothstep(a - w, a, x) * (1.0 - smoothstep(b, b + w, x));
}

}  // namespace

std::vector<SensorStyle> default_styles(std::size_t n) {
  const std::array<double, 3> R{1.0, 0.15, 0.1}, G{0.1, 1.0, 0.15}, B{0.15, 0.1, 1.0}, W{0.8, 0.8, 0.8};
  std::vector<SensorStyle> base{
      {"", {0.45, 0.55, 0.72}, {ring_light(90, 0.5, R), ring_light(210, 0.5, G), ring_light(330, 0.5, B)},
       MarkerGrid{20.0, 2.5}, 0.25, 2.0, 0, 220.0},
      {"", {0.70, 0.52, 0.45}, {ring_light(0, 0.5, R), ring_light(120, 0.5, G), ring_light(240, 0.5, B)},
       std::nullopt, 0.15, 3.0, 0, 220.0},
      {"", {0.50, 0.68, 0.50}, {ring_light(45, 0.5, {1.0, 0.8, 0.2}), ring_light(150, 0.5, {0.2, 0.8, 1.0})},
       MarkerGrid{16.0, 2.0}, 0.30, 2.5, 0, 220.0},
      {"", {0.62, 0.62, 0.62}, {ring_light(135, 0.6, W)}, MarkerGrid{24.0, 3.0}, 0.20, 1.5, 0, 260.0},
      {"", {0.55, 0.45, 0.65}, {ring_light(60, 0.5, R), ring_light(180, 0.5, G), ring_light(300, 0.5, B)},
       std::nullopt, 0.35, 2.0, 0, 220.0},
      {"", {0.66, 0.60, 0.42}, {ring_light(0, 0.5, {1.0, 0.3, 0.3}), ring_light(90, 0.5, {0.3, 1.0, 0.3})},
       MarkerGrid{18.0, 2.0}, 0.20, 3.0, 0, 220.0},
  };
  std::vector<SensorStyle> out;
  for (std::size_t i = 0; i < n; ++i) {
    SensorStyle s = base[i % base.size()];
    const std::size_t cycle = i / base.size();
    if (cycle > 0) {
      s.tint[cycle % 3] = std::clamp(s.tint[cycle % 3] + 0.08 * static_cast<double>(cycle), 0.2, 0.85);
    }
    s.name = "synth" + std::to_string(i);
    s.noise_seed = mix_seed(0x5eed5eedULL, i);
    out.push_back(std::move(s));
  }
  return out;
}

std::array<double, 3> channel_means(const Image& img) {
  std::array<double, 3> m{0, 0, 0};
  const std::size_t n = static_cast<std::size_t>(img.width) * img.height;
  for (std::size_t i = 0; i < n; ++i) {
    for (int c = 0; c < 3; ++c) m[c] += img.rgb[3 * i + c];
  }
  for (auto& v : m) v /= static_cast<double>(n);
  return m;
}

std::string probe_name(int probe_id) {
  static const char* names[] = {"letter", "ridge", "dome", "grid", "cross", "ring"};
  if (probe_id < 0 || probe_id >= kNumProbes) throw std::invalid_argument("probe id out of range");
  return names[probe_id];
}

double probe_height(int probe_id, double u, double v) {
  const double r2 = u * u + v * v;
  if (r2 >= 1.0) return 0.0;
  const double r = std::sqrt(r2);
  const double window = 1.0 - smoothstep(0.8, 1.0, r);
  double h = 0.0;
  switch (static_cast<ProbeKind>(probe_id)) {
    case ProbeKind::kLetter:  // a "T"
      h = std::max(soft_box(u, -0.6, 0.6) * soft_box(v, -0.65, -0.3), soft_box(u, -0.18, 0.18) * soft_box(v, -0.3, 0.65));
      break;
    case ProbeKind::kRidge:
      h = 0.5 + 0.5 * std::cos(2.0 * std::numbers::pi * 2.5 * u);
      break;
    case ProbeKind::kDome:
      h = 1.0 - r2;
      break;
    case ProbeKind::kGrid:
      h = (0.5 + 0.5 * std::cos(2.0 * std::numbers::pi * 2.0 * u)) * (0.5 + 0.5 * std::cos(2.0 * std::numbers::pi * 2.0 * v));
      break;
    case ProbeKind::kCross:
      h = std::max(soft_box(u - v, -0.2, 0.2), soft_box(u + v, -0.2, 0.2));
      break;
    case ProbeKind::kRing:
      h = std::exp(-((r - 0.55) / 0.15) * ((r - 0.55) / 0.15));
      break;
    default:
      throw std::invalid_argument("probe id out of range");
  }
  return std::clamp(h, 0.0, 1.0) * window;
}

double footprint_radius_mm(double force) { return 2.5 + 0.5 * force; }

Image flat_image(const SensorStyle& style) {
  Image img(kSynthSize, kSynthSize);
  std::mt19937_64 rng(style.noise_seed);
  std::normal_distribution<double> noise(0.0, style.noise_std);
  const double c0 = kSynthSize / 2.0;
  const double rmax2 = 2.0 * c0 * c0;
  for (int y = 0; y < kSynthSize; ++y) {
    for (int x = 0; x < kSynthSize; ++x) {
      const double dx = x + 0.5 - c0, dy = y + 0.5 - c0;
      const double shade = 1.0 - style.vignette * (dx * dx + dy * dy) / rmax2;
      double dark = 0.0;
      if (style.markers) {
        const double s = style.markers->spacing_px;
        const double mx = std::fmod(x + 0.5, s) - s / 2.0;
        const double my = std::fmod(y + 0.5, s) - s / 2.0;
        const double d = std::sqrt(mx * mx + my * my);
        dark = std::clamp(style.markers->radius_px + 0.5 - d, 0.0, 1.0);
      }
      for (int c = 0; c < 3; ++c) {
        const double v = 255.0 * style.tint[c] * shade * (1.0 - 0.6 * dark) + noise(rng);
        img.at(x, y, c) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  }
  return img;
}

Image render(const SensorStyle& style, const Contact& contact) { return render(style, flat_image(style), contact); }

Image render(const SensorStyle& style, const Image& flat, const Contact& contact) {
  if (std::abs(contact.x_mm) > kSurfaceHalfMm || std::abs(contact.y_mm) > kSurfaceHalfMm) {
    throw std::invalid_argument("contact center outside the sensing surface");
  }
  if (!(contact.force >= 0.0)) throw std::invalid_argument("force must be nonnegative");
  if (contact.probe < 0 || contact.probe >= kNumProbes) throw std::invalid_argument("probe id out of range");
  Image img = flat;
  const double depth = kDepthPerNewton * contact.force;
  if (depth == 0.0) return img;
  const double radius = footprint_radius_mm(contact.force);
  const double c0 = kSynthSize / 2.0;
  auto to_mm = [&](int p) { return (p + 0.5 - c0) * kMmPerPixel; };
  const int rp = static_cast<int>(std::ceil(radius / kMmPerPixel)) + 2;
  const int cx = static_cast<int>(std::floor(c0 + contact.x_mm / kMmPerPixel));
  const int cy = static_cast<int>(std::floor(c0 + contact.y_mm / kMmPerPixel));
  const int x0 = std::max(0, cx - rp), x1 = std::min(kSynthSize - 1, cx + rp);
  const int y0 = std::max(0, cy - rp), y1 = std::min(kSynthSize - 1, cy + rp);
  const int w = x1 - x0 + 3, h = y1 - y0 + 3;  // one pixel border for central differences
  std::vector<double> height(static_cast<std::size_t>(w) * h);
  for (int j = 0; j < h; ++j) {
    for (int i = 0; i < w; ++i) {
      const double u = (to_mm(x0 - 1 + i) - contact.x_mm) / radius;
      const double v = (to_mm(y0 - 1 + j) - contact.y_mm) / radius;
      height[static_cast<std::size_t>(j) * w + i] = depth * probe_height(contact.probe, u, v);
    }
  }
  auto H = [&](int i, int j) { return height[static_cast<std::size_t>(j) * w + i]; };
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      const int i = x - x0 + 1, j = y - y0 + 1;
      const double gx = (H(i + 1, j) - H(i - 1, j)) / (2.0 * kMmPerPixel);
      const double gy = (H(i, j + 1) - H(i, j - 1)) / (2.0 * kMmPerPixel);
      if (gx == 0.0 && gy == 0.0) continue;
      const double norm = std::sqrt(gx * gx + gy * gy + 1.0);
      for (int c = 0; c < 3; ++c) {
        double s = 0.0;
        for (const auto& L : style.lights) {
          const double ndotl = (-gx * L.dir[0] - gy * L.dir[1] + L.dir[2]) / norm;
          s += L.color[c] * (ndotl - L.dir[2]);
        }
        const double v = flat.at(x, y, c) + style.shading_gain * s;
        img.at(x, y, c) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  }
  return img;
}

std::array<double, 3> pose3_of(const Contact& c) { return {c.x_mm, c.y_mm, kDepthPerNewton * c.force}; }

TaskSpec standard_task(const std::string& id) {
  if (id == "object_cls") return {id, DecoderSpec::classifier(kNumProbes), "object_id"};
  if (id == "pose3") return {id, DecoderSpec::pose(3, 2), "pose3"};
  if (id == "vol") return {id, DecoderSpec::vol_regressor(), "sigma"};
  if (id == "mae") return {id, DecoderSpec::mae(), ""};
  throw std::invalid_argument("unknown task '" + id + "'");
}

ShardRecord synth_record(const SensorStyle& style, const Image& flat, const std::string& task, std::uint64_t seed,
                         std::size_t index, const SynthOptions& opts, const std::string& key) {
  std::mt19937_64 rng(mix_seed(seed, index));
  std::uniform_int_distribution<int> probe_dist(0, kNumProbes - 1);
  std::uniform_real_distribution<double> pos(-opts.pose_range_mm, opts.pose_range_mm);
  std::uniform_real_distribution<double> force(kForceMin, kForceMax);
  Contact a;
  a.probe = probe_dist(rng);
  a.x_mm = pos(rng);
  a.y_mm = pos(rng);
  a.force = force(rng);
  const Image img = render(style, flat, a);

  ShardRecord r;
  r.key = key;
  r.image_bytes = encode_jpeg(img, opts.jpeg_quality);
  nlohmann::json& L = r.labels;
  L["sensor_id"] = style.name;
  L["task"] = task;
  if (task == "unlabeled") {
    L["unlabeled"] = true;
    return r;
  }
  L["object_id"] = a.probe;
  L["force_z"] = a.force;
  L["sigma"] = vol_sigma(img, flat);
  const auto pa = pose3_of(a);
  if (task == "pose3") {
    const double off_mm = opts.pair_offset_px * kMmPerPixel;
    std::uniform_real_distribution<double> off(-off_mm, off_mm);
    Contact b = a;
    b.x_mm = a.x_mm + off(rng);
    b.y_mm = a.y_mm + off(rng);
    b.force = force(rng);
    r.pair_bytes = encode_jpeg(render(style, flat, b), opts.jpeg_quality);
    const auto pb = pose3_of(b);
    L["pose3"] = {pb[0] - pa[0], pb[1] - pa[1], pb[2] - pa[2]};
    L["extras"] = {{"pose_a", pa}, {"pose_b", pb}, {"force_b", b.force}};
  } else {
    L["pose3"] = pa;
  }
  return r;
}

namespace {

nlohmann::json index_row(const PairingShards& p) {
  nlohmann::json row{{"sensor", p.sensor}, {"task", p.task}, {"dir", p.dir}, {"train", p.train.total()}};
  row["val"] = p.val ? p.val->total() : 0;
  return row;
}

}  // namespace

std::vector<PairingShards> generate_dataset(const std::vector<SensorStyle>& styles,
                                            const std::vector<std::string>& tasks, const SynthOptions& opts,
                                            const std::string& out_dir) {
  if (opts.n_per_pairing == 0) throw std::invalid_argument("n_per_pairing must be >= 1");
  if (styles.empty() || tasks.empty()) throw std::invalid_argument("need at least one style and one task");
  for (const auto& t : tasks) {
    if (t != "unlabeled") standard_task(t);
  }
  fs::create_directories(out_dir);
  std::vector<PairingShards> out;
  nlohmann::json index{{"seed", opts.seed}, {"pairings", nlohmann::json::array()}, {"styles", nlohmann::json::array()}};
  for (const auto& style : styles) {
    index["styles"].push_back(style.name);
    const Image flat = flat_image(style);
    for (const auto& task : tasks) {
      const std::string sub = style.name + "__" + task;
      const std::string dir = (fs::path(out_dir) / sub).string();
      const std::uint64_t pseed = mix_seed(opts.seed, hash_name(sub));
      auto make_split = [&](const std::string& split, std::size_t offset, std::size_t count) {
        std::vector<ShardRecord> recs;
        recs.reserve(count);
        for (std::size_t i = 0; i < count; ++i) {
          char idx[32];
          std::snprintf(idx, sizeof idx, "%06zu", i);
          recs.push_back(synth_record(style, flat, task, pseed, offset + i, opts,
                                      style.name + "-" + task + "-" + split + "-" + idx));
        }
        return pack_shards(recs, dir, split);
      };
      PairingShards p{style.name, task, sub, make_split("train", 0, opts.n_per_pairing), std::nullopt};
      if (opts.val_per_pairing > 0) p.val = make_split("val", opts.n_per_pairing, opts.val_per_pairing);
      index["pairings"].push_back(index_row(p));
      p.train.dir = dir;
      if (p.val) p.val->dir = dir;
      out.push_back(std::move(p));
    }
  }
  std::ofstream f(fs::path(out_dir) / "dataset.json", std::ios::trunc);
  f << index.dump(2) << "\n";
  if (!f) throw std::runtime_error("cannot write dataset index in '" + out_dir + "'");
  return out;
}

std::vector<PairingShards> load_dataset_index(const std::string& dir) {
  std::ifstream f(fs::path(dir) / "dataset.json");
  if (!f) throw std::runtime_error("no dataset.json in '" + dir + "'");
  const auto index = nlohmann::json::parse(f);
  std::vector<PairingShards> out;
  for (const auto& row : index.at("pairings")) {
    PairingShards p;
    p.sensor = row.at("sensor").get<std::string>();
    p.task = row.at("task").get<std::string>();
    p.dir = row.at("dir").get<std::string>();
    const std::string full = (fs::path(dir) / p.dir).string();
    p.train = load_shard_set(full, "train");
    if (row.value("val", 0) > 0) p.val = load_shard_set(full, "val");
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace t3
