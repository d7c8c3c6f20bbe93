#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "t3/datapipe.hpp"
#include "t3/image.hpp"
#include "t3/model.hpp"

namespace t3 {

inline constexpr int kSynthSize = 256;
inline constexpr double kMmPerPixel = 0.1;
/// Half extent of the sensing surface in millimeters.
inline constexpr double kSurfaceHalfMm = kSynthSize * kMmPerPixel / 2.0;
inline constexpr int kNumProbes = 6;
inline constexpr double kForceMin = 0.3;
inline constexpr double kForceMax = 2.1;
/// Indentation depth per newton, millimeters.
inline constexpr double kDepthPerNewton = 0.4;

struct MarkerGrid {
  double spacing_px = 20.0;
  double radius_px = 2.5;
};

struct Light {
  std::array<double, 3> dir;    // unit vector, z toward the camera
  std::array<double, 3> color;  // per-channel response
};

struct SensorStyle {
  std::string name;
  std::array<double, 3> tint{0.6, 0.6, 0.6};
  std::vector<Light> lights;
  std::optional<MarkerGrid> markers;
  double vignette = 0.2;
  double noise_std = 2.0;
  std::uint64_t noise_seed = 0;
  double shading_gain = 220.0;
};

/// Styles synth0..synth{n-1}; a fixed catalogue cycled with small variations.
std::vector<SensorStyle> default_styles(std::size_t n);
/// Minimum channel-mean distance (0..255 scale) between distinct default styles.
inline constexpr double kStyleSeparation = 8.0;
std::array<double, 3> channel_means(const Image& img);

enum class ProbeKind { kLetter = 0, kRidge, kDome, kGrid, kCross, kRing };
std::string probe_name(int probe_id);
/// Heightmap in [0,1] over the unit footprint; zero for u^2 + v^2 >= 1.
double probe_height(int probe_id, double u, double v);

struct Contact {
  int probe = 0;
  double x_mm = 0.0;  // contact center relative to the surface center
  double y_mm = 0.0;
  double force = 0.0;  // newtons
};

/// Footprint radius in mm for a given force.
double footprint_radius_mm(double force);

/// The no-contact frame of a style.
Image flat_image(const SensorStyle& style);
/// Deterministic tactile frame. Throws when the contact center lies outside
/// the surface or the force is negative.
Image render(const SensorStyle& style, const Contact& contact);
Image render(const SensorStyle& style, const Image& flat, const Contact& contact);

/// (x, y, depth) in millimeters.
std::array<double, 3> pose3_of(const Contact& c);

/// Task ids understood by the generator: object_cls, pose3, vol, unlabeled.
TaskSpec standard_task(const std::string& id);

struct SynthOptions {
  std::size_t n_per_pairing = 100;
  std::size_t val_per_pairing = 0;
  std::uint64_t seed = 0;
  double pose_range_mm = 6.0;
  double pair_offset_px = 20.0;
  int jpeg_quality = 95;
};

struct PairingShards {
  std::string sensor;
  std::string task;
  std::string dir;
  ShardSet train;
  std::optional<ShardSet> val;
};

/// Renders n_per_pairing (+ val_per_pairing) records for every
/// (style, task) pair into out_dir/{sensor}__{task}/ and writes
/// out_dir/dataset.json.
std::vector<PairingShards> generate_dataset(const std::vector<SensorStyle>& styles,
                                            const std::vector<std::string>& tasks, const SynthOptions& opts,
                                            const std::string& out_dir);

/// One record for a pairing; deterministic in (seed, index).
ShardRecord synth_record(const SensorStyle& style, const Image& flat, const std::string& task, std::uint64_t seed,
                         std::size_t index, const SynthOptions& opts, const std::string& key);

/// Reads out_dir/dataset.json.
std::vector<PairingShards> load_dataset_index(const std::string& dir);

}  // namespace t3
