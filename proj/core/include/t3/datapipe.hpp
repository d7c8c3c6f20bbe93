#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <limits>
#include <mutex>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "t3/decoders.hpp"
#include "t3/image.hpp"
#include "t3/model.hpp"

namespace t3 {

/// One stored sample: the primary image, an optional second image for
/// dual-image tasks, and the JSON label document.
struct ShardRecord {
  std::string key;
  std::string image_bytes;
  std::string pair_bytes;  // empty unless the task consumes two images
  nlohmann::json labels;
};

/// Throws unless sensor_id is present and the record carries a task label
/// or unlabeled=true. Keys must be non-empty and free of '.' and '/'.
void validate_record(const ShardRecord& r);

inline constexpr std::size_t kShardCap = 10000;

struct ShardSet {
  std::string dir;
  std::string split;
  std::vector<std::string> archives;  // file names relative to dir
  std::vector<std::size_t> counts;

  std::size_t total() const;
  std::string path(std::size_t i) const;
};

/// Writes {split}-{index:06}.tar archives of at most `cap` records each and
/// the {split}.manifest.jsonl manifest. Members are {key}.jpg, {key}.json and,
/// for pairs, {key}.pair.jpg.
ShardSet pack_shards(const std::vector<ShardRecord>& records, const std::string& out_dir, const std::string& split,
                     std::size_t cap = kShardCap);
/// Reads the manifest written by pack_shards.
ShardSet load_shard_set(const std::string& dir, const std::string& split);

struct StreamOptions {
  std::size_t shuffle_buffer = 1;
  std::uint64_t seed = 0;
  std::size_t readers = 1;
  std::size_t prefetch = 256;
};

/// Yields every record of a shard set once. Archive readers run on worker
/// threads feeding a bounded queue; the order is deterministic for a fixed
/// seed only with a single reader.
class ShardStream {
 public:
  ShardStream(ShardSet set, StreamOptions opts);
  ~ShardStream();
  ShardStream(const ShardStream&) = delete;
  ShardStream& operator=(const ShardStream&) = delete;

  std::optional<ShardRecord> next();
  /// Records skipped because a member was damaged or incomplete.
  std::size_t corrupt() const;

 private:
  void reader_loop();
  std::optional<ShardRecord> pull();

  ShardSet set_;
  StreamOptions opts_;
  std::vector<std::thread> threads_;
  mutable std::mutex mu_;
  std::condition_variable not_full_, not_empty_;
  std::deque<ShardRecord> queue_;
  std::size_t next_archive_ = 0;
  std::size_t active_readers_ = 0;
  std::size_t corrupt_ = 0;
  bool stop_ = false;
  std::vector<ShardRecord> buffer_;
  std::uint64_t draws_ = 0;
  bool upstream_done_ = false;
};

std::vector<ShardRecord> read_all(const ShardSet& set, std::size_t* corrupt = nullptr);

/// sqrt of the population variance of the 4-neighbor Laplacian of (image -
/// flat) over interior pixels. Inputs are row-major grayscale.
double vol_sigma(const std::vector<double>& image, const std::vector<double>& flat, int width, int height);
double vol_sigma(const Image& image, const Image& flat);

inline constexpr double kVolThreshold = 4.24;

/// Keeps records whose sigma against `flat` is at least `threshold`.
std::vector<ShardRecord> vol_filter(const std::vector<ShardRecord>& records, const Image& flat,
                                    double threshold = kVolThreshold);

struct AugmentOptions {
  int resize = 256;
  int crop = 224;
  double brightness = 0.2;
  double contrast = 0.2;
  double saturation = 0.2;
  /// Random crop and flips; forced off for pose tasks.
  bool spatial = true;
};

/// Resize, crop, color jitter, standardize with mean 0.5 / std 0.5.
/// Returns a [3, crop, crop] tensor.
Tensor<float> augment(const Image& image, DecoderKind task_kind, std::uint64_t seed, AugmentOptions opts = {});
/// Deterministic resize + center crop + standardize, used for evaluation.
Tensor<float> preprocess(const Image& image, AugmentOptions opts = {});

enum class WeightingKind { kProportional, kUniform, kTemperature };

struct Weighting {
  WeightingKind kind = WeightingKind::kTemperature;
  double tau = 0.5;

  static Weighting parse(const std::string& s);  // "proportional", "uniform", "temperature:0.5"
  std::string str() const;
};

struct PairingInfo {
  std::string sensor;
  std::string task;
  std::size_t size = 0;
};

struct PairingDraw {
  std::size_t pairing = 0;
  std::vector<std::size_t> indices;  // record indices within the pairing
};

/// Picks one pairing per batch with probability proportional to n^tau
/// (tau = 1 proportional, tau = 0 uniform) and draws batch_size distinct
/// records from it. Draws are pure functions of (seed, step).
class PairingSampler {
 public:
  PairingSampler(std::vector<PairingInfo> pairings, std::size_t batch_size, Weighting weighting, std::uint64_t seed);

  PairingDraw draw(std::uint64_t step) const;
  const std::vector<PairingInfo>& pairings() const { return pairings_; }
  const std::vector<double>& probabilities() const { return probs_; }
  std::size_t dropped() const { return dropped_; }

 private:
  std::vector<PairingInfo> pairings_;
  std::vector<double> probs_;
  std::size_t batch_ = 1;
  std::uint64_t seed_ = 0;
  std::size_t dropped_ = 0;
};

/// A decoded sample held in memory.
struct Sample {
  std::string key;
  Image image;
  Image pair;
  nlohmann::json labels;
};

struct PairingDataset {
  std::string sensor;
  std::string task;
  std::vector<Sample> samples;
};

PairingDataset load_pairing_dataset(const ShardSet& set, const std::string& sensor, const std::string& task,
                                    std::size_t limit = std::numeric_limits<std::size_t>::max());

/// Images and labels of one homogeneous batch.
template <typename T>
struct PairingBatch {
  std::string sensor;
  std::string task;
  std::vector<Tensor<T>> images;  // one [B,3,S,S] tensor per image slot
  std::vector<int> class_labels;  // classification tasks
  Tensor<T> targets;              // regression tasks: [B, k]
  std::vector<std::string> keys;
};

/// Throws if any sample's sensor_id or task tag differs from the batch tag.
void check_homogeneous(const std::string& sensor, const std::string& task, const std::vector<const Sample*>& samples);

/// Assembles a batch. `augment_seed` set: augmented; unset: preprocess only.
template <typename T>
PairingBatch<T> make_batch(const PairingDataset& data, const TaskSpec& task, const std::vector<std::size_t>& indices,
                           std::optional<std::uint64_t> augment_seed, const AugmentOptions& opts = {});

/// Stacks [3,S,S] tensors into [B,3,S,S].
template <typename T>
Tensor<T> stack_images(const std::vector<Tensor<float>>& images);

}  // namespace t3
