#include "t3/datapipe.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <stdexcept>

#include "t3/tar.hpp"

namespace fs = std::filesystem;

namespace t3 {

namespace {

const std::vector<std::string> kTaskLabelFields{"object_id", "material_id", "pose3", "pose6", "sigma", "force_z"};

std::string archive_name(const std::string& split, std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "-%06zu.tar", index);
  return split + buf;
}

std::string pairing_tag(const nlohmann::json& labels) {
  return labels.value("sensor_id", std::string{}) + "/" + labels.value("task", std::string{"*"});
}

}  // namespace

void validate_record(const ShardRecord& r) {
  if (r.key.empty() || r.key.find_first_of("./") != std::string::npos || r.key.size() > 80) {
    throw std::invalid_argument("invalid record key '" + r.key + "'");
  }
  if (!r.labels.is_object() || !r.labels.contains("sensor_id") || !r.labels.at("sensor_id").is_string()) {
    throw std::invalid_argument("record '" + r.key + "' has no sensor_id");
  }
  const bool labeled = std::any_of(kTaskLabelFields.begin(), kTaskLabelFields.end(),
                                   [&](const std::string& f) { return r.labels.contains(f); });
  if (!labeled && !r.labels.value("unlabeled", false)) {
    throw std::invalid_argument("record '" + r.key + "' has no task label and is not flagged unlabeled");
  }
}

std::size_t ShardSet::total() const { return std::accumulate(counts.begin(), counts.end(), std::size_t{0}); }

std::string ShardSet::path(std::size_t i) const { return (fs::path(dir) / archives.at(i)).string(); }

ShardSet pack_shards(const std::vector<ShardRecord>& records, const std::string& out_dir, const std::string& split,
                     std::size_t cap) {
  if (cap == 0 || cap > kShardCap) throw std::invalid_argument("shard cap must be in [1, 10000]");
  if (split.empty()) throw std::invalid_argument("empty split tag");
  std::set<std::string> keys;
  for (const auto& r : records) {
    validate_record(r);
    if (!keys.insert(r.key).second) throw std::invalid_argument("duplicate record key '" + r.key + "'");
  }
  fs::create_directories(out_dir);
  ShardSet set{out_dir, split, {}, {}};
  std::vector<nlohmann::json> manifest;
  for (std::size_t begin = 0; begin < records.size(); begin += cap) {
    const std::size_t end = std::min(records.size(), begin + cap);
    const std::string name = archive_name(split, set.archives.size());
    const fs::path final_path = fs::path(out_dir) / name;
    const fs::path tmp_path = fs::path(out_dir) / (name + ".partial");
    std::map<std::string, std::size_t> histogram;
    try {
      TarWriter w(tmp_path.string());
      for (std::size_t i = begin; i < end; ++i) {
        const auto& r = records[i];
        w.add(r.key + ".jpg", r.image_bytes);
        w.add(r.key + ".json", r.labels.dump());
        if (!r.pair_bytes.empty()) w.add(r.key + ".pair.jpg", r.pair_bytes);
        ++histogram[pairing_tag(r.labels)];
      }
      w.finish();
      fs::rename(tmp_path, final_path);
    } catch (...) {
      std::error_code ec;
      fs::remove(tmp_path, ec);
      throw;
    }
    set.archives.push_back(name);
    set.counts.push_back(end - begin);
    manifest.push_back({{"archive", name}, {"records", end - begin}, {"pairings", histogram}});
  }
  std::ofstream mf(fs::path(out_dir) / (split + ".manifest.jsonl"), std::ios::trunc);
  for (const auto& row : manifest) mf << row.dump() << "\n";
  if (!mf) throw std::runtime_error("cannot write manifest in '" + out_dir + "'");
  return set;
}

ShardSet load_shard_set(const std::string& dir, const std::string& split) {
  const fs::path p = fs::path(dir) / (split + ".manifest.jsonl");
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot open manifest '" + p.string() + "'");
  ShardSet set{dir, split, {}, {}};
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto row = nlohmann::json::parse(line);
    set.archives.push_back(row.at("archive").get<std::string>());
    set.counts.push_back(row.at("records").get<std::size_t>());
  }
  return set;
}

// ---- streaming --------------------------------------------------------------

namespace {

/// Groups consecutive members by key and turns them into records.
class RecordAssembler {
 public:
  explicit RecordAssembler(std::size_t& corrupt) : corrupt_(corrupt) {}

  /// Returns a finished record when `m` starts a new key.
  std::optional<ShardRecord> push(TarMember m) {
    const auto dot = m.name.find('.');
    std::string key = dot == std::string::npos ? m.name : m.name.substr(0, dot);
    std::string ext = dot == std::string::npos ? "" : m.name.substr(dot + 1);
    std::optional<ShardRecord> done;
    if (open_ && key != cur_.key) done = close();
    if (!open_) {
      cur_ = {};
      cur_.key = key;
      have_json_ = false;
      open_ = true;
    }
    if (ext == "jpg") {
      cur_.image_bytes = std::move(m.data);
    } else if (ext == "pair.jpg") {
      cur_.pair_bytes = std::move(m.data);
    } else if (ext == "json") {
      try {
        cur_.labels = nlohmann::json::parse(m.data);
        have_json_ = true;
      } catch (const nlohmann::json::exception&) {
        have_json_ = false;
      }
    }
    return done;
  }

  std::optional<ShardRecord> close() {
    if (!open_) return std::nullopt;
    open_ = false;
    if (cur_.image_bytes.empty() || !have_json_) {
      ++corrupt_;
      return std::nullopt;
    }
    return std::move(cur_);
  }

 private:
  std::size_t& corrupt_;
  ShardRecord cur_;
  bool open_ = false;
  bool have_json_ = false;
};

}  // namespace

ShardStream::ShardStream(ShardSet set, StreamOptions opts) : set_(std::move(set)), opts_(opts) {
  if (opts_.shuffle_buffer == 0) opts_.shuffle_buffer = 1;
  if (opts_.prefetch == 0) opts_.prefetch = 1;
  const std::size_t n = std::max<std::size_t>(1, std::min(opts_.readers, set_.archives.size()));
  active_readers_ = set_.archives.empty() ? 0 : n;
  if (set_.archives.empty()) upstream_done_ = true;
  for (std::size_t i = 0; i < active_readers_; ++i) threads_.emplace_back([this] { reader_loop(); });
}

ShardStream::~ShardStream() {
  {
    std::lock_guard lk(mu_);
    stop_ = true;
  }
  not_full_.notify_all();
  for (auto& t : threads_) t.join();
}

void ShardStream::reader_loop() {
  for (;;) {
    std::size_t idx;
    {
      std::lock_guard lk(mu_);
      if (stop_ || next_archive_ >= set_.archives.size()) break;
      idx = next_archive_++;
    }
    std::size_t local_corrupt = 0;
    auto emit = [&](std::optional<ShardRecord> r) {
      if (!r) return true;
      std::unique_lock lk(mu_);
      not_full_.wait(lk, [&] { return stop_ || queue_.size() < opts_.prefetch; });
      if (stop_) return false;
      queue_.push_back(std::move(*r));
      not_empty_.notify_one();
      return true;
    };
    try {
      TarReader reader(set_.path(idx));
      RecordAssembler asm_(local_corrupt);
      bool ok = true;
      while (ok) {
        auto m = reader.next();
        if (!m) break;
        ok = emit(asm_.push(std::move(*m)));
      }
      if (ok) emit(asm_.close());
      local_corrupt += reader.corrupt();
    } catch (const std::exception&) {
      ++local_corrupt;
    }
    std::lock_guard lk(mu_);
    corrupt_ += local_corrupt;
  }
  std::lock_guard lk(mu_);
  if (--active_readers_ == 0) upstream_done_ = true;
  not_empty_.notify_all();
}

std::optional<ShardRecord> ShardStream::pull() {
  std::unique_lock lk(mu_);
  not_empty_.wait(lk, [&] { return !queue_.empty() || upstream_done_; });
  if (queue_.empty()) return std::nullopt;
  ShardRecord r = std::move(queue_.front());
  queue_.pop_front();
  not_full_.notify_one();
  return r;
}

std::optional<ShardRecord> ShardStream::next() {
  while (buffer_.size() < opts_.shuffle_buffer) {
    auto r = pull();
    if (!r) break;
    buffer_.push_back(std::move(*r));
  }
  if (buffer_.empty()) return std::nullopt;
  std::size_t j = 0;
  if (buffer_.size() > 1) {
    std::mt19937_64 rng(mix_seed(opts_.seed, draws_));
    j = std::uniform_int_distribution<std::size_t>(0, buffer_.size() - 1)(rng);
  }
  ++draws_;
  ShardRecord out = std::move(buffer_[j]);
  buffer_.erase(buffer_.begin() + static_cast<std::ptrdiff_t>(j));
  return out;
}

std::size_t ShardStream::corrupt() const {
  std::lock_guard lk(mu_);
  return corrupt_;
}

std::vector<ShardRecord> read_all(const ShardSet& set, std::size_t* corrupt) {
  ShardStream s(set, {});
  std::vector<ShardRecord> out;
  while (auto r = s.next()) out.push_back(std::move(*r));
  if (corrupt) *corrupt = s.corrupt();
  return out;
}

// ---- variance of Laplacian ----------------------------------------------------

double vol_sigma(const std::vector<double>& image, const std::vector<double>& flat, int width, int height) {
  const auto n = static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
  if (width <= 0 || height <= 0 || image.size() != n || flat.size() != n) {
    throw std::invalid_argument("vol_sigma: image and flat reference differ in size");
  }
  if (width < 3 || height < 3) return 0.0;
  auto d = [&](int x, int y) {
    const auto i = static_cast<std::size_t>(y) * width + x;
    return image[i] - flat[i];
  };
  double s = 0.0, s2 = 0.0;
  const double count = static_cast<double>(width - 2) * (height - 2);
  std::vector<double> lap;
  lap.reserve(static_cast<std::size_t>(count));
  for (int y = 1; y < height - 1; ++y) {
    for (int x = 1; x < width - 1; ++x) {
      const double l = d(x, y - 1) + d(x - 1, y) + d(x + 1, y) + d(x, y + 1) - 4.0 * d(x, y);
      lap.push_back(l);
      s += l;
    }
  }
  const double mu = s / count;
  for (double l : lap) s2 += (l - mu) * (l - mu);
  return std::sqrt(s2 / count);
}

double vol_sigma(const Image& image, const Image& flat) {
  if (image.width != flat.width || image.height != flat.height) {
    throw std::invalid_argument("vol_sigma: image and flat reference differ in size");
  }
  return vol_sigma(to_grayscale(image), to_grayscale(flat), image.width, image.height);
}

std::vector<ShardRecord> vol_filter(const std::vector<ShardRecord>& records, const Image& flat, double threshold) {
  if (!(threshold >= 0.0)) throw std::invalid_argument("vol_filter threshold must be >= 0");
  const std::vector<double> flat_gray = to_grayscale(flat);
  std::vector<ShardRecord> out;
  for (const auto& r : records) {
    const Image img = decode_jpeg(r.image_bytes);
    if (img.width != flat.width || img.height != flat.height) {
      throw std::invalid_argument("vol_filter: record '" + r.key + "' differs in size from the flat reference");
    }
    if (vol_sigma(to_grayscale(img), flat_gray, img.width, img.height) >= threshold) out.push_back(r);
  }
  return out;
}

// ---- augmentation --------------------------------------------------------------

namespace {

Tensor<float> finish_tensor(const Image& img, double brightness, double contrast, double saturation, bool flip_h,
                            bool flip_v) {
  const int W = img.width, H = img.height;
  const std::size_t plane = static_cast<std::size_t>(W) * H;
  std::vector<double> px(plane * 3);
  double gray_sum = 0.0;
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const int sx = flip_h ? W - 1 - x : x;
      const int sy = flip_v ? H - 1 - y : y;
      const std::size_t o = (static_cast<std::size_t>(y) * W + x) * 3;
      for (int c = 0; c < 3; ++c) px[o + c] = std::clamp(img.at(sx, sy, c) / 255.0 * brightness, 0.0, 1.0);
      gray_sum += 0.299 * px[o] + 0.587 * px[o + 1] + 0.114 * px[o + 2];
    }
  }
  const double gray_mean = gray_sum / static_cast<double>(plane);
  std::vector<float> out(plane * 3);
  for (std::size_t i = 0; i < plane; ++i) {
    double rgb[3];
    for (int c = 0; c < 3; ++c) rgb[c] = std::clamp((px[i * 3 + c] - gray_mean) * contrast + gray_mean, 0.0, 1.0);
    const double g = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
    for (int c = 0; c < 3; ++c) {
      const double v = std::clamp((rgb[c] - g) * saturation + g, 0.0, 1.0);
      out[static_cast<std::size_t>(c) * plane + i] = static_cast<float>((v - 0.5) / 0.5);
    }
  }
  return Tensor<float>(Shape{3, static_cast<std::size_t>(H), static_cast<std::size_t>(W)}, std::move(out));
}

}  // namespace

Tensor<float> augment(const Image& image, DecoderKind task_kind, std::uint64_t seed, AugmentOptions opts) {
  if (image.empty()) throw ImageDecodeError("augment: empty image");
  if (opts.crop > opts.resize) throw std::invalid_argument("augment: crop larger than resize");
  const bool spatial = opts.spatial && task_kind != DecoderKind::kPose;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto factor = [&](double mag) { return 1.0 + mag * (2.0 * u01(rng) - 1.0); };
  const double b = factor(opts.brightness);
  const double c = factor(opts.contrast);
  const double s = factor(opts.saturation);
  const int slack = opts.resize - opts.crop;
  const int rx = static_cast<int>(u01(rng) * (slack + 1));
  const int ry = static_cast<int>(u01(rng) * (slack + 1));
  const bool fh = u01(rng) < 0.5;
  const bool fv = u01(rng) < 0.5;
  const int x0 = spatial ? std::min(rx, slack) : slack / 2;
  const int y0 = spatial ? std::min(ry, slack) : slack / 2;
  const Image resized = resize_bilinear(image, opts.resize, opts.resize);
  return finish_tensor(crop(resized, x0, y0, opts.crop, opts.crop), b, c, s, spatial && fh, spatial && fv);
}

Tensor<float> preprocess(const Image& image, AugmentOptions opts) {
  if (image.empty()) throw ImageDecodeError("preprocess: empty image");
  const int off = (opts.resize - opts.crop) / 2;
  const Image resized = resize_bilinear(image, opts.resize, opts.resize);
  return finish_tensor(crop(resized, off, off, opts.crop, opts.crop), 1.0, 1.0, 1.0, false, false);
}

// ---- pairing sampler -------------------------------------------------------------

Weighting Weighting::parse(const std::string& s) {
  if (s == "proportional") return {WeightingKind::kProportional, 1.0};
  if (s == "uniform") return {WeightingKind::kUniform, 0.0};
  if (s.rfind("temperature", 0) == 0) {
    double tau = 0.5;
    const auto colon = s.find(':');
    if (colon != std::string::npos) {
      try {
        tau = std::stod(s.substr(colon + 1));
      } catch (const std::exception&) {
        throw std::invalid_argument("bad temperature in weighting '" + s + "'");
      }
    }
    if (tau < 0.0) throw std::invalid_argument("temperature must be >= 0");
    return {WeightingKind::kTemperature, tau};
  }
  throw std::invalid_argument("unknown weighting '" + s + "'");
}

std::string Weighting::str() const {
  switch (kind) {
    case WeightingKind::kProportional:
      return "proportional";
    case WeightingKind::kUniform:
      return "uniform";
    case WeightingKind::kTemperature:
      break;
  }
  return "temperature:" + nlohmann::json(tau).dump();
}

PairingSampler::PairingSampler(std::vector<PairingInfo> pairings, std::size_t batch_size, Weighting weighting,
                               std::uint64_t seed)
    : batch_(batch_size), seed_(seed) {
  if (batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
  for (auto& p : pairings) {
    if (p.size < batch_size) {
      ++dropped_;
    } else {
      pairings_.push_back(std::move(p));
    }
  }
  if (pairings_.empty()) throw std::invalid_argument("no pairing has at least batch_size records");
  const double tau = weighting.kind == WeightingKind::kProportional ? 1.0
                     : weighting.kind == WeightingKind::kUniform    ? 0.0
                                                                    : weighting.tau;
  double total = 0.0;
  for (const auto& p : pairings_) {
    probs_.push_back(std::pow(static_cast<double>(p.size), tau));
    total += probs_.back();
  }
  for (auto& w : probs_) w /= total;
}

PairingDraw PairingSampler::draw(std::uint64_t step) const {
  std::mt19937_64 rng(mix_seed(seed_, step));
  std::discrete_distribution<std::size_t> pick(probs_.begin(), probs_.end());
  PairingDraw d;
  d.pairing = pick(rng);
  const std::size_t n = pairings_[d.pairing].size;
  // Partial Fisher-Yates over [0, n) for batch_ distinct indices.
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < batch_; ++i) {
    const std::size_t j = std::uniform_int_distribution<std::size_t>(i, n - 1)(rng);
    std::swap(idx[i], idx[j]);
  }
  d.indices.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(batch_));
  return d;
}

// ---- batches ---------------------------------------------------------------------

PairingDataset load_pairing_dataset(const ShardSet& set, const std::string& sensor, const std::string& task,
                                    std::size_t limit) {
  PairingDataset ds{sensor, task, {}};
  ShardStream stream(set, {});
  while (ds.samples.size() < limit) {
    auto r = stream.next();
    if (!r) break;
    Sample s;
    s.key = r->key;
    s.image = decode_jpeg(r->image_bytes);
    if (!r->pair_bytes.empty()) s.pair = decode_jpeg(r->pair_bytes);
    s.labels = std::move(r->labels);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

void check_homogeneous(const std::string& sensor, const std::string& task, const std::vector<const Sample*>& samples) {
  for (const Sample* s : samples) {
    if (s->labels.value("sensor_id", std::string{}) != sensor) {
      throw std::invalid_argument("mixed batch: record '" + s->key + "' belongs to sensor '" +
                                  s->labels.value("sensor_id", std::string{}) + "', batch is '" + sensor + "'");
    }
    if (s->labels.contains("task") && s->labels.at("task").get<std::string>() != task) {
      throw std::invalid_argument("mixed batch: record '" + s->key + "' belongs to task '" +
                                  s->labels.at("task").get<std::string>() + "', batch is '" + task + "'");
    }
  }
}

template <typename T>
Tensor<T> stack_images(const std::vector<Tensor<float>>& images) {
  if (images.empty()) throw std::invalid_argument("stack_images: empty batch");
  const Shape& s = images[0].shape();
  std::vector<T> data;
  data.reserve(images.size() * images[0].numel());
  for (const auto& im : images) {
    if (im.shape() != s) throw ShapeError("stack_images: inconsistent image shapes");
    for (float v : im.data()) data.push_back(static_cast<T>(v));
  }
  Shape out{images.size()};
  out.insert(out.end(), s.begin(), s.end());
  return Tensor<T>(out, std::move(data));
}

template <typename T>
PairingBatch<T> make_batch(const PairingDataset& data, const TaskSpec& task, const std::vector<std::size_t>& indices,
                           std::optional<std::uint64_t> augment_seed, const AugmentOptions& opts) {
  if (indices.empty()) throw std::invalid_argument("make_batch: empty index list");
  std::vector<const Sample*> samples;
  for (std::size_t i : indices) samples.push_back(&data.samples.at(i));
  check_homogeneous(data.sensor, data.task, samples);

  PairingBatch<T> b;
  b.sensor = data.sensor;
  b.task = data.task;
  const std::size_t arity = task.decoder.arity;
  std::vector<std::vector<Tensor<float>>> slots(arity);
  for (std::size_t k = 0; k < samples.size(); ++k) {
    const Sample& s = *samples[k];
    b.keys.push_back(s.key);
    // Both images of a pair share one augmentation draw.
    const std::optional<std::uint64_t> seed =
        augment_seed ? std::optional<std::uint64_t>(mix_seed(*augment_seed, k)) : std::nullopt;
    for (std::size_t a = 0; a < arity; ++a) {
      const Image& img = a == 0 ? s.image : s.pair;
      if (img.empty()) throw std::invalid_argument("record '" + s.key + "' lacks image " + std::to_string(a + 1));
      slots[a].push_back(seed ? augment(img, task.decoder.kind, *seed, opts) : preprocess(img, opts));
    }
  }
  for (auto& slot : slots) b.images.push_back(stack_images<T>(slot));

  const std::size_t B = samples.size();
  switch (task.decoder.kind) {
    case DecoderKind::kClassifier:
      for (const Sample* s : samples) {
        const int y = s->labels.at(task.label).get<int>();
        if (y < 0 || static_cast<std::size_t>(y) >= task.decoder.num_classes) {
          throw std::invalid_argument("label out of range in record '" + s->key + "'");
        }
        b.class_labels.push_back(y);
      }
      break;
    case DecoderKind::kVolRegressor:
    case DecoderKind::kPose: {
      const std::size_t k = task.decoder.output_dim();
      std::vector<T> t;
      t.reserve(B * k);
      for (const Sample* s : samples) {
        const auto& v = s->labels.at(task.label);
        if (v.is_array()) {
          if (v.size() != k) throw std::invalid_argument("label width mismatch in record '" + s->key + "'");
          for (const auto& e : v) t.push_back(static_cast<T>(e.get<double>()));
        } else {
          if (k != 1) throw std::invalid_argument("label width mismatch in record '" + s->key + "'");
          t.push_back(static_cast<T>(v.get<double>()));
        }
      }
      b.targets = Tensor<T>(Shape{B, k}, std::move(t));
      break;
    }
    case DecoderKind::kMaeRecon:
      break;
  }
  return b;
}

template Tensor<float> stack_images<float>(const std::vector<Tensor<float>>&);
template Tensor<double> stack_images<double>(const std::vector<Tensor<float>>&);
template PairingBatch<float> make_batch<float>(const PairingDataset&, const TaskSpec&, const std::vector<std::size_t>&,
                                               std::optional<std::uint64_t>, const AugmentOptions&);
template PairingBatch<double> make_batch<double>(const PairingDataset&, const TaskSpec&,
                                                 const std::vector<std::size_t>&, std::optional<std::uint64_t>,
                                                 const AugmentOptions&);

}  // namespace t3
