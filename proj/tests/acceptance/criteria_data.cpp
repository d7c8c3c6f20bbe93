// Data layer, determinism and mask-sweep criteria.

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <nlohmann/json.hpp>
#include <random>
#include <set>
#include <sys/wait.h>

#include "criteria.hpp"
#include "t3/image.hpp"
#include "t3/synthgel.hpp"

namespace fs = std::filesystem;

namespace t3::acceptance {

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Straight-line reference: gray = 0.299 R + 0.587 G + 0.114 B, 4-neighbor
// Laplacian of the difference on interior pixels, two-pass population
// variance in long double.
double reference_sigma(const Image& img, const Image& flat) {
  const int w = img.width, h = img.height;
  auto gray = [](const Image& im, int x, int y) {
    return 0.299L * im.at(x, y, 0) + 0.587L * im.at(x, y, 1) + 0.114L * im.at(x, y, 2);
  };
  auto diff = [&](int x, int y) { return gray(img, x, y) - gray(flat, x, y); };
  std::vector<long double> lap;
  for (int y = 1; y + 1 < h; ++y) {
    for (int x = 1; x + 1 < w; ++x) {
      lap.push_back(diff(x - 1, y) + diff(x + 1, y) + diff(x, y - 1) + diff(x, y + 1) - 4.0L * diff(x, y));
    }
  }
  long double mean = 0.0L;
  for (long double v : lap) mean += v;
  mean /= static_cast<long double>(lap.size());
  long double var = 0.0L;
  for (long double v : lap) var += (v - mean) * (v - mean);
  return static_cast<double>(std::sqrt(var / static_cast<long double>(lap.size())));
}

std::vector<Image> sigma_probe_images(const Image& flat) {
  std::vector<Image> out;
  std::mt19937_64 rng(77);
  const auto style = default_styles(1)[0];
  for (int i = 0; i < 20; ++i) {
    Image im = flat;
    switch (i % 4) {
      case 0: {  // noise of growing amplitude
        std::uniform_int_distribution<int> d(-2 * i, 2 * i);
        for (auto& v : im.rgb) v = static_cast<std::uint8_t>(std::clamp(int(v) + d(rng), 0, 255));
        break;
      }
      case 1: {  // checkerboard
        for (int y = 0; y < im.height; ++y)
          for (int x = 0; x < im.width; ++x)
            if ((x / (i + 1) + y / (i + 1)) % 2) im.at(x, y, 1) = static_cast<std::uint8_t>(255 - im.at(x, y, 1));
        break;
      }
      case 2: {  // rendered contact
        Contact c{i % kNumProbes, -3.0 + 0.3 * i, 2.0 - 0.2 * i, kForceMin + 0.09 * i};
        im = render(style, flat, c);
        break;
      }
      default:  // unchanged: zero Laplacian
        break;
    }
    out.push_back(std::move(im));
  }
  return out;
}

int run(const std::string& cmd) {
  note("$ " + cmd);
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string cli() { return std::string("'") + T3_CLI_PATH + "'"; }

}  // namespace

Outcome criterion_7(const std::string& workdir) {
  const Stopwatch clock;
  // 25,000 records cycling through a bank of rendered frames; keys and label
  // documents are unique per record.
  const auto styles = default_styles(3);
  SynthOptions so;
  std::vector<ShardRecord> bank;
  const std::vector<std::string> tasks{"object_cls", "pose3", "vol"};
  for (std::size_t i = 0; i < 60; ++i) {
    const auto& st = styles[i % 3];
    bank.push_back(synth_record(st, flat_image(st), tasks[(i / 3) % 3], 9, i, so, "b" + std::to_string(i)));
  }
  std::vector<ShardRecord> records;
  records.reserve(25000);
  for (std::size_t i = 0; i < 25000; ++i) {
    ShardRecord r = bank[i % bank.size()];
    r.key = "rec" + std::to_string(i);
    r.labels["ordinal"] = i;
    records.push_back(std::move(r));
  }
  const ShardSet set = pack_shards(records, (fs::path(workdir) / "shards").string(), "train");
  const bool layout = set.archives.size() == 3 && set.counts == std::vector<std::size_t>{10000, 10000, 5000};

  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < records.size(); ++i) index[records[i].key] = i;
  std::size_t seen = 0, mismatched = 0, unknown = 0;
  std::vector<bool> hit(records.size(), false);
  {
    ShardStream stream(load_shard_set(set.dir, "train"), {});
    while (auto r = stream.next()) {
      ++seen;
      auto it = index.find(r->key);
      if (it == index.end()) {
        ++unknown;
        continue;
      }
      const ShardRecord& want = records[it->second];
      hit[it->second] = true;
      if (r->image_bytes != want.image_bytes || r->pair_bytes != want.pair_bytes ||
          r->labels.dump() != want.labels.dump()) {
        ++mismatched;
      }
    }
    if (stream.corrupt() != 0) ++mismatched;
  }
  const auto missing = static_cast<std::size_t>(std::count(hit.begin(), hit.end(), false));
  records.clear();
  records.shrink_to_fit();
  note(cat("roundtrip done at ", clock.seconds(), " s"));

  // vol_sigma against the reference on 20 images.
  const Image flat = flat_image(styles[0]);
  double sigma_err = 0.0;
  for (const Image& im : sigma_probe_images(flat)) {
    sigma_err = std::max(sigma_err, std::abs(vol_sigma(im, flat) - reference_sigma(im, flat)));
  }

  // vol_filter keeps a shrinking, nested set as the threshold grows.
  std::vector<ShardRecord> vol;
  for (std::size_t i = 0; i < 40; ++i) vol.push_back(synth_record(styles[0], flat, "vol", 13, i, so, "v" + std::to_string(i)));
  bool monotone = true;
  std::set<std::string> previous;
  for (std::size_t i = 0; i < vol.size(); ++i) previous.insert(vol[i].key);
  std::size_t first_kept = 0, last_kept = 0;
  for (int k = 0; k <= 40; ++k) {
    const double threshold = 0.5 * k;
    std::set<std::string> kept;
    for (const auto& r : vol_filter(vol, flat, threshold)) kept.insert(r.key);
    if (!std::includes(previous.begin(), previous.end(), kept.begin(), kept.end())) monotone = false;
    if (k == 0) first_kept = kept.size();
    last_kept = kept.size();
    previous = std::move(kept);
  }

  // 10,000 sampler draws over nine pairings of uneven size.
  std::vector<PairingInfo> infos;
  std::vector<std::vector<Sample>> pools;
  for (std::size_t s = 0; s < 3; ++s) {
    for (std::size_t t = 0; t < 3; ++t) {
      const std::size_t n = 5 + 13 * (s * 3 + t);
      infos.push_back({styles[s].name, tasks[t], n});
      std::vector<Sample> pool;
      for (std::size_t i = 0; i < n; ++i) {
        pool.push_back({"p" + std::to_string(i), {}, {}, {{"sensor_id", styles[s].name}, {"task", tasks[t]}}});
      }
      pools.push_back(std::move(pool));
    }
  }
  const PairingSampler sampler(infos, 4, Weighting::parse("temperature:0.5"), 21);
  std::size_t mixed = 0;
  for (std::uint64_t step = 0; step < 10000; ++step) {
    const PairingDraw d = sampler.draw(step);
    const auto& pool = pools.at(d.pairing);
    std::set<std::size_t> uniq(d.indices.begin(), d.indices.end());
    std::set<std::string> tags;
    std::vector<const Sample*> batch;
    for (std::size_t i : d.indices) {
      if (i >= pool.size()) {
        tags.insert("out-of-range");
        continue;
      }
      batch.push_back(&pool[i]);
      tags.insert(pool[i].labels["sensor_id"].get<std::string>() + "/" + pool[i].labels["task"].get<std::string>());
    }
    bool ok = tags.size() == 1 && uniq.size() == d.indices.size() && d.indices.size() == 4;
    try {
      check_homogeneous(infos[d.pairing].sensor, infos[d.pairing].task, batch);
    } catch (const std::exception&) {
      ok = false;
    }
    mixed += !ok;
  }

  const double secs = clock.seconds();
  const bool pass = layout && seen == 25000 && mismatched == 0 && unknown == 0 && missing == 0 && sigma_err <= 1e-9 &&
                    monotone && first_kept > last_kept && mixed == 0;
  std::string counts;
  for (std::size_t c : set.counts) counts += (counts.empty() ? "" : "/") + std::to_string(c);
  return {pass, cat(set.archives.size(), " archives (", counts, "), ", seen, " streamed, ", mismatched,
                    " not byte-identical, ", missing, " missing; vol_sigma max error ", sigma_err, "; vol_filter ",
                    monotone ? "nested" : "NOT nested", " (", first_kept, " -> ", last_kept, " kept); ", mixed,
                    " mixed batches in 10000; ", secs, " s")};
}

Outcome criterion_9(const std::string& workdir) {
  // Both runs use the same paths, so manifests (which record them) must match
  // too. Each run is moved aside before the next starts.
  const fs::path w(workdir);
  const std::string env = "T3_DETERMINISTIC=1 ";
  const std::string data = (w / "data").string(), out = (w / "run").string();
  for (const char* tag : {"a", "b"}) {
    if (run(env + cli() + " synth --styles 2 --per-pairing 12 --tasks object_cls --seed 4 --out '" + data + "'") != 0)
      return {false, std::string("synth run ") + tag + " failed"};
    if (run(env + cli() + " pretrain1 --data '" + data + "' --out '" + out +
            "' --size nano --steps 5 --batch-size 4 --seed 4") != 0)
      return {false, std::string("pretrain1 run ") + tag + " failed"};
    fs::rename(w / "data", w / (std::string("data_") + tag));
    fs::rename(w / "run", w / (std::string("run_") + tag));
  }

  std::vector<std::string> problems;
  std::size_t compared = 0;
  bool have_ckpt = false, have_log = false;
  for (const char* tree : {"data", "run"}) {
    const fs::path a = w / (std::string(tree) + "_a"), b = w / (std::string(tree) + "_b");
    for (const auto& entry : fs::recursive_directory_iterator(a)) {
      if (!entry.is_regular_file()) continue;
      const fs::path rel = fs::relative(entry.path(), a);
      have_ckpt |= rel == "model.ckpt";
      have_log |= rel == "metrics.jsonl";
      ++compared;
      if (!fs::exists(b / rel) || slurp(entry.path()) != slurp(b / rel)) problems.push_back(rel.string() + " differs");
    }
  }
  std::size_t rows = 0;
  {
    std::ifstream in(w / "run_a" / "metrics.jsonl");
    for (std::string line; std::getline(in, line);) rows += !line.empty();
  }
  const bool pass = problems.empty() && have_ckpt && have_log && rows >= 5;
  return {pass, problems.empty() ? cat(compared, " files bit-identical across two runs (checkpoint ",
                                       have_ckpt ? "and" : "MISSING,", " metric log with ", rows, " rows)")
                                 : cat(problems.size(), " differences, first: ", problems.front())};
}

Outcome criterion_10(const std::string& workdir) {
  const Stopwatch clock;
  const fs::path out = fs::path(workdir) / "sweep";
  if (run(cli() + " mask-sweep --out '" + out.string() + "'") != 0) return {false, "mask-sweep exited non-zero"};
  const auto j = nlohmann::json::parse(slurp(out / "mask_sweep.json"));
  const std::vector<double> ratios{0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
  const auto& rows = j.at("rows");
  bool counts_ok = rows.size() == ratios.size();
  bool finite = true;
  std::size_t prev = 0;
  std::string trail;
  for (std::size_t i = 0; counts_ok && i < rows.size(); ++i) {
    const auto masked = rows[i].at("masked").get<std::size_t>();
    const bool match = std::abs(rows[i].at("ratio").get<double>() - ratios[i]) < 1e-12 &&
                       masked == static_cast<std::size_t>(std::lround(196.0 * ratios[i])) &&
                       masked + rows[i].at("visible").get<std::size_t>() == 196 && (i == 0 || masked > prev);
    counts_ok = counts_ok && match;
    prev = masked;
    for (const char* k : {"first_loss", "final_loss", "val_top1"}) finite = finite && std::isfinite(rows[i].at(k).get<double>());
    trail += (trail.empty() ? "" : " ") + std::to_string(masked);
  }
  const std::string table = slurp(out / "mask_sweep.md");
  const auto table_rows = static_cast<std::size_t>(std::count(table.begin(), table.end(), '\n'));
  const std::string svg = slurp(out / "mask_sweep.svg");
  const bool plot_ok = svg.find("<svg") != std::string::npos && svg.find("<polyline") != std::string::npos;
  const bool pass = counts_ok && finite && table_rows >= ratios.size() + 2 && plot_ok;
  return {pass, cat("masked counts ", trail, (counts_ok ? " (strictly increasing, = round(196 r))" : " (WRONG)"),
                    ", table lines ", table_rows, ", plot ", plot_ok ? "ok" : "missing", ", ", clock.seconds(), " s")};
}

}  // namespace t3::acceptance
