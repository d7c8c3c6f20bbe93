#include "commands.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <numeric>
#include <sstream>

#include "t3/checkpoint.hpp"
#include "t3/datapipe.hpp"
#include "t3/image.hpp"
#include "t3/mae.hpp"
#include "t3/plot.hpp"
#include "t3/runtime.hpp"
#include "t3/synthgel.hpp"
#include "t3/trainer.hpp"

#ifndef T3_VERSION
#define T3_VERSION "0.0.0"
#endif
#ifndef T3_GIT_STAMP
#define T3_GIT_STAMP "unknown"
#endif

namespace fs = std::filesystem;
using nlohmann::json;

namespace t3::cli {

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << data;
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
}

json read_config(const std::string& path) {
  if (path.empty()) return json::object();
  const std::string text = read_file(path);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw ConfigError("config '" + path + "' must be a JSON object");
  return j;
}

template <typename V>
void override_key(json& j, const char* key, const std::optional<V>& v) {
  if (v) j[key] = *v;
}

std::optional<std::string> opt_string(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<std::string>();
}

bool is_supervised(const std::string& task) { return task != "unlabeled" && task != "mae"; }

struct LoadedPairing {
  PairingDataset train;
  std::optional<PairingDataset> val;
};

std::vector<LoadedPairing> load_pairings(const std::vector<PairingShards>& shards, std::size_t limit) {
  std::vector<LoadedPairing> out;
  for (const auto& p : shards) {
    LoadedPairing lp{load_pairing_dataset(p.train, p.sensor, p.task, limit), std::nullopt};
    if (p.val) lp.val = load_pairing_dataset(*p.val, p.sensor, p.task);
    out.push_back(std::move(lp));
  }
  return out;
}

ModelSpec fresh_spec(const std::string& size, const std::vector<PairingShards>& pairings, bool with_mae) {
  ModelSpec spec;
  spec.size = size_config(size);
  for (const auto& p : pairings) {
    if (!spec.share_map.count(p.sensor)) {
      spec.sensors.push_back(p.sensor);
      spec.share_map[p.sensor] = p.sensor;
    }
    const bool known = std::any_of(spec.tasks.begin(), spec.tasks.end(), [&](const TaskSpec& t) { return t.id == p.task; });
    if (is_supervised(p.task) && !known) spec.tasks.push_back(standard_task(p.task));
  }
  if (with_mae) spec.tasks.push_back(standard_task("mae"));
  return spec;
}

/// Registers missing sensors (substituted when a donor group is given) and tasks.
void ensure_routes(T3Model<float>& model, const std::vector<PairingShards>& pairings, Stage stage,
                   const std::optional<std::string>& donor) {
  for (const auto& p : pairings) {
    if (!model.has_sensor(p.sensor)) {
      if (donor) {
        model.substitute_encoder(p.sensor, *donor);
      } else {
        model.add_sensor(p.sensor, p.sensor);
      }
    }
    if (stage != Stage::kPretrain1 && !model.has_task(p.task)) model.add_task(standard_task(p.task));
  }
  if (stage == Stage::kPretrain1 && model.mae_task().empty()) model.add_task(standard_task("mae"));
}

void write_failed(const std::string& out, const std::string& message) {
  if (out.empty()) return;
  std::error_code ec;
  fs::create_directories(out, ec);
  std::ofstream f(fs::path(out) / ".failed");
  f << message << "\n";
}

void loss_plot(const std::string& path, const std::vector<MetricRow>& log) {
  std::map<std::string, Series> by_pairing;
  for (const auto& r : log) {
    if (r.metric_name != "loss") continue;
    auto& s = by_pairing[r.pairing];
    s.name = r.pairing;
    s.x.push_back(static_cast<double>(r.step));
    s.y.push_back(r.loss);
  }
  std::vector<Series> series;
  for (auto& [k, s] : by_pairing) series.push_back(std::move(s));
  write_line_plot_svg(path, "training loss", "step", "loss", series);
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

}  // namespace

json run_manifest(const std::string& command, const std::string& config_path, const json& config, std::uint64_t seed,
                  const std::string& out) {
  return {{"command", command},
          {"config_path", config_path},
          {"config", config},
          {"seed", seed},
          {"out", out},
          {"deterministic", deterministic_mode()},
          {"version", T3_VERSION},
          {"git", T3_GIT_STAMP}};
}

void write_run_manifest(const std::string& out, const json& manifest) {
  fs::create_directories(out);
  write_file((fs::path(out) / "run_manifest.json").string(), manifest.dump(2) + "\n");
}

int guarded(const std::string& out, const std::function<int()>& body) {
  if (!out.empty()) {
    std::error_code ec;
    fs::remove(fs::path(out) / ".failed", ec);
  }
  try {
    return body();
  } catch (const NanAbort& e) {
    std::cerr << "error: " << e.what() << "\n";
    write_failed(out, e.what());
    return kNumericAbort;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    write_failed(out, e.what());
    return kConfigError;
  } catch (const json::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    write_failed(out, e.what());
    return kConfigError;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    write_failed(out, e.what());
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    write_failed(out, e.what());
    return kIoError;
  }
}

// ---- synth ---------------------------------------------------------------------

int cmd_synth(const SynthArgs& a) {
  if (a.per_pairing == 0) throw ConfigError("--per-pairing must be >= 1");
  if (a.styles == 0) throw ConfigError("--styles must be >= 1");
  if (a.tasks.empty()) throw ConfigError("--tasks must name at least one task");
  if (a.out.empty()) throw ConfigError("--out is required");
  for (const auto& t : a.tasks)
    if (t != "unlabeled") standard_task(t);
  const json cfg{{"styles", a.styles}, {"per_pairing", a.per_pairing}, {"val_per_pairing", a.val_per_pairing},
                 {"tasks", a.tasks}, {"seed", a.seed}};
  write_run_manifest(a.out, run_manifest("synth", "", cfg, a.seed, a.out));
  SynthOptions opts;
  opts.n_per_pairing = a.per_pairing;
  opts.val_per_pairing = a.val_per_pairing;
  opts.seed = a.seed;
  const auto sets = generate_dataset(default_styles(a.styles), a.tasks, opts, a.out);
  std::size_t total = 0;
  for (const auto& p : sets) {
    const std::size_t v = p.val ? p.val->total() : 0;
    std::cout << p.sensor << "/" << p.task << ": " << p.train.total() << " train, " << v << " val, "
              << p.train.archives.size() << " archive(s)\n";
    total += p.train.total() + v;
  }
  std::cout << sets.size() << " pairings, " << total << " records in " << a.out << "\n";
  return kOk;
}

// ---- training stages -------------------------------------------------------------

int cmd_train(const TrainArgs& a) {
  const Stage stage = parse_stage(a.stage);
  json merged = read_config(a.config_path);
  if (merged.contains("stage") && merged.at("stage").get<std::string>() != a.stage) {
    throw ConfigError("config stage '" + merged.at("stage").get<std::string>() + "' does not match command " + a.stage);
  }
  merged["stage"] = a.stage;
  override_key(merged, "data", a.data);
  override_key(merged, "out", a.out);
  override_key(merged, "init", a.init);
  override_key(merged, "resume", a.resume);
  override_key(merged, "donor_group", a.donor_group);
  override_key(merged, "sensor", a.sensor);
  override_key(merged, "task", a.task);
  override_key(merged, "freeze", a.freeze);
  override_key(merged, "model_size", a.size);
  override_key(merged, "pairing_weighting", a.weighting);
  override_key(merged, "steps", a.steps);
  override_key(merged, "batch_size", a.batch_size);
  override_key(merged, "warmup_steps", a.warmup_steps);
  override_key(merged, "eval_every", a.eval_every);
  override_key(merged, "checkpoint_every", a.checkpoint_every);
  override_key(merged, "limit", a.limit);
  override_key(merged, "base_lr", a.lr);
  override_key(merged, "weight_decay", a.weight_decay);
  override_key(merged, "mask_ratio", a.mask_ratio);
  override_key(merged, "seed", a.seed);
  if (a.no_augment) merged["augment"] = false;

  const auto data_dir = opt_string(merged, "data");
  const auto out = opt_string(merged, "out");
  if (!data_dir) throw ConfigError("no data directory (--data or \"data\" in the config)");
  if (!out) throw ConfigError("no output directory (--out or \"out\" in the config)");
  TrainConfig cfg;
  try {
    cfg = train_config_from_json(merged);
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  const auto sensor = opt_string(merged, "sensor");
  const auto task = opt_string(merged, "task");
  const auto donor = opt_string(merged, "donor_group");
  const auto init = opt_string(merged, "init");
  const auto resume_path = opt_string(merged, "resume");
  const std::string size = merged.value("model_size", std::string("nano"));
  const std::size_t limit = merged.value("limit", std::numeric_limits<std::size_t>::max());
  if (stage == Stage::kFinetune && (!sensor || !task)) throw ConfigError("finetune needs --sensor and --task");
  json resolved = merged;
  resolved.update(to_json(cfg));
  write_run_manifest(*out, run_manifest(a.stage, a.config_path, resolved, cfg.seed, *out));

  std::vector<PairingShards> chosen;
  for (const auto& p : load_dataset_index(*data_dir)) {
    if (sensor && p.sensor != *sensor) continue;
    if (task && p.task != *task) continue;
    if (stage != Stage::kPretrain1 && !is_supervised(p.task)) continue;
    chosen.push_back(p);
  }
  if (chosen.empty()) throw ConfigError("no pairing in '" + *data_dir + "' matches the requested stage/sensor/task");

  std::optional<TrainState> resume;
  T3Model<float> model = [&] {
    if (resume_path) {
      const Checkpoint ck = read_checkpoint(*resume_path);
      resume = restore_state(ck);
      return model_from_checkpoint<float>(ck);
    }
    if (init) return model_from_checkpoint<float>(read_checkpoint(*init));
    return T3Model<float>::assemble(fresh_spec(size, chosen, stage == Stage::kPretrain1), cfg.seed);
  }();
  ensure_routes(model, chosen, stage, donor);
  if (merged.contains("freeze")) freeze(model, parse_freeze(merged.at("freeze").get<std::string>()));

  const auto loaded = load_pairings(chosen, limit);
  std::vector<PairingDataset> train;
  RunOptions opts;
  for (const auto& lp : loaded) train.push_back(lp.train);
  for (const auto& lp : loaded) opts.val.push_back(lp.val ? &*lp.val : nullptr);
  opts.checkpoint_path = (fs::path(*out) / "model.ckpt").string();
  opts.metric_log_path = (fs::path(*out) / "metrics.jsonl").string();
  if (!resume) {
    std::error_code ec;
    fs::remove(opts.metric_log_path, ec);
  }
  TrainState state;
  try {
    state = run_stage(model, train, cfg, opts, std::move(resume));
  } catch (const NanAbort&) {
    std::cerr << "last checkpoint: "
              << (fs::exists(opts.checkpoint_path) ? opts.checkpoint_path : std::string("(none written)")) << "\n";
    throw;
  }
  loss_plot((fs::path(*out) / "loss.svg").string(), state.log);
  json summary{{"stage", a.stage}, {"step", state.step}, {"checkpoint", opts.checkpoint_path}};
  for (auto it = state.log.rbegin(); it != state.log.rend(); ++it) {
    if (it->metric_name == "loss") {
      summary["final_loss"] = it->loss;
      break;
    }
  }
  for (const auto& r : state.log)
    if (r.metric_name != "loss" && r.step == state.step) summary["eval"][r.pairing] = {{r.metric_name, r.metric_value}};
  std::cout << summary.dump() << "\n";
  return kOk;
}

// ---- eval -----------------------------------------------------------------------

int cmd_eval(const EvalArgs& a) {
  if (a.split != "val" && a.split != "train") throw ConfigError("--split must be val or train");
  auto model = model_from_checkpoint<float>(read_checkpoint(a.ckpt));
  std::size_t evaluated = 0;
  for (const auto& p : load_dataset_index(a.data)) {
    if (p.task != a.task || (a.sensor && p.sensor != *a.sensor)) continue;
    if (a.split == "val" && !p.val) throw ConfigError("pairing " + p.sensor + "/" + p.task + " has no val split");
    if (!model.has_sensor(p.sensor)) {
      if (!a.donor_group) throw ConfigError("checkpoint has no encoder for sensor '" + p.sensor + "' (use --donor-group)");
      model.substitute_encoder(p.sensor, *a.donor_group);
    }
    if (!model.has_task(p.task)) throw ConfigError("checkpoint has no decoder for task '" + p.task + "'");
    const ShardSet& set = a.split == "val" ? *p.val : p.train;
    const auto ds = load_pairing_dataset(set, p.sensor, p.task, a.limit ? a.limit : std::numeric_limits<std::size_t>::max());
    const EvalResult r = evaluate(model, ds, model.task(p.task));
    json row{{"sensor", p.sensor}, {"task", p.task}, {"split", a.split}, {"metric", r.metric}, {"value", r.value},
             {"n", r.n}};
    std::cout << p.sensor << "/" << p.task << " " << r.metric << " " << fixed(r.value);
    if (r.metric == "rmse") std::cout << (model.task(p.task).decoder.kind == DecoderKind::kPose ? " mm" : "");
    if (a.baseline && r.metric == "rmse") {
      std::cout << " baseline " << fixed(r.baseline_rmse) << (model.task(p.task).decoder.kind == DecoderKind::kPose ? " mm" : "");
      row["baseline_rmse"] = r.baseline_rmse;
    }
    std::cout << " (n=" << r.n << ")\n" << row.dump() << "\n";
    ++evaluated;
  }
  if (!evaluated) throw ConfigError("no pairing with task '" + a.task + "' in '" + a.data + "'");
  return kOk;
}

// ---- attnviz -----------------------------------------------------------------------

int cmd_attnviz(const AttnvizArgs& a) {
  write_run_manifest(a.out, run_manifest("attnviz", "", {{"ckpt", a.ckpt}, {"image", a.image}, {"sensor", a.sensor}},
                                         0, a.out));
  const auto model = model_from_checkpoint<float>(read_checkpoint(a.ckpt));
  if (!model.has_sensor(a.sensor)) throw ConfigError("checkpoint has no sensor '" + a.sensor + "'");
  const Image img = decode_jpeg(read_file(a.image));
  const AugmentOptions geo;
  const int off = (geo.resize - geo.crop) / 2;
  const Image view = crop(resize_bilinear(img, geo.resize, geo.resize), off, off, geo.crop, geo.crop);
  NoGradGuard ng;
  AttentionTrace enc, trunk;
  const Tensor<float> x = stack_images<float>({preprocess(img)});
  model.trunk_tokens(a.sensor, model.to_patches(x), &enc, &trunk);
  const std::size_t patch = model.spec().patch_size;
  for (const auto& [name, trace] : {std::pair<std::string, const AttentionTrace*>{"encoder", &enc}, {"trunk", &trunk}}) {
    const Tensor<double> map = joint_attention_map(*trace);
    const std::size_t g = map.dim(0);
    Image masked = view;
    for (int y = 0; y < view.height; ++y)
      for (int xx = 0; xx < view.width; ++xx) {
        const double w = map.values()[(static_cast<std::size_t>(y) / patch) * g + static_cast<std::size_t>(xx) / patch];
        for (int c = 0; c < 3; ++c) masked.at(xx, y, c) = static_cast<std::uint8_t>(std::lround(view.at(xx, y, c) * w));
      }
    write_png((fs::path(a.out) / (name + "_mask.png")).string(), masked);
    json raw{{"grid", g}, {"values", json::array()}};
    for (std::size_t r = 0; r < g; ++r) {
      std::vector<double> row(map.values().begin() + static_cast<long>(r * g), map.values().begin() + static_cast<long>((r + 1) * g));
      raw["values"].push_back(row);
    }
    write_file((fs::path(a.out) / (name + "_map.json")).string(), raw.dump() + "\n");
  }
  std::cout << "wrote encoder/trunk masks and maps to " << a.out << "\n";
  return kOk;
}

// ---- mask-ratio sweep -------------------------------------------------------------

int cmd_mask_sweep(const SweepArgs& a) {
  if (a.out.empty()) throw ConfigError("--out is required");
  if (a.ratios.empty()) throw ConfigError("--ratios must list at least one ratio");
  for (double r : a.ratios)
    if (!(r > 0.0 && r < 1.0)) throw ConfigError("mask ratios must lie in (0, 1)");
  if (a.steps < 2 || a.finetune_steps < 2) throw ConfigError("--steps and --finetune-steps must be >= 2");
  const json cfg{{"ratios", a.ratios},         {"steps", a.steps},       {"finetune_steps", a.finetune_steps},
                 {"batch_size", a.batch_size}, {"per_pairing", a.per_pairing}, {"data", a.data.value_or("")}};
  write_run_manifest(a.out, run_manifest("mask-sweep", "", cfg, a.seed, a.out));

  std::string data_dir;
  if (a.data) {
    data_dir = *a.data;
  } else {
    data_dir = (fs::path(a.out) / "data").string();
    SynthOptions so;
    so.n_per_pairing = a.per_pairing;
    so.val_per_pairing = 16;
    so.seed = a.seed;
    generate_dataset(default_styles(2), {"object_cls"}, so, data_dir);
  }
  std::vector<PairingShards> shards;
  for (const auto& p : load_dataset_index(data_dir))
    if (p.task == "object_cls") shards.push_back(p);
  if (shards.empty()) throw ConfigError("mask sweep needs object_cls pairings in '" + data_dir + "'");
  if (!shards.front().val) throw ConfigError("mask sweep needs a val split");
  const auto loaded = load_pairings(shards, std::numeric_limits<std::size_t>::max());
  std::vector<PairingDataset> train;
  for (const auto& lp : loaded) train.push_back(lp.train);

  json rows = json::array();
  std::vector<std::vector<std::string>> table;
  Series top1{"val top-1", {}, {}}, drop{"MAE loss ratio (final/first)", {}, {}};
  for (double r : a.ratios) {
    auto model = T3Model<float>::assemble(fresh_spec("nano", shards, true), a.seed);
    TrainConfig pre = TrainConfig::defaults(Stage::kPretrain1, a.steps);
    pre.batch_size = a.batch_size;
    pre.mask_ratio = r;
    pre.seed = a.seed;
    pre.base_lr = 5e-4;
    const TrainState ps = run_stage(model, train, pre);
    std::vector<double> losses;
    for (const auto& row : ps.log)
      if (row.metric_name == "loss") losses.push_back(row.loss);
    const std::size_t tail = std::min<std::size_t>(5, losses.size());
    const double final_loss = std::accumulate(losses.end() - static_cast<long>(tail), losses.end(), 0.0) / static_cast<double>(tail);

    TrainConfig ft = TrainConfig::defaults(Stage::kFinetune, a.finetune_steps);
    ft.batch_size = a.batch_size;
    ft.seed = a.seed;
    ft.base_lr = 5e-4;
    run_stage(model, {train.front()}, ft);
    const EvalResult ev = evaluate(model, *loaded.front().val, model.task("object_cls"));

    const std::size_t masked = make_mask(1, r, a.seed).masked_count();
    rows.push_back({{"ratio", r}, {"masked", masked}, {"visible", 196 - masked}, {"first_loss", losses.front()},
                    {"final_loss", final_loss}, {"val_top1", ev.value}});
    table.push_back({fixed(r, 2), std::to_string(masked), fixed(losses.front()), fixed(final_loss), fixed(ev.value, 3)});
    top1.x.push_back(r);
    top1.y.push_back(ev.value);
    drop.x.push_back(r);
    drop.y.push_back(final_loss / losses.front());
    std::cout << "ratio " << fixed(r, 2) << ": masked " << masked << ", loss " << fixed(losses.front()) << " -> "
              << fixed(final_loss) << ", val top-1 " << fixed(ev.value, 3) << std::endl;
  }
  const std::string md =
      markdown_table({"mask ratio", "masked patches", "first MAE loss", "final MAE loss", "val top-1"}, table);
  write_file((fs::path(a.out) / "mask_sweep.md").string(), md);
  write_file((fs::path(a.out) / "mask_sweep.json").string(), json{{"rows", rows}}.dump(2) + "\n");
  write_line_plot_svg((fs::path(a.out) / "mask_sweep.svg").string(), "masking ratio sweep (nano)", "mask ratio",
                      "value", {top1, drop});
  std::cout << md;
  return kOk;
}

}  // namespace t3::cli
