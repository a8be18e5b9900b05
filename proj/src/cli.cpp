#include "lunardem/cli.hpp"

#include "lunardem/error.hpp"

#include "CLI11.hpp"

#include <charconv>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

namespace lunardem::cli {

namespace fs = std::filesystem;
using nlohmann::json;

void to_json(json& j, const PathsConfig& p) {
  j = {{"raw_dir", p.raw_dir}, {"store_dir", p.store_dir}, {"checkpoint_dir", p.checkpoint_dir},
       {"out_dir", p.out_dir}};
}

void to_json(json& j, const SplitConfig& s) { j = {{"ratios", s.ratios}, {"unit", s.unit}}; }

namespace {

[[noreturn]] void usage(const std::string& what) { throw Error(ErrorKind::Usage, what); }

json train_section(const TrainConfig& t) {
  json j = t;
  for (const char* k : {"seed", "loss_weights", "checkpoint_dir"}) j.erase(k);
  return j;
}

json synth_section(const DatasetParams& d) {
  json j = d;
  for (const char* k : {"n_pairs", "tile_size", "split_ratios", "qc", "normalization"}) j.erase(k);
  return j;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

std::vector<std::string> split_list(std::string text) {
  text = trim(text);
  if (!text.empty() && text.front() == '[' && text.back() == ']') text = text.substr(1, text.size() - 2);
  std::vector<std::string> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

json coerce(const json& like, const std::string& raw, const std::string& key) {
  const std::string text = trim(raw);
  try {
    std::size_t used = 0;
    switch (like.type()) {
      case json::value_t::boolean:
        if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
        if (text == "false" || text == "0" || text == "no" || text == "off") return false;
        break;
      case json::value_t::number_unsigned: {
        if (!text.empty() && text[0] == '-') break;
        const unsigned long long v = std::stoull(text, &used);
        if (used == text.size()) return v;
        break;
      }
      case json::value_t::number_integer: {
        const long long v = std::stoll(text, &used);
        if (used == text.size()) return v;
        break;
      }
      case json::value_t::number_float: {
        const double v = std::stod(text, &used);
        if (used == text.size()) return v;
        break;
      }
      case json::value_t::string: return text;
      case json::value_t::array: {
        const auto items = split_list(text);
        if (items.size() != like.size()) {
          usage(key + " expects " + std::to_string(like.size()) + " values, got " + std::to_string(items.size()));
        }
        json out = json::array();
        for (std::size_t i = 0; i < items.size(); ++i) out.push_back(coerce(like[i], items[i], key));
        return out;
      }
      default: break;
    }
  } catch (const std::logic_error&) {
  }
  usage("cannot read '" + text + "' as a value for " + key);
}

// Merges `over` onto `base`, refusing keys the defaults do not have.
void merge_checked(json& base, const json& over, const std::string& where) {
  if (!over.is_object()) usage(where.empty() ? "config must be an object" : where + " must be a section");
  for (auto it = over.begin(); it != over.end(); ++it) {
    const std::string key = where.empty() ? it.key() : where + "." + it.key();
    if (!base.contains(it.key())) usage("unknown config key '" + key + "'");
    json& slot = base[it.key()];
    if (slot.is_object()) {
      merge_checked(slot, it.value(), key);
    } else if (slot.is_number() && it.value().is_number()) {
      slot = slot.is_number_float() ? json(it.value().get<double>()) : it.value();
    } else if (slot.type() != it.value().type() && !(slot.is_array() && it.value().is_array())) {
      usage("config key '" + key + "' has the wrong type");
    } else {
      slot = it.value();
    }
  }
}

std::string value_text(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_array()) {
    std::string out = "[";
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + value_text(v[i]);
    return out + "]";
  }
  if (v.is_number_float()) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v.get<double>());
    std::string s(buf, res.ptr);
    if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
    return s;
  }
  return v.dump();
}

}  // namespace

json default_config(bool desk) {
  PipelineConfig c;
  if (desk) {
    c.qc.tile_size = 64;
    c.train.batch_size = 8;
    c.train.epochs = 20;
    c.model.backbone = Backbone::tiny_unet;
  }
  return to_json(c);
}

json to_json(const PipelineConfig& c) {
  return {{"seed", c.seed},         {"qc", c.qc},       {"normalization", c.normalization},
          {"model", c.model},       {"train", train_section(c.train)},
          {"loss", c.loss},         {"paths", c.paths}, {"split", c.split},
          {"synth", synth_section(c.synth)}};
}

PipelineConfig from_json(const json& j) {
  json full = default_config(false);
  merge_checked(full, j, "");
  PipelineConfig c;
  try {
    c.seed = full.at("seed").get<std::uint64_t>();
    c.qc = full.at("qc").get<QcConfig>();
    c.normalization = full.at("normalization").get<NormalizationConfig>();
    c.model = full.at("model").get<ModelConfig>();
    c.loss = full.at("loss").get<LossWeights>();
    json t = full.at("train");
    t["seed"] = c.seed;
    t["loss_weights"] = full.at("loss");
    t["checkpoint_dir"] = full.at("paths").at("checkpoint_dir");
    c.train = t.get<TrainConfig>();
    const json& p = full.at("paths");
    c.paths = {p.at("raw_dir"), p.at("store_dir"), p.at("checkpoint_dir"), p.at("out_dir")};
    c.split.ratios = full.at("split").at("ratios").get<std::array<double, 3>>();
    c.split.unit = full.at("split").at("unit").get<std::string>();
    json s = full.at("synth");
    s["n_pairs"] = 1;
    s["tile_size"] = c.qc.tile_size;
    s["split_ratios"] = c.split.ratios;
    s["qc"] = c.qc;
    s["normalization"] = c.normalization;
    c.synth = s.get<DatasetParams>();
  } catch (const json::exception& e) {
    usage(std::string("bad config: ") + e.what());
  }
  split_unit_from_string(c.split.unit);
  return c;
}

void apply_setting(json& cfg, const std::string& key, const std::string& value) {
  const auto dot = key.find('.');
  if (dot == std::string::npos) {
    if (!cfg.contains(key) || cfg[key].is_object()) usage("unknown config key '" + key + "'");
    cfg[key] = coerce(cfg[key], value, key);
    return;
  }
  const std::string section = key.substr(0, dot), name = key.substr(dot + 1);
  if (!cfg.contains(section) || !cfg[section].is_object() || !cfg[section].contains(name)) {
    usage("unknown config key '" + key + "'");
  }
  cfg[section][name] = coerce(cfg[section][name], value, key);
}

void apply_config_file(json& cfg, const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::MissingFile, "cannot open config file " + path.string());
  CLI::ConfigBase parser;
  parser.comment('#')->arrayBounds('[', ']')->arrayDelimiter(',')->valueSeparator('=');
  std::vector<CLI::ConfigItem> items;
  try {
    items = parser.from_config(in);
  } catch (const CLI::Error& e) {
    usage("cannot parse " + path.string() + ": " + e.what());
  }
  for (const auto& item : items) {
    if (item.name == "++" || item.name == "--") continue;  // section markers
    if (item.parents.size() > 1) usage("nested section in " + path.string() + ": " + item.fullname());
    std::string value;
    if (item.inputs.size() == 1) {
      value = item.inputs[0];
    } else {
      for (std::size_t i = 0; i < item.inputs.size(); ++i) value += (i ? "," : "") + item.inputs[i];
    }
    apply_setting(cfg, item.fullname(), value);
  }
}

std::string to_config_text(const json& cfg) {
  std::ostringstream out;
  for (auto it = cfg.begin(); it != cfg.end(); ++it)
    if (!it.value().is_object()) out << it.key() << " = " << value_text(it.value()) << "\n";
  for (auto it = cfg.begin(); it != cfg.end(); ++it) {
    if (!it.value().is_object()) continue;
    out << "\n[" << it.key() << "]\n";
    for (auto kv = it.value().begin(); kv != it.value().end(); ++kv) {
      const bool quote = kv.value().is_string();
      out << kv.key() << " = " << (quote ? "\"" : "") << value_text(kv.value()) << (quote ? "\"" : "") << "\n";
    }
  }
  return out.str();
}

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Usage:
    case ErrorKind::BadConfig:
    case ErrorKind::BadRatios:
    case ErrorKind::BadShape:
    case ErrorKind::ConfigMismatch:
    case ErrorKind::MissingMetadata:
    case ErrorKind::OutOfBounds:
    case ErrorKind::OutOfRange:
    case ErrorKind::MissingStats:
    case ErrorKind::EmptySplit:
      return kUsage;
    case ErrorKind::NonFiniteLoss:
    case ErrorKind::NonFiniteInput:
    case ErrorKind::NegativePtp:
      return kNumeric;
    default:
      return kIo;
  }
}

namespace {

// Command-line options that write straight into config keys.
struct ConfigFlag {
  const char* flag;
  const char* key;
  const char* help;
};

const std::map<std::string, std::vector<ConfigFlag>>& config_flags() {
  static const std::map<std::string, std::vector<ConfigFlag>> table = {
      {"synth",
       {{"--tile-size", "qc.tile_size", "tile edge in pixels"},
        {"--pixel-scale", "synth.pixel_scale", "meters per pixel"},
        {"--split-unit", "split.unit", "tile or strip"}}},
      {"preprocess",
       {{"--tile-size", "qc.tile_size", "tile edge in pixels"},
        {"--gamma", "qc.gamma", "minimum valid-area ratio"},
        {"--ptp-min", "qc.ptp_min", "minimum elevation range (m)"},
        {"--split-unit", "split.unit", "tile or strip"}}},
      {"train",
       {{"--checkpoint-dir", "paths.checkpoint_dir", "checkpoint directory"},
        {"--epochs", "train.epochs", "training epochs"},
        {"--batch-size", "train.batch_size", "batch size"},
        {"--lr", "train.lr", "initial learning rate"},
        {"--lr-min", "train.lr_min", "final learning rate"},
        {"--weight-decay", "train.weight_decay", "L2 weight decay"},
        {"--val-every", "train.val_every", "validate every N epochs"},
        {"--clip-norm", "train.clip_norm", "gradient norm clip (0 = off)"},
        {"--backbone", "model.backbone", "effnet_b3 or tiny_unet"},
        {"--dropout", "model.dropout_p", "decoder dropout"}}},
      {"eval", {{"--checkpoint-dir", "paths.checkpoint_dir", "checkpoint directory"}}},
      {"infer", {{"--checkpoint-dir", "paths.checkpoint_dir", "checkpoint directory"}}},
      {"profile", {{"--checkpoint-dir", "paths.checkpoint_dir", "checkpoint directory"}}},
  };
  return table;
}

using Args = std::map<std::string, std::string>;

struct CommandSpec {
  const char* name;
  const char* help;
  std::vector<std::pair<const char*, const char*>> options;  // "--name", help
  std::vector<std::pair<const char*, const char*>> switches;
  std::vector<const char*> required;
};

const std::vector<CommandSpec>& command_specs() {
  static const std::vector<CommandSpec> specs = {
      {"synth",
       "generate a synthetic tile store (or raw strips with --raw)",
       {{"--n", "number of synthetic pairs"}, {"--out", "output directory"}, {"--strip-tiles", "raw strip edge in tiles"}},
       {{"--raw", "write raw rasters and pairs.csv instead of a store"}},
       {"--n"}},
      {"preprocess",
       "align, tile, filter and normalize raw pairs into a tile store",
       {{"--pairs", "CSV with image_path,dem_path,source_id"}, {"--out", "store directory"}},
       {},
       {"--pairs"}},
      {"train", "train a model on a tile store", {{"--store", "tile store"}}, {}, {}},
      {"eval",
       "score a checkpoint on a split",
       {{"--store", "tile store"},
        {"--checkpoint", "checkpoint directory (default <checkpoint_dir>/best)"},
        {"--split", "train, val or test"},
        {"--mode", "relative or absolute"},
        {"--out", "metrics.json path"}},
       {{"--baseline", "score the constant train-mean predictor instead of a model"}},
       {}},
      {"infer",
       "predict a relative (or absolute) DEM for one image",
       {{"--checkpoint", "checkpoint directory"},
        {"--image", "stretched-on-the-fly image raster"},
        {"--store", "tile store (with --tile)"},
        {"--tile", "tile id in the store"},
        {"--zmin", "reference minimum elevation (m)"},
        {"--zptp", "reference elevation range (m)"},
        {"--meta", "tile meta.json with z_min and z_ptp"},
        {"--out", "output raster (.tif or .f32)"}},
       {},
       {}},
      {"profile",
       "extract and plot an elevation profile across a tile",
       {{"--checkpoint", "checkpoint directory"},
        {"--store", "tile store"},
        {"--tile", "tile id"},
        {"--line", "r0,c0,r1,c1 in pixels (default: middle row)"},
        {"--mode", "relative or absolute"},
        {"--pixel-scale", "meters per pixel"},
        {"--out", "figure path (.svg or .png); a .csv is written next to it"}},
       {},
       {"--tile"}},
  };
  return specs;
}

const CommandSpec& spec_for(const std::string& name) {
  for (const auto& s : command_specs())
    if (name == s.name) return s;
  usage("unknown command '" + name + "'");
}

std::string arg(const Args& a, const std::string& key, const std::string& fallback = "") {
  const auto it = a.find(key);
  return it == a.end() ? fallback : it->second;
}

bool has(const Args& a, const std::string& key) { return a.count(key) > 0; }

double number_arg(const Args& a, const std::string& key, double fallback) {
  if (!has(a, key)) return fallback;
  return coerce(json(0.0), arg(a, key), key).get<double>();
}

long integer_arg(const Args& a, const std::string& key, long fallback) {
  if (!has(a, key)) return fallback;
  return coerce(json(0), arg(a, key), key).get<long>();
}

Split split_arg(const Args& a, Split fallback) {
  if (!has(a, "split")) return fallback;
  try {
    return split_from_string(arg(a, "split"));
  } catch (const Error& e) {
    usage(e.what());
  }
}

std::string hex(std::uint64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

std::size_t find_tile(const TileStore& store, const std::string& id) {
  for (std::size_t i = 0; i < store.size(); ++i)
    if (store.entries()[i].meta.tile_id() == id) return i;
  usage("tile '" + id + "' is not in " + store.dir().string());
}

fs::path checkpoint_arg(const Args& a, const PipelineConfig& cfg) {
  return has(a, "checkpoint") ? fs::path(arg(a, "checkpoint")) : fs::path(cfg.paths.checkpoint_dir) / "best";
}

// ---- commands ----

int cmd_synth(const PipelineConfig& cfg, const Args& a, bool verbose, std::ostream& out) {
  DatasetParams p = cfg.synth;
  p.n_pairs = static_cast<int>(integer_arg(a, "n", 0));
  p.tile_size = cfg.qc.tile_size;
  p.qc = cfg.qc;
  p.normalization = cfg.normalization;
  p.split_ratios = cfg.split.ratios;
  const fs::path dir = arg(a, "out", cfg.paths.store_dir);
  if (has(a, "raw")) {
    p.validate();
    const fs::path csv = write_raw_strips(p, cfg.seed, static_cast<int>(integer_arg(a, "strip-tiles", 4)),
                                          arg(a, "out", cfg.paths.raw_dir));
    out << "wrote " << p.n_pairs << " raw strip pairs, listed in " << csv.string() << "\n";
    return kOk;
  }
  if (verbose) std::cerr << "generating " << p.n_pairs << " pairs into " << dir << "\n";
  const DatasetSummary s = make_dataset(p, cfg.seed, dir);
  out << "store " << dir.string() << ": " << s.kept << " of " << s.generated << " tiles kept (train "
      << s.split_counts[0] << ", test " << s.split_counts[1] << ", val " << s.split_counts[2] << "), hash "
      << hex(s.hash) << "\n";
  return kOk;
}

int cmd_preprocess(const PipelineConfig& cfg, const Args& a, bool verbose, std::ostream& out) {
  cfg.qc.validate();
  cfg.normalization.validate();
  const fs::path csv = arg(a, "pairs");
  std::ifstream in(csv);
  if (!in) throw Error(ErrorKind::MissingFile, "cannot open pairs file " + csv.string());
  const fs::path base = csv.parent_path();
  std::vector<TileRecord> tiles;
  int line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cols.push_back(trim(c));
    if (line_no == 1 && !cols.empty() && cols[0] == "image_path") continue;
    if (cols.size() != 3) usage(csv.string() + ":" + std::to_string(line_no) + ": expected image_path,dem_path,source_id");
    auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : base / p; };
    const RasterGrid image = read_raster(resolve(cols[0]));
    const RasterGrid dem = read_raster(resolve(cols[1]));
    PreprocessSummary summary;
    auto kept = preprocess_pair(image, dem, cols[2], cfg.qc, cfg.normalization, &summary);
    out << summary.source_id << ": kept " << summary.kept << " of " << summary.candidates;
    for (const auto& [reason, count] : summary.rejected) out << ", " << reason << " " << count;
    out << "\n";
    for (auto& t : kept) tiles.push_back(std::move(t));
  }
  std::vector<TileMetadata> meta;
  for (const auto& t : tiles) meta.push_back(t.meta);
  const SplitAssignment splits = split_tiles(meta, cfg.split.ratios, cfg.seed, split_unit_from_string(cfg.split.unit));
  const fs::path dir = arg(a, "out", cfg.paths.store_dir);
  write_tile_store(dir, tiles, splits, cfg.qc, cfg.normalization);
  if (verbose) std::cerr << "wrote " << dir << "\n";
  out << "store " << dir.string() << ": " << tiles.size() << " tiles (train " << splits.train.size() << ", test "
      << splits.test.size() << ", val " << splits.val.size() << "), hash " << hex(hash_directory(dir)) << "\n";
  return kOk;
}

int cmd_train(const PipelineConfig& cfg, const Args& a, bool verbose, std::ostream& out) {
  const TileStore store = TileStore::open(arg(a, "store", cfg.paths.store_dir));
  auto model = build_model<float>(cfg.model, cfg.seed, verbose);
  const TrainResult r = train(model, store, cfg.train, verbose);
  out << "trained " << r.history.records.size() << " epochs; best epoch " << r.history.best_epoch << " val loss "
      << r.history.best_val_loss << "; checkpoints in " << cfg.train.checkpoint_dir.string() << "\n";
  return kOk;
}

int cmd_eval(const PipelineConfig& cfg, const Args& a, bool, std::ostream& out) {
  const TileStore store = TileStore::open(arg(a, "store", cfg.paths.store_dir));
  const Split split = split_arg(a, Split::test);
  const EvalMode mode = eval_mode_from_string(arg(a, "mode", "relative"));
  MetricsReport report;
  if (has(a, "baseline")) {
    report = evaluate_store(constant_predictor<float>(train_target_mean(store)), store, split, mode);
  } else {
    const auto model = load_weights<float>(checkpoint_arg(a, cfg));
    report = evaluate_store(model, store, split, mode);
  }
  const fs::path path = arg(a, "out", (fs::path(cfg.paths.out_dir) / "eval" / "metrics.json").string());
  ensure_parent(path);
  write_metrics_json(report, path);
  out << to_string(split) << " (" << to_string(mode) << "): " << report.n_tiles << " tiles, mean nRMSE "
      << report.mean_nrmse << ", MAE " << (report.mae_m ? *report.mae_m : report.mae_rel)
      << (report.mae_m ? " m" : " (normalized)") << ", skipped " << report.n_skipped << "; wrote " << path.string()
      << "\n";
  return kOk;
}

int cmd_infer(const PipelineConfig& cfg, const Args& a, bool, std::ostream& out) {
  RowMatrix<double> image;
  GeoTransform transform;
  std::string crs;
  std::optional<TileMetadata> tile_meta;
  if (has(a, "image")) {
    const SanitizedRaster s = sanitize_nodata(read_raster(arg(a, "image")));
    image = stretch_image(s.grid.values, s.mask.bits, cfg.normalization);
    transform = s.grid.transform;
    crs = s.grid.crs_id;
  } else if (has(a, "store") && has(a, "tile")) {
    const TileStore store = TileStore::open(arg(a, "store"));
    const TileRecord rec = store.load(find_tile(store, arg(a, "tile")));
    image = rec.image.cast<double>();
    tile_meta = rec.meta;
  } else {
    usage("infer needs --image, or --store with --tile");
  }
  const auto model = load_weights<float>(checkpoint_arg(a, cfg));
  RowMatrix<double> result = predict_relative(model, image);

  std::optional<std::pair<double, double>> stats;
  if (has(a, "zmin") || has(a, "zptp")) {
    if (!has(a, "zmin") || !has(a, "zptp")) usage("--zmin and --zptp go together");
    stats = {number_arg(a, "zmin", 0), number_arg(a, "zptp", 0)};
  } else if (has(a, "meta")) {
    std::ifstream in(arg(a, "meta"));
    if (!in) throw Error(ErrorKind::MissingFile, "cannot open " + arg(a, "meta"));
    json j;
    in >> j;
    const auto m = j.get<TileMetadata>();
    if (!m.has_stats()) throw Error(ErrorKind::MissingMetadata, arg(a, "meta") + " has no z_min/z_ptp");
    stats = {m.z_min, m.z_ptp};
  }
  if (stats) result = predict_absolute(result, stats->first, stats->second);

  RasterGrid grid;
  grid.values = result;
  grid.transform = transform;
  grid.crs_id = crs;
  const fs::path path = arg(a, "out", (fs::path(cfg.paths.out_dir) / "infer" / "prediction.f32").string());
  ensure_parent(path);
  write_raster(grid, path, BitDepth::f32);
  out << "wrote " << (stats ? "absolute" : "relative") << " DEM " << result.rows() << "x" << result.cols() << " to "
      << path.string() << "\n";
  return kOk;
}

int cmd_profile(const PipelineConfig& cfg, const Args& a, bool, std::ostream& out) {
  const TileStore store = TileStore::open(arg(a, "store", cfg.paths.store_dir));
  const TileRecord rec = store.load(find_tile(store, arg(a, "tile")));
  const EvalMode mode = eval_mode_from_string(arg(a, "mode", "relative"));
  const auto model = load_weights<float>(checkpoint_arg(a, cfg));
  RowMatrix<double> pred = predict_relative(model, RowMatrix<double>(rec.image.cast<double>()));
  RowMatrix<double> truth = rec.dem.cast<double>();
  if (mode == EvalMode::absolute) {
    if (!rec.meta.has_stats()) throw Error(ErrorKind::MissingMetadata, "tile " + rec.meta.tile_id() + " has no statistics");
    pred = predict_absolute(pred, rec.meta.z_min, rec.meta.z_ptp);
    truth = predict_absolute(truth, rec.meta.z_min, rec.meta.z_ptp);
  }
  const double mid = (store.tile_size() - 1) / 2.0;
  ProfileLine line{mid, 0, mid, static_cast<double>(store.tile_size() - 1)};
  if (has(a, "line")) {
    const auto v = split_list(arg(a, "line"));
    if (v.size() != 4) usage("--line takes r0,c0,r1,c1");
    line = {coerce(json(0.0), v[0], "--line").get<double>(), coerce(json(0.0), v[1], "--line").get<double>(),
            coerce(json(0.0), v[2], "--line").get<double>(), coerce(json(0.0), v[3], "--line").get<double>()};
  }
  const auto profile = extract_profile(truth, pred, line, number_arg(a, "pixel-scale", cfg.synth.pixel_scale), mode);
  const fs::path fig = arg(a, "out", (fs::path(cfg.paths.out_dir) / "profile" / "profile.svg").string());
  ensure_parent(fig);
  render_profile_figure(profile, fig, "tile " + rec.meta.tile_id());
  fs::path csv = fig;
  csv.replace_extension(".csv");
  write_profile_csv(profile, csv);
  out << "profile with " << profile.distance_m.size() << " samples: " << fig.string() << ", " << csv.string() << "\n";
  return kOk;
}

int dispatch(const std::string& command, const PipelineConfig& cfg, const Args& a, bool verbose, std::ostream& out) {
  if (command == "synth") return cmd_synth(cfg, a, verbose, out);
  if (command == "preprocess") return cmd_preprocess(cfg, a, verbose, out);
  if (command == "train") return cmd_train(cfg, a, verbose, out);
  if (command == "eval") return cmd_eval(cfg, a, verbose, out);
  if (command == "infer") return cmd_infer(cfg, a, verbose, out);
  if (command == "profile") return cmd_profile(cfg, a, verbose, out);
  usage("unknown command '" + command + "'");
}

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

struct Invocation {
  std::string command;
  json config;
  Args args;
  bool verbose = false;
  bool dry_run = false;
  std::string run_json;
};

int execute(const Invocation& inv, const std::vector<std::string>& argv) {
  const auto start = std::chrono::steady_clock::now();
  const std::string started = utc_now();
  const PipelineConfig cfg = from_json(inv.config);
  int code = kOk;
  std::string error;
  if (!inv.dry_run) {
    try {
      code = dispatch(inv.command, cfg, inv.args, inv.verbose, std::cout);
    } catch (const Error& e) {
      error = e.what();
      code = exit_code_for(e.kind());
    } catch (const fs::filesystem_error& e) {
      error = e.what();
      code = kIo;
    } catch (const json::exception& e) {
      error = std::string("malformed JSON input: ") + e.what();
      code = kIo;
    }
    if (!error.empty()) std::cerr << "lunardem " << inv.command << ": " << error << "\n";
  }
  const fs::path run_path =
      inv.run_json.empty() ? fs::path(cfg.paths.out_dir) / inv.command / "run.json" : fs::path(inv.run_json);
  json record = {{"command", inv.command},
                 {"argv", argv},
                 {"config", inv.config},
                 {"args", inv.args},
                 {"seed", cfg.seed},
                 {"version", LUNARDEM_GIT_DESCRIBE},
                 {"started_utc", started},
                 {"wall_seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()},
                 {"exit_code", code}};
  if (!error.empty()) record["error"] = error;
  try {
    ensure_parent(run_path);
    std::ofstream f(run_path);
    f << record.dump(2) << "\n";
    if (!f) throw Error(ErrorKind::IoFailure, "cannot write " + run_path.string());
  } catch (const std::exception& e) {
    std::cerr << "lunardem: " << e.what() << "\n";
    if (code == kOk) code = kIo;
  }
  return code;
}

Invocation load_replay(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::MissingFile, "cannot open run record " + path.string());
  json r;
  try {
    in >> r;
    Invocation inv;
    inv.command = r.at("command").get<std::string>();
    spec_for(inv.command);
    inv.config = default_config(false);
    merge_checked(inv.config, r.at("config"), "");
    inv.args = r.at("args").get<Args>();
    return inv;
  } catch (const json::exception& e) {
    usage("bad run record " + path.string() + ": " + e.what());
  }
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"Monocular lunar DEM pipeline: synthetic data, preprocessing, training and evaluation", "lunardem"};
  app.set_version_flag("--version", std::string(LUNARDEM_GIT_DESCRIBE));
  app.require_subcommand(0, 1);
  app.fallthrough();

  std::string config_path, seed_text, replay_path, run_json;
  bool verbose = false, desk = false, dry_run = false, print_config = false;
  app.add_option("--config", config_path, "INI config file");
  app.add_option("--seed", seed_text, "global seed");
  app.add_flag("--verbose,-v", verbose, "progress on stderr");
  app.add_flag("--desk", desk, "desk-scale defaults: 64 px tiles, batch 8, 20 epochs, tiny_unet");
  app.add_option("--replay", replay_path, "re-run a recorded run.json");
  app.add_option("--run-json", run_json, "where to write the run record");
  app.add_flag("--dry-run", dry_run, "resolve the configuration and write the run record only");
  app.add_flag("--print-config", print_config, "print the resolved configuration and exit");

  std::map<std::string, std::map<std::string, std::string>> values;  // command -> option -> text
  std::map<std::string, std::map<std::string, bool>> switches;
  std::map<std::string, CLI::App*> subs;
  for (const auto& spec : command_specs()) {
    CLI::App* sub = app.add_subcommand(spec.name, spec.help);
    subs[spec.name] = sub;
    for (const auto& [flag, help] : spec.options) {
      auto* opt = sub->add_option(flag, values[spec.name][flag], help);
      for (const char* req : spec.required)
        if (std::string(req) == flag) opt->required();
    }
    for (const auto& [flag, help] : spec.switches) sub->add_flag(flag, switches[spec.name][flag], help);
    const auto it = config_flags().find(spec.name);
    if (it != config_flags().end())
      for (const auto& f : it->second) sub->add_option(f.flag, values[spec.name][f.flag], std::string(f.help) + " [" + f.key + "]");
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    Invocation inv;
    CLI::App* chosen = nullptr;
    for (auto& [name, sub] : subs)
      if (sub->parsed()) chosen = sub;

    if (!replay_path.empty()) {
      if (chosen) usage("--replay takes no subcommand");
      inv = load_replay(replay_path);
    } else {
      inv.config = default_config(desk);
      if (!config_path.empty()) apply_config_file(inv.config, config_path);
      if (!chosen) {
        if (print_config) {
          if (!seed_text.empty()) apply_setting(inv.config, "seed", seed_text);
          std::cout << to_config_text(inv.config);
          return kOk;
        }
        std::cerr << app.help();
        return kUsage;
      }
      inv.command = chosen->get_name();
      for (const auto& [flag, help] : spec_for(inv.command).options) {
        if (chosen->count(flag)) inv.args[std::string(flag).substr(2)] = values[inv.command][flag];
      }
      for (const auto& [flag, help] : spec_for(inv.command).switches) {
        if (switches[inv.command][flag]) inv.args[std::string(flag).substr(2)] = "true";
      }
      const auto it = config_flags().find(inv.command);
      if (it != config_flags().end())
        for (const auto& f : it->second)
          if (chosen->count(f.flag)) apply_setting(inv.config, f.key, values[inv.command][f.flag]);
    }
    if (!seed_text.empty()) apply_setting(inv.config, "seed", seed_text);
    inv.verbose = verbose;
    inv.dry_run = dry_run;
    inv.run_json = run_json;
    from_json(inv.config);  // validates before anything runs
    if (print_config) {
      std::cout << to_config_text(inv.config);
      return kOk;
    }
    return execute(inv, args);
  } catch (const Error& e) {
    std::cerr << "lunardem: " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "lunardem: " << e.what() << "\n";
    return kIo;
  }
}

int run(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args);
}

}  // namespace lunardem::cli
