#include "lunardem/preprocess.hpp"

#include "lunardem/error.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

namespace lunardem {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "tile store payloads are little-endian");

namespace {

std::string manifest_name() { return "manifest.json"; }

void check_tile_id(const std::string& id) {
  if (id.empty() || id.find_first_not_of("ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789_.-") !=
                        std::string::npos) {
    throw Error(ErrorKind::IoFailure, "tile id '" + id + "' is not a safe file name");
  }
}

template <typename T>
void write_raw(const fs::path& path, const T* data, std::size_t count) {
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * sizeof(T)));
  if (!out) throw Error(ErrorKind::IoFailure, "cannot write " + path.string());
}

template <typename T>
void read_raw(const fs::path& path, T* data, std::size_t count) {
  std::ifstream in(path, std::ios::binary);
  in.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(count * sizeof(T)));
  if (in.gcount() != static_cast<std::streamsize>(count * sizeof(T))) {
    throw Error(ErrorKind::CorruptTile, path.string() + " is truncated");
  }
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  out << j.dump(2) << "\n";
  if (!out) throw Error(ErrorKind::IoFailure, "cannot write " + path.string());
}

}  // namespace

void QcConfig::validate() const {
  if (tile_size <= 0 || tile_size % 32 != 0) {
    throw Error(ErrorKind::BadConfig, "tile_size must be a positive multiple of 32, got " + std::to_string(tile_size));
  }
  if (!(gamma > 0.0 && gamma <= 1.0)) throw Error(ErrorKind::BadConfig, "gamma must lie in (0, 1]");
  if (!(ptp_min > 0.0)) throw Error(ErrorKind::BadConfig, "ptp_min must be positive");
}

void NormalizationConfig::validate() const {
  if (!(pct_low >= 0.0 && pct_low < pct_high && pct_high <= 100.0)) {
    throw Error(ErrorKind::BadConfig, "percentiles must satisfy 0 <= low < high <= 100");
  }
  if (!(standardize_std > 0.0)) throw Error(ErrorKind::BadConfig, "standardize_std must be positive");
  if (!(epsilon > 0.0)) throw Error(ErrorKind::BadConfig, "epsilon must be positive");
}

void to_json(nlohmann::json& j, const QcConfig& c) {
  j = {{"tile_size", c.tile_size}, {"gamma", c.gamma}, {"ptp_min", c.ptp_min}};
}

void from_json(const nlohmann::json& j, QcConfig& c) {
  j.at("tile_size").get_to(c.tile_size);
  j.at("gamma").get_to(c.gamma);
  j.at("ptp_min").get_to(c.ptp_min);
}

void to_json(nlohmann::json& j, const NormalizationConfig& c) {
  j = {{"pct_low", c.pct_low},
       {"pct_high", c.pct_high},
       {"standardize_mean", c.standardize_mean},
       {"standardize_std", c.standardize_std},
       {"epsilon", c.epsilon}};
}

void from_json(const nlohmann::json& j, NormalizationConfig& c) {
  j.at("pct_low").get_to(c.pct_low);
  j.at("pct_high").get_to(c.pct_high);
  j.at("standardize_mean").get_to(c.standardize_mean);
  j.at("standardize_std").get_to(c.standardize_std);
  j.at("epsilon").get_to(c.epsilon);
}

std::vector<TileCandidate> tile_strip(const RasterGrid& image, const RasterGrid& dem, const ValidityMask& image_mask,
                                      const ValidityMask& dem_mask, const QcConfig& cfg,
                                      const std::string& source_id) {
  cfg.validate();
  const int h = image.height(), w = image.width();
  auto same = [&](Eigen::Index rows, Eigen::Index cols) { return rows == h && cols == w; };
  if (!same(dem.values.rows(), dem.values.cols()) || !same(image_mask.bits.rows(), image_mask.bits.cols()) ||
      !same(dem_mask.bits.rows(), dem_mask.bits.cols())) {
    throw Error(ErrorKind::ShapeMismatch, "image, DEM and masks must share one grid; resample first");
  }
  const int t = cfg.tile_size;
  std::vector<TileCandidate> out;
  for (int r = 0; r + t <= h; r += t) {
    for (int c = 0; c + t <= w; c += t) {
      TileCandidate cand;
      cand.source_id = source_id;
      cand.row = r / t;
      cand.col = c / t;
      cand.image = image.values.block(r, c, t, t);
      cand.dem = dem.values.block(r, c, t, t);
      cand.mask = image_mask.bits.block(r, c, t, t).cwiseMin(dem_mask.bits.block(r, c, t, t));
      out.push_back(std::move(cand));
    }
  }
  return out;
}

std::string to_string(RejectReason reason) {
  switch (reason) {
    case RejectReason::LowValidRatio: return "LowValidRatio";
    case RejectReason::FlatTerrain: return "FlatTerrain";
    case RejectReason::AllInvalid: return "AllInvalid";
  }
  return "?";
}

QcDecision qc_filter(const RowMatrix<double>& dem, const MaskMatrix& mask, const QcConfig& cfg) {
  QcDecision d;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  std::int64_t valid = 0;
  for (Eigen::Index i = 0; i < dem.size(); ++i) {
    if (!mask.data()[i]) continue;
    ++valid;
    lo = std::min(lo, dem.data()[i]);
    hi = std::max(hi, dem.data()[i]);
  }
  d.valid_ratio = dem.size() ? static_cast<double>(valid) / static_cast<double>(dem.size()) : 0.0;
  if (valid == 0) {
    d.reason = RejectReason::AllInvalid;
    return d;
  }
  d.z_min = lo;
  d.z_ptp = hi - lo;
  if (d.valid_ratio < cfg.gamma) {
    d.reason = RejectReason::LowValidRatio;
  } else if (!(d.z_ptp > cfg.ptp_min)) {
    d.reason = RejectReason::FlatTerrain;
  } else {
    d.keep = true;
  }
  return d;
}

double percentile(std::vector<double> values, double p) {
  if (values.empty()) throw Error(ErrorKind::EmptyTile, "percentile of an empty sample");
  std::sort(values.begin(), values.end());
  const double pos = std::clamp(p, 0.0, 100.0) / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (values[hi] - values[lo]) * (pos - static_cast<double>(lo));
}

RowMatrix<double> stretch_image(const RowMatrix<double>& image, const MaskMatrix& mask,
                                const NormalizationConfig& cfg) {
  std::vector<double> valid;
  valid.reserve(static_cast<std::size_t>(image.size()));
  for (Eigen::Index i = 0; i < image.size(); ++i) {
    if (mask.data()[i]) valid.push_back(image.data()[i]);
  }
  if (valid.empty()) throw Error(ErrorKind::EmptyTile, "stretch_image: no valid pixels");
  const double p_lo = percentile(valid, cfg.pct_low);
  const double p_hi = percentile(std::move(valid), cfg.pct_high);
  const double spread = p_hi - p_lo;
  const double floor_value = (0.0 - cfg.standardize_mean) / cfg.standardize_std;
  RowMatrix<double> out(image.rows(), image.cols());
  for (Eigen::Index i = 0; i < image.size(); ++i) {
    if (!mask.data()[i]) {
      out.data()[i] = floor_value;
    } else if (spread < 1e-9) {
      out.data()[i] = 0.0;
    } else {
      const double unit = (std::clamp(image.data()[i], p_lo, p_hi) - p_lo) / spread;
      out.data()[i] = (unit - cfg.standardize_mean) / cfg.standardize_std;
    }
  }
  return out;
}

NormalizedDem normalize_dem(const RowMatrix<double>& dem, const MaskMatrix& mask, const NormalizationConfig& cfg) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  std::int64_t valid = 0;
  for (Eigen::Index i = 0; i < dem.size(); ++i) {
    if (!mask.data()[i]) continue;
    ++valid;
    lo = std::min(lo, dem.data()[i]);
    hi = std::max(hi, dem.data()[i]);
  }
  if (valid == 0) throw Error(ErrorKind::EmptyTile, "normalize_dem: no valid pixels");
  NormalizedDem out;
  out.meta.z_min = lo;
  out.meta.z_ptp = hi - lo;
  out.meta.valid_ratio = static_cast<double>(valid) / static_cast<double>(dem.size());
  const double denom = out.meta.z_ptp + cfg.epsilon;
  out.values = RowMatrix<double>::Zero(dem.rows(), dem.cols());
  for (Eigen::Index i = 0; i < dem.size(); ++i) {
    if (mask.data()[i]) out.values.data()[i] = (dem.data()[i] - lo) / denom;
  }
  return out;
}

RowMatrix<double> denormalize_dem(const RowMatrix<double>& normalized, double z_min, double z_ptp) {
  if (z_ptp < 0.0) throw Error(ErrorKind::NegativePtp, "z_ptp must be non-negative, got " + std::to_string(z_ptp));
  return (normalized.array() * z_ptp + z_min).matrix();
}

std::string to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::test: return "test";
    case Split::val: return "val";
  }
  return "?";
}

Split split_from_string(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "test") return Split::test;
  if (name == "val") return Split::val;
  throw Error(ErrorKind::BadConfig, "unknown split '" + name + "'");
}

std::string to_string(SplitUnit unit) { return unit == SplitUnit::tile ? "tile" : "strip"; }

SplitUnit split_unit_from_string(const std::string& name) {
  if (name == "tile") return SplitUnit::tile;
  if (name == "strip") return SplitUnit::strip;
  throw Error(ErrorKind::BadConfig, "split_by must be 'tile' or 'strip', got '" + name + "'");
}

std::array<std::size_t, 3> split_sizes(std::size_t n, std::array<double, 3> ratios) {
  double sum = 0.0;
  for (double r : ratios) {
    if (!(r >= 0.0)) throw Error(ErrorKind::BadRatios, "split ratios must be non-negative");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    throw Error(ErrorKind::BadRatios, "split ratios must sum to 1, got " + std::to_string(sum));
  }
  std::array<std::size_t, 3> sizes{};
  std::array<double, 3> remainder{};
  std::size_t assigned = 0;
  for (int k = 0; k < 3; ++k) {
    const double quota = static_cast<double>(n) * ratios[k];
    sizes[k] = static_cast<std::size_t>(std::floor(quota));
    remainder[k] = quota - std::floor(quota);
    assigned += sizes[k];
  }
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return remainder[a] > remainder[b]; });
  for (std::size_t i = 0; assigned < n; ++i, ++assigned) ++sizes[order[i % 3]];
  return sizes;
}

SplitAssignment split_dataset(std::vector<std::string> ids, std::array<double, 3> ratios, std::uint64_t seed) {
  const auto sizes = split_sizes(ids.size(), ratios);
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) {
    throw Error(ErrorKind::BadConfig, "split_dataset: duplicate ids");
  }
  std::mt19937_64 rng(seed);
  for (std::size_t i = ids.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(ids[i - 1], ids[j]);
  }
  SplitAssignment out;
  std::size_t pos = 0;
  for (Split s : {Split::train, Split::test, Split::val}) {
    auto& dst = s == Split::train ? out.train : (s == Split::test ? out.test : out.val);
    for (std::size_t k = 0; k < sizes[static_cast<int>(s)]; ++k, ++pos) {
      dst.push_back(ids[pos]);
      out.of[ids[pos]] = s;
    }
  }
  return out;
}

SplitAssignment split_tiles(const std::vector<TileMetadata>& tiles, std::array<double, 3> ratios,
                            std::uint64_t seed, SplitUnit unit) {
  std::vector<std::string> ids;
  for (const auto& t : tiles) ids.push_back(t.tile_id());
  if (unit == SplitUnit::tile) return split_dataset(std::move(ids), ratios, seed);

  std::set<std::string> sources;
  for (const auto& t : tiles) sources.insert(t.source_id);
  const SplitAssignment by_strip = split_dataset({sources.begin(), sources.end()}, ratios, seed);
  SplitAssignment out;
  for (const auto& t : tiles) {
    const Split s = by_strip.of.at(t.source_id);
    const std::string id = t.tile_id();
    out.of[id] = s;
    (s == Split::train ? out.train : (s == Split::test ? out.test : out.val)).push_back(id);
  }
  return out;
}

CorpusStats compute_corpus_stats(const std::vector<TileMetadata>& tiles) {
  CorpusStats s;
  if (tiles.empty()) return s;
  double sum = 0.0;
  for (const auto& t : tiles) sum += t.z_min;
  s.zmin_mean = sum / static_cast<double>(tiles.size());
  double var = 0.0;
  for (const auto& t : tiles) var += (t.z_min - s.zmin_mean) * (t.z_min - s.zmin_mean);
  s.zmin_std = std::sqrt(var / static_cast<double>(tiles.size()));
  if (!(s.zmin_std > 1e-9)) s.zmin_std = 1.0;
  s.available = true;
  return s;
}

void write_tile_store(const fs::path& dir, const std::vector<TileRecord>& tiles, const SplitAssignment& splits,
                      const QcConfig& qc, const NormalizationConfig& norm) {
  qc.validate();
  norm.validate();
  std::error_code ec;
  fs::create_directories(dir, ec);
  fs::remove_all(dir / "tiles", ec);
  fs::remove(dir / manifest_name(), ec);
  if (!fs::create_directories(dir / "tiles", ec) && ec) {
    throw Error(ErrorKind::IoFailure, "cannot create " + (dir / "tiles").string() + ": " + ec.message());
  }

  const auto t = static_cast<std::size_t>(qc.tile_size);
  nlohmann::json entries = nlohmann::json::array();
  std::vector<TileMetadata> train_meta;
  std::set<std::string> seen;
  for (const auto& rec : tiles) {
    const std::string id = rec.meta.tile_id();
    check_tile_id(id);
    if (!seen.insert(id).second) throw Error(ErrorKind::IoFailure, "duplicate tile id " + id);
    if (static_cast<std::size_t>(rec.image.size()) != t * t || static_cast<std::size_t>(rec.dem.size()) != t * t ||
        static_cast<std::size_t>(rec.mask.size()) != t * t) {
      throw Error(ErrorKind::ShapeMismatch, "tile " + id + " does not match tile_size " + std::to_string(t));
    }
    auto it = splits.of.find(id);
    if (it == splits.of.end()) throw Error(ErrorKind::BadConfig, "tile " + id + " has no split assignment");
    const fs::path base = dir / "tiles" / id;
    write_raw(fs::path(base.string() + ".img.f32"), rec.image.data(), t * t);
    write_raw(fs::path(base.string() + ".dem.f32"), rec.dem.data(), t * t);
    write_raw(fs::path(base.string() + ".msk.u8"), rec.mask.data(), t * t);
    write_json(fs::path(base.string() + ".meta.json"), rec.meta);
    nlohmann::json e = rec.meta;
    e["id"] = id;
    e["split"] = to_string(it->second);
    entries.push_back(std::move(e));
    if (it->second == Split::train) train_meta.push_back(rec.meta);
  }

  nlohmann::json split_map = nlohmann::json::object();
  for (Split s : {Split::train, Split::test, Split::val}) {
    nlohmann::json ids = nlohmann::json::array();
    for (const auto& id : splits.ids(s)) {
      if (seen.count(id)) ids.push_back(id);
    }
    split_map[to_string(s)] = std::move(ids);
  }
  nlohmann::json manifest = {{"version", kStoreVersion},
                             {"tile_size", qc.tile_size},
                             {"epsilon", norm.epsilon},
                             {"gamma", qc.gamma},
                             {"ptp_min", qc.ptp_min},
                             {"normalization", norm},
                             {"splits", split_map},
                             {"corpus_stats", compute_corpus_stats(train_meta)},
                             {"n_tiles", tiles.size()},
                             {"tiles", entries}};
  write_json(dir / manifest_name(), manifest);
}

TileStore TileStore::open(const fs::path& dir) {
  const fs::path path = dir / manifest_name();
  if (!fs::exists(path)) throw Error(ErrorKind::IoFailure, "no tile store manifest at " + path.string());
  nlohmann::json m;
  try {
    std::ifstream(path) >> m;
  } catch (const std::exception& e) {
    throw Error(ErrorKind::IoFailure, "unreadable manifest " + path.string() + ": " + e.what());
  }
  const int version = m.value("version", -1);
  if (version != kStoreVersion) {
    throw Error(ErrorKind::ManifestVersionMismatch, "store version " + std::to_string(version) + ", expected " +
                                                        std::to_string(kStoreVersion));
  }
  TileStore store;
  store.dir_ = dir;
  try {
    store.qc_.tile_size = m.at("tile_size");
    store.qc_.gamma = m.at("gamma");
    store.qc_.ptp_min = m.at("ptp_min");
    store.norm_ = m.at("normalization").get<NormalizationConfig>();
    store.stats_ = m.at("corpus_stats").get<CorpusStats>();
    for (const auto& e : m.at("tiles")) {
      store.entries_.push_back({e.get<TileMetadata>(), split_from_string(e.at("split"))});
    }
    if (m.at("n_tiles").get<std::size_t>() != store.entries_.size()) {
      throw Error(ErrorKind::CorruptTile, "manifest n_tiles " + m.at("n_tiles").dump() + " but lists " +
                                              std::to_string(store.entries_.size()) + " tiles");
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::IoFailure, "malformed manifest " + path.string() + ": " + e.what());
  }

  const auto t2 = static_cast<std::uintmax_t>(store.qc_.tile_size) * static_cast<std::uintmax_t>(store.qc_.tile_size);
  for (const auto& e : store.entries_) {
    const std::string base = (dir / "tiles" / e.meta.tile_id()).string();
    for (const auto& [suffix, bytes] : {std::pair{".img.f32", 4 * t2}, {".dem.f32", 4 * t2}, {".msk.u8", t2}}) {
      std::error_code ec;
      const auto size = fs::file_size(base + suffix, ec);
      if (ec || size != bytes) {
        throw Error(ErrorKind::CorruptTile, base + suffix + (ec ? " is missing" : " has the wrong size"));
      }
    }
  }
  return store;
}

std::vector<std::size_t> TileStore::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].split == split) out.push_back(i);
  }
  return out;
}

TileRecord TileStore::load(std::size_t index) const {
  const auto& e = entries_.at(index);
  const int t = qc_.tile_size;
  const std::string base = (dir_ / "tiles" / e.meta.tile_id()).string();
  TileRecord rec;
  rec.meta = e.meta;
  rec.image.resize(t, t);
  rec.dem.resize(t, t);
  rec.mask.resize(t, t);
  const auto n = static_cast<std::size_t>(t) * static_cast<std::size_t>(t);
  read_raw(base + ".img.f32", rec.image.data(), n);
  read_raw(base + ".dem.f32", rec.dem.data(), n);
  read_raw(base + ".msk.u8", rec.mask.data(), n);
  return rec;
}

template <typename Scalar>
Batch<Scalar> load_batch(const TileStore& store, const std::vector<std::size_t>& indices) {
  const int t = store.tile_size(), b = static_cast<int>(indices.size());
  Batch<Scalar> batch{Tensor<Scalar>(b, 1, t, t), Tensor<Scalar>(b, 1, t, t), Tensor<Scalar>(b, 1, t, t), {}};
  for (int i = 0; i < b; ++i) {
    const TileRecord rec = store.load(indices[static_cast<std::size_t>(i)]);
    batch.images.image(i, 0) = rec.image.cast<Scalar>();
    batch.dems.image(i, 0) = rec.dem.cast<Scalar>();
    batch.masks.image(i, 0) = rec.mask.cast<Scalar>();
    batch.meta.push_back(rec.meta);
  }
  return batch;
}

template Batch<float> load_batch(const TileStore&, const std::vector<std::size_t>&);
template Batch<double> load_batch(const TileStore&, const std::vector<std::size_t>&);

std::vector<TileRecord> preprocess_pair(const RasterGrid& image, const RasterGrid& dem, const std::string& source_id,
                                        const QcConfig& qc, const NormalizationConfig& norm,
                                        PreprocessSummary* summary) {
  qc.validate();
  norm.validate();
  const SanitizedRaster img = sanitize_nodata(image);
  const SanitizedRaster z = sanitize_nodata(dem);
  ResampledRaster aligned = resample_to_grid(z.grid, img.grid, &z.mask);

  std::vector<TileRecord> out;
  PreprocessSummary local{source_id, 0, 0, {}};
  for (auto& cand : tile_strip(img.grid, aligned.grid, img.mask, aligned.mask, qc, source_id)) {
    ++local.candidates;
    const QcDecision d = qc_filter(cand.dem, cand.mask, qc);
    if (!d.keep) {
      ++local.rejected[to_string(*d.reason)];
      continue;
    }
    NormalizedDem nd = normalize_dem(cand.dem, cand.mask, norm);
    TileRecord rec;
    rec.meta = nd.meta;
    rec.meta.source_id = source_id;
    rec.meta.row = cand.row;
    rec.meta.col = cand.col;
    rec.image = stretch_image(cand.image, cand.mask, norm).cast<float>();
    rec.dem = nd.values.cast<float>();
    rec.mask = cand.mask;
    out.push_back(std::move(rec));
    ++local.kept;
  }
  if (summary) *summary = local;
  return out;
}

std::uint64_t hash_directory(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const char* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      h ^= static_cast<unsigned char>(p[i]);
      h *= 1099511628211ull;
    }
  };
  std::vector<char> buf(1 << 16);
  for (const auto& f : files) {
    const std::string rel = fs::relative(f, dir).generic_string();
    mix(rel.data(), rel.size() + 1);
    std::ifstream in(f, std::ios::binary);
    while (in) {
      in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
      mix(buf.data(), static_cast<std::size_t>(in.gcount()));
    }
  }
  return h;
}

}  // namespace lunardem
