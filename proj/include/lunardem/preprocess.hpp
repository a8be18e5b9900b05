#pragma once

#include "lunardem/raster_io.hpp"
#include "lunardem/tensor.hpp"
#include "lunardem/tile_types.hpp"

#include "json.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace lunardem {

struct QcConfig {
  int tile_size = 512;
  double gamma = 0.05;    // minimum valid-area ratio
  double ptp_min = 1.0;   // meters; tiles need z_max - z_min strictly above this
  void validate() const;  // throws BadConfig
  bool operator==(const QcConfig&) const = default;
};

struct NormalizationConfig {
  double pct_low = 1.0;
  double pct_high = 99.0;
  double standardize_mean = 0.5;
  double standardize_std = 0.5;
  double epsilon = 1e-3;  // meters
  void validate() const;
  bool operator==(const NormalizationConfig&) const = default;
};

void to_json(nlohmann::json& j, const QcConfig& c);
void from_json(const nlohmann::json& j, QcConfig& c);
void to_json(nlohmann::json& j, const NormalizationConfig& c);
void from_json(const nlohmann::json& j, NormalizationConfig& c);

struct TileCandidate {
  std::string source_id;
  int row = 0;
  int col = 0;
  RowMatrix<double> image;
  RowMatrix<double> dem;
  MaskMatrix mask;  // combined image and DEM validity
};

/// Non-overlapping tile_size windows; incomplete edge tiles are dropped.
/// Throws ShapeMismatch when grids or masks disagree.
std::vector<TileCandidate> tile_strip(const RasterGrid& image, const RasterGrid& dem, const ValidityMask& image_mask,
                                      const ValidityMask& dem_mask, const QcConfig& cfg,
                                      const std::string& source_id = "strip");

enum class RejectReason { LowValidRatio, FlatTerrain, AllInvalid };
std::string to_string(RejectReason reason);

struct QcDecision {
  bool keep = false;
  std::optional<RejectReason> reason;
  double valid_ratio = 0.0;
  double z_min = 0.0;
  double z_ptp = 0.0;
};

/// Keep iff valid_ratio >= gamma and z_ptp > ptp_min over valid pixels.
QcDecision qc_filter(const RowMatrix<double>& dem, const MaskMatrix& mask, const QcConfig& cfg);

/// Linear-interpolation percentile (p in [0,100]) of a non-empty sample.
double percentile(std::vector<double> values, double p);

/// Percentile clip, map to [0,1], standardize. Invalid pixels become -1.
/// Throws EmptyTile.
RowMatrix<double> stretch_image(const RowMatrix<double>& image, const MaskMatrix& mask,
                                const NormalizationConfig& cfg);

struct NormalizedDem {
  RowMatrix<double> values;  // (Z - z_min) / (z_ptp + epsilon), 0 on invalid pixels
  TileMetadata meta;         // z_min, z_ptp, valid_ratio filled in
};

/// Throws EmptyTile when no pixel is valid.
NormalizedDem normalize_dem(const RowMatrix<double>& dem, const MaskMatrix& mask, const NormalizationConfig& cfg);

/// Throws NegativePtp.
RowMatrix<double> denormalize_dem(const RowMatrix<double>& normalized, double z_min, double z_ptp);

enum class Split { train, test, val };
std::string to_string(Split split);
Split split_from_string(const std::string& name);

struct SplitAssignment {
  std::vector<std::string> train;
  std::vector<std::string> test;
  std::vector<std::string> val;
  std::map<std::string, Split> of;

  const std::vector<std::string>& ids(Split s) const {
    return s == Split::train ? train : (s == Split::test ? test : val);
  }
};

/// Split sizes from largest-remainder rounding of n * ratio (ties to the earlier
/// split); a seeded Fisher-Yates shuffle of the sorted ids decides membership.
/// Ratios are (train, test, val). Throws BadRatios.
SplitAssignment split_dataset(std::vector<std::string> ids, std::array<double, 3> ratios, std::uint64_t seed);

/// Split sizes alone, for callers that need the rounding without ids.
std::array<std::size_t, 3> split_sizes(std::size_t n, std::array<double, 3> ratios);

enum class SplitUnit { tile, strip };
std::string to_string(SplitUnit unit);
SplitUnit split_unit_from_string(const std::string& name);

/// Splits tiles individually or whole strips (source ids) at a time.
SplitAssignment split_tiles(const std::vector<TileMetadata>& tiles, std::array<double, 3> ratios,
                            std::uint64_t seed, SplitUnit unit);

/// One retained, normalized tile ready for the store.
struct TileRecord {
  TileMetadata meta;
  RowMatrix<float> image;  // stretched, in [-1, 1]
  RowMatrix<float> dem;    // normalized, in [0, 1)
  MaskMatrix mask;
};

inline constexpr int kStoreVersion = 1;

struct StoreEntry {
  TileMetadata meta;
  Split split = Split::train;
};

class TileStore {
 public:
  /// Reads and validates the manifest and every tile's file sizes.
  /// Throws IoFailure, ManifestVersionMismatch, CorruptTile.
  static TileStore open(const std::filesystem::path& dir);

  const std::filesystem::path& dir() const { return dir_; }
  int tile_size() const { return qc_.tile_size; }
  const QcConfig& qc() const { return qc_; }
  const NormalizationConfig& normalization() const { return norm_; }
  const CorpusStats& corpus_stats() const { return stats_; }
  const std::vector<StoreEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  /// Entry indices of a split in manifest order.
  std::vector<std::size_t> indices(Split split) const;
  TileRecord load(std::size_t index) const;

 private:
  std::filesystem::path dir_;
  QcConfig qc_;
  NormalizationConfig norm_;
  CorpusStats stats_;
  std::vector<StoreEntry> entries_;
};

/// Writes manifest.json and tiles/<id>.{img.f32,dem.f32,msk.u8,meta.json}.
/// Corpus stats for the scale head come from the train split's z_min.
void write_tile_store(const std::filesystem::path& dir, const std::vector<TileRecord>& tiles,
                      const SplitAssignment& splits, const QcConfig& qc, const NormalizationConfig& norm);

inline TileStore read_tile_store(const std::filesystem::path& dir) { return TileStore::open(dir); }

/// Mean and population std of z_min over the given tiles (std floored to 1 when degenerate).
CorpusStats compute_corpus_stats(const std::vector<TileMetadata>& tiles);

/// A minibatch in network layout: images/dems/masks are [B,1,T,T].
template <typename Scalar>
struct Batch {
  Tensor<Scalar> images;
  Tensor<Scalar> dems;
  Tensor<Scalar> masks;
  std::vector<TileMetadata> meta;
};

template <typename Scalar>
Batch<Scalar> load_batch(const TileStore& store, const std::vector<std::size_t>& indices);

struct PreprocessSummary {
  std::string source_id;
  int candidates = 0;
  int kept = 0;
  std::map<std::string, int> rejected;  // reason -> count
};

/// Sanitize, align the DEM onto the image grid, tile, QC, stretch and normalize one strip pair.
std::vector<TileRecord> preprocess_pair(const RasterGrid& image, const RasterGrid& dem, const std::string& source_id,
                                        const QcConfig& qc, const NormalizationConfig& norm,
                                        PreprocessSummary* summary = nullptr);

/// FNV-1a over every regular file below dir (relative path + bytes), in sorted path order.
std::uint64_t hash_directory(const std::filesystem::path& dir);

}  // namespace lunardem
