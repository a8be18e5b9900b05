#pragma once

#include "lunardem/preprocess.hpp"
#include "lunardem/raster_io.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>

namespace lunardem {

struct TerrainParams {
  int size = 64;
  double spectral_beta = 2.0;
  double amplitude = 50.0;  // meters, peak to peak before craters
  double base_elevation = 0.0;
  int crater_count = 0;
  std::array<double, 2> crater_radius_range{3.0, 12.0};  // pixels
  double crater_depth_ratio = 0.1;                        // depth / diameter
  double pixel_scale = 5.0;                                // meters per pixel
  std::uint64_t seed = 0;
  void validate() const;  // throws BadConfig
};

struct SunParams {
  double azimuth_deg = 135.0;  // clockwise from north (up)
  double elevation_deg = 30.0;
  double albedo_noise_std = 0.02;
  std::uint64_t noise_seed = 0;
  void validate() const;
};

/// Spectral power-law surface plus parabolic craters, north-up grid in meters.
RasterGrid generate_terrain(const TerrainParams& p);

/// Sun direction (east, north, up).
std::array<double, 3> sun_vector(const SunParams& sun);

/// Lambertian reflectance from Horn gradients (edge pixels replicate), times
/// (1 + albedo noise), clipped to [0, 1]. No cast shadows.
RasterGrid render_shaded(const RasterGrid& dem, const SunParams& sun, double pixel_scale);

struct DatasetParams {
  int n_pairs = 100;
  int tile_size = 64;
  std::array<double, 2> amplitude{20.0, 120.0};
  std::array<double, 2> beta{2.4, 3.0};
  std::array<int, 2> crater_count{0, 6};
  std::array<double, 2> crater_radius{3.0, 12.0};
  std::array<double, 2> base_elevation{-2000.0, 2000.0};
  std::array<double, 2> sun_azimuth{120.0, 150.0};
  std::array<double, 2> sun_elevation{20.0, 60.0};
  double albedo_noise_std = 0.02;
  double pixel_scale = 5.0;
  std::array<double, 3> split_ratios{0.8, 0.1, 0.1};
  QcConfig qc;  // tile_size is overridden by tile_size above
  NormalizationConfig normalization;
  void validate() const;
};

void to_json(nlohmann::json& j, const DatasetParams& p);
void from_json(const nlohmann::json& j, DatasetParams& p);

/// Terrain and sun for pair i, drawn from the ranges with seed splitmix64(seed ^ i).
struct PairSpec {
  TerrainParams terrain;
  SunParams sun;
};
PairSpec sample_pair(const DatasetParams& p, std::uint64_t seed, std::uint64_t index);

struct DatasetSummary {
  int generated = 0;
  int kept = 0;
  std::array<std::size_t, 3> split_counts{0, 0, 0};
  std::uint64_t hash = 0;
};

/// One tile per pair, run through the regular preprocess path and written as a
/// tile store. Throws IoFailure.
DatasetSummary make_dataset(const DatasetParams& p, std::uint64_t seed, const std::filesystem::path& out_dir);

/// Raw strip rasters for the preprocess command: <id>_img.tif (u16 DN),
/// <id>_dem.tif (f32) and pairs.csv (image_path,dem_path,source_id).
/// Strips are strip_tiles tall and one tile wide.
std::filesystem::path write_raw_strips(const DatasetParams& p, std::uint64_t seed, int strip_tiles,
                                       const std::filesystem::path& out_dir);

}  // namespace lunardem
