#include "lunardem/synthgen.hpp"

#include "lunardem/error.hpp"
#include "lunardem/random.hpp"

#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>

namespace lunardem {

namespace fs = std::filesystem;

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

void require(bool ok, const std::string& what) {
  if (!ok) throw Error(ErrorKind::BadConfig, what);
}

template <typename T>
void require_range(const std::array<T, 2>& r, const std::string& name) {
  require(r[0] <= r[1], name + " range must be ordered");
}

// Real part of the inverse 2-D DFT of a random-phase power-law spectrum.
RowMatrix<double> spectral_surface(int n, double beta, std::mt19937_64& rng) {
  using C = std::complex<double>;
  std::vector<C> spec(static_cast<std::size_t>(n) * n);
  for (int ky = 0; ky < n; ++ky) {
    const double fy = static_cast<double>(ky <= n / 2 ? ky : ky - n) / n;
    for (int kx = 0; kx < n; ++kx) {
      const double fx = static_cast<double>(kx <= n / 2 ? kx : kx - n) / n;
      const double f = std::hypot(fx, fy);
      const double phase = 2.0 * std::numbers::pi * uniform01(rng);
      spec[static_cast<std::size_t>(ky) * n + kx] = f > 0.0 ? std::polar(std::pow(f, -beta / 2.0), phase) : C(0.0);
    }
  }
  Eigen::FFT<double> fft;
  std::vector<C> line(n), out(n);
  for (int r = 0; r < n; ++r) {
    std::copy_n(spec.begin() + static_cast<std::ptrdiff_t>(r) * n, n, line.begin());
    fft.inv(out, line);
    std::copy(out.begin(), out.end(), spec.begin() + static_cast<std::ptrdiff_t>(r) * n);
  }
  RowMatrix<double> z(n, n);
  for (int c = 0; c < n; ++c) {
    for (int r = 0; r < n; ++r) line[r] = spec[static_cast<std::size_t>(r) * n + c];
    fft.inv(out, line);
    for (int r = 0; r < n; ++r) z(r, c) = out[r].real();
  }
  return z;
}

// Parabolic bowl, zero at center depth -depth+rim, rim decaying to 0 at 3R.
double crater_profile(double r, double radius, double depth) {
  const double rim = 0.2 * depth;
  if (r <= radius) {
    const double u = r / radius;
    return depth * (u * u - 1.0) + rim;
  }
  if (r >= 3.0 * radius) return 0.0;
  const double v = radius / r;
  return rim * (v * v * v - 1.0 / 27.0) / (1.0 - 1.0 / 27.0);
}

GeoTransform synthetic_transform(double pixel_scale) { return {{0.0, pixel_scale, 0.0, 0.0, 0.0, -pixel_scale}}; }

}  // namespace

void TerrainParams::validate() const {
  require(size >= 64, "terrain size must be at least 64");
  require(amplitude > 0.0, "amplitude must be positive");
  require(pixel_scale > 0.0, "pixel_scale must be positive");
  require(std::isfinite(spectral_beta), "spectral_beta must be finite");
  require(crater_count >= 0, "crater_count must be non-negative");
  require(crater_radius_range[0] > 0.0 && crater_radius_range[0] <= crater_radius_range[1],
          "crater radius range must be positive and ordered");
  require(crater_depth_ratio >= 0.0, "crater_depth_ratio must be non-negative");
}

void SunParams::validate() const {
  require(azimuth_deg >= 0.0 && azimuth_deg < 360.0, "sun azimuth must lie in [0, 360)");
  require(elevation_deg > 0.0 && elevation_deg <= 90.0, "sun elevation must lie in (0, 90]");
  require(albedo_noise_std >= 0.0, "albedo_noise_std must be non-negative");
}

RasterGrid generate_terrain(const TerrainParams& p) {
  p.validate();
  std::mt19937_64 rng(p.seed);
  RowMatrix<double> z = spectral_surface(p.size, p.spectral_beta, rng);
  const double lo = z.minCoeff();
  const double span = z.maxCoeff() - lo;
  z = ((z.array() - lo) * (p.amplitude / span)).matrix();

  for (int k = 0; k < p.crater_count; ++k) {
    const double cy = uniform(rng, 0.0, p.size);
    const double cx = uniform(rng, 0.0, p.size);
    const double radius = uniform(rng, p.crater_radius_range[0], p.crater_radius_range[1]);
    const double depth = p.crater_depth_ratio * 2.0 * radius * p.pixel_scale;
    const int r0 = std::max(0, static_cast<int>(std::floor(cy - 3.0 * radius)));
    const int r1 = std::min(p.size - 1, static_cast<int>(std::ceil(cy + 3.0 * radius)));
    const int c0 = std::max(0, static_cast<int>(std::floor(cx - 3.0 * radius)));
    const int c1 = std::min(p.size - 1, static_cast<int>(std::ceil(cx + 3.0 * radius)));
    for (int r = r0; r <= r1; ++r) {
      for (int c = c0; c <= c1; ++c) {
        z(r, c) += crater_profile(std::hypot(r + 0.5 - cy, c + 0.5 - cx), radius, depth);
      }
    }
  }

  RasterGrid grid;
  grid.values = (z.array() + p.base_elevation).matrix();
  grid.transform = synthetic_transform(p.pixel_scale);
  grid.crs_id = "synthetic";
  grid.source_bitdepth = BitDepth::f32;
  return grid;
}

std::array<double, 3> sun_vector(const SunParams& sun) {
  const double az = sun.azimuth_deg * kDeg, el = sun.elevation_deg * kDeg;
  return {std::sin(az) * std::cos(el), std::cos(az) * std::cos(el), std::sin(el)};
}

RasterGrid render_shaded(const RasterGrid& dem, const SunParams& sun, double pixel_scale) {
  sun.validate();
  if (!(pixel_scale > 0.0)) throw Error(ErrorKind::BadConfig, "pixel_scale must be positive");
  const RowMatrix<double>& z = dem.values;
  if (!z.allFinite()) throw Error(ErrorKind::NonFiniteInput, "render_shaded needs a finite DEM");
  const int h = static_cast<int>(z.rows()), w = static_cast<int>(z.cols());
  const auto s = sun_vector(sun);
  std::mt19937_64 rng(sun.noise_seed);

  RasterGrid out;
  out.values.resize(h, w);
  auto at = [&](int r, int c) { return z(std::clamp(r, 0, h - 1), std::clamp(c, 0, w - 1)); };
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      // differences first, so a constant offset cancels before any rounding of slopes
      const double dx = (at(r - 1, c + 1) - at(r - 1, c - 1)) + 2.0 * (at(r, c + 1) - at(r, c - 1)) +
                        (at(r + 1, c + 1) - at(r + 1, c - 1));
      const double dy = (at(r - 1, c - 1) - at(r + 1, c - 1)) + 2.0 * (at(r - 1, c) - at(r + 1, c)) +
                        (at(r - 1, c + 1) - at(r + 1, c + 1));
      const double p = dx / (8.0 * pixel_scale), q = dy / (8.0 * pixel_scale);
      const double lambert = std::max(0.0, (-p * s[0] - q * s[1] + s[2]) / std::sqrt(1.0 + p * p + q * q));
      const double noise = sun.albedo_noise_std > 0.0 ? sun.albedo_noise_std * standard_normal(rng) : 0.0;
      out.values(r, c) = std::clamp(lambert * (1.0 + noise), 0.0, 1.0);
    }
  }
  out.transform = dem.transform;
  out.crs_id = dem.crs_id;
  out.source_bitdepth = BitDepth::f32;
  return out;
}

void DatasetParams::validate() const {
  require(n_pairs >= 1, "n_pairs must be at least 1");
  require(tile_size >= 64 && tile_size % 32 == 0, "tile_size must be a multiple of 32 and at least 64");
  require(amplitude[0] >= 2.0, "amplitude range must start at 2 m or more");
  require_range(amplitude, "amplitude");
  require_range(beta, "beta");
  require(crater_count[0] >= 0, "crater_count must be non-negative");
  require_range(crater_count, "crater_count");
  require(crater_radius[0] > 0.0, "crater radius must be positive");
  require_range(crater_radius, "crater_radius");
  require_range(base_elevation, "base_elevation");
  require(sun_azimuth[0] >= 0.0 && sun_azimuth[1] <= 360.0, "sun azimuth range must lie in [0, 360]");
  require_range(sun_azimuth, "sun_azimuth");
  require(sun_elevation[0] > 0.0 && sun_elevation[1] <= 90.0, "sun elevation range must lie in (0, 90]");
  require_range(sun_elevation, "sun_elevation");
  require(albedo_noise_std >= 0.0, "albedo_noise_std must be non-negative");
  require(pixel_scale > 0.0, "pixel_scale must be positive");
  QcConfig q = qc;
  q.tile_size = tile_size;
  q.validate();
  normalization.validate();
}

void to_json(nlohmann::json& j, const DatasetParams& p) {
  j = {{"n_pairs", p.n_pairs},
       {"tile_size", p.tile_size},
       {"amplitude", p.amplitude},
       {"beta", p.beta},
       {"crater_count", p.crater_count},
       {"crater_radius", p.crater_radius},
       {"base_elevation", p.base_elevation},
       {"sun_azimuth", p.sun_azimuth},
       {"sun_elevation", p.sun_elevation},
       {"albedo_noise_std", p.albedo_noise_std},
       {"pixel_scale", p.pixel_scale},
       {"split_ratios", p.split_ratios},
       {"qc", p.qc},
       {"normalization", p.normalization}};
}

void from_json(const nlohmann::json& j, DatasetParams& p) {
  j.at("n_pairs").get_to(p.n_pairs);
  j.at("tile_size").get_to(p.tile_size);
  j.at("amplitude").get_to(p.amplitude);
  j.at("beta").get_to(p.beta);
  j.at("crater_count").get_to(p.crater_count);
  j.at("crater_radius").get_to(p.crater_radius);
  j.at("base_elevation").get_to(p.base_elevation);
  j.at("sun_azimuth").get_to(p.sun_azimuth);
  j.at("sun_elevation").get_to(p.sun_elevation);
  j.at("albedo_noise_std").get_to(p.albedo_noise_std);
  j.at("pixel_scale").get_to(p.pixel_scale);
  j.at("split_ratios").get_to(p.split_ratios);
  j.at("qc").get_to(p.qc);
  j.at("normalization").get_to(p.normalization);
}

PairSpec sample_pair(const DatasetParams& p, std::uint64_t seed, std::uint64_t index) {
  std::mt19937_64 rng(splitmix64(seed ^ index));
  PairSpec s;
  s.terrain.size = p.tile_size;
  s.terrain.pixel_scale = p.pixel_scale;
  s.terrain.amplitude = uniform(rng, p.amplitude[0], p.amplitude[1]);
  s.terrain.spectral_beta = uniform(rng, p.beta[0], p.beta[1]);
  s.terrain.crater_count = uniform_int(rng, p.crater_count[0], p.crater_count[1]);
  s.terrain.crater_radius_range = p.crater_radius;
  s.terrain.base_elevation = uniform(rng, p.base_elevation[0], p.base_elevation[1]);
  s.terrain.seed = rng();
  s.sun.azimuth_deg = std::fmod(uniform(rng, p.sun_azimuth[0], p.sun_azimuth[1]), 360.0);
  s.sun.elevation_deg = uniform(rng, p.sun_elevation[0], p.sun_elevation[1]);
  if (s.sun.elevation_deg <= 0.0) s.sun.elevation_deg = p.sun_elevation[1];
  s.sun.albedo_noise_std = p.albedo_noise_std;
  s.sun.noise_seed = rng();
  return s;
}

namespace {

std::string pair_id(std::uint64_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "syn%05llu", static_cast<unsigned long long>(i));
  return buf;
}

}  // namespace

DatasetSummary make_dataset(const DatasetParams& p, std::uint64_t seed, const fs::path& out_dir) {
  p.validate();
  QcConfig qc = p.qc;
  qc.tile_size = p.tile_size;

  std::vector<TileRecord> tiles;
  tiles.reserve(static_cast<std::size_t>(p.n_pairs));
  for (int i = 0; i < p.n_pairs; ++i) {
    const PairSpec spec = sample_pair(p, seed, static_cast<std::uint64_t>(i));
    const RasterGrid dem = generate_terrain(spec.terrain);
    const RasterGrid image = render_shaded(dem, spec.sun, p.pixel_scale);
    for (auto& t : preprocess_pair(image, dem, pair_id(static_cast<std::uint64_t>(i)), qc, p.normalization)) {
      tiles.push_back(std::move(t));
    }
  }

  std::vector<TileMetadata> meta;
  meta.reserve(tiles.size());
  for (const auto& t : tiles) meta.push_back(t.meta);
  const SplitAssignment splits = split_tiles(meta, p.split_ratios, seed, SplitUnit::tile);
  write_tile_store(out_dir, tiles, splits, qc, p.normalization);

  DatasetSummary summary;
  summary.generated = p.n_pairs;
  summary.kept = static_cast<int>(tiles.size());
  summary.split_counts = {splits.train.size(), splits.test.size(), splits.val.size()};
  summary.hash = hash_directory(out_dir);
  return summary;
}

fs::path write_raw_strips(const DatasetParams& p, std::uint64_t seed, int strip_tiles, const fs::path& out_dir) {
  p.validate();
  if (strip_tiles < 1) throw Error(ErrorKind::BadConfig, "strip_tiles must be at least 1");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw Error(ErrorKind::IoFailure, "cannot create " + out_dir.string() + ": " + ec.message());

  const fs::path csv = out_dir / "pairs.csv";
  std::ofstream out(csv);
  out << "image_path,dem_path,source_id\n";
  for (int i = 0; i < p.n_pairs; ++i) {
    PairSpec spec = sample_pair(p, seed, static_cast<std::uint64_t>(i));
    spec.terrain.size = p.tile_size * strip_tiles;
    const RasterGrid dem = generate_terrain(spec.terrain);
    RasterGrid image = render_shaded(dem, spec.sun, p.pixel_scale);
    // 12-bit style DN with 0 reserved for nodata
    image.values = (image.values.array() * 4000.0 + 100.0).matrix();
    image.nodata = 0.0;
    const std::string id = "strip" + pair_id(static_cast<std::uint64_t>(i)).substr(3);
    write_raster(image, out_dir / (id + "_img.tif"), BitDepth::u16);
    write_raster(dem, out_dir / (id + "_dem.tif"), BitDepth::f32);
    out << id << "_img.tif," << id << "_dem.tif," << id << "\n";
  }
  if (!out) throw Error(ErrorKind::IoFailure, "cannot write " + csv.string());
  return csv;
}

}  // namespace lunardem
