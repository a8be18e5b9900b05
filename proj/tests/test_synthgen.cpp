#include "lunardem/synthgen.hpp"

#include "lunardem/random.hpp"
#include "test_support.hpp"

#include <complex>
#include <numbers>

using namespace lunardem;
using lunardem::testing::expect_error;
using lunardem::testing::TempDir;

namespace {

// Radially averaged periodogram by a separable naive DFT, then a least-squares
// slope of log power against log radius over integer radii 2..n/4.
double periodogram_slope(const RowMatrix<double>& z) {
  using C = std::complex<double>;
  const int n = static_cast<int>(z.rows());
  const double mean = z.mean();
  std::vector<C> tw(n);
  for (int k = 0; k < n; ++k) tw[k] = std::polar(1.0, -2.0 * std::numbers::pi * k / n);
  std::vector<C> rows(static_cast<std::size_t>(n) * n), full(static_cast<std::size_t>(n) * n);
  for (int r = 0; r < n; ++r)
    for (int kx = 0; kx < n; ++kx) {
      C acc = 0;
      for (int c = 0; c < n; ++c) acc += (z(r, c) - mean) * tw[(kx * c) % n];
      rows[r * n + kx] = acc;
    }
  for (int kx = 0; kx < n; ++kx)
    for (int ky = 0; ky < n; ++ky) {
      C acc = 0;
      for (int r = 0; r < n; ++r) acc += rows[r * n + kx] * tw[(ky * r) % n];
      full[ky * n + kx] = acc;
    }
  std::vector<double> power(n, 0.0), count(n, 0.0);
  for (int ky = 0; ky < n; ++ky)
    for (int kx = 0; kx < n; ++kx) {
      const int fy = ky <= n / 2 ? ky : ky - n, fx = kx <= n / 2 ? kx : kx - n;
      const int bin = static_cast<int>(std::lround(std::sqrt(double(fx * fx + fy * fy))));
      if (bin < n) {
        power[bin] += std::norm(full[ky * n + kx]);
        count[bin] += 1;
      }
    }
  double sx = 0, sy = 0, sxx = 0, sxy = 0, m = 0;
  for (int k = 2; k <= n / 4; ++k) {
    const double x = std::log(double(k)), y = std::log(power[k] / count[k]);
    sx += x, sy += y, sxx += x * x, sxy += x * y, m += 1;
  }
  return (m * sxy - sx * sy) / (m * sxx - sx * sx);
}

// Per-pixel oracle written from the kernel definition.
double shade_oracle(const RowMatrix<double>& z, int r, int c, double az_deg, double el_deg, double scale) {
  const int h = static_cast<int>(z.rows()), w = static_cast<int>(z.cols());
  const double kx[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
  const double ky[3][3] = {{1, 2, 1}, {0, 0, 0}, {-1, -2, -1}};
  double gx = 0, gy = 0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      const double v = z(std::min(std::max(r + i - 1, 0), h - 1), std::min(std::max(c + j - 1, 0), w - 1));
      gx += kx[i][j] * v;
      gy += ky[i][j] * v;
    }
  gx /= 8 * scale;
  gy /= 8 * scale;
  // normal = (1,0,gx) x (0,1,gy)
  const double nx = -gx, ny = -gy, nz = 1.0;
  const double len = std::sqrt(nx * nx + ny * ny + nz * nz);
  const double az = az_deg * std::numbers::pi / 180, el = el_deg * std::numbers::pi / 180;
  const double dot = (nx * std::sin(az) * std::cos(el) + ny * std::cos(az) * std::cos(el) + nz * std::sin(el)) / len;
  return std::min(1.0, std::max(0.0, dot));
}

RasterGrid plane(int n, double sx, double sy) {
  RasterGrid g;
  g.values.resize(n, n);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) g.values(r, c) = sx * c + sy * r;
  return g;
}

DatasetParams small_params(int n) {
  DatasetParams p;
  p.n_pairs = n;
  p.tile_size = 64;
  return p;
}

}  // namespace

TEST_CASE("terrain is deterministic in its seed") {
  TerrainParams p;
  p.crater_count = 5;
  p.seed = 11;
  const auto a = generate_terrain(p), b = generate_terrain(p);
  CHECK(a.values == b.values);
  p.seed = 12;
  CHECK(generate_terrain(p).values != a.values);
}

TEST_CASE("crater-free terrain spans exactly the amplitude") {
  for (double amp : {2.0, 50.0, 733.25}) {
    for (int size : {64, 96, 128}) {
      TerrainParams p;
      p.size = size;
      p.amplitude = amp;
      p.base_elevation = -1234.5;
      p.seed = static_cast<std::uint64_t>(size) * 7 + 1;
      const auto g = generate_terrain(p);
      CHECK(g.height() == size);
      CHECK(g.width() == size);
      CHECK(std::abs(g.values.maxCoeff() - g.values.minCoeff() - amp) < 1e-9);
    }
  }
}

TEST_CASE("beta=2 terrain has a periodogram slope near -2") {
  double slope = 0;
  const int trials = 4;
  for (int s = 0; s < trials; ++s) {
    TerrainParams p;
    p.size = 128;
    p.seed = 100 + static_cast<std::uint64_t>(s);
    const double k = periodogram_slope(generate_terrain(p).values);
    CHECK(std::abs(k + 2.0) < 0.5);
    slope += k / trials;
  }
  MESSAGE("mean periodogram slope " << slope);
  CHECK(std::abs(slope + 2.0) < 0.5);
}

TEST_CASE("flat terrain renders sin(elevation)") {
  RasterGrid flat = plane(64, 0, 0);
  flat.values.array() += 1700.0;
  for (double el : {5.0, 30.0, 62.5, 90.0}) {
    SunParams sun{123.0, el, 0.0, 0};
    const auto img = render_shaded(flat, sun, 5.0);
    CHECK((img.values.array() - std::sin(el * std::numbers::pi / 180)).abs().maxCoeff() < 1e-15);
  }
}

TEST_CASE("a plane facing the sun is brighter than one facing away") {
  SunParams sun{90.0, 35.0, 0.0, 0};  // sun in the east
  for (double slope : {0.1, 0.5, 2.0}) {
    const double toward = render_shaded(plane(64, -slope * 5, 0), sun, 5.0).values.mean();
    const double away = render_shaded(plane(64, slope * 5, 0), sun, 5.0).values.mean();
    CHECK(toward > away);
  }
  SunParams north{0.0, 35.0, 0.0, 0};
  // rows grow southward, so z rising with row faces north
  CHECK(render_shaded(plane(64, 0, 2.0), north, 5.0).values.mean() >
        render_shaded(plane(64, 0, -2.0), north, 5.0).values.mean());
}

TEST_CASE("shading matches the per-pixel oracle") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    TerrainParams p;
    p.size = 64;
    p.crater_count = 4;
    p.amplitude = 20.0 + 100.0 * trial;
    p.seed = rng();
    const auto dem = generate_terrain(p);
    SunParams sun{uniform(rng, 0, 360), uniform(rng, 5, 85), 0.0, 0};
    const auto img = render_shaded(dem, sun, p.pixel_scale);
    double worst = 0;
    for (int r = 0; r < 64; ++r)
      for (int c = 0; c < 64; ++c)
        worst = std::max(worst, std::abs(img.values(r, c) -
                                         shade_oracle(dem.values, r, c, sun.azimuth_deg, sun.elevation_deg, 5.0)));
    CHECK(worst < 1e-12);
  }
}

TEST_CASE("shading ignores a constant offset") {
  TerrainParams p;
  p.crater_count = 3;
  p.seed = 77;
  RasterGrid dem = generate_terrain(p);
  // dyadic grid so that adding the offset is exact in double
  dem.values = (dem.values.array() * 1024.0).round() / 1024.0;
  RasterGrid lifted = dem;
  lifted.values.array() += 1536.0;
  SunParams sun{210.0, 25.0, 0.05, 99};
  CHECK(render_shaded(dem, sun, 5.0).values == render_shaded(lifted, sun, 5.0).values);

  // arbitrary offsets agree to rounding
  lifted = generate_terrain(p);
  lifted.values.array() += 987.654321;
  const RowMatrix<double> diff = render_shaded(generate_terrain(p), sun, 5.0).values - render_shaded(lifted, sun, 5.0).values;
  CHECK(diff.cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("reflectance stays in [0,1] under heavy noise") {
  TerrainParams p;
  p.amplitude = 400;
  p.crater_count = 10;
  p.seed = 3;
  SunParams sun{45.0, 10.0, 0.8, 4};
  const auto img = render_shaded(generate_terrain(p), sun, 5.0);
  CHECK(img.values.minCoeff() >= 0.0);
  CHECK(img.values.maxCoeff() <= 1.0);
  CHECK(img.values.maxCoeff() == 1.0);
  CHECK(img.values.minCoeff() == 0.0);
}

TEST_CASE("parameter validation") {
  TerrainParams p;
  p.size = 32;
  expect_error(ErrorKind::BadConfig, [&] { generate_terrain(p); });
  p = {};
  p.amplitude = 0;
  expect_error(ErrorKind::BadConfig, [&] { generate_terrain(p); });
  SunParams sun{0, 0, 0, 0};
  expect_error(ErrorKind::BadConfig, [&] { render_shaded(plane(64, 0, 0), sun, 5.0); });
  sun = {360.0, 30.0, 0, 0};
  expect_error(ErrorKind::BadConfig, [&] { render_shaded(plane(64, 0, 0), sun, 5.0); });
  DatasetParams d = small_params(0);
  expect_error(ErrorKind::BadConfig, [&] { d.validate(); });
  d = small_params(3);
  d.amplitude = {1.0, 5.0};
  expect_error(ErrorKind::BadConfig, [&] { d.validate(); });
}

TEST_CASE("pair sampling is seeded per index") {
  const auto p = small_params(5);
  const auto a = sample_pair(p, 9, 3), b = sample_pair(p, 9, 3), c = sample_pair(p, 9, 4);
  CHECK(a.terrain.seed == b.terrain.seed);
  CHECK(a.sun.azimuth_deg == b.sun.azimuth_deg);
  CHECK(a.terrain.seed != c.terrain.seed);
  CHECK(a.terrain.amplitude >= p.amplitude[0]);
  CHECK(a.terrain.amplitude <= p.amplitude[1]);
  CHECK(a.sun.elevation_deg > 0.0);
}

TEST_CASE("make_dataset writes a valid, reproducible store") {
  TempDir dir("synth");
  const auto p = small_params(10);
  const auto s1 = make_dataset(p, 7, dir / "a");
  const auto s2 = make_dataset(p, 7, dir / "b");
  const auto s3 = make_dataset(p, 8, dir / "c");
  CHECK(s1.kept == 10);
  CHECK(s1.split_counts == std::array<std::size_t, 3>{8, 1, 1});
  CHECK(s1.hash == s2.hash);
  CHECK(hash_directory(dir / "a") == hash_directory(dir / "b"));
  CHECK(s1.hash != s3.hash);

  const auto store = TileStore::open(dir / "a");
  REQUIRE(store.size() == 10);
  CHECK(store.tile_size() == 64);
  CHECK(store.corpus_stats().available);
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto rec = store.load(i);
    CHECK(rec.meta.valid_ratio >= store.qc().gamma);
    CHECK(rec.meta.z_ptp > 1.0);
    CHECK(rec.image.minCoeff() >= -1.0f);
    CHECK(rec.image.maxCoeff() <= 1.0f);
    CHECK(rec.dem.minCoeff() == 0.0f);
    CHECK(rec.dem.maxCoeff() < 1.0f);
    // re-run QC on the denormalized tile
    const auto z = denormalize_dem(rec.dem.cast<double>(), rec.meta.z_min, rec.meta.z_ptp + store.normalization().epsilon);
    const auto d = qc_filter(z, rec.mask, store.qc());
    CHECK(d.keep);
    CHECK(std::abs(d.z_min - rec.meta.z_min) < 1e-3);
  }
}

TEST_CASE("raw strips go through the preprocess path") {
  TempDir dir("strips");
  auto p = small_params(2);
  const auto csv = write_raw_strips(p, 21, 2, dir.path());
  CHECK(std::filesystem::exists(csv));
  QcConfig qc;
  qc.tile_size = 64;
  for (int i = 0; i < 2; ++i) {
    const std::string id = "strip0000" + std::to_string(i);
    const auto image = read_raster(dir / (id + "_img.tif"));
    const auto dem = read_raster(dir / (id + "_dem.tif"));
    CHECK(image.source_bitdepth == BitDepth::u16);
    CHECK(image.width() == 128);
    PreprocessSummary summary;
    const auto tiles = preprocess_pair(image, dem, id, qc, NormalizationConfig{}, &summary);
    CHECK(summary.candidates == 4);
    CHECK(tiles.size() == 4);
    for (const auto& t : tiles) CHECK(qc_filter(denormalize_dem(t.dem.cast<double>(), t.meta.z_min, t.meta.z_ptp + 1e-3), t.mask, qc).keep);
  }
}
