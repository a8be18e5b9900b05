#include "lunardem/preprocess.hpp"
#include "test_support.hpp"

#include <fstream>
#include <set>

using namespace lunardem;
using lunardem::testing::expect_error;
using lunardem::testing::TempDir;

namespace {

RasterGrid grid_of(int h, int w, double value = 0.0) {
  RasterGrid g;
  g.values = RowMatrix<double>::Constant(h, w, value);
  return g;
}

RowMatrix<double> random_matrix(int h, int w, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  return RowMatrix<double>::NullaryExpr(h, w, [&] { return d(rng); });
}

MaskMatrix random_mask(int h, int w, std::mt19937_64& rng, double keep) {
  std::bernoulli_distribution coin(keep);
  return MaskMatrix::NullaryExpr(h, w, [&] { return static_cast<std::uint8_t>(coin(rng)); });
}

// Brute-force restatement of the two QC rules.
bool qc_oracle(const RowMatrix<double>& dem, const MaskMatrix& mask, double gamma, double ptp_min) {
  int valid = 0;
  double lo = 1e300, hi = -1e300;
  for (int r = 0; r < dem.rows(); ++r)
    for (int c = 0; c < dem.cols(); ++c)
      if (mask(r, c)) {
        ++valid;
        lo = std::min(lo, dem(r, c));
        hi = std::max(hi, dem(r, c));
      }
  if (valid == 0) return false;
  return double(valid) / double(dem.size()) >= gamma && hi - lo > ptp_min;
}

double oracle_percentile(std::vector<double> v, double p) {
  std::sort(v.begin(), v.end());
  const double rank = p / 100.0 * (v.size() - 1);
  const size_t below = static_cast<size_t>(rank);
  if (below + 1 >= v.size()) return v.back();
  return v[below] * (1 - (rank - below)) + v[below + 1] * (rank - below);
}

TileRecord synthetic_record(const std::string& source, int row, int col, int t, std::mt19937_64& rng) {
  TileRecord rec;
  rec.meta = {source, row, col, std::uniform_real_distribution<double>(-2000, 2000)(rng), 50.0, 1.0};
  rec.image = random_matrix(t, t, rng, -1, 1).cast<float>();
  rec.dem = random_matrix(t, t, rng, 0, 0.99).cast<float>();
  rec.mask = random_mask(t, t, rng, 0.95);
  return rec;
}

}  // namespace

TEST_CASE("tile_strip covers the grid without overlap and drops edges") {
  QcConfig qc;
  auto count = [&](int h, int w) {
    auto img = grid_of(h, w), dem = grid_of(h, w);
    auto m = ValidityMask::all_valid(h, w);
    return tile_strip(img, dem, m, m, qc);
  };
  auto six = count(1024, 1536);
  REQUIRE(six.size() == 6);
  std::set<std::pair<int, int>> cells;
  for (const auto& c : six) cells.insert({c.row, c.col});
  CHECK(cells == std::set<std::pair<int, int>>{{0, 0}, {0, 1}, {0, 2}, {1, 0}, {1, 1}, {1, 2}});
  CHECK(count(700, 700).size() == 1);

  std::mt19937_64 rng(1);
  RasterGrid img;
  img.values = random_matrix(512, 512, rng, 0, 1);
  auto dem = grid_of(512, 512);
  auto m = ValidityMask::all_valid(512, 512);
  auto one = tile_strip(img, dem, m, m, qc);
  REQUIRE(one.size() == 1);
  CHECK(one[0].image == img.values);

  QcConfig small{64, 0.05, 1.0};
  auto mask_a = ValidityMask::all_valid(64, 128), mask_b = ValidityMask::all_valid(64, 128);
  mask_a.bits(3, 3) = 0;
  mask_b.bits(5, 70) = 0;
  auto both = tile_strip(grid_of(64, 128), grid_of(64, 128), mask_a, mask_b, small);
  CHECK(both[0].mask(3, 3) == 0);
  CHECK(both[1].mask(5, 6) == 0);
  CHECK(both[0].mask.cast<int>().sum() == 64 * 64 - 1);

  expect_error(ErrorKind::ShapeMismatch,
               [&] { tile_strip(grid_of(64, 64), grid_of(64, 65), ValidityMask::all_valid(64, 64),
                                ValidityMask::all_valid(64, 65), small); });
}

TEST_CASE("qc_filter rules and reasons") {
  QcConfig qc{32, 0.05, 1.0};
  RowMatrix<double> dem = RowMatrix<double>::Constant(10, 10, 1500.0);
  dem(0, 0) = 1500.5;
  auto all = MaskMatrix::Ones(10, 10).eval();
  CHECK(qc_filter(dem, all, qc).reason == RejectReason::FlatTerrain);

  dem(0, 0) = 1501.0;  // ptp exactly at threshold
  CHECK(qc_filter(dem, all, qc).reason == RejectReason::FlatTerrain);
  dem(0, 0) = 1600.0;
  CHECK(qc_filter(dem, all, qc).keep);

  MaskMatrix sparse = MaskMatrix::Zero(10, 10);
  for (int i = 0; i < 4; ++i) sparse(0, i) = 1;
  CHECK(qc_filter(dem, sparse, qc).reason == RejectReason::LowValidRatio);
  sparse(0, 4) = 1;  // valid_ratio exactly 0.05
  CHECK(qc_filter(dem, sparse, qc).keep);
  CHECK(qc_filter(dem, MaskMatrix::Zero(10, 10), qc).reason == RejectReason::AllInvalid);
}

TEST_CASE("qc_filter agrees with a brute-force oracle") {
  std::mt19937_64 rng(2);
  QcConfig qc{32, 0.05, 1.0};
  int agree = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const double range = std::uniform_real_distribution<double>(0, 3)(rng);
    auto dem = random_matrix(16, 16, rng, 1000, 1000 + range);
    auto mask = random_mask(16, 16, rng, std::uniform_real_distribution<double>(0, 0.15)(rng));
    agree += qc_filter(dem, mask, qc).keep == qc_oracle(dem, mask, qc.gamma, qc.ptp_min);
  }
  CHECK(agree == 100);
}

TEST_CASE("percentile uses linear interpolation") {
  CHECK(percentile({1, 2, 3, 4, 5}, 50) == 3.0);
  CHECK(percentile({1, 2, 3, 4}, 50) == 2.5);
  CHECK(percentile({0, 10}, 1) == doctest::Approx(0.1));
  CHECK(percentile({7}, 99) == 7.0);
}

TEST_CASE("stretch_image") {
  NormalizationConfig cfg;
  // 101 evenly spaced values: p1 = 1 and p99 = 99, so 1..99 maps linearly to [-1, 1].
  RowMatrix<double> ramp(1, 101);
  for (int i = 0; i <= 100; ++i) ramp(0, i) = i;
  auto all = MaskMatrix::Ones(1, 101).eval();
  auto s = stretch_image(ramp, all, cfg);
  CHECK(s(0, 1) == doctest::Approx(-1.0));
  CHECK(s(0, 99) == doctest::Approx(1.0));
  CHECK(s(0, 50) == doctest::Approx(0.0));
  CHECK(s(0, 0) == -1.0);
  CHECK(s(0, 100) == 1.0);

  auto flat = stretch_image(RowMatrix<double>::Constant(4, 4, 7.0), MaskMatrix::Ones(4, 4), cfg);
  CHECK(flat.cwiseAbs().maxCoeff() == 0.0);

  std::mt19937_64 rng(3);
  auto img = random_matrix(12, 12, rng, 0, 4000);
  auto mask = random_mask(12, 12, rng, 0.8);
  auto out = stretch_image(img, mask, cfg);
  std::vector<double> valid;
  for (int i = 0; i < img.size(); ++i)
    if (mask.data()[i]) valid.push_back(img.data()[i]);
  const double lo = oracle_percentile(valid, 1), hi = oracle_percentile(valid, 99);
  double worst = 0;
  for (int i = 0; i < img.size(); ++i) {
    const double expect = mask.data()[i] ? (std::min(std::max(img.data()[i], lo), hi) - lo) / (hi - lo) * 2 - 1 : -1;
    worst = std::max(worst, std::abs(out.data()[i] - expect));
  }
  CHECK(worst < 1e-12);
  CHECK(out.maxCoeff() <= 1.0);
  CHECK(out.minCoeff() >= -1.0);

  // Monotone in the raw value.
  std::vector<int> order(valid.size());
  for (int i = 0, k = 0; i < img.size(); ++i)
    if (mask.data()[i]) order[k++] = i;
  for (int a : order)
    for (int b : order)
      if (img.data()[a] <= img.data()[b]) CHECK(out.data()[a] <= out.data()[b]);

  expect_error(ErrorKind::EmptyTile, [&] { stretch_image(img, MaskMatrix::Zero(12, 12), cfg); });
}

TEST_CASE("normalize and denormalize dem") {
  NormalizationConfig cfg;
  RowMatrix<double> dem(1, 3);
  dem << 1500, 1550, 1600;
  auto all = MaskMatrix::Ones(1, 3).eval();
  auto n = normalize_dem(dem, all, cfg);
  CHECK(n.values(0, 0) == 0.0);
  CHECK(n.values(0, 2) == doctest::Approx(100.0 / 100.001).epsilon(1e-15));
  CHECK(n.values(0, 2) < 1.0);
  CHECK(n.meta.z_min == 1500.0);
  CHECK(n.meta.z_ptp == 100.0);

  RowMatrix<double> unit(1, 2);
  unit << 0.0, 1.0;
  auto d = denormalize_dem(unit, 1500, 100);
  CHECK(d(0, 0) == 1500.0);
  CHECK(d(0, 1) == 1600.0);
  expect_error(ErrorKind::NegativePtp, [&] { denormalize_dem(unit, 0, -1); });

  MaskMatrix holes = all;
  holes(0, 1) = 0;
  auto masked = normalize_dem(dem, holes, cfg);
  CHECK(masked.values(0, 1) == 0.0);
  CHECK(masked.meta.valid_ratio == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("normalization round trip stays within epsilon") {
  std::mt19937_64 rng(4);
  NormalizationConfig cfg;
  double worst = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const double base = std::uniform_real_distribution<double>(-5000, 5000)(rng);
    const double ptp = std::exp(std::uniform_real_distribution<double>(0, 8)(rng));
    auto dem = random_matrix(16, 16, rng, base, base + ptp);
    auto mask = random_mask(16, 16, rng, 0.9);
    mask(0, 0) = 1;
    auto n = normalize_dem(dem, mask, cfg);
    auto back = denormalize_dem(n.values, n.meta.z_min, n.meta.z_ptp);
    double min_valid = 1e300;
    for (int i = 0; i < dem.size(); ++i) {
      if (!mask.data()[i]) continue;
      worst = std::max(worst, std::abs(back.data()[i] - dem.data()[i]));
      CHECK(n.values.data()[i] >= 0.0);
      CHECK(n.values.data()[i] < 1.0);
      min_valid = std::min(min_valid, n.values.data()[i]);
    }
    CHECK(min_valid == 0.0);
  }
  CHECK(worst <= 1e-3);
}

TEST_CASE("split sizes and determinism") {
  std::vector<std::string> ids;
  for (int i = 0; i < 100; ++i) ids.push_back("t" + std::to_string(i));
  auto a = split_dataset(ids, {0.8, 0.1, 0.1}, 7);
  CHECK(a.train.size() == 80);
  CHECK(a.test.size() == 10);
  CHECK(a.val.size() == 10);
  CHECK(a.of.size() == 100);
  auto b = split_dataset(ids, {0.8, 0.1, 0.1}, 7);
  CHECK(a.train == b.train);
  CHECK(a.val == b.val);
  std::reverse(ids.begin(), ids.end());
  CHECK(split_dataset(ids, {0.8, 0.1, 0.1}, 7).train == a.train);
  CHECK(split_dataset(ids, {0.8, 0.1, 0.1}, 8).train != a.train);

  expect_error(ErrorKind::BadRatios, [&] { split_dataset(ids, {0.8, 0.1, 0.2}, 1); });
  expect_error(ErrorKind::BadRatios, [&] { split_dataset(ids, {1.1, -0.1, 0.0}, 1); });
}

TEST_CASE("split sizes follow largest-remainder rounding") {
  // Independent rounding: floor every quota, then hand leftovers to the largest fractions.
  auto oracle = [](int n, std::array<double, 3> r) {
    std::array<int, 3> size{};
    std::vector<std::pair<double, int>> frac;
    int left = n;
    for (int k = 0; k < 3; ++k) {
      size[k] = static_cast<int>(n * r[k]);
      frac.push_back({n * r[k] - size[k], -k});
      left -= size[k];
    }
    std::sort(frac.rbegin(), frac.rend());
    for (int k = 0; k < left; ++k) ++size[-frac[k].second];
    return size;
  };
  for (int n : {7, 1, 2, 3, 9, 10, 11, 33, 99, 100, 101}) {
    auto s = split_sizes(n, {0.8, 0.1, 0.1});
    auto o = oracle(n, {0.8, 0.1, 0.1});
    CHECK(int(s[0]) == o[0]);
    CHECK(int(s[1]) == o[1]);
    CHECK(int(s[2]) == o[2]);
    CHECK(int(s[0] + s[1] + s[2]) == n);
  }
  auto seven = split_sizes(7, {0.8, 0.1, 0.1});
  CHECK(seven == std::array<std::size_t, 3>{5, 1, 1});
}

TEST_CASE("strip-level split keeps strips together") {
  std::vector<TileMetadata> tiles;
  for (int s = 0; s < 10; ++s)
    for (int k = 0; k < 4; ++k) tiles.push_back({"strip" + std::to_string(s), 0, k, 0, 10, 1});
  auto a = split_tiles(tiles, {0.8, 0.1, 0.1}, 3, SplitUnit::strip);
  CHECK(a.train.size() == 32);
  for (const auto& t : tiles) CHECK(a.of.at(t.tile_id()) == a.of.at(tiles[static_cast<size_t>(
                                                                      std::stoi(t.source_id.substr(5)) * 4)].tile_id()));
}

TEST_CASE("tile store round trip and integrity") {
  TempDir dir("store");
  std::mt19937_64 rng(5);
  std::vector<TileRecord> tiles;
  for (int i = 0; i < 3; ++i) tiles.push_back(synthetic_record("s", 0, i, 32, rng));
  std::vector<std::string> ids;
  for (const auto& t : tiles) ids.push_back(t.meta.tile_id());
  auto splits = split_dataset(ids, {0.34, 0.33, 0.33}, 1);
  QcConfig qc{32, 0.05, 1.0};
  write_tile_store(dir.path(), tiles, splits, qc, NormalizationConfig{});

  auto store = read_tile_store(dir.path());
  REQUIRE(store.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    auto rec = store.load(i);
    CHECK(rec.meta == tiles[i].meta);
    CHECK(rec.image == tiles[i].image);
    CHECK(rec.dem == tiles[i].dem);
    CHECK(rec.mask == tiles[i].mask);
    CHECK(store.entries()[i].split == splits.of.at(ids[i]));
  }
  auto batch = load_batch<float>(store, {2, 0});
  CHECK(batch.images.shape() == Shape{2, 1, 32, 32});
  CHECK(batch.dems.image(0, 0) == tiles[2].dem);
  CHECK(batch.meta[1] == tiles[0].meta);

  const auto hash = hash_directory(dir.path());
  write_tile_store(dir.path(), tiles, splits, qc, NormalizationConfig{});
  CHECK(hash_directory(dir.path()) == hash);

  nlohmann::json m;
  std::ifstream(dir / "manifest.json") >> m;
  m["n_tiles"] = 4;
  std::ofstream(dir / "manifest.json") << m.dump();
  expect_error(ErrorKind::CorruptTile, [&] { read_tile_store(dir.path()); });
  m["n_tiles"] = 3;
  m["version"] = 99;
  std::ofstream(dir / "manifest.json") << m.dump();
  expect_error(ErrorKind::ManifestVersionMismatch, [&] { read_tile_store(dir.path()); });
  m["version"] = kStoreVersion;
  std::ofstream(dir / "manifest.json") << m.dump();
  std::filesystem::resize_file(dir / "tiles" / (ids[1] + ".dem.f32"), 100);
  expect_error(ErrorKind::CorruptTile, [&] { read_tile_store(dir.path()); });
}

TEST_CASE("manifest split counts match the split assignment") {
  TempDir dir("store");
  std::mt19937_64 rng(6);
  std::vector<TileRecord> tiles;
  std::vector<std::string> ids;
  for (int i = 0; i < 50; ++i) {
    tiles.push_back(synthetic_record("syn", i / 8, i % 8, 32, rng));
    ids.push_back(tiles.back().meta.tile_id());
  }
  auto splits = split_dataset(ids, {0.8, 0.1, 0.1}, 11);
  write_tile_store(dir.path(), tiles, splits, QcConfig{32, 0.05, 1.0}, NormalizationConfig{});
  auto store = read_tile_store(dir.path());
  CHECK(store.indices(Split::train).size() == splits.train.size());
  CHECK(store.indices(Split::test).size() == splits.test.size());
  CHECK(store.indices(Split::val).size() == splits.val.size());

  std::vector<TileMetadata> train_meta;
  for (auto i : store.indices(Split::train)) train_meta.push_back(store.entries()[i].meta);
  const auto stats = compute_corpus_stats(train_meta);
  CHECK(store.corpus_stats().zmin_mean == doctest::Approx(stats.zmin_mean).epsilon(1e-14));
  CHECK(store.corpus_stats().available);
}

TEST_CASE("preprocess_pair aligns, filters and normalizes") {
  std::mt19937_64 rng(7);
  RasterGrid image;
  image.values = random_matrix(64, 96, rng, 100, 4000);
  image.source_bitdepth = BitDepth::u16;
  RasterGrid dem;
  dem.values = random_matrix(64, 96, rng, 1000, 1100);
  dem.values.rightCols(32).setConstant(1200.0);  // one flat tile
  dem.source_bitdepth = BitDepth::s16;
  dem.values(0, 0) = -32768;
  PreprocessSummary summary;
  auto recs = preprocess_pair(image, dem, "strip7", QcConfig{32, 0.05, 1.0}, NormalizationConfig{}, &summary);
  CHECK(summary.candidates == 6);
  CHECK(summary.kept == 4);
  CHECK(summary.rejected["FlatTerrain"] == 2);
  REQUIRE(recs.size() == 4);
  CHECK(recs[0].mask(0, 0) == 0);
  CHECK(recs[0].image(0, 0) == -1.0f);
  for (const auto& r : recs) {
    CHECK(r.meta.z_ptp > 1.0);
    CHECK(r.meta.valid_ratio >= 0.05);
    CHECK(r.dem.maxCoeff() < 1.0f);
    CHECK(r.dem.minCoeff() >= 0.0f);
  }
}
