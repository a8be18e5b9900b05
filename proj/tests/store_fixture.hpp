#pragma once

// Small hand-built tile stores with known contents.

#include "lunardem/preprocess.hpp"

#include <filesystem>
#include <random>
#include <string>

namespace lunardem::testing {

struct FixtureSpec {
  int tile = 32;
  int n_train = 1;
  int n_test = 0;
  int n_val = 2;
  bool holes = true;  // mask out a block in every second tile
  std::uint64_t seed = 1;
};

inline TileRecord fixture_tile(const std::string& source, int index, const FixtureSpec& spec, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  TileRecord t;
  const int n = spec.tile;
  t.image.resize(n, n);
  t.dem.resize(n, n);
  t.mask = MaskMatrix::Ones(n, n);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) {
      t.dem(r, c) = static_cast<float>(0.6 * u(rng) + 0.3 * std::sin(0.2 * r + index) * std::cos(0.15 * c));
      t.image(r, c) = static_cast<float>(2.0 * u(rng) - 1.0);
    }
  if (spec.holes && index % 2 == 1) t.mask.block(2, 3, 5, 7).setZero();
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c)
      if (!t.mask(r, c)) t.dem(r, c) = 0.0f;
  // renormalize valid pixels to [0, 1)
  float lo = 1e9f, hi = -1e9f;
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c)
      if (t.mask(r, c)) lo = std::min(lo, t.dem(r, c)), hi = std::max(hi, t.dem(r, c));
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) t.dem(r, c) = t.mask(r, c) ? (t.dem(r, c) - lo) / (hi - lo + 1e-3f) : 0.0f;
  t.meta.source_id = source;
  t.meta.row = index;
  t.meta.col = 0;
  t.meta.z_min = -500.0 + 250.0 * index;
  t.meta.z_ptp = 40.0 + 15.0 * index;
  t.meta.valid_ratio = t.mask.cast<double>().mean();
  return t;
}

inline void write_fixture_store(const std::filesystem::path& dir, const FixtureSpec& spec) {
  std::mt19937_64 rng(spec.seed);
  std::vector<TileRecord> tiles;
  SplitAssignment splits;
  int index = 0;
  auto add = [&](Split s, int count, std::vector<std::string>& ids) {
    for (int i = 0; i < count; ++i, ++index) {
      tiles.push_back(fixture_tile("fx", index, spec, rng));
      ids.push_back(tiles.back().meta.tile_id());
      splits.of[ids.back()] = s;
    }
  };
  add(Split::train, spec.n_train, splits.train);
  add(Split::test, spec.n_test, splits.test);
  add(Split::val, spec.n_val, splits.val);
  QcConfig qc;
  qc.tile_size = spec.tile;
  write_tile_store(dir, tiles, splits, qc, NormalizationConfig{});
}

}  // namespace lunardem::testing
