#pragma once

#include "json.hpp"

#include <string>

namespace lunardem {

/// Local elevation statistics stored alongside each retained tile.
struct TileMetadata {
  std::string source_id;
  int row = 0;
  int col = 0;
  double z_min = 0.0;
  double z_ptp = 0.0;  // z_max - z_min over valid pixels
  double valid_ratio = 0.0;

  /// False when z_min/z_ptp are unknown (stored as null, read back as NaN).
  bool has_stats() const { return z_min == z_min && z_ptp == z_ptp; }
  std::string tile_id() const { return source_id + "_" + std::to_string(row) + "_" + std::to_string(col); }
  bool operator==(const TileMetadata& o) const {
    auto same = [](double a, double b) { return a == b || (a != a && b != b); };
    return source_id == o.source_id && row == o.row && col == o.col && same(z_min, o.z_min) &&
           same(z_ptp, o.z_ptp) && valid_ratio == o.valid_ratio;
  }
};

void to_json(nlohmann::json& j, const TileMetadata& m);
void from_json(const nlohmann::json& j, TileMetadata& m);

/// Standardization constants for the scale-head z_min target, taken from the train split.
struct CorpusStats {
  double zmin_mean = 0.0;
  double zmin_std = 0.0;
  bool available = false;
};

void to_json(nlohmann::json& j, const CorpusStats& s);
void from_json(const nlohmann::json& j, CorpusStats& s);

}  // namespace lunardem
