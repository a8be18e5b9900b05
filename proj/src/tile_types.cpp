#include "lunardem/tile_types.hpp"

#include <limits>

namespace lunardem {

namespace {

double number_or_nan(const nlohmann::json& v) {
  return v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>();
}

}  // namespace

void to_json(nlohmann::json& j, const TileMetadata& m) {
  j = {{"source_id", m.source_id}, {"row", m.row},     {"col", m.col},
       {"z_min", m.z_min},         {"z_ptp", m.z_ptp}, {"valid_ratio", m.valid_ratio}};
}

void from_json(const nlohmann::json& j, TileMetadata& m) {
  j.at("source_id").get_to(m.source_id);
  j.at("row").get_to(m.row);
  j.at("col").get_to(m.col);
  m.z_min = number_or_nan(j.at("z_min"));
  m.z_ptp = number_or_nan(j.at("z_ptp"));
  j.at("valid_ratio").get_to(m.valid_ratio);
}

void to_json(nlohmann::json& j, const CorpusStats& s) {
  j = {{"zmin_mean", s.zmin_mean}, {"zmin_std", s.zmin_std}, {"available", s.available}};
}

void from_json(const nlohmann::json& j, CorpusStats& s) {
  j.at("zmin_mean").get_to(s.zmin_mean);
  j.at("zmin_std").get_to(s.zmin_std);
  s.available = j.value("available", true);
}

}  // namespace lunardem
