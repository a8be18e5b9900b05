#pragma once

#include "lunardem/error.hpp"
#include "lunardem/infer_metrics.hpp"
#include "lunardem/losses.hpp"
#include "lunardem/model.hpp"
#include "lunardem/preprocess.hpp"
#include "lunardem/synthgen.hpp"
#include "lunardem/train.hpp"

#include "json.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace lunardem::cli {

enum ExitCode { kOk = 0, kUsage = 2, kIo = 3, kNumeric = 4 };

struct PathsConfig {
  std::string raw_dir = "raw";
  std::string store_dir = "store";
  std::string checkpoint_dir = "checkpoints";
  std::string out_dir = "out";
};

struct SplitConfig {
  std::array<double, 3> ratios{0.8, 0.1, 0.1};  // train, test, val
  std::string unit = "tile";
};

struct PipelineConfig {
  std::uint64_t seed = 0;
  QcConfig qc;
  NormalizationConfig normalization;
  ModelConfig model;
  TrainConfig train;
  LossWeights loss;
  PathsConfig paths;
  SplitConfig split;
  DatasetParams synth;  // ranges only; tile size, qc, normalization and split come from their sections
};

/// Full-scale defaults (512 px tiles, batch 32, 200 epochs), or the desk preset
/// (64 px tiles, batch 8, 20 epochs, tiny_unet).
nlohmann::json default_config(bool desk = false);

void to_json(nlohmann::json& j, const PathsConfig& p);
void to_json(nlohmann::json& j, const SplitConfig& s);

/// Sectioned JSON view used for config files, flags and run.json.
nlohmann::json to_json(const PipelineConfig& cfg);
/// Throws Error(Usage) on unknown keys or ill-typed values.
PipelineConfig from_json(const nlohmann::json& j);

/// Sets "section.key" (or "seed") from text, coerced to the default's type. Throws Error(Usage).
void apply_setting(nlohmann::json& cfg, const std::string& key, const std::string& value);

/// Reads an INI-style file: top-level `seed = N`, then [qc], [normalization], [model],
/// [train], [loss], [paths], [split], [synth] sections. '#' comments, [a, b] arrays.
void apply_config_file(nlohmann::json& cfg, const std::filesystem::path& path);

/// The same format back out; round-trips through apply_config_file.
std::string to_config_text(const nlohmann::json& cfg);

int exit_code_for(ErrorKind kind);

/// Entry point shared by the executable and the tests. Never throws.
int run(const std::vector<std::string>& args);
int run(int argc, char** argv);

}  // namespace lunardem::cli
