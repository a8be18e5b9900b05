#pragma once

#include "lunardem/model.hpp"
#include "lunardem/preprocess.hpp"
#include "lunardem/train.hpp"

#include "json.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace lunardem {

/// Eval-mode elevation channel for a [B,1,H,W] batch of stretched images. Throws BadShape.
template <typename Scalar>
Tensor<Scalar> predict_relative(const LunarDepthNet<Scalar>& model, const Tensor<Scalar>& images);

/// Single tile convenience wrapper.
template <typename Scalar>
RowMatrix<double> predict_relative(const LunarDepthNet<Scalar>& model, const RowMatrix<double>& image);

/// rel * z_ptp + z_min. Throws NegativePtp.
RowMatrix<double> predict_absolute(const RowMatrix<double>& relative, double z_min, double z_ptp);

/// Mean |pred - truth| over valid pixels. Throws EmptyMask.
double mae(const RowMatrix<double>& pred, const RowMatrix<double>& truth, const MaskMatrix& mask);

/// RMSE over valid pixels divided by the valid truth range; empty when the range is below 1e-9.
/// Throws EmptyMask.
std::optional<double> nrmse_tile(const RowMatrix<double>& pred, const RowMatrix<double>& truth,
                                 const MaskMatrix& mask);

enum class EvalMode { relative, absolute };
std::string to_string(EvalMode mode);
EvalMode eval_mode_from_string(const std::string& name);

struct TileMetrics {
  std::string tile_id;
  double mae = 0.0;              // in the mode's units
  std::optional<double> nrmse;  // empty when skipped
};

struct MetricsReport {
  EvalMode mode = EvalMode::relative;
  std::optional<double> mae_m;  // absolute mode only
  double mae_rel = 0.0;         // normalized domain, always reported
  std::vector<double> per_tile_nrmse;
  double mean_nrmse = 0.0;
  int n_tiles = 0;
  int n_skipped = 0;
  std::vector<TileMetrics> tiles;
};

void to_json(nlohmann::json& j, const MetricsReport& r);

/// Relative mode scores normalized tiles. Absolute mode rebuilds truth in meters as
/// Z' (z_ptp + eps) + z_min and the prediction by predict_absolute with the tile's
/// own z_min, z_ptp. MAE is pixel-weighted over the split.
/// Throws EmptySplit, MissingMetadata (absolute mode).
template <typename Scalar>
MetricsReport evaluate_store(const Predictor<Scalar>& predictor, const TileStore& store, Split split, EvalMode mode,
                             int batch_size = 8);

template <typename Scalar>
MetricsReport evaluate_store(const LunarDepthNet<Scalar>& model, const TileStore& store, Split split, EvalMode mode,
                             int batch_size = 8);

/// Mean normalized target over valid train-split pixels. Throws EmptySplit.
double train_target_mean(const TileStore& store);

/// Predicts the same value everywhere (the constant-mean baseline when given train_target_mean).
template <typename Scalar>
Predictor<Scalar> constant_predictor(double value);

void write_metrics_json(const MetricsReport& report, const std::filesystem::path& path);

struct ProfileLine {
  double r0 = 0, c0 = 0, r1 = 0, c1 = 0;  // pixel-center coordinates
};

struct ElevationProfile {
  EvalMode mode = EvalMode::relative;
  std::vector<double> distance_m;
  std::vector<double> truth;
  std::vector<double> pred;
};

/// Bilinear samples at 1-pixel steps from (r0,c0) toward (r1,c1): floor(length) + 1 samples.
/// Throws OutOfBounds, ShapeMismatch.
ElevationProfile extract_profile(const RowMatrix<double>& truth, const RowMatrix<double>& pred, const ProfileLine& line,
                                 double pixel_scale, EvalMode mode);

/// Bilinear value at a fractional pixel-center position inside the grid.
double bilinear_at(const RowMatrix<double>& grid, double row, double col);

/// CSV with columns distance_m,truth,pred.
void write_profile_csv(const ElevationProfile& profile, const std::filesystem::path& path);

std::string axis_label(EvalMode mode);

/// Two labeled series; format from the extension (.svg or .png). Throws IoFailure.
void render_profile_figure(const ElevationProfile& profile, const std::filesystem::path& path,
                           const std::string& title = "elevation profile");

}  // namespace lunardem
