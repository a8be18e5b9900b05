#pragma once

// Training objective on the normalized elevation domain. Every per-tile loss
// takes [B,1,H,W] tensors, averages over tiles, and optionally writes its
// gradient with respect to the prediction.

#include "lunardem/model.hpp"
#include "lunardem/tensor.hpp"
#include "lunardem/tile_types.hpp"

#include "json.hpp"

#include <vector>

namespace lunardem {

struct LossWeights {
  double alpha_l1 = 1.0;
  double alpha_grad = 1.0;
  double alpha_ssim = 1.0;
  double alpha_scale = 0.1;

  /// Throws Error(BadConfig) on a negative weight.
  void validate() const;
  bool operator==(const LossWeights&) const = default;
};

struct LossReport {
  double total = 0.0;
  double l1 = 0.0;
  double grad = 0.0;
  double ssim = 0.0;
  double scale = 0.0;
  bool operator==(const LossReport&) const = default;
};

void to_json(nlohmann::json& j, const LossReport& r);
void from_json(const nlohmann::json& j, LossReport& r);
void to_json(nlohmann::json& j, const LossWeights& w);
void from_json(const nlohmann::json& j, LossWeights& w);

inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

/// Masked mean absolute error. Throws EmptyMask.
template <typename Scalar>
Scalar l1_loss(const Tensor<Scalar>& pred, const Tensor<Scalar>& target, const Tensor<Scalar>& mask,
               Tensor<Scalar>* grad = nullptr);

/// Forward-difference gradient mismatch, x and y terms each averaged over
/// positions whose two stencil pixels are valid. Throws EmptyMask.
template <typename Scalar>
Scalar gradient_loss(const Tensor<Scalar>& pred, const Tensor<Scalar>& target, const Tensor<Scalar>& mask,
                     Tensor<Scalar>* grad = nullptr);

/// 1 - mean SSIM over all fully contained 11x11 Gaussian windows. Throws TooSmall.
template <typename Scalar>
Scalar ssim_loss(const Tensor<Scalar>& pred, const Tensor<Scalar>& target, Tensor<Scalar>* grad = nullptr);

/// Scale-head targets [B,2,1,1]: standardized z_min and log(1 + z_ptp). Throws MissingStats.
template <typename Scalar>
Tensor<Scalar> scale_targets(const std::vector<TileMetadata>& meta, const CorpusStats& stats);

/// Mean absolute error over all B*2 scale parameters.
template <typename Scalar>
Scalar scale_loss(const Tensor<Scalar>& pred_params, const Tensor<Scalar>& targets,
                  Tensor<Scalar>* grad = nullptr);

template <typename Scalar>
struct LossGradients {
  Tensor<Scalar> elevation;
  Tensor<Scalar> scale_params;
};

template <typename Scalar>
LossReport composite_loss(const Tensor<Scalar>& elevation, const Tensor<Scalar>& scale_params,
                          const Tensor<Scalar>& target, const Tensor<Scalar>& mask,
                          const Tensor<Scalar>& scale_target, const LossWeights& w,
                          LossGradients<Scalar>* grads = nullptr);

template <typename Scalar>
LossReport composite_loss(const ModelOutput<Scalar>& output, const Tensor<Scalar>& target,
                          const Tensor<Scalar>& mask, const std::vector<TileMetadata>& meta,
                          const CorpusStats& stats, const LossWeights& w) {
  return composite_loss(output.elevation, output.scale_params, target, mask,
                        scale_targets<Scalar>(meta, stats), w);
}

/// Normalized 1-D Gaussian taps of the SSIM window.
std::vector<double> ssim_taps();

}  // namespace lunardem
