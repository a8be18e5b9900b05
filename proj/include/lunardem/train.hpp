#pragma once

#include "lunardem/losses.hpp"
#include "lunardem/model.hpp"
#include "lunardem/preprocess.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace lunardem {

struct TrainConfig {
  double lr = 5e-5;
  double weight_decay = 1e-5;
  int batch_size = 32;
  int epochs = 200;
  std::string scheduler = "cosine";
  double lr_min = 0.0;
  std::uint64_t seed = 0;
  std::string device = "cpu";
  LossWeights loss_weights;
  int val_every = 1;
  std::filesystem::path checkpoint_dir = "checkpoints";
  double clip_norm = 0.0;  // 0 disables clipping
  bool log_steps = true;

  /// Desk-scale settings: batch 8, 20 epochs.
  static TrainConfig desk();
  void validate() const;  // throws BadConfig
  bool operator==(const TrainConfig&) const = default;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// lr_min + (lr - lr_min)(1 + cos(pi t / epochs)) / 2. Throws OutOfRange.
double cosine_lr(int step_epoch, const TrainConfig& cfg);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  std::optional<double> val_loss;  // empty on epochs skipped by val_every
  double lr = 0.0;
  double wall_seconds = 0.0;
  LossReport train_report;
  std::optional<LossReport> val_report;

  /// Equality on everything but wall time.
  bool same_result(const EpochRecord& o) const;
};

struct TrainHistory {
  std::vector<EpochRecord> records;
  int best_epoch = -1;
  double best_val_loss = 0.0;
  std::vector<double> lr_trace;  // cosine_lr(t) for t = 0..epochs

  bool same_result(const TrainHistory& o) const;
};

void to_json(nlohmann::json& j, const EpochRecord& r);
void from_json(const nlohmann::json& j, EpochRecord& r);
void to_json(nlohmann::json& j, const TrainHistory& h);
void from_json(const nlohmann::json& j, TrainHistory& h);

/// Adam with L2 weight decay added to the gradient, bias-corrected moments.
template <typename Scalar>
class Adam {
 public:
  explicit Adam(const std::vector<NamedTensor<Scalar>>& params, double weight_decay = 0.0, double beta1 = 0.9,
                double beta2 = 0.999, double eps = 1e-8);
  void step(double lr);
  long steps() const { return t_; }

 private:
  std::vector<Var<Scalar>> params_;
  std::vector<Eigen::ArrayXd> m_, v_;
  double wd_, b1_, b2_, eps_;
  long t_ = 0;
};

/// Global L2 norm of all parameter gradients; rescaled to max_norm when above it.
template <typename Scalar>
double clip_grad_norm(const std::vector<NamedTensor<Scalar>>& params, double max_norm);

/// One optimizer step on a batch: train-mode forward, composite loss, backward, Adam.
/// Throws NonFiniteLoss naming the batch's tile ids.
template <typename Scalar>
LossReport train_step(LunarDepthNet<Scalar>& model, Adam<Scalar>& opt, const Batch<Scalar>& batch,
                      const CorpusStats& stats, const LossWeights& w, double lr, std::mt19937_64& dropout_rng,
                      double clip_norm = 0.0);

/// Anything mapping a batch to model outputs; lets stubs stand in for the network.
template <typename Scalar>
using Predictor = std::function<ModelOutput<Scalar>(const Batch<Scalar>&)>;

/// Eval-mode sample-weighted mean LossReport over a split. Throws EmptySplit.
template <typename Scalar>
LossReport evaluate(const Predictor<Scalar>& predictor, const TileStore& store, Split split, const LossWeights& w,
                    int batch_size = 8);

template <typename Scalar>
LossReport evaluate(const LunarDepthNet<Scalar>& model, const TileStore& store, Split split, const LossWeights& w,
                    int batch_size = 8);

/// Per-epoch visit order of the train indices.
std::vector<std::size_t> epoch_order(std::vector<std::size_t> indices, std::uint64_t seed, int epoch);

struct TrainResult {
  std::filesystem::path best_checkpoint;
  std::filesystem::path last_checkpoint;
  TrainHistory history;
};

/// Writes <checkpoint_dir>/{best,last}/, history.json and train.jsonl.
/// Throws EmptySplit, NonFiniteLoss.
template <typename Scalar>
TrainResult train(LunarDepthNet<Scalar>& model, const TileStore& store, const TrainConfig& cfg,
                  bool verbose = false);

}  // namespace lunardem
