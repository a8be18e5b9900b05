#pragma once

// UNet-style elevation network: 1->3 learnable projection, EfficientNet-B3 or
// plain-conv encoder emitting a stride {2,4,8,16,32} pyramid, four SE-gated
// decoder stages, a sigmoid elevation head at full resolution and an
// auxiliary scale head on the pooled bottleneck.

#include "lunardem/autograd.hpp"
#include "lunardem/nn_ops.hpp"

#include "json.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace lunardem {

enum class Backbone { effnet_b3, tiny_unet };

std::string to_string(Backbone backbone);
Backbone backbone_from_string(const std::string& name);

struct ModelConfig {
  Backbone backbone = Backbone::effnet_b3;
  int in_channels = 1;
  int projection_channels = 3;
  std::array<int, 4> decoder_channels{256, 128, 64, 32};
  int se_reduction = 16;
  double dropout_p = 0.2;
  int scale_head_hidden = 64;
  bool pretrained_encoder = false;
  /// Weight container with `encoder.*` tensors; consulted when pretrained_encoder is set.
  std::string pretrained_path;
  int norm_groups = 8;

  /// Throws Error(BadConfig).
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& cfg);
void from_json(const nlohmann::json& j, ModelConfig& cfg);

struct ForwardContext {
  bool training = false;
  std::mt19937_64* rng = nullptr;  // dropout source, required when training
};

template <typename Scalar>
struct NamedTensor {
  std::string name;
  Var<Scalar> var;
};

/// Collects parameters and non-trainable buffers under hierarchical names.
template <typename Scalar>
class ParameterStore {
 public:
  explicit ParameterStore(std::uint64_t seed) : rng_(seed) {}

  Var<Scalar> he_normal(const std::string& name, Shape shape, int fan_in);
  Var<Scalar> filled(const std::string& name, Shape shape, Scalar value);
  std::shared_ptr<Tensor<Scalar>> buffer(const std::string& name, Shape shape, Scalar value);

  const std::vector<NamedTensor<Scalar>>& parameters() const { return params_; }
  const std::vector<std::pair<std::string, std::shared_ptr<Tensor<Scalar>>>>& buffers() const {
    return buffers_;
  }

 private:
  std::mt19937_64 rng_;
  std::vector<NamedTensor<Scalar>> params_;
  std::vector<std::pair<std::string, std::shared_ptr<Tensor<Scalar>>>> buffers_;
};

namespace nn {

template <typename Scalar>
struct Conv2d {
  Var<Scalar> weight;
  Var<Scalar> bias;  // may be null
  ops::Conv2dOptions options;

  Conv2d() = default;
  Conv2d(ParameterStore<Scalar>& store, const std::string& name, int cin, int cout, int k,
         int stride = 1, bool with_bias = true, bool depthwise = false);
  Var<Scalar> operator()(const Var<Scalar>& x) const { return ops::conv2d(x, weight, bias, options); }
};

template <typename Scalar>
struct ConvTranspose2x2 {
  Var<Scalar> weight;
  Var<Scalar> bias;

  ConvTranspose2x2() = default;
  ConvTranspose2x2(ParameterStore<Scalar>& store, const std::string& name, int cin, int cout);
  Var<Scalar> operator()(const Var<Scalar>& x) const { return ops::conv_transpose2x2(x, weight, bias); }
};

template <typename Scalar>
struct GroupNorm {
  Var<Scalar> gamma;
  Var<Scalar> beta;
  int groups = 8;

  GroupNorm() = default;
  GroupNorm(ParameterStore<Scalar>& store, const std::string& name, int channels, int groups);
  Var<Scalar> operator()(const Var<Scalar>& x) const { return ops::group_norm(x, groups, gamma, beta); }
};

template <typename Scalar>
struct BatchNorm {
  Var<Scalar> gamma;
  Var<Scalar> beta;
  std::shared_ptr<Tensor<Scalar>> running_mean;
  std::shared_ptr<Tensor<Scalar>> running_var;

  BatchNorm() = default;
  BatchNorm(ParameterStore<Scalar>& store, const std::string& name, int channels);
  Var<Scalar> operator()(const Var<Scalar>& x, bool training) const {
    return ops::batch_norm(x, gamma, beta, *running_mean, *running_var, training, Scalar(0.01));
  }
};

enum class Activation { relu, silu };

/// Channel gate: global average pool -> 1x1 (C -> squeeze) -> act -> 1x1 (squeeze -> C) -> sigmoid.
template <typename Scalar>
struct SeBlock {
  Conv2d<Scalar> reduce;
  Conv2d<Scalar> expand;
  Activation activation = Activation::relu;

  SeBlock() = default;
  SeBlock(ParameterStore<Scalar>& store, const std::string& name, int channels, int squeeze,
          Activation activation);
};

/// Throws Error(BadShape) when the feature channel count disagrees with the block.
template <typename Scalar>
Var<Scalar> se_block(const Var<Scalar>& features, const SeBlock<Scalar>& block);

/// Per-channel gate values in (0, 1), shape [N, C, 1, 1].
template <typename Scalar>
Var<Scalar> se_gate(const Var<Scalar>& features, const SeBlock<Scalar>& block);

template <typename Scalar>
struct DecoderStage {
  ConvTranspose2x2<Scalar> up;
  Conv2d<Scalar> conv;
  GroupNorm<Scalar> norm;
  SeBlock<Scalar> se;
  double dropout_p = 0.0;
  int out_channels = 0;

  DecoderStage() = default;
  DecoderStage(ParameterStore<Scalar>& store, const std::string& name, int in_channels,
               int skip_channels, int out_channels, int se_reduction, int norm_groups, double dropout_p);
};

/// up x2 -> concat skip -> conv3x3 -> group norm -> ReLU -> dropout -> SE.
template <typename Scalar>
Var<Scalar> decoder_stage(const Var<Scalar>& up_input, const Var<Scalar>& skip,
                          const DecoderStage<Scalar>& stage, const ForwardContext& ctx);

template <typename Scalar>
class Encoder {
 public:
  virtual ~Encoder() = default;
  /// Feature maps at strides {2, 4, 8, 16, 32}.
  virtual std::array<Var<Scalar>, 5> operator()(const Var<Scalar>& x, const ForwardContext& ctx) const = 0;
  virtual std::array<int, 5> channels() const = 0;
};

template <typename Scalar>
std::unique_ptr<Encoder<Scalar>> make_encoder(ParameterStore<Scalar>& store, const ModelConfig& cfg);

/// Channel widths of the plain-conv ablation encoder.
inline constexpr std::array<int, 5> kTinyUNetChannels{16, 24, 32, 64, 128};

}  // namespace nn

template <typename Scalar>
struct ModelOutput {
  Tensor<Scalar> elevation;     // [B, 1, H, W] in (0, 1)
  Tensor<Scalar> scale_params;  // [B, 2, 1, 1]: standardized z_min, log(1 + z_ptp)
};

template <typename Scalar>
struct GraphOutput {
  Var<Scalar> elevation;
  Var<Scalar> scale_params;
};

template <typename Scalar>
class LunarDepthNet {
 public:
  LunarDepthNet(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }

  /// Records a graph when gradients are enabled. Throws BadShape / NonFiniteInput.
  GraphOutput<Scalar> forward_graph(const Tensor<Scalar>& images, const ForwardContext& ctx) const;

  /// Plain-value forward. Eval mode (training == false) never mutates the model.
  ModelOutput<Scalar> forward(const Tensor<Scalar>& images, bool training = false,
                              std::mt19937_64* rng = nullptr) const;

  const std::vector<NamedTensor<Scalar>>& parameters() const { return store_.parameters(); }
  const std::vector<std::pair<std::string, std::shared_ptr<Tensor<Scalar>>>>& buffers() const {
    return store_.buffers();
  }
  std::int64_t parameter_count() const;
  /// FNV-1a over parameter and buffer bytes in registration order.
  std::uint64_t parameter_hash() const;
  void zero_grad() const;

  std::array<int, 5> encoder_channels() const { return encoder_->channels(); }

 private:
  ModelConfig cfg_;
  ParameterStore<Scalar> store_;
  nn::Conv2d<Scalar> projection_;
  std::unique_ptr<nn::Encoder<Scalar>> encoder_;
  std::array<nn::DecoderStage<Scalar>, 4> decoder_;
  nn::ConvTranspose2x2<Scalar> head_up_;
  nn::Conv2d<Scalar> head_out_;
  nn::Conv2d<Scalar> scale_hidden_;
  nn::Conv2d<Scalar> scale_out_;
};

/// Builds and validates. Logs the parameter count to stderr when verbose.
template <typename Scalar>
LunarDepthNet<Scalar> build_model(const ModelConfig& cfg, std::uint64_t seed, bool verbose = false);

/// Checkpoint directory: weights.bin (tensor container) + checkpoint.json sidecar.
/// `extra` is merged into the sidecar (epoch, seed, history summary, corpus stats).
template <typename Scalar>
void save_weights(const LunarDepthNet<Scalar>& model, const std::filesystem::path& dir,
                  const nlohmann::json& extra = nlohmann::json::object());

/// Rebuilds the architecture from the sidecar. Throws CorruptCheckpoint / IoFailure.
template <typename Scalar>
LunarDepthNet<Scalar> load_weights(const std::filesystem::path& dir);

/// Loads into an existing model; throws ConfigMismatch if architectures differ.
template <typename Scalar>
void load_weights_into(LunarDepthNet<Scalar>& model, const std::filesystem::path& dir);

nlohmann::json read_checkpoint_sidecar(const std::filesystem::path& dir);

/// Raw tensor container I/O shared by checkpoints and pretrained encoders.
void write_tensor_file(const std::filesystem::path& path,
                       const std::vector<std::pair<std::string, Tensor<float>>>& tensors);
std::vector<std::pair<std::string, Tensor<float>>> read_tensor_file(const std::filesystem::path& path);

}  // namespace lunardem
