#include "lunardem/model.hpp"

#include "lunardem/error.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <map>

namespace lunardem {

std::string to_string(Backbone backbone) {
  return backbone == Backbone::effnet_b3 ? "effnet_b3" : "tiny_unet";
}

Backbone backbone_from_string(const std::string& name) {
  if (name == "effnet_b3") return Backbone::effnet_b3;
  if (name == "tiny_unet") return Backbone::tiny_unet;
  throw Error(ErrorKind::BadConfig, "unknown backbone '" + name + "'");
}

void ModelConfig::validate() const {
  auto bad = [](const std::string& msg) { throw Error(ErrorKind::BadConfig, msg); };
  if (in_channels != 1) bad("in_channels must be 1 (grayscale)");
  if (projection_channels <= 0) bad("projection_channels must be positive");
  if (se_reduction <= 0) bad("se_reduction must be positive");
  if (norm_groups <= 0) bad("norm_groups must be positive");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) bad("dropout_p must lie in [0, 1)");
  if (scale_head_hidden <= 0) bad("scale_head_hidden must be positive");
  for (int c : decoder_channels) {
    if (c <= 0) bad("decoder channels must be positive");
    if (c % se_reduction != 0) {
      bad("se_reduction " + std::to_string(se_reduction) + " does not divide decoder width " + std::to_string(c));
    }
    if (c % norm_groups != 0) {
      bad("norm_groups " + std::to_string(norm_groups) + " does not divide decoder width " + std::to_string(c));
    }
  }
}

void to_json(nlohmann::json& j, const ModelConfig& cfg) {
  j = nlohmann::json{{"backbone", to_string(cfg.backbone)},
                     {"in_channels", cfg.in_channels},
                     {"projection_channels", cfg.projection_channels},
                     {"decoder_channels", cfg.decoder_channels},
                     {"se_reduction", cfg.se_reduction},
                     {"dropout_p", cfg.dropout_p},
                     {"scale_head_hidden", cfg.scale_head_hidden},
                     {"pretrained_encoder", cfg.pretrained_encoder},
                     {"pretrained_path", cfg.pretrained_path},
                     {"norm_groups", cfg.norm_groups}};
}

void from_json(const nlohmann::json& j, ModelConfig& cfg) {
  cfg.backbone = backbone_from_string(j.at("backbone").get<std::string>());
  j.at("in_channels").get_to(cfg.in_channels);
  j.at("projection_channels").get_to(cfg.projection_channels);
  j.at("decoder_channels").get_to(cfg.decoder_channels);
  j.at("se_reduction").get_to(cfg.se_reduction);
  j.at("dropout_p").get_to(cfg.dropout_p);
  j.at("scale_head_hidden").get_to(cfg.scale_head_hidden);
  j.at("pretrained_encoder").get_to(cfg.pretrained_encoder);
  j.at("pretrained_path").get_to(cfg.pretrained_path);
  j.at("norm_groups").get_to(cfg.norm_groups);
}

template <typename Scalar>
Var<Scalar> ParameterStore<Scalar>::he_normal(const std::string& name, Shape shape, int fan_in) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  Tensor<Scalar> t(shape);
  for (Eigen::Index i = 0; i < t.vec().size(); ++i) t.vec()[i] = static_cast<Scalar>(dist(rng_));
  auto v = parameter(std::move(t));
  params_.push_back({name, v});
  return v;
}

template <typename Scalar>
Var<Scalar> ParameterStore<Scalar>::filled(const std::string& name, Shape shape, Scalar value) {
  auto v = parameter(Tensor<Scalar>::constant(shape, value));
  params_.push_back({name, v});
  return v;
}

template <typename Scalar>
std::shared_ptr<Tensor<Scalar>> ParameterStore<Scalar>::buffer(const std::string& name, Shape shape,
                                                               Scalar value) {
  auto t = std::make_shared<Tensor<Scalar>>(Tensor<Scalar>::constant(shape, value));
  buffers_.emplace_back(name, t);
  return t;
}

namespace nn {

template <typename Scalar>
Conv2d<Scalar>::Conv2d(ParameterStore<Scalar>& store, const std::string& name, int cin, int cout,
                       int k, int stride, bool with_bias, bool depthwise) {
  const int per_group = depthwise ? 1 : cin;
  weight = store.he_normal(name + ".weight", {cout, per_group, k, k}, per_group * k * k);
  if (with_bias) bias = store.filled(name + ".bias", {1, cout, 1, 1}, Scalar(0));
  options = {stride, k / 2, depthwise ? cin : 1};
}

template <typename Scalar>
ConvTranspose2x2<Scalar>::ConvTranspose2x2(ParameterStore<Scalar>& store, const std::string& name,
                                           int cin, int cout) {
  weight = store.he_normal(name + ".weight", {cin, cout, 2, 2}, cin);
  bias = store.filled(name + ".bias", {1, cout, 1, 1}, Scalar(0));
}

template <typename Scalar>
GroupNorm<Scalar>::GroupNorm(ParameterStore<Scalar>& store, const std::string& name, int channels,
                             int groups_)
    : groups(groups_) {
  gamma = store.filled(name + ".gamma", {1, channels, 1, 1}, Scalar(1));
  beta = store.filled(name + ".beta", {1, channels, 1, 1}, Scalar(0));
}

template <typename Scalar>
BatchNorm<Scalar>::BatchNorm(ParameterStore<Scalar>& store, const std::string& name, int channels) {
  gamma = store.filled(name + ".gamma", {1, channels, 1, 1}, Scalar(1));
  beta = store.filled(name + ".beta", {1, channels, 1, 1}, Scalar(0));
  running_mean = store.buffer(name + ".running_mean", {1, channels, 1, 1}, Scalar(0));
  running_var = store.buffer(name + ".running_var", {1, channels, 1, 1}, Scalar(1));
}

template <typename Scalar>
SeBlock<Scalar>::SeBlock(ParameterStore<Scalar>& store, const std::string& name, int channels,
                         int squeeze, Activation act)
    : reduce(store, name + ".reduce", channels, squeeze, 1),
      expand(store, name + ".expand", squeeze, channels, 1),
      activation(act) {}

template <typename Scalar>
Var<Scalar> se_gate(const Var<Scalar>& features, const SeBlock<Scalar>& block) {
  if (features->value.c() != block.reduce.weight->value.c()) {
    throw Error(ErrorKind::BadShape, "se_block: expected " + std::to_string(block.reduce.weight->value.c()) +
                                         " channels, got " + features->value.shape().str());
  }
  auto pooled = ops::global_avg_pool(features);
  auto hidden = block.reduce(pooled);
  hidden = block.activation == Activation::relu ? ops::relu(hidden) : ops::silu(hidden);
  return ops::sigmoid(block.expand(hidden));
}

template <typename Scalar>
Var<Scalar> se_block(const Var<Scalar>& features, const SeBlock<Scalar>& block) {
  return ops::channel_scale(features, se_gate(features, block));
}

template <typename Scalar>
DecoderStage<Scalar>::DecoderStage(ParameterStore<Scalar>& store, const std::string& name,
                                   int in_channels, int skip_channels, int out, int se_reduction,
                                   int norm_groups, double p)
    : up(store, name + ".up", in_channels, out),
      conv(store, name + ".conv", out + skip_channels, out, 3, 1, false),
      norm(store, name + ".norm", out, norm_groups),
      se(store, name + ".se", out, out / se_reduction, Activation::relu),
      dropout_p(p),
      out_channels(out) {}

template <typename Scalar>
Var<Scalar> decoder_stage(const Var<Scalar>& up_input, const Var<Scalar>& skip,
                          const DecoderStage<Scalar>& stage, const ForwardContext& ctx) {
  const Shape& us = up_input->value.shape();
  const Shape& ss = skip->value.shape();
  if (us.n != ss.n || 2 * us.h != ss.h || 2 * us.w != ss.w) {
    throw Error(ErrorKind::BadShape, "decoder_stage: up " + us.str() + " must be half of skip " + ss.str());
  }
  auto x = stage.up(up_input);
  x = ops::concat_channels(x, skip);
  x = ops::relu(stage.norm(stage.conv(x)));
  x = ops::dropout(x, stage.dropout_p, ctx.training, ctx.rng);
  return se_block(x, stage.se);
}

namespace {

/// Plain UNet encoder: stride-2 stem pair, then four max-pool + double-conv levels.
template <typename Scalar>
class TinyUNetEncoder final : public Encoder<Scalar> {
 public:
  TinyUNetEncoder(ParameterStore<Scalar>& store, int in_channels) {
    int prev = in_channels;
    for (int level = 0; level < 5; ++level) {
      const int c = kTinyUNetChannels[static_cast<std::size_t>(level)];
      const std::string name = "encoder.level" + std::to_string(level);
      first_[static_cast<std::size_t>(level)] = Conv2d<Scalar>(store, name + ".conv0", prev, c, 3, level == 0 ? 2 : 1);
      second_[static_cast<std::size_t>(level)] = Conv2d<Scalar>(store, name + ".conv1", c, c, 3);
      prev = c;
    }
  }

  std::array<Var<Scalar>, 5> operator()(const Var<Scalar>& x, const ForwardContext&) const override {
    std::array<Var<Scalar>, 5> features;
    Var<Scalar> h = x;
    for (std::size_t level = 0; level < 5; ++level) {
      if (level > 0) h = ops::max_pool2(h);
      h = ops::relu(first_[level](h));
      h = ops::relu(second_[level](h));
      features[level] = h;
    }
    return features;
  }

  std::array<int, 5> channels() const override { return kTinyUNetChannels; }

 private:
  std::array<Conv2d<Scalar>, 5> first_;
  std::array<Conv2d<Scalar>, 5> second_;
};

template <typename Scalar>
struct MBConv {
  bool has_expand = false;
  bool residual = false;
  Conv2d<Scalar> expand;
  BatchNorm<Scalar> expand_bn;
  Conv2d<Scalar> depthwise;
  BatchNorm<Scalar> depthwise_bn;
  SeBlock<Scalar> se;
  Conv2d<Scalar> project;
  BatchNorm<Scalar> project_bn;

  MBConv(ParameterStore<Scalar>& store, const std::string& name, int cin, int cout, int expand_ratio,
         int kernel, int stride) {
    const int mid = cin * expand_ratio;
    has_expand = expand_ratio != 1;
    residual = stride == 1 && cin == cout;
    if (has_expand) {
      expand = Conv2d<Scalar>(store, name + ".expand", cin, mid, 1, 1, false);
      expand_bn = BatchNorm<Scalar>(store, name + ".expand_bn", mid);
    }
    depthwise = Conv2d<Scalar>(store, name + ".depthwise", mid, mid, kernel, stride, false, true);
    depthwise_bn = BatchNorm<Scalar>(store, name + ".depthwise_bn", mid);
    se = SeBlock<Scalar>(store, name + ".se", mid, std::max(1, cin / 4), Activation::silu);
    project = Conv2d<Scalar>(store, name + ".project", mid, cout, 1, 1, false);
    project_bn = BatchNorm<Scalar>(store, name + ".project_bn", cout);
  }

  Var<Scalar> operator()(const Var<Scalar>& x, bool training) const {
    Var<Scalar> h = x;
    if (has_expand) h = ops::silu(expand_bn(expand(h), training));
    h = ops::silu(depthwise_bn(depthwise(h), training));
    h = se_block(h, se);
    h = project_bn(project(h), training);
    return residual ? ops::add(h, x) : h;
  }
};

/// EfficientNet-B3 (width 1.2, depth 1.4) without the classification head.
template <typename Scalar>
class EffNetB3Encoder final : public Encoder<Scalar> {
 public:
  struct StageSpec {
    int expand, kernel, stride, channels, repeats;
  };
  static constexpr std::array<StageSpec, 7> kStages{{{1, 3, 1, 24, 2},
                                                     {6, 3, 2, 32, 3},
                                                     {6, 5, 2, 48, 3},
                                                     {6, 3, 2, 96, 5},
                                                     {6, 5, 1, 136, 5},
                                                     {6, 5, 2, 232, 6},
                                                     {6, 3, 1, 384, 2}}};
  static constexpr int kStemChannels = 40;
  // Stage index (0-based) whose output feeds each pyramid level.
  static constexpr std::array<int, 5> kTaps{0, 1, 2, 4, 6};

  EffNetB3Encoder(ParameterStore<Scalar>& store, int in_channels)
      : stem_(store, "encoder.stem", in_channels, kStemChannels, 3, 2, false),
        stem_bn_(store, "encoder.stem_bn", kStemChannels) {
    int prev = kStemChannels;
    for (std::size_t s = 0; s < kStages.size(); ++s) {
      const StageSpec& spec = kStages[s];
      std::vector<MBConv<Scalar>> blocks;
      for (int r = 0; r < spec.repeats; ++r) {
        const std::string name = "encoder.stage" + std::to_string(s) + ".block" + std::to_string(r);
        blocks.emplace_back(store, name, prev, spec.channels, spec.expand, spec.kernel, r == 0 ? spec.stride : 1);
        prev = spec.channels;
      }
      stages_.push_back(std::move(blocks));
    }
  }

  std::array<Var<Scalar>, 5> operator()(const Var<Scalar>& x, const ForwardContext& ctx) const override {
    std::array<Var<Scalar>, 5> features;
    Var<Scalar> h = ops::silu(stem_bn_(stem_(x), ctx.training));
    std::size_t tap = 0;
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      for (const auto& block : stages_[s]) h = block(h, ctx.training);
      if (tap < kTaps.size() && static_cast<int>(s) == kTaps[tap]) features[tap++] = h;
    }
    return features;
  }

  std::array<int, 5> channels() const override {
    std::array<int, 5> c{};
    for (std::size_t i = 0; i < kTaps.size(); ++i) c[i] = kStages[static_cast<std::size_t>(kTaps[i])].channels;
    return c;
  }

 private:
  Conv2d<Scalar> stem_;
  BatchNorm<Scalar> stem_bn_;
  std::vector<std::vector<MBConv<Scalar>>> stages_;
};

}  // namespace

template <typename Scalar>
std::unique_ptr<Encoder<Scalar>> make_encoder(ParameterStore<Scalar>& store, const ModelConfig& cfg) {
  if (cfg.backbone == Backbone::tiny_unet) {
    return std::make_unique<TinyUNetEncoder<Scalar>>(store, cfg.projection_channels);
  }
  return std::make_unique<EffNetB3Encoder<Scalar>>(store, cfg.projection_channels);
}

}  // namespace nn

namespace {

template <typename Scalar>
void load_pretrained_encoder(const LunarDepthNet<Scalar>& model, const ModelConfig& cfg) {
  if (!cfg.pretrained_encoder) return;
  if (cfg.pretrained_path.empty() || !std::filesystem::exists(cfg.pretrained_path)) {
    std::cerr << "warning: pretrained encoder weights unavailable ('" << cfg.pretrained_path
              << "'); using seeded He initialization\n";
    return;
  }
  std::map<std::string, Tensor<float>> loaded;
  for (auto& [name, t] : read_tensor_file(cfg.pretrained_path)) loaded.emplace(name, std::move(t));
  auto assign = [&](const std::string& name, Tensor<Scalar>& dst) {
    auto it = loaded.find(name);
    if (it == loaded.end()) return;
    const Tensor<float>& src = it->second;
    if (src.shape() == dst.shape()) {
      dst = src.template cast<Scalar>();
    } else if (src.n() == dst.n() && src.h() == dst.h() && src.w() == dst.w() && dst.c() != src.c()) {
      // First conv trained on RGB: average over input channels and tile.
      for (int o = 0; o < dst.n(); ++o)
        for (int i = 0; i < dst.h(); ++i)
          for (int j = 0; j < dst.w(); ++j) {
            double mean = 0;
            for (int c = 0; c < src.c(); ++c) mean += src(o, c, i, j);
            mean /= src.c();
            for (int c = 0; c < dst.c(); ++c) dst(o, c, i, j) = static_cast<Scalar>(mean);
          }
    } else {
      throw Error(ErrorKind::ConfigMismatch, "pretrained tensor '" + name + "' has shape " + src.shape().str());
    }
  };
  for (const auto& p : model.parameters()) {
    if (p.name.rfind("encoder.", 0) == 0) assign(p.name, p.var->value);
  }
  for (const auto& [name, t] : model.buffers()) {
    if (name.rfind("encoder.", 0) == 0) assign(name, *t);
  }
}

}  // namespace

template <typename Scalar>
LunarDepthNet<Scalar>::LunarDepthNet(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg), store_(seed) {
  cfg_.validate();
  projection_ = nn::Conv2d<Scalar>(store_, "projection", cfg_.in_channels, cfg_.projection_channels, 1);
  encoder_ = nn::make_encoder(store_, cfg_);
  const auto enc = encoder_->channels();
  int prev = enc[4];
  for (std::size_t s = 0; s < 4; ++s) {
    const int out = cfg_.decoder_channels[s];
    decoder_[s] = nn::DecoderStage<Scalar>(store_, "decoder.stage" + std::to_string(s), prev, enc[3 - s], out,
                                           cfg_.se_reduction, cfg_.norm_groups, cfg_.dropout_p);
    prev = out;
  }
  head_up_ = nn::ConvTranspose2x2<Scalar>(store_, "head.up", prev, prev);
  head_out_ = nn::Conv2d<Scalar>(store_, "head.out", prev, 1, 1);
  scale_hidden_ = nn::Conv2d<Scalar>(store_, "scale_head.hidden", enc[4], cfg_.scale_head_hidden, 1);
  scale_out_ = nn::Conv2d<Scalar>(store_, "scale_head.out", cfg_.scale_head_hidden, 2, 1);
  load_pretrained_encoder(*this, cfg_);
}

template <typename Scalar>
GraphOutput<Scalar> LunarDepthNet<Scalar>::forward_graph(const Tensor<Scalar>& images,
                                                         const ForwardContext& ctx) const {
  const Shape& s = images.shape();
  if (s.n <= 0 || s.c != cfg_.in_channels || s.h <= 0 || s.w <= 0 || s.h % 32 != 0 || s.w % 32 != 0) {
    throw Error(ErrorKind::BadShape, "forward expects [B,1,H,W] with H, W multiples of 32, got " + s.str());
  }
  if (!images.vec().allFinite()) throw Error(ErrorKind::NonFiniteInput, "input images contain NaN/Inf");

  auto x = projection_(constant(images));
  const auto features = (*encoder_)(x, ctx);
  Var<Scalar> h = features[4];
  for (std::size_t s = 0; s < 4; ++s) h = nn::decoder_stage(h, features[3 - s], decoder_[s], ctx);
  h = ops::relu(head_up_(h));
  GraphOutput<Scalar> out;
  out.elevation = ops::sigmoid(head_out_(h));
  out.scale_params = scale_out_(ops::relu(scale_hidden_(ops::global_avg_pool(features[4]))));
  return out;
}

template <typename Scalar>
ModelOutput<Scalar> LunarDepthNet<Scalar>::forward(const Tensor<Scalar>& images, bool training,
                                                   std::mt19937_64* rng) const {
  NoGradGuard guard;
  auto g = forward_graph(images, ForwardContext{training, rng});
  return {std::move(g.elevation->value), std::move(g.scale_params->value)};
}

template <typename Scalar>
std::int64_t LunarDepthNet<Scalar>::parameter_count() const {
  std::int64_t total = 0;
  for (const auto& p : store_.parameters()) total += p.var->value.size();
  return total;
}

template <typename Scalar>
std::uint64_t LunarDepthNet<Scalar>::parameter_hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&](const Tensor<Scalar>& t) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(t.data());
    for (std::size_t i = 0; i < static_cast<std::size_t>(t.size()) * sizeof(Scalar); ++i) {
      h = (h ^ bytes[i]) * 1099511628211ULL;
    }
  };
  for (const auto& p : store_.parameters()) mix(p.var->value);
  for (const auto& b : store_.buffers()) mix(*b.second);
  return h;
}

template <typename Scalar>
void LunarDepthNet<Scalar>::zero_grad() const {
  for (const auto& p : store_.parameters()) p.var->grad = Tensor<Scalar>();
}

template <typename Scalar>
LunarDepthNet<Scalar> build_model(const ModelConfig& cfg, std::uint64_t seed, bool verbose) {
  LunarDepthNet<Scalar> model(cfg, seed);
  if (verbose) {
    std::cerr << "built " << to_string(cfg.backbone) << " with " << model.parameter_count() << " parameters\n";
  }
  return model;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kTensorMagic[8] = {'L', 'D', 'N', 'T', 'E', 'N', 'S', '1'};

template <typename T>
void write_pod(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in, const std::filesystem::path& path) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw Error(ErrorKind::CorruptCheckpoint, "truncated tensor file " + path.string());
  }
  return v;
}

bool same_architecture(ModelConfig a, ModelConfig b) {
  a.pretrained_encoder = b.pretrained_encoder = false;
  a.pretrained_path = b.pretrained_path = "";
  return a == b;
}

}  // namespace

void write_tensor_file(const std::filesystem::path& path,
                       const std::vector<std::pair<std::string, Tensor<float>>>& tensors) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::IoFailure, "cannot write " + path.string());
  out.write(kTensorMagic, sizeof(kTensorMagic));
  write_pod(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    write_pod(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    for (int d : {t.n(), t.c(), t.h(), t.w()}) write_pod(out, static_cast<std::int32_t>(d));
    out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
  }
  if (!out) throw Error(ErrorKind::IoFailure, "short write to " + path.string());
}

std::vector<std::pair<std::string, Tensor<float>>> read_tensor_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::IoFailure, "cannot open " + path.string());
  char magic[sizeof(kTensorMagic)];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kTensorMagic, sizeof(magic)) != 0) {
    throw Error(ErrorKind::CorruptCheckpoint, "bad magic in " + path.string());
  }
  const auto count = read_pod<std::uint32_t>(in, path);
  std::vector<std::pair<std::string, Tensor<float>>> tensors;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = read_pod<std::uint32_t>(in, path);
    if (len > 4096) throw Error(ErrorKind::CorruptCheckpoint, "implausible tensor name length");
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw Error(ErrorKind::CorruptCheckpoint, "truncated name");
    Shape s;
    s.n = read_pod<std::int32_t>(in, path);
    s.c = read_pod<std::int32_t>(in, path);
    s.h = read_pod<std::int32_t>(in, path);
    s.w = read_pod<std::int32_t>(in, path);
    if (s.n < 0 || s.c < 0 || s.h < 0 || s.w < 0 || s.size() > (std::int64_t{1} << 32)) {
      throw Error(ErrorKind::CorruptCheckpoint, "bad shape for " + name);
    }
    Tensor<float> t(s);
    if (!in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)))) {
      throw Error(ErrorKind::CorruptCheckpoint, "truncated payload for " + name);
    }
    tensors.emplace_back(std::move(name), std::move(t));
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw Error(ErrorKind::CorruptCheckpoint, "trailing bytes in " + path.string());
  }
  return tensors;
}

nlohmann::json read_checkpoint_sidecar(const std::filesystem::path& dir) {
  const auto path = dir / "checkpoint.json";
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::IoFailure, "missing checkpoint sidecar " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::CorruptCheckpoint, path.string() + ": " + e.what());
  }
}

template <typename Scalar>
void save_weights(const LunarDepthNet<Scalar>& model, const std::filesystem::path& dir,
                  const nlohmann::json& extra) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::IoFailure, "cannot create " + dir.string() + ": " + ec.message());
  std::vector<std::pair<std::string, Tensor<float>>> tensors;
  for (const auto& p : model.parameters()) tensors.emplace_back(p.name, p.var->value.template cast<float>());
  for (const auto& [name, t] : model.buffers()) tensors.emplace_back(name, t->template cast<float>());
  write_tensor_file(dir / "weights.bin", tensors);

  nlohmann::json sidecar = extra;
  sidecar["config"] = model.config();
  sidecar["parameter_count"] = model.parameter_count();
  sidecar["tensor_count"] = tensors.size();
  sidecar["weights"] = "weights.bin";
  std::ofstream out(dir / "checkpoint.json", std::ios::trunc);
  if (!out) throw Error(ErrorKind::IoFailure, "cannot write checkpoint sidecar in " + dir.string());
  out << sidecar.dump(2) << '\n';
}

template <typename Scalar>
void load_weights_into(LunarDepthNet<Scalar>& model, const std::filesystem::path& dir) {
  const auto sidecar = read_checkpoint_sidecar(dir);
  ModelConfig stored;
  try {
    stored = sidecar.at("config").get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::CorruptCheckpoint, std::string("sidecar config: ") + e.what());
  }
  if (!same_architecture(stored, model.config())) {
    throw Error(ErrorKind::ConfigMismatch, "checkpoint is " + to_string(stored.backbone) + " with a different config than the target " +
                                               to_string(model.config().backbone) + " model");
  }
  std::map<std::string, Tensor<float>> loaded;
  for (auto& [name, t] : read_tensor_file(dir / "weights.bin")) loaded.emplace(name, std::move(t));
  auto take = [&](const std::string& name, Tensor<Scalar>& dst) {
    auto it = loaded.find(name);
    if (it == loaded.end()) throw Error(ErrorKind::CorruptCheckpoint, "missing tensor " + name);
    if (it->second.shape() != dst.shape()) {
      throw Error(ErrorKind::CorruptCheckpoint, "shape mismatch for " + name);
    }
    dst = it->second.template cast<Scalar>();
    loaded.erase(it);
  };
  for (const auto& p : model.parameters()) take(p.name, p.var->value);
  for (const auto& [name, t] : model.buffers()) take(name, *t);
  if (!loaded.empty()) throw Error(ErrorKind::CorruptCheckpoint, "unexpected tensor " + loaded.begin()->first);
  if (sidecar.value("parameter_count", std::int64_t{-1}) != model.parameter_count()) {
    throw Error(ErrorKind::CorruptCheckpoint, "sidecar parameter count disagrees with the weights");
  }
}

template <typename Scalar>
LunarDepthNet<Scalar> load_weights(const std::filesystem::path& dir) {
  const auto sidecar = read_checkpoint_sidecar(dir);
  ModelConfig cfg;
  try {
    cfg = sidecar.at("config").get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::CorruptCheckpoint, std::string("sidecar config: ") + e.what());
  }
  cfg.pretrained_encoder = false;  // weights come from the checkpoint
  LunarDepthNet<Scalar> model(cfg, 0);
  load_weights_into(model, dir);
  return model;
}

#define LUNARDEM_INSTANTIATE_MODEL(S)                                                                    \
  template class ParameterStore<S>;                                                                       \
  template struct nn::Conv2d<S>;                                                                          \
  template struct nn::ConvTranspose2x2<S>;                                                                \
  template struct nn::GroupNorm<S>;                                                                       \
  template struct nn::BatchNorm<S>;                                                                       \
  template struct nn::SeBlock<S>;                                                                         \
  template struct nn::DecoderStage<S>;                                                                    \
  template Var<S> nn::se_block(const Var<S>&, const nn::SeBlock<S>&);                                     \
  template Var<S> nn::se_gate(const Var<S>&, const nn::SeBlock<S>&);                                      \
  template Var<S> nn::decoder_stage(const Var<S>&, const Var<S>&, const nn::DecoderStage<S>&,             \
                                    const ForwardContext&);                                               \
  template std::unique_ptr<nn::Encoder<S>> nn::make_encoder(ParameterStore<S>&, const ModelConfig&);      \
  template class LunarDepthNet<S>;                                                                        \
  template LunarDepthNet<S> build_model(const ModelConfig&, std::uint64_t, bool);                         \
  template void save_weights(const LunarDepthNet<S>&, const std::filesystem::path&, const nlohmann::json&); \
  template LunarDepthNet<S> load_weights(const std::filesystem::path&);                                   \
  template void load_weights_into(LunarDepthNet<S>&, const std::filesystem::path&);

LUNARDEM_INSTANTIATE_MODEL(float)
LUNARDEM_INSTANTIATE_MODEL(double)

}  // namespace lunardem
