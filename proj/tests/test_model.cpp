#include "lunardem/model.hpp"
#include "test_support.hpp"

#include <chrono>

using namespace lunardem;
using lunardem::testing::expect_error;
using lunardem::testing::random_tensor;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.backbone = Backbone::tiny_unet;
  return cfg;
}

std::int64_t conv_params(std::int64_t cin, std::int64_t cout, std::int64_t k, bool bias = true) {
  return cout * cin * k * k + (bias ? cout : 0);
}

// Independent parameter-count formula for the plain-conv configuration.
std::int64_t tiny_unet_param_formula(const ModelConfig& cfg) {
  std::int64_t total = conv_params(1, cfg.projection_channels, 1);
  std::int64_t prev = cfg.projection_channels;
  for (int c : nn::kTinyUNetChannels) {
    total += conv_params(prev, c, 3) + conv_params(c, c, 3);
    prev = c;
  }
  const auto& enc = nn::kTinyUNetChannels;
  for (int s = 0; s < 4; ++s) {
    const std::int64_t out = cfg.decoder_channels[static_cast<std::size_t>(s)];
    const std::int64_t skip = enc[static_cast<std::size_t>(3 - s)];
    const std::int64_t squeeze = out / cfg.se_reduction;
    total += prev * out * 4 + out;                             // transposed conv
    total += conv_params(out + skip, out, 3, false);           // fused conv
    total += 2 * out;                                          // group norm
    total += conv_params(out, squeeze, 1) + conv_params(squeeze, out, 1);
    prev = out;
  }
  total += prev * prev * 4 + prev + conv_params(prev, 1, 1);   // elevation head
  total += conv_params(enc[4], cfg.scale_head_hidden, 1) + conv_params(cfg.scale_head_hidden, 2, 1);
  return total;
}

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

}  // namespace

TEST_CASE("tiny_unet parameter count matches the closed-form formula and stays under 2M") {
  auto model = build_model<float>(tiny_config(), 1);
  CHECK(model.parameter_count() == tiny_unet_param_formula(tiny_config()));
  CHECK(model.parameter_count() < 2'000'000);
}

TEST_CASE("invalid configurations are rejected") {
  ModelConfig cfg = tiny_config();
  cfg.se_reduction = 24;  // does not divide 32
  expect_error(ErrorKind::BadConfig, [&] { build_model<float>(cfg, 0); });
  cfg = tiny_config();
  cfg.dropout_p = 1.0;
  expect_error(ErrorKind::BadConfig, [&] { build_model<float>(cfg, 0); });
  cfg = tiny_config();
  cfg.decoder_channels = {256, 128, 64, 20};
  expect_error(ErrorKind::BadConfig, [&] { build_model<float>(cfg, 0); });
}

TEST_CASE("same init seed gives identical parameters") {
  auto a = build_model<float>(tiny_config(), 42);
  auto b = build_model<float>(tiny_config(), 42);
  auto c = build_model<float>(tiny_config(), 43);
  CHECK(a.parameter_hash() == b.parameter_hash());
  CHECK(a.parameter_hash() != c.parameter_hash());
}

TEST_CASE("forward shape, range and eval determinism") {
  std::mt19937_64 rng(3);
  for (Backbone bb : {Backbone::tiny_unet, Backbone::effnet_b3}) {
    ModelConfig cfg;
    cfg.backbone = bb;
    auto model = build_model<float>(cfg, 7);
    auto images = random_tensor<float>({2, 1, 64, 64}, rng);
    auto out = model.forward(images);
    CHECK(out.elevation.shape() == Shape{2, 1, 64, 64});
    CHECK(out.scale_params.shape() == Shape{2, 2, 1, 1});
    CHECK(out.elevation.vec().minCoeff() > 0.0f);
    CHECK(out.elevation.vec().maxCoeff() < 1.0f);
    auto again = model.forward(images);
    CHECK(again.elevation.vec() == out.elevation.vec());
    CHECK(again.scale_params.vec() == out.scale_params.vec());

    const auto hash_before = model.parameter_hash();
    std::mt19937_64 drop(1);
    auto train_out = model.forward(images, true, &drop);
    CHECK(train_out.elevation.shape() == out.elevation.shape());
    if (bb == Backbone::tiny_unet) {
      CHECK(model.parameter_hash() == hash_before);  // no buffers to update
      CHECK(train_out.elevation.vec() != out.elevation.vec());  // dropout active
    }
  }
}

TEST_CASE("forward rejects bad shapes and non-finite input") {
  auto model = build_model<float>(tiny_config(), 0);
  expect_error(ErrorKind::BadShape, [&] { model.forward(Tensor<float>(1, 1, 48, 64)); });
  expect_error(ErrorKind::BadShape, [&] { model.forward(Tensor<float>(1, 2, 64, 64)); });
  Tensor<float> bad(1, 1, 64, 64);
  bad(0, 0, 3, 3) = std::numeric_limits<float>::quiet_NaN();
  expect_error(ErrorKind::NonFiniteInput, [&] { model.forward(bad); });
}

TEST_CASE("resolution invariant across input sizes") {
  auto model = build_model<float>(tiny_config(), 5);
  std::mt19937_64 rng(9);
  for (auto [h, w] : {std::pair{32, 32}, {96, 64}, {128, 96}}) {
    auto out = model.forward(random_tensor<float>({1, 1, h, w}, rng));
    CHECK(out.elevation.shape() == Shape{1, 1, h, w});
  }
}

TEST_CASE("SE block matches a scalar pooled-MLP gate oracle") {
  ParameterStore<double> store(11);
  nn::SeBlock<double> se(store, "se", 8, 2, nn::Activation::relu);
  std::mt19937_64 rng(12);
  // Nonzero biases so the oracle covers them.
  se.reduce.bias->value = random_tensor({1, 2, 1, 1}, rng);
  se.expand.bias->value = random_tensor({1, 8, 1, 1}, rng);
  auto x = constant(random_tensor({2, 8, 3, 4}, rng, -2, 2));
  auto y = nn::se_block(x, se);

  double worst = 0;
  for (int n = 0; n < 2; ++n) {
    std::vector<double> pooled(8, 0.0), hidden(2, 0.0);
    for (int c = 0; c < 8; ++c) {
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 4; ++j) pooled[c] += x->value(n, c, i, j) / 12.0;
    }
    for (int k = 0; k < 2; ++k) {
      double acc = se.reduce.bias->value.vec()[k];
      for (int c = 0; c < 8; ++c) acc += se.reduce.weight->value(k, c, 0, 0) * pooled[c];
      hidden[k] = std::max(0.0, acc);
    }
    for (int c = 0; c < 8; ++c) {
      double acc = se.expand.bias->value.vec()[c];
      for (int k = 0; k < 2; ++k) acc += se.expand.weight->value(c, k, 0, 0) * hidden[k];
      const double gate = sigmoid(acc);
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 4; ++j) {
          worst = std::max(worst, std::abs(y->value(n, c, i, j) - gate * x->value(n, c, i, j)));
          CHECK(std::abs(y->value(n, c, i, j)) <= std::abs(x->value(n, c, i, j)));
          if (x->value(n, c, i, j) != 0.0) CHECK((y->value(n, c, i, j) > 0) == (x->value(n, c, i, j) > 0));
        }
    }
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("SE block saturated gate is the identity") {
  ParameterStore<double> store(1);
  nn::SeBlock<double> se(store, "se", 4, 1, nn::Activation::relu);
  se.expand.weight->value.set_zero();
  se.expand.bias->value.vec().setConstant(60.0);
  std::mt19937_64 rng(2);
  auto x = constant(random_tensor({1, 4, 5, 5}, rng, -3, 3));
  auto y = nn::se_block(x, se);
  CHECK((y->value.vec() - x->value.vec()).cwiseAbs().maxCoeff() < 1e-6);
  expect_error(ErrorKind::BadShape, [&] { nn::se_block(constant(Tensor<double>(1, 3, 2, 2)), se); });
}

TEST_CASE("decoder stage shapes and determinism") {
  ParameterStore<float> store(4);
  nn::DecoderStage<float> stage(store, "d", 16, 8, 32, 16, 8, 0.0);
  std::mt19937_64 rng(5);
  auto up = constant(random_tensor<float>({2, 16, 16, 16}, rng));
  auto skip = constant(random_tensor<float>({2, 8, 32, 32}, rng));
  auto a = nn::decoder_stage(up, skip, stage, {});
  auto b = nn::decoder_stage(up, skip, stage, {});
  CHECK(a->value.shape() == Shape{2, 32, 32, 32});
  CHECK(a->value.vec() == b->value.vec());
  expect_error(ErrorKind::BadShape, [&] {
    nn::decoder_stage(up, constant(Tensor<float>(2, 8, 30, 32)), stage, {});
  });
}

TEST_CASE("decoder stage on zero inputs matches a scalar forward oracle") {
  ParameterStore<double> store(6);
  const int cin = 4, cskip = 2, cout = 8, groups = 2, squeeze = 2;
  nn::DecoderStage<double> stage(store, "d", cin, cskip, cout, cout / squeeze, groups, 0.0);
  std::mt19937_64 rng(7);
  stage.up.bias->value = random_tensor({1, cout, 1, 1}, rng);
  stage.norm.gamma->value = random_tensor({1, cout, 1, 1}, rng, 0.5, 1.5);
  stage.norm.beta->value = random_tensor({1, cout, 1, 1}, rng);
  auto y = nn::decoder_stage(constant(Tensor<double>(1, cin, 2, 2)), constant(Tensor<double>(1, cskip, 4, 4)),
                             stage, {});

  // Transposed conv of zeros leaves only its bias; the skip half is zero.
  const auto& bup = stage.up.bias->value.vec();
  const auto& w = stage.conv.weight->value;
  double conv[8][4][4];
  for (int co = 0; co < cout; ++co)
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) {
        double acc = 0;
        for (int ci = 0; ci < cout; ++ci)
          for (int ki = 0; ki < 3; ++ki)
            for (int kj = 0; kj < 3; ++kj) {
              const int ii = i + ki - 1, jj = j + kj - 1;
              if (ii < 0 || ii >= 4 || jj < 0 || jj >= 4) continue;
              acc += w(co, ci, ki, kj) * bup[ci];
            }
        conv[co][i][j] = acc;
      }
  double act[8][4][4];
  const int cg = cout / groups;
  for (int g = 0; g < groups; ++g) {
    double mean = 0, var = 0;
    for (int c = g * cg; c < (g + 1) * cg; ++c)
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) mean += conv[c][i][j] / (cg * 16);
    for (int c = g * cg; c < (g + 1) * cg; ++c)
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) var += std::pow(conv[c][i][j] - mean, 2) / (cg * 16);
    for (int c = g * cg; c < (g + 1) * cg; ++c)
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) {
          const double v = (conv[c][i][j] - mean) / std::sqrt(var + 1e-5) * stage.norm.gamma->value.vec()[c] +
                           stage.norm.beta->value.vec()[c];
          act[c][i][j] = std::max(0.0, v);
        }
  }
  double worst = 0;
  std::vector<double> pooled(cout, 0.0), hidden(squeeze, 0.0);
  for (int c = 0; c < cout; ++c)
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) pooled[c] += act[c][i][j] / 16;
  for (int k = 0; k < squeeze; ++k) {
    double acc = stage.se.reduce.bias->value.vec()[k];
    for (int c = 0; c < cout; ++c) acc += stage.se.reduce.weight->value(k, c, 0, 0) * pooled[c];
    hidden[k] = std::max(0.0, acc);
  }
  for (int c = 0; c < cout; ++c) {
    double acc = stage.se.expand.bias->value.vec()[c];
    for (int k = 0; k < squeeze; ++k) acc += stage.se.expand.weight->value(c, k, 0, 0) * hidden[k];
    const double gate = sigmoid(acc);
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) worst = std::max(worst, std::abs(y->value(0, c, i, j) - gate * act[c][i][j]));
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("checkpoint round trip reproduces outputs bit-exactly") {
  lunardem::testing::TempDir dir("ckpt");
  auto model = build_model<float>(tiny_config(), 21);
  std::mt19937_64 rng(8);
  auto probe = random_tensor<float>({1, 1, 64, 64}, rng);
  save_weights(model, dir.path() / "ckpt", {{"epoch", 3}});
  auto loaded = load_weights<float>(dir.path() / "ckpt");
  CHECK(loaded.parameter_hash() == model.parameter_hash());
  CHECK(loaded.forward(probe).elevation.vec() == model.forward(probe).elevation.vec());

  auto sidecar = read_checkpoint_sidecar(dir.path() / "ckpt");
  CHECK(sidecar["parameter_count"].get<std::int64_t>() == loaded.parameter_count());
  CHECK(sidecar["epoch"] == 3);

  auto effnet = build_model<float>(ModelConfig{}, 1);
  expect_error(ErrorKind::ConfigMismatch, [&] { load_weights_into(effnet, dir.path() / "ckpt"); });

  std::filesystem::resize_file(dir.path() / "ckpt" / "weights.bin", 100);
  expect_error(ErrorKind::CorruptCheckpoint, [&] { load_weights<float>(dir.path() / "ckpt"); });
}

TEST_CASE("effnet_b3 encoder pyramid and pretrained fallback") {
  ModelConfig cfg;
  cfg.pretrained_encoder = true;
  cfg.pretrained_path = "/nonexistent/weights.bin";
  auto model = build_model<float>(cfg, 3);  // warns, seeded init
  auto same = build_model<float>(ModelConfig{}, 3);
  CHECK(model.parameter_hash() == same.parameter_hash());
  CHECK(model.encoder_channels() == std::array<int, 5>{24, 32, 48, 136, 384});
  CHECK(model.parameter_count() > 10'000'000);
}

TEST_CASE("pretrained encoder tensors are loaded, RGB stems averaged") {
  lunardem::testing::TempDir dir("pre");
  auto donor = build_model<float>(ModelConfig{}, 99);
  std::vector<std::pair<std::string, Tensor<float>>> tensors;
  for (const auto& p : donor.parameters()) {
    if (p.name.rfind("encoder.", 0) == 0) tensors.emplace_back(p.name, p.var->value);
  }
  write_tensor_file(dir / "enc.bin", tensors);
  ModelConfig cfg;
  cfg.pretrained_encoder = true;
  cfg.pretrained_path = (dir / "enc.bin").string();
  auto model = build_model<float>(cfg, 1);
  for (std::size_t i = 0; i < model.parameters().size(); ++i) {
    const auto& p = model.parameters()[i];
    if (p.name.rfind("encoder.", 0) == 0) {
      CHECK(p.var->value.vec() == donor.parameters()[i].var->value.vec());
    }
  }
}
