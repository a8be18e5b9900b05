#include "lunardem/synthgen.hpp"
#include "lunardem/train.hpp"

#include "store_fixture.hpp"
#include "test_support.hpp"

#include <fstream>

using namespace lunardem;
using namespace lunardem::testing;

namespace {

ModelConfig tiny(double dropout = 0.2) {
  ModelConfig m;
  m.backbone = Backbone::tiny_unet;
  m.dropout_p = dropout;
  return m;
}

// Independent SSIM of a constant prediction c against y over valid 11x11 windows.
double ssim_loss_constant(double c, const RowMatrix<float>& y) {
  const int k = 11;
  double g[k], sum = 0;
  for (int i = 0; i < k; ++i) sum += g[i] = std::exp(-(i - 5) * (i - 5) / (2 * 1.5 * 1.5));
  for (double& v : g) v /= sum;
  const double c1 = 1e-4, c2 = 9e-4;
  double acc = 0;
  int count = 0;
  for (int r = 0; r + k <= y.rows(); ++r)
    for (int s = 0; s + k <= y.cols(); ++s) {
      double mu = 0, e2 = 0;
      for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) {
          const double w = g[i] * g[j], v = y(r + i, s + j);
          mu += w * v;
          e2 += w * v * v;
        }
      const double var = e2 - mu * mu;
      acc += (2 * c * mu + c1) / (c * c + mu * mu + c1) * c2 / (var + c2);
      ++count;
    }
  return 1.0 - acc / count;
}

double l1_constant(double c, const TileRecord& t) {
  double s = 0, n = 0;
  for (int r = 0; r < t.dem.rows(); ++r)
    for (int q = 0; q < t.dem.cols(); ++q)
      if (t.mask(r, q)) s += std::abs(c - t.dem(r, q)), n += 1;
  return s / n;
}

double grad_constant(const TileRecord& t) {
  double sx = 0, nx = 0, sy = 0, ny = 0;
  for (int r = 0; r < t.dem.rows(); ++r)
    for (int q = 0; q < t.dem.cols(); ++q) {
      if (q + 1 < t.dem.cols() && t.mask(r, q) && t.mask(r, q + 1)) sx += std::abs(t.dem(r, q + 1) - t.dem(r, q)), nx += 1;
      if (r + 1 < t.dem.rows() && t.mask(r, q) && t.mask(r + 1, q)) sy += std::abs(t.dem(r + 1, q) - t.dem(r, q)), ny += 1;
    }
  return sx / nx + sy / ny;
}

}  // namespace

TEST_CASE("cosine schedule") {
  TrainConfig cfg;
  CHECK(std::abs(cosine_lr(0, cfg) - 5e-5) < 1e-12);
  CHECK(std::abs(cosine_lr(cfg.epochs, cfg)) < 1e-12);
  CHECK(std::abs(cosine_lr(cfg.epochs / 2, cfg) - 2.5e-5) < 1e-12);
  expect_error(ErrorKind::OutOfRange, [&] { cosine_lr(-1, cfg); });
  expect_error(ErrorKind::OutOfRange, [&] { cosine_lr(cfg.epochs + 1, cfg); });
  cfg.lr_min = 1e-5;
  cfg.epochs = 7;
  CHECK(std::abs(cosine_lr(7, cfg) - 1e-5) < 1e-15);
  double prev = 1;
  for (int t = 0; t <= 7; ++t) {
    const double v = cosine_lr(t, cfg);
    CHECK(v <= prev);
    prev = v;
  }
}

TEST_CASE("train config validation and json") {
  TrainConfig cfg = TrainConfig::desk();
  CHECK(cfg.batch_size == 8);
  CHECK(cfg.epochs == 20);
  cfg.seed = 99;
  cfg.clip_norm = 1.5;
  nlohmann::json j = cfg;
  CHECK(j.get<TrainConfig>() == cfg);
  for (auto mutate : std::vector<std::function<void(TrainConfig&)>>{
           [](TrainConfig& c) { c.lr = 0; }, [](TrainConfig& c) { c.batch_size = 0; },
           [](TrainConfig& c) { c.epochs = 0; }, [](TrainConfig& c) { c.lr_min = 1.0; },
           [](TrainConfig& c) { c.scheduler = "step"; }, [](TrainConfig& c) { c.loss_weights.alpha_ssim = -1; }}) {
    TrainConfig bad;
    mutate(bad);
    expect_error(ErrorKind::BadConfig, [&] { bad.validate(); });
  }
}

TEST_CASE("adam matches a scalar reference") {
  Tensor<double> init(1, 1, 1, 3);
  init.vec() << 0.5, -1.0, 2.0;
  std::vector<NamedTensor<double>> params{{"w", parameter(init)}};
  Adam<double> opt(params, 0.01);
  // reference state
  double theta[3] = {0.5, -1.0, 2.0}, m[3] = {}, v[3] = {};
  for (int t = 1; t <= 10; ++t) {
    // gradient of sum(w^3)
    Tensor<double> g(1, 1, 1, 3);
    for (int i = 0; i < 3; ++i) g.vec()[i] = 3 * std::pow(params[0].var->value.vec()[i], 2);
    params[0].var->grad = g;
    const double lr = 0.05 / t;
    opt.step(lr);
    for (int i = 0; i < 3; ++i) {
      const double gi = 3 * theta[i] * theta[i] + 0.01 * theta[i];
      m[i] = 0.9 * m[i] + 0.1 * gi;
      v[i] = 0.999 * v[i] + 0.001 * gi * gi;
      const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
      theta[i] -= lr * mh / (std::sqrt(vh) + 1e-8);
    }
  }
  for (int i = 0; i < 3; ++i) CHECK(std::abs(params[0].var->value.vec()[i] - theta[i]) < 1e-12);
  CHECK(opt.steps() == 10);
}

TEST_CASE("gradient clipping") {
  Tensor<double> a(1, 1, 1, 2), b(1, 1, 1, 1);
  std::vector<NamedTensor<double>> params{{"a", parameter(a)}, {"b", parameter(b)}};
  params[0].var->grad = Tensor<double>(a.shape());
  params[0].var->grad.vec() << 3, 0;
  params[1].var->grad = Tensor<double>(b.shape());
  params[1].var->grad.vec() << 4;
  CHECK(clip_grad_norm(params, 10.0) == doctest::Approx(5.0));
  CHECK(params[1].var->grad.vec()[0] == 4.0);
  CHECK(clip_grad_norm(params, 1.0) == doctest::Approx(5.0));
  CHECK(std::abs(params[0].var->grad.vec()[0] - 0.6) < 1e-12);
  CHECK(std::abs(params[1].var->grad.vec()[0] - 0.8) < 1e-12);
}

TEST_CASE("evaluate with stub predictors") {
  TempDir dir("eval");
  FixtureSpec spec;
  spec.n_train = 1;
  spec.n_val = 2;
  write_fixture_store(dir / "s", spec);
  const auto store = TileStore::open(dir / "s");
  const LossWeights w;

  SUBCASE("oracle returns the targets") {
    const auto stats = store.corpus_stats();
    const Predictor<double> oracle = [&](const Batch<double>& b) {
      return ModelOutput<double>{b.dems, scale_targets<double>(b.meta, stats)};
    };
    const auto r = evaluate(oracle, store, Split::val, w);
    CHECK(std::abs(r.total) < 1e-6);
    CHECK(r.l1 == 0.0);
    CHECK(r.scale == 0.0);
  }

  SUBCASE("constant 0.5 matches hand computation") {
    const Predictor<double> half = [](const Batch<double>& b) {
      Tensor<double> e(b.dems.shape());
      e.vec().setConstant(0.5);
      return ModelOutput<double>{e, Tensor<double>(static_cast<int>(b.meta.size()), 2, 1, 1)};
    };
    const auto stats = store.corpus_stats();
    LossReport expect;
    const auto val = store.indices(Split::val);
    for (auto i : val) {
      const auto t = store.load(i);
      expect.l1 += l1_constant(0.5, t) / 2;
      expect.grad += grad_constant(t) / 2;
      expect.ssim += ssim_loss_constant(0.5, t.dem) / 2;
      expect.scale += (std::abs((t.meta.z_min - stats.zmin_mean) / stats.zmin_std) + std::log1p(t.meta.z_ptp)) / 4;
    }
    expect.total = expect.l1 + expect.grad + expect.ssim + 0.1 * expect.scale;
    for (int bs : {1, 2, 8}) {
      const auto r = evaluate(half, store, Split::val, w, bs);
      CHECK(std::abs(r.l1 - expect.l1) < 1e-9);
      CHECK(std::abs(r.grad - expect.grad) < 1e-9);
      CHECK(std::abs(r.ssim - expect.ssim) < 1e-9);
      CHECK(std::abs(r.scale - expect.scale) < 1e-9);
      CHECK(std::abs(r.total - expect.total) < 1e-9);
    }
  }

  SUBCASE("empty split") {
    const Predictor<double> none = [](const Batch<double>&) -> ModelOutput<double> { return {}; };
    expect_error(ErrorKind::EmptySplit, [&] { evaluate(none, store, Split::test, w); });
  }
}

TEST_CASE("evaluate weights batches by sample count") {
  TempDir dir("weights");
  FixtureSpec spec;
  spec.n_train = 1;
  spec.n_val = 5;
  write_fixture_store(dir / "s", spec);
  const auto store = TileStore::open(dir / "s");
  const auto model = build_model<double>(tiny(), 3);
  const auto whole = evaluate(model, store, Split::val, LossWeights{}, 5);
  for (int bs : {1, 2, 3}) {
    const auto r = evaluate(model, store, Split::val, LossWeights{}, bs);
    CHECK(std::abs(r.total - whole.total) < 1e-12);
    CHECK(std::abs(r.ssim - whole.ssim) < 1e-12);
  }
}

TEST_CASE("epoch order is a seeded permutation") {
  std::vector<std::size_t> idx{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  const auto a = epoch_order(idx, 5, 0), b = epoch_order(idx, 5, 0), c = epoch_order(idx, 5, 1);
  CHECK(a == b);
  CHECK(a != c);
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  CHECK(sorted == idx);
}

TEST_CASE("a single batch can be overfit") {
  TempDir dir("overfit");
  DatasetParams p;
  p.n_pairs = 10;
  make_dataset(p, 4, dir / "s");
  const auto store = TileStore::open(dir / "s");
  const auto batch = load_batch<float>(store, store.indices(Split::train));
  auto model = build_model<float>(tiny(0.0), 2);
  Adam<float> opt(model.parameters(), 1e-5);
  std::mt19937_64 rng(1);
  const double first = train_step(model, opt, batch, store.corpus_stats(), LossWeights{}, 1e-3, rng).total;
  double last = first;
  for (int s = 0; s < 40; ++s) last = train_step(model, opt, batch, store.corpus_stats(), LossWeights{}, 1e-3, rng).total;
  MESSAGE("loss " << first << " -> " << last);
  CHECK(last < 0.6 * first);
}

TEST_CASE("train writes checkpoints, history and logs reproducibly") {
  TempDir dir("train");
  DatasetParams p;
  p.n_pairs = 20;
  make_dataset(p, 6, dir / "s");
  const auto store = TileStore::open(dir / "s");
  TrainConfig cfg = TrainConfig::desk();
  cfg.epochs = 3;
  cfg.lr = 1e-3;
  cfg.seed = 17;
  cfg.checkpoint_dir = dir / "ck1";

  auto model = build_model<float>(tiny(), 5);
  const auto res = train(model, store, cfg);
  const auto& h = res.history;
  REQUIRE(h.records.size() == 3);
  REQUIRE(h.lr_trace.size() == 4);
  for (int t = 0; t <= 3; ++t) CHECK(h.lr_trace[t] == cosine_lr(t, cfg));
  double best = 1e300;
  for (const auto& r : h.records) {
    CHECK(r.lr == cosine_lr(r.epoch, cfg));
    REQUIRE(r.val_loss);
    best = std::min(best, *r.val_loss);
  }
  CHECK(h.best_val_loss == best);

  // final val loss equals an independent eval pass on the final weights
  CHECK(evaluate(model, store, Split::val, cfg.loss_weights, cfg.batch_size).total == *h.records.back().val_loss);
  // and the best checkpoint reproduces the best val loss
  const auto reloaded = load_weights<float>(res.best_checkpoint);
  CHECK(std::abs(evaluate(reloaded, store, Split::val, cfg.loss_weights).total - h.best_val_loss) < 1e-6);
  CHECK(read_checkpoint_sidecar(res.best_checkpoint).at("epoch") == h.best_epoch);
  CHECK(std::filesystem::exists(res.last_checkpoint / "weights.bin"));

  // log: one line per step plus one per epoch
  const int steps_per_epoch = (static_cast<int>(store.indices(Split::train).size()) + 7) / 8;
  std::ifstream log(cfg.checkpoint_dir / "train.jsonl");
  int steps = 0, epochs = 0;
  for (std::string line; std::getline(log, line);) {
    const auto j = nlohmann::json::parse(line);
    if (j["type"] == "step") {
      ++steps;
      for (const char* k : {"step", "total", "l1", "grad", "ssim", "scale", "lr"}) CHECK(j.contains(k));
    } else {
      ++epochs;
    }
  }
  CHECK(steps == 3 * steps_per_epoch);
  CHECK(epochs == 3);
  nlohmann::json saved;
  std::ifstream(cfg.checkpoint_dir / "history.json") >> saved;
  CHECK(saved.get<TrainHistory>().same_result(h));

  // same seed, same store: same history
  auto again = build_model<float>(tiny(), 5);
  cfg.checkpoint_dir = dir / "ck2";
  const auto res2 = train(again, store, cfg);
  CHECK(res2.history.same_result(h));
  CHECK(again.parameter_hash() == model.parameter_hash());
}

TEST_CASE("val_every skips validation but always validates the last epoch") {
  TempDir dir("valevery");
  FixtureSpec spec;
  spec.tile = 64;
  spec.n_train = 4;
  spec.n_val = 2;
  write_fixture_store(dir / "s", spec);
  const auto store = TileStore::open(dir / "s");
  TrainConfig cfg = TrainConfig::desk();
  cfg.epochs = 3;
  cfg.val_every = 2;
  cfg.log_steps = false;
  cfg.checkpoint_dir = dir / "ck";
  auto model = build_model<float>(tiny(), 1);
  const auto h = train(model, store, cfg).history;
  CHECK(!h.records[0].val_loss);
  CHECK(h.records[1].val_loss);
  CHECK(h.records[2].val_loss);
}

TEST_CASE("training aborts on non-finite loss") {
  TempDir dir("nan");
  FixtureSpec spec;
  spec.tile = 64;
  spec.n_train = 2;
  spec.n_val = 1;
  write_fixture_store(dir / "s", spec);
  const auto store = TileStore::open(dir / "s");
  auto model = build_model<float>(tiny(), 1);
  model.parameters().back().var->value.vec()[0] = std::numeric_limits<float>::quiet_NaN();
  TrainConfig cfg = TrainConfig::desk();
  cfg.epochs = 1;
  cfg.checkpoint_dir = dir / "ck";
  try {
    train(model, store, cfg);
    FAIL("expected NonFiniteLoss");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::NonFiniteLoss);
    CHECK(std::string(e.what()).find("fx_0_0") != std::string::npos);
  }
}

TEST_CASE("train rejects empty splits") {
  TempDir dir("empty");
  FixtureSpec spec;
  spec.tile = 64;
  spec.n_train = 2;
  spec.n_val = 0;
  write_fixture_store(dir / "s", spec);
  const auto store = TileStore::open(dir / "s");
  auto model = build_model<float>(tiny(), 1);
  TrainConfig cfg = TrainConfig::desk();
  cfg.checkpoint_dir = dir / "ck";
  expect_error(ErrorKind::EmptySplit, [&] { train(model, store, cfg); });
}
