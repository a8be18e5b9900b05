#include "lunardem/train.hpp"

#include "lunardem/error.hpp"
#include "lunardem/random.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numbers>
#include <sstream>

namespace lunardem {

namespace fs = std::filesystem;

TrainConfig TrainConfig::desk() {
  TrainConfig c;
  c.batch_size = 8;
  c.epochs = 20;
  return c;
}

void TrainConfig::validate() const {
  auto bad = [](const std::string& what) { throw Error(ErrorKind::BadConfig, what); };
  if (!(lr > 0.0)) bad("lr must be positive");
  if (!(weight_decay >= 0.0)) bad("weight_decay must be non-negative");
  if (batch_size < 1) bad("batch_size must be at least 1");
  if (epochs < 1) bad("epochs must be at least 1");
  if (scheduler != "cosine") bad("unknown scheduler '" + scheduler + "'");
  if (!(lr_min >= 0.0 && lr_min <= lr)) bad("lr_min must lie in [0, lr]");
  if (val_every < 1) bad("val_every must be at least 1");
  if (!(clip_norm >= 0.0)) bad("clip_norm must be non-negative");
  loss_weights.validate();
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"lr", c.lr},
       {"weight_decay", c.weight_decay},
       {"batch_size", c.batch_size},
       {"epochs", c.epochs},
       {"scheduler", c.scheduler},
       {"lr_min", c.lr_min},
       {"seed", c.seed},
       {"device", c.device},
       {"loss_weights", c.loss_weights},
       {"val_every", c.val_every},
       {"checkpoint_dir", c.checkpoint_dir.string()},
       {"clip_norm", c.clip_norm},
       {"log_steps", c.log_steps}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  j.at("lr").get_to(c.lr);
  j.at("weight_decay").get_to(c.weight_decay);
  j.at("batch_size").get_to(c.batch_size);
  j.at("epochs").get_to(c.epochs);
  j.at("scheduler").get_to(c.scheduler);
  j.at("lr_min").get_to(c.lr_min);
  j.at("seed").get_to(c.seed);
  j.at("device").get_to(c.device);
  j.at("loss_weights").get_to(c.loss_weights);
  j.at("val_every").get_to(c.val_every);
  c.checkpoint_dir = j.at("checkpoint_dir").get<std::string>();
  j.at("clip_norm").get_to(c.clip_norm);
  j.at("log_steps").get_to(c.log_steps);
}

double cosine_lr(int t, const TrainConfig& cfg) {
  if (t < 0 || t > cfg.epochs) {
    throw Error(ErrorKind::OutOfRange,
                "epoch " + std::to_string(t) + " outside [0, " + std::to_string(cfg.epochs) + "]");
  }
  return cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1.0 + std::cos(std::numbers::pi * t / cfg.epochs));
}

bool EpochRecord::same_result(const EpochRecord& o) const {
  return epoch == o.epoch && train_loss == o.train_loss && val_loss == o.val_loss && lr == o.lr &&
         train_report == o.train_report && val_report == o.val_report;
}

bool TrainHistory::same_result(const TrainHistory& o) const {
  if (records.size() != o.records.size()) return false;
  for (std::size_t i = 0; i < records.size(); ++i)
    if (!records[i].same_result(o.records[i])) return false;
  return best_epoch == o.best_epoch && best_val_loss == o.best_val_loss && lr_trace == o.lr_trace;
}

void to_json(nlohmann::json& j, const EpochRecord& r) {
  j = {{"epoch", r.epoch},
       {"train_loss", r.train_loss},
       {"val_loss", r.val_loss ? nlohmann::json(*r.val_loss) : nlohmann::json(nullptr)},
       {"lr", r.lr},
       {"wall_seconds", r.wall_seconds},
       {"train_report", r.train_report},
       {"val_report", r.val_report ? nlohmann::json(*r.val_report) : nlohmann::json(nullptr)}};
}

void from_json(const nlohmann::json& j, EpochRecord& r) {
  j.at("epoch").get_to(r.epoch);
  j.at("train_loss").get_to(r.train_loss);
  if (!j.at("val_loss").is_null()) r.val_loss = j.at("val_loss").get<double>();
  j.at("lr").get_to(r.lr);
  j.at("wall_seconds").get_to(r.wall_seconds);
  j.at("train_report").get_to(r.train_report);
  if (!j.at("val_report").is_null()) r.val_report = j.at("val_report").get<LossReport>();
}

void to_json(nlohmann::json& j, const TrainHistory& h) {
  j = {{"records", h.records}, {"best_epoch", h.best_epoch}, {"best_val_loss", h.best_val_loss},
       {"lr_trace", h.lr_trace}};
}

void from_json(const nlohmann::json& j, TrainHistory& h) {
  j.at("records").get_to(h.records);
  j.at("best_epoch").get_to(h.best_epoch);
  j.at("best_val_loss").get_to(h.best_val_loss);
  j.at("lr_trace").get_to(h.lr_trace);
}

template <typename Scalar>
Adam<Scalar>::Adam(const std::vector<NamedTensor<Scalar>>& params, double weight_decay, double beta1,
                   double beta2, double eps)
    : wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {
  for (const auto& p : params) {
    params_.push_back(p.var);
    m_.push_back(Eigen::ArrayXd::Zero(p.var->value.size()));
    v_.push_back(Eigen::ArrayXd::Zero(p.var->value.size()));
  }
}

template <typename Scalar>
void Adam<Scalar>::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& node = *params_[k];
    auto theta = node.value.vec().array();
    Eigen::ArrayXd g = node.grad.size() ? node.grad.vec().array().template cast<double>().eval()
                                        : Eigen::ArrayXd::Zero(theta.size());
    g += wd_ * theta.template cast<double>();
    m_[k] = b1_ * m_[k] + (1.0 - b1_) * g;
    v_[k] = b2_ * v_[k] + (1.0 - b2_) * g.square();
    const Eigen::ArrayXd update = lr * (m_[k] / c1) / ((v_[k] / c2).sqrt() + eps_);
    theta -= update.template cast<Scalar>();
  }
}

template <typename Scalar>
double clip_grad_norm(const std::vector<NamedTensor<Scalar>>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    if (p.var->grad.size()) sq += p.var->grad.vec().template cast<double>().squaredNorm();
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const auto f = static_cast<Scalar>(max_norm / norm);
    for (const auto& p : params)
      if (p.var->grad.size()) p.var->grad.vec() *= f;
  }
  return norm;
}

namespace {

std::string batch_ids(const std::vector<TileMetadata>& meta) {
  std::string out;
  for (const auto& m : meta) out += (out.empty() ? "" : ",") + m.tile_id();
  return out;
}

bool finite(const LossReport& r) {
  return std::isfinite(r.total) && std::isfinite(r.l1) && std::isfinite(r.grad) && std::isfinite(r.ssim) &&
         std::isfinite(r.scale);
}

LossReport& accumulate(LossReport& acc, const LossReport& r, double weight) {
  acc.total += weight * r.total;
  acc.l1 += weight * r.l1;
  acc.grad += weight * r.grad;
  acc.ssim += weight * r.ssim;
  acc.scale += weight * r.scale;
  return acc;
}

LossReport scaled(LossReport r, double f) {
  LossReport out;
  return accumulate(out, r, f);
}

std::vector<std::vector<std::size_t>> chunk(const std::vector<std::size_t>& order, int batch_size) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(batch_size)) {
    const auto end = std::min(order.size(), i + static_cast<std::size_t>(batch_size));
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

void write_json_file(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  out << j.dump(2) << "\n";
  if (!out) throw Error(ErrorKind::IoFailure, "cannot write " + path.string());
}

}  // namespace

template <typename Scalar>
LossReport train_step(LunarDepthNet<Scalar>& model, Adam<Scalar>& opt, const Batch<Scalar>& batch,
                      const CorpusStats& stats, const LossWeights& w, double lr, std::mt19937_64& dropout_rng,
                      double clip_norm) {
  model.zero_grad();
  const auto out = model.forward_graph(batch.images, ForwardContext{true, &dropout_rng});
  LossGradients<Scalar> grads;
  const LossReport report = composite_loss(out.elevation->value, out.scale_params->value, batch.dems, batch.masks,
                                           scale_targets<Scalar>(batch.meta, stats), w, &grads);
  if (!finite(report)) {
    throw Error(ErrorKind::NonFiniteLoss, "non-finite loss on batch [" + batch_ids(batch.meta) + "]");
  }
  backward<Scalar>({{out.elevation, grads.elevation}, {out.scale_params, grads.scale_params}});
  if (clip_norm > 0.0) clip_grad_norm(model.parameters(), clip_norm);
  opt.step(lr);
  return report;
}

template <typename Scalar>
LossReport evaluate(const Predictor<Scalar>& predictor, const TileStore& store, Split split, const LossWeights& w,
                    int batch_size) {
  const auto indices = store.indices(split);
  if (indices.empty()) throw Error(ErrorKind::EmptySplit, "split '" + to_string(split) + "' is empty");
  if (!store.corpus_stats().available) throw Error(ErrorKind::MissingStats, "store has no corpus statistics");
  LossReport acc;
  for (const auto& ids : chunk(indices, std::max(1, batch_size))) {
    const Batch<Scalar> batch = load_batch<Scalar>(store, ids);
    const ModelOutput<Scalar> out = predictor(batch);
    accumulate(acc, composite_loss(out, batch.dems, batch.masks, batch.meta, store.corpus_stats(), w),
               static_cast<double>(ids.size()));
  }
  return scaled(acc, 1.0 / static_cast<double>(indices.size()));
}

template <typename Scalar>
LossReport evaluate(const LunarDepthNet<Scalar>& model, const TileStore& store, Split split, const LossWeights& w,
                    int batch_size) {
  const Predictor<Scalar> fn = [&model](const Batch<Scalar>& b) { return model.forward(b.images, false); };
  return evaluate(fn, store, split, w, batch_size);
}

std::vector<std::size_t> epoch_order(std::vector<std::size_t> indices, std::uint64_t seed, int epoch) {
  std::mt19937_64 rng(splitmix64(seed ^ (0xDA7A0000ull + static_cast<std::uint64_t>(epoch))));
  for (std::size_t i = indices.size(); i > 1; --i) std::swap(indices[i - 1], indices[rng() % i]);
  return indices;
}

template <typename Scalar>
TrainResult train(LunarDepthNet<Scalar>& model, const TileStore& store, const TrainConfig& cfg, bool verbose) {
  cfg.validate();
  const auto train_idx = store.indices(Split::train);
  const auto val_idx = store.indices(Split::val);
  if (train_idx.empty()) throw Error(ErrorKind::EmptySplit, "train split is empty");
  if (val_idx.empty()) throw Error(ErrorKind::EmptySplit, "val split is empty");

  std::error_code ec;
  fs::create_directories(cfg.checkpoint_dir, ec);
  if (ec) throw Error(ErrorKind::IoFailure, "cannot create " + cfg.checkpoint_dir.string() + ": " + ec.message());
  std::ofstream log(cfg.checkpoint_dir / "train.jsonl");
  if (!log) throw Error(ErrorKind::IoFailure, "cannot write train.jsonl");

  TrainResult result;
  result.best_checkpoint = cfg.checkpoint_dir / "best";
  result.last_checkpoint = cfg.checkpoint_dir / "last";
  TrainHistory& history = result.history;
  for (int t = 0; t <= cfg.epochs; ++t) history.lr_trace.push_back(cosine_lr(t, cfg));

  Adam<Scalar> opt(model.parameters(), cfg.weight_decay);
  std::mt19937_64 dropout_rng(splitmix64(cfg.seed ^ 0xD209000ull));
  const CorpusStats& stats = store.corpus_stats();
  long step = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    const double lr = cosine_lr(epoch, cfg);
    LossReport epoch_acc;
    for (const auto& ids : chunk(epoch_order(train_idx, cfg.seed, epoch), cfg.batch_size)) {
      const Batch<Scalar> batch = load_batch<Scalar>(store, ids);
      const LossReport r = train_step(model, opt, batch, stats, cfg.loss_weights, lr, dropout_rng, cfg.clip_norm);
      accumulate(epoch_acc, r, static_cast<double>(ids.size()));
      if (cfg.log_steps) {
        nlohmann::json line = r;
        line["type"] = "step";
        line["step"] = step;
        line["epoch"] = epoch;
        line["lr"] = lr;
        log << line.dump() << "\n";
      }
      ++step;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_report = scaled(epoch_acc, 1.0 / static_cast<double>(train_idx.size()));
    rec.train_loss = rec.train_report.total;
    const bool validate_now = (epoch + 1) % cfg.val_every == 0 || epoch + 1 == cfg.epochs;
    if (validate_now) {
      rec.val_report = evaluate(model, store, Split::val, cfg.loss_weights, cfg.batch_size);
      rec.val_loss = rec.val_report->total;
      if (!std::isfinite(*rec.val_loss)) {
        throw Error(ErrorKind::NonFiniteLoss, "non-finite validation loss at epoch " + std::to_string(epoch));
      }
      if (history.best_epoch < 0 || *rec.val_loss < history.best_val_loss) {
        history.best_epoch = epoch;
        history.best_val_loss = *rec.val_loss;
        save_weights(model, result.best_checkpoint,
                     {{"epoch", epoch}, {"val_loss", *rec.val_loss}, {"seed", cfg.seed}, {"corpus_stats", stats}});
      }
    }
    save_weights(model, result.last_checkpoint, {{"epoch", epoch}, {"seed", cfg.seed}, {"corpus_stats", stats}});
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    history.records.push_back(rec);

    nlohmann::json line = rec;
    line["type"] = "epoch";
    log << line.dump() << "\n";
    log.flush();
    write_json_file(cfg.checkpoint_dir / "history.json", history);
    if (verbose) {
      std::cerr << "epoch " << epoch << " lr " << lr << " train " << rec.train_loss;
      if (rec.val_loss) std::cerr << " val " << *rec.val_loss;
      std::cerr << " (" << rec.wall_seconds << " s)\n";
    }
  }
  return result;
}

#define LUNARDEM_INSTANTIATE(S)                                                                                    \
  template class Adam<S>;                                                                                          \
  template double clip_grad_norm(const std::vector<NamedTensor<S>>&, double);                                  \
  template LossReport train_step(LunarDepthNet<S>&, Adam<S>&, const Batch<S>&, const CorpusStats&,                 \
                                 const LossWeights&, double, std::mt19937_64&, double);                            \
  template LossReport evaluate(const Predictor<S>&, const TileStore&, Split, const LossWeights&, int);              \
  template LossReport evaluate(const LunarDepthNet<S>&, const TileStore&, Split, const LossWeights&, int);          \
  template TrainResult train(LunarDepthNet<S>&, const TileStore&, const TrainConfig&, bool);

LUNARDEM_INSTANTIATE(float)
LUNARDEM_INSTANTIATE(double)

}  // namespace lunardem
