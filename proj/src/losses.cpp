#include "lunardem/losses.hpp"

#include "lunardem/error.hpp"

#include <cmath>

namespace lunardem {

namespace {

using Mat = RowMatrix<double>;

template <typename Scalar>
void require_congruent(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* what) {
  if (!(a.shape() == b.shape()) || a.c() != 1) {
    throw Error(ErrorKind::BadShape, std::string(what) + ": expected congruent [B,1,H,W] tensors, got " +
                                         a.shape().str() + " and " + b.shape().str());
  }
}

double sign(double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); }

// Separable valid correlation with the SSIM window, and its adjoint.
Mat window_filter(const Mat& m, const std::vector<double>& g) {
  const Eigen::Index k = static_cast<Eigen::Index>(g.size());
  const Eigen::Index hv = m.rows() - k + 1, wv = m.cols() - k + 1;
  Mat rows = Mat::Zero(hv, m.cols());
  for (Eigen::Index i = 0; i < k; ++i) rows += g[i] * m.middleRows(i, hv);
  Mat out = Mat::Zero(hv, wv);
  for (Eigen::Index i = 0; i < k; ++i) out += g[i] * rows.middleCols(i, wv);
  return out;
}

Mat window_filter_adjoint(const Mat& g_out, const std::vector<double>& g, Eigen::Index h, Eigen::Index w) {
  const Eigen::Index k = static_cast<Eigen::Index>(g.size());
  const Eigen::Index hv = g_out.rows(), wv = g_out.cols();
  Mat rows = Mat::Zero(hv, w);
  for (Eigen::Index i = 0; i < k; ++i) rows.middleCols(i, wv) += g[i] * g_out;
  Mat out = Mat::Zero(h, w);
  for (Eigen::Index i = 0; i < k; ++i) out.middleRows(i, hv) += g[i] * rows;
  return out;
}

}  // namespace

void LossWeights::validate() const {
  if (alpha_l1 < 0 || alpha_grad < 0 || alpha_ssim < 0 || alpha_scale < 0) {
    throw Error(ErrorKind::BadConfig, "loss weights must be non-negative");
  }
}

void to_json(nlohmann::json& j, const LossReport& r) {
  j = {{"total", r.total}, {"l1", r.l1}, {"grad", r.grad}, {"ssim", r.ssim}, {"scale", r.scale}};
}

void from_json(const nlohmann::json& j, LossReport& r) {
  j.at("total").get_to(r.total);
  j.at("l1").get_to(r.l1);
  j.at("grad").get_to(r.grad);
  j.at("ssim").get_to(r.ssim);
  j.at("scale").get_to(r.scale);
}

void to_json(nlohmann::json& j, const LossWeights& w) {
  j = {{"alpha_l1", w.alpha_l1}, {"alpha_grad", w.alpha_grad}, {"alpha_ssim", w.alpha_ssim},
       {"alpha_scale", w.alpha_scale}};
}

void from_json(const nlohmann::json& j, LossWeights& w) {
  j.at("alpha_l1").get_to(w.alpha_l1);
  j.at("alpha_grad").get_to(w.alpha_grad);
  j.at("alpha_ssim").get_to(w.alpha_ssim);
  j.at("alpha_scale").get_to(w.alpha_scale);
}

std::vector<double> ssim_taps() {
  std::vector<double> g(kSsimWindow);
  const int half = kSsimWindow / 2;
  double sum = 0.0;
  for (int i = 0; i < kSsimWindow; ++i) {
    g[i] = std::exp(-double((i - half) * (i - half)) / (2 * kSsimSigma * kSsimSigma));
    sum += g[i];
  }
  for (double& v : g) v /= sum;
  return g;
}

template <typename Scalar>
Scalar l1_loss(const Tensor<Scalar>& pred, const Tensor<Scalar>& target, const Tensor<Scalar>& mask,
               Tensor<Scalar>* grad) {
  require_congruent(pred, target, "l1_loss");
  require_congruent(pred, mask, "l1_loss");
  if (grad) *grad = Tensor<Scalar>(pred.shape());
  const int batch = pred.n();
  double total = 0.0;
  for (int b = 0; b < batch; ++b) {
    const auto p = pred.image(b, 0).array().template cast<double>();
    const auto t = target.image(b, 0).array().template cast<double>();
    const auto m = mask.image(b, 0).array().template cast<double>();
    const double count = m.sum();
    if (count <= 0) throw Error(ErrorKind::EmptyMask, "l1_loss: tile " + std::to_string(b) + " has no valid pixels");
    total += ((p - t).abs() * m).sum() / count;
    if (grad) {
      grad->image(b, 0) = ((p - t).sign() * m / (count * batch)).template cast<Scalar>().matrix();
    }
  }
  return static_cast<Scalar>(total / batch);
}

template <typename Scalar>
Scalar gradient_loss(const Tensor<Scalar>& pred, const Tensor<Scalar>& target, const Tensor<Scalar>& mask,
                     Tensor<Scalar>* grad) {
  require_congruent(pred, target, "gradient_loss");
  require_congruent(pred, mask, "gradient_loss");
  const int batch = pred.n(), h = pred.h(), w = pred.w();
  if (h < 2 || w < 2) throw Error(ErrorKind::TooSmall, "gradient_loss needs tiles of at least 2x2");
  if (grad) *grad = Tensor<Scalar>(pred.shape());
  double total = 0.0;
  for (int b = 0; b < batch; ++b) {
    const Mat p = pred.image(b, 0).template cast<double>();
    const Mat t = target.image(b, 0).template cast<double>();
    const Mat m = mask.image(b, 0).template cast<double>();
    const Mat dx = (p.rightCols(w - 1) - p.leftCols(w - 1)) - (t.rightCols(w - 1) - t.leftCols(w - 1));
    const Mat dy = (p.bottomRows(h - 1) - p.topRows(h - 1)) - (t.bottomRows(h - 1) - t.topRows(h - 1));
    const Mat mx = m.rightCols(w - 1).cwiseProduct(m.leftCols(w - 1));
    const Mat my = m.bottomRows(h - 1).cwiseProduct(m.topRows(h - 1));
    const double nx = mx.sum(), ny = my.sum();
    if (nx + ny <= 0) {
      throw Error(ErrorKind::EmptyMask, "gradient_loss: tile " + std::to_string(b) + " has no valid stencil");
    }
    if (nx > 0) total += dx.cwiseAbs().cwiseProduct(mx).sum() / nx;
    if (ny > 0) total += dy.cwiseAbs().cwiseProduct(my).sum() / ny;
    if (grad) {
      Mat g = Mat::Zero(h, w);
      if (nx > 0) {
        const Mat sx = dx.unaryExpr(&sign).cwiseProduct(mx) / (nx * batch);
        g.rightCols(w - 1) += sx;
        g.leftCols(w - 1) -= sx;
      }
      if (ny > 0) {
        const Mat sy = dy.unaryExpr(&sign).cwiseProduct(my) / (ny * batch);
        g.bottomRows(h - 1) += sy;
        g.topRows(h - 1) -= sy;
      }
      grad->image(b, 0) = g.template cast<Scalar>();
    }
  }
  return static_cast<Scalar>(total / batch);
}

template <typename Scalar>
Scalar ssim_loss(const Tensor<Scalar>& pred, const Tensor<Scalar>& target, Tensor<Scalar>* grad) {
  require_congruent(pred, target, "ssim_loss");
  const int batch = pred.n(), h = pred.h(), w = pred.w();
  if (h < kSsimWindow || w < kSsimWindow) {
    throw Error(ErrorKind::TooSmall, "ssim_loss needs tiles of at least 11x11, got " + pred.shape().str());
  }
  static const std::vector<double> g = ssim_taps();
  if (grad) *grad = Tensor<Scalar>(pred.shape());
  double total = 0.0;
  for (int b = 0; b < batch; ++b) {
    const Mat x = pred.image(b, 0).template cast<double>();
    const Mat y = target.image(b, 0).template cast<double>();
    const Mat mx = window_filter(x, g), my = window_filter(y, g);
    const Mat exx = window_filter(x.cwiseProduct(x), g);
    const Mat eyy = window_filter(y.cwiseProduct(y), g);
    const Mat exy = window_filter(x.cwiseProduct(y), g);
    const auto mxa = mx.array(), mya = my.array();
    const Eigen::ArrayXXd a1 = 2 * mxa * mya + kSsimC1;
    const Eigen::ArrayXXd a2 = 2 * (exy.array() - mxa * mya) + kSsimC2;
    const Eigen::ArrayXXd b1 = mxa.square() + mya.square() + kSsimC1;
    const Eigen::ArrayXXd b2 = (exx.array() - mxa.square()) + (eyy.array() - mya.square()) + kSsimC2;
    const Eigen::ArrayXXd s = (a1 * a2) / (b1 * b2);
    const double windows = static_cast<double>(s.size());
    total += 1.0 - s.mean();
    if (grad) {
      // dS with respect to the window moments mu_x, E[x^2], E[xy].
      const double scale = -1.0 / (windows * batch);
      const Mat d_mu = (scale * s * (2 * mya / a1 - 2 * mya / a2 - 2 * mxa / b1 + 2 * mxa / b2)).matrix();
      const Mat d_xx = (scale * -s / b2).matrix();
      const Mat d_xy = (scale * 2 * s / a2).matrix();
      const Mat gx = window_filter_adjoint(d_mu, g, h, w) +
                     2 * x.cwiseProduct(window_filter_adjoint(d_xx, g, h, w)) +
                     y.cwiseProduct(window_filter_adjoint(d_xy, g, h, w));
      grad->image(b, 0) = gx.template cast<Scalar>();
    }
  }
  return static_cast<Scalar>(total / batch);
}

template <typename Scalar>
Tensor<Scalar> scale_targets(const std::vector<TileMetadata>& meta, const CorpusStats& stats) {
  if (!stats.available || !(stats.zmin_std > 0)) {
    throw Error(ErrorKind::MissingStats, "scale targets need corpus z_min mean/std from the train split");
  }
  Tensor<Scalar> out(static_cast<int>(meta.size()), 2, 1, 1);
  for (std::size_t i = 0; i < meta.size(); ++i) {
    out(static_cast<int>(i), 0, 0, 0) = static_cast<Scalar>((meta[i].z_min - stats.zmin_mean) / stats.zmin_std);
    out(static_cast<int>(i), 1, 0, 0) = static_cast<Scalar>(std::log1p(meta[i].z_ptp));
  }
  return out;
}

template <typename Scalar>
Scalar scale_loss(const Tensor<Scalar>& pred_params, const Tensor<Scalar>& targets, Tensor<Scalar>* grad) {
  if (!(pred_params.shape() == targets.shape()) || pred_params.c() != 2 || pred_params.h() != 1 ||
      pred_params.w() != 1) {
    throw Error(ErrorKind::BadShape, "scale_loss: expected [B,2,1,1] tensors, got " + pred_params.shape().str() +
                                         " and " + targets.shape().str());
  }
  const auto diff = (pred_params.vec() - targets.vec()).array().template cast<double>();
  const double n = static_cast<double>(diff.size());
  if (grad) {
    *grad = Tensor<Scalar>(pred_params.shape());
    grad->vec() = (diff.sign() / n).template cast<Scalar>().matrix();
  }
  return static_cast<Scalar>(diff.abs().sum() / n);
}

template <typename Scalar>
LossReport composite_loss(const Tensor<Scalar>& elevation, const Tensor<Scalar>& scale_params,
                          const Tensor<Scalar>& target, const Tensor<Scalar>& mask,
                          const Tensor<Scalar>& scale_target, const LossWeights& w,
                          LossGradients<Scalar>* grads) {
  w.validate();
  Tensor<Scalar> g_l1, g_grad, g_ssim, g_scale;
  const bool want = grads != nullptr;
  LossReport r;
  r.l1 = l1_loss(elevation, target, mask, want ? &g_l1 : nullptr);
  r.grad = gradient_loss(elevation, target, mask, want ? &g_grad : nullptr);
  r.ssim = ssim_loss(elevation, target, want ? &g_ssim : nullptr);
  r.scale = scale_loss(scale_params, scale_target, want ? &g_scale : nullptr);
  r.total = w.alpha_l1 * r.l1 + w.alpha_grad * r.grad + w.alpha_ssim * r.ssim + w.alpha_scale * r.scale;
  if (want) {
    grads->elevation = Tensor<Scalar>(elevation.shape());
    grads->elevation.vec() = Scalar(w.alpha_l1) * g_l1.vec() + Scalar(w.alpha_grad) * g_grad.vec() +
                             Scalar(w.alpha_ssim) * g_ssim.vec();
    grads->scale_params = std::move(g_scale);
    grads->scale_params.vec() *= Scalar(w.alpha_scale);
  }
  return r;
}

#define LUNARDEM_INSTANTIATE_LOSSES(S)                                                                   \
  template S l1_loss(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, Tensor<S>*);                \
  template S gradient_loss(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, Tensor<S>*);          \
  template S ssim_loss(const Tensor<S>&, const Tensor<S>&, Tensor<S>*);                                \
  template Tensor<S> scale_targets(const std::vector<TileMetadata>&, const CorpusStats&);              \
  template S scale_loss(const Tensor<S>&, const Tensor<S>&, Tensor<S>*);                               \
  template LossReport composite_loss(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&,             \
                                     const Tensor<S>&, const Tensor<S>&, const LossWeights&,           \
                                     LossGradients<S>*);

LUNARDEM_INSTANTIATE_LOSSES(float)
LUNARDEM_INSTANTIATE_LOSSES(double)

}  // namespace lunardem
