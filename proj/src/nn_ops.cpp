#include "lunardem/nn_ops.hpp"

#include "lunardem/error.hpp"

#include <cmath>
#include <memory>

namespace lunardem::ops {
namespace {

template <typename Scalar>
bool wants_grad(const Node<Scalar>& node, std::size_t i) {
  return i < node.inputs.size() && node.inputs[i] && node.inputs[i]->requires_grad;
}

template <typename Scalar>
Tensor<Scalar>& input_grad(Node<Scalar>& node, std::size_t i) {
  return node.inputs[i]->grad_buffer();
}

struct ConvGeometry {
  int n, cin, h, w;
  int cout, k, stride, pad;
  int hout, wout;
  std::int64_t plane_out() const { return std::int64_t{hout} * wout; }
};

template <typename Scalar>
void im2col(const Tensor<Scalar>& x, const ConvGeometry& g, RowMatrix<Scalar>& cols) {
  const std::int64_t p = g.plane_out();
  cols.resize(std::int64_t{g.cin} * g.k * g.k, g.n * p);
  for (int ci = 0; ci < g.cin; ++ci) {
    for (int ki = 0; ki < g.k; ++ki) {
      for (int kj = 0; kj < g.k; ++kj) {
        const std::int64_t row = (std::int64_t{ci} * g.k + ki) * g.k + kj;
        Scalar* dst_row = cols.row(row).data();
        for (int n = 0; n < g.n; ++n) {
          const Scalar* src = x.channel(n, ci);
          Scalar* dst = dst_row + n * p;
          for (int oh = 0; oh < g.hout; ++oh) {
            const int ih = oh * g.stride - g.pad + ki;
            Scalar* out = dst + std::int64_t{oh} * g.wout;
            if (ih < 0 || ih >= g.h) {
              std::fill(out, out + g.wout, Scalar(0));
              continue;
            }
            const Scalar* in = src + std::int64_t{ih} * g.w;
            for (int ow = 0; ow < g.wout; ++ow) {
              const int iw = ow * g.stride - g.pad + kj;
              out[ow] = (iw >= 0 && iw < g.w) ? in[iw] : Scalar(0);
            }
          }
        }
      }
    }
  }
}

template <typename Scalar>
void col2im(const RowMatrix<Scalar>& cols, const ConvGeometry& g, Tensor<Scalar>& dx) {
  const std::int64_t p = g.plane_out();
  for (int ci = 0; ci < g.cin; ++ci) {
    for (int ki = 0; ki < g.k; ++ki) {
      for (int kj = 0; kj < g.k; ++kj) {
        const std::int64_t row = (std::int64_t{ci} * g.k + ki) * g.k + kj;
        const Scalar* src_row = cols.row(row).data();
        for (int n = 0; n < g.n; ++n) {
          Scalar* dst = dx.channel(n, ci);
          const Scalar* src = src_row + n * p;
          for (int oh = 0; oh < g.hout; ++oh) {
            const int ih = oh * g.stride - g.pad + ki;
            if (ih < 0 || ih >= g.h) continue;
            const Scalar* in = src + std::int64_t{oh} * g.wout;
            Scalar* out = dst + std::int64_t{ih} * g.w;
            for (int ow = 0; ow < g.wout; ++ow) {
              const int iw = ow * g.stride - g.pad + kj;
              if (iw >= 0 && iw < g.w) out[iw] += in[ow];
            }
          }
        }
      }
    }
  }
}

/// [N, C, P] tensor data <-> [C, N*P] matrix.
template <typename Scalar>
RowMatrix<Scalar> gather_channels(const Tensor<Scalar>& t) {
  const std::int64_t p = t.shape().plane();
  RowMatrix<Scalar> m(t.c(), t.n() * p);
  for (int n = 0; n < t.n(); ++n) m.middleCols(n * p, p) = t.sample(n);
  return m;
}

template <typename Scalar>
Var<Scalar> conv2d_dense(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias,
                         const ConvGeometry& g) {
  const std::int64_t p = g.plane_out();
  const std::int64_t kdim = std::int64_t{g.cin} * g.k * g.k;
  Eigen::Map<const RowMatrix<Scalar>> wmat(weight->value.data(), g.cout, kdim);

  RowMatrix<Scalar> cols;
  if (g.k == 1 && g.stride == 1 && g.pad == 0) {
    cols = gather_channels(x->value);
  } else {
    im2col(x->value, g, cols);
  }
  RowMatrix<Scalar> out_mat(g.cout, g.n * p);
  out_mat.noalias() = wmat * cols;

  Tensor<Scalar> out(g.n, g.cout, g.hout, g.wout);
  for (int n = 0; n < g.n; ++n) out.sample(n) = out_mat.middleCols(n * p, p);
  if (bias) {
    for (int n = 0; n < g.n; ++n) {
      for (int co = 0; co < g.cout; ++co) {
        out.sample(n).row(co).array() += bias->value.data()[co];
      }
    }
  }

  auto saved = std::make_shared<RowMatrix<Scalar>>(std::move(cols));
  return make_result<Scalar>(std::move(out), {x, weight, bias}, [g, saved, p, kdim](Node<Scalar>& self) {
    RowMatrix<Scalar> dout = gather_channels(self.grad);
    if (wants_grad(self, 1)) {
      Eigen::Map<RowMatrix<Scalar>> dw(input_grad(self, 1).data(), g.cout, kdim);
      dw.noalias() += dout * saved->transpose();
    }
    if (wants_grad(self, 2)) {
      input_grad(self, 2).vec() += dout.rowwise().sum();
    }
    if (wants_grad(self, 0)) {
      Eigen::Map<const RowMatrix<Scalar>> wmat(self.inputs[1]->value.data(), g.cout, kdim);
      RowMatrix<Scalar> dcols(kdim, g.n * p);
      dcols.noalias() = wmat.transpose() * dout;
      Tensor<Scalar>& dx = input_grad(self, 0);
      if (g.k == 1 && g.stride == 1 && g.pad == 0) {
        for (int n = 0; n < g.n; ++n) dx.sample(n) += dcols.middleCols(n * p, p);
      } else {
        col2im(dcols, g, dx);
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> conv2d_depthwise(const Var<Scalar>& x, const Var<Scalar>& weight,
                             const Var<Scalar>& bias, const ConvGeometry& g) {
  Tensor<Scalar> out(g.n, g.cout, g.hout, g.wout);
  const int kk = g.k * g.k;
  for (int n = 0; n < g.n; ++n) {
    for (int c = 0; c < g.cin; ++c) {
      const Scalar* src = x->value.channel(n, c);
      const Scalar* wc = weight->value.data() + std::int64_t{c} * kk;
      Scalar* dst = out.channel(n, c);
      const Scalar b = bias ? bias->value.data()[c] : Scalar(0);
      for (int oh = 0; oh < g.hout; ++oh) {
        Scalar* orow = dst + std::int64_t{oh} * g.wout;
        std::fill(orow, orow + g.wout, b);
        for (int ki = 0; ki < g.k; ++ki) {
          const int ih = oh * g.stride - g.pad + ki;
          if (ih < 0 || ih >= g.h) continue;
          const Scalar* irow = src + std::int64_t{ih} * g.w;
          for (int kj = 0; kj < g.k; ++kj) {
            const Scalar wv = wc[ki * g.k + kj];
            const int ow_lo = std::max(0, (g.pad - kj + g.stride - 1) / g.stride);
            const int hi_num = g.w - 1 + g.pad - kj;
            const int ow_hi = hi_num < 0 ? 0 : std::min(g.wout, hi_num / g.stride + 1);
            for (int ow = ow_lo; ow < ow_hi; ++ow) orow[ow] += wv * irow[ow * g.stride - g.pad + kj];
          }
        }
      }
    }
  }
  return make_result<Scalar>(std::move(out), {x, weight, bias}, [g, kk](Node<Scalar>& self) {
    const Tensor<Scalar>& dy = self.grad;
    const Tensor<Scalar>& xv = self.inputs[0]->value;
    const Tensor<Scalar>& wv = self.inputs[1]->value;
    const bool gx = wants_grad(self, 0);
    const bool gw = wants_grad(self, 1);
    if (wants_grad(self, 2)) {
      Tensor<Scalar>& db = input_grad(self, 2);
      for (int n = 0; n < g.n; ++n) db.vec() += dy.sample(n).rowwise().sum();
    }
    for (int n = 0; n < g.n; ++n) {
      for (int c = 0; c < g.cin; ++c) {
        const Scalar* drow_base = dy.channel(n, c);
        const Scalar* src = xv.channel(n, c);
        const Scalar* wc = wv.data() + std::int64_t{c} * kk;
        Scalar* dxc = gx ? input_grad(self, 0).channel(n, c) : nullptr;
        Scalar* dwc = gw ? input_grad(self, 1).data() + std::int64_t{c} * kk : nullptr;
        for (int oh = 0; oh < g.hout; ++oh) {
          const Scalar* drow = drow_base + std::int64_t{oh} * g.wout;
          for (int ki = 0; ki < g.k; ++ki) {
            const int ih = oh * g.stride - g.pad + ki;
            if (ih < 0 || ih >= g.h) continue;
            const std::int64_t ioff = std::int64_t{ih} * g.w;
            for (int kj = 0; kj < g.k; ++kj) {
              const int ow_lo = std::max(0, (g.pad - kj + g.stride - 1) / g.stride);
              const int hi_num = g.w - 1 + g.pad - kj;
            const int ow_hi = hi_num < 0 ? 0 : std::min(g.wout, hi_num / g.stride + 1);
              if (dwc) {
                Scalar acc = 0;
                for (int ow = ow_lo; ow < ow_hi; ++ow)
                  acc += drow[ow] * src[ioff + ow * g.stride - g.pad + kj];
                dwc[ki * g.k + kj] += acc;
              }
              if (dxc) {
                const Scalar w = wc[ki * g.k + kj];
                for (int ow = ow_lo; ow < ow_hi; ++ow)
                  dxc[ioff + ow * g.stride - g.pad + kj] += w * drow[ow];
              }
            }
          }
        }
      }
    }
  });
}

template <typename Scalar, typename Fn, typename Dfn>
Var<Scalar> unary(const Var<Scalar>& x, Fn fn, Dfn dfn) {
  Tensor<Scalar> out(x->value.shape());
  out.vec() = x->value.vec().unaryExpr(fn);
  return make_result<Scalar>(std::move(out), {x}, [dfn](Node<Scalar>& self) {
    const Eigen::Array<Scalar, Eigen::Dynamic, 1> d =
        dfn(self.inputs[0]->value.vec().array(), self.value.vec().array());
    input_grad(self, 0).vec().array() += self.grad.vec().array() * d;
  });
}

}  // namespace

template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias,
                   Conv2dOptions options) {
  const Shape& xs = x->value.shape();
  const Shape& ws = weight->value.shape();
  if (ws.h != ws.w) throw Error(ErrorKind::BadShape, "conv2d: square kernels only");
  ConvGeometry g{xs.n, xs.c, xs.h, xs.w, ws.n, ws.h, options.stride, options.padding, 0, 0};
  g.hout = (xs.h + 2 * g.pad - g.k) / g.stride + 1;
  g.wout = (xs.w + 2 * g.pad - g.k) / g.stride + 1;
  if (g.hout <= 0 || g.wout <= 0) throw Error(ErrorKind::BadShape, "conv2d: input smaller than kernel");
  if (bias && bias->value.size() != g.cout) throw Error(ErrorKind::BadShape, "conv2d: bias size");
  if (options.groups == 1) {
    if (ws.c != xs.c) {
      throw Error(ErrorKind::BadShape, "conv2d: weight " + ws.str() + " vs input " + xs.str());
    }
    return conv2d_dense(x, weight, bias, g);
  }
  if (options.groups == xs.c && ws.n == xs.c && ws.c == 1) return conv2d_depthwise(x, weight, bias, g);
  throw Error(ErrorKind::BadShape, "conv2d: only dense or depthwise grouping is supported");
}

template <typename Scalar>
Var<Scalar> conv_transpose2x2(const Var<Scalar>& x, const Var<Scalar>& weight,
                              const Var<Scalar>& bias) {
  const Shape& xs = x->value.shape();
  const Shape& ws = weight->value.shape();
  if (ws.n != xs.c || ws.h != 2 || ws.w != 2) {
    throw Error(ErrorKind::BadShape, "conv_transpose2x2: weight " + ws.str() + " vs input " + xs.str());
  }
  const int cin = xs.c, cout = ws.c, h = xs.h, w = xs.w, n_batch = xs.n;
  const std::int64_t p = xs.plane();
  RowMatrix<Scalar> xmat = gather_channels(x->value);
  Eigen::Map<const RowMatrix<Scalar>> wmat(weight->value.data(), cin, std::int64_t{cout} * 4);
  RowMatrix<Scalar> y(std::int64_t{cout} * 4, n_batch * p);
  y.noalias() = wmat.transpose() * xmat;

  Tensor<Scalar> out(n_batch, cout, 2 * h, 2 * w);
  for (int n = 0; n < n_batch; ++n) {
    for (int co = 0; co < cout; ++co) {
      Scalar* dst = out.channel(n, co);
      const Scalar b = bias ? bias->value.data()[co] : Scalar(0);
      for (int d = 0; d < 4; ++d) {
        const Scalar* src = y.row(std::int64_t{co} * 4 + d).data() + n * p;
        const int di = d / 2, dj = d % 2;
        for (int i = 0; i < h; ++i) {
          Scalar* orow = dst + std::int64_t{2 * i + di} * (2 * w) + dj;
          const Scalar* irow = src + std::int64_t{i} * w;
          for (int j = 0; j < w; ++j) orow[2 * j] = irow[j] + b;
        }
      }
    }
  }
  auto saved = std::make_shared<RowMatrix<Scalar>>(std::move(xmat));
  return make_result<Scalar>(std::move(out), {x, weight, bias},
                             [saved, cin, cout, h, w, n_batch, p](Node<Scalar>& self) {
    RowMatrix<Scalar> dy(std::int64_t{cout} * 4, n_batch * p);
    for (int n = 0; n < n_batch; ++n) {
      for (int co = 0; co < cout; ++co) {
        const Scalar* src = self.grad.channel(n, co);
        for (int d = 0; d < 4; ++d) {
          Scalar* dst = dy.row(std::int64_t{co} * 4 + d).data() + n * p;
          const int di = d / 2, dj = d % 2;
          for (int i = 0; i < h; ++i) {
            const Scalar* grow = src + std::int64_t{2 * i + di} * (2 * w) + dj;
            Scalar* drow = dst + std::int64_t{i} * w;
            for (int j = 0; j < w; ++j) drow[j] = grow[2 * j];
          }
        }
      }
    }
    if (wants_grad(self, 1)) {
      Eigen::Map<RowMatrix<Scalar>> dw(input_grad(self, 1).data(), cin, std::int64_t{cout} * 4);
      dw.noalias() += (*saved) * dy.transpose();
    }
    if (wants_grad(self, 2)) {
      Eigen::Matrix<Scalar, Eigen::Dynamic, 1> rows = dy.rowwise().sum();
      auto& db = input_grad(self, 2).vec();
      for (int co = 0; co < cout; ++co) db[co] += rows.segment(std::int64_t{co} * 4, 4).sum();
    }
    if (wants_grad(self, 0)) {
      Eigen::Map<const RowMatrix<Scalar>> wmat(self.inputs[1]->value.data(), cin, std::int64_t{cout} * 4);
      RowMatrix<Scalar> dx(cin, n_batch * p);
      dx.noalias() = wmat * dy;
      Tensor<Scalar>& gx = input_grad(self, 0);
      for (int n = 0; n < n_batch; ++n) gx.sample(n) += dx.middleCols(n * p, p);
    }
  });
}

template <typename Scalar>
Var<Scalar> group_norm(const Var<Scalar>& x, int groups, const Var<Scalar>& gamma,
                       const Var<Scalar>& beta, Scalar eps) {
  const Shape& s = x->value.shape();
  if (groups <= 0 || s.c % groups != 0) {
    throw Error(ErrorKind::BadShape, "group_norm: channels not divisible by groups");
  }
  const int cg = s.c / groups;
  const std::int64_t plane = s.plane();
  const std::int64_t m = cg * plane;
  Tensor<Scalar> xhat(s);
  Tensor<Scalar> out(s);
  std::vector<Scalar> inv_std(static_cast<std::size_t>(s.n) * groups);
  for (int n = 0; n < s.n; ++n) {
    for (int g = 0; g < groups; ++g) {
      Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>> seg(x->value.channel(n, g * cg), m);
      const Scalar mean = seg.mean();
      const Scalar var = (seg - mean).square().mean();
      const Scalar istd = Scalar(1) / std::sqrt(var + eps);
      inv_std[static_cast<std::size_t>(n) * groups + g] = istd;
      Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>> xh(xhat.channel(n, g * cg), m);
      xh = (seg - mean) * istd;
    }
    for (int c = 0; c < s.c; ++c) {
      Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>> xh(xhat.channel(n, c), plane);
      Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>> o(out.channel(n, c), plane);
      o = xh * gamma->value.data()[c] + beta->value.data()[c];
    }
  }
  return make_result<Scalar>(std::move(out), {x, gamma, beta},
                             [xhat = std::move(xhat), inv_std = std::move(inv_std), groups, cg, plane,
                              m](Node<Scalar>& self) {
    const Shape& s = self.value.shape();
    const Scalar* gam = self.inputs[1]->value.data();
    for (int n = 0; n < s.n; ++n) {
      for (int c = 0; c < s.c; ++c) {
        Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>> dy(self.grad.channel(n, c), plane);
        Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>> xh(xhat.channel(n, c), plane);
        if (wants_grad(self, 1)) input_grad(self, 1).data()[c] += (dy * xh).sum();
        if (wants_grad(self, 2)) input_grad(self, 2).data()[c] += dy.sum();
      }
      if (!wants_grad(self, 0)) continue;
      for (int g = 0; g < groups; ++g) {
        Eigen::Array<Scalar, Eigen::Dynamic, 1> dxhat(m);
        for (int ci = 0; ci < cg; ++ci) {
          const int c = g * cg + ci;
          Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>> dy(self.grad.channel(n, c), plane);
          dxhat.segment(ci * plane, plane) = dy * gam[c];
        }
        Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>> xh(xhat.channel(n, g * cg), m);
        const Scalar sum_d = dxhat.sum();
        const Scalar sum_dx = (dxhat * xh).sum();
        const Scalar istd = inv_std[static_cast<std::size_t>(n) * groups + g];
        Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>> dx(input_grad(self, 0).channel(n, g * cg), m);
        dx += (istd / Scalar(m)) * (Scalar(m) * dxhat - sum_d - xh * sum_dx);
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> batch_norm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                       Tensor<Scalar>& running_mean, Tensor<Scalar>& running_var, bool training,
                       Scalar momentum, Scalar eps) {
  const Shape& s = x->value.shape();
  const std::int64_t plane = s.plane();
  const std::int64_t m = s.n * plane;
  Tensor<Scalar> xhat(s);
  Tensor<Scalar> out(s);
  std::vector<Scalar> inv_std(s.c);
  for (int c = 0; c < s.c; ++c) {
    Scalar mean, var;
    if (training) {
      Scalar sum = 0;
      for (int n = 0; n < s.n; ++n) {
        sum += Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>(x->value.channel(n, c), plane).sum();
      }
      mean = sum / Scalar(m);
      Scalar sq = 0;
      for (int n = 0; n < s.n; ++n) {
        sq += (Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>(x->value.channel(n, c), plane) - mean)
                  .square()
                  .sum();
      }
      var = sq / Scalar(m);
      const Scalar unbiased = m > 1 ? sq / Scalar(m - 1) : var;
      running_mean.data()[c] = (Scalar(1) - momentum) * running_mean.data()[c] + momentum * mean;
      running_var.data()[c] = (Scalar(1) - momentum) * running_var.data()[c] + momentum * unbiased;
    } else {
      mean = running_mean.data()[c];
      var = running_var.data()[c];
    }
    const Scalar istd = Scalar(1) / std::sqrt(var + eps);
    inv_std[c] = istd;
    for (int n = 0; n < s.n; ++n) {
      Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>> xi(x->value.channel(n, c), plane);
      Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>> xh(xhat.channel(n, c), plane);
      Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>> o(out.channel(n, c), plane);
      xh = (xi - mean) * istd;
      o = xh * gamma->value.data()[c] + beta->value.data()[c];
    }
  }
  return make_result<Scalar>(std::move(out), {x, gamma, beta},
                             [xhat = std::move(xhat), inv_std = std::move(inv_std), training, plane,
                              m](Node<Scalar>& self) {
    const Shape& s = self.value.shape();
    const Scalar* gam = self.inputs[1]->value.data();
    for (int c = 0; c < s.c; ++c) {
      Scalar sum_d = 0, sum_dx = 0;
      for (int n = 0; n < s.n; ++n) {
        Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>> dy(self.grad.channel(n, c), plane);
        Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>> xh(xhat.channel(n, c), plane);
        sum_d += dy.sum();
        sum_dx += (dy * xh).sum();
      }
      if (wants_grad(self, 1)) input_grad(self, 1).data()[c] += sum_dx;
      if (wants_grad(self, 2)) input_grad(self, 2).data()[c] += sum_d;
      if (!wants_grad(self, 0)) continue;
      const Scalar k = gam[c] * inv_std[c];
      for (int n = 0; n < s.n; ++n) {
        Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>> dy(self.grad.channel(n, c), plane);
        Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>> xh(xhat.channel(n, c), plane);
        Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>> dx(input_grad(self, 0).channel(n, c), plane);
        if (training) {
          dx += (k / Scalar(m)) * (Scalar(m) * dy - sum_d - xh * sum_dx);
        } else {
          dx += k * dy;
        }
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& x) {
  return unary<Scalar>(
      x, [](Scalar v) { return v > Scalar(0) ? v : Scalar(0); },
      [](const auto& xv, const auto&) {
        return Eigen::Array<Scalar, Eigen::Dynamic, 1>((xv > Scalar(0)).template cast<Scalar>());
      });
}

template <typename Scalar>
Var<Scalar> silu(const Var<Scalar>& x) {
  return unary<Scalar>(
      x, [](Scalar v) { return v / (Scalar(1) + std::exp(-v)); },
      [](const auto& xv, const auto&) {
        const Eigen::Array<Scalar, Eigen::Dynamic, 1> sig = (Scalar(1) + (-xv).exp()).inverse();
        return Eigen::Array<Scalar, Eigen::Dynamic, 1>(sig * (Scalar(1) + xv * (Scalar(1) - sig)));
      });
}

template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& x) {
  return unary<Scalar>(
      x, [](Scalar v) { return Scalar(1) / (Scalar(1) + std::exp(-v)); },
      [](const auto&, const auto& yv) {
        return Eigen::Array<Scalar, Eigen::Dynamic, 1>(yv * (Scalar(1) - yv));
      });
}

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a->value.shape() != b->value.shape()) {
    throw Error(ErrorKind::BadShape, "add: " + a->value.shape().str() + " vs " + b->value.shape().str());
  }
  Tensor<Scalar> out(a->value.shape());
  out.vec() = a->value.vec() + b->value.vec();
  return make_result<Scalar>(std::move(out), {a, b}, [](Node<Scalar>& self) {
    if (wants_grad(self, 0)) input_grad(self, 0).vec() += self.grad.vec();
    if (wants_grad(self, 1)) input_grad(self, 1).vec() += self.grad.vec();
  });
}

template <typename Scalar>
Var<Scalar> concat_channels(const Var<Scalar>& a, const Var<Scalar>& b) {
  const Shape& sa = a->value.shape();
  const Shape& sb = b->value.shape();
  if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w) {
    throw Error(ErrorKind::BadShape, "concat_channels: " + sa.str() + " vs " + sb.str());
  }
  Tensor<Scalar> out(sa.n, sa.c + sb.c, sa.h, sa.w);
  for (int n = 0; n < sa.n; ++n) {
    out.sample(n).topRows(sa.c) = a->value.sample(n);
    out.sample(n).bottomRows(sb.c) = b->value.sample(n);
  }
  const int ca = sa.c, cb = sb.c;
  return make_result<Scalar>(std::move(out), {a, b}, [ca, cb](Node<Scalar>& self) {
    for (int n = 0; n < self.grad.n(); ++n) {
      if (wants_grad(self, 0)) input_grad(self, 0).sample(n) += self.grad.sample(n).topRows(ca);
      if (wants_grad(self, 1)) input_grad(self, 1).sample(n) += self.grad.sample(n).bottomRows(cb);
    }
  });
}

template <typename Scalar>
Var<Scalar> channel_scale(const Var<Scalar>& x, const Var<Scalar>& gate) {
  const Shape& s = x->value.shape();
  const Shape& gs = gate->value.shape();
  if (gs.n != s.n || gs.c != s.c || gs.h != 1 || gs.w != 1) {
    throw Error(ErrorKind::BadShape, "channel_scale: gate " + gs.str() + " vs " + s.str());
  }
  Tensor<Scalar> out(s);
  for (int n = 0; n < s.n; ++n) {
    Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> g(gate->value.channel(n, 0), s.c);
    out.sample(n) = g.asDiagonal() * x->value.sample(n);
  }
  return make_result<Scalar>(std::move(out), {x, gate}, [](Node<Scalar>& self) {
    const Shape& s = self.value.shape();
    for (int n = 0; n < s.n; ++n) {
      const auto dy = self.grad.sample(n);
      if (wants_grad(self, 0)) {
        Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> g(self.inputs[1]->value.channel(n, 0), s.c);
        input_grad(self, 0).sample(n) += g.asDiagonal() * dy;
      }
      if (wants_grad(self, 1)) {
        Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> dg(input_grad(self, 1).channel(n, 0), s.c);
        dg += dy.cwiseProduct(self.inputs[0]->value.sample(n)).rowwise().sum();
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> global_avg_pool(const Var<Scalar>& x) {
  const Shape& s = x->value.shape();
  Tensor<Scalar> out(s.n, s.c, 1, 1);
  for (int n = 0; n < s.n; ++n) {
    Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(out.channel(n, 0), s.c) =
        x->value.sample(n).rowwise().mean();
  }
  return make_result<Scalar>(std::move(out), {x}, [](Node<Scalar>& self) {
    Tensor<Scalar>& dx = input_grad(self, 0);
    const Scalar inv = Scalar(1) / Scalar(dx.shape().plane());
    for (int n = 0; n < dx.n(); ++n) {
      Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> g(self.grad.channel(n, 0), dx.c());
      dx.sample(n).colwise() += g * inv;
    }
  });
}

template <typename Scalar>
Var<Scalar> max_pool2(const Var<Scalar>& x) {
  const Shape& s = x->value.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0) throw Error(ErrorKind::BadShape, "max_pool2: odd spatial size");
  const int ho = s.h / 2, wo = s.w / 2;
  Tensor<Scalar> out(s.n, s.c, ho, wo);
  std::vector<std::int32_t> argmax(static_cast<std::size_t>(out.size()));
  std::int64_t idx = 0;
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const Scalar* src = x->value.channel(n, c);
      Scalar* dst = out.channel(n, c);
      for (int i = 0; i < ho; ++i) {
        for (int j = 0; j < wo; ++j, ++idx) {
          std::int32_t best = (2 * i) * s.w + 2 * j;
          for (std::int32_t cand : {best + 1, best + s.w, best + s.w + 1}) {
            if (src[cand] > src[best]) best = cand;
          }
          argmax[static_cast<std::size_t>(idx)] = best;
          dst[i * wo + j] = src[best];
        }
      }
    }
  }
  return make_result<Scalar>(std::move(out), {x}, [argmax = std::move(argmax)](Node<Scalar>& self) {
    Tensor<Scalar>& dx = input_grad(self, 0);
    const std::int64_t plane_out = self.grad.shape().plane();
    std::int64_t idx = 0;
    for (int n = 0; n < dx.n(); ++n) {
      for (int c = 0; c < dx.c(); ++c) {
        Scalar* d = dx.channel(n, c);
        const Scalar* g = self.grad.channel(n, c);
        for (std::int64_t k = 0; k < plane_out; ++k, ++idx) d[argmax[static_cast<std::size_t>(idx)]] += g[k];
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> dropout(const Var<Scalar>& x, double p, bool training, std::mt19937_64* rng) {
  if (!training || p <= 0.0) return x;
  if (!rng) throw Error(ErrorKind::BadConfig, "dropout: training mode requires an rng");
  const Scalar keep_scale = Scalar(1.0 / (1.0 - p));
  Eigen::Array<Scalar, Eigen::Dynamic, 1> mask(x->value.size());
  for (Eigen::Index i = 0; i < mask.size(); ++i) {
    const double u = static_cast<double>((*rng)() >> 11) * 0x1.0p-53;
    mask[i] = u >= p ? keep_scale : Scalar(0);
  }
  Tensor<Scalar> out(x->value.shape());
  out.vec().array() = x->value.vec().array() * mask;
  return make_result<Scalar>(std::move(out), {x}, [mask = std::move(mask)](Node<Scalar>& self) {
    input_grad(self, 0).vec().array() += self.grad.vec().array() * mask;
  });
}

#define LUNARDEM_INSTANTIATE_OPS(S)                                                                   \
  template Var<S> conv2d(const Var<S>&, const Var<S>&, const Var<S>&, Conv2dOptions);                \
  template Var<S> conv_transpose2x2(const Var<S>&, const Var<S>&, const Var<S>&);                    \
  template Var<S> group_norm(const Var<S>&, int, const Var<S>&, const Var<S>&, S);                   \
  template Var<S> batch_norm(const Var<S>&, const Var<S>&, const Var<S>&, Tensor<S>&, Tensor<S>&,    \
                             bool, S, S);                                                            \
  template Var<S> relu(const Var<S>&);                                                               \
  template Var<S> silu(const Var<S>&);                                                               \
  template Var<S> sigmoid(const Var<S>&);                                                            \
  template Var<S> add(const Var<S>&, const Var<S>&);                                                 \
  template Var<S> concat_channels(const Var<S>&, const Var<S>&);                                     \
  template Var<S> channel_scale(const Var<S>&, const Var<S>&);                                       \
  template Var<S> global_avg_pool(const Var<S>&);                                                    \
  template Var<S> max_pool2(const Var<S>&);                                                          \
  template Var<S> dropout(const Var<S>&, double, bool, std::mt19937_64*);

LUNARDEM_INSTANTIATE_OPS(float)
LUNARDEM_INSTANTIATE_OPS(double)

}  // namespace lunardem::ops
