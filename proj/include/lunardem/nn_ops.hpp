#pragma once

// Differentiable tensor operations used by the network. Each op computes its
// forward value eagerly and records a backward closure when gradients are
// required (see autograd.hpp). Instantiated for float and double.

#include "lunardem/autograd.hpp"

#include <random>

namespace lunardem::ops {

struct Conv2dOptions {
  int stride = 1;
  int padding = 0;
  int groups = 1;
};

/// weight: [Cout, Cin / groups, k, k]; bias: [1, Cout, 1, 1] or null.
/// Supports groups == 1 and depthwise (groups == Cin == Cout).
template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias,
                   Conv2dOptions options = {});

/// Stride-2, kernel-2 transposed convolution. weight: [Cin, Cout, 2, 2].
template <typename Scalar>
Var<Scalar> conv_transpose2x2(const Var<Scalar>& x, const Var<Scalar>& weight,
                              const Var<Scalar>& bias);

template <typename Scalar>
Var<Scalar> group_norm(const Var<Scalar>& x, int groups, const Var<Scalar>& gamma,
                       const Var<Scalar>& beta, Scalar eps = Scalar(1e-5));

/// Running statistics are updated in place when training is true.
template <typename Scalar>
Var<Scalar> batch_norm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                       Tensor<Scalar>& running_mean, Tensor<Scalar>& running_var, bool training,
                       Scalar momentum = Scalar(0.1), Scalar eps = Scalar(1e-3));

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& x);

template <typename Scalar>
Var<Scalar> silu(const Var<Scalar>& x);

template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& x);

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b);

template <typename Scalar>
Var<Scalar> concat_channels(const Var<Scalar>& a, const Var<Scalar>& b);

/// x: [N, C, H, W] scaled per (n, c) by gate: [N, C, 1, 1].
template <typename Scalar>
Var<Scalar> channel_scale(const Var<Scalar>& x, const Var<Scalar>& gate);

/// [N, C, H, W] -> [N, C, 1, 1]
template <typename Scalar>
Var<Scalar> global_avg_pool(const Var<Scalar>& x);

/// 2x2 max pooling with stride 2.
template <typename Scalar>
Var<Scalar> max_pool2(const Var<Scalar>& x);

/// Inverted dropout. Identity when training is false or p == 0.
template <typename Scalar>
Var<Scalar> dropout(const Var<Scalar>& x, double p, bool training, std::mt19937_64* rng);

}  // namespace lunardem::ops
