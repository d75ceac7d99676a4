#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "leproto/autograd.hpp"
#include "leproto/random.hpp"

// Differentiable tensor operations. Unless stated otherwise "last" refers to
// the trailing axis and binary elementwise ops broadcast NumPy-style.
namespace leproto::ops {

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);

// x[..., in] * W[out, in]^T (+ b[out]).
Var linear(const Var& x, const Var& weight, const Var& bias = Var());
// x[..., k] * m[k, n].
Var matmul(const Var& x, const Var& m);
// Batched a[B, m, k] * b[B, k, n].
Var bmm(const Var& a, const Var& b);
// a[B, m, n] -> [B, n, m].
Var transpose_last2(const Var& a);

Var sigmoid(const Var& a);
Var gelu(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);

Var softmax_last(const Var& a);
Var log_softmax_last(const Var& a);
// softmax(scale * q k^T) v with keys shared across rows: q[..., d], k[C, d], v[C, dv].
Var attend(const Var& q, const Var& k, const Var& v, double scale);

// y = x where x >= 0, else 0. The boundary x == 0 belongs to the active branch.
Var clip_below_zero(const Var& a);

// y_i = e_i / sum_j e_j along the last axis; rows whose sum is exactly zero
// produce zeros (and zero gradient). If `weights` is given the denominator is
// sum_j e_j * weights_j instead.
Var normalize_by_sum_last(const Var& e, const Var& weights = Var());

// x / max(||x||_2, floor)^power along the last axis.
Var normalize_rows(const Var& x, double power = 1.0, double floor = 1e-12);

Var sum_axis(const Var& a, std::size_t axis, bool keepdim = false);
Var mean_axis(const Var& a, std::size_t axis, bool keepdim = false);
Var sum_all(const Var& a);
Var mean_all(const Var& a);
// Max along an axis; ties resolve to the lowest index.
Var max_axis(const Var& a, std::size_t axis);

Var layer_norm_last(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);

Var concat_last(const std::vector<Var>& parts);
Var slice_last(const Var& a, std::size_t begin, std::size_t end);
Var reshape(const Var& a, Shape shape);
// Rows of a along axis 0.
Var index_select0(const Var& a, std::span<const std::size_t> indices);

// Channels-last depthwise 2-D convolution, stride 1, zero padding k/2.
// x[B, H, W, Ch], kernel[Ch, k, k], bias[Ch] (optional).
Var depthwise_conv2d(const Var& x, const Var& kernel, const Var& bias = Var());

// Mean negative log-likelihood of log-probabilities logp[N, K] at labels.
Var nll_mean(const Var& logp, std::span<const int> labels);

// Inverted dropout; identity when rate == 0.
Var dropout(const Var& a, double rate, Rng& rng);

}  // namespace leproto::ops
