#pragma once

#include <array>
#include <cstddef>

#include "leproto/ops.hpp"
#include "leproto/params.hpp"

// Multi-level feature aggregation: each tapped depth is recalibrated against
// the final block output, the three results are pooled, projected to the
// concept axis and added to the concept feature.
namespace leproto::mfa {

struct LevelParams {
  Var channel_w, channel_b;         // [D, 2D], [D]
  Var spatial_kernel, spatial_bias;  // [1, 3, 3], [1]
};

struct AggregatorParams {
  Var fc1_w, fc1_b;  // [D, 3D], [D]
  Var fc2_w, fc2_b;  // [C, D], [C]
  Var norm_gamma, norm_beta;  // [C]
};

struct MfaParams {
  std::array<LevelParams, 3> levels;  // low, mid, high
  AggregatorParams aggregator;

  static MfaParams create(ParamStore& store, std::size_t dim, std::size_t concepts, Rng& rng);
};

// E = Z + U * Z with U = sigmoid(channel map) * sigmoid(spatial map) computed
// from concat(Z, Z_O). zero_gate forces U = 0.
Var recalibrate(const Var& z_level, const Var& z_out, const LevelParams& params, std::size_t grid_h,
                std::size_t grid_w, bool zero_gate = false);
// [B, R, D] x3 -> [B, C].
Var aggregate(const Var& e_low, const Var& e_mid, const Var& e_high, const AggregatorParams& params);
Var fuse(const Var& h, const Var& e_all);

}  // namespace leproto::mfa
