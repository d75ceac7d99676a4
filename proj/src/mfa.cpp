#include "leproto/mfa.hpp"

#include <cmath>
#include <string>

namespace leproto::mfa {

MfaParams MfaParams::create(ParamStore& store, std::size_t dim, std::size_t concepts, Rng& rng) {
  auto dense = [&](const std::string& name, std::size_t out, std::size_t in, Var& w, Var& b) {
    w = store.add(name + ".w", rng.normal_tensor({out, in}, 1.0 / std::sqrt(static_cast<double>(in))),
                  ParamRole::kTrainable);
    b = store.add(name + ".b", Tensor({out}, 0.0), ParamRole::kTrainable);
  };
  MfaParams p;
  const char* names[3] = {"low", "mid", "high"};
  for (std::size_t i = 0; i < 3; ++i) {
    const std::string prefix = std::string("mfa.") + names[i];
    auto& l = p.levels[i];
    dense(prefix + ".channel", dim, 2 * dim, l.channel_w, l.channel_b);
    l.spatial_kernel = store.add(prefix + ".spatial.kernel", rng.normal_tensor({1, 3, 3}, 1.0 / 3.0),
                                 ParamRole::kTrainable);
    l.spatial_bias = store.add(prefix + ".spatial.bias", Tensor({1}, 0.0), ParamRole::kTrainable);
  }
  auto& a = p.aggregator;
  dense("mfa.mlp.fc1", dim, 3 * dim, a.fc1_w, a.fc1_b);
  dense("mfa.mlp.fc2", concepts, dim, a.fc2_w, a.fc2_b);
  a.norm_gamma = store.add("mfa.norm.gamma", Tensor({concepts}, 1.0), ParamRole::kNoDecay);
  a.norm_beta = store.add("mfa.norm.beta", Tensor({concepts}, 0.0), ParamRole::kNoDecay);
  return p;
}

Var recalibrate(const Var& z_level, const Var& z_out, const LevelParams& params, std::size_t grid_h,
                std::size_t grid_w, bool zero_gate) {
  const auto& s = z_level.shape();
  if (s.size() != 3 || z_out.shape() != s) {
    throw ShapeError("recalibrate: " + shape_string(s) + " vs " + shape_string(z_out.shape()));
  }
  if (s[1] != grid_h * grid_w) throw ShapeError("recalibrate: R does not match the grid");
  if (params.channel_w.shape() != Shape{s[2], 2 * s[2]}) throw ShapeError("recalibrate: channel weight shape");
  if (zero_gate) return ops::add(z_level, ops::mul(constant(Tensor(s, 0.0)), z_level));
  Var joint = ops::concat_last({z_level, z_out});
  Var u_c = ops::sigmoid(ops::linear(ops::mean_axis(joint, 1, true), params.channel_w, params.channel_b));
  Var avg = ops::reshape(ops::mean_axis(joint, 2, true), {s[0], grid_h, grid_w, 1});
  Var u_s = ops::sigmoid(
      ops::reshape(ops::depthwise_conv2d(avg, params.spatial_kernel, params.spatial_bias), {s[0], s[1], 1}));
  Var u = ops::mul(u_s, u_c);
  return ops::add(z_level, ops::mul(u, z_level));
}

Var aggregate(const Var& e_low, const Var& e_mid, const Var& e_high, const AggregatorParams& params) {
  if (e_low.shape() != e_mid.shape() || e_low.shape() != e_high.shape() || e_low.shape().size() != 3) {
    throw ShapeError("aggregate: level shapes differ");
  }
  Var pooled = ops::mean_axis(ops::concat_last({e_low, e_mid, e_high}), 1);
  Var hidden = ops::gelu(ops::linear(pooled, params.fc1_w, params.fc1_b));
  return ops::layer_norm_last(ops::linear(hidden, params.fc2_w, params.fc2_b), params.norm_gamma, params.norm_beta);
}

Var fuse(const Var& h, const Var& e_all) {
  if (h.shape() != e_all.shape()) throw ShapeError("fuse: " + shape_string(h.shape()) + " vs " + shape_string(e_all.shape()));
  return ops::add(h, e_all);
}

}  // namespace leproto::mfa
