#include "leproto/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace leproto::backbone {

std::string kind_name(Kind k) {
  switch (k) {
    case Kind::kToyVit: return "toy-vit-no-posenc";
    case Kind::kToyCnn: return "toy-cnn-no-pool";
    case Kind::kPrecomputed: return "precomputed";
  }
  return "?";
}

Kind parse_kind(const std::string& s) {
  if (s == "toy-vit-no-posenc" || s == "toy-vit") return Kind::kToyVit;
  if (s == "toy-cnn-no-pool" || s == "toy-cnn") return Kind::kToyCnn;
  if (s == "precomputed") return Kind::kPrecomputed;
  throw std::invalid_argument("unknown backbone kind: " + s);
}

namespace {

const std::vector<std::string>& linear_names(Kind k) {
  static const std::vector<std::string> vit{"q", "k", "v", "o", "fc1", "fc2"};
  static const std::vector<std::string> cnn{"pw1", "pw2"};
  static const std::vector<std::string> none;
  return k == Kind::kToyVit ? vit : k == Kind::kToyCnn ? cnn : none;
}

}  // namespace

std::array<std::size_t, 3> BackboneConfig::default_taps(std::size_t depth) {
  return {depth / 4, depth / 2, 3 * depth / 4};
}

void BackboneConfig::validate() const {
  if (width == 0) throw std::invalid_argument("backbone width must be positive");
  if (grid_h == 0 || grid_w == 0) throw std::invalid_argument("backbone grid must be positive");
  if (kind == Kind::kPrecomputed) return;
  if (depth == 0) throw std::invalid_argument("backbone depth must be positive");
  if (input_dim == 0) throw std::invalid_argument("backbone input_dim must be positive");
  if (!(taps[0] < taps[1] && taps[1] < taps[2])) throw std::invalid_argument("taps not increasing");
  if (taps[2] >= depth) throw std::invalid_argument("tap index must be < depth");
  if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("dropout must be in [0, 1)");
  const auto& names = linear_names(kind);
  for (const auto& t : adapter_targets) {
    if (std::find(names.begin(), names.end(), t) == names.end()) {
      throw std::invalid_argument("adapter target '" + t + "' does not exist in " + kind_name(kind));
    }
  }
}

Var AdaptedLinear::forward(const Var& x, const ForwardContext& ctx) const {
  if (adapter) return adapter->forward(x, weight, bias, ctx);
  return ops::linear(x, weight, bias);
}

AdaptedLinear& Backbone::Block::linear(const std::string& name) {
  for (auto& [n, l] : linears)
    if (n == name) return l;
  throw std::out_of_range("no linear named " + name);
}

const AdaptedLinear& Backbone::Block::linear(const std::string& name) const {
  for (const auto& [n, l] : linears)
    if (n == name) return l;
  throw std::out_of_range("no linear named " + name);
}

Backbone::Backbone(const BackboneConfig& config, ParamStore& store, std::uint64_t seed) : config_(config) {
  config_.validate();
  if (config_.kind == Kind::kPrecomputed) return;
  Rng rng(mix_seed(seed, 0xBAC0B0));
  const std::size_t D = config_.width;
  std::size_t count = 0;
  auto add = [&](const std::string& name, Tensor t) {
    count += t.size();
    return store.add("backbone." + name, std::move(t), ParamRole::kFrozen);
  };
  auto dense = [&](const std::string& name, std::size_t out, std::size_t in) {
    AdaptedLinear l;
    l.weight = add(name + ".w", rng.normal_tensor({out, in}, 1.0 / std::sqrt(static_cast<double>(in))));
    l.bias = add(name + ".b", Tensor({out}, 0.0));
    return l;
  };
  AdaptedLinear embed = dense("embed", D, config_.input_dim);
  embed_w_ = embed.weight;
  embed_b_ = embed.bias;
  for (std::size_t i = 0; i < config_.depth; ++i) {
    const std::string p = "block" + std::to_string(i) + ".";
    Block b;
    b.ln1_gamma = add(p + "ln1.gamma", Tensor({D}, 1.0));
    b.ln1_beta = add(p + "ln1.beta", Tensor({D}, 0.0));
    if (config_.kind == Kind::kToyVit) {
      b.ln2_gamma = add(p + "ln2.gamma", Tensor({D}, 1.0));
      b.ln2_beta = add(p + "ln2.beta", Tensor({D}, 0.0));
      for (const char* n : {"q", "k", "v", "o"}) b.linears.emplace_back(n, dense(p + n, D, D));
      b.linears.emplace_back("fc1", dense(p + "fc1", 2 * D, D));
      b.linears.emplace_back("fc2", dense(p + "fc2", D, 2 * D));
    } else {
      b.linears.emplace_back("pw1", dense(p + "pw1", D, D));
      b.dw_kernel = add(p + "dw.kernel", rng.normal_tensor({D, 3, 3}, 1.0 / 3.0));
      b.dw_bias = add(p + "dw.bias", Tensor({D}, 0.0));
      b.linears.emplace_back("pw2", dense(p + "pw2", D, D));
    }
    blocks_.push_back(std::move(b));
  }
  base_parameter_count_ = count;
}

void Backbone::attach_adapters(const AdapterConfig& config, ParamStore& store, std::size_t concept_dim, Rng& rng) {
  if (config.mode == AdapterMode::kNone) return;
  if (config_.kind == Kind::kPrecomputed) throw std::invalid_argument("a precomputed backbone cannot carry adapters");
  if (adapters_attached_) throw std::logic_error("adapters already attached");
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    for (const auto& target : config_.adapter_targets) {
      auto& l = blocks_[i].linear(target);
      const auto& ws = l.weight.shape();
      l.adapter.emplace(store, "adapter.block" + std::to_string(i) + "." + target, config, ws[1], ws[0], concept_dim,
                        rng);
    }
  }
  adapters_attached_ = true;
}

std::vector<const AdapterLayer*> Backbone::adapters() const {
  std::vector<const AdapterLayer*> out;
  for (const auto& b : blocks_)
    for (const auto& [n, l] : b.linears)
      if (l.adapter) out.push_back(&*l.adapter);
  return out;
}

Var Backbone::maybe_dropout(const Var& x, const ForwardContext& ctx) const {
  if (!ctx.training || config_.dropout <= 0.0) return x;
  if (!ctx.rng) throw std::invalid_argument("training forward requires an rng for dropout");
  return ops::dropout(x, config_.dropout, *ctx.rng);
}

Var Backbone::block_forward(const Block& b, const Var& x, const ForwardContext& ctx) const {
  const std::size_t D = config_.width;
  if (config_.kind == Kind::kToyVit) {
    Var h = ops::layer_norm_last(x, b.ln1_gamma, b.ln1_beta);
    Var q = b.linear("q").forward(h, ctx);
    Var k = b.linear("k").forward(h, ctx);
    Var v = b.linear("v").forward(h, ctx);
    Var scores = ops::scale(ops::bmm(q, ops::transpose_last2(k)), 1.0 / std::sqrt(static_cast<double>(D)));
    Var attended = ops::bmm(ops::softmax_last(scores), v);
    Var x1 = ops::add(x, maybe_dropout(b.linear("o").forward(attended, ctx), ctx));
    Var h2 = ops::layer_norm_last(x1, b.ln2_gamma, b.ln2_beta);
    Var m = b.linear("fc2").forward(ops::gelu(b.linear("fc1").forward(h2, ctx)), ctx);
    return ops::add(x1, maybe_dropout(m, ctx));
  }
  const std::size_t B = x.shape()[0];
  Var h = ops::layer_norm_last(x, b.ln1_gamma, b.ln1_beta);
  Var p1 = b.linear("pw1").forward(h, ctx);
  Var spatial = ops::reshape(p1, {B, config_.grid_h, config_.grid_w, D});
  Var dw = ops::reshape(ops::depthwise_conv2d(spatial, b.dw_kernel, b.dw_bias), {B, config_.patches(), D});
  Var p2 = b.linear("pw2").forward(ops::gelu(dw), ctx);
  return ops::add(x, maybe_dropout(p2, ctx));
}

std::vector<Var> Backbone::block_outputs(const Var& tokens, const ForwardContext& ctx) const {
  const auto& s = tokens.shape();
  if (s.size() != 3 || s[1] != config_.patches() || s[2] != config_.input_dim) {
    throw ShapeError("backbone input " + shape_string(s) + " does not match [B, " + std::to_string(config_.patches()) +
                     ", " + std::to_string(config_.input_dim) + "]");
  }
  std::vector<Var> outs;
  Var x = ops::linear(tokens, embed_w_, embed_b_);
  for (const auto& b : blocks_) {
    x = block_forward(b, x, ctx);
    outs.push_back(x);
  }
  return outs;
}

MultiDepthFeatures Backbone::extract(const BatchInput& input, const ForwardContext& ctx) const {
  if (config_.kind == Kind::kPrecomputed) {
    if (!input.taps) throw ShapeError("precomputed backbone needs tap features in the batch");
    const auto& t = *input.taps;
    for (const auto& v : t) {
      const auto& s = v.shape();
      if (s.size() != 3 || s[1] != config_.patches() || s[2] != config_.width) {
        throw ShapeError("precomputed tap " + shape_string(s) + " does not match grid/width");
      }
    }
    return {t[0], t[1], t[2], t[3]};
  }
  if (!input.tokens.defined()) throw ShapeError("backbone needs input tokens");
  auto outs = block_outputs(input.tokens, ctx);
  return {outs[config_.taps[0]], outs[config_.taps[1]], outs[config_.taps[2]], outs.back()};
}

}  // namespace leproto::backbone
