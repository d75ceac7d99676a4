#include "leproto/adapters.hpp"

#include <algorithm>
#include <stdexcept>

namespace leproto {

std::string adapter_mode_name(AdapterMode m) {
  switch (m) {
    case AdapterMode::kNone: return "none";
    case AdapterMode::kLora: return "lora";
    case AdapterMode::kMole: return "mole";
    case AdapterMode::kPcm: return "pcm";
  }
  return "?";
}

AdapterMode parse_adapter_mode(const std::string& s) {
  if (s == "none") return AdapterMode::kNone;
  if (s == "lora") return AdapterMode::kLora;
  if (s == "mole") return AdapterMode::kMole;
  if (s == "pcm") return AdapterMode::kPcm;
  throw std::invalid_argument("unknown adapter mode: " + s);
}

AdapterLayer::AdapterLayer(ParamStore& store, std::string name, const AdapterConfig& config, std::size_t d_in,
                           std::size_t d_out, std::size_t concept_dim, Rng& rng)
    : name_(std::move(name)), config_(config) {
  if (config.mode == AdapterMode::kNone) throw std::invalid_argument("AdapterLayer with mode none");
  const std::size_t experts = config.mode == AdapterMode::kLora ? 1 : config.experts;
  bank_ = mole::ExpertBank::create(store, name_, experts, d_in, d_out, config.rank, config.alpha, config.dropout, rng);
  if (config.mode == AdapterMode::kLora) return;
  const std::size_t hidden = std::max<std::size_t>(1, d_in / 4);
  gating_ = mole::Perceptron::create(store, name_ + ".gate", d_in, hidden, experts, rng);
  thresholding_ = mole::Perceptron::create(store, name_ + ".threshold", d_in, hidden, 1, rng);
  if (config.mode == AdapterMode::kPcm) {
    attention_ = pcm::ConceptAttention::create(store, name_, experts, concept_dim, config.attn_key_dim,
                                               config.attn_value_dim, rng);
  }
}

Var AdapterLayer::update(const Var& z, const ForwardContext& ctx) const {
  Var expert_in = z;
  if (ctx.training && bank_.dropout > 0.0) {
    if (!ctx.rng) throw std::invalid_argument("training forward requires an rng for dropout");
    expert_in = ops::dropout(z, bank_.dropout, *ctx.rng);
  }
  if (config_.mode == AdapterMode::kLora) {
    return ops::linear(ops::linear(expert_in, bank_.a[0]), bank_.b[0]);
  }
  if (config_.mode == AdapterMode::kPcm) {
    if (!ctx.concepts.defined()) throw std::invalid_argument("concept-guided adapter needs the concept bank");
    if (ctx.concepts.shape()[1] != attention_->concept_dim()) {
      throw ShapeError("concept bank width " + std::to_string(ctx.concepts.shape()[1]) +
                       " does not match attention key width " + std::to_string(attention_->concept_dim()));
    }
    auto trace = pcm::pcm_forward(z, expert_in, ctx.concepts, bank_, *gating_, *thresholding_, *attention_,
                                  config_.normalization, ctx.concept_guidance);
    if (ctx.routing) ctx.routing->record(name_, trace.e_tilde.value());
    return trace.update;
  }
  Var g = mole::gate(z, *gating_);
  Var e = config_.use_threshold ? mole::filter_gates(g, mole::threshold(z, *thresholding_, bank_.experts())) : g;
  if (ctx.routing) ctx.routing->record(name_, e.value());
  return mole::combine_experts(expert_in, bank_, e, config_.normalization, g);
}

Var AdapterLayer::forward(const Var& z, const Var& w0, const Var& b0, const ForwardContext& ctx) const {
  return mole::adapted_forward(z, w0, b0, update(z, ctx), bank_.alpha);
}

}  // namespace leproto
