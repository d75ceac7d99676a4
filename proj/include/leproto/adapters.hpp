#pragma once

#include <optional>
#include <string>

#include "leproto/mole.hpp"
#include "leproto/pcm.hpp"

namespace leproto {

enum class AdapterMode {
  kNone,  // frozen backbone only
  kLora,  // single low-rank expert, no gating
  kMole,  // gated, thresholded mixture
  kPcm,   // mixture with concept-guided gating
};

std::string adapter_mode_name(AdapterMode m);
AdapterMode parse_adapter_mode(const std::string& s);

struct AdapterConfig {
  AdapterMode mode = AdapterMode::kPcm;
  std::size_t experts = 3;
  std::size_t rank = 8;
  double alpha = 32.0;
  double dropout = 0.1;
  std::size_t attn_key_dim = 16;
  std::size_t attn_value_dim = 16;
  mole::Normalization normalization = mole::Normalization::kImportanceSum;
  bool use_threshold = true;
};

// Per-forward state shared by all adapted layers.
struct ForwardContext {
  bool training = false;
  Rng* rng = nullptr;                     // dropout source; required when training
  Var concepts;                           // concept bank for guided gating
  bool concept_guidance = true;           // false: fused gate := raw gate
  mole::RoutingStats* routing = nullptr;  // optional routing counters
};

// Low-rank adapter attached to one frozen linear map W0 (d_in -> d_out).
class AdapterLayer {
 public:
  // concept_dim is the concept-bank row width, used only by guided gating.
  AdapterLayer(ParamStore& store, std::string name, const AdapterConfig& config, std::size_t d_in, std::size_t d_out,
               std::size_t concept_dim, Rng& rng);

  // Adapter update before alpha scaling (z_MoLE).
  Var update(const Var& z, const ForwardContext& ctx) const;
  // W0 z + b0 + alpha * update(z).
  Var forward(const Var& z, const Var& w0, const Var& b0, const ForwardContext& ctx) const;

  const std::string& name() const { return name_; }
  const AdapterConfig& config() const { return config_; }
  const mole::ExpertBank& bank() const { return bank_; }
  const std::optional<mole::Perceptron>& gating() const { return gating_; }
  const std::optional<mole::Perceptron>& thresholding() const { return thresholding_; }
  const std::optional<pcm::ConceptAttention>& attention() const { return attention_; }

 private:
  std::string name_;
  AdapterConfig config_;
  mole::ExpertBank bank_;
  std::optional<mole::Perceptron> gating_;
  std::optional<mole::Perceptron> thresholding_;
  std::optional<pcm::ConceptAttention> attention_;
};

}  // namespace leproto
