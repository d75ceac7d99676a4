#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "leproto/backbone.hpp"
#include "leproto/episodes.hpp"
#include "leproto/losses.hpp"
#include "leproto/mfa.hpp"
#include "leproto/pcl.hpp"

namespace leproto {

struct ModelConfig {
  backbone::BackboneConfig backbone;
  AdapterConfig adapter;
  std::size_t concepts = 312;
  double tau = 0.1;
  pcl::ActivationMode activation_mode = pcl::ActivationMode::kStandardCosine;
  bool bypass_concept_norm = false;
  bool use_mfa = true;
  std::uint64_t seed = 0;

  void validate() const;
};

struct RunOptions {
  bool training = false;
  Rng* rng = nullptr;
  mole::RoutingStats* routing = nullptr;
  bool concept_guidance = true;
  bool zero_mfa_gate = false;
};

struct FeatureTrace {
  backbone::MultiDepthFeatures taps;
  Var a;        // [B, R, C]
  Var a_tilde;  // [B, R, C]
  Var h;        // [B, C], before fusion
  Var e_all;    // [B, C], undefined without MFA
  Var fused;    // [B, C]
};

struct EpisodeResult {
  FeatureTrace trace;
  Var prototypes;  // [N, C]
  Var similarity;  // [Q, N]
  Var l_cls, l_cd, loss;
  std::vector<int> predictions;
};

class LeProtoNet {
 public:
  explicit LeProtoNet(const ModelConfig& config);
  LeProtoNet(const LeProtoNet&) = delete;
  LeProtoNet& operator=(const LeProtoNet&) = delete;

  FeatureTrace features(const backbone::BatchInput& input, const RunOptions& opts = {}) const;
  EpisodeResult episode_forward(const episodes::EpisodeBatch& batch, const losses::LossConfig& loss,
                                const RunOptions& opts = {}) const;

  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }
  const ModelConfig& config() const { return config_; }
  const backbone::Backbone& backbone() const { return backbone_; }
  const pcl::ConceptLearner& concept_learner() const { return pcl_; }
  const std::optional<mfa::MfaParams>& mfa() const { return mfa_; }

 private:
  ModelConfig config_;
  ParamStore store_;
  backbone::Backbone backbone_;
  pcl::ConceptLearner pcl_;
  std::optional<mfa::MfaParams> mfa_;
};

backbone::BatchInput batch_input(const episodes::EpisodeBatch& batch);

}  // namespace leproto
