#include "leproto/model.hpp"

#include <stdexcept>

namespace leproto {

void ModelConfig::validate() const {
  backbone.validate();
  if (concepts == 0) throw std::invalid_argument("concepts must be positive");
  if (!(tau > 0.0)) throw std::invalid_argument("tau must be positive");
  if (adapter.mode != AdapterMode::kNone) {
    if (adapter.experts == 0) throw std::invalid_argument("experts must be positive");
    if (adapter.rank == 0) throw std::invalid_argument("rank must be positive");
    if (backbone.kind == backbone::Kind::kPrecomputed) {
      throw std::invalid_argument("adapters need a trainable-path backbone; use adapter mode none with precomputed taps");
    }
  }
}

namespace {

ParamStore& validated(const ModelConfig& c, ParamStore& s) {
  c.validate();
  return s;
}

}  // namespace

LeProtoNet::LeProtoNet(const ModelConfig& config)
    : config_(config), backbone_(config_.backbone, validated(config_, store_), config_.seed) {
  Rng rng(mix_seed(config_.seed, 0x9C1));
  pcl_ = pcl::ConceptLearner::create(store_, config_.concepts, config_.backbone.width, rng);
  backbone_.attach_adapters(config_.adapter, store_, config_.backbone.width, rng);
  if (config_.use_mfa) mfa_ = mfa::MfaParams::create(store_, config_.backbone.width, config_.concepts, rng);
}

FeatureTrace LeProtoNet::features(const backbone::BatchInput& input, const RunOptions& opts) const {
  ForwardContext ctx;
  ctx.training = opts.training;
  ctx.rng = opts.rng;
  ctx.concepts = pcl_.concepts;
  ctx.concept_guidance = opts.concept_guidance;
  ctx.routing = opts.routing;
  FeatureTrace t;
  t.taps = backbone_.extract(input, ctx);
  const auto& bc = config_.backbone;
  t.a = pcl::activation_scores(t.taps.out, pcl_.concepts, config_.activation_mode);
  t.a_tilde = pcl::smooth_activations(t.a, config_.tau);
  t.h = pcl::concept_features(t.a_tilde, bc.grid_h, bc.grid_w, pcl_, config_.bypass_concept_norm);
  if (mfa_) {
    const auto& lv = mfa_->levels;
    Var el = mfa::recalibrate(t.taps.low, t.taps.out, lv[0], bc.grid_h, bc.grid_w, opts.zero_mfa_gate);
    Var em = mfa::recalibrate(t.taps.mid, t.taps.out, lv[1], bc.grid_h, bc.grid_w, opts.zero_mfa_gate);
    Var eh = mfa::recalibrate(t.taps.high, t.taps.out, lv[2], bc.grid_h, bc.grid_w, opts.zero_mfa_gate);
    t.e_all = mfa::aggregate(el, em, eh, mfa_->aggregator);
    t.fused = mfa::fuse(t.h, t.e_all);
  } else {
    t.fused = t.h;
  }
  return t;
}

backbone::BatchInput batch_input(const episodes::EpisodeBatch& batch) {
  backbone::BatchInput in;
  if (!batch.tokens.empty()) in.tokens = constant(batch.tokens);
  if (batch.has_taps) {
    in.taps = std::array<Var, 4>{constant(batch.taps[0]), constant(batch.taps[1]), constant(batch.taps[2]),
                                 constant(batch.taps[3])};
  }
  return in;
}

EpisodeResult LeProtoNet::episode_forward(const episodes::EpisodeBatch& batch, const losses::LossConfig& loss,
                                          const RunOptions& opts) const {
  const std::size_t n = batch.n_way, k = batch.k_shot;
  const std::size_t n_support = batch.support_labels.size(), n_query = batch.query_labels.size();
  if (n == 0 || k == 0 || n_support != n * k) throw std::invalid_argument("episode batch has inconsistent support");
  for (std::size_t i = 0; i < n_support; ++i) {
    if (batch.support_labels[i] != static_cast<int>(i / k)) {
      throw std::invalid_argument("support rows must be class-major");
    }
  }
  EpisodeResult r;
  r.trace = features(batch_input(batch), opts);
  std::vector<std::size_t> s_idx(n_support), q_idx(n_query);
  for (std::size_t i = 0; i < n_support; ++i) s_idx[i] = i;
  for (std::size_t i = 0; i < n_query; ++i) q_idx[i] = n_support + i;
  const std::size_t c = config_.concepts;
  Var h_support = ops::reshape(ops::index_select0(r.trace.fused, s_idx), {n, k, c});
  r.prototypes = pcl::class_prototypes(h_support);
  r.similarity = pcl::similarity(ops::index_select0(r.trace.fused, q_idx), r.prototypes);
  r.predictions = pcl::predict(r.similarity.value());
  r.l_cls = losses::classification_loss(r.similarity, batch.query_labels, loss.logit_scale);
  Var cd_in = loss.cd_input == losses::CdInput::kPooled ? r.trace.h : ops::mean_axis(r.trace.a_tilde, 1);
  r.l_cd = losses::concept_discrimination_loss(cd_in, loss.kappa);
  r.loss = losses::total_loss(r.l_cls, r.l_cd, loss.lambda);
  return r;
}

}  // namespace leproto
