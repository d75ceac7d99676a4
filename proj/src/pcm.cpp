#include "leproto/pcm.hpp"

#include <cmath>

namespace leproto::pcm {

ConceptAttention ConceptAttention::create(ParamStore& store, const std::string& prefix, std::size_t experts,
                                          std::size_t concept_dim, std::size_t d_k, std::size_t d_v, Rng& rng) {
  if (d_k == 0 || d_v == 0) throw std::invalid_argument("attention dims must be positive");
  auto init = [&](Shape s) {
    double fan_in = static_cast<double>(s[1]);
    return rng.normal_tensor(std::move(s), 1.0 / std::sqrt(fan_in));
  };
  ConceptAttention a;
  a.query = store.add(prefix + ".attn.query", init({d_k, experts}), ParamRole::kTrainable);
  a.key = store.add(prefix + ".attn.key", init({d_k, concept_dim}), ParamRole::kTrainable);
  a.value = store.add(prefix + ".attn.value", init({d_v, concept_dim}), ParamRole::kTrainable);
  a.output = store.add(prefix + ".attn.output", init({experts, d_v}), ParamRole::kTrainable);
  return a;
}

Var concept_align(const Var& g, const Var& concepts, const ConceptAttention& attn) {
  if (concepts.shape().size() != 2 || concepts.shape()[1] != attn.concept_dim()) {
    throw ShapeError("concept bank " + shape_string(concepts.shape()) + " does not match key projection " +
                     shape_string(attn.key.shape()));
  }
  if (g.shape().back() != attn.experts()) throw ShapeError("gate width does not match attention query projection");
  // scores = (g Wq^T)(P Wk^T)^T = g (P Wk^T Wq)^T, so keys are projected into gate space once.
  Var key_query = ops::matmul(ops::linear(concepts, attn.key), attn.query);     // [C, E]
  Var value_out = ops::linear(ops::linear(concepts, attn.value), attn.output);  // [C, E]
  Var mixed = ops::attend(g, key_query, value_out, 1.0 / std::sqrt(static_cast<double>(attn.key_dim())));
  return ops::softmax_last(mixed);  // [..., E]
}

Var fuse_gates(const Var& g, const Var& g_prime) {
  if (g.shape() != g_prime.shape()) throw ShapeError("fuse_gates shape mismatch");
  return ops::add(g, g_prime);
}

Tensor expert_concept_attention(const Var& concepts, const ConceptAttention& attn) {
  NoGradGuard guard;
  const std::size_t E = attn.experts();
  Tensor eye({E, E}, 0.0);
  for (std::size_t i = 0; i < E; ++i) eye[i * E + i] = 1.0;
  Var keys = ops::linear(concepts, attn.key);
  Var scores = ops::scale(ops::linear(ops::linear(constant(eye), attn.query), keys),
                          1.0 / std::sqrt(static_cast<double>(attn.key_dim())));
  return ops::softmax_last(scores).value();
}

PcmTrace pcm_forward(const Var& z, const Var& expert_input, const Var& concepts, const mole::ExpertBank& bank,
                     const mole::Perceptron& gating, const mole::Perceptron& thresholding,
                     const ConceptAttention& attn, mole::Normalization normalization, bool guidance) {
  PcmTrace t;
  t.g = mole::gate(z, gating);
  if (guidance) {
    t.g_prime = concept_align(t.g, concepts, attn);
    t.g_tilde = fuse_gates(t.g, t.g_prime);
  } else {
    t.g_tilde = t.g;
  }
  t.epsilon = mole::threshold(z, thresholding, bank.experts());
  t.e_tilde = mole::filter_gates(t.g_tilde, t.epsilon);
  t.update = mole::combine_experts(expert_input, bank, t.e_tilde, normalization, t.g_tilde);
  return t;
}

}  // namespace leproto::pcm
