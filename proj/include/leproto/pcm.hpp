#pragma once

#include "leproto/mole.hpp"

// Concept-guided gating: the gate is aligned onto the concept bank by
// attention, fused with the raw gate, re-thresholded and used to combine the
// experts.
namespace leproto::pcm {

// Queries come from the gate (E -> d_k); keys and values from concept rows
// (D -> d_k, D -> d_v); attention runs over the C concepts and the result is
// projected back to E expert logits.
struct ConceptAttention {
  Var query;   // [d_k, E]
  Var key;     // [d_k, D]
  Var value;   // [d_v, D]
  Var output;  // [E, d_v]

  std::size_t experts() const { return query.shape()[1]; }
  std::size_t key_dim() const { return query.shape()[0]; }
  std::size_t concept_dim() const { return key.shape()[1]; }

  static ConceptAttention create(ParamStore& store, const std::string& prefix, std::size_t experts,
                                 std::size_t concept_dim, std::size_t d_k, std::size_t d_v, Rng& rng);
};

// g' = softmax(Attn(g, P)).
Var concept_align(const Var& g, const Var& concepts, const ConceptAttention& attn);

// g~ = g + g'.
Var fuse_gates(const Var& g, const Var& g_prime);

// Attention distribution of each expert's one-hot query over the concepts, [E, C].
Tensor expert_concept_attention(const Var& concepts, const ConceptAttention& attn);

struct PcmTrace {
  Var g;
  Var g_prime;
  Var g_tilde;
  Var epsilon;
  Var e_tilde;
  Var update;  // z~_MoLE
};

// Full guided path. With guidance == false the fused gate is replaced by g,
// which reduces to the plain mixture path.
PcmTrace pcm_forward(const Var& z, const Var& expert_input, const Var& concepts, const mole::ExpertBank& bank,
                     const mole::Perceptron& gating, const mole::Perceptron& thresholding,
                     const ConceptAttention& attn, mole::Normalization normalization, bool guidance = true);

}  // namespace leproto::pcm
