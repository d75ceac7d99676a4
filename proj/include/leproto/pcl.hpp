#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "leproto/ops.hpp"
#include "leproto/params.hpp"

// Prototypical concept learner: activation scores against the concept bank,
// temperature smoothing, depthwise refinement and pooling to per-image concept
// features, class prototypes and cosine similarity.
namespace leproto::pcl {

enum class ActivationMode {
  kStandardCosine,      // <F, P> / (|F| |P|)
  kLiteralSquaredNorm,  // <F, P> / (|F|^2 |P|^2)
};

std::string activation_mode_name(ActivationMode m);
ActivationMode parse_activation_mode(const std::string& s);

struct ConceptLearner {
  Var concepts;                   // P [C, D]
  Var conv1_kernel, conv1_bias;   // [C, 1, 1], [C]
  Var conv3_kernel, conv3_bias;   // [C, 3, 3], [C]
  Var norm_gamma, norm_beta;      // [C]

  std::size_t num_concepts() const { return concepts.shape()[0]; }
  std::size_t dim() const { return concepts.shape()[1]; }

  static ConceptLearner create(ParamStore& store, std::size_t concepts, std::size_t dim, Rng& rng);
};

// Rows with norm below 1e-8 are redrawn from N(0, 1).
void reinit_degenerate_rows(Tensor& p, Rng& rng);

// F [B, R, D], P [C, D] -> A [B, R, C].
Var activation_scores(const Var& features, const Var& concepts, ActivationMode mode = ActivationMode::kStandardCosine);
// Softmax of A / tau over the concept axis.
Var smooth_activations(const Var& a, double tau);
// A~ [B, R, C] -> h [B, C]: depthwise 1x1 + 3x3 conv, layer norm over concepts, spatial max.
Var concept_features(const Var& a_tilde, std::size_t grid_h, std::size_t grid_w, const ConceptLearner& learner,
                     bool bypass_norm = false);
// h_support [N, K, C] -> CP [N, C].
Var class_prototypes(const Var& h_support);
// h_q [Q, C], CP [N, C] -> M [Q, N].
Var similarity(const Var& h_query, const Var& prototypes);
// Row argmax, ties to the lowest index.
std::vector<int> predict(const Tensor& m);

}  // namespace leproto::pcl
