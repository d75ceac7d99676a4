#include "leproto/pcl.hpp"

#include <cmath>
#include <stdexcept>

namespace leproto::pcl {

std::string activation_mode_name(ActivationMode m) {
  return m == ActivationMode::kStandardCosine ? "standard-cosine" : "literal-squared-norm";
}

ActivationMode parse_activation_mode(const std::string& s) {
  if (s == "standard-cosine") return ActivationMode::kStandardCosine;
  if (s == "literal-squared-norm") return ActivationMode::kLiteralSquaredNorm;
  throw std::invalid_argument("unknown activation mode: " + s);
}

void reinit_degenerate_rows(Tensor& p, Rng& rng) {
  const std::size_t rows = p.shape()[0], cols = p.shape()[1];
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = p.data().data() + r * cols;
    for (;;) {
      double sq = 0.0;
      for (std::size_t c = 0; c < cols; ++c) sq += row[c] * row[c];
      if (std::sqrt(sq) >= 1e-8) break;
      for (std::size_t c = 0; c < cols; ++c) row[c] = rng.normal();
    }
  }
}

ConceptLearner ConceptLearner::create(ParamStore& store, std::size_t concepts, std::size_t dim, Rng& rng) {
  if (concepts == 0 || dim == 0) throw std::invalid_argument("concept bank needs C > 0 and D > 0");
  Tensor p = rng.normal_tensor({concepts, dim}, 1.0);
  reinit_degenerate_rows(p, rng);
  ConceptLearner l;
  l.concepts = store.add("pcl.concepts", std::move(p), ParamRole::kNoDecay);
  l.conv1_kernel = store.add("pcl.conv1.kernel", Tensor({concepts, 1, 1}, 1.0), ParamRole::kTrainable);
  l.conv1_bias = store.add("pcl.conv1.bias", Tensor({concepts}, 0.0), ParamRole::kTrainable);
  l.conv3_kernel = store.add("pcl.conv3.kernel", rng.normal_tensor({concepts, 3, 3}, 0.1), ParamRole::kTrainable);
  l.conv3_bias = store.add("pcl.conv3.bias", Tensor({concepts}, 0.0), ParamRole::kTrainable);
  l.norm_gamma = store.add("pcl.norm.gamma", Tensor({concepts}, 1.0), ParamRole::kNoDecay);
  l.norm_beta = store.add("pcl.norm.beta", Tensor({concepts}, 0.0), ParamRole::kNoDecay);
  return l;
}

Var activation_scores(const Var& features, const Var& concepts, ActivationMode mode) {
  if (features.shape().size() != 3 || concepts.shape().size() != 2 || features.shape()[2] != concepts.shape()[1]) {
    throw ShapeError("activation_scores: features " + shape_string(features.shape()) + " vs concepts " +
                     shape_string(concepts.shape()));
  }
  const double power = mode == ActivationMode::kStandardCosine ? 1.0 : 2.0;
  return ops::linear(ops::normalize_rows(features, power), ops::normalize_rows(concepts, power));
}

Var smooth_activations(const Var& a, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("tau must be positive");
  return ops::softmax_last(ops::scale(a, 1.0 / tau));
}

Var concept_features(const Var& a_tilde, std::size_t grid_h, std::size_t grid_w, const ConceptLearner& learner,
                     bool bypass_norm) {
  const auto& s = a_tilde.shape();
  if (s.size() != 3) throw ShapeError("concept_features expects [B, R, C]");
  if (s[1] != grid_h * grid_w) {
    throw ShapeError("R = " + std::to_string(s[1]) + " is not factorable as grid " + std::to_string(grid_h) + "x" +
                     std::to_string(grid_w));
  }
  if (s[2] != learner.num_concepts()) throw ShapeError("concept_features: concept count mismatch");
  Var spatial = ops::reshape(a_tilde, {s[0], grid_h, grid_w, s[2]});
  Var sum = ops::add(ops::depthwise_conv2d(spatial, learner.conv1_kernel, learner.conv1_bias),
                     ops::depthwise_conv2d(spatial, learner.conv3_kernel, learner.conv3_bias));
  if (!bypass_norm) sum = ops::layer_norm_last(sum, learner.norm_gamma, learner.norm_beta);
  return ops::max_axis(ops::reshape(sum, {s[0], s[1], s[2]}), 1);
}

Var class_prototypes(const Var& h_support) {
  if (h_support.shape().size() != 3 || h_support.shape()[1] == 0) {
    throw ShapeError("class_prototypes expects [N, K, C] with K >= 1");
  }
  return ops::mean_axis(h_support, 1);
}

Var similarity(const Var& h_query, const Var& prototypes) {
  if (h_query.shape().size() != 2 || prototypes.shape().size() != 2 ||
      h_query.shape()[1] != prototypes.shape()[1]) {
    throw ShapeError("similarity: " + shape_string(h_query.shape()) + " vs " + shape_string(prototypes.shape()));
  }
  return ops::linear(ops::normalize_rows(h_query), ops::normalize_rows(prototypes));
}

std::vector<int> predict(const Tensor& m) {
  if (m.rank() != 2) throw ShapeError("predict expects [Q, N]");
  const std::size_t rows = m.shape()[0], cols = m.shape()[1];
  std::vector<int> out(rows, 0);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < cols; ++c)
      if (m[r * cols + c] > m[r * cols + best]) best = c;
    out[r] = static_cast<int>(best);
  }
  return out;
}

}  // namespace leproto::pcl
