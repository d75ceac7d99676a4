#pragma once

#include <span>
#include <string>

#include "leproto/ops.hpp"

namespace leproto::losses {

enum class CdInput {
  kPooled,     // per-image concept feature h, before fusion
  kPatchMean,  // mean of the smoothed activations over patches
};

std::string cd_input_name(CdInput c);
CdInput parse_cd_input(const std::string& s);

struct LossConfig {
  double kappa = 0.07;
  double lambda = 0.003;
  double logit_scale = 10.0;
  CdInput cd_input = CdInput::kPooled;

  void validate() const;
};

// 0.003 for one-shot episodes, 0.001 otherwise.
double default_lambda(std::size_t k_shot);

// -(1/C) sum_i log softmax(a / kappa)_i, averaged over rows of a [B, C].
Var concept_discrimination_loss(const Var& a, double kappa);
// Mean cross-entropy of softmax(logit_scale * m) against labels.
Var classification_loss(const Var& m, std::span<const int> labels, double logit_scale);
Var total_loss(const Var& l_cls, const Var& l_cd, double lambda);

}  // namespace leproto::losses
