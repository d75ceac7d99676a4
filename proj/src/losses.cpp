#include "leproto/losses.hpp"

#include <stdexcept>

namespace leproto::losses {

std::string cd_input_name(CdInput c) { return c == CdInput::kPooled ? "pooled-per-image" : "per-patch-mean"; }

CdInput parse_cd_input(const std::string& s) {
  if (s == "pooled-per-image") return CdInput::kPooled;
  if (s == "per-patch-mean") return CdInput::kPatchMean;
  throw std::invalid_argument("unknown cd_input: " + s);
}

void LossConfig::validate() const {
  if (!(kappa > 0.0)) throw std::invalid_argument("kappa must be positive");
  if (!(lambda >= 0.0)) throw std::invalid_argument("lambda must be nonnegative");
  if (!(logit_scale > 0.0)) throw std::invalid_argument("logit_scale must be positive");
}

double default_lambda(std::size_t k_shot) { return k_shot == 1 ? 0.003 : 0.001; }

Var concept_discrimination_loss(const Var& a, double kappa) {
  if (!(kappa > 0.0)) throw std::invalid_argument("kappa must be positive");
  return ops::scale(ops::mean_all(ops::log_softmax_last(ops::scale(a, 1.0 / kappa))), -1.0);
}

Var classification_loss(const Var& m, std::span<const int> labels, double logit_scale) {
  if (!(logit_scale > 0.0)) throw std::invalid_argument("logit_scale must be positive");
  return ops::nll_mean(ops::log_softmax_last(ops::scale(m, logit_scale)), labels);
}

Var total_loss(const Var& l_cls, const Var& l_cd, double lambda) {
  if (lambda == 0.0) return l_cls;
  return ops::add(l_cls, ops::scale(l_cd, lambda));
}

}  // namespace leproto::losses
