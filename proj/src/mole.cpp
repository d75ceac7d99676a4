#include "leproto/mole.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace leproto::mole {

Var Perceptron::forward(const Var& x) const { return ops::linear(ops::gelu(ops::linear(x, w1, b1)), w2, b2); }

Perceptron Perceptron::create(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t hidden,
                              std::size_t out, Rng& rng) {
  Perceptron p;
  p.w1 = store.add(prefix + ".w1", rng.normal_tensor({hidden, in}, 1.0 / std::sqrt(static_cast<double>(in))),
                   ParamRole::kTrainable);
  p.b1 = store.add(prefix + ".b1", Tensor({hidden}, 0.0), ParamRole::kTrainable);
  p.w2 = store.add(prefix + ".w2", rng.normal_tensor({out, hidden}, 1.0 / std::sqrt(static_cast<double>(hidden))),
                   ParamRole::kTrainable);
  p.b2 = store.add(prefix + ".b2", Tensor({out}, 0.0), ParamRole::kTrainable);
  return p;
}

ExpertBank ExpertBank::create(ParamStore& store, const std::string& prefix, std::size_t experts, std::size_t d_in,
                              std::size_t d_out, std::size_t rank, double alpha, double dropout, Rng& rng) {
  if (experts == 0) throw std::invalid_argument("expert bank needs at least one expert");
  if (rank == 0 || rank > std::min(d_in, d_out)) {
    throw std::invalid_argument("rank " + std::to_string(rank) + " must be in [1, min(d_in, d_out)]");
  }
  ExpertBank bank;
  bank.rank = rank;
  bank.d_in = d_in;
  bank.d_out = d_out;
  bank.alpha = alpha;
  bank.dropout = dropout;
  const double a_std = 1.0 / std::sqrt(static_cast<double>(rank));
  for (std::size_t i = 0; i < experts; ++i) {
    bank.a.push_back(store.add(prefix + ".expert" + std::to_string(i) + ".A", rng.normal_tensor({rank, d_in}, a_std),
                               ParamRole::kTrainable));
    bank.b.push_back(
        store.add(prefix + ".expert" + std::to_string(i) + ".B", Tensor({d_out, rank}, 0.0), ParamRole::kTrainable));
  }
  return bank;
}

std::string normalization_name(Normalization n) {
  return n == Normalization::kImportanceSum ? "importance-sum" : "gate-weighted-sum";
}

Normalization parse_normalization(const std::string& s) {
  if (s == "importance-sum") return Normalization::kImportanceSum;
  if (s == "gate-weighted-sum") return Normalization::kGateWeightedSum;
  throw std::invalid_argument("unknown normalization: " + s);
}

Var gate(const Var& z, const Perceptron& gating) {
  if (!z.value().all_finite()) throw std::domain_error("gate: non-finite input");
  return ops::softmax_last(gating.forward(z));
}

Var threshold(const Var& z, const Perceptron& thresholding, std::size_t experts) {
  if (!z.value().all_finite()) throw std::domain_error("threshold: non-finite input");
  if (thresholding.out_dim() != 1) throw ShapeError("threshold network must have a single output");
  // sigmoid(x) rounds to 1 for x > ~37; the cap keeps epsilon strictly below 1/E.
  const double inv_e = 1.0 / static_cast<double>(experts);
  const double cap = std::nextafter(inv_e, 0.0);
  Var logits = thresholding.forward(z);
  const Tensor& x = logits.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(inv_e / (1.0 + std::exp(-x[i])), cap);
  return make_node(std::move(out), {logits}, [inv_e, cap](Node& n) {
    const Tensor& xv = n.parents[0]->value;
    Tensor gx(xv.shape(), 0.0);
    for (std::size_t i = 0; i < gx.size(); ++i) {
      if (n.value[i] >= cap) continue;
      const double s = 1.0 / (1.0 + std::exp(-xv[i]));
      gx[i] = n.grad[i] * inv_e * s * (1.0 - s);
    }
    n.parents[0]->accumulate(gx);
  });
}

Var filter_gates(const Var& g, const Var& epsilon) { return ops::clip_below_zero(ops::sub(g, epsilon)); }

Var combination_weights(const Var& e, Normalization mode, const Var& g) {
  if (mode == Normalization::kGateWeightedSum) {
    if (!g.defined()) throw std::invalid_argument("gate-weighted normalization needs the gate tensor");
    return ops::normalize_by_sum_last(e, g);
  }
  return ops::normalize_by_sum_last(e);
}

std::vector<Var> expert_outputs(const Var& z, const ExpertBank& bank) {
  if (z.shape().back() != bank.d_in) throw ShapeError("expert input width mismatch");
  std::vector<Var> outs;
  outs.reserve(bank.experts());
  for (std::size_t i = 0; i < bank.experts(); ++i) outs.push_back(ops::linear(ops::linear(z, bank.a[i]), bank.b[i]));
  return outs;
}

Var combine_outputs(const std::vector<Var>& outputs, const Var& weights) {
  if (weights.shape().back() != outputs.size()) throw ShapeError("combination weight count mismatch");
  Var acc;
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    Var term = ops::mul(ops::slice_last(weights, i, i + 1), outputs[i]);
    acc = acc.defined() ? ops::add(acc, term) : term;
  }
  return acc;
}

Var combine_experts(const Var& z, const ExpertBank& bank, const Var& e, Normalization mode, const Var& g) {
  if (e.shape().back() != bank.experts()) throw ShapeError("importance width must equal expert count");
  return combine_outputs(expert_outputs(z, bank), combination_weights(e, mode, g));
}

Var adapted_forward(const Var& z, const Var& w0, const Var& b0, const Var& update, double alpha) {
  Var base = ops::linear(z, w0, b0);
  if (!update.defined()) return base;
  return ops::add(base, ops::scale(update, alpha));
}

void RoutingStats::record(const std::string& layer, const Tensor& importance) {
  const std::size_t E = importance.shape().back();
  const std::size_t rows = importance.size() / E;
  auto& l = layers[layer];
  if (l.active_counts.empty()) l.active_counts.assign(E, 0);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t i = 0; i < E; ++i) {
      double v = importance[r * E + i];
      s += v;
      if (v > 0.0) ++l.active_counts[i];
    }
    if (s == 0.0) ++l.fallback_positions;
  }
  l.positions += rows;
}

void RoutingStats::merge(const RoutingStats& other) {
  for (const auto& [name, o] : other.layers) {
    auto& l = layers[name];
    if (l.active_counts.empty()) l.active_counts.assign(o.active_counts.size(), 0);
    l.positions += o.positions;
    l.fallback_positions += o.fallback_positions;
    for (std::size_t i = 0; i < o.active_counts.size(); ++i) l.active_counts[i] += o.active_counts[i];
  }
}

nlohmann::json RoutingStats::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [name, l] : layers) {
    std::vector<double> freq;
    for (auto c : l.active_counts) freq.push_back(l.positions ? static_cast<double>(c) / l.positions : 0.0);
    j[name] = {{"positions", l.positions},
               {"expert_activation_frequency", freq},
               {"fallback_rate", l.positions ? static_cast<double>(l.fallback_positions) / l.positions : 0.0}};
  }
  return j;
}

}  // namespace leproto::mole
