#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "leproto/ops.hpp"
#include "leproto/params.hpp"

// Mixture of low-rank adaptation experts: gating network G, threshold network
// T, filtered importance and the normalized expert combination.
namespace leproto::mole {

// Two-layer perceptron in -> hidden -> out with a GELU in between.
struct Perceptron {
  Var w1, b1, w2, b2;

  Var forward(const Var& x) const;
  std::size_t in_dim() const { return w1.shape()[1]; }
  std::size_t out_dim() const { return w2.shape()[0]; }

  static Perceptron create(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t hidden,
                           std::size_t out, Rng& rng);
};

struct ExpertBank {
  std::vector<Var> a;  // each [rank, d_in]
  std::vector<Var> b;  // each [d_out, rank]
  std::size_t rank = 0;
  std::size_t d_in = 0;
  std::size_t d_out = 0;
  double alpha = 1.0;
  double dropout = 0.0;

  std::size_t experts() const { return a.size(); }

  // A ~ N(0, 1/rank), B = 0.
  static ExpertBank create(ParamStore& store, const std::string& prefix, std::size_t experts, std::size_t d_in,
                           std::size_t d_out, std::size_t rank, double alpha, double dropout, Rng& rng);
};

enum class Normalization {
  kImportanceSum,      // e_i / sum_j e_j (the displayed formula, default)
  kGateWeightedSum,    // e_i / sum_j e_j * g_j (variant named in the surrounding text)
};

std::string normalization_name(Normalization n);
Normalization parse_normalization(const std::string& s);

// g = softmax(G(z)) over the expert axis.
Var gate(const Var& z, const Perceptron& gating);

// epsilon = sigmoid(T(z)) / E, shape [..., 1].
Var threshold(const Var& z, const Perceptron& thresholding, std::size_t experts);

// e = g - epsilon where g >= epsilon, else 0.
Var filter_gates(const Var& g, const Var& epsilon);

// Normalized combination weights; zero rows where sum e == 0.
Var combination_weights(const Var& e, Normalization mode = Normalization::kImportanceSum, const Var& g = Var());

// Per-expert low-rank outputs B_i A_i z.
std::vector<Var> expert_outputs(const Var& z, const ExpertBank& bank);

// z_MoLE = sum_i w_i * (B_i A_i z) with w from combination_weights.
Var combine_experts(const Var& z, const ExpertBank& bank, const Var& e,
                    Normalization mode = Normalization::kImportanceSum, const Var& g = Var());

// Same combination given precomputed expert outputs.
Var combine_outputs(const std::vector<Var>& outputs, const Var& weights);

// W0 z + b0 + alpha * update.
Var adapted_forward(const Var& z, const Var& w0, const Var& b0, const Var& update, double alpha);

// Per-layer routing counters, exported as structured text after evaluation.
struct LayerRouting {
  std::size_t positions = 0;
  std::size_t fallback_positions = 0;        // sum e == 0
  std::vector<std::size_t> active_counts;    // per expert, e_i > 0
};

struct RoutingStats {
  std::map<std::string, LayerRouting> layers;

  void record(const std::string& layer, const Tensor& importance);
  void merge(const RoutingStats& other);
  nlohmann::json to_json() const;
};

}  // namespace leproto::mole
