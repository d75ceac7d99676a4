#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "leproto/adapters.hpp"
#include "leproto/params.hpp"

namespace leproto::backbone {

enum class Kind {
  kToyVit,       // pre-norm transformer blocks, single-head attention, no positional encoding
  kToyCnn,       // residual depthwise-separable conv blocks, no pooling
  kPrecomputed,  // taps are read from the dataset
};

std::string kind_name(Kind k);
Kind parse_kind(const std::string& s);

struct BackboneConfig {
  Kind kind = Kind::kToyVit;
  std::size_t depth = 4;
  std::size_t width = 32;       // D
  std::size_t input_dim = 32;   // token width fed to the input embedding
  std::size_t grid_h = 4;
  std::size_t grid_w = 4;
  std::array<std::size_t, 3> taps{1, 2, 3};  // block indices of the low/mid/high taps
  double dropout = 0.0;
  // Linear maps that receive adapters: vit {q, k, v, o, fc1, fc2}; cnn {pw1, pw2}.
  std::vector<std::string> adapter_targets{"q", "v"};

  std::size_t patches() const { return grid_h * grid_w; }
  void validate() const;
  // Taps at (depth/4, depth/2, 3*depth/4).
  static std::array<std::size_t, 3> default_taps(std::size_t depth);
};

// Z_L, Z_M, Z_H and Z_O, each [B, R, D].
struct MultiDepthFeatures {
  Var low, mid, high, out;
};

struct BatchInput {
  Var tokens;                         // [B, R, D_in]
  std::optional<std::array<Var, 4>> taps;  // precomputed features
};

// One frozen linear map, optionally carrying an adapter.
struct AdaptedLinear {
  Var weight;  // [out, in]
  Var bias;    // [out]
  std::optional<AdapterLayer> adapter;

  Var forward(const Var& x, const ForwardContext& ctx) const;
};

class Backbone {
 public:
  // Registers frozen base parameters under "backbone." in the store.
  Backbone(const BackboneConfig& config, ParamStore& store, std::uint64_t seed);

  // Attaches adapters to every configured target in every block.
  void attach_adapters(const AdapterConfig& config, ParamStore& store, std::size_t concept_dim, Rng& rng);
  bool has_adapters() const { return adapters_attached_; }

  MultiDepthFeatures extract(const BatchInput& input, const ForwardContext& ctx) const;

  // Output of every block (index b -> output of block b), for tap checks.
  std::vector<Var> block_outputs(const Var& tokens, const ForwardContext& ctx) const;

  const BackboneConfig& config() const { return config_; }
  std::size_t base_parameter_count() const { return base_parameter_count_; }
  std::vector<const AdapterLayer*> adapters() const;

 private:
  struct Block {
    Var ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
    // vit: q, k, v, o, fc1, fc2; cnn: pw1, pw2 plus a depthwise kernel.
    std::vector<std::pair<std::string, AdaptedLinear>> linears;
    Var dw_kernel, dw_bias;

    AdaptedLinear& linear(const std::string& name);
    const AdaptedLinear& linear(const std::string& name) const;
  };

  Var block_forward(const Block& b, const Var& x, const ForwardContext& ctx) const;
  Var maybe_dropout(const Var& x, const ForwardContext& ctx) const;

  BackboneConfig config_;
  Var embed_w_, embed_b_;
  std::vector<Block> blocks_;
  std::size_t base_parameter_count_ = 0;
  bool adapters_attached_ = false;
};

}  // namespace leproto::backbone
