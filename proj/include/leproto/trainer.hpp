#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "leproto/model.hpp"

namespace leproto::trainer {

struct OptimizerConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;  // not applied to kNoDecay parameters
  double grad_clip = 0.0;      // global L2 norm; 0 disables
};

struct TrainConfig {
  std::size_t epochs = 80;
  std::size_t episodes_per_epoch = 500;
  std::size_t warmup_epochs = 15;
  double base_lr = 1e-2;
  OptimizerConfig optimizer;
  std::size_t n_way = 5;
  std::size_t k_shot = 1;
  std::size_t q_queries = 15;
  std::uint64_t seed = 0;
  std::optional<double> lambda;  // unset: 0.003 for 1-shot, 0.001 otherwise
  double kappa = 0.07;
  double logit_scale = 10.0;
  losses::CdInput cd_input = losses::CdInput::kPooled;

  std::size_t total_steps() const { return epochs * episodes_per_epoch; }
  std::size_t warmup_steps() const { return warmup_epochs * episodes_per_epoch; }
  losses::LossConfig loss_config() const;
  void validate() const;
};

// Linear warmup from 0 to base_lr, then cosine decay to 0 at total_steps.
double lr_at(std::size_t step, const TrainConfig& config);

// Decoupled weight decay Adam over the trainable entries of a store.
class AdamW {
 public:
  AdamW(ParamStore& store, OptimizerConfig config);
  // Applies one update from the gradients currently held by the store.
  // Returns the global gradient norm before clipping.
  double step(double lr);
  std::size_t steps() const { return t_; }

 private:
  struct Slot {
    Var param;
    bool decay;
    std::vector<double> m, v;
  };
  OptimizerConfig config_;
  std::vector<Slot> slots_;
  std::size_t t_ = 0;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0.0;
  double l_cls = 0.0;
  double l_cd = 0.0;
  double accuracy = 0.0;  // query accuracy over the epoch's episodes, percent
  double lr = 0.0;        // rate used by the epoch's last step
  double grad_norm = 0.0; // mean pre-clip norm
};

struct TrainReport {
  std::vector<EpochRecord> history;
  std::size_t steps = 0;
  nlohmann::json to_json() const;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

// One episode per optimizer step. Episode i is sampled with seed mix_seed(config.seed, i);
// dropout draws come from `rng`.
TrainReport train(LeProtoNet& net, const TrainConfig& config, const episodes::DatasetIndex& base, Rng& rng,
                  const EpochCallback& on_epoch = {});

// ---- evaluation ---------------------------------------------------------

struct EvalProtocol {
  std::size_t n_way = 5;
  std::size_t k_shot = 1;
  std::size_t q_queries = 15;
  std::size_t episodes = 600;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

struct EvalReport {
  double mean_accuracy = 0.0;  // percent
  double ci95 = 0.0;           // percent half-width, 1.96 * population std / sqrt(n)
  std::size_t episode_count = 0;
  std::vector<double> accuracies;

  nlohmann::json to_json() const;
  static EvalReport from_accuracies(std::vector<double> accuracies);
};

class EpisodeScorer {
 public:
  virtual ~EpisodeScorer() = default;
  // Predicted local labels for the batch's query rows.
  virtual std::vector<int> predict(const episodes::EpisodeBatch& batch, const episodes::Episode& episode,
                                   mole::RoutingStats* routing) const = 0;
};

class ModelScorer : public EpisodeScorer {
 public:
  explicit ModelScorer(const LeProtoNet& net) : net_(net) {}
  std::vector<int> predict(const episodes::EpisodeBatch& batch, const episodes::Episode& episode,
                           mole::RoutingStats* routing) const override;

 private:
  const LeProtoNet& net_;
};

// Uniform random labels drawn from the episode seed.
class RandomScorer : public EpisodeScorer {
 public:
  std::vector<int> predict(const episodes::EpisodeBatch& batch, const episodes::Episode& episode,
                           mole::RoutingStats* routing) const override;
};

// Episode i uses seed mix_seed(protocol.seed, i); results do not depend on threads.
EvalReport evaluate(const EpisodeScorer& scorer, const episodes::DatasetIndex& novel, const EvalProtocol& protocol,
                    mole::RoutingStats* routing = nullptr);

// Throws if any class label appears in both indices.
void check_disjoint(const episodes::DatasetIndex& base, const episodes::DatasetIndex& novel);

// ---- checkpoints --------------------------------------------------------

struct Checkpoint {
  nlohmann::json config;
  std::map<std::string, Tensor> params;
  std::string rng_state;
  nlohmann::json extra = nlohmann::json::object();
};

void save_checkpoint(const std::filesystem::path& dir, const LeProtoNet& net, const nlohmann::json& config,
                     const std::string& rng_state, const nlohmann::json& extra = nlohmann::json::object());
Checkpoint load_checkpoint(const std::filesystem::path& dir);

// ---- gradient checks ----------------------------------------------------

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // Relative error is |a - n| / max(|a|, |n|, denominator_floor).
  double denominator_floor = 1e-6;
  // Inputs are redrawn when a non-smooth decision sits closer than this.
  double kink_margin = 1e-6;
  std::size_t max_resamples = 50;
  std::uint64_t seed = 0;
};

struct GradGroupResult {
  std::string name;
  std::size_t elements = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
};

struct GradCheckReport {
  std::string component;
  std::vector<GradGroupResult> groups;
  double max_rel_error = 0.0;
  std::size_t resamples = 0;
  bool passed = false;
  nlohmann::json to_json() const;
};

// A differentiable scalar with named parameter groups. resample() redraws inputs.
struct GradProblem {
  std::vector<std::pair<std::string, Var>> groups;
  std::function<Var()> loss;
  std::function<void(Rng&)> resample;
};

GradCheckReport run_grad_check(const std::string& component, GradProblem& problem, const GradCheckOptions& options);

// Components: linear, mole, pcm, pcl, mfa, losses, chain.
const std::vector<std::string>& grad_check_components();
GradCheckReport grad_check(const std::string& component, const GradCheckOptions& options = {});

}  // namespace leproto::trainer
