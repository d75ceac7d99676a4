#include "leproto/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <set>
#include <thread>

#include "leproto/container.hpp"

namespace leproto::trainer {

losses::LossConfig TrainConfig::loss_config() const {
  losses::LossConfig c;
  c.kappa = kappa;
  c.lambda = lambda ? *lambda : losses::default_lambda(k_shot);
  c.logit_scale = logit_scale;
  c.cd_input = cd_input;
  return c;
}

void TrainConfig::validate() const {
  if (epochs == 0 || episodes_per_epoch == 0) throw std::invalid_argument("epochs and episodes_per_epoch must be positive");
  if (warmup_epochs >= epochs) throw std::invalid_argument("warmup_epochs must be < epochs");
  if (!(base_lr > 0.0)) throw std::invalid_argument("base_lr must be positive");
  if (n_way < 2 || k_shot == 0 || q_queries == 0) throw std::invalid_argument("episode shape needs n_way >= 2, k_shot >= 1, q_queries >= 1");
  if (optimizer.weight_decay < 0.0 || optimizer.grad_clip < 0.0) throw std::invalid_argument("weight_decay and grad_clip must be >= 0");
  loss_config().validate();
}

double lr_at(std::size_t step, const TrainConfig& config) {
  const double base = config.base_lr;
  const std::size_t warmup = config.warmup_steps(), total = config.total_steps();
  if (step < warmup) return base * static_cast<double>(step) / static_cast<double>(warmup);
  if (total <= warmup) return base;
  double t = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  t = std::clamp(t, 0.0, 1.0);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

AdamW::AdamW(ParamStore& store, OptimizerConfig config) : config_(config) {
  for (const auto& e : store.entries()) {
    if (e.role == ParamRole::kFrozen) continue;
    const std::size_t n = e.var.value().size();
    slots_.push_back({e.var, e.role == ParamRole::kTrainable, std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)});
  }
}

double AdamW::step(double lr) {
  double sq = 0.0;
  for (const auto& s : slots_)
    for (double g : s.param.grad().data()) sq += g * g;
  const double norm = std::sqrt(sq);
  const double clip = config_.grad_clip > 0.0 && norm > config_.grad_clip ? config_.grad_clip / norm : 1.0;
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (auto& s : slots_) {
    const Tensor& g = s.param.grad();
    if (g.empty()) continue;
    auto p = s.param.mutable_value().data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i] * clip;
      s.m[i] = config_.beta1 * s.m[i] + (1.0 - config_.beta1) * gi;
      s.v[i] = config_.beta2 * s.v[i] + (1.0 - config_.beta2) * gi * gi;
      const double update = (s.m[i] / bc1) / (std::sqrt(s.v[i] / bc2) + config_.eps);
      if (s.decay) p[i] -= lr * config_.weight_decay * p[i];
      p[i] -= lr * update;
    }
  }
  return norm;
}

nlohmann::json TrainReport::to_json() const {
  nlohmann::json h = nlohmann::json::array();
  for (const auto& r : history) {
    h.push_back({{"epoch", r.epoch},
                 {"loss", r.loss},
                 {"l_cls", r.l_cls},
                 {"l_cd", r.l_cd},
                 {"accuracy", r.accuracy},
                 {"lr", r.lr},
                 {"grad_norm", r.grad_norm}});
  }
  return {{"steps", steps}, {"history", h}};
}

TrainReport train(LeProtoNet& net, const TrainConfig& config, const episodes::DatasetIndex& base, Rng& rng,
                  const EpochCallback& on_epoch) {
  config.validate();
  const losses::LossConfig loss = config.loss_config();
  AdamW opt(net.params(), config.optimizer);
  TrainReport report;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch + 1;
    std::size_t correct = 0, total = 0;
    for (std::size_t i = 0; i < config.episodes_per_epoch; ++i, ++step) {
      auto ep = episodes::sample_episode(base, config.n_way, config.k_shot, config.q_queries,
                                         mix_seed(config.seed, step));
      auto batch = episodes::make_episode_batch(base, ep);
      net.params().zero_grad();
      RunOptions opts;
      opts.training = true;
      opts.rng = &rng;
      EpisodeResult r;
      try {
        r = net.episode_forward(batch, loss, opts);
      } catch (const std::domain_error& e) {
        throw TrainingDiverged(std::string(e.what()) + " at step " + std::to_string(step) + " (epoch " +
                               std::to_string(epoch + 1) + ")");
      }
      const double l = r.loss.value()[0];
      if (!std::isfinite(l)) {
        throw TrainingDiverged("non-finite loss at step " + std::to_string(step) + " (epoch " +
                               std::to_string(epoch + 1) + ")");
      }
      backward(r.loss);
      rec.lr = lr_at(step, config);
      const double gn = opt.step(rec.lr);
      bool finite = std::isfinite(gn);
      for (const auto& e : net.params().entries()) {
        if (!finite) break;
        if (e.role != ParamRole::kFrozen) finite = e.var.value().all_finite();
      }
      if (!finite) {
        throw TrainingDiverged("non-finite parameters after step " + std::to_string(step) + " (epoch " +
                               std::to_string(epoch + 1) + ")");
      }
      rec.grad_norm += gn;
      rec.loss += l;
      rec.l_cls += r.l_cls.value()[0];
      rec.l_cd += r.l_cd.value()[0];
      for (std::size_t q = 0; q < r.predictions.size(); ++q) correct += r.predictions[q] == batch.query_labels[q];
      total += r.predictions.size();
    }
    const double n = static_cast<double>(config.episodes_per_epoch);
    rec.loss /= n;
    rec.l_cls /= n;
    rec.l_cd /= n;
    rec.grad_norm /= n;
    rec.accuracy = 100.0 * static_cast<double>(correct) / static_cast<double>(total);
    report.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  net.params().zero_grad();
  report.steps = step;
  return report;
}

// ---- evaluation ---------------------------------------------------------

EvalReport EvalReport::from_accuracies(std::vector<double> accuracies) {
  EvalReport r;
  r.episode_count = accuracies.size();
  if (!accuracies.empty()) {
    double sum = 0.0;
    for (double a : accuracies) sum += a;
    const double n = static_cast<double>(accuracies.size());
    r.mean_accuracy = sum / n;
    double var = 0.0;
    for (double a : accuracies) var += (a - r.mean_accuracy) * (a - r.mean_accuracy);
    r.ci95 = 1.96 * std::sqrt(var / n) / std::sqrt(n);
  }
  r.accuracies = std::move(accuracies);
  return r;
}

nlohmann::json EvalReport::to_json() const {
  return {{"mean_accuracy", mean_accuracy},
          {"ci95", ci95},
          {"episode_count", episode_count},
          {"accuracies", accuracies}};
}

std::vector<int> ModelScorer::predict(const episodes::EpisodeBatch& batch, const episodes::Episode&,
                                      mole::RoutingStats* routing) const {
  NoGradGuard guard;
  RunOptions opts;
  opts.routing = routing;
  return net_.episode_forward(batch, losses::LossConfig{}, opts).predictions;
}

std::vector<int> RandomScorer::predict(const episodes::EpisodeBatch& batch, const episodes::Episode& episode,
                                       mole::RoutingStats*) const {
  Rng rng(mix_seed(episode.episode_seed, 0x5C0AE));
  std::vector<int> out(batch.query_labels.size());
  for (auto& v : out) v = static_cast<int>(rng.index(batch.n_way));
  return out;
}

EvalReport evaluate(const EpisodeScorer& scorer, const episodes::DatasetIndex& novel, const EvalProtocol& protocol,
                    mole::RoutingStats* routing) {
  if (protocol.episodes == 0) throw std::invalid_argument("evaluation needs at least one episode");
  // Surfaces infeasible protocols before any worker starts.
  episodes::sample_episode(novel, protocol.n_way, protocol.k_shot, protocol.q_queries, mix_seed(protocol.seed, 0));
  std::vector<double> acc(protocol.episodes, 0.0);
  const std::size_t workers = std::max<std::size_t>(1, std::min(protocol.threads, protocol.episodes));
  std::vector<mole::RoutingStats> stats(workers);
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(workers);
  auto work = [&](std::size_t w) {
    try {
      for (std::size_t i = next++; i < protocol.episodes; i = next++) {
        auto ep = episodes::sample_episode(novel, protocol.n_way, protocol.k_shot, protocol.q_queries,
                                           mix_seed(protocol.seed, i));
        auto batch = episodes::make_episode_batch(novel, ep);
        auto pred = scorer.predict(batch, ep, routing ? &stats[w] : nullptr);
        std::size_t correct = 0;
        for (std::size_t q = 0; q < pred.size(); ++q) correct += pred[q] == batch.query_labels[q];
        acc[i] = 100.0 * static_cast<double>(correct) / static_cast<double>(pred.size());
      }
    } catch (...) {
      errors[w] = std::current_exception();
      next = protocol.episodes;
    }
  };
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  if (routing)
    for (const auto& s : stats) routing->merge(s);
  return EvalReport::from_accuracies(std::move(acc));
}

void check_disjoint(const episodes::DatasetIndex& base, const episodes::DatasetIndex& novel) {
  std::set<std::string> seen(base.classes().begin(), base.classes().end());
  for (const auto& c : novel.classes()) {
    if (seen.count(c)) throw std::invalid_argument("class '" + c + "' appears in both training and evaluation sets");
  }
}

// ---- checkpoints --------------------------------------------------------

void save_checkpoint(const std::filesystem::path& dir, const LeProtoNet& net, const nlohmann::json& config,
                     const std::string& rng_state, const nlohmann::json& extra) {
  std::vector<container::NamedArray> arrays;
  for (const auto& e : net.params().entries()) {
    const char* role = e.role == ParamRole::kFrozen ? "frozen" : e.role == ParamRole::kTrainable ? "trainable" : "no-decay";
    arrays.push_back({e.name, e.var.value(), container::DType::kF64, {{"role", role}}});
  }
  nlohmann::json meta = {{"kind", "leproto-checkpoint"}, {"config", config}, {"rng_state", rng_state}, {"extra", extra}};
  container::write(dir, arrays, meta);
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  auto manifest = container::read_manifest(dir);
  if (manifest.meta.value("kind", "") != "leproto-checkpoint") {
    throw container::ContainerError(dir.string() + " is not a checkpoint container");
  }
  Checkpoint c;
  c.config = manifest.meta.at("config");
  c.rng_state = manifest.meta.value("rng_state", "");
  c.extra = manifest.meta.value("extra", nlohmann::json::object());
  for (const auto& e : manifest.entries) c.params.emplace(e.name, container::read_entry(dir, e));
  return c;
}

}  // namespace leproto::trainer
