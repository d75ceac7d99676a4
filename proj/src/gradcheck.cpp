#include <cmath>
#include <memory>

#include "leproto/trainer.hpp"

namespace leproto::trainer {

nlohmann::json GradCheckReport::to_json() const {
  nlohmann::json g = nlohmann::json::array();
  for (const auto& r : groups) {
    g.push_back({{"name", r.name},
                 {"elements", r.elements},
                 {"max_rel_error", r.max_rel_error},
                 {"max_abs_error", r.max_abs_error}});
  }
  return {{"component", component},
          {"groups", g},
          {"max_rel_error", max_rel_error},
          {"resamples", resamples},
          {"passed", passed}};
}

namespace {

struct Probe {
  double value;
  std::vector<std::uint64_t> signature;
  double gap;
};

Probe probe(GradProblem& p, bool with_grad) {
  auto& mon = KinkMonitor::current();
  mon.reset();
  double v;
  if (with_grad) {
    Var l = p.loss();
    v = l.value()[0];
    backward(l);
  } else {
    NoGradGuard guard;
    v = p.loss().value()[0];
  }
  return {v, mon.signature, mon.min_gap};
}

}  // namespace

GradCheckReport run_grad_check(const std::string& component, GradProblem& problem, const GradCheckOptions& options) {
  GradCheckReport report;
  report.component = component;
  Rng rng(options.seed);
  ScopedKinkMonitor scope;
  const double h = options.step;
  for (std::size_t attempt = 0; attempt <= options.max_resamples; ++attempt) {
    if (attempt > 0) ++report.resamples;
    if (problem.resample) problem.resample(rng);
    for (auto& [name, v] : problem.groups) v.zero_grad();
    Probe base = probe(problem, true);
    if (base.gap < options.kink_margin) continue;
    std::vector<Tensor> analytic;
    for (auto& [name, v] : problem.groups) {
      analytic.push_back(v.grad().empty() ? Tensor(v.shape(), 0.0) : v.grad());
    }
    std::vector<GradGroupResult> groups;
    bool kinked = false;
    for (std::size_t gi = 0; gi < problem.groups.size() && !kinked; ++gi) {
      auto& [name, var] = problem.groups[gi];
      GradGroupResult res;
      res.name = name;
      auto values = var.mutable_value().data();
      res.elements = values.size();
      for (std::size_t i = 0; i < values.size(); ++i) {
        const double saved = values[i];
        values[i] = saved + h;
        Probe plus = probe(problem, false);
        values[i] = saved - h;
        Probe minus = probe(problem, false);
        values[i] = saved;
        if (plus.signature != base.signature || minus.signature != base.signature) {
          kinked = true;
          break;
        }
        const double numeric = (plus.value - minus.value) / (2.0 * h);
        const double a = analytic[gi][i];
        const double abs_err = std::abs(a - numeric);
        const double denom = std::max({std::abs(a), std::abs(numeric), options.denominator_floor});
        res.max_abs_error = std::max(res.max_abs_error, abs_err);
        res.max_rel_error = std::max(res.max_rel_error, abs_err / denom);
      }
      groups.push_back(res);
    }
    if (kinked) continue;
    report.groups = std::move(groups);
    for (const auto& g : report.groups) report.max_rel_error = std::max(report.max_rel_error, g.max_rel_error);
    report.passed = report.max_rel_error < options.tolerance;
    for (auto& [name, v] : problem.groups) v.zero_grad();
    return report;
  }
  report.passed = false;
  report.max_rel_error = INFINITY;
  return report;
}

namespace {

void fill_normal(Var& v, Rng& rng, double stddev = 1.0) {
  for (auto& x : v.mutable_value().data()) x = rng.normal(0.0, stddev);
}

std::vector<std::pair<std::string, Var>> trainable_groups(const ParamStore& store) {
  std::vector<std::pair<std::string, Var>> g;
  for (const auto& e : store.entries())
    if (e.role != ParamRole::kFrozen) g.emplace_back(e.name, e.var);
  return g;
}

void randomize_expert_b(const ParamStore& store, Rng& rng) {
  for (const auto& e : store.entries()) {
    const auto& n = e.name;
    if (n.find(".expert") != std::string::npos && n.size() >= 2 && n.compare(n.size() - 2, 2, ".B") == 0) {
      Var v = e.var;
      fill_normal(v, rng, 0.5);
    }
  }
}

GradProblem linear_problem() {
  auto x = std::make_shared<Var>(leaf(Tensor({3, 4})));
  auto w = std::make_shared<Var>(leaf(Tensor({5, 4})));
  auto b = std::make_shared<Var>(leaf(Tensor({5})));
  auto r = std::make_shared<Var>(constant(Tensor({3, 5})));
  GradProblem p;
  p.groups = {{"input", *x}, {"weight", *w}, {"bias", *b}};
  p.loss = [=] { return ops::sum_all(ops::mul(ops::linear(*x, *w, *b), *r)); };
  p.resample = [=](Rng& rng) {
    fill_normal(*x, rng);
    fill_normal(*w, rng);
    fill_normal(*b, rng);
    fill_normal(*r, rng);
  };
  return p;
}

GradProblem adapter_problem(AdapterMode mode) {
  struct State {
    ParamStore store;
    std::optional<AdapterLayer> layer;
    Var concepts, z, w0, b0, r;
  };
  auto s = std::make_shared<State>();
  Rng init(17);
  AdapterConfig cfg;
  cfg.mode = mode;
  cfg.experts = 3;
  cfg.rank = 2;
  cfg.alpha = 2.0;
  cfg.dropout = 0.0;
  cfg.attn_key_dim = 4;
  cfg.attn_value_dim = 4;
  const std::size_t d_in = 8, d_out = 6, concepts = 5;
  if (mode == AdapterMode::kPcm) {
    s->concepts = s->store.add("concepts", init.normal_tensor({concepts, d_in}), ParamRole::kNoDecay);
  }
  s->layer.emplace(s->store, "layer", cfg, d_in, d_out, d_in, init);
  randomize_expert_b(s->store, init);
  s->z = constant(Tensor({2, 3, d_in}));
  s->w0 = constant(init.normal_tensor({d_out, d_in}, 0.5));
  s->b0 = constant(init.normal_tensor({d_out}, 0.5));
  s->r = constant(Tensor({2, 3, d_out}));
  GradProblem p;
  p.groups = trainable_groups(s->store);
  p.loss = [s] {
    ForwardContext ctx;
    ctx.concepts = s->concepts;
    return ops::sum_all(ops::mul(s->layer->forward(s->z, s->w0, s->b0, ctx), s->r));
  };
  p.resample = [s](Rng& rng) {
    fill_normal(s->z, rng);
    fill_normal(s->r, rng);
  };
  return p;
}

GradProblem pcl_problem() {
  struct State {
    ParamStore store;
    pcl::ConceptLearner learner;
    Var features;
  };
  auto s = std::make_shared<State>();
  Rng init(23);
  s->learner = pcl::ConceptLearner::create(s->store, 6, 5, init);
  // 2-way 2-shot with one query per class on a 2x2 grid.
  s->features = constant(Tensor({6, 4, 5}));
  GradProblem p;
  p.groups = trainable_groups(s->store);
  p.loss = [s] {
    Var a_tilde = pcl::smooth_activations(pcl::activation_scores(s->features, s->learner.concepts), 0.5);
    Var h = pcl::concept_features(a_tilde, 2, 2, s->learner);
    std::vector<std::size_t> support{0, 1, 2, 3}, query{4, 5};
    Var cp = pcl::class_prototypes(ops::reshape(ops::index_select0(h, support), {2, 2, 6}));
    Var m = pcl::similarity(ops::index_select0(h, query), cp);
    static const int labels[] = {0, 1};
    return losses::classification_loss(m, labels, 10.0);
  };
  p.resample = [s](Rng& rng) {
    fill_normal(s->features, rng);
    Var conv3 = s->learner.conv3_kernel;
    fill_normal(conv3, rng, 0.3);
  };
  return p;
}

GradProblem mfa_problem() {
  struct State {
    ParamStore store;
    mfa::MfaParams params;
    Var low, mid, high, out, h, r;
  };
  auto s = std::make_shared<State>();
  Rng init(29);
  s->params = mfa::MfaParams::create(s->store, 3, 4, init);
  for (Var* v : {&s->low, &s->mid, &s->high, &s->out}) *v = constant(Tensor({2, 4, 3}));
  s->h = constant(Tensor({2, 4}));
  s->r = constant(Tensor({2, 4}));
  GradProblem p;
  p.groups = trainable_groups(s->store);
  p.loss = [s] {
    const auto& lv = s->params.levels;
    Var e = mfa::aggregate(mfa::recalibrate(s->low, s->out, lv[0], 2, 2), mfa::recalibrate(s->mid, s->out, lv[1], 2, 2),
                           mfa::recalibrate(s->high, s->out, lv[2], 2, 2), s->params.aggregator);
    return ops::sum_all(ops::mul(mfa::fuse(s->h, e), s->r));
  };
  p.resample = [s](Rng& rng) {
    for (Var* v : {&s->low, &s->mid, &s->high, &s->out, &s->h, &s->r}) fill_normal(*v, rng);
  };
  return p;
}

GradProblem losses_problem() {
  auto a = std::make_shared<Var>(leaf(Tensor({3, 5})));
  auto m = std::make_shared<Var>(leaf(Tensor({4, 3})));
  GradProblem p;
  p.groups = {{"activations", *a}, {"similarity", *m}};
  p.loss = [=] {
    static const int labels[] = {0, 2, 1, 2};
    losses::LossConfig c;
    return losses::total_loss(losses::classification_loss(*m, labels, c.logit_scale),
                              losses::concept_discrimination_loss(*a, c.kappa), 0.5);
  };
  p.resample = [=](Rng& rng) {
    for (auto& x : a->mutable_value().data()) x = rng.uniform(-1.0, 1.0);
    for (auto& x : m->mutable_value().data()) x = rng.uniform(-1.0, 1.0);
  };
  return p;
}

GradProblem chain_problem() {
  struct State {
    std::unique_ptr<LeProtoNet> net;
    episodes::EpisodeBatch batch;
  };
  auto s = std::make_shared<State>();
  ModelConfig mc;
  mc.backbone.depth = 3;
  mc.backbone.width = 8;
  mc.backbone.input_dim = 6;
  mc.backbone.grid_h = 2;
  mc.backbone.grid_w = 2;
  mc.backbone.taps = {0, 1, 2};
  mc.adapter.rank = 2;
  mc.adapter.alpha = 2.0;
  mc.adapter.dropout = 0.0;
  mc.adapter.attn_key_dim = 4;
  mc.adapter.attn_value_dim = 4;
  mc.concepts = 6;
  mc.tau = 0.5;
  mc.seed = 31;
  s->net = std::make_unique<LeProtoNet>(mc);
  Rng init(31);
  randomize_expert_b(s->net->params(), init);
  s->batch.n_way = 2;
  s->batch.k_shot = 2;
  s->batch.support_labels = {0, 0, 1, 1};
  s->batch.query_labels = {0, 1};
  s->batch.tokens = Tensor({6, 4, 6});
  GradProblem p;
  p.groups = trainable_groups(s->net->params());
  p.loss = [s] {
    losses::LossConfig c;
    c.lambda = 0.5;
    return s->net->episode_forward(s->batch, c).loss;
  };
  p.resample = [s](Rng& rng) {
    for (auto& x : s->batch.tokens.data()) x = rng.normal();
  };
  return p;
}

}  // namespace

const std::vector<std::string>& grad_check_components() {
  static const std::vector<std::string> c{"linear", "mole", "pcm", "pcl", "mfa", "losses", "chain"};
  return c;
}

GradCheckReport grad_check(const std::string& component, const GradCheckOptions& options) {
  GradProblem p;
  if (component == "linear") {
    p = linear_problem();
  } else if (component == "mole") {
    p = adapter_problem(AdapterMode::kMole);
  } else if (component == "pcm") {
    p = adapter_problem(AdapterMode::kPcm);
  } else if (component == "pcl") {
    p = pcl_problem();
  } else if (component == "mfa") {
    p = mfa_problem();
  } else if (component == "losses") {
    p = losses_problem();
  } else if (component == "chain") {
    p = chain_problem();
  } else {
    throw std::invalid_argument("unknown grad-check component: " + component);
  }
  return run_grad_check(component, p, options);
}

}  // namespace leproto::trainer
