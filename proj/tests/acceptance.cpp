// Acceptance run: one PASS/FAIL line per criterion.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include "fixtures.hpp"
#include "leproto/cli.hpp"
#include "leproto/explain.hpp"
#include "oracles.hpp"

using namespace leproto;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = true;
  bool soft = false;
  std::string detail;
};

// Counts violations and keeps the first message.
struct Tally {
  std::size_t violations = 0;
  std::string first;

  void check(bool ok, const std::string& what) {
    if (ok) return;
    if (violations++ == 0) first = what;
  }
  std::string summary() const { return violations ? first + " (" + std::to_string(violations) + " violations)" : ""; }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

struct GuidedLayer {
  ParamStore store;
  mole::Perceptron g, t;
  mole::ExpertBank bank;
  pcm::ConceptAttention attn;
  Var concepts;

  GuidedLayer(std::size_t d, std::size_t experts, Rng& rng) {
    g = mole::Perceptron::create(store, "g", d, std::max<std::size_t>(1, d / 4), experts, rng);
    t = mole::Perceptron::create(store, "t", d, std::max<std::size_t>(1, d / 4), 1, rng);
    bank = mole::ExpertBank::create(store, "bank", experts, d, d, 2, 1.0, 0.0, rng);
    for (auto& b : bank.b) b.mutable_value() = rng.normal_tensor(b.shape());
    attn = pcm::ConceptAttention::create(store, "x", experts, d, 3, 3, rng);
    concepts = leaf(rng.normal_tensor({5, d}));
  }
};

// ---- 1 ----------------------------------------------------------------------

Outcome gating_algebra() {
  const auto t0 = Clock::now();
  Rng rng(101);
  Tally tally;
  std::size_t ties = 0;
  const std::size_t trials = 10000;
  for (std::size_t trial = 0; trial < trials; ++trial) {
    const std::size_t experts = 1 + rng.index(5), d = 4 + rng.index(5);
    GuidedLayer m(d, experts, rng);
    m.g.b2.mutable_value() = rng.normal_tensor({experts}, 3.0);
    m.t.b2.mutable_value() = rng.normal_tensor({1}, 4.0);
    Var z = constant(rng.normal_tensor({1, 3, d}, rng.uniform(0.1, 5.0)));
    auto tr = pcm::pcm_forward(z, z, m.concepts, m.bank, m.g, m.t, m.attn, mole::Normalization::kImportanceSum);
    const Tensor& g = tr.g.value();
    const Tensor& gt = tr.g_tilde.value();
    const Tensor& eps = tr.epsilon.value();
    const Tensor& e = tr.e_tilde.value();
    const Tensor plain = mole::filter_gates(tr.g, tr.epsilon).value();
    const Tensor w = mole::combination_weights(tr.e_tilde).value();
    const double inv_e = 1.0 / static_cast<double>(experts);
    for (std::size_t r = 0; r < 3; ++r) {
      tally.check(std::abs(testutil::row_sum(g, r) - 1.0) <= 1e-6, "gate row sum != 1");
      tally.check(std::abs(testutil::row_sum(gt, r) - 2.0) <= 1e-6, "fused gate row sum != 2");
      tally.check(eps[r] > 0.0 && eps[r] < inv_e, "epsilon outside (0, 1/E)");
      double se = 0.0;
      for (std::size_t i = 0; i < experts; ++i) {
        const std::size_t k = r * experts + i;
        se += e[k];
        if (gt[k] == eps[r] || g[k] == eps[r]) {
          ++ties;
          continue;
        }
        tally.check((e[k] == 0.0) == (gt[k] < eps[r]), "fused importance zero iff below cutoff");
        tally.check((plain[k] == 0.0) == (g[k] < eps[r]), "importance zero iff below cutoff");
      }
      if (se > 0.0) tally.check(std::abs(testutil::row_sum(w, r) - 1.0) <= 1e-6, "combination weights sum != 1");
    }
  }
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = tally.violations == 0 && secs < 30.0;
  o.detail = std::to_string(trials) + " instances, " + std::to_string(tally.violations) + " violations, " +
             std::to_string(ties) + " exact ties, " + fmt("%.1f s (limit 30 s)", secs);
  if (tally.violations) o.detail += "; " + tally.summary();
  return o;
}

// ---- 2 ----------------------------------------------------------------------

Outcome reductions() {
  Tally tally;
  Rng rng(202);

  // Single expert without thresholding is a plain low-rank adapter.
  {
    AdapterConfig mc;
    mc.mode = AdapterMode::kMole;
    mc.experts = 1;
    mc.use_threshold = false;
    mc.rank = 3;
    mc.dropout = 0.0;
    AdapterConfig lc = mc;
    lc.mode = AdapterMode::kLora;
    ParamStore s1, s2;
    Rng r1(5), r2(5);
    AdapterLayer m(s1, "m", mc, 8, 6, 4, r1);
    AdapterLayer lo(s2, "l", lc, 8, 6, 4, r2);
    for (int t = 0; t < 100; ++t) {
      Tensor a = rng.normal_tensor({3, 8}), b = rng.normal_tensor({6, 3});
      m.bank().a[0].node()->value = a;
      m.bank().b[0].node()->value = b;
      lo.bank().a[0].node()->value = a;
      lo.bank().b[0].node()->value = b;
      Var z = constant(rng.normal_tensor({2, 5, 8}));
      Var w0 = constant(rng.normal_tensor({6, 8})), b0 = constant(rng.normal_tensor({6}));
      ForwardContext ctx;
      tally.check(m.forward(z, w0, b0, ctx).value() == lo.forward(z, w0, b0, ctx).value(), "E=1 mole != lora");
    }
  }

  // alpha = 0 or B = 0 leaves the frozen forward untouched.
  {
    backbone::BackboneConfig bc;
    bc.width = 8;
    bc.input_dim = 6;
    bc.grid_h = 2;
    bc.grid_w = 3;
    ParamStore fs_;
    backbone::Backbone frozen(bc, fs_, 9);
    for (auto mode : {AdapterMode::kLora, AdapterMode::kMole, AdapterMode::kPcm}) {
      for (double alpha : {0.0, 32.0}) {
        AdapterConfig ac;
        ac.mode = mode;
        ac.rank = 2;
        ac.alpha = alpha;
        ac.dropout = 0.0;
        ac.attn_key_dim = 4;
        ac.attn_value_dim = 4;
        ParamStore s;
        backbone::Backbone net(bc, s, 9);
        Rng ar(3);
        net.attach_adapters(ac, s, 8, ar);
        if (alpha == 0.0) {
          for (auto* l : net.adapters())
            for (auto b : l->bank().b) b.mutable_value() = ar.normal_tensor(b.shape());
        }
        ForwardContext ctx;
        ctx.concepts = constant(ar.normal_tensor({5, 8}));
        for (int t = 0; t < 20; ++t) {
          Var tokens = constant(rng.normal_tensor({2, 6, 6}));
          tally.check(net.extract({tokens, std::nullopt}, ctx).out.value() ==
                          frozen.extract({tokens, std::nullopt}, ForwardContext{}).out.value(),
                      "inert adapter changed the frozen forward");
        }
      }
    }
  }

  // Guidance disabled: the concept-guided path is the plain mixture path.
  for (int t = 0; t < 100; ++t) {
    GuidedLayer m(8, 3, rng);
    Var z = constant(rng.normal_tensor({2, 5, 8}));
    auto tr = pcm::pcm_forward(z, z, m.concepts, m.bank, m.g, m.t, m.attn, mole::Normalization::kImportanceSum, false);
    auto e = mole::filter_gates(mole::gate(z, m.g), mole::threshold(z, m.t, 3));
    tally.check(tr.update.value() == mole::combine_experts(z, m.bank, e).value(), "guidance-off pcm != mole");
  }

  // Zeroing the aggregator's final layer reduces the full model to the concept learner alone.
  {
    testutil::TinySetup full;
    Rng tr(7);
    trainer::train(*full.net, full.config.train, full.base, tr);
    auto& agg = const_cast<mfa::AggregatorParams&>(full.net->mfa()->aggregator);
    agg.fc2_w.mutable_value().fill(0.0);
    agg.fc2_b.mutable_value().fill(0.0);
    agg.norm_beta.mutable_value().fill(0.0);
    auto cfg = full.config;
    cfg.model.use_mfa = false;
    testutil::TinySetup pcl_only(cfg);
    std::map<std::string, Tensor> values;
    for (const auto& en : full.net->params().entries()) values[en.name] = en.var.value();
    pcl_only.net->params().load_values(values);
    NoGradGuard ng;
    losses::LossConfig lc;
    for (std::uint64_t s = 0; s < 20; ++s) {
      auto ep = episodes::sample_episode(full.novel, 5, 1, 3, s);
      auto batch = episodes::make_episode_batch(full.novel, ep);
      auto a = full.net->episode_forward(batch, lc);
      auto b = pcl_only.net->episode_forward(batch, lc);
      tally.check(a.predictions == b.predictions, "zeroed MFA predictions differ from PCL-only");
      tally.check(a.similarity.value() == b.similarity.value(), "zeroed MFA similarity differs from PCL-only");
    }
  }

  Outcome o;
  o.pass = tally.violations == 0;
  o.detail = "E=1 mole vs lora, inert adapters vs frozen, guidance-off pcm vs mole, zeroed MFA vs PCL-only; " +
             std::to_string(tally.violations) + " bit mismatches";
  if (tally.violations) o.detail += "; " + tally.summary();
  return o;
}

// ---- 3 ----------------------------------------------------------------------

Outcome oracles() {
  Rng rng(303);
  const int n = 100;
  std::map<std::string, double> worst;
  auto note = [&](const std::string& name, double err) { worst[name] = std::max(worst[name], err); };
  for (int t = 0; t < n; ++t) {
    Tensor f = rng.normal_tensor({2, 6, 4}), p = rng.normal_tensor({5, 4});
    note("activation_scores", max_abs_diff(pcl::activation_scores(constant(f), constant(p)).value(),
                                           oracle::activation_scores(f, p, 1.0)));
    Tensor a = rng.uniform_tensor({2, 6, 5}, -1.0, 1.0);
    note("smooth_activations", max_abs_diff(pcl::smooth_activations(constant(a), 0.1).value(), oracle::smooth(a, 0.1)));

    ParamStore store;
    auto l = pcl::ConceptLearner::create(store, 5, 4, rng);
    l.conv1_kernel.mutable_value() = rng.normal_tensor({5, 1, 1});
    l.conv1_bias.mutable_value() = rng.normal_tensor({5}, 0.1);
    l.conv3_kernel.mutable_value() = rng.normal_tensor({5, 3, 3});
    l.conv3_bias.mutable_value() = rng.normal_tensor({5}, 0.1);
    l.norm_gamma.mutable_value() = rng.uniform_tensor({5}, 0.5, 1.5);
    l.norm_beta.mutable_value() = rng.normal_tensor({5}, 0.1);
    Tensor at = oracle::smooth(a, 0.5);
    note("concept_features",
         max_abs_diff(pcl::concept_features(constant(at), 2, 3, l).value(),
                      oracle::concept_features(at, 2, 3, l.conv1_kernel.value(), l.conv1_bias.value(),
                                               l.conv3_kernel.value(), l.conv3_bias.value(), l.norm_gamma.value(),
                                               l.norm_beta.value(), false)));

    auto mp = mfa::MfaParams::create(store, 4, 5, rng);
    auto& lv = mp.levels[static_cast<std::size_t>(t) % 3];
    lv.channel_b.mutable_value() = rng.normal_tensor(lv.channel_b.shape(), 0.3);
    lv.spatial_bias.mutable_value() = rng.normal_tensor({1}, 0.3);
    Tensor z = rng.normal_tensor({2, 6, 4}), zo = rng.normal_tensor({2, 6, 4});
    note("recalibrate", max_abs_diff(mfa::recalibrate(constant(z), constant(zo), lv, 2, 3).value(),
                                     oracle::recalibrate(z, zo, lv.channel_w.value(), lv.channel_b.value(),
                                                         lv.spatial_kernel.value(), lv.spatial_bias.value(), 2, 3)));
    auto& ag = mp.aggregator;
    ag.fc1_b.mutable_value() = rng.normal_tensor(ag.fc1_b.shape(), 0.3);
    ag.fc2_b.mutable_value() = rng.normal_tensor(ag.fc2_b.shape(), 0.3);
    ag.norm_gamma.mutable_value() = rng.uniform_tensor(ag.norm_gamma.shape(), 0.5, 1.5);
    ag.norm_beta.mutable_value() = rng.normal_tensor(ag.norm_beta.shape(), 0.2);
    Tensor el = rng.normal_tensor({2, 6, 4}), em = rng.normal_tensor({2, 6, 4}), eh = rng.normal_tensor({2, 6, 4});
    note("aggregate", max_abs_diff(mfa::aggregate(constant(el), constant(em), constant(eh), ag).value(),
                                   oracle::aggregate(el, em, eh, ag.fc1_w.value(), ag.fc1_b.value(), ag.fc2_w.value(),
                                                     ag.fc2_b.value(), ag.norm_gamma.value(), ag.norm_beta.value())));

    GuidedLayer m(6, 3, rng);
    Tensor zz = rng.normal_tensor({2, 3, 6});
    Tensor e = mole::filter_gates(constant(ops::softmax_last(constant(rng.normal_tensor({2, 3, 3}))).value()),
                                  constant(Tensor({2, 3, 1}, 0.1)))
                   .value();
    std::vector<Tensor> as, bs;
    for (std::size_t i = 0; i < 3; ++i) {
      as.push_back(m.bank.a[i].value());
      bs.push_back(m.bank.b[i].value());
    }
    note("combine_experts", max_abs_diff(mole::combine_experts(constant(zz), m.bank, constant(e)).value(),
                                         oracle::combine(zz, as, bs, e)));
    Tensor g = ops::softmax_last(constant(rng.normal_tensor({2, 3, 3}))).value();
    note("concept_align", max_abs_diff(pcm::concept_align(constant(g), m.concepts, m.attn).value(),
                                       oracle::concept_align(g, m.concepts.value(), m.attn.query.value(),
                                                             m.attn.key.value(), m.attn.value.value(),
                                                             m.attn.output.value())));

    Tensor h = rng.uniform_tensor({3, 7}, -1.0, 1.0);
    const double kappa = rng.uniform(0.07, 1.0);
    note("concept_discrimination_loss",
         std::abs(losses::concept_discrimination_loss(constant(h), kappa).value()[0] - oracle::cd_loss(h, kappa)));
    Tensor sim = rng.uniform_tensor({6, 5}, -1.0, 1.0);
    std::vector<int> labels(6);
    for (auto& v : labels) v = static_cast<int>(rng.index(5));
    note("classification_loss",
         std::abs(losses::classification_loss(constant(sim), labels, 10.0).value()[0] - oracle::ce_loss(sim, labels, 10.0)));
  }
  Outcome o;
  double top = 0.0;
  std::string which;
  for (const auto& [k, v] : worst) {
    if (v >= top) {
      top = v;
      which = k;
    }
    o.pass = o.pass && v < 1e-9;
  }
  o.detail = std::to_string(worst.size()) + " functions x " + std::to_string(n) + " instances, max abs error " +
             fmt("%.2e", top) + " (" + which + "), limit 1e-9";
  return o;
}

// ---- 4 ----------------------------------------------------------------------

Outcome gradients() {
  const auto t0 = Clock::now();
  Outcome o;
  std::ostringstream os;
  double worst = 0.0;
  std::size_t resamples = 0;
  for (const auto& c : trainer::grad_check_components()) {
    auto r = trainer::grad_check(c);
    o.pass = o.pass && r.passed && r.max_rel_error < 1e-4;
    worst = std::max(worst, r.max_rel_error);
    resamples += r.resamples;
    os << c << " " << fmt("%.1e", r.max_rel_error) << (r.passed ? "" : " FAILED") << ", ";
  }
  const double secs = seconds_since(t0);
  o.pass = o.pass && secs < 300.0;
  o.detail = os.str() + "max " + fmt("%.1e", worst) + " (limit 1e-4), " + std::to_string(resamples) +
             " kink resamples, " + fmt("%.1f s (limit 300 s)", secs);
  return o;
}

// ---- 5 ----------------------------------------------------------------------

Outcome loss_analytics() {
  Tally tally;
  for (std::size_t c : {2, 5, 64, 312})
    for (double kappa : {0.07, 0.5, 2.0}) {
      const double l = losses::concept_discrimination_loss(constant(Tensor({2, c}, 0.3)), kappa).value()[0];
      tally.check(std::abs(l - std::log(static_cast<double>(c))) <= 1e-12, "uniform L_CD != ln C");
    }
  Rng rng(505);
  double worst_shift = 0.0;
  for (int t = 0; t < 10000; ++t) {
    const std::size_t c = 2 + rng.index(40);
    const double kappa = rng.uniform(0.05, 2.0);
    Tensor a = rng.normal_tensor({1, c}, rng.uniform(0.1, 3.0));
    const double l = losses::concept_discrimination_loss(constant(a), kappa).value()[0];
    tally.check(l >= std::log(static_cast<double>(c)) - 1e-12, "L_CD below ln C");
    Tensor b = a;
    const double shift = rng.uniform(-20.0, 20.0);
    for (double& v : b.data()) v += shift;
    const double d = std::abs(losses::concept_discrimination_loss(constant(b), kappa).value()[0] - l);
    worst_shift = std::max(worst_shift, d);
    tally.check(d <= 1e-10, "L_CD not shift invariant");
  }
  for (std::size_t n : {2, 5, 20}) {
    std::vector<int> labels{0, static_cast<int>(n - 1)};
    const double l = losses::classification_loss(constant(Tensor({2, n}, 0.4)), labels, 10.0).value()[0];
    tally.check(std::abs(l - std::log(static_cast<double>(n))) <= 1e-12, "uniform CE != ln N");
  }
  Outcome o;
  o.pass = tally.violations == 0;
  o.detail = "uniform ln C, lower bound over 10000 vectors, max shift deviation " + fmt("%.1e", worst_shift) +
             ", uniform CE ln N; " + std::to_string(tally.violations) + " violations";
  if (tally.violations) o.detail += "; " + tally.summary();
  return o;
}

// ---- 6, 7 -------------------------------------------------------------------

RunConfig desk_scale(std::uint64_t seed) {
  RunConfig c;
  c.train.epochs = 10;
  c.train.episodes_per_epoch = 100;
  c.train.warmup_epochs = 2;  // 15 of 80 epochs, scaled to 10 and rounded
  c.train.seed = seed;
  c.eval.seed = seed + 1;
  return c;
}

struct Trained {
  RunConfig config;
  std::pair<episodes::DatasetIndex, episodes::DatasetIndex> split;
  std::unique_ptr<LeProtoNet> net;
  double train_seconds = 0.0;
};

std::unique_ptr<Trained> train_run(const RunConfig& c) {
  auto t = std::make_unique<Trained>(Trained{c, testutil::tiny_split(c), nullptr, 0.0});
  const auto t0 = Clock::now();
  t->net = std::make_unique<LeProtoNet>(c.model_for(t->split.first));
  Rng rng(mix_seed(c.train.seed, 0xD70F));
  trainer::train(*t->net, c.train, t->split.first, rng);
  t->train_seconds = seconds_since(t0);
  return t;
}

double eval_shot(const Trained& t, std::size_t k, std::size_t episodes, double* ci = nullptr) {
  auto p = t.config.eval_protocol(k);
  p.episodes = episodes;
  auto r = trainer::evaluate(trainer::ModelScorer(*t.net), t.split.second, p);
  if (ci) *ci = r.ci95;
  return r.mean_accuracy;
}

std::unique_ptr<Trained> g_full_seed0;

Outcome end_to_end() {
  const auto t0 = Clock::now();
  RunConfig c = desk_scale(0);
  const auto& s = c.data.synthetic;
  Outcome o;
  o.pass = s.num_classes == 20 && s.class_margin == 2.0 && s.noise_sigma == 0.5 && s.grid_h == 4 && s.grid_w == 4 &&
           s.feature_dim == 32;
  g_full_seed0 = train_run(c);
  double ci1 = 0.0, ci5 = 0.0;
  const double a1 = eval_shot(*g_full_seed0, 1, 600, &ci1);
  const double a5 = eval_shot(*g_full_seed0, 5, 600, &ci5);
  const double secs = seconds_since(t0);
  o.pass = o.pass && a1 >= 80.0 && a5 >= 90.0 && secs <= 600.0;
  o.detail = "5-way 1-shot " + fmt("%.2f", a1) + " +- " + fmt("%.2f", ci1) + " (floor 80), 5-shot " + fmt("%.2f", a5) +
             " +- " + fmt("%.2f", ci5) + " (floor 90), 600 episodes each, " +
             fmt("%.0f s", secs) + " (limit 600 s)";
  return o;
}

Outcome ablation() {
  const std::size_t seeds = 5, episodes = 200;
  std::vector<double> full1, full5, mole1, mole5;
  nlohmann::json rows = nlohmann::json::array();
  for (std::uint64_t seed = 0; seed < seeds; ++seed) {
    std::unique_ptr<Trained> full;
    if (seed == 0 && g_full_seed0) {
      full = std::move(g_full_seed0);
    } else {
      full = train_run(desk_scale(seed));
    }
    RunConfig mc = desk_scale(seed);
    mc.model.adapter.mode = AdapterMode::kMole;
    mc.model.use_mfa = false;
    mc.train.lambda = 0.0;
    auto mole = train_run(mc);
    full1.push_back(eval_shot(*full, 1, episodes));
    full5.push_back(eval_shot(*full, 5, episodes));
    mole1.push_back(eval_shot(*mole, 1, episodes));
    mole5.push_back(eval_shot(*mole, 5, episodes));
    rows.push_back({{"seed", seed},
                    {"full_1shot", full1.back()},
                    {"full_5shot", full5.back()},
                    {"mole_1shot", mole1.back()},
                    {"mole_5shot", mole5.back()}});
  }
  auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  const double f1 = mean(full1), f5 = mean(full5), m1 = mean(mole1), m5 = mean(mole5);
  const bool ordered = f1 >= m1 && f5 >= m5;
  nlohmann::json report = {{"seeds", seeds},
                           {"eval_episodes_per_seed", episodes},
                           {"schedule", "10 epochs x 100 episodes, warmup 2"},
                           {"runs", rows},
                           {"mean", {{"full_1shot", f1}, {"full_5shot", f5}, {"mole_1shot", m1}, {"mole_5shot", m5}}},
                           {"ordering_holds", ordered}};
  std::ofstream("ablation_report.json") << report.dump(2) << "\n";
  std::ofstream md("ablation_report.md");
  md << "| Method | 1-shot | 5-shot |\n|---|---|---|\n";
  md << "| PCM+MFA+L_CD | " << fmt("%.2f", f1) << " | " << fmt("%.2f", f5) << " |\n";
  md << "| MoLE | " << fmt("%.2f", m1) << " | " << fmt("%.2f", m5) << " |\n";
  if (!ordered) md << "\nFLAGGED: the full model does not reach the MoLE-only mean.\n";

  Outcome o;
  o.soft = true;
  o.pass = ordered;
  o.detail = "mean over " + std::to_string(seeds) + " seeds: full " + fmt("%.2f", f1) + " / " + fmt("%.2f", f5) +
             " vs MoLE-only " + fmt("%.2f", m1) + " / " + fmt("%.2f", m5) + " (1-shot / 5-shot)" +
             (ordered ? "" : ", FLAGGED") + "; report in ablation_report.md";
  return o;
}

// ---- 8 ----------------------------------------------------------------------

std::map<std::string, std::string> tree_bytes(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& f : fs::recursive_directory_iterator(root)) {
    if (!f.is_regular_file()) continue;
    std::ifstream in(f.path(), std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    out[fs::relative(f.path(), root).string()] = os.str();
  }
  return out;
}

int quiet_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "leproto");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  return cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
}

Outcome protocol() {
  Outcome o;
  RunConfig c;
  auto split = testutil::tiny_split(c);
  auto p = c.eval_protocol(1);
  p.episodes = 600;
  auto r = trainer::evaluate(trainer::RandomScorer{}, split.second, p);
  const double trials = 600.0 * 5.0 * static_cast<double>(p.q_queries);
  const double half = 100.0 * 1.96 * std::sqrt(0.2 * 0.8 / trials);
  const bool chance_ok = std::abs(r.mean_accuracy - 20.0) <= 3.0;

  // Both runs use the same paths, since reports echo their input paths.
  std::vector<std::map<std::string, std::string>> runs;
  int codes = 0;
  for (int run = 0; run < 2; ++run) {
    auto root = testutil::fresh_dir("acceptance_determinism");
    auto cfg = root / "config.json";
    std::ofstream(cfg) << testutil::tiny_config().to_json().dump(2);
    codes += quiet_cli({"--config", cfg.string(), "--out", (root / "train").string(), "train"});
    const auto ckpt = (root / "train" / "checkpoint").string();
    codes += quiet_cli({"--out", (root / "eval").string(), "eval", ckpt});
    codes += quiet_cli({"--out", (root / "explain").string(), "explain", ckpt});
    runs.push_back(tree_bytes(root));
  }
  const auto& a = runs[0];
  const auto& b = runs[1];
  const bool same = codes == 0 && !a.empty() && a == b;

  o.pass = chance_ok && same;
  o.detail = "random scorer " + fmt("%.2f", r.mean_accuracy) + "% over 600 episodes (band 17 to 23, binomial 95% " +
             fmt("+-%.2f", half) + "); train/eval/explain outputs " + std::to_string(a.size()) + " files " +
             (same ? "byte-identical" : "DIFFER");
  return o;
}

// ---- 9 ----------------------------------------------------------------------

Outcome defaults() {
  RunConfig c;
  Tally t;
  const auto& a = c.model.adapter;
  t.check(a.rank == 8, "rank");
  t.check(a.alpha == 32.0, "alpha");
  t.check(a.dropout == 0.1, "dropout");
  t.check(a.experts == 3, "experts");
  t.check(c.train.base_lr == 1e-2, "lr");
  t.check(c.train.warmup_epochs == 15, "warmup");
  t.check(c.train.epochs == 80, "epochs");
  t.check(c.train.episodes_per_epoch == 500, "episodes per epoch");
  t.check(c.model.concepts == 312, "concepts");
  t.check(!c.train.lambda.has_value(), "lambda should follow the shot count");
  auto one = c.train;
  one.k_shot = 1;
  auto five = c.train;
  five.k_shot = 5;
  t.check(one.loss_config().lambda == 0.003, "lambda 1-shot");
  t.check(five.loss_config().lambda == 0.001, "lambda 5-shot");
  Outcome o;
  o.pass = t.violations == 0;
  o.detail = "r=8, alpha=32, dropout 0.1, lr 1e-2, warmup 15, epochs 80, 500 episodes/epoch, C=312, E=3, "
             "lambda 0.003 (1-shot) / 0.001 (otherwise)";
  if (t.violations) o.detail += "; mismatch: " + t.summary();
  return o;
}

// ---- 10 ---------------------------------------------------------------------

Outcome explanations() {
  testutil::TinySetup s;
  Rng rng(9);
  trainer::train(*s.net, s.config.train, s.base, rng);
  Tally t;
  auto self = explain::explanation_bundle(*s.net, s.novel, 3, 3, 5);
  t.check(std::abs(self.similarity_score - 1.0) <= 1e-12, "self similarity != 1");
  for (const auto& c : self.top_concepts) t.check(c.query_heatmap == c.support_heatmap, "self heatmaps differ");

  auto root = testutil::fresh_dir("acceptance_explain");
  for (std::size_t k : {1, 3, 5}) {
    auto ep = episodes::sample_episode(s.novel, 5, 1, 3, k);
    auto b = explain::explain_episode(*s.net, s.novel, ep, 0, k);
    auto files = explain::render(b, root / std::to_string(k));
    std::size_t png = 0, json = 0;
    for (const auto& f : files) {
      png += f.extension() == ".png";
      json += f.extension() == ".json";
      t.check(fs::exists(f), "rendered file missing");
    }
    t.check(png == 2 * k && json == 1, "raster count does not match k");
    NoGradGuard ng;
    auto pred = s.net->episode_forward(episodes::make_episode_batch(s.novel, ep), losses::LossConfig{}).predictions;
    t.check(b.predicted_label == pred[0], "bundle class differs from classifier");
    t.check(b.predicted_class == ep.classes[static_cast<std::size_t>(pred[0])], "bundle label differs");
  }
  Outcome o;
  o.pass = t.violations == 0;
  o.detail = "self similarity " + fmt("%.15f", self.similarity_score) +
             ", identical heatmaps, k in {1,3,5} gives 2k PNG + 1 JSON, prediction matches classifier";
  if (t.violations) o.detail += "; " + t.summary();
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gating algebra", gating_algebra},
      {"reduction identities", reductions},
      {"oracle equivalence", oracles},
      {"gradient checks", gradients},
      {"loss analytics", loss_analytics},
      {"desk-scale learning", end_to_end},
      {"ablation direction", ablation},
      {"protocol and determinism", protocol},
      {"config defaults", defaults},
      {"explanation bundle", explanations},
  };
  // Optional arguments select criteria by number.
  std::set<std::size_t> only;
  for (int i = 1; i < argc; ++i) only.insert(std::stoul(argv[i]));
  int hard_failures = 0, passed = 0, ran = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!only.empty() && !only.count(i + 1)) continue;
    ++ran;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    passed += o.pass;
    if (!o.pass && !o.soft) ++hard_failures;
    std::cout << "criterion " << i + 1 << " " << (o.pass ? "PASS" : (o.soft ? "FAIL (soft, flagged)" : "FAIL"))
              << " " << criteria[i].first << ": " << o.detail << std::endl;
  }
  std::cout << "acceptance " << passed << "/" << ran << " passed" << std::endl;
  return hard_failures == 0 ? 0 : 1;
}
