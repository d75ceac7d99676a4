#include "leproto/cli.hpp"

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "leproto/config.hpp"
#include "leproto/explain.hpp"
#include "leproto/trainer.hpp"

namespace leproto::cli {

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> n_way, k_shot, queries, episodes, experts, concepts, rank, top_k;
  std::optional<double> lambda, kappa, alpha;
  std::string out;
  std::string component;
  std::string checkpoint;
};

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void write_json(const std::filesystem::path& path, const nlohmann::json& j, std::ostream& out) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << j.dump(2) << "\n";
  if (!f) throw std::runtime_error("write failed for " + path.string());
  out << "wrote " << path.string() << "\n";
}

// Checkpoint config (if any), then the config file, then flags.
RunConfig resolve(const Flags& f, const std::string& command, const trainer::Checkpoint* ckpt) {
  RunConfig c;
  if (ckpt) c = RunConfig::from_json(ckpt->config);
  if (!f.config.empty()) {
    std::ifstream in(f.config);
    if (!in) throw ConfigError("cannot open config file " + f.config);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config " + f.config + " is not valid JSON: " + e.what());
    }
    c.apply(j);
  }
  nlohmann::json o = nlohmann::json::object();
  if (f.seed) {
    o["seed"] = *f.seed;
    o["eval_seed"] = *f.seed;
  }
  if (f.n_way) o["n_way"] = *f.n_way;
  if (f.k_shot) o["k_shot"] = *f.k_shot;
  if (f.queries) o["queries"] = *f.queries;
  if (f.episodes) o[command == "train" ? "episodes_per_epoch" : "eval_episodes"] = *f.episodes;
  if (f.lambda) o["lambda"] = *f.lambda;
  if (f.kappa) o["kappa"] = *f.kappa;
  if (f.experts) o["experts"] = *f.experts;
  if (f.concepts) o["concepts"] = *f.concepts;
  if (f.rank) o["rank"] = *f.rank;
  if (f.alpha) o["alpha"] = *f.alpha;
  c.apply(o);
  c.validate();
  return c;
}

struct Data {
  episodes::DatasetIndex base;
  episodes::DatasetIndex novel;
};

Data load_data(const RunConfig& c) {
  auto all = episodes::load_dataset(c.data.source_spec());
  auto [base, novel] = episodes::split_base_novel(all, c.data.novel_fraction, c.data.split_seed);
  trainer::check_disjoint(base, novel);
  return {std::move(base), std::move(novel)};
}

std::string method_name(const RunConfig& c) {
  std::string name;
  switch (c.model.adapter.mode) {
    case AdapterMode::kNone: name = "ProtoPNet-frozen"; break;
    case AdapterMode::kLora: name = "LoRA"; break;
    case AdapterMode::kMole: name = "MoLE"; break;
    case AdapterMode::kPcm: name = "PCM"; break;
  }
  if (c.model.use_mfa) name += "+MFA";
  if (c.train.loss_config().lambda > 0.0) name += "+L_CD";
  return name;
}

std::string format_cell(const trainer::EvalReport& r) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(2) << r.mean_accuracy << " ± " << r.ci95;
  return s.str();
}

std::string table(const std::string& method, std::size_t k_shot, const std::string& cell) {
  static const std::size_t shots[] = {1, 5, 10, 20};
  std::ostringstream s;
  s << "| Method | 1-shot | 5-shot | 10-shot | 20-shot |\n";
  s << "|---|---|---|---|---|\n";
  s << "| " << method;
  for (std::size_t k : shots) s << " | " << (k == k_shot ? cell : "-");
  s << " |\n";
  return s.str();
}

std::filesystem::path out_dir(const Flags& f, const std::string& command) {
  std::filesystem::path p = f.out.empty() ? std::filesystem::path("runs") / command : std::filesystem::path(f.out);
  std::filesystem::create_directories(p);
  return p;
}

std::unique_ptr<LeProtoNet> build_net(const RunConfig& c, const episodes::DatasetIndex& index,
                                      const trainer::Checkpoint* ckpt) {
  auto net = std::make_unique<LeProtoNet>(c.model_for(index));
  if (ckpt) net->params().load_values(ckpt->params);
  return net;
}

std::optional<trainer::Checkpoint> maybe_checkpoint(const Flags& f) {
  if (f.checkpoint.empty()) return std::nullopt;
  return trainer::load_checkpoint(f.checkpoint);
}

int cmd_train(const Flags& f, std::ostream& out) {
  const RunConfig c = resolve(f, "train", nullptr);
  const auto dir = out_dir(f, "train");
  write_json(dir / "resolved_config.json", c.to_json(), out);
  Data d = load_data(c);
  auto net = build_net(c, d.base, nullptr);
  Rng rng(mix_seed(c.train.seed, 0xD70F));
  const auto report = trainer::train(*net, c.train, d.base, rng, [&](const trainer::EpochRecord& r) {
    out << "epoch " << r.epoch << "/" << c.train.epochs << " loss " << r.loss << " l_cls " << r.l_cls << " l_cd "
        << r.l_cd << " acc " << r.accuracy << " lr " << r.lr << "\n";
  });
  write_json(dir / "loss_history.json", report.to_json(), out);
  const auto ckpt = dir / "checkpoint";
  trainer::save_checkpoint(ckpt, *net, c.to_json(), rng.state(), {{"steps", report.steps}});
  out << "wrote " << ckpt.string() << "\n";
  return kExitOk;
}

int cmd_eval(const Flags& f, std::ostream& out) {
  const auto ckpt = maybe_checkpoint(f);
  const RunConfig c = resolve(f, "eval", ckpt ? &*ckpt : nullptr);
  const auto dir = out_dir(f, "eval");
  write_json(dir / "resolved_config.json", c.to_json(), out);
  Data d = load_data(c);
  auto net = build_net(c, d.novel, ckpt ? &*ckpt : nullptr);
  mole::RoutingStats routing;
  const auto protocol = c.eval_protocol(c.train.k_shot);
  const auto report = trainer::evaluate(trainer::ModelScorer(*net), d.novel, protocol, &routing);
  nlohmann::json j = report.to_json();
  j["method"] = method_name(c);
  j["n_way"] = protocol.n_way;
  j["k_shot"] = protocol.k_shot;
  j["q_queries"] = protocol.q_queries;
  j["checkpoint"] = f.checkpoint.empty() ? nlohmann::json(nullptr) : nlohmann::json(f.checkpoint);
  write_json(dir / "eval_report.json", j, out);
  write_json(dir / "routing_stats.json", routing.to_json(), out);
  const std::string t = table(method_name(c), protocol.k_shot, format_cell(report));
  {
    const auto p = dir / "eval_table.md";
    std::ofstream tf(p);
    tf << t;
    if (!tf) throw std::runtime_error("cannot write " + p.string());
    out << "wrote " << p.string() << "\n";
  }
  out << t;
  return kExitOk;
}

int cmd_explain(const Flags& f, std::ostream& out) {
  const auto ckpt = maybe_checkpoint(f);
  const RunConfig c = resolve(f, "explain", ckpt ? &*ckpt : nullptr);
  const auto dir = out_dir(f, "explain");
  write_json(dir / "resolved_config.json", c.to_json(), out);
  Data d = load_data(c);
  auto net = build_net(c, d.novel, ckpt ? &*ckpt : nullptr);
  const auto ep = episodes::sample_episode(d.novel, c.train.n_way, c.train.k_shot, c.train.q_queries, c.eval.seed);
  const auto bundle = explain::explain_episode(*net, d.novel, ep, 0, f.top_k.value_or(5));
  for (const auto& p : explain::render(bundle, dir)) out << "wrote " << p.string() << "\n";
  out << "query " << bundle.query_id << " predicted " << bundle.predicted_class << " similarity "
      << bundle.similarity_score << "\n";
  out << "top concepts:";
  for (const auto& e : bundle.top_concepts) out << " " << e.concept_id;
  out << "\n";
  return kExitOk;
}

int cmd_verify(const Flags& f, std::ostream& out) {
  float64_mode();
  std::vector<std::string> components;
  if (f.component.empty() || f.component == "all") {
    components = trainer::grad_check_components();
  } else {
    const auto& known = trainer::grad_check_components();
    if (std::find(known.begin(), known.end(), f.component) == known.end()) {
      throw UsageError("unknown component '" + f.component + "'");
    }
    components = {f.component};
  }
  trainer::GradCheckOptions opts;
  if (f.seed) opts.seed = *f.seed;
  const auto dir = out_dir(f, "verify");
  nlohmann::json cfg = {{"components", components},
                        {"step", opts.step},
                        {"tolerance", opts.tolerance},
                        {"denominator_floor", opts.denominator_floor},
                        {"kink_margin", opts.kink_margin},
                        {"seed", opts.seed},
                        {"precision", "f64"}};
  write_json(dir / "resolved_config.json", cfg, out);
  nlohmann::json reports = nlohmann::json::array();
  bool ok = true;
  for (const auto& comp : components) {
    const auto r = trainer::grad_check(comp, opts);
    out << comp << " max_rel_error " << r.max_rel_error << " resamples " << r.resamples << " "
        << (r.passed ? "PASS" : "FAIL") << "\n";
    ok = ok && r.passed;
    reports.push_back(r.to_json());
  }
  write_json(dir / "gradcheck.json", {{"passed", ok}, {"reports", reports}}, out);
  return ok ? kExitOk : kExitFailure;
}

int cmd_sample_episode(const Flags& f, std::ostream& out) {
  const RunConfig c = resolve(f, "sample-episode", nullptr);
  const auto dir = out_dir(f, "sample-episode");
  write_json(dir / "resolved_config.json", c.to_json(), out);
  Data d = load_data(c);
  const auto ep = episodes::sample_episode(d.novel, c.train.n_way, c.train.k_shot, c.train.q_queries, c.eval.seed);
  const auto j = episodes::episode_to_json(ep);
  write_json(dir / "episode.json", j, out);
  out << j.dump(2) << "\n";
  return kExitOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Few-shot prototypical concept classification toolchain", "leproto"};
  app.require_subcommand(1);
  app.fallthrough();
  Flags f;
  app.add_option("--config", f.config, "JSON config file; flags override its values")->check(CLI::ExistingFile);
  app.add_option("--seed", f.seed, "Training seed and evaluation episode seed");
  app.add_option("--n-way", f.n_way, "Classes per episode");
  app.add_option("--k-shot", f.k_shot, "Support samples per class");
  app.add_option("--queries", f.queries, "Query samples per class");
  app.add_option("--episodes", f.episodes, "train: episodes per epoch; eval: test episodes");
  app.add_option("--lambda", f.lambda, "Concept-discrimination loss weight");
  app.add_option("--kappa", f.kappa, "Concept-discrimination temperature");
  app.add_option("--experts", f.experts, "Low-rank experts per adapted layer");
  app.add_option("--concepts", f.concepts, "Concept bank size");
  app.add_option("--rank", f.rank, "Expert rank");
  app.add_option("--alpha", f.alpha, "Adapter scaling");
  app.add_option("--out", f.out, "Output directory (default runs/<command>)");
  app.add_option("--component", f.component, "verify: linear, mole, pcm, pcl, mfa, losses, chain or all");
  app.add_option("--top-k", f.top_k, "explain: concepts per bundle (default 5)");

  auto* train = app.add_subcommand("train", "Episodic training; writes a checkpoint and loss history");
  auto* eval = app.add_subcommand("eval", "Evaluate on novel classes; writes a report and table row");
  eval->add_option("checkpoint", f.checkpoint, "Checkpoint directory (default: untrained model)");
  auto* expl = app.add_subcommand("explain", "Explanation bundle for one query of a novel episode");
  expl->add_option("checkpoint", f.checkpoint, "Checkpoint directory (default: untrained model)");
  auto* verify = app.add_subcommand("verify", "Finite-difference gradient checks");
  auto* sample = app.add_subcommand("sample-episode", "Print one novel-class episode");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  try {
    if (f.top_k && !expl->parsed()) throw UsageError("--top-k only applies to explain");
    if (!f.component.empty() && !verify->parsed()) throw UsageError("--component only applies to verify");
    if (train->parsed()) return cmd_train(f, out);
    if (eval->parsed()) return cmd_eval(f, out);
    if (expl->parsed()) return cmd_explain(f, out);
    if (verify->parsed()) return cmd_verify(f, out);
    if (sample->parsed()) return cmd_sample_episode(f, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace leproto::cli
