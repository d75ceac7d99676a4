#include "leproto/config.hpp"

#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>

namespace leproto {

episodes::DataSource DataConfig::source_spec() const {
  switch (source) {
    case episodes::SourceKind::kSynthetic: return synthetic;
    case episodes::SourceKind::kImageDirectory:
      return episodes::ImageDirectorySource{root, synthetic.grid_h, synthetic.grid_w, patch_size};
    case episodes::SourceKind::kPrecomputed: return episodes::PrecomputedSource{root};
  }
  throw ConfigError("unknown data source");
}

nlohmann::json RunConfig::to_json() const {
  const auto& s = data.synthetic;
  const auto& b = model.backbone;
  const auto& a = model.adapter;
  const auto& o = train.optimizer;
  nlohmann::json j;
  j["data_source"] = episodes::source_kind_name(data.source);
  j["data_root"] = data.root;
  j["synthetic_classes"] = s.num_classes;
  j["synthetic_samples_per_class"] = s.samples_per_class;
  j["synthetic_margin"] = s.class_margin;
  j["synthetic_sigma"] = s.noise_sigma;
  j["synthetic_seed"] = s.seed;
  j["grid_h"] = s.grid_h;
  j["grid_w"] = s.grid_w;
  j["feature_dim"] = s.feature_dim;
  j["patch_size"] = data.patch_size;
  j["novel_fraction"] = data.novel_fraction;
  j["split_seed"] = data.split_seed;
  j["backbone"] = backbone::kind_name(b.kind);
  j["depth"] = b.depth;
  j["width"] = b.width;
  j["taps"] = b.taps;
  j["adapter_targets"] = b.adapter_targets;
  j["backbone_dropout"] = b.dropout;
  j["adapter"] = adapter_mode_name(a.mode);
  j["experts"] = a.experts;
  j["rank"] = a.rank;
  j["alpha"] = a.alpha;
  j["dropout"] = a.dropout;
  j["attn_dim"] = a.attn_key_dim;
  j["normalization"] = mole::normalization_name(a.normalization);
  j["use_threshold"] = a.use_threshold;
  j["concepts"] = model.concepts;
  j["tau"] = model.tau;
  j["activation_mode"] = pcl::activation_mode_name(model.activation_mode);
  j["bypass_concept_norm"] = model.bypass_concept_norm;
  j["use_mfa"] = model.use_mfa;
  j["epochs"] = train.epochs;
  j["episodes_per_epoch"] = train.episodes_per_epoch;
  j["warmup_epochs"] = train.warmup_epochs;
  j["base_lr"] = train.base_lr;
  j["weight_decay"] = o.weight_decay;
  j["beta1"] = o.beta1;
  j["beta2"] = o.beta2;
  j["adam_eps"] = o.eps;
  j["grad_clip"] = o.grad_clip;
  j["n_way"] = train.n_way;
  j["k_shot"] = train.k_shot;
  j["queries"] = train.q_queries;
  j["seed"] = train.seed;
  j["lambda"] = train.lambda ? nlohmann::json(*train.lambda) : nlohmann::json(nullptr);
  j["kappa"] = train.kappa;
  j["logit_scale"] = train.logit_scale;
  j["cd_input"] = losses::cd_input_name(train.cd_input);
  j["eval_episodes"] = eval.episodes;
  j["eval_seed"] = eval.seed;
  j["threads"] = eval.threads;
  return j;
}

namespace {

using Setter = std::function<void(RunConfig&, const nlohmann::json&)>;

template <typename T>
Setter field(T RunConfig::*section, auto member) {
  return [section, member](RunConfig& c, const nlohmann::json& v) {
    using V = std::remove_reference_t<decltype((c.*section).*member)>;
    (c.*section).*member = v.get<V>();
  };
}

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> m = {
      {"data_source", [](RunConfig& c, const nlohmann::json& v) { c.data.source = episodes::parse_source_kind(v.get<std::string>()); }},
      {"data_root", field(&RunConfig::data, &DataConfig::root)},
      {"synthetic_classes", [](RunConfig& c, const nlohmann::json& v) { c.data.synthetic.num_classes = v.get<std::size_t>(); }},
      {"synthetic_samples_per_class", [](RunConfig& c, const nlohmann::json& v) { c.data.synthetic.samples_per_class = v.get<std::size_t>(); }},
      {"synthetic_margin", [](RunConfig& c, const nlohmann::json& v) { c.data.synthetic.class_margin = v.get<double>(); }},
      {"synthetic_sigma", [](RunConfig& c, const nlohmann::json& v) { c.data.synthetic.noise_sigma = v.get<double>(); }},
      {"synthetic_seed", [](RunConfig& c, const nlohmann::json& v) { c.data.synthetic.seed = v.get<std::uint64_t>(); }},
      {"grid_h", [](RunConfig& c, const nlohmann::json& v) { c.data.synthetic.grid_h = v.get<std::size_t>(); }},
      {"grid_w", [](RunConfig& c, const nlohmann::json& v) { c.data.synthetic.grid_w = v.get<std::size_t>(); }},
      {"feature_dim", [](RunConfig& c, const nlohmann::json& v) { c.data.synthetic.feature_dim = v.get<std::size_t>(); }},
      {"patch_size", field(&RunConfig::data, &DataConfig::patch_size)},
      {"novel_fraction", field(&RunConfig::data, &DataConfig::novel_fraction)},
      {"split_seed", field(&RunConfig::data, &DataConfig::split_seed)},
      {"backbone", [](RunConfig& c, const nlohmann::json& v) { c.model.backbone.kind = backbone::parse_kind(v.get<std::string>()); }},
      {"depth", [](RunConfig& c, const nlohmann::json& v) { c.model.backbone.depth = v.get<std::size_t>(); }},
      {"width", [](RunConfig& c, const nlohmann::json& v) { c.model.backbone.width = v.get<std::size_t>(); }},
      {"taps", [](RunConfig& c, const nlohmann::json& v) { c.model.backbone.taps = v.get<std::array<std::size_t, 3>>(); }},
      {"adapter_targets", [](RunConfig& c, const nlohmann::json& v) { c.model.backbone.adapter_targets = v.get<std::vector<std::string>>(); }},
      {"backbone_dropout", [](RunConfig& c, const nlohmann::json& v) { c.model.backbone.dropout = v.get<double>(); }},
      {"adapter", [](RunConfig& c, const nlohmann::json& v) { c.model.adapter.mode = parse_adapter_mode(v.get<std::string>()); }},
      {"experts", [](RunConfig& c, const nlohmann::json& v) { c.model.adapter.experts = v.get<std::size_t>(); }},
      {"rank", [](RunConfig& c, const nlohmann::json& v) { c.model.adapter.rank = v.get<std::size_t>(); }},
      {"alpha", [](RunConfig& c, const nlohmann::json& v) { c.model.adapter.alpha = v.get<double>(); }},
      {"dropout", [](RunConfig& c, const nlohmann::json& v) { c.model.adapter.dropout = v.get<double>(); }},
      {"attn_dim", [](RunConfig& c, const nlohmann::json& v) {
         c.model.adapter.attn_key_dim = c.model.adapter.attn_value_dim = v.get<std::size_t>();
       }},
      {"normalization", [](RunConfig& c, const nlohmann::json& v) { c.model.adapter.normalization = mole::parse_normalization(v.get<std::string>()); }},
      {"use_threshold", [](RunConfig& c, const nlohmann::json& v) { c.model.adapter.use_threshold = v.get<bool>(); }},
      {"concepts", field(&RunConfig::model, &ModelConfig::concepts)},
      {"tau", field(&RunConfig::model, &ModelConfig::tau)},
      {"activation_mode", [](RunConfig& c, const nlohmann::json& v) { c.model.activation_mode = pcl::parse_activation_mode(v.get<std::string>()); }},
      {"bypass_concept_norm", field(&RunConfig::model, &ModelConfig::bypass_concept_norm)},
      {"use_mfa", field(&RunConfig::model, &ModelConfig::use_mfa)},
      {"epochs", field(&RunConfig::train, &trainer::TrainConfig::epochs)},
      {"episodes_per_epoch", field(&RunConfig::train, &trainer::TrainConfig::episodes_per_epoch)},
      {"warmup_epochs", field(&RunConfig::train, &trainer::TrainConfig::warmup_epochs)},
      {"base_lr", field(&RunConfig::train, &trainer::TrainConfig::base_lr)},
      {"weight_decay", [](RunConfig& c, const nlohmann::json& v) { c.train.optimizer.weight_decay = v.get<double>(); }},
      {"beta1", [](RunConfig& c, const nlohmann::json& v) { c.train.optimizer.beta1 = v.get<double>(); }},
      {"beta2", [](RunConfig& c, const nlohmann::json& v) { c.train.optimizer.beta2 = v.get<double>(); }},
      {"adam_eps", [](RunConfig& c, const nlohmann::json& v) { c.train.optimizer.eps = v.get<double>(); }},
      {"grad_clip", [](RunConfig& c, const nlohmann::json& v) { c.train.optimizer.grad_clip = v.get<double>(); }},
      {"n_way", field(&RunConfig::train, &trainer::TrainConfig::n_way)},
      {"k_shot", field(&RunConfig::train, &trainer::TrainConfig::k_shot)},
      {"queries", field(&RunConfig::train, &trainer::TrainConfig::q_queries)},
      {"seed", field(&RunConfig::train, &trainer::TrainConfig::seed)},
      {"lambda", [](RunConfig& c, const nlohmann::json& v) {
         if (v.is_null()) {
           c.train.lambda.reset();
         } else {
           c.train.lambda = v.get<double>();
         }
       }},
      {"kappa", field(&RunConfig::train, &trainer::TrainConfig::kappa)},
      {"logit_scale", field(&RunConfig::train, &trainer::TrainConfig::logit_scale)},
      {"cd_input", [](RunConfig& c, const nlohmann::json& v) { c.train.cd_input = losses::parse_cd_input(v.get<std::string>()); }},
      {"eval_episodes", field(&RunConfig::eval, &EvalConfig::episodes)},
      {"eval_seed", field(&RunConfig::eval, &EvalConfig::seed)},
      {"threads", field(&RunConfig::eval, &EvalConfig::threads)},
  };
  return m;
}

}  // namespace

void RunConfig::apply(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  const auto& table = setters();
  for (const auto& [key, value] : j.items()) {
    auto it = table.find(key);
    if (it == table.end()) throw ConfigError("unknown config key: " + key);
    try {
      it->second(*this, value);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("bad value for '" + key + "': " + e.what());
    } catch (const std::invalid_argument& e) {
      throw ConfigError("bad value for '" + key + "': " + e.what());
    } catch (const episodes::DatasetError& e) {
      throw ConfigError("bad value for '" + key + "': " + e.what());
    }
  }
  if (j.contains("depth") && !j.contains("taps")) {
    model.backbone.taps = backbone::BackboneConfig::default_taps(model.backbone.depth);
  }
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  RunConfig c;
  c.apply(j);
  return c;
}

void RunConfig::validate() const {
  try {
    if (data.source == episodes::SourceKind::kSynthetic) data.synthetic.validate();
    if (data.source != episodes::SourceKind::kSynthetic && data.root.empty()) {
      throw ConfigError("data_root is required for " + episodes::source_kind_name(data.source) + " data");
    }
    if (!(data.novel_fraction > 0.0 && data.novel_fraction < 1.0)) throw ConfigError("novel_fraction must be in (0, 1)");
    if (eval.episodes == 0) throw ConfigError("eval_episodes must be positive");
    if (eval.threads == 0) throw ConfigError("threads must be positive");
    train.validate();
    ModelConfig m = model;
    if (m.backbone.kind == backbone::Kind::kPrecomputed) m.backbone.width = std::max<std::size_t>(1, m.backbone.width);
    m.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
}

ModelConfig RunConfig::model_for(const episodes::DatasetIndex& index) const {
  ModelConfig m = model;
  m.backbone.grid_h = index.grid_h();
  m.backbone.grid_w = index.grid_w();
  if (m.backbone.kind == backbone::Kind::kPrecomputed) {
    m.backbone.width = index.input_dim();
  } else {
    m.backbone.input_dim = index.input_dim();
  }
  m.seed = train.seed;
  return m;
}

trainer::EvalProtocol RunConfig::eval_protocol(std::size_t k_shot) const {
  trainer::EvalProtocol p;
  p.n_way = train.n_way;
  p.k_shot = k_shot;
  p.q_queries = train.q_queries;
  p.episodes = eval.episodes;
  p.seed = eval.seed;
  p.threads = eval.threads;
  return p;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return RunConfig::from_json(j);
}

bool float64_mode() {
  const char* v = std::getenv(kFloat64Env);
  if (!v) return true;
  const std::string s(v);
  if (s.empty() || s == "1" || s == "true" || s == "on") return true;
  throw ConfigError(std::string(kFloat64Env) + "=" + s + ": only 64-bit arithmetic is built");
}

}  // namespace leproto
