#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "leproto/episodes.hpp"
#include "leproto/model.hpp"
#include "leproto/trainer.hpp"

namespace leproto {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct DataConfig {
  episodes::SourceKind source = episodes::SourceKind::kSynthetic;
  std::string root;                   // image-directory and precomputed sources
  episodes::SyntheticSpec synthetic;  // grid also used for image-directory
  std::size_t patch_size = 4;
  double novel_fraction = 0.5;
  std::uint64_t split_seed = 0;

  episodes::DataSource source_spec() const;
};

struct EvalConfig {
  std::size_t episodes = 600;
  std::uint64_t seed = 1;
  std::size_t threads = 1;
};

// Everything one command needs. Serialized as a flat JSON object; unknown keys
// are rejected.
struct RunConfig {
  DataConfig data;
  ModelConfig model;
  trainer::TrainConfig train;
  EvalConfig eval;

  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  // Overlays the keys present in j onto this config.
  void apply(const nlohmann::json& j);
  void validate() const;

  // Model config with input width and grid taken from the dataset.
  ModelConfig model_for(const episodes::DatasetIndex& index) const;
  trainer::EvalProtocol eval_protocol(std::size_t k_shot) const;
};

RunConfig load_config(const std::filesystem::path& path);

// Environment variable selecting 64-bit verification mode ("1" / "0").
inline constexpr const char* kFloat64Env = "LEPROTO_FLOAT64";
// Always true in this build: all arithmetic is 64-bit. Throws ConfigError if
// the environment asks for anything else.
bool float64_mode();

}  // namespace leproto
