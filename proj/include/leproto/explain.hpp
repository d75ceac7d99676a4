#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "leproto/episodes.hpp"
#include "leproto/model.hpp"

namespace leproto::explain {

struct ConceptExplanation {
  std::size_t concept_id = 0;
  double contribution = 0.0;             // pooled concept feature of the query
  std::vector<double> query_heatmap;     // H*W, row-major, in [0, 1]
  std::vector<double> support_heatmap;   // H*W
};

struct ExplanationBundle {
  std::string query_id;
  std::string support_id;
  std::string predicted_class;
  int predicted_label = 0;
  double similarity_score = 0.0;  // cosine of the query feature and the predicted prototype
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  std::vector<ConceptExplanation> top_concepts;  // contribution descending

  nlohmann::json to_json() const;
};

// Indices of the k largest entries, ties by lower index. Throws if k > size.
std::vector<std::size_t> top_concepts(std::span<const double> values, std::size_t k);

// (x - min) / (max - min); a constant map becomes all zeros.
std::vector<double> normalize_heatmap(std::span<const double> values);

// One query against one support sample, as a 1-way 1-shot episode.
ExplanationBundle explanation_bundle(const LeProtoNet& net, const episodes::DatasetIndex& index,
                                     std::size_t query_item, std::size_t support_item, std::size_t k);

// Explains query `query_pos` of an episode: the support sample shown is the
// predicted class's support item closest to the query.
ExplanationBundle explain_episode(const LeProtoNet& net, const episodes::DatasetIndex& index,
                                  const episodes::Episode& episode, std::size_t query_pos, std::size_t k);

// Writes <query>.bundle.json plus one PNG per heatmap. Returns the written paths.
std::vector<std::filesystem::path> render(const ExplanationBundle& bundle, const std::filesystem::path& out_dir,
                                          int cell_pixels = 32);

}  // namespace leproto::explain
