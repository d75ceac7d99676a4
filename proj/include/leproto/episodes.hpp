#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "leproto/tensor.hpp"

namespace leproto::episodes {

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class SourceKind { kImageDirectory, kSynthetic, kPrecomputed };

std::string source_kind_name(SourceKind k);
SourceKind parse_source_kind(const std::string& s);

// Patch features of class c are u_c * class_margin + N(0, noise_sigma^2) per
// patch, with u_c a seeded random unit direction.
struct SyntheticSpec {
  std::size_t num_classes = 20;
  std::size_t samples_per_class = 30;
  std::size_t grid_h = 4;
  std::size_t grid_w = 4;
  std::size_t feature_dim = 32;
  double class_margin = 2.0;
  double noise_sigma = 0.5;
  std::uint64_t seed = 0;

  std::size_t patches() const { return grid_h * grid_w; }
  void validate() const;
};

struct ImageDirectorySource {
  std::filesystem::path root;
  std::size_t grid_h = 4;
  std::size_t grid_w = 4;
  std::size_t patch_size = 4;  // pixels per grid cell side after resize
};

struct PrecomputedSource {
  std::filesystem::path root;
};

using DataSource = std::variant<SyntheticSpec, ImageDirectorySource, PrecomputedSource>;

struct DatasetItem {
  std::string sample_id;
  std::string class_label;
  std::string locator;
};

// Per-sample arrays: backbone input tokens [R, D_in], and optionally the four
// precomputed depth taps (low, mid, high, out), each [R, D].
struct SampleData {
  Tensor tokens;
  std::array<Tensor, 4> taps;
  bool has_taps = false;
};

class FeatureSource {
 public:
  virtual ~FeatureSource() = default;
  virtual SampleData load(const DatasetItem& item) const = 0;
};

// Immutable after construction; subsets share the feature source.
class DatasetIndex {
 public:
  DatasetIndex(std::vector<DatasetItem> items, SourceKind kind, std::shared_ptr<const FeatureSource> source,
               std::size_t grid_h, std::size_t grid_w, std::size_t input_dim);

  const std::vector<DatasetItem>& items() const { return items_; }
  const std::vector<std::string>& classes() const { return classes_; }
  SourceKind kind() const { return kind_; }
  std::size_t grid_h() const { return grid_h_; }
  std::size_t grid_w() const { return grid_w_; }
  std::size_t input_dim() const { return input_dim_; }

  // Item indices of one class (by position in classes()), in index order.
  const std::vector<std::size_t>& items_of_class(std::size_t class_pos) const { return by_class_[class_pos]; }
  std::size_t class_position(const std::string& label) const;

  SampleData materialize(std::size_t item) const;

  // Same source, restricted to the given class labels.
  DatasetIndex subset(const std::vector<std::string>& class_labels) const;

 private:
  std::vector<DatasetItem> items_;
  std::vector<std::string> classes_;
  std::vector<std::vector<std::size_t>> by_class_;
  SourceKind kind_;
  std::shared_ptr<const FeatureSource> source_;
  std::size_t grid_h_, grid_w_, input_dim_;
};

DatasetIndex load_dataset(const DataSource& source);

std::pair<DatasetIndex, DatasetIndex> split_base_novel(const DatasetIndex& index, double novel_fraction,
                                                       std::uint64_t seed);

struct EpisodeItem {
  std::size_t item = 0;  // position in the DatasetIndex
  std::string sample_id;
  int label = 0;  // local label in [0, n_way)

  friend bool operator==(const EpisodeItem&, const EpisodeItem&) = default;
};

// Support and query are class-major: class 0's items first.
struct Episode {
  std::size_t n_way = 0;
  std::size_t k_shot = 0;
  std::size_t q_queries = 0;
  std::vector<std::string> classes;  // global labels; position = local label
  std::vector<EpisodeItem> support;
  std::vector<EpisodeItem> query;
  std::uint64_t episode_seed = 0;

  friend bool operator==(const Episode&, const Episode&) = default;
};

Episode sample_episode(const DatasetIndex& index, std::size_t n_way, std::size_t k_shot, std::size_t q_queries,
                       std::uint64_t seed);

nlohmann::json episode_to_json(const Episode& e);

// Dense batch for one episode: support rows first, then query rows.
struct EpisodeBatch {
  Tensor tokens;                // [N*K + N*Q, R, D_in]
  std::array<Tensor, 4> taps;   // set only for precomputed-tap datasets
  bool has_taps = false;
  std::vector<int> support_labels;
  std::vector<int> query_labels;
  std::size_t n_way = 0;
  std::size_t k_shot = 0;
};

EpisodeBatch make_episode_batch(const DatasetIndex& index, const Episode& episode);
// Batch from an explicit list of item positions; labels all zero.
EpisodeBatch make_item_batch(const DatasetIndex& index, const std::vector<std::size_t>& items);

}  // namespace leproto::episodes
