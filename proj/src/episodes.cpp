#include "leproto/episodes.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "leproto/container.hpp"
#include "leproto/random.hpp"

namespace leproto::episodes {
namespace fs = std::filesystem;

std::string source_kind_name(SourceKind k) {
  switch (k) {
    case SourceKind::kImageDirectory: return "image-directory";
    case SourceKind::kSynthetic: return "synthetic";
    case SourceKind::kPrecomputed: return "precomputed";
  }
  return "?";
}

SourceKind parse_source_kind(const std::string& s) {
  if (s == "image-directory") return SourceKind::kImageDirectory;
  if (s == "synthetic") return SourceKind::kSynthetic;
  if (s == "precomputed") return SourceKind::kPrecomputed;
  throw DatasetError("unknown source kind: " + s);
}

void SyntheticSpec::validate() const {
  if (num_classes == 0) throw DatasetError("synthetic spec needs at least one class");
  if (samples_per_class == 0) throw DatasetError("empty class: synthetic samples_per_class is 0");
  if (grid_h == 0 || grid_w == 0 || feature_dim == 0) throw DatasetError("synthetic grid and feature_dim must be positive");
  if (!(class_margin > 0.0)) throw DatasetError("class_margin must be positive");
  if (!(noise_sigma >= 0.0)) throw DatasetError("noise_sigma must be nonnegative");
}

namespace {

class SyntheticSource : public FeatureSource {
 public:
  explicit SyntheticSource(SyntheticSpec spec) : spec_(spec) {
    directions_.reserve(spec.num_classes);
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
      Rng rng(mix_seed(spec.seed, 0xC1A55000ULL + c));
      std::vector<double> u(spec.feature_dim);
      double norm = 0.0;
      while (norm < 1e-8) {
        norm = 0.0;
        for (auto& v : u) {
          v = rng.normal();
          norm += v * v;
        }
        norm = std::sqrt(norm);
      }
      for (auto& v : u) v /= norm;
      directions_.push_back(std::move(u));
    }
  }

  SampleData load(const DatasetItem& item) const override {
    // locator is "<class>:<sample>"
    auto colon = item.locator.find(':');
    std::size_t c = std::stoul(item.locator.substr(0, colon));
    std::size_t s = std::stoul(item.locator.substr(colon + 1));
    Rng rng(mix_seed(spec_.seed, (c + 1) * 1000003ULL + s));
    SampleData out;
    out.tokens = Tensor({spec_.patches(), spec_.feature_dim});
    const auto& u = directions_[c];
    for (std::size_t r = 0; r < spec_.patches(); ++r)
      for (std::size_t d = 0; d < spec_.feature_dim; ++d)
        out.tokens[r * spec_.feature_dim + d] = u[d] * spec_.class_margin + rng.normal(0.0, spec_.noise_sigma);
    return out;
  }

 private:
  SyntheticSpec spec_;
  std::vector<std::vector<double>> directions_;
};

class ImageSource : public FeatureSource {
 public:
  explicit ImageSource(ImageDirectorySource src) : src_(std::move(src)) {}

  SampleData load(const DatasetItem& item) const override {
    cv::Mat img = cv::imread(item.locator, cv::IMREAD_COLOR);
    if (img.empty()) throw DatasetError("cannot decode image: " + item.locator);
    const std::size_t p = src_.patch_size;
    cv::Mat resized;
    cv::resize(img, resized, cv::Size(static_cast<int>(src_.grid_w * p), static_cast<int>(src_.grid_h * p)), 0, 0,
               cv::INTER_AREA);
    SampleData out;
    const std::size_t dim = p * p * 3;
    out.tokens = Tensor({src_.grid_h * src_.grid_w, dim});
    for (std::size_t gi = 0; gi < src_.grid_h; ++gi)
      for (std::size_t gj = 0; gj < src_.grid_w; ++gj) {
        std::size_t r = gi * src_.grid_w + gj;
        std::size_t k = 0;
        for (std::size_t y = 0; y < p; ++y)
          for (std::size_t x = 0; x < p; ++x) {
            const auto& px = resized.at<cv::Vec3b>(static_cast<int>(gi * p + y), static_cast<int>(gj * p + x));
            for (int ch = 0; ch < 3; ++ch) out.tokens[r * dim + k++] = px[ch] / 255.0;
          }
      }
    return out;
  }

 private:
  ImageDirectorySource src_;
};

class PrecomputedFeatures : public FeatureSource {
 public:
  std::map<std::string, SampleData> samples;

  SampleData load(const DatasetItem& item) const override {
    auto it = samples.find(item.sample_id);
    if (it == samples.end()) throw DatasetError("no precomputed arrays for " + item.sample_id);
    return it->second;
  }
};

DatasetIndex load_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  std::vector<DatasetItem> items;
  items.reserve(spec.num_classes * spec.samples_per_class);
  char buf[64];
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    std::snprintf(buf, sizeof buf, "class_%03zu", c);
    std::string label = buf;
    for (std::size_t s = 0; s < spec.samples_per_class; ++s) {
      std::snprintf(buf, sizeof buf, "c%03zu_s%04zu", c, s);
      items.push_back({buf, label, std::to_string(c) + ":" + std::to_string(s)});
    }
  }
  return DatasetIndex(std::move(items), SourceKind::kSynthetic, std::make_shared<SyntheticSource>(spec), spec.grid_h,
                      spec.grid_w, spec.feature_dim);
}

DatasetIndex load_images(const ImageDirectorySource& src) {
  if (!fs::is_directory(src.root)) throw DatasetError("missing locator: " + src.root.string());
  if (src.grid_h == 0 || src.grid_w == 0 || src.patch_size == 0) throw DatasetError("image grid must be positive");
  std::vector<DatasetItem> items;
  std::vector<fs::path> class_dirs;
  for (const auto& e : fs::directory_iterator(src.root))
    if (e.is_directory()) class_dirs.push_back(e.path());
  std::sort(class_dirs.begin(), class_dirs.end());
  for (const auto& dir : class_dirs) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_regular_file()) files.push_back(e.path());
    if (files.empty()) throw DatasetError("empty class: " + dir.filename().string());
    std::sort(files.begin(), files.end());
    std::string label = dir.filename().string();
    for (const auto& f : files) items.push_back({label + "/" + f.filename().string(), label, f.string()});
  }
  if (items.empty()) throw DatasetError("no class folders under " + src.root.string());
  std::size_t dim = src.patch_size * src.patch_size * 3;
  return DatasetIndex(std::move(items), SourceKind::kImageDirectory, std::make_shared<ImageSource>(src), src.grid_h,
                      src.grid_w, dim);
}

DatasetIndex load_precomputed(const PrecomputedSource& src) {
  if (!fs::exists(src.root / container::kManifestFile)) throw DatasetError("missing locator: " + src.root.string());
  auto manifest = container::read_manifest(src.root);
  auto grid = manifest.meta.value("grid", std::vector<std::size_t>{});
  if (grid.size() != 2) throw DatasetError("precomputed manifest meta must carry grid [H, W]");
  const std::size_t R = grid[0] * grid[1];
  static const std::map<std::string, int> kTapSlot{{"input", -1}, {"L", 0}, {"M", 1}, {"H", 2}, {"O", 3}};

  auto features = std::make_shared<PrecomputedFeatures>();
  std::map<std::string, std::string> labels;
  std::map<std::string, std::size_t> dims;  // per tap family: "input" or "tap"
  for (const auto& e : manifest.entries) {
    std::string sid = e.extra.value("sample_id", std::string());
    std::string label = e.extra.value("label", std::string());
    std::string tap = e.extra.value("tap", std::string("input"));
    if (sid.empty() || label.empty()) throw DatasetError("entry " + e.name + " lacks sample_id/label");
    auto slot = kTapSlot.find(tap);
    if (slot == kTapSlot.end()) throw DatasetError("unknown tap '" + tap + "' in entry " + e.name);
    if (e.shape.size() != 2 || e.shape[0] != R) {
      throw DatasetError("entry " + e.name + " has shape " + shape_string(e.shape) + ", expected [R, D]");
    }
    std::string family = slot->second < 0 ? "input" : "tap";
    auto [it, fresh] = dims.emplace(family, e.shape[1]);
    if (!fresh && it->second != e.shape[1]) {
      throw DatasetError("inconsistent feature dim: entry " + e.name + " has " + std::to_string(e.shape[1]) +
                         ", expected " + std::to_string(it->second));
    }
    auto [lit, lfresh] = labels.emplace(sid, label);
    if (!lfresh && lit->second != label) throw DatasetError("sample " + sid + " has conflicting labels");
    auto& sample = features->samples[sid];
    Tensor t = container::read_entry(src.root, e);
    if (slot->second < 0) {
      sample.tokens = std::move(t);
    } else {
      sample.taps[static_cast<std::size_t>(slot->second)] = std::move(t);
    }
  }
  std::vector<DatasetItem> items;
  for (auto& [sid, sample] : features->samples) {
    bool all_taps = std::all_of(sample.taps.begin(), sample.taps.end(), [](const Tensor& t) { return !t.empty(); });
    bool any_tap = std::any_of(sample.taps.begin(), sample.taps.end(), [](const Tensor& t) { return !t.empty(); });
    if (any_tap && !all_taps) throw DatasetError("sample " + sid + " has a partial set of taps");
    if (!all_taps && sample.tokens.empty()) throw DatasetError("sample " + sid + " has neither input nor taps");
    sample.has_taps = all_taps;
    items.push_back({sid, labels[sid], src.root.string() + "#" + sid});
  }
  if (items.empty()) throw DatasetError("precomputed container has no entries");
  std::size_t input_dim = dims.count("input") ? dims["input"] : dims["tap"];
  return DatasetIndex(std::move(items), SourceKind::kPrecomputed, std::move(features), grid[0], grid[1], input_dim);
}

}  // namespace

DatasetIndex::DatasetIndex(std::vector<DatasetItem> items, SourceKind kind, std::shared_ptr<const FeatureSource> source,
                           std::size_t grid_h, std::size_t grid_w, std::size_t input_dim)
    : items_(std::move(items)),
      kind_(kind),
      source_(std::move(source)),
      grid_h_(grid_h),
      grid_w_(grid_w),
      input_dim_(input_dim) {
  std::stable_sort(items_.begin(), items_.end(), [](const DatasetItem& a, const DatasetItem& b) {
    return std::tie(a.class_label, a.sample_id) < std::tie(b.class_label, b.sample_id);
  });
  std::set<std::string> ids;
  for (const auto& it : items_) {
    if (!ids.insert(it.sample_id).second) throw DatasetError("duplicate sample id: " + it.sample_id);
    if (classes_.empty() || classes_.back() != it.class_label) {
      classes_.push_back(it.class_label);
      by_class_.emplace_back();
    }
    by_class_.back().push_back(static_cast<std::size_t>(&it - items_.data()));
  }
}

std::size_t DatasetIndex::class_position(const std::string& label) const {
  auto it = std::lower_bound(classes_.begin(), classes_.end(), label);
  if (it == classes_.end() || *it != label) throw DatasetError("unknown class " + label);
  return static_cast<std::size_t>(it - classes_.begin());
}

SampleData DatasetIndex::materialize(std::size_t item) const {
  if (item >= items_.size()) throw DatasetError("item index out of range");
  return source_->load(items_[item]);
}

DatasetIndex DatasetIndex::subset(const std::vector<std::string>& class_labels) const {
  std::set<std::string> keep(class_labels.begin(), class_labels.end());
  std::vector<DatasetItem> items;
  for (const auto& it : items_)
    if (keep.count(it.class_label)) items.push_back(it);
  return DatasetIndex(std::move(items), kind_, source_, grid_h_, grid_w_, input_dim_);
}

DatasetIndex load_dataset(const DataSource& source) {
  return std::visit(
      [](const auto& s) -> DatasetIndex {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, SyntheticSpec>) {
          return load_synthetic(s);
        } else if constexpr (std::is_same_v<T, ImageDirectorySource>) {
          return load_images(s);
        } else {
          return load_precomputed(s);
        }
      },
      source);
}

std::pair<DatasetIndex, DatasetIndex> split_base_novel(const DatasetIndex& index, double novel_fraction,
                                                       std::uint64_t seed) {
  const auto& classes = index.classes();
  if (classes.size() < 2) throw DatasetError("split needs at least 2 classes");
  if (!(novel_fraction > 0.0 && novel_fraction < 1.0)) throw DatasetError("novel_fraction must be in (0, 1)");
  auto n_novel = static_cast<std::size_t>(std::llround(novel_fraction * static_cast<double>(classes.size())));
  if (n_novel == 0 || n_novel >= classes.size()) {
    throw DatasetError("novel_fraction " + std::to_string(novel_fraction) + " leaves an empty side for " +
                       std::to_string(classes.size()) + " classes");
  }
  std::vector<std::string> order = classes;
  Rng rng(seed);
  for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rng.index(i + 1)]);
  std::vector<std::string> novel(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_novel));
  std::vector<std::string> base(order.begin() + static_cast<std::ptrdiff_t>(n_novel), order.end());
  return {index.subset(base), index.subset(novel)};
}

Episode sample_episode(const DatasetIndex& index, std::size_t n_way, std::size_t k_shot, std::size_t q_queries,
                       std::uint64_t seed) {
  if (n_way == 0 || k_shot == 0 || q_queries == 0) throw DatasetError("n_way, k_shot and q_queries must be positive");
  const auto& classes = index.classes();
  if (classes.size() < n_way) {
    throw DatasetError("insufficient classes: " + std::to_string(n_way) + "-way episode from " +
                       std::to_string(classes.size()) + " classes");
  }
  Rng rng(seed);
  std::vector<std::size_t> order(classes.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t i = 0; i < n_way; ++i) std::swap(order[i], order[i + rng.index(order.size() - i)]);

  Episode ep;
  ep.n_way = n_way;
  ep.k_shot = k_shot;
  ep.q_queries = q_queries;
  ep.episode_seed = seed;
  for (std::size_t local = 0; local < n_way; ++local) {
    std::size_t cpos = order[local];
    std::vector<std::size_t> members = index.items_of_class(cpos);
    if (members.size() < k_shot + q_queries) {
      throw DatasetError("insufficient per-class items: class " + classes[cpos] + " has " +
                         std::to_string(members.size()) + ", episode needs " + std::to_string(k_shot + q_queries));
    }
    for (std::size_t i = 0; i < k_shot + q_queries; ++i) std::swap(members[i], members[i + rng.index(members.size() - i)]);
    ep.classes.push_back(classes[cpos]);
    for (std::size_t i = 0; i < k_shot + q_queries; ++i) {
      EpisodeItem it{members[i], index.items()[members[i]].sample_id, static_cast<int>(local)};
      (i < k_shot ? ep.support : ep.query).push_back(std::move(it));
    }
  }
  // Class-major ordering: stable partition above already groups by class.
  return ep;
}

nlohmann::json episode_to_json(const Episode& e) {
  auto items = [](const std::vector<EpisodeItem>& v) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& it : v) a.push_back({{"sample_id", it.sample_id}, {"label", it.label}});
    return a;
  };
  return {{"n_way", e.n_way},     {"k_shot", e.k_shot},          {"q_queries", e.q_queries},
          {"classes", e.classes}, {"support", items(e.support)}, {"query", items(e.query)},
          {"episode_seed", e.episode_seed}};
}

namespace {

void fill_batch(const DatasetIndex& index, const std::vector<std::size_t>& items, EpisodeBatch& b) {
  std::vector<SampleData> samples;
  samples.reserve(items.size());
  for (auto i : items) samples.push_back(index.materialize(i));
  const std::size_t n = samples.size();
  b.has_taps = !samples.empty() && samples[0].has_taps;
  auto stack = [n](const std::vector<const Tensor*>& parts) {
    const Shape& s = parts[0]->shape();
    Tensor out({n, s[0], s[1]});
    for (std::size_t i = 0; i < n; ++i) {
      if (parts[i]->shape() != s) throw DatasetError("inconsistent feature dim within batch");
      std::copy(parts[i]->data().begin(), parts[i]->data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * parts[i]->size()));
    }
    return out;
  };
  if (b.has_taps) {
    for (std::size_t t = 0; t < 4; ++t) {
      std::vector<const Tensor*> parts;
      for (const auto& s : samples) parts.push_back(&s.taps[t]);
      b.taps[t] = stack(parts);
    }
  }
  if (!samples.empty() && !samples[0].tokens.empty()) {
    std::vector<const Tensor*> parts;
    for (const auto& s : samples) parts.push_back(&s.tokens);
    b.tokens = stack(parts);
  }
}

}  // namespace

EpisodeBatch make_episode_batch(const DatasetIndex& index, const Episode& episode) {
  EpisodeBatch b;
  b.n_way = episode.n_way;
  b.k_shot = episode.k_shot;
  std::vector<std::size_t> items;
  for (const auto& it : episode.support) {
    items.push_back(it.item);
    b.support_labels.push_back(it.label);
  }
  for (const auto& it : episode.query) {
    items.push_back(it.item);
    b.query_labels.push_back(it.label);
  }
  fill_batch(index, items, b);
  return b;
}

EpisodeBatch make_item_batch(const DatasetIndex& index, const std::vector<std::size_t>& items) {
  EpisodeBatch b;
  fill_batch(index, items, b);
  return b;
}

}  // namespace leproto::episodes
