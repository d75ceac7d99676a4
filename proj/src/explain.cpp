#include "leproto/explain.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace leproto::explain {

nlohmann::json ExplanationBundle::to_json() const {
  nlohmann::json concepts = nlohmann::json::array();
  for (const auto& c : top_concepts) {
    concepts.push_back({{"concept_id", c.concept_id},
                        {"contribution", c.contribution},
                        {"query_heatmap", c.query_heatmap},
                        {"support_heatmap", c.support_heatmap}});
  }
  return {{"query_id", query_id},
          {"support_id", support_id},
          {"predicted_class", predicted_class},
          {"predicted_label", predicted_label},
          {"similarity_score", similarity_score},
          {"grid_h", grid_h},
          {"grid_w", grid_w},
          {"top_concepts", concepts}};
}

std::vector<std::size_t> top_concepts(std::span<const double> values, std::size_t k) {
  if (k > values.size()) {
    throw std::invalid_argument("top_concepts: k=" + std::to_string(k) + " exceeds " + std::to_string(values.size()) +
                                " concepts");
  }
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });
  idx.resize(k);
  return idx;
}

std::vector<double> normalize_heatmap(std::span<const double> values) {
  std::vector<double> out(values.size(), 0.0);
  if (values.empty()) return out;
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double range = *hi - *lo;
  if (!(range > 0.0)) return out;
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = std::clamp((values[i] - *lo) / range, 0.0, 1.0);
  return out;
}

namespace {

std::vector<double> concept_map(const Tensor& a_tilde, std::size_t row, std::size_t concept_id) {
  const std::size_t r = a_tilde.dim(1), c = a_tilde.dim(2);
  const auto d = a_tilde.data();
  std::vector<double> m(r);
  for (std::size_t p = 0; p < r; ++p) m[p] = d[(row * r + p) * c + concept_id];
  return m;
}

double row_cosine(const Tensor& t, std::size_t i, std::size_t j) {
  const std::size_t c = t.dim(1);
  const auto d = t.data();
  double dot = 0.0, ni = 0.0, nj = 0.0;
  for (std::size_t x = 0; x < c; ++x) {
    dot += d[i * c + x] * d[j * c + x];
    ni += d[i * c + x] * d[i * c + x];
    nj += d[j * c + x] * d[j * c + x];
  }
  return dot / std::max(std::sqrt(ni) * std::sqrt(nj), 1e-12);
}

ExplanationBundle assemble(const EpisodeResult& r, std::size_t query_row, std::size_t support_row,
                           std::size_t query_pos, int predicted, std::size_t k, std::size_t grid_h,
                           std::size_t grid_w) {
  ExplanationBundle b;
  b.predicted_label = predicted;
  b.similarity_score = r.similarity.value().at({query_pos, static_cast<std::size_t>(predicted)});
  b.grid_h = grid_h;
  b.grid_w = grid_w;
  const Tensor& h = r.trace.h.value();
  const std::size_t c = h.dim(1);
  std::span<const double> hq(h.data().data() + query_row * c, c);
  for (std::size_t id : top_concepts(hq, k)) {
    ConceptExplanation e;
    e.concept_id = id;
    e.contribution = hq[id];
    e.query_heatmap = normalize_heatmap(concept_map(r.trace.a_tilde.value(), query_row, id));
    e.support_heatmap = normalize_heatmap(concept_map(r.trace.a_tilde.value(), support_row, id));
    b.top_concepts.push_back(std::move(e));
  }
  return b;
}

}  // namespace

ExplanationBundle explanation_bundle(const LeProtoNet& net, const episodes::DatasetIndex& index,
                                     std::size_t query_item, std::size_t support_item, std::size_t k) {
  if (k > net.config().concepts) throw std::invalid_argument("k exceeds the number of concepts");
  auto batch = episodes::make_item_batch(index, {support_item, query_item});
  batch.n_way = 1;
  batch.k_shot = 1;
  batch.support_labels = {0};
  batch.query_labels = {0};
  NoGradGuard guard;
  const EpisodeResult r = net.episode_forward(batch, losses::LossConfig{});
  ExplanationBundle b = assemble(r, 1, 0, 0, r.predictions[0], k, index.grid_h(), index.grid_w());
  b.query_id = index.items()[query_item].sample_id;
  b.support_id = index.items()[support_item].sample_id;
  b.predicted_class = index.items()[support_item].class_label;
  return b;
}

ExplanationBundle explain_episode(const LeProtoNet& net, const episodes::DatasetIndex& index,
                                  const episodes::Episode& episode, std::size_t query_pos, std::size_t k) {
  if (query_pos >= episode.query.size()) throw std::out_of_range("query position outside the episode");
  if (k > net.config().concepts) throw std::invalid_argument("k exceeds the number of concepts");
  const auto batch = episodes::make_episode_batch(index, episode);
  NoGradGuard guard;
  const EpisodeResult r = net.episode_forward(batch, losses::LossConfig{});
  const int pred = r.predictions[query_pos];
  const std::size_t n_support = episode.support.size();
  const std::size_t query_row = n_support + query_pos;
  const Tensor& fused = r.trace.fused.value();
  std::size_t best = 0;
  double best_cos = -2.0;
  for (std::size_t s = 0; s < n_support; ++s) {
    if (episode.support[s].label != pred) continue;
    const double cs = row_cosine(fused, query_row, s);
    if (cs > best_cos) {
      best_cos = cs;
      best = s;
    }
  }
  ExplanationBundle b = assemble(r, query_row, best, query_pos, pred, k, index.grid_h(), index.grid_w());
  b.query_id = episode.query[query_pos].sample_id;
  b.support_id = episode.support[best].sample_id;
  b.predicted_class = episode.classes[static_cast<std::size_t>(pred)];
  return b;
}

namespace {

std::string file_safe(const std::string& s) {
  std::string out = s;
  for (char& ch : out) {
    const bool ok = std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '_' || ch == '.';
    if (!ok) ch = '_';
  }
  return out;
}

void write_heatmap(const std::vector<double>& map, std::size_t grid_h, std::size_t grid_w, int cell,
                   const std::filesystem::path& path) {
  cv::Mat gray(static_cast<int>(grid_h), static_cast<int>(grid_w), CV_8UC1);
  for (std::size_t y = 0; y < grid_h; ++y)
    for (std::size_t x = 0; x < grid_w; ++x)
      gray.at<unsigned char>(static_cast<int>(y), static_cast<int>(x)) =
          static_cast<unsigned char>(std::lround(255.0 * map[y * grid_w + x]));
  cv::Mat big, color;
  cv::resize(gray, big, cv::Size(static_cast<int>(grid_w) * cell, static_cast<int>(grid_h) * cell), 0, 0,
             cv::INTER_NEAREST);
  cv::applyColorMap(big, color, cv::COLORMAP_VIRIDIS);
  if (!cv::imwrite(path.string(), color)) throw std::runtime_error("cannot write " + path.string());
}

}  // namespace

std::vector<std::filesystem::path> render(const ExplanationBundle& bundle, const std::filesystem::path& out_dir,
                                          int cell_pixels) {
  std::filesystem::create_directories(out_dir);
  const std::string q = file_safe(bundle.query_id);
  std::vector<std::filesystem::path> written;
  const auto json_path = out_dir / (q + ".bundle.json");
  {
    std::ofstream out(json_path);
    if (!out) throw std::runtime_error("cannot write " + json_path.string());
    out << bundle.to_json().dump(2) << "\n";
    if (!out) throw std::runtime_error("write failed for " + json_path.string());
  }
  written.push_back(json_path);
  for (const auto& c : bundle.top_concepts) {
    const std::string stem = q + "_concept" + std::to_string(c.concept_id);
    const auto qp = out_dir / (stem + "_query.png");
    const auto sp = out_dir / (stem + "_support.png");
    write_heatmap(c.query_heatmap, bundle.grid_h, bundle.grid_w, cell_pixels, qp);
    write_heatmap(c.support_heatmap, bundle.grid_h, bundle.grid_w, cell_pixels, sp);
    written.push_back(qp);
    written.push_back(sp);
  }
  return written;
}

}  // namespace leproto::explain
