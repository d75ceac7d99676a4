#pragma once

#include <memory>
#include <utility>

#include "leproto/config.hpp"
#include "test_util.hpp"

namespace testutil {

// Small synthetic run: 20 classes split 10/10, width 8, 16 concepts.
inline leproto::RunConfig tiny_config() {
  leproto::RunConfig c;
  c.data.synthetic = small_spec(20, 20);
  c.data.synthetic.grid_h = 2;
  c.data.synthetic.grid_w = 3;
  c.data.synthetic.feature_dim = 6;
  c.model.backbone.width = 8;
  c.model.concepts = 16;
  c.model.adapter.rank = 2;
  c.model.adapter.attn_key_dim = 4;
  c.model.adapter.attn_value_dim = 4;
  c.train.epochs = 2;
  c.train.episodes_per_epoch = 3;
  c.train.warmup_epochs = 1;
  c.train.q_queries = 3;
  c.eval.episodes = 20;
  return c;
}

inline std::pair<leproto::episodes::DatasetIndex, leproto::episodes::DatasetIndex> tiny_split(
    const leproto::RunConfig& c) {
  auto all = leproto::episodes::load_dataset(c.data.source_spec());
  return leproto::episodes::split_base_novel(all, c.data.novel_fraction, c.data.split_seed);
}

struct TinySetup {
  leproto::RunConfig config;
  std::pair<leproto::episodes::DatasetIndex, leproto::episodes::DatasetIndex> split;
  leproto::episodes::DatasetIndex& base = split.first;
  leproto::episodes::DatasetIndex& novel = split.second;
  std::unique_ptr<leproto::LeProtoNet> net;

  explicit TinySetup(leproto::RunConfig c = tiny_config())
      : config(std::move(c)), split(tiny_split(config)), net(std::make_unique<leproto::LeProtoNet>(config.model_for(base))) {}
  TinySetup(const TinySetup&) = delete;
  TinySetup& operator=(const TinySetup&) = delete;
};

}  // namespace testutil
