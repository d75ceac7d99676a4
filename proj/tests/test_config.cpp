#include <cstdlib>
#include <fstream>

#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "leproto/config.hpp"

using namespace leproto;

TEST(RunConfig, JsonRoundTrip) {
  auto c = testutil::tiny_config();
  c.train.lambda = 0.02;
  c.model.adapter.mode = AdapterMode::kMole;
  c.model.use_mfa = false;
  auto j = c.to_json();
  auto back = RunConfig::from_json(j);
  EXPECT_EQ(back.to_json(), j);
  EXPECT_EQ(back.train.lambda, 0.02);
  EXPECT_EQ(back.model.adapter.mode, AdapterMode::kMole);
  EXPECT_FALSE(back.model.use_mfa);
  EXPECT_TRUE(RunConfig{}.to_json()["lambda"].is_null());
}

TEST(RunConfig, UnknownKeyAndBadValuesRejected) {
  RunConfig c;
  EXPECT_THROW(c.apply({{"epochz", 3}}), ConfigError);
  EXPECT_THROW(c.apply({{"epochs", "many"}}), ConfigError);
  EXPECT_THROW(c.apply({{"adapter", "prefix"}}), ConfigError);
  EXPECT_THROW(c.apply({{"data_source", "web"}}), ConfigError);
  EXPECT_THROW(c.apply(nlohmann::json::array()), ConfigError);
  RunConfig bad;
  bad.train.k_shot = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(RunConfig, OverlayKeepsOtherKeys) {
  RunConfig c;
  c.apply({{"epochs", 3}, {"kappa", 0.5}});
  EXPECT_EQ(c.train.epochs, 3u);
  EXPECT_EQ(c.train.kappa, 0.5);
  EXPECT_EQ(c.train.episodes_per_epoch, 500u);
  EXPECT_EQ(c.model.concepts, 312u);
  c.apply({{"lambda", nullptr}});
  EXPECT_FALSE(c.train.lambda.has_value());
}

TEST(RunConfig, DepthWithoutTapsUsesDefaultTaps) {
  RunConfig c;
  c.apply({{"depth", 8}});
  EXPECT_EQ(c.model.backbone.taps, (std::array<std::size_t, 3>{2, 4, 6}));
  c.apply({{"depth", 8}, {"taps", {1, 3, 5}}});
  EXPECT_EQ(c.model.backbone.taps, (std::array<std::size_t, 3>{1, 3, 5}));
  EXPECT_NO_THROW(c.validate());
}

TEST(RunConfig, ModelForDataset) {
  testutil::TinySetup s;
  auto m = s.config.model_for(s.base);
  EXPECT_EQ(m.backbone.grid_h, 2u);
  EXPECT_EQ(m.backbone.grid_w, 3u);
  EXPECT_EQ(m.backbone.input_dim, 6u);
  EXPECT_EQ(m.seed, s.config.train.seed);
  auto p = s.config.eval_protocol(5);
  EXPECT_EQ(p.k_shot, 5u);
  EXPECT_EQ(p.episodes, s.config.eval.episodes);
  EXPECT_EQ(p.seed, s.config.eval.seed);
}

TEST(RunConfig, LoadFromFile) {
  auto dir = testutil::fresh_dir("config");
  {
    std::ofstream f(dir / "c.json");
    f << R"({"epochs": 7, "n_way": 3})";
  }
  auto c = load_config(dir / "c.json");
  EXPECT_EQ(c.train.epochs, 7u);
  EXPECT_EQ(c.train.n_way, 3u);
  {
    std::ofstream f(dir / "bad.json");
    f << "{not json";
  }
  EXPECT_THROW(load_config(dir / "bad.json"), ConfigError);
  EXPECT_THROW(load_config(dir / "missing.json"), ConfigError);
}

TEST(Float64Mode, Environment) {
  unsetenv(kFloat64Env);
  EXPECT_TRUE(float64_mode());
  setenv(kFloat64Env, "1", 1);
  EXPECT_TRUE(float64_mode());
  setenv(kFloat64Env, "0", 1);
  EXPECT_THROW(float64_mode(), ConfigError);
  unsetenv(kFloat64Env);
}
