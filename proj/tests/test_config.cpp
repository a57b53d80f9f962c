#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "bagnet/config.hpp"

using namespace bagnet;
using nlohmann::json;

namespace {

std::string config_error(const json& j) {
  try {
    validate(run_config_from_json(j));
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "no error";
}

}  // namespace

TEST(Config, EmptyObjectGivesDefaults) {
  const RunConfig c = run_config_from_json(json::object());
  const RunConfig d;
  EXPECT_EQ(c.model, d.model);
  EXPECT_EQ(c.train, d.train);
  EXPECT_EQ(c.synth, d.synth);
  EXPECT_EQ(c.eval, d.eval);
  EXPECT_EQ(c.heatmap, d.heatmap);
  EXPECT_EQ(c.paths, d.paths);
  EXPECT_EQ(c.mode, AblationMode::Joint);
  EXPECT_EQ(c.folds, 5u);
  EXPECT_NO_THROW(validate(c));
}

TEST(Config, PartialOverride) {
  const RunConfig c = run_config_from_json(
      json::parse(R"({"train": {"epochs": 3, "mode": "mil"}, "model": {"channels": 16}, "eval": {"tile": 0}})"));
  EXPECT_EQ(c.train.epochs, 3u);
  EXPECT_EQ(c.mode, AblationMode::MilOnly);
  EXPECT_EQ(c.model.channels, 16u);
  EXPECT_EQ(c.model.n3, ModelConfig{}.n3);
  EXPECT_EQ(c.heatmap.tile, 0u);
  EXPECT_EQ(c.train.lr0, TrainConfig{}.lr0);
}

TEST(Config, UnknownKeysAreNamed) {
  EXPECT_NE(config_error(json::parse(R"({"trian": {}})")).find("'trian'"), std::string::npos);
  EXPECT_NE(config_error(json::parse(R"({"train": {"epoch": 3}})")).find("'train.epoch'"), std::string::npos);
  EXPECT_NE(config_error(json::parse(R"({"model": 3})")).find("'model'"), std::string::npos);
}

TEST(Config, BadValuesAreRejected) {
  EXPECT_NE(config_error(json::parse(R"({"train": {"epochs": "many"}})")).find("train.epochs"), std::string::npos);
  EXPECT_NE(config_error(json::parse(R"({"train": {"mode": "both"}})")).find("both"), std::string::npos);
  EXPECT_NE(config_error(json::parse(R"({"eval": {"folds": 0}})")), "no error");
  EXPECT_NE(config_error(json::parse(R"({"eval": {"heatmap_class": 2}})")), "no error");
  EXPECT_NE(config_error(json::parse(R"({"eval": {"normalization": "log"}})")), "no error");
  EXPECT_NE(config_error(json::parse(R"({"synth": {"image_size": 65}})")), "no error");
  EXPECT_NE(config_error(json::parse(R"({"model": {"channels": 0}})")), "no error");
  EXPECT_NE(config_error(json::parse(R"({"train": {"lr0": -1}})")), "no error");
}

TEST(Config, JsonRoundTrip) {
  RunConfig c;
  c.model.channels = 12;
  c.train.seed = 77;
  c.train.adam.beta2 = 0.99;
  c.mode = AblationMode::SilOnly;
  c.synth.noise_amplitude = 0.125;
  c.eval.iou_quantile = 0.75;
  c.folds = 3;
  c.heatmap.normalization = "fixed";
  c.heatmap.norm_hi = 4;
  c.paths.checkpoint = "a/b.bgml";
  const json j = to_json(c);
  EXPECT_EQ(to_json(run_config_from_json(j)), j);
}

TEST(Config, LoadFromFile) {
  const auto dir = std::filesystem::temp_directory_path() / "bagnet_test_config";
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "good.json") << R"({"synth": {"n_bags": 12}})";
  EXPECT_EQ(load_run_config(dir / "good.json").synth.n_bags, 12u);
  std::ofstream(dir / "bad.json") << R"({"synth": )";
  try {
    load_run_config(dir / "bad.json");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("byte offset"), std::string::npos);
  }
  EXPECT_THROW(load_run_config(dir / "missing.json"), IoError);
  std::filesystem::remove_all(dir);
}

TEST(Config, NormalizationSelection) {
  HeatmapSettings h;
  EXPECT_EQ(normalization_of(h).kind, Normalization::Kind::MinMax);
  h.normalization = "fixed";
  h.norm_lo = -1;
  h.norm_hi = 2;
  const auto n = normalization_of(h);
  EXPECT_EQ(n.kind, Normalization::Kind::Fixed);
  EXPECT_EQ(n.lo, -1);
  EXPECT_EQ(n.hi, 2);
}
