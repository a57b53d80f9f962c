#pragma once

// Run configuration shared by the CLI subcommands. JSON sections: model, train,
// synth, eval, paths. Missing keys keep their defaults; unknown keys are errors.

#include <filesystem>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "bagnet/checkpoint.hpp"
#include "bagnet/eval.hpp"
#include "bagnet/heatmap.hpp"
#include "bagnet/synthdata.hpp"
#include "bagnet/trainer.hpp"

namespace bagnet {

struct HeatmapSettings {
  std::size_t tile = 256;  // 0: single pass over the whole image
  std::size_t workers = 1;
  std::string normalization = "minmax";  // minmax | fixed
  double norm_lo = 0, norm_hi = 1;

  friend bool operator==(const HeatmapSettings&, const HeatmapSettings&) = default;
};

struct PathSettings {
  std::string corpus = "corpus";
  std::string checkpoint;
  std::string output = "out";

  friend bool operator==(const PathSettings&, const PathSettings&) = default;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  AblationMode mode = AblationMode::Joint;
  SynthConfig synth;
  EvalSettings eval;
  std::size_t folds = 5;
  HeatmapSettings heatmap;
  PathSettings paths;
};

inline nlohmann::json to_json(const RunConfig& c) {
  const auto& t = c.train;
  const auto& s = c.synth;
  return {
      {"model", to_json(c.model)},
      {"train",
       {{"lr0", t.lr0},
        {"decay", t.decay},
        {"decay_interval", t.decay_interval},
        {"epochs", t.epochs},
        {"bags_per_step", t.bags_per_step},
        {"lambda_sil", t.lambda_sil},
        {"seed", t.seed},
        {"beta1", t.adam.beta1},
        {"beta2", t.adam.beta2},
        {"eps", t.adam.eps},
        {"mode", std::string(to_string(c.mode))}}},
      {"synth",
       {{"seed", s.seed},
        {"image_size", s.image_size},
        {"patch_grid", s.patch_grid},
        {"n_bags", s.n_bags},
        {"malignant_fraction", s.malignant_fraction},
        {"benign_count_min", s.benign_count_min},
        {"benign_count_max", s.benign_count_max},
        {"benign_radius_min", s.benign_radius_min},
        {"benign_radius_max", s.benign_radius_max},
        {"malignant_count_min", s.malignant_count_min},
        {"malignant_count_max", s.malignant_count_max},
        {"malignant_radius_min", s.malignant_radius_min},
        {"malignant_radius_max", s.malignant_radius_max},
        {"region_fraction", s.region_fraction},
        {"noise_amplitude", s.noise_amplitude}}},
      {"eval",
       {{"folds", c.folds},
        {"heatmap_class", c.eval.heatmap_class},
        {"pointing_radius", c.eval.pointing_radius},
        {"iou_quantile", c.eval.iou_quantile},
        {"tile", c.heatmap.tile},
        {"workers", c.heatmap.workers},
        {"normalization", c.heatmap.normalization},
        {"norm_lo", c.heatmap.norm_lo},
        {"norm_hi", c.heatmap.norm_hi}}},
      {"paths", {{"corpus", c.paths.corpus}, {"checkpoint", c.paths.checkpoint}, {"output", c.paths.output}}},
  };
}

namespace detail {

// Checks every key of `in` against the reference layout, recursing into objects.
inline void reject_unknown(const nlohmann::json& in, const nlohmann::json& ref, const std::string& where) {
  if (!in.is_object()) throw ConfigError("config: '" + where + "' must be an object");
  for (const auto& [key, value] : in.items()) {
    const std::string path = where.empty() ? key : where + "." + key;
    if (!ref.contains(key)) throw ConfigError("config: unknown key '" + path + "'");
    if (ref.at(key).is_object()) reject_unknown(value, ref.at(key), path);
  }
}

template <class V>
void take(const nlohmann::json& j, const char* key, V& out, const std::string& section) {
  try {
    out = j.at(key).get<V>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config: bad value for '" + section + "." + key + "': " + j.at(key).dump());
  }
}

}  // namespace detail

/// Builds a RunConfig from (possibly partial) JSON on top of the defaults.
inline RunConfig run_config_from_json(const nlohmann::json& in) {
  const RunConfig defaults;
  nlohmann::json j = to_json(defaults);
  detail::reject_unknown(in, j, "");
  j.merge_patch(in);

  RunConfig c;
  const auto& m = j["model"];
  detail::take(m, "in_channels", c.model.in_channels, "model");
  detail::take(m, "channels", c.model.channels, "model");
  detail::take(m, "n3", c.model.n3, "model");
  detail::take(m, "n1", c.model.n1, "model");
  detail::take(m, "classes", c.model.classes, "model");

  const auto& t = j["train"];
  detail::take(t, "lr0", c.train.lr0, "train");
  detail::take(t, "decay", c.train.decay, "train");
  detail::take(t, "decay_interval", c.train.decay_interval, "train");
  detail::take(t, "epochs", c.train.epochs, "train");
  detail::take(t, "bags_per_step", c.train.bags_per_step, "train");
  detail::take(t, "lambda_sil", c.train.lambda_sil, "train");
  detail::take(t, "seed", c.train.seed, "train");
  detail::take(t, "beta1", c.train.adam.beta1, "train");
  detail::take(t, "beta2", c.train.adam.beta2, "train");
  detail::take(t, "eps", c.train.adam.eps, "train");
  std::string mode;
  detail::take(t, "mode", mode, "train");
  c.mode = parse_mode(mode);

  const auto& s = j["synth"];
  detail::take(s, "seed", c.synth.seed, "synth");
  detail::take(s, "image_size", c.synth.image_size, "synth");
  detail::take(s, "patch_grid", c.synth.patch_grid, "synth");
  detail::take(s, "n_bags", c.synth.n_bags, "synth");
  detail::take(s, "malignant_fraction", c.synth.malignant_fraction, "synth");
  detail::take(s, "benign_count_min", c.synth.benign_count_min, "synth");
  detail::take(s, "benign_count_max", c.synth.benign_count_max, "synth");
  detail::take(s, "benign_radius_min", c.synth.benign_radius_min, "synth");
  detail::take(s, "benign_radius_max", c.synth.benign_radius_max, "synth");
  detail::take(s, "malignant_count_min", c.synth.malignant_count_min, "synth");
  detail::take(s, "malignant_count_max", c.synth.malignant_count_max, "synth");
  detail::take(s, "malignant_radius_min", c.synth.malignant_radius_min, "synth");
  detail::take(s, "malignant_radius_max", c.synth.malignant_radius_max, "synth");
  detail::take(s, "region_fraction", c.synth.region_fraction, "synth");
  detail::take(s, "noise_amplitude", c.synth.noise_amplitude, "synth");

  const auto& e = j["eval"];
  detail::take(e, "folds", c.folds, "eval");
  detail::take(e, "heatmap_class", c.eval.heatmap_class, "eval");
  detail::take(e, "pointing_radius", c.eval.pointing_radius, "eval");
  detail::take(e, "iou_quantile", c.eval.iou_quantile, "eval");
  detail::take(e, "tile", c.heatmap.tile, "eval");
  detail::take(e, "workers", c.heatmap.workers, "eval");
  detail::take(e, "normalization", c.heatmap.normalization, "eval");
  detail::take(e, "norm_lo", c.heatmap.norm_lo, "eval");
  detail::take(e, "norm_hi", c.heatmap.norm_hi, "eval");

  const auto& p = j["paths"];
  detail::take(p, "corpus", c.paths.corpus, "paths");
  detail::take(p, "checkpoint", c.paths.checkpoint, "paths");
  detail::take(p, "output", c.paths.output, "paths");
  return c;
}

inline void validate(const RunConfig& c) {
  validate(c.model);
  validate(c.train);
  validate(c.synth, receptive_field(c.model));
  if (c.folds == 0) throw ConfigError("config: eval.folds must be >= 1");
  if (c.eval.heatmap_class >= c.model.classes) throw ConfigError("config: eval.heatmap_class out of range");
  if (c.eval.iou_quantile < 0 || c.eval.iou_quantile > 1) throw ConfigError("config: eval.iou_quantile must lie in [0,1]");
  if (c.heatmap.workers == 0) throw ConfigError("config: eval.workers must be >= 1");
  if (c.heatmap.normalization != "minmax" && c.heatmap.normalization != "fixed")
    throw ConfigError("config: eval.normalization must be minmax or fixed");
  if (c.heatmap.normalization == "fixed" && !(c.heatmap.norm_hi > c.heatmap.norm_lo))
    throw ConfigError("config: eval.norm_hi must exceed eval.norm_lo");
}

inline Normalization normalization_of(const HeatmapSettings& h) {
  if (h.normalization == "fixed") return {Normalization::Kind::Fixed, h.norm_lo, h.norm_hi};
  return {};
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": invalid JSON at byte offset " + std::to_string(e.byte));
  }
  return run_config_from_json(j);
}

}  // namespace bagnet
