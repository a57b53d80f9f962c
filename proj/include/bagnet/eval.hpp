#pragma once

// Accuracy, localization scores against synthetic masks, fold splits and the
// SIL / MIL / joint ablation harness.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "bagnet/heatmap.hpp"
#include "bagnet/metrics.hpp"
#include "bagnet/synthdata.hpp"
#include "bagnet/trainer.hpp"

namespace bagnet {

inline bool mask_empty(const Mask& mask) {
  return std::all_of(mask.data().begin(), mask.data().end(), [](std::uint8_t v) { return v == 0; });
}

template <class T>
void check_map_mask(const Tensor<T>& map, std::size_t offset, const Mask& mask, const char* who) {
  if (map.rank() != 2 || mask.rank() != 2) throw ShapeError(std::string(who) + ": expected 2-d map and mask");
  if (map.dim(0) + 2 * offset > mask.dim(0) || map.dim(1) + 2 * offset > mask.dim(1))
    throw ShapeError(std::string(who) + ": map " + shape_str(map.shape()) + " with offset " +
                     std::to_string(offset) + " does not fit mask " + shape_str(mask.shape()));
  if (mask_empty(mask)) throw ShapeError(std::string(who) + ": mask has no positive pixel");
}

/// Hit iff the map's argmax (first in row-major order), shifted by `offset`
/// into image coordinates, lies within `radius` pixels of a mask pixel.
template <class T>
bool pointing_game(const Tensor<T>& map, std::size_t offset, const Mask& mask, double radius = 5.0) {
  check_map_mask(map, offset, mask, "pointing_game");
  std::size_t best = 0;
  for (std::size_t p = 1; p < map.size(); ++p)
    if (map[p] > map[best]) best = p;
  const long y = static_cast<long>(best / map.dim(1) + offset);
  const long x = static_cast<long>(best % map.dim(1) + offset);
  const long r = static_cast<long>(std::floor(radius));
  const long mh = static_cast<long>(mask.dim(0)), mw = static_cast<long>(mask.dim(1));
  for (long dy = -r; dy <= r; ++dy)
    for (long dx = -r; dx <= r; ++dx) {
      if (static_cast<double>(dy * dy + dx * dx) > radius * radius) continue;
      const long yy = y + dy, xx = x + dx;
      if (yy < 0 || xx < 0 || yy >= mh || xx >= mw) continue;
      if (mask.at(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx))) return true;
    }
  return false;
}

template <class T>
bool pointing_game(const LogitHeatmap<T>& hm, const Mask& mask, std::size_t k, double radius = 5.0) {
  return pointing_game(hm.channel(k), hm.offset, mask, radius);
}

struct ThresholdPolicy {
  enum class Kind { Quantile, Absolute } kind = Kind::Quantile;
  double value = 0.9;

  static ThresholdPolicy quantile(double q) { return {Kind::Quantile, q}; }
  static ThresholdPolicy absolute(double t) { return {Kind::Absolute, t}; }
};

/// Linear-interpolation quantile of the sorted values (R type 7).
inline double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw ShapeError("quantile of empty input");
  if (q < 0 || q > 1) throw ConfigError("quantile must lie in [0,1]");
  std::sort(values.begin(), values.end());
  const double h = (static_cast<double>(values.size()) - 1) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

/// IoU between {map >= threshold} and the mask restricted to the map's valid region.
template <class T>
double iou_at_threshold(const Tensor<T>& map, std::size_t offset, const Mask& mask,
                        ThresholdPolicy policy = {}) {
  check_map_mask(map, offset, mask, "iou_at_threshold");
  double thr = policy.value;
  if (policy.kind == ThresholdPolicy::Kind::Quantile) {
    std::vector<double> v(map.data().begin(), map.data().end());
    thr = quantile(std::move(v), policy.value);
  }
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < map.dim(0); ++i)
    for (std::size_t j = 0; j < map.dim(1); ++j) {
      const bool a = static_cast<double>(map.at(i, j)) >= thr;
      const bool b = mask.at(i + offset, j + offset) != 0;
      inter += a && b;
      uni += a || b;
    }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

template <class T>
double iou_at_threshold(const LogitHeatmap<T>& hm, const Mask& mask, std::size_t k, ThresholdPolicy policy = {}) {
  return iou_at_threshold(hm.channel(k), hm.offset, mask, policy);
}

struct EvalSettings {
  std::size_t heatmap_class = kMalignant;
  double pointing_radius = 5.0;
  double iou_quantile = 0.9;

  friend bool operator==(const EvalSettings&, const EvalSettings&) = default;
};

struct MetricsReport {
  double bag_acc = 0;
  double inst_acc_weak = 0;
  double inst_acc_true = 0;
  double pointing = 0;  // over samples with a nonempty mask
  double iou = 0;
  std::size_t bags = 0;
  std::size_t localized = 0;  // samples entering pointing / iou
};

/// Scores a model on annotated samples. Never modifies the model.
inline MetricsReport evaluate(const ToyBagNet<float>& model, std::span<const SynthSample> samples,
                              const EvalSettings& settings = {}) {
  if (samples.empty()) throw ShapeError("evaluate: no samples");
  check_class(model, settings.heatmap_class);
  std::vector<std::size_t> bp, bl, ip, iw, it;
  double hits = 0, iou = 0;
  MetricsReport r;
  for (const auto& s : samples) {
    const auto out = mil_forward(model, s.bag.bag);
    bp.push_back(argmax(out.bag_logits));
    bl.push_back(s.bag.bag.label);
    for (std::size_t i = 0; i < out.instance_logits.size(); ++i) {
      ip.push_back(argmax(out.instance_logits[i]));
      iw.push_back(s.bag.bag.label);
      it.push_back(s.bag.instance_true_labels.at(i));
    }
    if (!mask_empty(s.mask)) {
      const auto hm = logit_heatmap(model, s.image);
      hits += pointing_game(hm, s.mask, settings.heatmap_class, settings.pointing_radius);
      iou += iou_at_threshold(hm, s.mask, settings.heatmap_class, ThresholdPolicy::quantile(settings.iou_quantile));
      ++r.localized;
    }
  }
  r.bags = samples.size();
  r.bag_acc = accuracy(bp, bl);
  r.inst_acc_weak = accuracy(ip, iw);
  r.inst_acc_true = accuracy(ip, it);
  if (r.localized) {
    r.pointing = hits / static_cast<double>(r.localized);
    r.iou = iou / static_cast<double>(r.localized);
  }
  return r;
}

struct FoldSplit {
  std::vector<std::size_t> train, test;
};

/// Bag-level splits from one seeded shuffle. folds >= 2: k disjoint test folds
/// covering every bag. folds == 1: a single 80/20 split.
inline std::vector<FoldSplit> make_folds(std::size_t n, std::size_t folds, std::uint64_t seed) {
  if (folds == 0) throw ConfigError("folds must be >= 1");
  if (n < 2 || (folds > 1 && n < folds))
    throw ConfigError("cannot split " + std::to_string(n) + " bags into " + std::to_string(folds) + " folds");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed, 0x5eedf01dULL);
  rng.shuffle(order);
  std::vector<FoldSplit> out;
  if (folds == 1) {
    const std::size_t n_test = std::max<std::size_t>(1, n / 5);
    FoldSplit f;
    f.test.assign(order.begin(), order.begin() + static_cast<long>(n_test));
    f.train.assign(order.begin() + static_cast<long>(n_test), order.end());
    out.push_back(std::move(f));
    return out;
  }
  for (std::size_t k = 0; k < folds; ++k) {
    const std::size_t lo = k * n / folds, hi = (k + 1) * n / folds;
    FoldSplit f;
    for (std::size_t p = 0; p < n; ++p) (p >= lo && p < hi ? f.test : f.train).push_back(order[p]);
    out.push_back(std::move(f));
  }
  return out;
}

template <class U>
std::vector<U> gather(std::span<const U> items, std::span<const std::size_t> idx) {
  std::vector<U> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(items[i]);
  return out;
}

struct AblationRow {
  AblationMode mode;
  std::size_t fold;
  MetricsReport metrics;
};

struct AblationSettings {
  std::size_t folds = 5;
  std::vector<AblationMode> modes{AblationMode::SilOnly, AblationMode::MilOnly, AblationMode::Joint};
  ModelConfig model;
  TrainConfig train;
  EvalSettings eval;
  std::filesystem::path out_dir;  // per-run training artifacts when set
};

/// Trains and scores every mode on every fold. Within a fold all modes start
/// from the same initialization and see the same shuffle stream.
inline std::vector<AblationRow> run_ablation(std::span<const SynthSample> samples, const AblationSettings& s) {
  const auto splits = make_folds(samples.size(), s.folds, s.train.seed);
  std::vector<AblationRow> rows;
  for (std::size_t f = 0; f < splits.size(); ++f) {
    const auto train_s = gather(samples, std::span<const std::size_t>(splits[f].train));
    const auto test_s = gather(samples, std::span<const std::size_t>(splits[f].test));
    const auto train_b = weak_bags(train_s);
    for (AblationMode mode : s.modes) {
      Rng init_rng(s.train.seed, 2 * f);
      Rng shuffle_rng(s.train.seed, 2 * f + 1);
      auto model = ToyBagNet<float>::init(s.model, init_rng);
      TrainOptions opts;
      if (!s.out_dir.empty()) {
        opts.out_dir = s.out_dir / fmt::format("{}_fold{}", to_string(mode), f);
        opts.write_epoch_checkpoints = false;
      }
      train(model, train_b, {}, s.train, mode, shuffle_rng, opts);
      rows.push_back({mode, f, evaluate(model, test_s, s.eval)});
      if (verbosity() > 0)
        std::fprintf(stderr, "[ablate] %s fold %zu bag_acc %.4f inst_acc_weak %.4f\n",
                     std::string(to_string(mode)).c_str(), f, rows.back().metrics.bag_acc,
                     rows.back().metrics.inst_acc_weak);
    }
  }
  return rows;
}

inline std::string results_csv(std::span<const AblationRow> rows) {
  std::string out = "mode,fold,bag_acc,inst_acc_weak,inst_acc_true,pointing,iou\n";
  for (const auto& r : rows)
    out += fmt::format("{},{},{:.6f},{:.6f},{:.6f},{:.6f},{:.6f}\n", to_string(r.mode), r.fold, r.metrics.bag_acc,
                       r.metrics.inst_acc_weak, r.metrics.inst_acc_true, r.metrics.pointing, r.metrics.iou);
  return out;
}

inline constexpr const char* kMetricNames[] = {"bag_acc", "inst_acc_weak", "inst_acc_true", "pointing", "iou"};

inline std::array<double, 5> metric_values(const MetricsReport& m) {
  return {m.bag_acc, m.inst_acc_weak, m.inst_acc_true, m.pointing, m.iou};
}

struct SummaryRow {
  AblationMode mode;
  std::array<MeanStd, 5> stats;
};

/// Mean and std over folds per mode, rows in sil, mil, joint order.
inline std::vector<SummaryRow> summarize(std::span<const AblationRow> rows) {
  std::vector<SummaryRow> out;
  for (AblationMode mode : {AblationMode::SilOnly, AblationMode::MilOnly, AblationMode::Joint}) {
    std::array<std::vector<double>, 5> cols;
    for (const auto& r : rows) {
      if (r.mode != mode) continue;
      const auto v = metric_values(r.metrics);
      for (std::size_t i = 0; i < 5; ++i) cols[i].push_back(v[i]);
    }
    if (cols[0].empty()) continue;
    SummaryRow s{mode, {}};
    for (std::size_t i = 0; i < 5; ++i) s.stats[i] = mean_std(cols[i]);
    out.push_back(s);
  }
  return out;
}

/// `<metric>_mean` columns, plus `<metric>_std` when there are at least two folds.
inline std::string summary_csv(std::span<const AblationRow> rows, std::size_t folds) {
  const bool with_std = folds >= 2;
  std::string out = "mode,folds";
  for (const char* m : kMetricNames) {
    out += fmt::format(",{}_mean", m);
    if (with_std) out += fmt::format(",{}_std", m);
  }
  out += '\n';
  for (const auto& s : summarize(rows)) {
    out += fmt::format("{},{}", to_string(s.mode), s.stats[0].n);
    for (const auto& st : s.stats) {
      out += fmt::format(",{:.6f}", st.mean);
      if (with_std) out += fmt::format(",{:.6f}", st.std);
    }
    out += '\n';
  }
  return out;
}

}  // namespace bagnet
