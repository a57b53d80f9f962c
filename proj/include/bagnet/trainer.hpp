#pragma once

// Weakly supervised training of the SIL and MIL branches.
//
// Every instance inherits its bag's label. The joint objective is
//   CE(bag logits, y) + lambda_sil * mean_i CE(instance logits_i, y)
// optimized with Adam under a step-decayed learning rate.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <fmt/format.h>

#include "bagnet/autodiff.hpp"
#include "bagnet/checkpoint.hpp"
#include "bagnet/metrics.hpp"
#include "bagnet/model.hpp"
#include "bagnet/random.hpp"

namespace bagnet {

inline int verbosity() {
  static const int level = [] {
    const char* v = std::getenv("BAGNET_VERBOSE");
    return v ? std::atoi(v) : 0;
  }();
  return level;
}

enum class AblationMode { SilOnly, MilOnly, Joint };

inline std::string_view to_string(AblationMode m) {
  switch (m) {
    case AblationMode::SilOnly: return "sil";
    case AblationMode::MilOnly: return "mil";
    case AblationMode::Joint: return "joint";
  }
  return "?";
}

inline AblationMode parse_mode(std::string_view s) {
  if (s == "sil") return AblationMode::SilOnly;
  if (s == "mil") return AblationMode::MilOnly;
  if (s == "joint") return AblationMode::Joint;
  throw ConfigError("unknown mode '" + std::string(s) + "' (expected sil, mil or joint)");
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  friend bool operator==(const AdamConfig&, const AdamConfig&) = default;
};

struct TrainConfig {
  double lr0 = 1e-4;
  double decay = 0.5;
  std::size_t decay_interval = 10;  // epochs
  std::size_t epochs = 30;
  std::size_t bags_per_step = 1;
  double lambda_sil = 1.0;
  std::uint64_t seed = 42;
  AdamConfig adam;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

inline void validate(const TrainConfig& c) {
  if (!(c.lr0 > 0)) throw ConfigError("train config: lr0 must be > 0");
  if (!(c.decay > 0 && c.decay <= 1)) throw ConfigError("train config: decay must lie in (0,1]");
  if (c.decay_interval == 0) throw ConfigError("train config: decay_interval must be >= 1");
  if (c.bags_per_step == 0) throw ConfigError("train config: bags_per_step must be >= 1");
  if (!(c.lambda_sil >= 0)) throw ConfigError("train config: lambda_sil must be >= 0");
}

/// lr0 * decay^floor(epoch / interval), epochs counted from 0.
inline double learning_rate(const TrainConfig& c, std::size_t epoch) {
  return c.lr0 * std::pow(c.decay, static_cast<double>(epoch / c.decay_interval));
}

/// Loss value through the inference path (no tape).
template <class T>
T joint_loss(const ToyBagNet<T>& model, const Bag<T>& bag, T lambda_sil, AblationMode mode) {
  check_bag(model, bag);
  const MilOutput<T> out = mil_forward(model, bag);
  T sil = 0;
  for (const auto& l : out.instance_logits) sil += ad::cross_entropy_value(l, bag.label);
  sil /= static_cast<T>(out.instance_logits.size());
  const T mil = ad::cross_entropy_value(out.bag_logits, bag.label);
  switch (mode) {
    case AblationMode::SilOnly: return sil;
    case AblationMode::MilOnly: return mil;
    case AblationMode::Joint: break;
  }
  return mil + lambda_sil * sil;
}

struct LossVars {
  Var loss;
  MilVars forward;
};

/// Records the same loss on a tape.
template <class T>
LossVars joint_loss_graph(Tape<T>& tape, const ParamVars& pv, const Bag<T>& bag, T lambda_sil,
                          AblationMode mode) {
  LossVars out{{}, mil_graph(tape, pv, bag)};
  std::vector<Var> terms;
  std::vector<T> coeffs;
  if (mode != AblationMode::SilOnly) {
    terms.push_back(ad::softmax_cross_entropy(tape, out.forward.bag_logits, bag.label));
    coeffs.push_back(T(1));
  }
  if (mode != AblationMode::MilOnly) {
    const T n = static_cast<T>(bag.instances.size());
    const T w = (mode == AblationMode::Joint ? lambda_sil : T(1)) / n;
    for (Var l : out.forward.instance_logits) {
      terms.push_back(ad::softmax_cross_entropy(tape, l, bag.label));
      coeffs.push_back(w);
    }
  }
  out.loss = ad::weighted_sum(tape, std::span<const Var>(terms), std::span<const T>(coeffs));
  return out;
}

template <class T>
struct AdamState {
  std::vector<Tensor<T>> m, v;
  std::size_t step = 0;
};

/// One bias-corrected Adam update. Throws before touching any parameter if a
/// gradient is non-finite.
template <class T>
void adam_step(const std::vector<std::pair<std::string, Tensor<T>*>>& params,
               const std::vector<Tensor<T>>& grads, AdamState<T>& state, double lr,
               const AdamConfig& cfg = {}) {
  if (grads.size() != params.size())
    throw ShapeError("adam_step: " + std::to_string(grads.size()) + " gradients for " +
                     std::to_string(params.size()) + " parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params[i].second->shape())
      throw ShapeError("adam_step: gradient shape mismatch for " + params[i].first);
    if (!grads[i].all_finite()) throw NumericError("non-finite gradient for parameter " + params[i].first);
  }
  if (state.m.empty()) {
    for (const auto& [name, p] : params) {
      state.m.emplace_back(p->shape());
      state.v.emplace_back(p->shape());
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T c1 = static_cast<T>(1.0 - std::pow(cfg.beta1, t));
  const T c2 = static_cast<T>(1.0 - std::pow(cfg.beta2, t));
  const T rate = static_cast<T>(lr), eps = static_cast<T>(cfg.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = *params[i].second;
    Tensor<T>& m = state.m[i];
    Tensor<T>& v = state.v[i];
    const Tensor<T>& g = grads[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = b1 * m[j] + (T(1) - b1) * g[j];
      v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
      const T mhat = m[j] / c1, vhat = v[j] / c2;
      p[j] -= rate * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

struct WeakAccuracy {
  double bag = 0;       // MIL-level
  double instance = 0;  // SIL-level against inherited (weak) labels
};

template <class T>
WeakAccuracy evaluate_weak(const ToyBagNet<T>& model, std::span<const Bag<T>> bags) {
  std::vector<std::size_t> bp, bl, ip, il;
  for (const auto& bag : bags) {
    const auto out = mil_forward(model, bag);
    bp.push_back(argmax(out.bag_logits));
    bl.push_back(bag.label);
    for (const auto& l : out.instance_logits) {
      ip.push_back(argmax(l));
      il.push_back(bag.label);
    }
  }
  return {accuracy(bp, bl), accuracy(ip, il)};
}

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0, loss = 0, bag_acc = 0, inst_acc = 0;
};

struct TrainResult {
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;
  double best_bag_acc = -1;
};

struct TrainOptions {
  // When set: metrics.csv, epoch_NNN.bgml per epoch, best.bgml, final.bgml.
  std::filesystem::path out_dir;
  bool write_epoch_checkpoints = true;
};

inline std::string metrics_csv(const std::vector<EpochLog>& log) {
  std::string out = "epoch,lr,loss,bag_acc,inst_acc\n";
  for (const auto& r : log)
    out += fmt::format("{},{:.9g},{:.9g},{:.6f},{:.6f}\n", r.epoch, r.lr, r.loss, r.bag_acc, r.inst_acc);
  return out;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f << text;
  if (!f) throw IoError("write failed: " + path.string());
}

/// Trains `model` in place. Bag order is reshuffled from `rng` every epoch.
/// Logged accuracies are measured on `validation` after each epoch, or are
/// running training accuracies when no validation bags are given.
inline TrainResult train(ToyBagNet<float>& model, std::span<const Bag<float>> data,
                         std::span<const Bag<float>> validation, const TrainConfig& cfg, AblationMode mode,
                         Rng& rng, const TrainOptions& opts = {}) {
  validate(cfg);
  if (data.empty()) throw ConfigError("train: empty dataset");
  for (const auto& b : data) check_bag(model, b);
  const bool write = !opts.out_dir.empty();
  if (write) {
    std::error_code ec;
    std::filesystem::create_directories(opts.out_dir, ec);
    if (ec) throw IoError("cannot create " + opts.out_dir.string() + ": " + ec.message());
  }

  TrainResult result;
  AdamState<float> adam;
  auto params = model.parameters();
  std::vector<std::size_t> order(data.size());
  const float lambda = static_cast<float>(cfg.lambda_sil);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = learning_rate(cfg, epoch);
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    double loss_sum = 0;
    std::vector<std::size_t> bp, bl, ip, il;

    for (std::size_t start = 0; start < order.size(); start += cfg.bags_per_step) {
      const std::size_t stop = std::min(order.size(), start + cfg.bags_per_step);
      std::vector<Tensor<float>> grads;
      for (const auto& [name, p] : params) grads.emplace_back(p->shape());
      for (std::size_t s = start; s < stop; ++s) {
        const Bag<float>& bag = data[order[s]];
        Tape<float> tape;
        const ParamVars pv = bind_parameters(tape, model);
        const LossVars lv = joint_loss_graph(tape, pv, bag, lambda, mode);
        const float loss = tape.value(lv.loss)[0];
        if (!std::isfinite(loss)) throw NumericError("non-finite training loss at epoch " + std::to_string(epoch));
        loss_sum += loss;
        tape.backward(lv.loss);
        const auto vars = pv.all();
        for (std::size_t i = 0; i < vars.size(); ++i) {
          const Tensor<float> g = tape.grad(vars[i]);
          for (std::size_t j = 0; j < g.size(); ++j) grads[i][j] += g[j];
        }
        bp.push_back(argmax(tape.value(lv.forward.bag_logits)));
        bl.push_back(bag.label);
        for (Var l : lv.forward.instance_logits) {
          ip.push_back(argmax(tape.value(l)));
          il.push_back(bag.label);
        }
      }
      const float scale = 1.0f / static_cast<float>(stop - start);
      if (stop - start > 1)
        for (auto& g : grads)
          for (auto& v : g.data()) v *= scale;
      adam_step(params, grads, adam, lr, cfg.adam);
    }

    EpochLog row{epoch, lr, loss_sum / static_cast<double>(data.size()), 0, 0};
    if (!validation.empty()) {
      const auto acc = evaluate_weak(model, validation);
      row.bag_acc = acc.bag;
      row.inst_acc = acc.instance;
    } else {
      row.bag_acc = accuracy(bp, bl);
      row.inst_acc = accuracy(ip, il);
    }
    result.log.push_back(row);
    const bool best = row.bag_acc > result.best_bag_acc;
    if (best) {
      result.best_bag_acc = row.bag_acc;
      result.best_epoch = epoch;
    }
    if (verbosity() > 0)
      std::fprintf(stderr, "[train %s] epoch %zu lr %.3g loss %.5f bag_acc %.4f inst_acc %.4f\n",
                   std::string(to_string(mode)).c_str(), epoch, lr, row.loss, row.bag_acc, row.inst_acc);
    if (write) {
      if (opts.write_epoch_checkpoints)
        save_checkpoint(model, opts.out_dir / fmt::format("epoch_{:03d}.bgml", epoch));
      if (best) save_checkpoint(model, opts.out_dir / "best.bgml");
      write_text(opts.out_dir / "metrics.csv", metrics_csv(result.log));
    }
  }
  if (write) {
    save_checkpoint(model, opts.out_dir / "final.bgml");
    write_text(opts.out_dir / "metrics.csv", metrics_csv(result.log));
  }
  return result;
}

}  // namespace bagnet
