#pragma once

// Limited-receptive-field classifier with a shared linear head.
//
// Backbone: n3 valid 3x3 convolutions followed by n1 1x1 convolutions, every
// one followed by ReLU and all with stride 1. A feature at map position (i,j)
// therefore depends on exactly the input window [i, i+RF) x [j, j+RF) with
// RF = 2*n3 + 1. The SIL branch pools one patch's feature map spatially; the
// MIL branch averages SIL features across the instances of a bag. Both feed
// the same head.

#include <cmath>
#include <cstddef>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "bagnet/autodiff.hpp"
#include "bagnet/kernels.hpp"
#include "bagnet/random.hpp"
#include "bagnet/tensor.hpp"

namespace bagnet {

struct ModelConfig {
  std::size_t in_channels = 3;
  std::size_t channels = 32;
  std::size_t n3 = 4;  // 3x3 conv layers
  std::size_t n1 = 2;  // 1x1 mixer layers
  std::size_t classes = 2;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

constexpr std::size_t receptive_field(const ModelConfig& c) { return 2 * c.n3 + 1; }

inline void validate(const ModelConfig& c) {
  if (c.in_channels == 0 || c.channels == 0 || c.classes < 2)
    throw ConfigError("model config: in_channels and channels must be positive, classes >= 2");
  if (c.n3 + c.n1 == 0) throw ConfigError("model config: backbone needs at least one layer");
}

template <class T>
struct ConvLayer {
  Tensor<T> weight;  // [C_out, C_in, k, k]
  Tensor<T> bias;    // [C_out]
};

template <class T>
struct ToyBagNet {
  ModelConfig config;
  std::vector<ConvLayer<T>> convs;
  Tensor<T> head_weight;  // [K, C]
  Tensor<T> head_bias;    // [K]

  std::size_t rf() const { return receptive_field(config); }

  /// Allocates zero parameters with the shapes implied by `cfg`.
  static ToyBagNet zeros(const ModelConfig& cfg) {
    validate(cfg);
    ToyBagNet m;
    m.config = cfg;
    std::size_t c_in = cfg.in_channels;
    for (std::size_t l = 0; l < cfg.n3 + cfg.n1; ++l) {
      const std::size_t k = l < cfg.n3 ? 3 : 1;
      m.convs.push_back({Tensor<T>({cfg.channels, c_in, k, k}), Tensor<T>({cfg.channels})});
      c_in = cfg.channels;
    }
    m.head_weight = Tensor<T>({cfg.classes, cfg.channels});
    m.head_bias = Tensor<T>({cfg.classes});
    return m;
  }

  /// He-uniform convolutions (bound sqrt(6/fan_in)), LeCun-uniform head
  /// (bound sqrt(3/fan_in)), zero biases.
  static ToyBagNet init(const ModelConfig& cfg, Rng& rng) {
    ToyBagNet m = zeros(cfg);
    for (auto& layer : m.convs) {
      const auto& s = layer.weight.shape();
      const double bound = std::sqrt(6.0 / static_cast<double>(s[1] * s[2] * s[3]));
      for (auto& v : layer.weight.data()) v = static_cast<T>(rng.uniform(-bound, bound));
    }
    const double hb = std::sqrt(3.0 / static_cast<double>(cfg.channels));
    for (auto& v : m.head_weight.data()) v = static_cast<T>(rng.uniform(-hb, hb));
    return m;
  }

  /// Parameters in canonical (checkpoint manifest) order.
  std::vector<std::pair<std::string, Tensor<T>*>> parameters() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    for (std::size_t l = 0; l < convs.size(); ++l) {
      out.emplace_back("conv" + std::to_string(l) + ".weight", &convs[l].weight);
      out.emplace_back("conv" + std::to_string(l) + ".bias", &convs[l].bias);
    }
    out.emplace_back("head.weight", &head_weight);
    out.emplace_back("head.bias", &head_bias);
    return out;
  }
  std::vector<std::pair<std::string, const Tensor<T>*>> parameters() const {
    std::vector<std::pair<std::string, const Tensor<T>*>> out;
    for (auto& [n, p] : const_cast<ToyBagNet*>(this)->parameters()) out.emplace_back(n, p);
    return out;
  }

  template <class U>
  ToyBagNet<U> cast() const {
    ToyBagNet<U> m;
    m.config = config;
    for (const auto& l : convs) m.convs.push_back({l.weight.template cast<U>(), l.bias.template cast<U>()});
    m.head_weight = head_weight.template cast<U>();
    m.head_bias = head_bias.template cast<U>();
    return m;
  }
};

/// Weakly labeled bag: everything a training path may see.
template <class T>
struct Bag {
  std::vector<Tensor<T>> instances;  // each [in_channels, h, w], equal sizes
  std::size_t label = 0;
};

/// A bag plus per-instance ground truth, which only evaluation code reads.
template <class T>
struct AnnotatedBag {
  Bag<T> bag;
  std::vector<std::size_t> instance_true_labels;
};

template <class T>
void check_image(const ToyBagNet<T>& model, const Tensor<T>& image) {
  const std::size_t rf = model.rf();
  if (image.rank() != 3 || image.dim(0) != model.config.in_channels)
    throw ShapeError("image must be [" + std::to_string(model.config.in_channels) +
                     ",H,W], got " + shape_str(image.shape()));
  if (image.dim(1) < rf || image.dim(2) < rf)
    throw ShapeError("image " + std::to_string(image.dim(1)) + "x" + std::to_string(image.dim(2)) +
                     " is smaller than the receptive field " + std::to_string(rf) + "x" +
                     std::to_string(rf));
}

template <class T>
void check_bag(const ToyBagNet<T>& model, const Bag<T>& bag) {
  if (bag.instances.empty()) throw ShapeError("bag has no instances");
  for (const auto& inst : bag.instances) {
    check_image(model, inst);
    if (inst.shape() != bag.instances.front().shape())
      throw ShapeError("bag instances differ in size: " + shape_str(inst.shape()) + " vs " +
                       shape_str(bag.instances.front().shape()));
  }
  if (bag.label >= model.config.classes)
    throw ShapeError("bag label " + std::to_string(bag.label) + " out of range");
}

/// Feature map [C, H-RF+1, W-RF+1].
template <class T>
Tensor<T> backbone_forward(const ToyBagNet<T>& model, const Tensor<T>& image) {
  check_image(model, image);
  Tensor<T> x = image;
  for (const auto& layer : model.convs)
    x = kernels::relu_forward(kernels::conv2d_forward(x, layer.weight, layer.bias));
  return x;
}

template <class T>
struct SilOutput {
  Tensor<T> feature;  // [C]
  Tensor<T> logits;   // [K]
};

template <class T>
SilOutput<T> sil_forward(const ToyBagNet<T>& model, const Tensor<T>& patch) {
  Tensor<T> feature = kernels::spatial_gap_forward(backbone_forward(model, patch));
  Tensor<T> logits = kernels::linear_forward(feature, model.head_weight, model.head_bias);
  return {std::move(feature), std::move(logits)};
}

template <class T>
struct MilOutput {
  Tensor<T> bag_feature;
  Tensor<T> bag_logits;
  std::vector<Tensor<T>> instance_features;
  std::vector<Tensor<T>> instance_logits;
};

template <class T>
MilOutput<T> mil_forward(const ToyBagNet<T>& model, const Bag<T>& bag) {
  if (bag.instances.empty()) throw ShapeError("mil_forward: empty bag");
  MilOutput<T> out;
  out.bag_feature = Tensor<T>({model.config.channels});
  for (const auto& inst : bag.instances) {
    auto sil = sil_forward(model, inst);
    for (std::size_t c = 0; c < sil.feature.size(); ++c) out.bag_feature[c] += sil.feature[c];
    out.instance_features.push_back(std::move(sil.feature));
    out.instance_logits.push_back(std::move(sil.logits));
  }
  const T n = static_cast<T>(bag.instances.size());
  for (auto& v : out.bag_feature.data()) v /= n;
  out.bag_logits = kernels::linear_forward(out.bag_feature, model.head_weight, model.head_bias);
  return out;
}

/// Feature-map positions whose values change (bitwise) when the given input
/// pixel is perturbed. Several perturbations are tried (both signs, two
/// magnitudes, mixed channel signs) and their effects united, so a position is
/// only missed if ReLUs absorb every one of them.
template <class T>
std::set<std::pair<std::size_t, std::size_t>> rf_exactness_probe(const ToyBagNet<T>& model,
                                                                 const Tensor<T>& image,
                                                                 std::size_t y, std::size_t x) {
  check_image(model, image);
  if (y >= image.dim(1) || x >= image.dim(2))
    throw ShapeError("probe pixel (" + std::to_string(y) + "," + std::to_string(x) +
                     ") outside image " + shape_str(image.shape()));
  const Tensor<T> base = backbone_forward(model, image);
  const std::size_t h = base.dim(1), w = base.dim(2);
  std::set<std::pair<std::size_t, std::size_t>> hit;
  for (const T scale : {T(1), T(-1), T(8), T(-8)}) {
    for (const bool alternate : {false, true}) {
      Tensor<T> moved = image;
      for (std::size_t c = 0; c < image.dim(0); ++c)
        moved.at(c, y, x) += alternate && c % 2 ? -scale : scale;
      const Tensor<T> after = backbone_forward(model, moved);
      for (std::size_t c = 0; c < base.dim(0); ++c)
        for (std::size_t i = 0; i < h; ++i)
          for (std::size_t j = 0; j < w; ++j) {
            const T a = base.at(c, i, j), b = after.at(c, i, j);
            if (std::memcmp(&a, &b, sizeof(T)) != 0) hit.emplace(i, j);
          }
    }
  }
  return hit;
}

/// The window set rf_exactness_probe must reproduce.
inline std::set<std::pair<std::size_t, std::size_t>> analytic_window_set(
    std::size_t rf, std::size_t h, std::size_t w, std::size_t y, std::size_t x) {
  std::set<std::pair<std::size_t, std::size_t>> s;
  const std::size_t i_lo = y + 1 >= rf ? y + 1 - rf : 0, i_hi = std::min(y, h - rf);
  const std::size_t j_lo = x + 1 >= rf ? x + 1 - rf : 0, j_hi = std::min(x, w - rf);
  for (std::size_t i = i_lo; i <= i_hi; ++i)
    for (std::size_t j = j_lo; j <= j_hi; ++j) s.emplace(i, j);
  return s;
}

// ---------------------------------------------------------------------------
// Recorded (differentiable) forward passes.

struct ParamVars {
  std::vector<Var> conv_weight, conv_bias;
  Var head_weight, head_bias;

  std::vector<Var> all() const {
    std::vector<Var> out;
    for (std::size_t l = 0; l < conv_weight.size(); ++l) {
      out.push_back(conv_weight[l]);
      out.push_back(conv_bias[l]);
    }
    out.push_back(head_weight);
    out.push_back(head_bias);
    return out;
  }
};

/// Places the model's parameters on the tape as leaves (manifest order).
template <class T>
ParamVars bind_parameters(Tape<T>& tape, const ToyBagNet<T>& model, bool requires_grad = true) {
  ParamVars pv;
  for (std::size_t l = 0; l < model.convs.size(); ++l) {
    pv.conv_weight.push_back(tape.leaf(model.convs[l].weight, requires_grad, "conv" + std::to_string(l) + ".weight"));
    pv.conv_bias.push_back(tape.leaf(model.convs[l].bias, requires_grad, "conv" + std::to_string(l) + ".bias"));
  }
  pv.head_weight = tape.leaf(model.head_weight, requires_grad, "head.weight");
  pv.head_bias = tape.leaf(model.head_bias, requires_grad, "head.bias");
  return pv;
}

/// Rebuilds ParamVars from vars laid out in manifest order (as returned by ParamVars::all()).
inline ParamVars param_vars_from(std::span<const Var> vars) {
  ParamVars pv;
  const std::size_t layers = (vars.size() - 2) / 2;
  for (std::size_t l = 0; l < layers; ++l) {
    pv.conv_weight.push_back(vars[2 * l]);
    pv.conv_bias.push_back(vars[2 * l + 1]);
  }
  pv.head_weight = vars[vars.size() - 2];
  pv.head_bias = vars[vars.size() - 1];
  return pv;
}

template <class T>
Var backbone_graph(Tape<T>& tape, const ParamVars& pv, Var image) {
  Var x = image;
  for (std::size_t l = 0; l < pv.conv_weight.size(); ++l)
    x = ad::relu(tape, ad::conv2d_valid(tape, x, pv.conv_weight[l], pv.conv_bias[l]));
  return x;
}

struct SilVars {
  Var feature, logits;
};

template <class T>
SilVars sil_graph(Tape<T>& tape, const ParamVars& pv, Var patch) {
  const Var feature = ad::spatial_gap(tape, backbone_graph(tape, pv, patch));
  return {feature, ad::linear(tape, feature, pv.head_weight, pv.head_bias)};
}

struct MilVars {
  Var bag_feature, bag_logits;
  std::vector<Var> instance_logits;
};

template <class T>
MilVars mil_graph(Tape<T>& tape, const ParamVars& pv, const Bag<T>& bag) {
  if (bag.instances.empty()) throw ShapeError("mil_graph: empty bag");
  std::vector<Var> features;
  MilVars out;
  for (const auto& inst : bag.instances) {
    const SilVars s = sil_graph(tape, pv, tape.leaf(inst, false, "instance"));
    features.push_back(s.feature);
    out.instance_logits.push_back(s.logits);
  }
  out.bag_feature = ad::mean_of(tape, std::span<const Var>(features));
  out.bag_logits = ad::linear(tape, out.bag_feature, pv.head_weight, pv.head_bias);
  return out;
}

}  // namespace bagnet
