#pragma once

// Dense class-logit maps.
//
// Map position (i,j) holds the logits of the RF x RF window whose top-left
// corner is image pixel (i,j), i.e. the window centred on pixel
// (i + offset, j + offset) with offset = (RF-1)/2. Only valid windows are
// emitted, so a H x W image yields a (H-RF+1) x (W-RF+1) map. The MIL branch
// plays no part here.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "bagnet/autodiff.hpp"
#include "bagnet/model.hpp"
#include "bagnet/pnm.hpp"

namespace bagnet {

inline std::vector<std::string> default_class_names(std::size_t k) {
  if (k == 2) return {"benign", "malignant"};
  std::vector<std::string> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back("class" + std::to_string(i));
  return out;
}

template <class T>
struct LogitHeatmap {
  Tensor<T> maps;  // [K, H-RF+1, W-RF+1]
  std::size_t offset = 0;
  std::size_t receptive_field = 0;
  std::vector<std::string> class_names;

  std::size_t classes() const { return maps.dim(0); }
  std::size_t height() const { return maps.dim(1); }
  std::size_t width() const { return maps.dim(2); }

  Tensor<T> channel(std::size_t k) const {
    if (k >= classes()) throw ShapeError("class " + std::to_string(k) + " out of range");
    const std::size_t n = height() * width();
    return Tensor<T>({height(), width()}, maps.data().subspan(k * n, n));
  }
};

namespace detail {

// out[k][p] = sum_c w[k][c] * f[c][p] (+ bias[k]), written into a [K, out_h, out_w]
// destination at (dy, dx). Positions are the outer loop and channels are summed
// in ascending order, so every position goes through the same arithmetic.
template <class T>
void apply_head(const Tensor<T>& features, const Tensor<T>& head_w, const T* head_b,
                Tensor<T>& dst, std::size_t dy, std::size_t dx) {
  const std::size_t c = features.dim(0), h = features.dim(1), w = features.dim(2);
  const std::size_t k = head_w.dim(0), n = h * w;
  const std::size_t dh = dst.dim(1), dw = dst.dim(2);
  for (std::size_t p = 0; p < n; ++p) {
    const std::size_t i = p / w, j = p % w;
    for (std::size_t r = 0; r < k; ++r) {
      T s = 0;
      for (std::size_t ci = 0; ci < c; ++ci) s += head_w[r * c + ci] * features[ci * n + p];
      dst[(r * dh + dy + i) * dw + dx + j] = head_b ? s + head_b[r] : s;
    }
  }
}

}  // namespace detail

template <class T>
LogitHeatmap<T> logit_heatmap(const ToyBagNet<T>& model, const Tensor<T>& image) {
  const Tensor<T> features = backbone_forward(model, image);
  LogitHeatmap<T> hm;
  hm.maps = Tensor<T>({model.config.classes, features.dim(1), features.dim(2)});
  detail::apply_head(features, model.head_weight, model.head_bias.ptr(), hm.maps, 0, 0);
  hm.receptive_field = model.rf();
  hm.offset = (hm.receptive_field - 1) / 2;
  hm.class_names = default_class_names(model.config.classes);
  return hm;
}

struct Tile {
  std::size_t out_y, out_x, out_h, out_w;  // region of the map this tile produces
  std::size_t in_y, in_x, in_h, in_w;      // image region it reads
};

struct TilePlan {
  std::size_t tile = 0;     // input tile side in pixels
  std::size_t overlap = 0;  // RF - 1
  std::size_t image_h = 0, image_w = 0;
  std::vector<Tile> tiles;
};

/// Tiles of side `tile` (input pixels) overlapping by RF-1; `tile == 0` means one tile.
inline TilePlan make_tile_plan(std::size_t image_h, std::size_t image_w, std::size_t tile, std::size_t rf) {
  if (image_h < rf || image_w < rf)
    throw ShapeError("image " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                     " is smaller than the receptive field " + std::to_string(rf));
  if (tile == 0) tile = std::max(image_h, image_w);
  if (tile < rf)
    throw ConfigError("tile size " + std::to_string(tile) + " is smaller than the receptive field " +
                      std::to_string(rf));
  TilePlan plan{tile, rf - 1, image_h, image_w, {}};
  const std::size_t step = tile - rf + 1;
  const std::size_t map_h = image_h - rf + 1, map_w = image_w - rf + 1;
  for (std::size_t oy = 0; oy < map_h; oy += step)
    for (std::size_t ox = 0; ox < map_w; ox += step) {
      const std::size_t oh = std::min(step, map_h - oy), ow = std::min(step, map_w - ox);
      plan.tiles.push_back({oy, ox, oh, ow, oy, ox, oh + rf - 1, ow + rf - 1});
    }
  return plan;
}

/// Throws unless the tiles' output regions partition the map exactly and each
/// tile reads precisely the input window its outputs depend on.
inline void check_tile_plan(const TilePlan& plan, std::size_t image_h, std::size_t image_w, std::size_t rf) {
  if (plan.image_h != image_h || plan.image_w != image_w)
    throw ConfigError("tile plan was made for a " + std::to_string(plan.image_h) + "x" +
                      std::to_string(plan.image_w) + " image, not " + std::to_string(image_h) + "x" +
                      std::to_string(image_w));
  const std::size_t map_h = image_h - rf + 1, map_w = image_w - rf + 1;
  std::vector<unsigned> cover(map_h * map_w, 0);
  for (const auto& t : plan.tiles) {
    if (t.out_h == 0 || t.out_w == 0 || t.out_y + t.out_h > map_h || t.out_x + t.out_w > map_w)
      throw ConfigError("tile plan: tile output region outside the map");
    if (t.in_y != t.out_y || t.in_x != t.out_x || t.in_h != t.out_h + rf - 1 || t.in_w != t.out_w + rf - 1)
      throw ConfigError("tile plan: tile input region does not match its output region");
    for (std::size_t i = 0; i < t.out_h; ++i)
      for (std::size_t j = 0; j < t.out_w; ++j) ++cover[(t.out_y + i) * map_w + t.out_x + j];
  }
  for (std::size_t p = 0; p < cover.size(); ++p)
    if (cover[p] != 1)
      throw ConfigError("tile plan does not cover the image: map position (" + std::to_string(p / map_w) +
                        "," + std::to_string(p % map_w) + ") covered " + std::to_string(cover[p]) + " times");
}

template <class T>
Tensor<T> crop(const Tensor<T>& image, std::size_t y, std::size_t x, std::size_t h, std::size_t w) {
  Tensor<T> out({image.dim(0), h, w});
  for (std::size_t c = 0; c < image.dim(0); ++c)
    for (std::size_t i = 0; i < h; ++i)
      std::copy_n(&image.at(c, y + i, x), w, &out.at(c, i, 0));
  return out;
}

/// Same result as logit_heatmap, bit for bit, computed tile by tile.
template <class T>
LogitHeatmap<T> tiled_heatmap(const ToyBagNet<T>& model, const Tensor<T>& image, const TilePlan& plan,
                              std::size_t workers = 1) {
  check_image(model, image);
  const std::size_t rf = model.rf();
  check_tile_plan(plan, image.dim(1), image.dim(2), rf);
  LogitHeatmap<T> hm;
  hm.maps = Tensor<T>({model.config.classes, image.dim(1) - rf + 1, image.dim(2) - rf + 1});
  hm.receptive_field = rf;
  hm.offset = (rf - 1) / 2;
  hm.class_names = default_class_names(model.config.classes);

  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t t = next++; t < plan.tiles.size(); t = next++) {
      const Tile& tile = plan.tiles[t];
      const Tensor<T> features =
          backbone_forward(model, crop(image, tile.in_y, tile.in_x, tile.in_h, tile.in_w));
      detail::apply_head(features, model.head_weight, model.head_bias.ptr(), hm.maps, tile.out_y, tile.out_x);
    }
  };
  workers = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(plan.tiles.size(), 1));
  if (workers == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t i = 0; i < workers; ++i) pool.emplace_back(work);
  }
  return hm;
}

template <class T>
void check_class(const ToyBagNet<T>& model, std::size_t k) {
  if (k >= model.config.classes)
    throw ConfigError("class " + std::to_string(k) + " out of range for a " +
                      std::to_string(model.config.classes) + "-class model");
}

/// Class activation map: head_weight[k] . F[:,i,j], no bias.
template <class T>
Tensor<T> cam(const ToyBagNet<T>& model, const Tensor<T>& image, std::size_t k) {
  check_class(model, k);
  const Tensor<T> features = backbone_forward(model, image);
  const std::size_t c = features.dim(0);
  Tensor<T> row({1, c}, model.head_weight.data().subspan(k * c, c));
  Tensor<T> out({1, features.dim(1), features.dim(2)});
  detail::apply_head(features, row, static_cast<const T*>(nullptr), out, 0, 0);
  return out.reshaped({features.dim(1), features.dim(2)});
}

/// Gradient-weighted class activation map. Channel weights are the spatial
/// means of d(SIL logit k)/dF obtained by reverse-mode differentiation.
template <class T>
Tensor<T> gradcam(const ToyBagNet<T>& model, const Tensor<T>& image, std::size_t k) {
  check_class(model, k);
  const Tensor<T> features = backbone_forward(model, image);
  Tape<T> tape;
  const Var f = tape.leaf(features, true, "features");
  const Var hw = tape.leaf(model.head_weight, false, "head.weight");
  const Var hb = tape.leaf(model.head_bias, false, "head.bias");
  const Var logit = ad::select(tape, ad::linear(tape, ad::spatial_gap(tape, f), hw, hb), k);
  tape.backward(logit);
  const Tensor<T> grad = tape.grad(f);
  const std::size_t c = features.dim(0), h = features.dim(1), w = features.dim(2), n = h * w;
  Tensor<T> alpha({1, c});
  for (std::size_t ci = 0; ci < c; ++ci) {
    double s = 0;  // a float sum over many positions drifts noticeably
    for (std::size_t p = 0; p < n; ++p) s += static_cast<double>(grad[ci * n + p]);
    alpha[ci] = static_cast<T>(s / static_cast<double>(n));
  }
  Tensor<T> out({1, h, w});
  detail::apply_head(features, alpha, static_cast<const T*>(nullptr), out, 0, 0);
  for (auto& v : out.data()) v = v > T(0) ? v : T(0);
  return out.reshaped({h, w});
}

// ---------------------------------------------------------------------------
// Export

struct Normalization {
  enum class Kind { MinMax, Fixed } kind = Kind::MinMax;
  double lo = 0, hi = 1;  // used by Fixed
};

struct HeatmapMeta {
  std::string kind = "logit";  // logit | cam | gradcam
  std::size_t class_index = 0;
  std::string class_name;
  std::size_t offset = 0;
  std::size_t receptive_field = 0;
};

struct ExportedHeatmap {
  std::vector<std::uint8_t> pixels;
  std::size_t height = 0, width = 0;
  double lo = 0, hi = 0;
  bool degenerate = false;  // constant map under min-max: every pixel 128
};

template <class T>
ExportedHeatmap normalize_map(const Tensor<T>& map, const Normalization& norm) {
  ExportedHeatmap out{{}, map.dim(0), map.dim(1), norm.lo, norm.hi, false};
  if (norm.kind == Normalization::Kind::MinMax) {
    const auto [mn, mx] = std::minmax_element(map.data().begin(), map.data().end());
    out.lo = static_cast<double>(*mn);
    out.hi = static_cast<double>(*mx);
  } else if (!(norm.hi > norm.lo)) {
    throw ConfigError("fixed normalization needs hi > lo");
  }
  out.degenerate = !(out.hi > out.lo);
  out.pixels.resize(map.size());
  for (std::size_t i = 0; i < map.size(); ++i)
    out.pixels[i] = out.degenerate ? 128 : pnm::quantize((static_cast<double>(map[i]) - out.lo) / (out.hi - out.lo));
  return out;
}

/// Writes `path` (8-bit PGM) and `path` with extension .json (registration and bounds).
template <class T>
ExportedHeatmap export_heatmap(const Tensor<T>& map, const HeatmapMeta& meta, const std::filesystem::path& path,
                               const Normalization& norm = {}) {
  ExportedHeatmap e = normalize_map(map, norm);
  pnm::write(path, {1, e.height, e.width, e.pixels});
  nlohmann::json side = {
      {"kind", meta.kind},
      {"class_index", meta.class_index},
      {"class_name", meta.class_name},
      {"offset", meta.offset},
      {"receptive_field", meta.receptive_field},
      {"height", e.height},
      {"width", e.width},
      {"normalization", norm.kind == Normalization::Kind::MinMax ? "minmax" : "fixed"},
      {"lo", e.lo},
      {"hi", e.hi},
      {"degenerate", e.degenerate},
  };
  auto json_path = path;
  json_path.replace_extension(".json");
  std::ofstream f(json_path);
  if (!f) throw IoError("cannot write " + json_path.string());
  f << side.dump(1) << '\n';
  return e;
}

template <class T>
ExportedHeatmap export_heatmap(const LogitHeatmap<T>& hm, std::size_t k, const std::filesystem::path& path,
                               const Normalization& norm = {}) {
  return export_heatmap(hm.channel(k), {"logit", k, hm.class_names.at(k), hm.offset, hm.receptive_field}, path, norm);
}

/// Inverse of export: map values reconstructed from pixels and recorded bounds.
inline Tensor<double> read_exported_heatmap(const std::filesystem::path& path, HeatmapMeta* meta = nullptr) {
  const pnm::Image8 img = pnm::read(path);
  auto json_path = path;
  json_path.replace_extension(".json");
  std::ifstream f(json_path);
  if (!f) throw IoError("cannot open " + json_path.string());
  nlohmann::json side;
  try {
    side = nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(json_path.string() + ": invalid JSON at byte offset " + std::to_string(e.byte));
  }
  const double lo = side.at("lo"), hi = side.at("hi");
  const bool degenerate = side.at("degenerate");
  if (meta) {
    meta->kind = side.at("kind");
    meta->class_index = side.at("class_index");
    meta->class_name = side.at("class_name");
    meta->offset = side.at("offset");
    meta->receptive_field = side.at("receptive_field");
  }
  Tensor<double> map({img.height, img.width});
  for (std::size_t i = 0; i < map.size(); ++i)
    map[i] = degenerate ? lo : lo + (hi - lo) * static_cast<double>(img.pixels[i]) / 255.0;
  return map;
}

}  // namespace bagnet
