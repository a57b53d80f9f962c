#pragma once

// Synthetic weakly labeled "histology" corpus.
//
// Each sample is a colored-noise background with ring-shaped benign nuclei;
// malignant samples additionally carry a few larger, irregular, darker nuclei
// inside one random subregion. The ground-truth mask marks the malignant
// nucleus pixels. A sample is a pure function of (seed, index).

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bagnet/model.hpp"
#include "bagnet/pnm.hpp"
#include "bagnet/random.hpp"

namespace bagnet {

struct SynthConfig {
  std::uint64_t seed = 1234;
  std::size_t image_size = 64;
  std::size_t patch_grid = 2;  // patch_grid x patch_grid patches per bag
  std::size_t n_bags = 400;
  double malignant_fraction = 0.5;
  std::size_t benign_count_min = 10, benign_count_max = 16;
  double benign_radius_min = 2.5, benign_radius_max = 3.5;
  std::size_t malignant_count_min = 2, malignant_count_max = 4;
  // Base radius of a malignant nucleus; the irregular outline reaches at most 1.4x this.
  double malignant_radius_min = 2.5, malignant_radius_max = 3.2;
  double region_fraction = 1.0 / 3.0;  // malignant subregion side / image side
  double noise_amplitude = 0.04;

  friend bool operator==(const SynthConfig&, const SynthConfig&) = default;
};

inline void validate(const SynthConfig& c, std::size_t rf = 9) {
  if (c.patch_grid == 0 || c.image_size % c.patch_grid != 0)
    throw ConfigError("synth config: image_size " + std::to_string(c.image_size) +
                      " is not divisible by patch_grid " + std::to_string(c.patch_grid));
  if (c.image_size / c.patch_grid < rf)
    throw ConfigError("synth config: patch size " + std::to_string(c.image_size / c.patch_grid) +
                      " is smaller than the receptive field " + std::to_string(rf));
  if (c.malignant_fraction < 0 || c.malignant_fraction > 1)
    throw ConfigError("synth config: malignant_fraction must lie in [0,1]");
  if (c.benign_count_min > c.benign_count_max || c.malignant_count_min > c.malignant_count_max ||
      c.malignant_count_min == 0)
    throw ConfigError("synth config: invalid nucleus count range");
  if (c.benign_radius_min > c.benign_radius_max || c.malignant_radius_min > c.malignant_radius_max ||
      c.malignant_radius_min <= 0)
    throw ConfigError("synth config: invalid nucleus radius range");
  if (c.region_fraction <= 0 || c.region_fraction > 1)
    throw ConfigError("synth config: region_fraction must lie in (0,1]");
}

using Mask = Tensor<std::uint8_t>;  // [S,S], 1 = malignant structure

struct SynthSample {
  Tensor<float> image;  // [3,S,S] in [0,1]
  Mask mask;
  std::size_t patch_grid = 2;
  AnnotatedBag<float> bag;
};

inline constexpr std::size_t kBenign = 0;
inline constexpr std::size_t kMalignant = 1;

/// Cuts image and mask into a patch_grid x patch_grid bag (row-major patches).
inline AnnotatedBag<float> split_into_bag(const Tensor<float>& image, const Mask& mask,
                                          std::size_t patch_grid) {
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (patch_grid == 0 || h % patch_grid != 0 || w % patch_grid != 0)
    throw ShapeError("split_into_bag: image " + std::to_string(h) + "x" + std::to_string(w) +
                     " is not divisible by patch_grid " + std::to_string(patch_grid));
  if (mask.rank() != 2 || mask.dim(0) != h || mask.dim(1) != w)
    throw ShapeError("split_into_bag: mask " + shape_str(mask.shape()) + " does not match image");
  const std::size_t ph = h / patch_grid, pw = w / patch_grid;
  AnnotatedBag<float> out;
  bool any = false;
  for (std::size_t gy = 0; gy < patch_grid; ++gy)
    for (std::size_t gx = 0; gx < patch_grid; ++gx) {
      Tensor<float> patch({c, ph, pw});
      bool hit = false;
      for (std::size_t i = 0; i < ph; ++i)
        for (std::size_t j = 0; j < pw; ++j) {
          for (std::size_t ch = 0; ch < c; ++ch) patch.at(ch, i, j) = image.at(ch, gy * ph + i, gx * pw + j);
          hit = hit || mask.at(gy * ph + i, gx * pw + j) != 0;
        }
      out.bag.instances.push_back(std::move(patch));
      out.instance_true_labels.push_back(hit ? kMalignant : kBenign);
      any = any || hit;
    }
  out.bag.label = any ? kMalignant : kBenign;
  return out;
}

namespace detail {

struct Rgb {
  float r, g, b;
};

inline void paint(Tensor<float>& img, long y, long x, Rgb col, float alpha) {
  const long s = static_cast<long>(img.dim(1));
  if (y < 0 || x < 0 || y >= s || x >= s) return;
  const float c[3] = {col.r, col.g, col.b};
  for (std::size_t ch = 0; ch < 3; ++ch) {
    float& p = img.at(ch, static_cast<std::size_t>(y), static_cast<std::size_t>(x));
    p = (1 - alpha) * p + alpha * c[ch];
  }
}

}  // namespace detail

inline SynthSample generate_sample(const SynthConfig& cfg, std::size_t index) {
  validate(cfg);
  Rng rng(cfg.seed, index);
  const std::size_t s = cfg.image_size;
  const long sl = static_cast<long>(s);
  const bool malignant = rng.bernoulli(cfg.malignant_fraction);

  Tensor<float> img({3, s, s});
  const detail::Rgb background{0.93f, 0.78f, 0.86f};
  const float base[3] = {background.r, background.g, background.b};
  for (std::size_t ch = 0; ch < 3; ++ch)
    for (std::size_t i = 0; i < s * s; ++i)
      img[ch * s * s + i] =
          std::clamp(base[ch] + static_cast<float>(rng.uniform(-cfg.noise_amplitude, cfg.noise_amplitude)), 0.0f, 1.0f);

  const detail::Rgb benign_hue{0.12f, 0.30f, 0.30f};
  const long n_benign = rng.range(static_cast<long>(cfg.benign_count_min), static_cast<long>(cfg.benign_count_max));
  for (long n = 0; n < n_benign; ++n) {
    const double cy = rng.uniform(0, static_cast<double>(s)), cx = rng.uniform(0, static_cast<double>(s));
    const double r = rng.uniform(cfg.benign_radius_min, cfg.benign_radius_max);
    const long r_ext = static_cast<long>(std::ceil(r + 1));
    for (long y = static_cast<long>(cy) - r_ext; y <= static_cast<long>(cy) + r_ext; ++y)
      for (long x = static_cast<long>(cx) - r_ext; x <= static_cast<long>(cx) + r_ext; ++x) {
        const double d = std::hypot(y + 0.5 - cy, x + 0.5 - cx);
        if (d <= r) detail::paint(img, y, x, benign_hue, 1.0f);
      }
  }

  Mask mask({s, s});
  if (malignant) {
    const detail::Rgb malignant_hue{0.40f, 0.06f, 0.40f};
    const double side = std::max(1.0, cfg.region_fraction * static_cast<double>(s));
    const double oy = rng.uniform(0, static_cast<double>(s) - side + 1e-9);
    const double ox = rng.uniform(0, static_cast<double>(s) - side + 1e-9);
    const long n_mal = rng.range(static_cast<long>(cfg.malignant_count_min), static_cast<long>(cfg.malignant_count_max));
    for (long n = 0; n < n_mal; ++n) {
      const double cy = oy + rng.uniform(0, side), cx = ox + rng.uniform(0, side);
      const double r0 = rng.uniform(cfg.malignant_radius_min, cfg.malignant_radius_max);
      const double p1 = rng.uniform(0, 2 * std::numbers::pi), p2 = rng.uniform(0, 2 * std::numbers::pi);
      const double shade = rng.uniform(0.9, 1.1);
      const long r_ext = static_cast<long>(std::ceil(1.4 * r0 + 1));
      bool painted = false;
      for (long y = static_cast<long>(cy) - r_ext; y <= static_cast<long>(cy) + r_ext; ++y)
        for (long x = static_cast<long>(cx) - r_ext; x <= static_cast<long>(cx) + r_ext; ++x) {
          if (y < 0 || x < 0 || y >= sl || x >= sl) continue;
          const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
          const double th = std::atan2(dy, dx);
          const double r = r0 * (1 + 0.25 * std::sin(3 * th + p1) + 0.15 * std::sin(5 * th + p2));
          if (std::hypot(dy, dx) <= r) {
            const detail::Rgb col{malignant_hue.r * static_cast<float>(shade), malignant_hue.g,
                                  malignant_hue.b * static_cast<float>(shade)};
            detail::paint(img, y, x, col, 1.0f);
            mask.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = 1;
            painted = true;
          }
        }
      // A nucleus whose outline misses every pixel center still marks its center pixel.
      if (!painted) {
        const long y = std::clamp(static_cast<long>(cy), 0L, sl - 1), x = std::clamp(static_cast<long>(cx), 0L, sl - 1);
        detail::paint(img, y, x, malignant_hue, 1.0f);
        mask.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = 1;
      }
    }
  }

  SynthSample out{std::move(img), std::move(mask), cfg.patch_grid, {}};
  out.bag = split_into_bag(out.image, out.mask, cfg.patch_grid);
  return out;
}

inline std::vector<SynthSample> generate_corpus(const SynthConfig& cfg) {
  std::vector<SynthSample> out;
  out.reserve(cfg.n_bags);
  for (std::size_t i = 0; i < cfg.n_bags; ++i) out.push_back(generate_sample(cfg, i));
  return out;
}

/// The image as it reads back from disk (8-bit quantized).
inline SynthSample quantized(const SynthSample& s) {
  SynthSample q = s;
  q.image = pnm::to_tensor(pnm::from_tensor(s.image));
  q.bag = split_into_bag(q.image, q.mask, s.patch_grid);
  return q;
}

/// Weak view of a corpus: the only form the trainer accepts.
inline std::vector<Bag<float>> weak_bags(const std::vector<SynthSample>& samples) {
  std::vector<Bag<float>> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.bag.bag);
  return out;
}

struct Corpus {
  std::uint64_t seed = 0;
  std::vector<SynthSample> samples;
};

inline constexpr int kManifestVersion = 1;

inline std::string sample_stem(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "bag_%05zu", i);
  return buf;
}

inline void export_corpus(const std::vector<SynthSample>& samples, std::uint64_t seed,
                          const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
  nlohmann::json bags = nlohmann::json::array();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    const std::string stem = sample_stem(i);
    pnm::write(dir / (stem + ".ppm"), pnm::from_tensor(s.image));
    pnm::Image8 m{1, s.mask.dim(0), s.mask.dim(1), {}};
    m.pixels.resize(s.mask.size());
    for (std::size_t p = 0; p < s.mask.size(); ++p) m.pixels[p] = s.mask[p] ? 255 : 0;
    pnm::write(dir / (stem + "_mask.pgm"), m);
    bags.push_back({{"id", i},
                    {"image", stem + ".ppm"},
                    {"mask", stem + "_mask.pgm"},
                    {"bag_label", s.bag.bag.label},
                    {"patch_grid", s.patch_grid},
                    {"patch_true_labels", s.bag.instance_true_labels}});
  }
  const nlohmann::json manifest = {{"version", kManifestVersion}, {"seed", seed}, {"bags", bags}};
  std::ofstream f(dir / "manifest.json");
  if (!f) throw IoError("cannot write " + (dir / "manifest.json").string());
  f << manifest.dump(1) << '\n';
}

inline Corpus import_corpus(const std::filesystem::path& dir) {
  const auto mpath = dir / "manifest.json";
  std::ifstream f(mpath);
  if (!f) throw IoError("cannot open corpus manifest " + mpath.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(mpath.string() + ": invalid JSON at byte offset " + std::to_string(e.byte) + ": " + e.what());
  }
  Corpus corpus;
  try {
    if (manifest.at("version").get<int>() != kManifestVersion)
      throw IoError(mpath.string() + ": unsupported manifest version");
    corpus.seed = manifest.at("seed").get<std::uint64_t>();
    for (const auto& entry : manifest.at("bags")) {
      SynthSample s;
      const auto img = pnm::read(dir / entry.at("image").get<std::string>());
      if (img.channels != 3) throw IoError(entry.at("image").get<std::string>() + ": expected a PPM (P6) image");
      s.image = pnm::to_tensor(img);
      const auto m = pnm::read(dir / entry.at("mask").get<std::string>());
      if (m.channels != 1 || m.height != img.height || m.width != img.width)
        throw IoError(entry.at("mask").get<std::string>() + ": mask must be a PGM matching the image size");
      s.mask = Mask({m.height, m.width});
      for (std::size_t p = 0; p < m.pixels.size(); ++p) s.mask[p] = m.pixels[p] ? 1 : 0;
      s.patch_grid = entry.at("patch_grid").get<std::size_t>();
      s.bag = split_into_bag(s.image, s.mask, s.patch_grid);
      const auto stored = entry.at("patch_true_labels").get<std::vector<std::size_t>>();
      if (stored != s.bag.instance_true_labels || entry.at("bag_label").get<std::size_t>() != s.bag.bag.label)
        throw IoError(mpath.string() + ": labels of bag " + entry.at("id").dump() + " disagree with its mask");
      corpus.samples.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(mpath.string() + ": " + e.what());
  }
  return corpus;
}

}  // namespace bagnet
