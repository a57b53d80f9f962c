#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "oracles.hpp"

using namespace bagnet;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("bagnet_test_" + name);
  fs::remove_all(dir);
  return dir;
}

SynthConfig small(std::size_t n) {
  SynthConfig c;
  c.n_bags = n;
  return c;
}

void write_bytes(const fs::path& p, const std::string& s) {
  std::ofstream f(p, std::ios::binary);
  f << s;
}

std::string error_of(const fs::path& p) {
  try {
    pnm::read(p);
  } catch (const IoError& e) {
    return e.what();
  }
  return "no error";
}

}  // namespace

TEST(Generate, NoMalignantFraction) {
  SynthConfig c = small(30);
  c.malignant_fraction = 0;
  for (const auto& s : generate_corpus(c)) {
    EXPECT_EQ(s.bag.bag.label, kBenign);
    EXPECT_TRUE(std::all_of(s.mask.data().begin(), s.mask.data().end(), [](auto v) { return v == 0; }));
  }
}

TEST(Generate, PureFunctionOfSeedAndIndex) {
  const SynthConfig c = small(10);
  const auto a = generate_sample(c, 7), b = generate_sample(c, 7), other = generate_sample(c, 8);
  EXPECT_TRUE(bit_identical(a.image, b.image));
  EXPECT_EQ(a.mask, b.mask);
  EXPECT_FALSE(bit_identical(a.image, other.image));
  const auto corpus = generate_corpus(c);
  EXPECT_TRUE(bit_identical(corpus[7].image, a.image));  // position in a corpus does not matter
  SynthConfig c2 = c;
  c2.seed = 99;
  EXPECT_FALSE(bit_identical(generate_sample(c2, 7).image, a.image));
}

TEST(Generate, DefaultClassBalance) {
  const auto corpus = generate_corpus(SynthConfig{});
  ASSERT_EQ(corpus.size(), 400u);
  std::size_t mal = 0;
  for (const auto& s : corpus) mal += s.bag.bag.label == kMalignant;
  const double share = static_cast<double>(mal) / 400.0;
  EXPECT_GE(share, 0.45);
  EXPECT_LE(share, 0.55);
}

TEST(Generate, ImageRangeAndShape) {
  const auto s = generate_sample(SynthConfig{}, 3);
  EXPECT_EQ(s.image.shape(), (Shape{3, 64, 64}));
  for (float v : s.image.data()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
  EXPECT_EQ(s.bag.bag.instances.size(), 4u);
  EXPECT_EQ(s.bag.bag.instances[0].shape(), (Shape{3, 32, 32}));
}

TEST(Generate, WeakLabelSoundness) {
  for (const auto& s : generate_corpus(small(60))) {
    const bool any_mask = std::any_of(s.mask.data().begin(), s.mask.data().end(), [](auto v) { return v != 0; });
    const bool any_patch = std::any_of(s.bag.instance_true_labels.begin(), s.bag.instance_true_labels.end(),
                                       [](auto l) { return l == kMalignant; });
    EXPECT_EQ(s.bag.bag.label == kMalignant, any_mask);
    EXPECT_EQ(any_patch, any_mask);
  }
}

TEST(Generate, ConfigValidation) {
  SynthConfig c;
  c.image_size = 63;
  EXPECT_THROW(validate(c), ConfigError);
  c = {};
  c.image_size = 16;
  EXPECT_THROW(validate(c), ConfigError);  // 8x8 patches < RF 9
  c = {};
  c.malignant_fraction = 1.5;
  EXPECT_THROW(validate(c), ConfigError);
}

TEST(Split, AllZeroMask) {
  const auto bag = split_into_bag(Tensor<float>({3, 20, 20}), Mask({20, 20}), 2);
  EXPECT_EQ(bag.instance_true_labels, (std::vector<std::size_t>{0, 0, 0, 0}));
  EXPECT_EQ(bag.bag.label, kBenign);
}

TEST(Split, TopLeftQuadrantOnly) {
  Mask m({20, 20});
  m.at(3, 4) = 1;
  m.at(9, 9) = 1;
  const auto bag = split_into_bag(Tensor<float>({3, 20, 20}), m, 2);
  EXPECT_EQ(bag.instance_true_labels, (std::vector<std::size_t>{1, 0, 0, 0}));
  EXPECT_EQ(bag.bag.label, kMalignant);
}

TEST(Split, RowMajorPatchContents) {
  Tensor<float> img({1, 4, 6});
  std::iota(img.data().begin(), img.data().end(), 0.0f);
  const auto bag = split_into_bag(img, Mask({4, 6}), 2);
  EXPECT_EQ(bag.bag.instances[1], (Tensor<float>({1, 2, 3}, {3, 4, 5, 9, 10, 11})));
  EXPECT_EQ(bag.bag.instances[2], (Tensor<float>({1, 2, 3}, {12, 13, 14, 18, 19, 20})));
}

TEST(Split, RandomMaskMatchesPixelCounts) {
  Rng rng(5);
  for (int t = 0; t < 30; ++t) {
    const std::size_t g = 1 + rng.below(4), s = g * (3 + rng.below(6));
    Mask m({s, s});
    for (auto& v : m.data()) v = rng.bernoulli(0.01) ? 1 : 0;
    const auto bag = split_into_bag(Tensor<float>({3, s, s}), m, g);
    // count positive pixels per cell with explicit bounds
    const std::size_t p = s / g;
    for (std::size_t cell = 0; cell < g * g; ++cell) {
      std::size_t count = 0;
      for (std::size_t y = (cell / g) * p; y < (cell / g + 1) * p; ++y)
        for (std::size_t x = (cell % g) * p; x < (cell % g + 1) * p; ++x) count += m.at(y, x);
      EXPECT_EQ(bag.instance_true_labels[cell], count > 0 ? kMalignant : kBenign);
    }
  }
}

TEST(Split, IndivisibleSizeIsAnError) {
  EXPECT_THROW(split_into_bag(Tensor<float>({3, 21, 21}), Mask({21, 21}), 2), ShapeError);
}

TEST(Corpus, ExportImportRoundTrip) {
  const auto dir = scratch("corpus_rt");
  const auto samples = generate_corpus(small(6));
  export_corpus(samples, 1234, dir);
  const Corpus back = import_corpus(dir);
  EXPECT_EQ(back.seed, 1234u);
  ASSERT_EQ(back.samples.size(), 6u);
  for (std::size_t i = 0; i < 6; ++i) {
    const auto q = quantized(samples[i]);
    EXPECT_TRUE(bit_identical(back.samples[i].image, q.image));
    EXPECT_EQ(back.samples[i].mask, samples[i].mask);
    EXPECT_EQ(back.samples[i].bag.instance_true_labels, samples[i].bag.instance_true_labels);
    EXPECT_EQ(back.samples[i].bag.bag.label, samples[i].bag.bag.label);
    EXPECT_EQ(back.samples[i].patch_grid, 2u);
    // quantization error is at most half a level
    for (std::size_t p = 0; p < q.image.size(); ++p)
      EXPECT_LE(std::abs(q.image[p] - samples[i].image[p]), 0.5f / 255.0f + 1e-6f);
  }
  fs::remove_all(dir);
}

TEST(Corpus, EmptyCorpusManifest) {
  const auto dir = scratch("corpus_empty");
  export_corpus({}, 7, dir);
  std::ifstream f(dir / "manifest.json");
  const auto j = nlohmann::json::parse(f);
  EXPECT_EQ(j.at("version"), 1);
  EXPECT_TRUE(j.at("bags").empty());
  EXPECT_TRUE(import_corpus(dir).samples.empty());
  fs::remove_all(dir);
}

TEST(Corpus, TenBagsFileCount) {
  const auto dir = scratch("corpus_ten");
  export_corpus(generate_corpus(small(10)), 1, dir);
  std::size_t ppm = 0, pgm = 0;
  for (const auto& e : fs::directory_iterator(dir)) {
    ppm += e.path().extension() == ".ppm";
    pgm += e.path().extension() == ".pgm";
  }
  EXPECT_EQ(ppm, 10u);
  EXPECT_EQ(pgm, 10u);
  std::ifstream f(dir / "manifest.json");
  const auto j = nlohmann::json::parse(f);
  EXPECT_EQ(j.at("bags").size(), 10u);
  for (const auto& b : j.at("bags"))
    for (const char* key : {"id", "image", "mask", "bag_label", "patch_grid", "patch_true_labels"})
      EXPECT_TRUE(b.contains(key)) << key;
  fs::remove_all(dir);
}

TEST(Corpus, MalformedFilesReportNameAndOffset) {
  const auto dir = scratch("corpus_bad");
  export_corpus(generate_corpus(small(2)), 1, dir);
  // truncated pixel data
  const auto img = dir / "bag_00000.ppm";
  std::string bytes = read_file_bytes(img);
  write_bytes(img, bytes.substr(0, bytes.size() - 10));
  try {
    import_corpus(dir);
    FAIL();
  } catch (const IoError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("bag_00000.ppm"), std::string::npos) << msg;
    EXPECT_NE(msg.find("byte offset"), std::string::npos) << msg;
  }
  write_bytes(dir / "x.pgm", "P5 4 4 65535\n");
  EXPECT_NE(error_of(dir / "x.pgm").find("maxval"), std::string::npos);
  write_bytes(dir / "y.pgm", "P2 4 4 255\n");
  EXPECT_NE(error_of(dir / "y.pgm").find("byte offset 0"), std::string::npos);
  write_bytes(dir / "manifest.json", "{\"version\": 1, \"seed\": ");
  try {
    import_corpus(dir);
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("manifest.json"), std::string::npos);
  }
  EXPECT_THROW(import_corpus(dir / "missing"), IoError);
  fs::remove_all(dir);
}

TEST(Corpus, ImportRejectsLabelsContradictingMask) {
  const auto dir = scratch("corpus_lie");
  SynthConfig c = small(4);
  c.malignant_fraction = 1;
  export_corpus(generate_corpus(c), 1, dir);
  std::ifstream f(dir / "manifest.json");
  auto j = nlohmann::json::parse(f);
  f.close();
  j["bags"][0]["bag_label"] = 0;
  write_bytes(dir / "manifest.json", j.dump());
  EXPECT_THROW(import_corpus(dir), IoError);
  fs::remove_all(dir);
}

TEST(Pnm, CommentsInHeader) {
  const auto dir = scratch("pnm");
  fs::create_directories(dir);
  write_bytes(dir / "c.pgm", std::string("P5\n# made by hand\n2 1\n255\n") + '\x07' + '\xff');
  const auto img = pnm::read(dir / "c.pgm");
  EXPECT_EQ(img.width, 2u);
  EXPECT_EQ(img.pixels, (std::vector<std::uint8_t>{7, 255}));
  fs::remove_all(dir);
}

TEST(Weak, TrainingViewCarriesNoAnnotations) {
  // The trainer's input type is Bag<float>; masks and true labels live only on
  // SynthSample / AnnotatedBag.
  static_assert(std::is_same_v<decltype(weak_bags(std::declval<const std::vector<SynthSample>&>())),
                               std::vector<Bag<float>>>);
  const auto samples = generate_corpus(small(3));
  const auto weak = weak_bags(samples);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(weak[i].label, samples[i].bag.bag.label);
}
