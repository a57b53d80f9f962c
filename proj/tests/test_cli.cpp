#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "oracles.hpp"

using namespace bagnet;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out;
};

// Runs the CLI with stdout and stderr captured together.
Result run(const std::string& args) {
  const std::string cmd = std::string(BAGNET_CLI_PATH) + " " + args + " 2>&1";
  FILE* p = popen(cmd.c_str(), "r");
  Result r{-1, {}};
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof buf, p)) r.out.append(buf, n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("bagnet_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string bytes(const fs::path& p) { return read_file_bytes(p); }

// run_config.json is skipped because it records the output path.
bool same_tree(const fs::path& a, const fs::path& b) {
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(a)) {
    if (e.path().filename() == "run_config.json") continue;
    const auto other = b / e.path().filename();
    if (!fs::exists(other) || bytes(e.path()) != bytes(other)) return false;
    ++n;
  }
  std::size_t m = 0;
  for (const auto& e : fs::directory_iterator(b)) m += e.path().filename() != "run_config.json";
  return n == m;
}

const std::string kSmall = " --n-bags 10 --image-size 32";
const std::string kTinyModel = " --channels 4 --n3 4 --n1 1";

// Small corpus plus a 1-epoch checkpoint, shared by several tests.
struct Trained {
  fs::path dir, corpus, ckpt;
};

const Trained& trained() {
  static const Trained t = [] {
    Trained r;
    r.dir = scratch("trained");
    r.corpus = r.dir / "corpus";
    r.ckpt = r.dir / "run" / "final.bgml";
    EXPECT_EQ(run("gen --out " + r.corpus.string() + kSmall).code, 0);
    EXPECT_EQ(run("train --corpus " + r.corpus.string() + " --out " + (r.dir / "run").string() + kTinyModel +
                  " --epochs 1")
                  .code,
              0);
    return r;
  }();
  return t;
}

}  // namespace

TEST(Cli, HelpListsDefaults) {
  const auto r = run("train --help");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("--epochs"), std::string::npos);
  EXPECT_NE(r.out.find("30"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("joint"), std::string::npos);
  EXPECT_NE(run("heatmap --help").out.find("256"), std::string::npos);
}

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("frobnicate").code, 2);
  EXPECT_EQ(run("train --epochs many").code, 2);
  EXPECT_EQ(run("train --mode both").code, 2);
}

TEST(Cli, GenIsDeterministic) {
  const auto dir = scratch("gen");
  ASSERT_EQ(run("gen --out " + (dir / "a").string() + kSmall).code, 0);
  ASSERT_EQ(run("gen --out " + (dir / "b").string() + kSmall).code, 0);
  EXPECT_TRUE(same_tree(dir / "a", dir / "b"));
  EXPECT_TRUE(fs::exists(dir / "a" / "run_config.json"));
  ASSERT_EQ(run("gen --out " + (dir / "c").string() + kSmall + " --seed 5").code, 0);
  EXPECT_NE(bytes(dir / "a" / "bag_00000.ppm"), bytes(dir / "c" / "bag_00000.ppm"));
  fs::remove_all(dir);
}

TEST(Cli, GenZeroBags) {
  const auto dir = scratch("gen0");
  ASSERT_EQ(run("gen --out " + dir.string() + " --n-bags 0").code, 0);
  std::ifstream f(dir / "manifest.json");
  EXPECT_TRUE(nlohmann::json::parse(f).at("bags").empty());
  fs::remove_all(dir);
}

TEST(Cli, TrainZeroEpochsSavesInit) {
  const auto& t = trained();
  const auto dir = scratch("train0");
  ASSERT_EQ(run("train --corpus " + t.corpus.string() + " --out " + dir.string() + kTinyModel + " --epochs 0").code,
            0);
  Rng rng(42, 0);
  ModelConfig cfg = testutil::small_config(4, 4, 1);
  EXPECT_EQ(bytes(dir / "final.bgml"), encode_checkpoint(ToyBagNet<float>::init(cfg, rng)));
  fs::remove_all(dir);
}

TEST(Cli, TrainIsReproducible) {
  const auto& t = trained();
  const auto dir = scratch("train_again");
  ASSERT_EQ(run("train --corpus " + t.corpus.string() + " --out " + dir.string() + kTinyModel + " --epochs 1").code,
            0);
  EXPECT_TRUE(same_tree(t.dir / "run", dir));
  for (const char* f : {"epoch_000.bgml", "best.bgml", "final.bgml", "metrics.csv", "run_config.json"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  fs::remove_all(dir);
}

TEST(Cli, MissingCorpusExitsThree) {
  const auto r = run("train --corpus /nonexistent/corpus --out " + scratch("nocorpus").string());
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.out.find("/nonexistent/corpus"), std::string::npos) << r.out;
}

TEST(Cli, BadConfigKeyExitsTwo) {
  const auto dir = scratch("badcfg");
  std::ofstream(dir / "c.json") << R"({"train": {"epoch": 3}})";
  const auto r = run("train --config " + (dir / "c.json").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("train.epoch"), std::string::npos) << r.out;
  fs::remove_all(dir);
}

TEST(Cli, ConfigFileAndFlagOverride) {
  const auto& t = trained();
  const auto dir = scratch("cfgfile");
  std::ofstream(dir / "c.json") << R"({"train": {"epochs": 0, "seed": 9}, "model": {"channels": 4, "n1": 1}})";
  ASSERT_EQ(run("train --config " + (dir / "c.json").string() + " --corpus " + t.corpus.string() + " --out " +
                (dir / "o").string() + " --train-seed 10")
                .code,
            0);
  std::ifstream f(dir / "o" / "run_config.json");
  const auto j = nlohmann::json::parse(f);
  EXPECT_EQ(j["train"]["seed"], 10);
  EXPECT_EQ(j["train"]["epochs"], 0);
  EXPECT_EQ(j["model"]["channels"], 4);
  fs::remove_all(dir);
}

TEST(Cli, EvalRatesInRange) {
  const auto& t = trained();
  const auto dir = scratch("eval");
  ASSERT_EQ(run("eval --corpus " + t.corpus.string() + " --checkpoint " + t.ckpt.string() + " --out " +
                dir.string() + " --split all")
                .code,
            0);
  std::ifstream f(dir / "eval.csv");
  std::string header, line;
  std::getline(f, header);
  std::getline(f, line);
  EXPECT_EQ(header, "bags,bag_acc,inst_acc_weak,inst_acc_true,pointing,iou,localized");
  std::stringstream ss(line);
  std::string cell;
  std::getline(ss, cell, ',');
  EXPECT_EQ(cell, "10");
  for (int i = 0; i < 5; ++i) {
    std::getline(ss, cell, ',');
    const double v = std::stod(cell);
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  const auto before = bytes(t.ckpt);
  EXPECT_EQ(run("eval --corpus " + t.corpus.string() + " --checkpoint " + t.ckpt.string() + " --out " +
                dir.string() + " --split nope")
                .code,
            2);
  EXPECT_EQ(bytes(t.ckpt), before);
  EXPECT_EQ(run("eval --corpus " + t.corpus.string() + " --out " + dir.string()).code, 2);  // no checkpoint
  EXPECT_EQ(run("eval --corpus " + t.corpus.string() + " --checkpoint /nonexistent.bgml --out " + dir.string()).code,
            3);
  fs::remove_all(dir);
}

TEST(Cli, HeatmapTilingDoesNotChangeBytes) {
  const auto& t = trained();
  const auto dir = scratch("hm_tile");
  const std::string img = (t.corpus / "bag_00001.ppm").string();
  const std::string base = "heatmap --checkpoint " + t.ckpt.string() + " --image " + img;
  ASSERT_EQ(run(base + " --tile 0 --out " + (dir / "a").string()).code, 0);
  ASSERT_EQ(run(base + " --tile 12 --workers 2 --out " + (dir / "b").string()).code, 0);
  EXPECT_EQ(bytes(dir / "a" / "bag_00001_logit_class1.pgm"), bytes(dir / "b" / "bag_00001_logit_class1.pgm"));
  EXPECT_EQ(bytes(dir / "a" / "bag_00001_logit_class1.json"), bytes(dir / "b" / "bag_00001_logit_class1.json"));
  EXPECT_TRUE(fs::exists(dir / "a" / "run_config.json"));
  fs::remove_all(dir);
}

TEST(Cli, HeatmapClassesGiveDistinctFiles) {
  const auto& t = trained();
  const auto dir = scratch("hm_class");
  const std::string base = "heatmap --checkpoint " + t.ckpt.string() + " --image " +
                           (t.corpus / "bag_00002.ppm").string() + " --out " + dir.string();
  ASSERT_EQ(run(base + " --class 0").code, 0);
  ASSERT_EQ(run(base + " --class 1").code, 0);
  HeatmapMeta m0, m1;
  read_exported_heatmap(dir / "bag_00002_logit_class0.pgm", &m0);
  read_exported_heatmap(dir / "bag_00002_logit_class1.pgm", &m1);
  EXPECT_EQ(m0.class_name, "benign");
  EXPECT_EQ(m1.class_name, "malignant");
  EXPECT_EQ(m1.offset, 4u);
  EXPECT_EQ(run(base + " --class 2").code, 2);
  fs::remove_all(dir);
}

TEST(Cli, CamMatchesLogitWithoutHeadBias) {
  const auto& t = trained();
  const auto dir = scratch("hm_cam");
  auto model = load_checkpoint(t.ckpt);
  model.head_bias.fill(0);
  save_checkpoint(model, dir / "nobias.bgml");
  const std::string base = "heatmap --checkpoint " + (dir / "nobias.bgml").string() + " --image " +
                           (t.corpus / "bag_00003.ppm").string() + " --out " + dir.string();
  ASSERT_EQ(run(base + " --baseline logit").code, 0);
  ASSERT_EQ(run(base + " --baseline cam").code, 0);
  ASSERT_EQ(run(base + " --baseline gradcam").code, 0);
  EXPECT_EQ(bytes(dir / "bag_00003_logit_class1.pgm"), bytes(dir / "bag_00003_cam_class1.pgm"));
  HeatmapMeta meta;
  read_exported_heatmap(dir / "bag_00003_gradcam_class1.pgm", &meta);
  EXPECT_EQ(meta.kind, "gradcam");
  EXPECT_EQ(run(base + " --baseline saliency").code, 2);
  fs::remove_all(dir);
}

TEST(Cli, HeatmapImageSmallerThanReceptiveField) {
  const auto& t = trained();
  const auto dir = scratch("hm_small");
  pnm::write(dir / "tiny.ppm", {3, 5, 5, std::vector<std::uint8_t>(75, 100)});
  const auto r = run("heatmap --checkpoint " + t.ckpt.string() + " --image " + (dir / "tiny.ppm").string() +
                     " --out " + dir.string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("receptive field 9"), std::string::npos) << r.out;
  EXPECT_EQ(run("heatmap --checkpoint " + t.ckpt.string() + " --image " + (dir / "none.ppm").string() + " --out " +
                dir.string())
                .code,
            3);
  EXPECT_EQ(run("heatmap --checkpoint " + t.ckpt.string() + " --out " + dir.string()).code, 2);  // no --image
  fs::remove_all(dir);
}

TEST(Cli, AblateSingleFoldHasNoStd) {
  const auto& t = trained();
  const auto dir = scratch("ablate");
  const auto r = run("ablate --corpus " + t.corpus.string() + " --out " + dir.string() + kTinyModel +
                     " --epochs 1 --folds 1");
  ASSERT_EQ(r.code, 0) << r.out;
  const auto summary = bytes(dir / "summary.csv");
  EXPECT_EQ(summary.find("_std"), std::string::npos);
  EXPECT_EQ(summary.substr(0, summary.find('\n')),
            "mode,folds,bag_acc_mean,inst_acc_weak_mean,inst_acc_true_mean,pointing_mean,iou_mean");
  EXPECT_NE(summary.find("\nsil,1,"), std::string::npos);
  EXPECT_NE(summary.find("\nmil,1,"), std::string::npos);
  EXPECT_NE(summary.find("\njoint,1,"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir / "results.csv"));
  EXPECT_TRUE(fs::exists(dir / "runs" / "joint_fold0" / "final.bgml"));
  fs::remove_all(dir);
}

TEST(Cli, DefaultCorpusManifestSchema) {
  const auto dir = scratch("gen_default");
  const auto r = run("gen --out " + dir.string());
  ASSERT_EQ(r.code, 0) << r.out;
  std::ifstream f(dir / "manifest.json");
  const auto j = nlohmann::json::parse(f);
  EXPECT_EQ(j.at("version"), 1);
  EXPECT_TRUE(j.at("seed").is_number_unsigned());
  ASSERT_EQ(j.at("bags").size(), 400u);
  std::size_t malignant = 0;
  for (const auto& b : j.at("bags")) {
    ASSERT_TRUE(b.at("id").is_number_unsigned());
    ASSERT_TRUE(b.at("image").is_string());
    ASSERT_TRUE(b.at("mask").is_string());
    EXPECT_TRUE(fs::exists(dir / b.at("image").get<std::string>()));
    EXPECT_TRUE(fs::exists(dir / b.at("mask").get<std::string>()));
    const std::size_t label = b.at("bag_label");
    ASSERT_LE(label, 1u);
    EXPECT_EQ(b.at("patch_grid"), 2);
    const auto& patches = b.at("patch_true_labels");
    ASSERT_EQ(patches.size(), 4u);
    bool any = false;
    for (const auto& p : patches) any = any || p.get<std::size_t>() == 1;
    EXPECT_EQ(any, label == 1);
    malignant += label;
  }
  EXPECT_NE(r.out.find("400 bags"), std::string::npos);
  EXPECT_GE(malignant, 180u);
  EXPECT_LE(malignant, 220u);
  fs::remove_all(dir);
}

// Full default run: 400-bag corpus, joint mode, 30 epochs. Takes a few minutes.
TEST(Cli, DefaultJointRunReachesTarget) {
  const auto dir = scratch("train_default");
  ASSERT_EQ(run("gen --out " + (dir / "corpus").string()).code, 0);
  const auto r = run("train --corpus " + (dir / "corpus").string() + " --out " + (dir / "run").string());
  ASSERT_EQ(r.code, 0) << r.out;
  std::ifstream f(dir / "run" / "metrics.csv");
  std::string line, last;
  std::getline(f, line);
  EXPECT_EQ(line, "epoch,lr,loss,bag_acc,inst_acc");
  std::size_t rows = 0;
  while (std::getline(f, line))
    if (!line.empty()) {
      last = line;
      ++rows;
    }
  EXPECT_EQ(rows, 30u);
  std::stringstream ss(last);
  std::string cell;
  for (int i = 0; i < 4; ++i) std::getline(ss, cell, ',');
  EXPECT_GE(std::stod(cell), 0.95) << last;
  fs::remove_all(dir);
}
