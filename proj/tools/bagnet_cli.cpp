// bagnet: corpus generation, training, evaluation, ablation and heatmap export.
//
// Exit codes: 0 ok, 2 usage/config/shape, 3 I/O, 4 non-finite values.
// BAGNET_VERBOSE=1 prints per-epoch progress to stderr.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "bagnet/bagnet.hpp"

namespace fs = std::filesystem;
using namespace bagnet;

namespace {

template <class T>
void override(const std::optional<T>& flag, T& field) {
  if (flag) field = *flag;
}

template <class T>
std::string dflt(const T& v) {
  if constexpr (std::is_same_v<T, std::string>)
    return v.empty() ? "\"\"" : v;
  else
    return fmt::format("{}", v);
}

struct Flags {
  std::string config;
  // synth
  std::optional<std::uint64_t> synth_seed;
  std::optional<std::size_t> n_bags, image_size, patch_grid;
  std::optional<double> malignant_fraction;
  // model
  std::optional<std::size_t> channels, n3, n1;
  // train
  std::optional<std::size_t> epochs, bags_per_step, decay_interval;
  std::optional<double> lr0, decay, lambda_sil;
  std::optional<std::uint64_t> train_seed;
  std::optional<std::string> mode;
  // eval / heatmap
  std::optional<std::size_t> folds, tile, workers, heatmap_class;
  std::optional<std::string> normalization;
  std::optional<double> norm_lo, norm_hi;
  // paths
  std::optional<std::string> corpus, checkpoint, output;
  // command specific
  std::string image;
  std::string baseline = "logit";
  std::string split = "test";
};

RunConfig effective_config(const Flags& f) {
  RunConfig c = f.config.empty() ? RunConfig{} : load_run_config(f.config);
  override(f.synth_seed, c.synth.seed);
  override(f.n_bags, c.synth.n_bags);
  override(f.image_size, c.synth.image_size);
  override(f.patch_grid, c.synth.patch_grid);
  override(f.malignant_fraction, c.synth.malignant_fraction);
  override(f.channels, c.model.channels);
  override(f.n3, c.model.n3);
  override(f.n1, c.model.n1);
  override(f.epochs, c.train.epochs);
  override(f.bags_per_step, c.train.bags_per_step);
  override(f.decay_interval, c.train.decay_interval);
  override(f.lr0, c.train.lr0);
  override(f.decay, c.train.decay);
  override(f.lambda_sil, c.train.lambda_sil);
  override(f.train_seed, c.train.seed);
  if (f.mode) c.mode = parse_mode(*f.mode);
  override(f.folds, c.folds);
  override(f.tile, c.heatmap.tile);
  override(f.workers, c.heatmap.workers);
  override(f.heatmap_class, c.eval.heatmap_class);
  override(f.normalization, c.heatmap.normalization);
  override(f.norm_lo, c.heatmap.norm_lo);
  override(f.norm_hi, c.heatmap.norm_hi);
  override(f.corpus, c.paths.corpus);
  override(f.checkpoint, c.paths.checkpoint);
  override(f.output, c.paths.output);
  validate(c);
  return c;
}

void echo_config(const RunConfig& c, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  write_text(dir / "run_config.json", to_json(c).dump(2) + "\n");
}

std::vector<SynthSample> load_corpus(const RunConfig& c) {
  Corpus corpus = import_corpus(c.paths.corpus);
  for (const auto& s : corpus.samples) check_bag(ToyBagNet<float>::zeros(c.model), s.bag.bag);
  return std::move(corpus.samples);
}

std::vector<SynthSample> select_split(const std::vector<SynthSample>& all, const std::string& split,
                                      std::uint64_t seed) {
  if (split == "all") return all;
  const auto folds = make_folds(all.size(), 1, seed);
  const auto& idx = split == "train" ? folds[0].train : folds[0].test;
  return gather(std::span<const SynthSample>(all), std::span<const std::size_t>(idx));
}

ToyBagNet<float> require_checkpoint(const RunConfig& c) {
  if (c.paths.checkpoint.empty()) throw ConfigError("no checkpoint given (--checkpoint)");
  return load_checkpoint(c.paths.checkpoint);
}

int cmd_gen(const RunConfig& c) {
  const auto samples = generate_corpus(c.synth);
  export_corpus(samples, c.synth.seed, c.paths.corpus);
  echo_config(c, c.paths.corpus);
  std::size_t mal = 0;
  for (const auto& s : samples) mal += s.bag.bag.label == kMalignant;
  std::printf("corpus %s: %zu bags, %zu malignant, %zu benign\n", c.paths.corpus.c_str(), samples.size(), mal,
              samples.size() - mal);
  return 0;
}

int cmd_train(const RunConfig& c) {
  const auto all = load_corpus(c);
  const auto train_s = select_split(all, "train", c.train.seed);
  const auto val_s = select_split(all, "test", c.train.seed);
  const fs::path out = c.paths.output;
  echo_config(c, out);
  Rng init_rng(c.train.seed, 0), shuffle_rng(c.train.seed, 1);
  auto model = ToyBagNet<float>::init(c.model, init_rng);
  const auto val = weak_bags(val_s);
  const auto result = train(model, weak_bags(train_s), val, c.train, c.mode, shuffle_rng, {out, true});
  std::printf("trained %s for %zu epochs on %zu bags; checkpoint %s\n", std::string(to_string(c.mode)).c_str(),
              c.train.epochs, train_s.size(), (out / "final.bgml").c_str());
  if (!result.log.empty())
    std::printf("final bag_acc %.4f inst_acc %.4f (held-out %zu bags)\n", result.log.back().bag_acc,
                result.log.back().inst_acc, val_s.size());
  return 0;
}

int cmd_eval(const RunConfig& c, const std::string& split) {
  if (split != "all" && split != "train" && split != "test") throw ConfigError("--split must be all, train or test");
  const auto model = require_checkpoint(c);
  const auto samples = select_split(load_corpus(c), split, c.train.seed);
  const auto r = evaluate(model, samples, c.eval);
  const fs::path out = c.paths.output;
  echo_config(c, out);
  write_text(out / "eval.csv",
             fmt::format("bags,bag_acc,inst_acc_weak,inst_acc_true,pointing,iou,localized\n"
                         "{},{:.6f},{:.6f},{:.6f},{:.6f},{:.6f},{}\n",
                         r.bags, r.bag_acc, r.inst_acc_weak, r.inst_acc_true, r.pointing, r.iou, r.localized));
  std::printf("bags %zu bag_acc %.4f inst_acc_weak %.4f inst_acc_true %.4f pointing %.4f iou %.4f\n", r.bags,
              r.bag_acc, r.inst_acc_weak, r.inst_acc_true, r.pointing, r.iou);
  return 0;
}

int cmd_ablate(const RunConfig& c) {
  const auto samples = load_corpus(c);
  const fs::path out = c.paths.output;
  echo_config(c, out);
  AblationSettings s;
  s.folds = c.folds;
  s.model = c.model;
  s.train = c.train;
  s.eval = c.eval;
  s.out_dir = out / "runs";
  const auto rows = run_ablation(samples, s);
  write_text(out / "results.csv", results_csv(rows));
  const std::string summary = summary_csv(rows, c.folds);
  write_text(out / "summary.csv", summary);
  std::fputs(summary.c_str(), stdout);
  return 0;
}

int cmd_heatmap(const RunConfig& c, const std::string& image_path, const std::string& baseline) {
  if (image_path.empty()) throw ConfigError("no input image given (--image)");
  if (baseline != "logit" && baseline != "cam" && baseline != "gradcam")
    throw ConfigError("--baseline must be logit, cam or gradcam");
  const auto model = require_checkpoint(c);
  const pnm::Image8 img8 = pnm::read(image_path);
  const Tensor<float> image = pnm::to_tensor(img8);
  check_image(model, image);
  const std::size_t k = c.eval.heatmap_class;
  check_class(model, k);

  Tensor<float> map;
  const std::size_t rf = model.rf();
  if (baseline == "logit") {
    const TilePlan plan = make_tile_plan(image.dim(1), image.dim(2), c.heatmap.tile, rf);
    map = tiled_heatmap(model, image, plan, c.heatmap.workers).channel(k);
  } else if (baseline == "cam") {
    map = cam(model, image, k);
  } else {
    map = gradcam(model, image, k);
  }
  const fs::path out = c.paths.output;
  echo_config(c, out);
  const auto names = default_class_names(model.config.classes);
  const fs::path file = out / fmt::format("{}_{}_class{}.pgm", fs::path(image_path).stem().string(), baseline, k);
  const auto e = export_heatmap(map, {baseline, k, names[k], (rf - 1) / 2, rf}, file, normalization_of(c.heatmap));
  std::printf("%s: %zux%zu %s map for class %zu (%s), range [%g, %g]\n", file.c_str(), e.height, e.width,
              baseline.c_str(), k, names[k].c_str(), e.lo, e.hi);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  const RunConfig d;
  Flags f;
  CLI::App app{"Limited receptive field bag-of-features classifier with joint SIL/MIL training and logit heatmaps"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  auto add_common = [&](CLI::App* s) {
    s->add_option("--config", f.config, "JSON run config; flags override its values");
    s->add_option("--out", f.output, "Output directory")->default_str(dflt(d.paths.output));
  };
  auto add_synth = [&](CLI::App* s) {
    s->add_option("--seed", f.synth_seed, "Corpus seed")->default_str(dflt(d.synth.seed));
    s->add_option("--n-bags", f.n_bags, "Number of bags (images)")->default_str(dflt(d.synth.n_bags));
    s->add_option("--image-size", f.image_size, "Image side in pixels")->default_str(dflt(d.synth.image_size));
    s->add_option("--patch-grid", f.patch_grid, "Patches per side of a bag")->default_str(dflt(d.synth.patch_grid));
    s->add_option("--malignant-fraction", f.malignant_fraction, "Probability a bag is malignant")
        ->default_str(dflt(d.synth.malignant_fraction));
  };
  auto add_model = [&](CLI::App* s) {
    s->add_option("--channels", f.channels, "Feature channels C")->default_str(dflt(d.model.channels));
    s->add_option("--n3", f.n3, "3x3 conv layers (RF = 2*n3+1)")->default_str(dflt(d.model.n3));
    s->add_option("--n1", f.n1, "1x1 conv layers")->default_str(dflt(d.model.n1));
  };
  auto add_train = [&](CLI::App* s) {
    s->add_option("--mode", f.mode, "sil | mil | joint")->default_str(std::string(to_string(d.mode)));
    s->add_option("--epochs", f.epochs, "Training epochs")->default_str(dflt(d.train.epochs));
    s->add_option("--lr0", f.lr0, "Initial learning rate")->default_str(dflt(d.train.lr0));
    s->add_option("--decay", f.decay, "Learning rate factor per interval")->default_str(dflt(d.train.decay));
    s->add_option("--decay-interval", f.decay_interval, "Epochs between decays")
        ->default_str(dflt(d.train.decay_interval));
    s->add_option("--bags-per-step", f.bags_per_step, "Bags per optimizer step")
        ->default_str(dflt(d.train.bags_per_step));
    s->add_option("--lambda-sil", f.lambda_sil, "Weight of the instance loss")->default_str(dflt(d.train.lambda_sil));
    s->add_option("--train-seed", f.train_seed, "Seed for init, shuffling and splits")
        ->default_str(dflt(d.train.seed));
  };
  auto add_corpus = [&](CLI::App* s) {
    s->add_option("--corpus", f.corpus, "Corpus directory")->default_str(dflt(d.paths.corpus));
  };
  auto add_checkpoint = [&](CLI::App* s) {
    s->add_option("--checkpoint", f.checkpoint, "Checkpoint file (.bgml)")->default_str(dflt(d.paths.checkpoint));
  };
  auto add_class = [&](CLI::App* s) {
    s->add_option("--class", f.heatmap_class, "Class index of the map")->default_str(dflt(d.eval.heatmap_class));
  };

  auto* gen = app.add_subcommand("gen", "Generate the synthetic corpus");
  gen->add_option("--config", f.config, "JSON run config; flags override its values");
  gen->add_option("--out", f.corpus, "Corpus directory")->default_str(dflt(d.paths.corpus));
  add_synth(gen);

  auto* tr = app.add_subcommand("train", "Train on 80% of a corpus, validate on the rest");
  add_common(tr);
  add_corpus(tr);
  add_model(tr);
  add_train(tr);

  auto* ev = app.add_subcommand("eval", "Score a checkpoint on a corpus");
  add_common(ev);
  add_corpus(ev);
  add_checkpoint(ev);
  add_class(ev);
  ev->add_option("--split", f.split, "all | train | test (the 80/20 split of --train-seed)")->capture_default_str();
  ev->add_option("--train-seed", f.train_seed, "Seed of the split")->default_str(dflt(d.train.seed));

  auto* ab = app.add_subcommand("ablate", "k-fold SIL / MIL / joint ablation");
  add_common(ab);
  add_corpus(ab);
  add_model(ab);
  add_train(ab);
  ab->add_option("--folds", f.folds, "Folds (1: single 80/20 split)")->default_str(dflt(d.folds));

  auto* hm = app.add_subcommand("heatmap", "Export a logit, CAM or GradCAM map as PGM + JSON");
  add_common(hm);
  add_checkpoint(hm);
  add_class(hm);
  hm->add_option("--image", f.image, "Input PPM (P6) image")->required();
  hm->add_option("--tile", f.tile, "Tile side in pixels, 0 for a single pass")->default_str(dflt(d.heatmap.tile));
  hm->add_option("--workers", f.workers, "Tile worker threads")->default_str(dflt(d.heatmap.workers));
  hm->add_option("--baseline", f.baseline, "logit | cam | gradcam")->capture_default_str();
  hm->add_option("--normalization", f.normalization, "minmax | fixed")->default_str(d.heatmap.normalization);
  hm->add_option("--norm-lo", f.norm_lo, "Lower bound for fixed normalization")->default_str(dflt(d.heatmap.norm_lo));
  hm->add_option("--norm-hi", f.norm_hi, "Upper bound for fixed normalization")->default_str(dflt(d.heatmap.norm_hi));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    const RunConfig c = effective_config(f);
    if (*gen) return cmd_gen(c);
    if (*tr) return cmd_train(c);
    if (*ev) return cmd_eval(c, f.split);
    if (*ab) return cmd_ablate(c);
    if (*hm) return cmd_heatmap(c, f.image, f.baseline);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const ShapeError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const IoError& e) {
    std::fprintf(stderr, "I/O error: %s\n", e.what());
    return 3;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return 4;
  }
  return 2;
}
