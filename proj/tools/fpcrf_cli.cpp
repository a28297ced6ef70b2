// fpcrf: preprocess / infer / train / eval / bench over FPT1 + PGM files.
//
// Settings resolve in layers: built-in defaults, then the FPCRF_THREADS
// environment variable, then --config (key = value lines), then flags.
// Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numeric error.

#include <array>
#include <cstdlib>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "fpcrf/pipeline.hpp"

namespace {

constexpr std::array<const char*, 28> kSettingKeys = {
    "kernels",       "filter_radius", "iterations",  "tolerance",     "classes",
    "theta_alpha",   "theta_beta",    "theta_gamma", "theta_delta",   "theta_zeta",
    "theta_eta",     "weight_a",      "weight_s",    "weight_fd",     "weight_fs",
    "weight_fc",     "learning_rate", "epochs",      "batch_size",    "seed",
    "trainable",     "T",             "search_radius", "size",        "overlap",
    "feature_window", "threads",      "bench_radii"};

// Per-subcommand settings flags: one flag per config key, same spelling.
struct SettingsCli {
  std::string config;
  std::array<std::string, kSettingKeys.size()> values{};
  std::array<CLI::Option*, kSettingKeys.size()> options{};

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config, "settings file (key = value lines)");
    for (std::size_t i = 0; i < kSettingKeys.size(); ++i)
      options[i] = cmd->add_option("--" + std::string(kSettingKeys[i]), values[i],
                                   "override the `" + std::string(kSettingKeys[i]) + "` setting")
                       ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  }

  fpcrf::RunSettings resolve() const {
    fpcrf::RunSettings s;
    if (const char* env = std::getenv("FPCRF_THREADS"); env && *env)
      fpcrf::apply_setting(s, "threads", env, "env FPCRF_THREADS");
    if (!config.empty())
      for (const fpcrf::KvLine& kv : fpcrf::read_kv_file(config))
        fpcrf::apply_setting(s, kv.key, kv.value, config + " line " + std::to_string(kv.line));
    for (std::size_t i = 0; i < kSettingKeys.size(); ++i)
      if (options[i]->count() > 0)
        fpcrf::apply_setting(s, kSettingKeys[i], values[i],
                             "--" + std::string(kSettingKeys[i]));
    fpcrf::validate_settings(s);
    return s;
  }
};

std::string manifest_value(const fpcrf::RunManifest& man, const std::string& key) {
  for (const auto& [k, v] : man.entries)
    if (k == key) return v;
  return "?";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pairwise-CRF segmentation pipeline"};
  app.require_subcommand(1);

  auto* pre = app.add_subcommand(
      "preprocess", "align a footprint mask to the image and derive distance labels + patches");
  fpcrf::PreprocessIo pre_io;
  SettingsCli pre_cli;
  pre->add_option("--image", pre_io.image, "RGB image, FPT1 H x W x 3")->required();
  pre->add_option("--mask", pre_io.mask, "footprint mask, PGM")->required();
  pre->add_option("--out", pre_io.out, "output directory")->required();
  pre_cli.attach(pre);

  auto* inf = app.add_subcommand("infer", "run mean-field inference and write the segmentation");
  fpcrf::InferIo inf_io;
  SettingsCli inf_cli;
  inf->add_option("--features", inf_io.features, "feature map, FPT1 H x W x D");
  inf->add_option("--image", inf_io.image, "RGB image, FPT1 H x W x 3 (toy-feature source)");
  inf->add_option("--unary", inf_io.unary, "unary potentials, FPT1 H x W x C");
  inf->add_option("--checkpoint", inf_io.checkpoint, "model checkpoint directory");
  inf->add_option("--out", inf_io.out, "output directory")->required();
  inf_cli.attach(inf);

  auto* trn = app.add_subcommand("train", "fit CRF parameters (and the logistic head) by SGD");
  fpcrf::TrainIo trn_io;
  SettingsCli trn_cli;
  trn->add_option("--data", trn_io.data, "dataset directory (<stem>_labels.fpt + side-cars)")
      ->required();
  trn->add_option("--checkpoint", trn_io.checkpoint, "checkpoint directory to resume from");
  trn->add_option("--out", trn_io.out, "output directory")->required();
  trn_cli.attach(trn);

  auto* evl = app.add_subcommand("eval", "score predicted masks against reference masks");
  fpcrf::EvalIo evl_io;
  SettingsCli evl_cli;
  evl->add_option("--pred", evl_io.pred, "predicted mask/labeling file or directory")->required();
  evl->add_option("--truth", evl_io.truth, "reference mask/labeling file or directory")->required();
  evl->add_option("--out", evl_io.out, "output directory")->required();
  evl_cli.attach(evl);

  auto* bch = app.add_subcommand("bench", "sweep the filter radius and record IoU and wall time");
  fpcrf::BenchIo bch_io;
  SettingsCli bch_cli;
  bch->add_option("--data", bch_io.data, "dataset directory")->required();
  bch->add_option("--checkpoint", bch_io.checkpoint, "model checkpoint directory");
  bch->add_option("--out", bch_io.out, "output directory")->required();
  bch_cli.attach(bch);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);  // prints help or the parse error
    return code == 0 ? 0 : 2;
  }

  try {
    if (pre->parsed()) {
      pre_io.config = pre_cli.config;
      const fpcrf::RunManifest man = fpcrf::cmd_preprocess(pre_io, pre_cli.resolve());
      std::cout << "shift = (" << manifest_value(man, "shift.dy") << ", "
                << manifest_value(man, "shift.dx") << "), score = "
                << manifest_value(man, "shift.score") << "\n";
      std::cout << "patches = " << manifest_value(man, "patch.count") << ", outputs in "
                << pre_io.out << "\n";
    } else if (inf->parsed()) {
      inf_io.config = inf_cli.config;
      const fpcrf::RunManifest man = fpcrf::cmd_infer(inf_io, inf_cli.resolve());
      std::cout << "patches = " << manifest_value(man, "patch.count")
                << ", seam disagreement = " << manifest_value(man, "stitch.seam_disagreement")
                << ", outputs in " << inf_io.out << "\n";
    } else if (trn->parsed()) {
      trn_io.config = trn_cli.config;
      const fpcrf::RunManifest man = fpcrf::cmd_train(trn_io, trn_cli.resolve());
      std::cout << "samples = " << manifest_value(man, "dataset.samples") << ", final loss = "
                << manifest_value(man, "loss.final") << ", outputs in " << trn_io.out << "\n";
    } else if (evl->parsed()) {
      evl_io.config = evl_cli.config;
      const fpcrf::RunManifest man = fpcrf::cmd_eval(evl_io, evl_cli.resolve());
      std::cout << "patches = " << manifest_value(man, "patch.count") << ", pooled IoU = "
                << manifest_value(man, "total.iou") << ", outputs in " << evl_io.out << "\n";
    } else if (bch->parsed()) {
      bch_io.config = bch_cli.config;
      fpcrf::cmd_bench(bch_io, bch_cli.resolve());
      std::cout << "wrote " << bch_io.out << "/bench.csv\n";
    }
  } catch (const fpcrf::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const fpcrf::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 3;
  } catch (const fpcrf::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
