// fpcrf-synth: generate the synthetic rectangle dataset used by the README
// walkthrough and the benchmark harness. Writes train/ and test/ splits of
// <stem>_image.fpt + <stem>_labels.fpt (+ the clean mask as PGM) that the
// train/infer/eval/bench subcommands consume directly.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "fpcrf/io.hpp"
#include "fpcrf/synth.hpp"

namespace {

void write_split(const std::string& dir, std::uint64_t seed, int count,
                 const fpcrf::SynthParams& params) {
  std::filesystem::create_directories(dir);
  const std::vector<fpcrf::SynthPatch> patches = fpcrf::synth_dataset(seed, count, params);
  for (int i = 0; i < count; ++i) {
    char stem[32];
    std::snprintf(stem, sizeof(stem), "p%03d", i);
    const std::string base = dir + "/" + stem;
    fpcrf::write_tensor(fpcrf::tensor_from_feature_map(patches[i].rgb), base + "_image.fpt");
    fpcrf::write_tensor(fpcrf::tensor_from_labels(patches[i].labels), base + "_labels.fpt");
    fpcrf::write_mask_pgm(patches[i].mask, base + "_mask.pgm");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"synthetic rectangle dataset generator"};
  std::string out;
  int train = 100, test = 20, size = 128;
  std::uint64_t seed = 0;
  double noise = -1.0, texture = -1.0, foreground = -1.0, background = -1.0;
  app.add_option("--out", out, "output directory (gets train/ and test/)")->required();
  app.add_option("--train", train, "training patches (default 100)");
  app.add_option("--test", test, "test patches (default 20)");
  app.add_option("--size", size, "patch side length (default 128)");
  app.add_option("--seed", seed, "base RNG seed (test split uses seed+1)");
  app.add_option("--noise", noise, "salt-and-pepper fraction (default 0.08)");
  app.add_option("--texture", texture, "per-pixel brightness jitter (default 0.06)");
  app.add_option("--foreground", foreground, "box base intensity (default 0.65)");
  app.add_option("--background", background, "ground base intensity (default 0.2)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    fpcrf::SynthParams params;
    params.size = size;
    if (noise >= 0.0) params.noise = noise;
    if (texture >= 0.0) params.texture = texture;
    if (foreground >= 0.0) params.foreground = foreground;
    if (background >= 0.0) params.background = background;
    write_split(out + "/train", seed, train, params);
    write_split(out + "/test", seed + 1, test, params);
    std::cout << "wrote " << train << " train + " << test << " test patches to " << out << "\n";
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
