#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "fpcrf/errors.hpp"
#include "fpcrf/evaluation.hpp"
#include "fpcrf/features.hpp"
#include "fpcrf/inference.hpp"
#include "fpcrf/io.hpp"
#include "fpcrf/kernels.hpp"
#include "fpcrf/preprocess.hpp"
#include "fpcrf/training.hpp"
#include "fpcrf/types.hpp"

namespace fpcrf {

// ---------------------------------------------------------------------------
// RunManifest: every subcommand records what it read, the full effective
// settings (config syntax, so a run can be reproduced from its manifest),
// what it wrote, and per-stage timings.
// ---------------------------------------------------------------------------
struct RunManifest {
  std::vector<std::pair<std::string, std::string>> entries;

  void add(const std::string& key, const std::string& value) { entries.push_back({key, value}); }
  void add(const std::string& key, long long value) { add(key, std::to_string(value)); }
  void add(const std::string& key, int value) { add(key, std::to_string(value)); }
  void add_real(const std::string& key, double value) { add(key, detail::format_double(value)); }
  void add_ms(const std::string& stage, double ms) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.3f", ms);
    add("timing." + stage + "_ms", std::string(buf));
  }

  std::string text() const {
    std::string out;
    for (const auto& [k, v] : entries) out += k + " = " + v + "\n";
    return out;
  }
  void write(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError(path + ": cannot open for writing");
    out << text();
    if (!out.flush()) throw IoError(path + ": write failed");
  }
};

namespace detail {

class StageClock {
 public:
  double lap_ms() {
    const auto now = std::chrono::steady_clock::now();
    const double ms = std::chrono::duration<double, std::milli>(now - last_).count();
    last_ = now;
    return ms;
  }

 private:
  std::chrono::steady_clock::time_point last_ = std::chrono::steady_clock::now();
};

inline std::string join_ints(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(v[i]);
  }
  return out;
}

}  // namespace detail

inline void append_settings(RunManifest& man, const RunSettings& s) {
  man.add("kernels", kernel_list_name(s.kernels));
  const char* weight_keys[5] = {"weight_a", "weight_s", "weight_fd", "weight_fs", "weight_fc"};
  for (int k = 0; k < 5; ++k) man.add_real(weight_keys[k], s.kernel_weight[k]);
  man.add_real("theta_alpha", s.bandwidths.alpha);
  man.add_real("theta_beta", s.bandwidths.beta);
  man.add_real("theta_gamma", s.bandwidths.gamma);
  man.add_real("theta_delta", s.bandwidths.delta);
  man.add_real("theta_zeta", s.bandwidths.zeta);
  man.add_real("theta_eta", s.bandwidths.eta);
  man.add("filter_radius", s.filter_radius);
  man.add("iterations", s.iterations);
  man.add_real("tolerance", s.tolerance);
  man.add("classes", s.classes);
  man.add_real("learning_rate", s.learning_rate);
  man.add("epochs", s.epochs);
  man.add("batch_size", s.batch_size);
  man.add("seed", static_cast<long long>(s.seed));
  std::string groups;
  const auto group = [&groups](bool on, const char* name) {
    if (!on) return;
    if (!groups.empty()) groups += ',';
    groups += name;
  };
  group(s.train_weights, "weights");
  group(s.train_bandwidths, "bandwidths");
  group(s.train_compatibility, "compatibility");
  group(s.train_unary, "unary");
  if (!groups.empty()) man.add("trainable", groups);
  man.add_real("T", s.truncation);
  man.add("search_radius", s.search_radius);
  man.add("size", s.patch_size);
  man.add("overlap", s.overlap);
  man.add("feature_window", s.feature_window);
  man.add("threads", s.threads);
  man.add("bench_radii", detail::join_ints(s.bench_radii));
}

// Binary building mask from a labeling: the 11-class distance labeling uses
// the l >= 5 rule; two-class labelings take class 1 as building.
inline BinaryMask mask_from_labels(const LabelField& labels) {
  if (labels.classes == 11) return binarize_labels(labels);
  if (labels.classes == 2) {
    BinaryMask m(labels.height, labels.width);
    for (std::size_t i = 0; i < m.bits.size(); ++i) m.bits[i] = labels.labels[i] == 1 ? 1 : 0;
    return m;
  }
  throw ConfigError("no binary building rule for " + std::to_string(labels.classes) +
                    " classes (expected 2 or 11)");
}

// ---------------------------------------------------------------------------
// Stitched inference: the image is tiled with the configured patch size and
// overlap, each tile runs the full fixed-point loop, and overlapping
// marginals are averaged before the argmax. Patches run in a fixed order, so
// results are reproducible and thread-count independent.
// ---------------------------------------------------------------------------
struct StitchResult {
  ProbabilityField marginals;
  LabelField labels;
  int patch_count = 0;
  std::size_t overlap_pixels = 0;
  std::size_t seam_disagreements = 0;  // overlap pixels whose tiles vote differently
  double seam_disagreement_rate = 0.0;
};

namespace detail {

inline UnaryField crop_unary(const UnaryField& src, int r0, int c0, int h, int w) {
  UnaryField out(h, w, src.classes);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      for (int l = 0; l < src.classes; ++l) out.at(r, c, l) = src.psi[src.index(r0 + r, c0 + c, l)];
  return out;
}

}  // namespace detail

inline StitchResult stitched_inference(const FeatureMap& features, const FeatureMap* rgb,
                                       const UnaryField& unary, const CrfParams& params,
                                       int patch_size, int overlap, int threads = 1) {
  const int h = features.height, w = features.width;
  if (unary.height != h || unary.width != w)
    throw ConfigError("stitched_inference: unary and feature shapes differ");
  const int size_h = std::min(patch_size, h), size_w = std::min(patch_size, w);
  const int ov_h = std::min(overlap, size_h - 1), ov_w = std::min(overlap, size_w - 1);
  const std::vector<int> rows = patch_anchors(h, size_h, ov_h);
  const std::vector<int> cols = patch_anchors(w, size_w, ov_w);

  const int classes = unary.classes;
  const std::size_t hw = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  std::vector<double> sum(hw * static_cast<std::size_t>(classes), 0.0);
  std::vector<int> coverage(hw, 0);
  std::vector<int> first_vote(hw, -1);
  std::vector<std::uint8_t> disagree(hw, 0);

  StitchResult result;
  for (int r0 : rows)
    for (int c0 : cols) {
      const FeatureMap f = crop(features, r0, c0, size_h, size_w);
      FeatureMap rgb_patch;
      if (rgb) rgb_patch = crop(*rgb, r0, c0, size_h, size_w);
      const UnaryField u = detail::crop_unary(unary, r0, c0, size_h, size_w);

      const KernelStack stack = build_kernel_stack(f, rgb ? &rgb_patch : nullptr, params, threads);
      const auto [q, trace] = mean_field(u, stack, params, threads);
      const LabelField vote = map_labels(q);

      for (int r = 0; r < size_h; ++r)
        for (int c = 0; c < size_w; ++c) {
          const std::size_t pix = static_cast<std::size_t>(r0 + r) * w + (c0 + c);
          const std::size_t local = static_cast<std::size_t>(r) * size_w + c;
          for (int l = 0; l < classes; ++l)
            sum[pix * classes + l] += q.q[local * classes + l];
          ++coverage[pix];
          const int v = vote.labels[local];
          if (first_vote[pix] < 0) first_vote[pix] = v;
          else if (first_vote[pix] != v) disagree[pix] = 1;
        }
      ++result.patch_count;
    }

  result.marginals = ProbabilityField(h, w, classes);
  for (std::size_t pix = 0; pix < hw; ++pix) {
    const double inv = 1.0 / static_cast<double>(coverage[pix]);
    for (int l = 0; l < classes; ++l)
      result.marginals.q[pix * classes + l] = sum[pix * classes + l] * inv;
    if (coverage[pix] > 1) {
      ++result.overlap_pixels;
      if (disagree[pix]) ++result.seam_disagreements;
    }
  }
  result.labels = map_labels(result.marginals);
  result.seam_disagreement_rate =
      result.overlap_pixels == 0
          ? 0.0
          : static_cast<double>(result.seam_disagreements) / static_cast<double>(result.overlap_pixels);
  return result;
}

// ---------------------------------------------------------------------------
// Dataset directories: one sample per `<stem>_labels.fpt`, with optional
// side-car files `<stem>_features.fpt`, `<stem>_image.fpt` (RGB; also the
// toy-feature source when no feature file exists), and `<stem>_unary.fpt`.
// Features are standardized per patch at load time.
// ---------------------------------------------------------------------------
struct LoadedDataset {
  std::vector<std::string> stems;
  std::vector<TrainPatch> patches;
  bool fixed_unaries = false;
  int feature_dim = 0;
};

inline LoadedDataset load_dataset(const std::string& dir, const RunSettings& s) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError(dir + ": not a directory");

  const std::string suffix = "_labels.fpt";
  std::vector<std::string> stems;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string name = entry.path().filename().string();
    if (name.size() > suffix.size() && name.ends_with(suffix))
      stems.push_back(name.substr(0, name.size() - suffix.size()));
  }
  std::sort(stems.begin(), stems.end());
  if (stems.empty())
    throw ConfigError(dir + ": no dataset samples found (expected <stem>_labels.fpt files)");

  LoadedDataset ds;
  ds.stems = stems;
  int with_unary = 0;
  for (const std::string& stem : stems) {
    const std::string base = (fs::path(dir) / stem).string();
    TrainPatch patch;
    patch.truth = labels_from_tensor(read_tensor(base + "_labels.fpt"), s.classes,
                                     base + "_labels.fpt");

    const bool has_image = fs::exists(base + "_image.fpt");
    if (has_image) {
      patch.rgb = feature_map_from_tensor(read_tensor(base + "_image.fpt"), base + "_image.fpt");
      if (patch.rgb.dim != 3) throw ConfigError(base + "_image.fpt: expected H x W x 3");
    }

    if (fs::exists(base + "_features.fpt")) {
      patch.features =
          feature_map_from_tensor(read_tensor(base + "_features.fpt"), base + "_features.fpt");
    } else if (has_image) {
      patch.features = toy_features(patch.rgb, s.feature_window);
    } else {
      throw ConfigError(base + ": needs either _features.fpt or _image.fpt");
    }
    patch.features = standardize_features(patch.features);

    if (fs::exists(base + "_unary.fpt")) {
      patch.unary = unary_from_tensor(read_tensor(base + "_unary.fpt"), base + "_unary.fpt");
      if (patch.unary.classes != s.classes)
        throw ConfigError(base + "_unary.fpt: classes do not match the configuration");
      ++with_unary;
    }

    const int h = patch.truth.height, w = patch.truth.width;
    if (patch.features.height != h || patch.features.width != w ||
        (has_image && (patch.rgb.height != h || patch.rgb.width != w)) ||
        (patch.unary.classes != 0 && (patch.unary.height != h || patch.unary.width != w)))
      throw ConfigError(base + ": sample arrays disagree on H x W");

    if (ds.feature_dim == 0) ds.feature_dim = patch.features.dim;
    else if (ds.feature_dim != patch.features.dim)
      throw ConfigError(base + ": feature dimension differs from the rest of the dataset");

    ds.patches.push_back(std::move(patch));
  }

  if (with_unary != 0 && with_unary != static_cast<int>(stems.size()))
    throw ConfigError(dir + ": mixed unary side-cars (some samples have _unary.fpt, some not)");
  ds.fixed_unaries = with_unary != 0;
  return ds;
}

// ---------------------------------------------------------------------------
// Subcommands. Each takes resolved paths plus the effective settings, writes
// its outputs and a manifest.txt into the output directory, and returns the
// manifest.
// ---------------------------------------------------------------------------
namespace detail {

inline void ensure_out_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError(dir + ": cannot create output directory (" + ec.message() + ")");
}

}  // namespace detail

struct PreprocessIo {
  std::string image;  // FPT1 H x W x 3
  std::string mask;   // PGM footprint mask
  std::string config;  // config file used, recorded in the manifest
  std::string out;
};

inline RunManifest cmd_preprocess(const PreprocessIo& io, const RunSettings& s) {
  detail::StageClock clock;
  RunManifest man;
  man.add("subcommand", "preprocess");
  man.add("input.config", io.config.empty() ? "none" : io.config);
  man.add("input.image", io.image);
  man.add("input.mask", io.mask);
  append_settings(man, s);
  detail::ensure_out_dir(io.out);

  const FeatureMap image = feature_map_from_tensor(read_tensor(io.image), io.image);
  if (image.dim != 3) throw ConfigError(io.image + ": expected H x W x 3");
  const BinaryMask mask = read_mask_pgm(io.mask);
  if (mask.height != image.height || mask.width != image.width)
    throw ConfigError("image and mask shapes differ");
  man.add_ms("load", clock.lap_ms());

  ShiftEstimate shift;
  try {
    shift = coregister(mask, image, s.search_radius);
  } catch (const NumericError& e) {
    throw NumericError(std::string("coregistration: ") + e.what());
  }
  const BinaryMask corrected = apply_shift(mask, -shift.dy, -shift.dx);
  man.add("shift.dy", shift.dy);
  man.add("shift.dx", shift.dx);
  man.add_real("shift.score", shift.score);
  man.add_ms("coregister", clock.lap_ms());

  const DistanceField distance = signed_distance(corrected, s.truncation);
  const LabelField labels = quantize_distance(distance, s.truncation);
  man.add_ms("distance", clock.lap_ms());

  write_mask_pgm(corrected, io.out + "/corrected_mask.pgm");
  write_tensor(tensor_from_labels(labels), io.out + "/labels.fpt");
  man.add("output.corrected_mask", io.out + "/corrected_mask.pgm");
  man.add("output.labels", io.out + "/labels.fpt");

  // patch grid over the full scene; per-axis sizes shrink for small inputs
  const std::string patch_dir = io.out + "/patches";
  detail::ensure_out_dir(patch_dir);
  const int size_h = std::min(s.patch_size, image.height);
  const int size_w = std::min(s.patch_size, image.width);
  const std::vector<int> rows = patch_anchors(image.height, size_h, std::min(s.overlap, size_h - 1));
  const std::vector<int> cols = patch_anchors(image.width, size_w, std::min(s.overlap, size_w - 1));
  std::string index;
  int k = 0;
  for (int r0 : rows)
    for (int c0 : cols) {
      char stem[32];
      std::snprintf(stem, sizeof(stem), "p%04d", k);
      const std::string base = patch_dir + "/" + stem;
      write_tensor(tensor_from_feature_map(crop(image, r0, c0, size_h, size_w)),
                   base + "_image.fpt");
      write_tensor(tensor_from_labels(crop(labels, r0, c0, size_h, size_w)), base + "_labels.fpt");
      index += std::string(stem) + " " + std::to_string(r0) + " " + std::to_string(c0) + " " +
               std::to_string(size_h) + " " + std::to_string(size_w) + "\n";
      ++k;
    }
  std::ofstream index_out(patch_dir + "/index.txt", std::ios::binary);
  if (!index_out) throw IoError(patch_dir + "/index.txt: cannot open for writing");
  index_out << index;
  index_out.flush();
  man.add("output.patches", patch_dir);
  man.add("patch.count", k);
  man.add_ms("patches", clock.lap_ms());

  man.write(io.out + "/manifest.txt");
  return man;
}

struct InferIo {
  std::string features;    // FPT1 H x W x D (optional if image given)
  std::string image;       // FPT1 H x W x 3 (RGB source / toy-feature input)
  std::string unary;       // FPT1 H x W x C (optional with a feature-head checkpoint)
  std::string checkpoint;  // optional checkpoint directory
  std::string config;  // config file used, recorded in the manifest
  std::string out;
};

inline RunManifest cmd_infer(const InferIo& io, const RunSettings& s) {
  detail::StageClock clock;
  RunManifest man;
  man.add("subcommand", "infer");
  man.add("input.config", io.config.empty() ? "none" : io.config);
  man.add("input.features", io.features.empty() ? "none" : io.features);
  man.add("input.image", io.image.empty() ? "none" : io.image);
  man.add("input.unary", io.unary.empty() ? "none" : io.unary);
  man.add("input.checkpoint", io.checkpoint.empty() ? "none" : io.checkpoint);
  append_settings(man, s);
  detail::ensure_out_dir(io.out);

  Model model;
  if (!io.checkpoint.empty()) {
    model = load_checkpoint(io.checkpoint);
  } else {
    model.params = s.crf_params();
  }

  if (io.features.empty() && io.image.empty())
    throw ConfigError("infer needs --features or --image");
  FeatureMap rgb;
  if (!io.image.empty()) {
    rgb = feature_map_from_tensor(read_tensor(io.image), io.image);
    if (rgb.dim != 3) throw ConfigError(io.image + ": expected H x W x 3");
  }
  FeatureMap features =
      io.features.empty()
          ? toy_features(rgb, s.feature_window)
          : feature_map_from_tensor(read_tensor(io.features), io.features);
  features = standardize_features(features);
  man.add_ms("features", clock.lap_ms());

  UnaryField unary;
  if (!io.unary.empty()) {
    unary = unary_from_tensor(read_tensor(io.unary), io.unary);
  } else if (model.head) {
    unary = model.head->unary(features);
  } else {
    throw ConfigError("infer needs --unary or a checkpoint with a feature head");
  }
  if (unary.classes != model.params.classes)
    throw ConfigError("unary classes (" + std::to_string(unary.classes) +
                      ") do not match the model (" + std::to_string(model.params.classes) + ")");
  if (unary.height != features.height || unary.width != features.width)
    throw ConfigError("unary and feature shapes differ");
  man.add_ms("unary", clock.lap_ms());

  const StitchResult result =
      stitched_inference(features, io.image.empty() ? nullptr : &rgb, unary, model.params,
                         s.patch_size, s.overlap, s.threads);
  man.add("patch.count", result.patch_count);
  man.add("stitch.overlap_pixels", static_cast<long long>(result.overlap_pixels));
  man.add_real("stitch.seam_disagreement", result.seam_disagreement_rate);
  man.add_ms("inference", clock.lap_ms());

  write_tensor(tensor_from_probability(result.marginals), io.out + "/marginals.fpt");
  write_tensor(tensor_from_labels(result.labels), io.out + "/labels.fpt");
  man.add("output.marginals", io.out + "/marginals.fpt");
  man.add("output.labels", io.out + "/labels.fpt");
  if (model.params.classes == 2 || model.params.classes == 11) {
    write_mask_pgm(mask_from_labels(result.labels), io.out + "/mask.pgm");
    man.add("output.mask", io.out + "/mask.pgm");
  } else {
    man.add("output.mask", "none (no binary rule for this class count)");
  }
  man.add_ms("write", clock.lap_ms());

  man.write(io.out + "/manifest.txt");
  return man;
}

struct TrainIo {
  std::string data;        // dataset directory
  std::string checkpoint;  // optional: resume from this checkpoint
  std::string config;  // config file used, recorded in the manifest
  std::string out;
};

inline RunManifest cmd_train(const TrainIo& io, const RunSettings& s) {
  detail::StageClock clock;
  RunManifest man;
  man.add("subcommand", "train");
  man.add("input.config", io.config.empty() ? "none" : io.config);
  man.add("input.data", io.data);
  man.add("input.checkpoint", io.checkpoint.empty() ? "none" : io.checkpoint);
  append_settings(man, s);
  detail::ensure_out_dir(io.out);

  const LoadedDataset ds = load_dataset(io.data, s);
  man.add("dataset.samples", static_cast<long long>(ds.patches.size()));
  man.add("dataset.feature_dim", ds.feature_dim);
  man.add_ms("load", clock.lap_ms());

  Model model;
  if (!io.checkpoint.empty()) {
    model = load_checkpoint(io.checkpoint);
    if (model.params.classes != s.classes)
      throw ConfigError("checkpoint classes (" + std::to_string(model.params.classes) +
                        ") do not match the configuration (" + std::to_string(s.classes) + ")");
    if (ds.fixed_unaries && model.head)
      throw ConfigError("dataset carries fixed unaries but the checkpoint has a feature head");
    if (!ds.fixed_unaries && !model.head)
      throw ConfigError("dataset has no unaries and the checkpoint has no feature head");
  } else {
    model.params = s.crf_params();
    if (!ds.fixed_unaries) model.head = LogisticUnary(s.classes, ds.feature_dim);
  }

  const TrainConfig cfg = train_config(s);
  const TrainResult result = train(std::move(model), ds.patches, cfg, s.threads);
  man.add_ms("train", clock.lap_ms());

  save_checkpoint(result.model, io.out + "/checkpoint");
  std::string csv = "epoch,loss\n";
  for (std::size_t e = 0; e < result.epoch_loss.size(); ++e) {
    char line[64];
    std::snprintf(line, sizeof(line), "%zu,%.10g\n", e, result.epoch_loss[e]);
    csv += line;
  }
  std::ofstream csv_out(io.out + "/loss_history.csv", std::ios::binary);
  if (!csv_out) throw IoError(io.out + "/loss_history.csv: cannot open for writing");
  csv_out << csv;
  csv_out.flush();
  man.add("output.checkpoint", io.out + "/checkpoint");
  man.add("output.loss_history", io.out + "/loss_history.csv");
  if (!result.epoch_loss.empty()) {
    man.add_real("loss.first", result.epoch_loss.front());
    man.add_real("loss.final", result.epoch_loss.back());
  }
  man.add_ms("write", clock.lap_ms());

  man.write(io.out + "/manifest.txt");
  return man;
}

struct EvalIo {
  std::string pred;   // mask/label file or directory of them
  std::string truth;  // matching file or directory
  std::string config;  // config file used, recorded in the manifest
  std::string out;
};

namespace detail {

inline std::vector<std::string> mask_files(const std::string& path) {
  namespace fs = std::filesystem;
  if (fs::is_directory(path)) {
    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(path)) {
      if (!entry.is_regular_file()) continue;
      const std::string ext = entry.path().extension().string();
      if (ext == ".pgm" || ext == ".fpt") files.push_back(entry.path().string());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw ConfigError(path + ": no .pgm or .fpt files to evaluate");
    return files;
  }
  if (!fs::exists(path)) throw IoError(path + ": no such file");
  return {path};
}

inline BinaryMask load_mask_any(const std::string& path, int classes) {
  if (path.ends_with(".pgm")) return read_mask_pgm(path);
  return mask_from_labels(labels_from_tensor(read_tensor(path), classes, path));
}

}  // namespace detail

inline RunManifest cmd_eval(const EvalIo& io, const RunSettings& s) {
  detail::StageClock clock;
  RunManifest man;
  man.add("subcommand", "eval");
  man.add("input.config", io.config.empty() ? "none" : io.config);
  man.add("input.pred", io.pred);
  man.add("input.truth", io.truth);
  append_settings(man, s);
  detail::ensure_out_dir(io.out);

  const std::vector<std::string> pred_files = detail::mask_files(io.pred);
  const std::vector<std::string> truth_files = detail::mask_files(io.truth);
  if (pred_files.size() != truth_files.size())
    throw ConfigError("prediction list (" + std::to_string(pred_files.size()) +
                      ") and reference list (" + std::to_string(truth_files.size()) +
                      ") differ in length");

  std::vector<BinaryMask> pred, truth;
  std::vector<std::string> names;
  for (std::size_t i = 0; i < pred_files.size(); ++i) {
    pred.push_back(detail::load_mask_any(pred_files[i], s.classes));
    truth.push_back(detail::load_mask_any(truth_files[i], s.classes));
    names.push_back(std::filesystem::path(pred_files[i]).stem().string());
  }
  man.add("patch.count", static_cast<long long>(pred.size()));
  man.add_ms("load", clock.lap_ms());

  const Evaluation ev = evaluate_run(pred, truth, &names);
  std::ofstream csv_out(io.out + "/metrics.csv", std::ios::binary);
  if (!csv_out) throw IoError(io.out + "/metrics.csv: cannot open for writing");
  csv_out << ev.csv();
  csv_out.flush();
  man.add("output.metrics", io.out + "/metrics.csv");
  man.add("pooled.tp", static_cast<long long>(ev.pooled.tp));
  man.add("pooled.fp", static_cast<long long>(ev.pooled.fp));
  man.add("pooled.fn", static_cast<long long>(ev.pooled.fn));
  man.add("pooled.tn", static_cast<long long>(ev.pooled.tn));
  man.add_real("total.iou", ev.total.iou);
  man.add("degenerate", ev.total.degenerate ? "yes" : "no");
  man.add_ms("evaluate", clock.lap_ms());

  man.write(io.out + "/manifest.txt");
  return man;
}

struct BenchIo {
  std::string data;        // dataset directory (fixed unaries or head checkpoint)
  std::string checkpoint;  // optional checkpoint directory
  std::string config;  // config file used, recorded in the manifest
  std::string out;
};

struct BenchRow {
  int radius = 0;
  int classes = 0;
  int height = 0;
  int width = 0;
  double iou = 0.0;
  double ms = 0.0;
};

// One full inference pass over the dataset per radius, repeated three times
// with the median wall time reported; the segmentation result itself is
// deterministic across repeats.
inline std::vector<BenchRow> bench_sweep(const Model& model, const LoadedDataset& ds,
                                         const std::vector<int>& radii, int threads = 1) {
  std::vector<UnaryField> unaries;
  for (std::size_t i = 0; i < ds.patches.size(); ++i)
    unaries.push_back(model_unary(model, ds.patches[i]));

  std::vector<BenchRow> rows;
  for (int r : radii) {
    CrfParams params = model.params;
    params.filter_radius = r;
    params.validate();

    std::vector<BinaryMask> pred, truth;
    const auto pass = [&](bool keep) {
      if (keep) {
        pred.clear();
        truth.clear();
      }
      for (std::size_t i = 0; i < ds.patches.size(); ++i) {
        const TrainPatch& patch = ds.patches[i];
        const FeatureMap* rgb = patch.rgb.dim == 3 ? &patch.rgb : nullptr;
        const KernelStack stack = build_kernel_stack(patch.features, rgb, params, threads);
        const auto [q, trace] = mean_field(unaries[i], stack, params, threads);
        if (keep) {
          pred.push_back(mask_from_labels(map_labels(q)));
          truth.push_back(mask_from_labels(patch.truth));
        }
      }
    };

    std::vector<double> times;
    for (int rep = 0; rep < 3; ++rep) {
      detail::StageClock clock;
      pass(rep == 0);
      times.push_back(clock.lap_ms());
    }
    std::sort(times.begin(), times.end());

    BenchRow row;
    row.radius = r;
    row.classes = model.params.classes;
    row.height = ds.patches.front().features.height;
    row.width = ds.patches.front().features.width;
    row.iou = evaluate_run(pred, truth).total.iou;
    row.ms = times[1];
    rows.push_back(row);
  }
  return rows;
}

inline RunManifest cmd_bench(const BenchIo& io, const RunSettings& s) {
  detail::StageClock clock;
  RunManifest man;
  man.add("subcommand", "bench");
  man.add("input.config", io.config.empty() ? "none" : io.config);
  man.add("input.data", io.data);
  man.add("input.checkpoint", io.checkpoint.empty() ? "none" : io.checkpoint);
  append_settings(man, s);
  detail::ensure_out_dir(io.out);

  const LoadedDataset ds = load_dataset(io.data, s);
  Model model;
  if (!io.checkpoint.empty()) {
    model = load_checkpoint(io.checkpoint);
    if (model.params.classes != s.classes)
      throw ConfigError("checkpoint classes do not match the configuration");
  } else {
    model.params = s.crf_params();
  }
  if (!ds.fixed_unaries && !model.head)
    throw ConfigError("bench needs per-sample unaries or a checkpoint with a feature head");
  man.add("dataset.samples", static_cast<long long>(ds.patches.size()));
  man.add_ms("load", clock.lap_ms());

  const std::vector<BenchRow> rows = bench_sweep(model, ds, s.bench_radii, s.threads);
  std::string csv = "r,classes,height,width,iou,ms\n";
  for (const BenchRow& row : rows) {
    char line[128];
    std::snprintf(line, sizeof(line), "%d,%d,%d,%d,%.10g,%.3f\n", row.radius, row.classes,
                  row.height, row.width, row.iou, row.ms);
    csv += line;
  }
  std::ofstream csv_out(io.out + "/bench.csv", std::ios::binary);
  if (!csv_out) throw IoError(io.out + "/bench.csv: cannot open for writing");
  csv_out << csv;
  csv_out.flush();
  man.add("output.bench", io.out + "/bench.csv");
  man.add_ms("sweep", clock.lap_ms());

  man.write(io.out + "/manifest.txt");
  return man;
}

}  // namespace fpcrf
