#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "fpcrf/backprop.hpp"
#include "fpcrf/errors.hpp"
#include "fpcrf/features.hpp"
#include "fpcrf/io.hpp"
#include "fpcrf/rng.hpp"
#include "fpcrf/types.hpp"

namespace fpcrf {

// ---------------------------------------------------------------------------
// Model: the trainable state. When `head` is set, unaries are produced from
// the patch features by the logistic head (and trained jointly); otherwise
// each patch carries a fixed unary field.
// ---------------------------------------------------------------------------
struct Model {
  CrfParams params;
  std::optional<LogisticUnary> head;
};

struct TrainPatch {
  FeatureMap features;  // standardized, drives the kernels (and the head, if any)
  FeatureMap rgb;       // H x W x 3 when the appearance kernel is active, else dim 0
  UnaryField unary;     // fixed psi_u; ignored when the model has a head
  LabelField truth;
};

struct TrainConfig {
  double learning_rate = 0.0001;
  int epochs = 20;
  int batch_size = 4;
  std::uint64_t seed = 0;
  bool train_weights = true;
  bool train_bandwidths = true;
  bool train_compatibility = true;
  bool train_unary = true;
};

inline TrainConfig train_config(const RunSettings& s) {
  TrainConfig c;
  c.learning_rate = s.learning_rate;
  c.epochs = s.epochs;
  c.batch_size = s.batch_size;
  c.seed = s.seed;
  c.train_weights = s.train_weights;
  c.train_bandwidths = s.train_bandwidths;
  c.train_compatibility = s.train_compatibility;
  c.train_unary = s.train_unary;
  return c;
}

struct ModelGradients {
  std::vector<double> d_weights;  // per active kernel
  Bandwidths d_bandwidths{0.0, 0.0, 0.0, 0.0, 0.0, 0.0};
  std::vector<double> d_compatibility;  // classes x classes
  std::vector<double> d_head_weights;   // filled only when the model has a head
  std::vector<double> d_head_bias;
};

namespace detail {

struct BandwidthMember {
  double Bandwidths::* field;
  const char* name;
};

inline const std::array<BandwidthMember, 6>& bandwidth_members() {
  static const std::array<BandwidthMember, 6> members = {{
      {&Bandwidths::alpha, "theta_alpha"},
      {&Bandwidths::beta, "theta_beta"},
      {&Bandwidths::gamma, "theta_gamma"},
      {&Bandwidths::delta, "theta_delta"},
      {&Bandwidths::zeta, "theta_zeta"},
      {&Bandwidths::eta, "theta_eta"},
  }};
  return members;
}

// Which bandwidths a kernel kind actually reads; the rest stay frozen at zero
// gradient no matter what.
inline std::vector<double Bandwidths::*> bandwidths_of(KernelKind kind) {
  switch (kind) {
    case KernelKind::Appearance:
      return {&Bandwidths::alpha, &Bandwidths::beta};
    case KernelKind::Smooth:
      return {&Bandwidths::gamma};
    case KernelKind::FeatureDifference:
      return {&Bandwidths::delta};
    case KernelKind::FeatureSpatial:
      return {&Bandwidths::zeta, &Bandwidths::eta};
    case KernelKind::FeatureCosine:
      return {};
  }
  return {};
}

}  // namespace detail

// The unary field a model assigns to a patch.
inline UnaryField model_unary(const Model& model, const TrainPatch& patch) {
  if (model.head) return model.head->unary(patch.features);
  if (patch.unary.height != patch.features.height || patch.unary.width != patch.features.width)
    throw ConfigError("patch unary does not match the feature map shape");
  if (patch.unary.classes != model.params.classes)
    throw ConfigError("patch unary classes do not match the model");
  return patch.unary;
}

// Mean loss over a mini-batch plus averaged gradients for every parameter
// group. Patches are processed in order and accumulated serially, so the
// result does not depend on the thread count.
inline double loss_and_gradients(const Model& model, const std::vector<const TrainPatch*>& batch,
                                 const TrainConfig& cfg, ModelGradients& out, int threads = 1) {
  if (batch.empty()) throw ConfigError("loss_and_gradients: empty mini-batch");
  const int h = batch.front()->features.height;
  const int w = batch.front()->features.width;
  for (const TrainPatch* p : batch)
    if (p->features.height != h || p->features.width != w)
      throw ConfigError("loss_and_gradients: mini-batch mixes patch sizes");

  const int classes = model.params.classes;
  out.d_weights.assign(model.params.kernel_kinds.size(), 0.0);
  out.d_bandwidths = Bandwidths{0.0, 0.0, 0.0, 0.0, 0.0, 0.0};
  out.d_compatibility.assign(static_cast<std::size_t>(classes) * classes, 0.0);
  if (model.head) {
    out.d_head_weights.assign(model.head->weights.size(), 0.0);
    out.d_head_bias.assign(model.head->bias.size(), 0.0);
  } else {
    out.d_head_weights.clear();
    out.d_head_bias.clear();
  }

  double total = 0.0;
  PatchGradients pg;
  std::vector<double> head_dw, head_db;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const TrainPatch& patch = *batch[b];
    const FeatureMap* rgb = (patch.rgb.dim == 3) ? &patch.rgb : nullptr;
    const UnaryField unary = model_unary(model, patch);
    const KernelStack stack = build_kernel_stack(patch.features, rgb, model.params, threads);
    const UnrolledForward fwd = unrolled_forward(unary, stack, model.params, threads);
    const double loss = backprop_patch(unary, stack, fwd, model.params, patch.truth, pg,
                                       &patch.features, rgb, cfg.train_bandwidths, threads);
    if (!std::isfinite(loss))
      throw NumericError("loss became non-finite on mini-batch patch " + std::to_string(b));
    total += loss;

    for (std::size_t m = 0; m < out.d_weights.size(); ++m) out.d_weights[m] += pg.d_weights[m];
    for (const auto& member : detail::bandwidth_members())
      out.d_bandwidths.*(member.field) += pg.d_bandwidths.*(member.field);
    for (std::size_t x = 0; x < out.d_compatibility.size(); ++x)
      out.d_compatibility[x] += pg.d_compatibility[x];
    if (model.head) {
      model.head->backward(patch.features, unary, pg.d_unary, head_dw, head_db);
      for (std::size_t x = 0; x < head_dw.size(); ++x) out.d_head_weights[x] += head_dw[x];
      for (std::size_t x = 0; x < head_db.size(); ++x) out.d_head_bias[x] += head_db[x];
    }
  }

  const double inv = 1.0 / static_cast<double>(batch.size());
  for (double& v : out.d_weights) v *= inv;
  for (const auto& member : detail::bandwidth_members()) out.d_bandwidths.*(member.field) *= inv;
  for (double& v : out.d_compatibility) v *= inv;
  for (double& v : out.d_head_weights) v *= inv;
  for (double& v : out.d_head_bias) v *= inv;
  return total * inv;
}

// Plain SGD. Bandwidths step in log-space — theta <- theta * exp(-lr * theta
// * d theta), the pushforward of a gradient step on log(theta) — which keeps
// them strictly positive. Groups whose flag is off are left untouched.
inline void sgd_step(Model& model, const ModelGradients& g, double learning_rate,
                     const TrainConfig& cfg) {
  if (cfg.train_weights)
    for (std::size_t m = 0; m < model.params.kernel_weights.size(); ++m)
      model.params.kernel_weights[m] -= learning_rate * g.d_weights[m];
  if (cfg.train_bandwidths)
    for (const auto& member : detail::bandwidth_members()) {
      double& theta = model.params.bandwidths.*(member.field);
      theta *= std::exp(-learning_rate * theta * (g.d_bandwidths.*(member.field)));
    }
  if (cfg.train_compatibility)
    for (std::size_t x = 0; x < model.params.compatibility.size(); ++x)
      model.params.compatibility[x] -= learning_rate * g.d_compatibility[x];
  if (cfg.train_unary && model.head) {
    for (std::size_t x = 0; x < model.head->weights.size(); ++x)
      model.head->weights[x] -= learning_rate * g.d_head_weights[x];
    for (std::size_t x = 0; x < model.head->bias.size(); ++x)
      model.head->bias[x] -= learning_rate * g.d_head_bias[x];
  }
}

struct TrainResult {
  Model model;
  std::vector<double> epoch_loss;  // mean patch loss per epoch
};

// Epochs of shuffled mini-batch SGD. The shuffle draws from one SplitMix64
// stream seeded with cfg.seed, so a given (dataset, config) pair always
// produces the same trajectory. Consecutive shuffled patches join a batch
// only while they share H x W; a size change closes the batch early.
inline TrainResult train(Model model, const std::vector<TrainPatch>& dataset,
                         const TrainConfig& cfg, int threads = 1) {
  if (dataset.empty()) throw ConfigError("train: empty dataset");
  if (cfg.epochs < 0) throw ConfigError("train: epochs must be >= 0");
  if (cfg.batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (!(cfg.learning_rate > 0)) throw ConfigError("train: learning_rate must be > 0");
  model.params.validate();

  TrainResult result{std::move(model), {}};
  const std::size_t n = dataset.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  SplitMix64 rng(cfg.seed);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = n - 1; i > 0; --i) {
      const std::size_t j = rng.next_below(i + 1);
      std::swap(order[i], order[j]);
    }

    double epoch_total = 0.0;
    std::size_t pos = 0;
    ModelGradients g;
    while (pos < n) {
      std::vector<const TrainPatch*> batch{&dataset[order[pos]]};
      ++pos;
      while (pos < n && batch.size() < static_cast<std::size_t>(cfg.batch_size) &&
             dataset[order[pos]].features.height == batch.front()->features.height &&
             dataset[order[pos]].features.width == batch.front()->features.width) {
        batch.push_back(&dataset[order[pos]]);
        ++pos;
      }
      const double loss = loss_and_gradients(result.model, batch, cfg, g, threads);
      sgd_step(result.model, g, cfg.learning_rate, cfg);
      epoch_total += loss * static_cast<double>(batch.size());
    }
    result.epoch_loss.push_back(epoch_total / static_cast<double>(n));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking. Each scalar in every trainable group
// is perturbed by +/- epsilon, the loss is recomputed from scratch (kernel
// stack included, so the chain through the kernel construction is covered),
// and the central difference is compared against the analytic gradient.
// ---------------------------------------------------------------------------
struct GradientEntry {
  std::string name;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;
};

struct GradientReport {
  std::vector<GradientEntry> entries;
  double max_rel_err = 0.0;

  bool all_within(double tol) const { return max_rel_err < tol; }
};

inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

inline GradientReport check_gradients(const Model& model, const TrainPatch& patch,
                                      const TrainConfig& cfg, double epsilon = 1e-3,
                                      int threads = 1) {
  ModelGradients analytic;
  const std::vector<const TrainPatch*> batch{&patch};
  loss_and_gradients(model, batch, cfg, analytic, threads);

  const auto loss_of = [&](const Model& m) {
    const FeatureMap* rgb = (patch.rgb.dim == 3) ? &patch.rgb : nullptr;
    const UnaryField unary = model_unary(m, patch);
    const KernelStack stack = build_kernel_stack(patch.features, rgb, m.params, threads);
    const UnrolledForward fwd = unrolled_forward(unary, stack, m.params, threads);
    return nll_loss(fwd.final_q(), patch.truth);
  };

  GradientReport report;
  const auto record = [&](const std::string& name, double analytic_value,
                          const std::function<void(Model&, double)>& nudge) {
    Model plus = model;
    nudge(plus, epsilon);
    Model minus = model;
    nudge(minus, -epsilon);
    const double numeric = (loss_of(plus) - loss_of(minus)) / (2.0 * epsilon);
    GradientEntry e{name, analytic_value, numeric, relative_error(analytic_value, numeric)};
    report.max_rel_err = std::max(report.max_rel_err, e.rel_err);
    report.entries.push_back(std::move(e));
  };

  if (cfg.train_weights)
    for (std::size_t m = 0; m < model.params.kernel_kinds.size(); ++m)
      record("w(" + std::string(kernel_name(model.params.kernel_kinds[m])) + ")",
             analytic.d_weights[m],
             [m](Model& mod, double eps) { mod.params.kernel_weights[m] += eps; });

  if (cfg.train_bandwidths)
    for (std::size_t m = 0; m < model.params.kernel_kinds.size(); ++m)
      for (double Bandwidths::* field : detail::bandwidths_of(model.params.kernel_kinds[m])) {
        std::string name;
        for (const auto& member : detail::bandwidth_members())
          if (member.field == field) name = member.name;
        record(name, analytic.d_bandwidths.*field,
               [field](Model& mod, double eps) { mod.params.bandwidths.*field += eps; });
      }

  if (cfg.train_compatibility) {
    const int classes = model.params.classes;
    for (int l = 0; l < classes; ++l)
      for (int lp = 0; lp < classes; ++lp) {
        const std::size_t x = static_cast<std::size_t>(l) * classes + lp;
        record("mu(" + std::to_string(l) + "," + std::to_string(lp) + ")",
               analytic.d_compatibility[x],
               [x](Model& mod, double eps) { mod.params.compatibility[x] += eps; });
      }
  }

  if (cfg.train_unary && model.head) {
    for (int l = 0; l < model.head->classes; ++l)
      for (int d = 0; d < model.head->dim; ++d) {
        const std::size_t x = static_cast<std::size_t>(l) * model.head->dim + d;
        record("head_w(" + std::to_string(l) + "," + std::to_string(d) + ")",
               analytic.d_head_weights[x],
               [x](Model& mod, double eps) { mod.head->weights[x] += eps; });
      }
    for (int l = 0; l < model.head->classes; ++l)
      record("head_b(" + std::to_string(l) + ")", analytic.d_head_bias[static_cast<std::size_t>(l)],
             [l](Model& mod, double eps) { mod.head->bias[static_cast<std::size_t>(l)] += eps; });
  }

  return report;
}

// ---------------------------------------------------------------------------
// Checkpoints: a directory holding a key=value manifest plus one tensor file
// per parameter group. Values are stored as float32, so a freshly loaded
// model is float-rounded but loads identically every time.
// ---------------------------------------------------------------------------
inline std::string kernel_list_name(const std::vector<KernelKind>& kinds) {
  if (kinds.empty()) return "none";
  std::string out;
  for (std::size_t i = 0; i < kinds.size(); ++i) {
    if (i) out += '+';
    out += kernel_name(kinds[i]);
  }
  return out;
}

namespace detail {

inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline Tensor tensor_1d(const std::vector<double>& v) {
  Tensor t;
  t.dims = {static_cast<std::uint32_t>(v.size())};
  t.data.assign(v.begin(), v.end());
  return t;
}

inline Tensor tensor_2d(const std::vector<double>& v, int rows, int cols) {
  Tensor t;
  t.dims = {static_cast<std::uint32_t>(rows), static_cast<std::uint32_t>(cols)};
  t.data.assign(v.begin(), v.end());
  return t;
}

}  // namespace detail

inline void save_checkpoint(const Model& model, const std::string& dir) {
  model.params.validate();
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError(dir + ": cannot create checkpoint directory (" + ec.message() + ")");

  const CrfParams& p = model.params;
  std::ostringstream manifest;
  manifest << "format = fpcrf-checkpoint-v1\n";
  manifest << "classes = " << p.classes << "\n";
  manifest << "kernels = " << kernel_list_name(p.kernel_kinds) << "\n";
  manifest << "filter_radius = " << p.filter_radius << "\n";
  manifest << "iterations = " << p.iterations << "\n";
  manifest << "tolerance = " << detail::format_double(p.tolerance) << "\n";
  manifest << "has_head = " << (model.head ? 1 : 0) << "\n";

  const std::string manifest_path = dir + "/manifest.txt";
  std::ofstream out(manifest_path, std::ios::binary);
  if (!out) throw IoError(manifest_path + ": cannot open for writing");
  out << manifest.str();
  if (!out.flush()) throw IoError(manifest_path + ": write failed");

  write_tensor(detail::tensor_2d(p.compatibility, p.classes, p.classes), dir + "/mu.fpt");
  const std::vector<double> bw = {p.bandwidths.alpha, p.bandwidths.beta,  p.bandwidths.gamma,
                                  p.bandwidths.delta, p.bandwidths.zeta, p.bandwidths.eta};
  write_tensor(detail::tensor_1d(bw), dir + "/bandwidths.fpt");
  if (!p.kernel_kinds.empty())
    write_tensor(detail::tensor_1d(p.kernel_weights), dir + "/kernel_weights.fpt");
  if (model.head) {
    write_tensor(detail::tensor_2d(model.head->weights, model.head->classes, model.head->dim),
                 dir + "/head_weights.fpt");
    write_tensor(detail::tensor_1d(model.head->bias), dir + "/head_bias.fpt");
  }
}

inline Model load_checkpoint(const std::string& dir) {
  const std::string manifest_path = dir + "/manifest.txt";
  std::string format, kernels_value;
  long long classes = -1, filter_radius = -1, iterations = -1, has_head = -1;
  double tolerance = -1.0;
  bool seen_tolerance = false;

  for (const KvLine& kv : read_kv_file(manifest_path)) {
    const std::string where = manifest_path + ":" + std::to_string(kv.line);
    const auto integer = [&](long long lo) {
      try {
        std::size_t used = 0;
        const long long v = std::stoll(kv.value, &used);
        if (used != kv.value.size() || v < lo) throw std::invalid_argument("");
        return v;
      } catch (const std::exception&) {
        throw ConfigError(where + ": invalid integer '" + kv.value + "'");
      }
    };
    if (kv.key == "format") {
      format = kv.value;
    } else if (kv.key == "classes") {
      classes = integer(2);
    } else if (kv.key == "kernels") {
      kernels_value = kv.value;
    } else if (kv.key == "filter_radius") {
      filter_radius = integer(2);
    } else if (kv.key == "iterations") {
      iterations = integer(1);
    } else if (kv.key == "tolerance") {
      try {
        std::size_t used = 0;
        tolerance = std::stod(kv.value, &used);
        if (used != kv.value.size() || tolerance < 0) throw std::invalid_argument("");
      } catch (const std::exception&) {
        throw ConfigError(where + ": invalid tolerance '" + kv.value + "'");
      }
      seen_tolerance = true;
    } else if (kv.key == "has_head") {
      has_head = integer(0);
      if (has_head > 1) throw ConfigError(where + ": has_head must be 0 or 1");
    } else {
      throw ConfigError(where + ": unknown checkpoint key '" + kv.key + "'");
    }
  }

  if (format != "fpcrf-checkpoint-v1")
    throw ConfigError(manifest_path + ": not a recognized checkpoint manifest");
  if (classes < 0 || kernels_value.empty() || filter_radius < 0 || iterations < 0 ||
      !seen_tolerance || has_head < 0)
    throw ConfigError(manifest_path + ": missing checkpoint keys");

  Model model;
  CrfParams& p = model.params;
  p.kernel_kinds = parse_kernel_list(kernels_value, manifest_path);
  p.classes = static_cast<int>(classes);
  p.filter_radius = static_cast<int>(filter_radius);
  p.iterations = static_cast<int>(iterations);
  p.tolerance = tolerance;

  const Tensor mu = read_tensor(dir + "/mu.fpt");
  if (mu.dims != std::vector<std::uint32_t>{static_cast<std::uint32_t>(p.classes),
                                            static_cast<std::uint32_t>(p.classes)})
    throw ConfigError(dir + "/mu.fpt: expected a classes x classes matrix");
  p.compatibility.assign(mu.data.begin(), mu.data.end());

  const Tensor bw = read_tensor(dir + "/bandwidths.fpt");
  if (bw.dims != std::vector<std::uint32_t>{6})
    throw ConfigError(dir + "/bandwidths.fpt: expected 6 entries");
  p.bandwidths.alpha = bw.data[0];
  p.bandwidths.beta = bw.data[1];
  p.bandwidths.gamma = bw.data[2];
  p.bandwidths.delta = bw.data[3];
  p.bandwidths.zeta = bw.data[4];
  p.bandwidths.eta = bw.data[5];

  if (p.kernel_kinds.empty()) {
    p.kernel_weights.clear();
  } else {
    const Tensor w = read_tensor(dir + "/kernel_weights.fpt");
    if (w.dims != std::vector<std::uint32_t>{static_cast<std::uint32_t>(p.kernel_kinds.size())})
      throw ConfigError(dir + "/kernel_weights.fpt: expected one weight per kernel");
    p.kernel_weights.assign(w.data.begin(), w.data.end());
  }

  if (has_head == 1) {
    const Tensor hw = read_tensor(dir + "/head_weights.fpt");
    if (hw.dims.size() != 2 || hw.dims[0] != static_cast<std::uint32_t>(p.classes))
      throw ConfigError(dir + "/head_weights.fpt: expected a classes x feature_dim matrix");
    const Tensor hb = read_tensor(dir + "/head_bias.fpt");
    if (hb.dims != std::vector<std::uint32_t>{static_cast<std::uint32_t>(p.classes)})
      throw ConfigError(dir + "/head_bias.fpt: expected one bias per class");
    LogisticUnary head(p.classes, static_cast<int>(hw.dims[1]));
    head.weights.assign(hw.data.begin(), hw.data.end());
    head.bias.assign(hb.data.begin(), hb.data.end());
    model.head = std::move(head);
  }

  p.validate();
  return model;
}

}  // namespace fpcrf
