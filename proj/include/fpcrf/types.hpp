#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "fpcrf/errors.hpp"

namespace fpcrf {

// ---------------------------------------------------------------------------
// Tensor: dense row-major float grid, the on-disk carrier (FPT1 format).
// Last dimension varies fastest. Compute-side types below hold doubles.
// ---------------------------------------------------------------------------
struct Tensor {
  std::vector<std::uint32_t> dims;
  std::vector<float> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::uint32_t> d) : dims(std::move(d)) {
    data.assign(numel(), 0.0f);
  }

  std::size_t numel() const {
    std::size_t n = dims.empty() ? 0 : 1;
    for (auto d : dims) n *= d;
    return n;
  }

  // convenience for the common H x W x D layout
  float& at3(int r, int c, int d) {
    return data[(static_cast<std::size_t>(r) * dims[1] + static_cast<std::size_t>(c)) * dims[2] +
                static_cast<std::size_t>(d)];
  }
  float at3(int r, int c, int d) const {
    return data[(static_cast<std::size_t>(r) * dims[1] + static_cast<std::size_t>(c)) * dims[2] +
                static_cast<std::size_t>(d)];
  }

  bool all_finite() const {
    for (float v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

// ---------------------------------------------------------------------------
// FeatureMap: H x W x D doubles, the in-memory form of feature embeddings,
// RGB planes (D = 3) and scalar planes (D = 1).
// ---------------------------------------------------------------------------
struct FeatureMap {
  int height = 0;
  int width = 0;
  int dim = 1;
  std::vector<double> data;

  FeatureMap() = default;
  FeatureMap(int h, int w, int d)
      : height(h), width(w), dim(d),
        data(static_cast<std::size_t>(h) * static_cast<std::size_t>(w) * static_cast<std::size_t>(d),
             0.0) {}

  std::size_t pixel_index(int r, int c) const {
    return (static_cast<std::size_t>(r) * static_cast<std::size_t>(width) +
            static_cast<std::size_t>(c)) *
           static_cast<std::size_t>(dim);
  }
  double& at(int r, int c, int d) { return data[pixel_index(r, c) + static_cast<std::size_t>(d)]; }
  double at(int r, int c, int d) const {
    return data[pixel_index(r, c) + static_cast<std::size_t>(d)];
  }
  const double* pixel(int r, int c) const { return data.data() + pixel_index(r, c); }
};

// ---------------------------------------------------------------------------
// UnaryField: psi_u(i, l), per-pixel negative log-probabilities (nats).
// ---------------------------------------------------------------------------
struct ProbabilityField;

struct UnaryField {
  int height = 0;
  int width = 0;
  int classes = 0;
  std::vector<double> psi;  // (r*W + c)*C + l

  UnaryField() = default;
  UnaryField(int h, int w, int c)
      : height(h), width(w), classes(c),
        psi(static_cast<std::size_t>(h) * static_cast<std::size_t>(w) * static_cast<std::size_t>(c),
            0.0) {}

  std::size_t index(int r, int c, int l) const {
    return (static_cast<std::size_t>(r) * static_cast<std::size_t>(width) +
            static_cast<std::size_t>(c)) *
               static_cast<std::size_t>(classes) +
           static_cast<std::size_t>(l);
  }
  double& at(int r, int c, int l) { return psi[index(r, c, l)]; }
  double at(int r, int c, int l) const { return psi[index(r, c, l)]; }

  std::size_t pixels() const {
    return static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
  }

  static UnaryField from_probabilities(const ProbabilityField& p);
};

// ---------------------------------------------------------------------------
// ProbabilityField: Q_i(l), per-pixel marginals summing to one.
// ---------------------------------------------------------------------------
struct ProbabilityField {
  int height = 0;
  int width = 0;
  int classes = 0;
  std::vector<double> q;

  ProbabilityField() = default;
  ProbabilityField(int h, int w, int c)
      : height(h), width(w), classes(c),
        q(static_cast<std::size_t>(h) * static_cast<std::size_t>(w) * static_cast<std::size_t>(c),
          0.0) {}

  std::size_t index(int r, int c, int l) const {
    return (static_cast<std::size_t>(r) * static_cast<std::size_t>(width) +
            static_cast<std::size_t>(c)) *
               static_cast<std::size_t>(classes) +
           static_cast<std::size_t>(l);
  }
  double& at(int r, int c, int l) { return q[index(r, c, l)]; }
  double at(int r, int c, int l) const { return q[index(r, c, l)]; }

  std::size_t pixels() const {
    return static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
  }

  // max over pixels of |sum_l Q - 1|
  double normalization_error() const {
    double worst = 0.0;
    const std::size_t n = pixels();
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (int l = 0; l < classes; ++l) s += q[i * static_cast<std::size_t>(classes) + l];
      worst = std::max(worst, std::abs(s - 1.0));
    }
    return worst;
  }
};

// Probabilities are clamped before the log so psi stays finite even for
// underflowed softmax outputs.
inline constexpr double kProbabilityClamp = 1e-12;

inline UnaryField UnaryField::from_probabilities(const ProbabilityField& p) {
  UnaryField u(p.height, p.width, p.classes);
  for (std::size_t i = 0; i < p.q.size(); ++i)
    u.psi[i] = -std::log(std::max(p.q[i], kProbabilityClamp));
  return u;
}

// ---------------------------------------------------------------------------
// LabelField: per-pixel integers in {0, ..., classes-1}.
// ---------------------------------------------------------------------------
struct LabelField {
  int height = 0;
  int width = 0;
  int classes = 0;
  std::vector<int> labels;

  LabelField() = default;
  LabelField(int h, int w, int c)
      : height(h), width(w), classes(c),
        labels(static_cast<std::size_t>(h) * static_cast<std::size_t>(w), 0) {}

  std::size_t index(int r, int c) const {
    return static_cast<std::size_t>(r) * static_cast<std::size_t>(width) +
           static_cast<std::size_t>(c);
  }
  int& at(int r, int c) { return labels[index(r, c)]; }
  int at(int r, int c) const { return labels[index(r, c)]; }
};

// ---------------------------------------------------------------------------
// BinaryMask: 0 = non-building, 1 = building.
// ---------------------------------------------------------------------------
struct BinaryMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> bits;

  BinaryMask() = default;
  BinaryMask(int h, int w)
      : height(h), width(w), bits(static_cast<std::size_t>(h) * static_cast<std::size_t>(w), 0) {}

  std::size_t index(int r, int c) const {
    return static_cast<std::size_t>(r) * static_cast<std::size_t>(width) +
           static_cast<std::size_t>(c);
  }
  std::uint8_t& at(int r, int c) { return bits[index(r, c)]; }
  std::uint8_t at(int r, int c) const { return bits[index(r, c)]; }
};

// ---------------------------------------------------------------------------
// Kernel kinds and bandwidths (config tokens: a, s, fd, fs, fc).
// ---------------------------------------------------------------------------
enum class KernelKind { Appearance, Smooth, FeatureDifference, FeatureSpatial, FeatureCosine };

inline const char* kernel_name(KernelKind k) {
  switch (k) {
    case KernelKind::Appearance: return "a";
    case KernelKind::Smooth: return "s";
    case KernelKind::FeatureDifference: return "fd";
    case KernelKind::FeatureSpatial: return "fs";
    case KernelKind::FeatureCosine: return "fc";
  }
  return "?";
}

struct Bandwidths {
  double alpha = 3.0;  // appearance, position block (pixels)
  double beta = 0.1;   // appearance, color block (unit RGB)
  double gamma = 3.0;  // smooth, position block
  double delta = 1.0;  // feature difference (standardized features)
  double zeta = 1.0;   // feature spatial, feature block
  double eta = 3.0;    // feature spatial, position block

  bool all_positive() const {
    return alpha > 0 && beta > 0 && gamma > 0 && delta > 0 && zeta > 0 && eta > 0;
  }
};

// mu(l, l') = 1 - delta(l, l')
inline std::vector<double> potts_compatibility(int classes) {
  std::vector<double> mu(static_cast<std::size_t>(classes) * static_cast<std::size_t>(classes), 1.0);
  for (int l = 0; l < classes; ++l)
    mu[static_cast<std::size_t>(l) * static_cast<std::size_t>(classes) + static_cast<std::size_t>(l)] =
        0.0;
  return mu;
}

// ---------------------------------------------------------------------------
// CrfParams: everything the mean-field engine learns or is configured with.
// ---------------------------------------------------------------------------
struct CrfParams {
  std::vector<KernelKind> kernel_kinds;
  std::vector<double> kernel_weights;  // w^(m), one per kind
  Bandwidths bandwidths;
  int classes = 0;
  std::vector<double> compatibility;  // mu, classes x classes row-major
  int filter_radius = 7;              // pairwise terms vanish at Manhattan distance >= r
  int iterations = 5;
  double tolerance = 1e-6;

  double mu(int l, int lp) const {
    return compatibility[static_cast<std::size_t>(l) * static_cast<std::size_t>(classes) +
                         static_cast<std::size_t>(lp)];
  }
  double& mu(int l, int lp) {
    return compatibility[static_cast<std::size_t>(l) * static_cast<std::size_t>(classes) +
                         static_cast<std::size_t>(lp)];
  }

  int kernel_count() const { return static_cast<int>(kernel_kinds.size()); }

  void validate() const {
    if (filter_radius < 2)
      throw ConfigError("filter_radius must be >= 2 (r = 1 leaves an empty neighborhood)");
    if (iterations < 1) throw ConfigError("iterations must be >= 1");
    if (tolerance < 0) throw ConfigError("tolerance must be >= 0");
    if (!bandwidths.all_positive()) throw ConfigError("bandwidths must be strictly positive");
    if (kernel_weights.size() != kernel_kinds.size())
      throw ConfigError("kernel_weights count must match active kernels");
    if (classes < 2) throw ConfigError("classes must be >= 2");
    if (compatibility.size() !=
        static_cast<std::size_t>(classes) * static_cast<std::size_t>(classes))
      throw ConfigError("compatibility matrix must be classes x classes");
  }

  static CrfParams make(std::vector<KernelKind> kinds, int classes, int filter_radius = 7,
                        int iterations = 5, double tolerance = 1e-6,
                        Bandwidths bw = Bandwidths{}) {
    CrfParams p;
    p.kernel_kinds = std::move(kinds);
    p.kernel_weights.assign(p.kernel_kinds.size(), 1.0);
    p.bandwidths = bw;
    p.classes = classes;
    p.compatibility = potts_compatibility(classes);
    p.filter_radius = filter_radius;
    p.iterations = iterations;
    p.tolerance = tolerance;
    return p;
  }
};

// ---------------------------------------------------------------------------
// Tensor <-> compute-type conversions.
// ---------------------------------------------------------------------------
inline FeatureMap feature_map_from_tensor(const Tensor& t, const std::string& what = "tensor") {
  if (t.dims.size() == 2) {
    FeatureMap f(static_cast<int>(t.dims[0]), static_cast<int>(t.dims[1]), 1);
    for (std::size_t i = 0; i < t.data.size(); ++i) f.data[i] = t.data[i];
    return f;
  }
  if (t.dims.size() != 3) throw IoError(what + ": expected a H x W x D tensor");
  FeatureMap f(static_cast<int>(t.dims[0]), static_cast<int>(t.dims[1]),
               static_cast<int>(t.dims[2]));
  for (std::size_t i = 0; i < t.data.size(); ++i) f.data[i] = t.data[i];
  return f;
}

inline Tensor tensor_from_feature_map(const FeatureMap& f) {
  Tensor t({static_cast<std::uint32_t>(f.height), static_cast<std::uint32_t>(f.width),
            static_cast<std::uint32_t>(f.dim)});
  for (std::size_t i = 0; i < f.data.size(); ++i) t.data[i] = static_cast<float>(f.data[i]);
  return t;
}

inline UnaryField unary_from_tensor(const Tensor& t, const std::string& what = "unary") {
  if (t.dims.size() != 3) throw IoError(what + ": expected a H x W x C tensor");
  UnaryField u(static_cast<int>(t.dims[0]), static_cast<int>(t.dims[1]),
               static_cast<int>(t.dims[2]));
  if (u.classes < 2) throw IoError(what + ": needs at least 2 classes");
  for (std::size_t i = 0; i < t.data.size(); ++i) u.psi[i] = t.data[i];
  return u;
}

inline Tensor tensor_from_probability(const ProbabilityField& p) {
  Tensor t({static_cast<std::uint32_t>(p.height), static_cast<std::uint32_t>(p.width),
            static_cast<std::uint32_t>(p.classes)});
  for (std::size_t i = 0; i < p.q.size(); ++i) t.data[i] = static_cast<float>(p.q[i]);
  return t;
}

inline Tensor tensor_from_labels(const LabelField& l) {
  Tensor t({static_cast<std::uint32_t>(l.height), static_cast<std::uint32_t>(l.width)});
  for (std::size_t i = 0; i < l.labels.size(); ++i) t.data[i] = static_cast<float>(l.labels[i]);
  return t;
}

inline LabelField labels_from_tensor(const Tensor& t, int classes,
                                     const std::string& what = "labels") {
  if (t.dims.size() != 2 && !(t.dims.size() == 3 && t.dims[2] == 1))
    throw IoError(what + ": expected a H x W tensor");
  LabelField l(static_cast<int>(t.dims[0]), static_cast<int>(t.dims[1]), classes);
  for (std::size_t i = 0; i < l.labels.size(); ++i) {
    const long v = std::lround(static_cast<double>(t.data[i]));
    if (v < 0 || v >= classes)
      throw IoError(what + ": label " + std::to_string(v) + " out of range for " +
                    std::to_string(classes) + " classes");
    l.labels[i] = static_cast<int>(v);
  }
  return l;
}

}  // namespace fpcrf
