#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "fpcrf/errors.hpp"
#include "fpcrf/parallel.hpp"
#include "fpcrf/types.hpp"

namespace fpcrf {

// ---------------------------------------------------------------------------
// NeighborOffsets: the diamond of Manhattan radius r-1, center excluded.
// Pairwise terms exist only for d_ma(i,j) < r; enumeration is row-major by
// dy then dx so every consumer walks pairs in the same order.
// ---------------------------------------------------------------------------
struct NeighborOffsets {
  int radius = 0;
  std::vector<std::array<int, 2>> offsets;  // (dy, dx)

  static NeighborOffsets make(int radius) {
    if (radius < 2) throw ConfigError("filter_radius must be >= 2");
    NeighborOffsets n;
    n.radius = radius;
    for (int dy = -(radius - 1); dy <= radius - 1; ++dy) {
      const int span = radius - 1 - std::abs(dy);
      for (int dx = -span; dx <= span; ++dx) {
        if (dy == 0 && dx == 0) continue;
        n.offsets.push_back({dy, dx});
      }
    }
    return n;
  }

  int count() const { return static_cast<int>(offsets.size()); }
};

// ---------------------------------------------------------------------------
// Scalar kernel evaluation. All call sites (stack builder, per-pair API,
// gradient code) funnel through these helpers so values agree bitwise.
// ---------------------------------------------------------------------------

inline double dot(const double* a, const double* b, int d) {
  double s = 0.0;
  for (int i = 0; i < d; ++i) s += a[i] * b[i];
  return s;
}

inline double sq_dist(const double* a, const double* b, int d) {
  double s = 0.0;
  for (int i = 0; i < d; ++i) {
    const double diff = a[i] - b[i];
    s += diff * diff;
  }
  return s;
}

// exp(-sq_pos/(2 th_pos^2) - sq_other/(2 th_other^2)); single-block kinds pass 0.
inline double gaussian_from_sqdists(double sq_a, double theta_a, double sq_b, double theta_b) {
  double arg = -sq_a / (2.0 * theta_a * theta_a);
  if (theta_b != 0.0) arg -= sq_b / (2.0 * theta_b * theta_b);
  return std::exp(arg);
}

// 1 - (f_i . f_j)^2 / (||f_i|| ||f_j||), as printed, clamped to [0,1].
inline double cosine_kernel_value(double dot_ij, double norm_i, double norm_j) {
  if (norm_i == 0.0 || norm_j == 0.0)
    throw NumericError("feature cosine kernel: zero-norm feature vector");
  return std::clamp(1.0 - dot_ij * dot_ij / (norm_i * norm_j), 0.0, 1.0);
}

// f = learned feature vector (fdim entries), p = (row, col), c = RGB in [0,1].
// Kinds that ignore a block accept null for it.
inline double kernel_value(KernelKind kind, const double* f_i, const double* f_j, int fdim,
                           const double* p_i, const double* p_j, const double* c_i,
                           const double* c_j, const Bandwidths& bw) {
  switch (kind) {
    case KernelKind::Appearance: {
      if (!p_i || !p_j || !c_i || !c_j)
        throw ConfigError("appearance kernel needs position and color vectors");
      return gaussian_from_sqdists(sq_dist(p_i, p_j, 2), bw.alpha, sq_dist(c_i, c_j, 3), bw.beta);
    }
    case KernelKind::Smooth: {
      if (!p_i || !p_j) throw ConfigError("smooth kernel needs position vectors");
      return gaussian_from_sqdists(sq_dist(p_i, p_j, 2), bw.gamma, 0.0, 0.0);
    }
    case KernelKind::FeatureDifference: {
      if (!f_i || !f_j || fdim < 1)
        throw ConfigError("feature difference kernel needs feature vectors");
      return gaussian_from_sqdists(sq_dist(f_i, f_j, fdim), bw.delta, 0.0, 0.0);
    }
    case KernelKind::FeatureSpatial: {
      if (!f_i || !f_j || fdim < 1 || !p_i || !p_j)
        throw ConfigError("feature spatial kernel needs feature and position vectors");
      return gaussian_from_sqdists(sq_dist(f_i, f_j, fdim), bw.zeta, sq_dist(p_i, p_j, 2), bw.eta);
    }
    case KernelKind::FeatureCosine: {
      if (!f_i || !f_j || fdim < 1)
        throw ConfigError("feature cosine kernel needs feature vectors");
      return cosine_kernel_value(dot(f_i, f_j, fdim), std::sqrt(dot(f_i, f_i, fdim)),
                                 std::sqrt(dot(f_j, f_j, fdim)));
    }
  }
  throw ConfigError("unknown kernel kind");
}

// ---------------------------------------------------------------------------
// standardize_features: per-channel mean 0, population std 1; constant
// channels map to all-zeros so they cannot explode any bandwidth.
// ---------------------------------------------------------------------------
inline FeatureMap standardize_features(const FeatureMap& f) {
  const std::size_t n = static_cast<std::size_t>(f.height) * static_cast<std::size_t>(f.width);
  if (n < 2) throw ConfigError("standardize_features needs at least 2 pixels");
  FeatureMap out(f.height, f.width, f.dim);
  for (int d = 0; d < f.dim; ++d) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += f.data[i * f.dim + d];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double c = f.data[i * f.dim + d] - mean;
      var += c * c;
    }
    var /= static_cast<double>(n);
    const double std_dev = std::sqrt(var);
    if (std_dev == 0.0) {
      for (std::size_t i = 0; i < n; ++i) out.data[i * f.dim + d] = 0.0;
    } else {
      for (std::size_t i = 0; i < n; ++i)
        out.data[i * f.dim + d] = (f.data[i * f.dim + d] - mean) / std_dev;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// KernelStack: k^(m)(f_i, f_j) for every pixel i and every in-window offset,
// with out-of-image pairs stored as exactly 0. values[m] is indexed
// [offset * H*W + pixel].
// ---------------------------------------------------------------------------
struct KernelStack {
  int height = 0;
  int width = 0;
  NeighborOffsets offsets;
  std::vector<KernelKind> kinds;
  std::vector<std::vector<double>> values;

  int kernel_count() const { return static_cast<int>(kinds.size()); }
  std::size_t pixels() const {
    return static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
  }
  double at(int m, int offset, std::size_t pixel) const {
    return values[m][static_cast<std::size_t>(offset) * pixels() + pixel];
  }
};

// features: already standardized, H x W x D. rgb: required iff the Appearance
// kernel is active, channels in [0,1]. Positions are raw (row, col).
inline KernelStack build_kernel_stack(const FeatureMap& features, const FeatureMap* rgb,
                                      const CrfParams& params, int threads = 1) {
  const int h = features.height;
  const int w = features.width;
  if (h < 1 || w < 1) throw ConfigError("build_kernel_stack: empty image");

  const bool needs_rgb =
      std::find(params.kernel_kinds.begin(), params.kernel_kinds.end(), KernelKind::Appearance) !=
      params.kernel_kinds.end();
  if (needs_rgb) {
    if (!rgb) throw ConfigError("appearance kernel requires an RGB image");
    if (rgb->height != h || rgb->width != w || rgb->dim != 3)
      throw ConfigError("appearance kernel: RGB image must be H x W x 3 and match the features");
  }

  const bool needs_cosine =
      std::find(params.kernel_kinds.begin(), params.kernel_kinds.end(), KernelKind::FeatureCosine) !=
      params.kernel_kinds.end();

  KernelStack stack;
  stack.height = h;
  stack.width = w;
  stack.offsets = NeighborOffsets::make(params.filter_radius);
  stack.kinds = params.kernel_kinds;

  const std::size_t hw = stack.pixels();
  const int num_offsets = stack.offsets.count();
  const int m_count = stack.kernel_count();
  stack.values.assign(m_count, {});
  for (auto& v : stack.values) v.assign(static_cast<std::size_t>(num_offsets) * hw, 0.0);

  // per-pixel feature norms, needed only by the cosine kernel
  std::vector<double> norms;
  if (needs_cosine) {
    norms.resize(hw);
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) {
        const double* f = features.pixel(r, c);
        norms[static_cast<std::size_t>(r) * w + c] = std::sqrt(dot(f, f, features.dim));
      }
  }

  // Each (kernel, offset) pair owns one contiguous slice, so tasks are
  // independent and the fill order inside a slice is fixed: deterministic
  // for any thread count.
  parallel_for(m_count * num_offsets, threads, [&](int begin, int end) {
    for (int task = begin; task < end; ++task) {
      const int m = task / num_offsets;
      const int o = task % num_offsets;
      const KernelKind kind = stack.kinds[m];
      const int dy = stack.offsets.offsets[o][0];
      const int dx = stack.offsets.offsets[o][1];
      double* out = stack.values[m].data() + static_cast<std::size_t>(o) * hw;

      // position term is constant across the offset slice
      const double sq_pos = static_cast<double>(dy) * dy + static_cast<double>(dx) * dx;

      const int r0 = std::max(0, -dy), r1 = h - 1 - std::max(0, dy);
      const int c0 = std::max(0, -dx), c1 = w - 1 - std::max(0, dx);
      for (int r = r0; r <= r1; ++r) {
        for (int c = c0; c <= c1; ++c) {
          const std::size_t i = static_cast<std::size_t>(r) * w + c;
          const int rj = r + dy, cj = c + dx;
          const std::size_t j = static_cast<std::size_t>(rj) * w + cj;
          switch (kind) {
            case KernelKind::Appearance:
              out[i] = gaussian_from_sqdists(
                  sq_pos, params.bandwidths.alpha,
                  sq_dist(rgb->pixel(r, c), rgb->pixel(rj, cj), 3), params.bandwidths.beta);
              break;
            case KernelKind::Smooth:
              out[i] = gaussian_from_sqdists(sq_pos, params.bandwidths.gamma, 0.0, 0.0);
              break;
            case KernelKind::FeatureDifference:
              out[i] = gaussian_from_sqdists(
                  sq_dist(features.pixel(r, c), features.pixel(rj, cj), features.dim),
                  params.bandwidths.delta, 0.0, 0.0);
              break;
            case KernelKind::FeatureSpatial:
              out[i] = gaussian_from_sqdists(
                  sq_dist(features.pixel(r, c), features.pixel(rj, cj), features.dim),
                  params.bandwidths.zeta, sq_pos, params.bandwidths.eta);
              break;
            case KernelKind::FeatureCosine:
              out[i] = cosine_kernel_value(
                  dot(features.pixel(r, c), features.pixel(rj, cj), features.dim), norms[i],
                  norms[j]);
              break;
          }
        }
      }
    }
  });

  return stack;
}

}  // namespace fpcrf
