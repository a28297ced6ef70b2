#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "fpcrf/errors.hpp"
#include "fpcrf/types.hpp"

namespace fpcrf {

// ---------------------------------------------------------------------------
// DistanceField: truncated signed Euclidean distance to the building
// boundary; positive inside buildings, negative outside, |D| <= T.
// ---------------------------------------------------------------------------
struct DistanceField {
  int height = 0;
  int width = 0;
  double truncation = 0.0;
  std::vector<double> d;

  DistanceField() = default;
  DistanceField(int h, int w, double t)
      : height(h), width(w), truncation(t),
        d(static_cast<std::size_t>(h) * static_cast<std::size_t>(w), 0.0) {}

  double at(int r, int c) const {
    return d[static_cast<std::size_t>(r) * static_cast<std::size_t>(width) +
             static_cast<std::size_t>(c)];
  }
};

struct ShiftEstimate {
  int dy = 0;
  int dx = 0;
  double score = 0.0;  // peak normalized cross-correlation
};

// ---------------------------------------------------------------------------
// gradient_magnitude: 3x3 Sobel on the channel-mean luminance, replicated
// borders.
// ---------------------------------------------------------------------------
inline FeatureMap gradient_magnitude(const FeatureMap& image) {
  const int h = image.height, w = image.width;
  if (h < 3 || w < 3) throw ConfigError("gradient_magnitude: image must be at least 3x3");

  std::vector<double> lum(static_cast<std::size_t>(h) * w);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      double s = 0.0;
      for (int d = 0; d < image.dim; ++d) s += image.at(r, c, d);
      lum[static_cast<std::size_t>(r) * w + c] = s / image.dim;
    }

  auto at = [&](int r, int c) {
    r = std::clamp(r, 0, h - 1);
    c = std::clamp(c, 0, w - 1);
    return lum[static_cast<std::size_t>(r) * w + c];
  };

  FeatureMap out(h, w, 1);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      // differences first, so flat regions come out exactly zero
      const double gx = (at(r - 1, c + 1) - at(r - 1, c - 1)) +
                        2.0 * (at(r, c + 1) - at(r, c - 1)) +
                        (at(r + 1, c + 1) - at(r + 1, c - 1));
      const double gy = (at(r + 1, c - 1) - at(r - 1, c - 1)) +
                        2.0 * (at(r + 1, c) - at(r - 1, c)) +
                        (at(r + 1, c + 1) - at(r - 1, c + 1));
      out.at(r, c, 0) = std::sqrt(gx * gx + gy * gy);
    }
  return out;
}

// ---------------------------------------------------------------------------
// apply_shift: translate by (dy, dx), vacated cells filled with 0.
// ---------------------------------------------------------------------------
inline BinaryMask apply_shift(const BinaryMask& mask, int dy, int dx) {
  BinaryMask out(mask.height, mask.width);
  for (int r = 0; r < mask.height; ++r) {
    const int tr = r + dy;
    if (tr < 0 || tr >= mask.height) continue;
    for (int c = 0; c < mask.width; ++c) {
      const int tc = c + dx;
      if (tc < 0 || tc >= mask.width) continue;
      out.at(tr, tc) = mask.at(r, c);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// coregister: the returned estimate is the misalignment of the mask relative
// to the image — a mask that was translated by (dy, dx) yields the estimate
// (dy, dx), and apply_shift(mask, -dy, -dx) corrects it. Scored by zero-mean,
// unit-variance cross-correlation against the gradient magnitude; ties break
// toward the smallest |dy|+|dx|, then first in row-major order.
// ---------------------------------------------------------------------------
inline ShiftEstimate coregister(const BinaryMask& mask, const FeatureMap& image,
                                int search_radius = 7) {
  if (mask.height != image.height || mask.width != image.width)
    throw ConfigError("coregister: mask and image shapes differ");
  if (search_radius < 0) throw ConfigError("coregister: search_radius must be >= 0");

  const FeatureMap grad = gradient_magnitude(image);
  const std::size_t n = mask.bits.size();

  double g_mean = 0.0;
  for (double v : grad.data) g_mean += v;
  g_mean /= static_cast<double>(n);
  double g_var = 0.0;
  for (double v : grad.data) g_var += (v - g_mean) * (v - g_mean);
  if (g_var == 0.0) throw NumericError("coregister: no correlation signal (flat gradient)");

  bool any = false, all = true;
  for (auto b : mask.bits) {
    any = any || b;
    all = all && b;
  }
  if (!any || all)
    throw NumericError("coregister: no correlation signal (mask has no variation)");

  ShiftEstimate best;
  double best_score = -std::numeric_limits<double>::infinity();
  int best_manhattan = 0;
  for (int dy = -search_radius; dy <= search_radius; ++dy) {
    for (int dx = -search_radius; dx <= search_radius; ++dx) {
      const BinaryMask candidate = apply_shift(mask, -dy, -dx);
      double m_mean = 0.0;
      for (auto b : candidate.bits) m_mean += b;
      m_mean /= static_cast<double>(n);
      double m_var = 0.0, cross = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double dm = candidate.bits[i] - m_mean;
        m_var += dm * dm;
        cross += dm * (grad.data[i] - g_mean);
      }
      if (m_var == 0.0) continue;  // mask pushed entirely out of frame
      const double score = cross / std::sqrt(m_var * g_var);
      const int manhattan = std::abs(dy) + std::abs(dx);
      if (score > best_score || (score == best_score && manhattan < best_manhattan)) {
        best_score = score;
        best = {dy, dx, score};
        best_manhattan = manhattan;
      }
    }
  }
  if (!std::isfinite(best_score)) throw NumericError("coregister: no correlation signal");
  return best;
}

// ---------------------------------------------------------------------------
// signed_distance: D(i) = sign * min(distance to the boundary set, T).
// The boundary set J is the building pixels with a 4-connected non-building
// neighbor inside the image; masks without boundary pixels get sign * T
// everywhere. Exact Euclidean distances via the separable two-pass
// squared-distance transform (lower-envelope-of-parabolas per row/column).
// ---------------------------------------------------------------------------

namespace detail {

inline constexpr double kEdtInf = 1e15;

// exact 1D squared-distance transform (lower envelope of parabolas)
inline void edt_1d(const std::vector<double>& f, std::vector<double>& out, int n,
                   std::vector<int>& v, std::vector<double>& z) {
  int k = 0;
  v[0] = 0;
  z[0] = -kEdtInf;
  z[1] = kEdtInf;
  for (int q = 1; q < n; ++q) {
    double s = ((f[q] + static_cast<double>(q) * q) - (f[v[k]] + static_cast<double>(v[k]) * v[k])) /
               (2.0 * q - 2.0 * v[k]);
    while (s <= z[k]) {
      --k;
      s = ((f[q] + static_cast<double>(q) * q) - (f[v[k]] + static_cast<double>(v[k]) * v[k])) /
          (2.0 * q - 2.0 * v[k]);
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = kEdtInf;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    const double dq = q - v[k];
    out[q] = dq * dq + f[v[k]];
  }
}

}  // namespace detail

inline DistanceField signed_distance(const BinaryMask& mask, double T) {
  if (!(T > 0)) throw ConfigError("signed_distance: T must be > 0");
  const int h = mask.height, w = mask.width;
  DistanceField field(h, w, T);

  // boundary set
  std::vector<double> sq(static_cast<std::size_t>(h) * w, detail::kEdtInf);
  bool have_boundary = false;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      if (!mask.at(r, c)) continue;
      const bool edge = (r > 0 && !mask.at(r - 1, c)) || (r + 1 < h && !mask.at(r + 1, c)) ||
                        (c > 0 && !mask.at(r, c - 1)) || (c + 1 < w && !mask.at(r, c + 1));
      if (edge) {
        sq[static_cast<std::size_t>(r) * w + c] = 0.0;
        have_boundary = true;
      }
    }

  if (!have_boundary) {
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c)
        field.d[static_cast<std::size_t>(r) * w + c] = mask.at(r, c) ? T : -T;
    return field;
  }

  // columns, then rows
  const int longest = std::max(h, w);
  std::vector<double> f(longest), out(longest);
  std::vector<int> v(longest);
  std::vector<double> z(longest + 1);
  for (int c = 0; c < w; ++c) {
    for (int r = 0; r < h; ++r) f[r] = sq[static_cast<std::size_t>(r) * w + c];
    detail::edt_1d(f, out, h, v, z);
    for (int r = 0; r < h; ++r) sq[static_cast<std::size_t>(r) * w + c] = out[r];
  }
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) f[c] = sq[static_cast<std::size_t>(r) * w + c];
    detail::edt_1d(f, out, w, v, z);
    for (int c = 0; c < w; ++c) sq[static_cast<std::size_t>(r) * w + c] = out[c];
  }

  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const std::size_t i = static_cast<std::size_t>(r) * w + c;
      const double dist = std::min(std::sqrt(sq[i]), T);
      field.d[i] = mask.at(r, c) ? dist : -dist;
    }
  return field;
}

// ---------------------------------------------------------------------------
// quantize_distance: label = clamp(5 + round(5 D / T), 0, 10), round half
// away from zero. D = 0 is class 5 (the boundary), +T is 10, -T is 0.
// ---------------------------------------------------------------------------
inline LabelField quantize_distance(const DistanceField& field, double T) {
  if (!(T > 0)) throw ConfigError("quantize_distance: T must be > 0");
  LabelField out(field.height, field.width, 11);
  for (std::size_t i = 0; i < field.d.size(); ++i) {
    const long step = std::lround(5.0 * field.d[i] / T);
    out.labels[i] = static_cast<int>(std::clamp(5 + step, 0l, 10l));
  }
  return out;
}

// building iff label >= 5 (class 5 is the boundary and counts as building)
inline BinaryMask binarize_labels(const LabelField& labels) {
  if (labels.classes != 11)
    throw ConfigError("binarize_labels: expects the 11-class distance labeling");
  BinaryMask out(labels.height, labels.width);
  for (std::size_t i = 0; i < labels.labels.size(); ++i)
    out.bits[i] = labels.labels[i] >= 5 ? 1 : 0;
  return out;
}

// ---------------------------------------------------------------------------
// Patch extraction: row-major sliding window with stride = size - overlap;
// a trailing partial window is anchored to the far edge so every pixel is
// covered.
// ---------------------------------------------------------------------------
struct PatchRect {
  int r0 = 0;
  int c0 = 0;
  int size = 0;
};

inline std::vector<int> patch_anchors(int extent, int size, int overlap) {
  if (size < 1 || extent < size) throw ConfigError("extract_patches: image smaller than the patch size");
  if (overlap < 0 || overlap >= size)
    throw ConfigError("extract_patches: overlap must be in [0, size)");
  const int stride = size - overlap;
  std::vector<int> anchors;
  for (int a = 0;; a += stride) {
    if (a + size >= extent) {
      anchors.push_back(extent - size);
      break;
    }
    anchors.push_back(a);
  }
  return anchors;
}

inline std::vector<PatchRect> patch_grid(int h, int w, int size, int overlap) {
  std::vector<PatchRect> rects;
  for (int r : patch_anchors(h, size, overlap))
    for (int c : patch_anchors(w, size, overlap)) rects.push_back({r, c, size});
  return rects;
}

inline FeatureMap crop(const FeatureMap& src, int r0, int c0, int h, int w) {
  FeatureMap out(h, w, src.dim);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      for (int d = 0; d < src.dim; ++d) out.at(r, c, d) = src.at(r0 + r, c0 + c, d);
  return out;
}

inline LabelField crop(const LabelField& src, int r0, int c0, int h, int w) {
  LabelField out(h, w, src.classes);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) out.at(r, c) = src.at(r0 + r, c0 + c);
  return out;
}

struct PatchSet {
  std::vector<PatchRect> rects;
  std::vector<FeatureMap> images;
  std::vector<LabelField> labels;
};

inline PatchSet extract_patches(const FeatureMap& image, const LabelField& labels, int size = 256,
                                int overlap = 0) {
  if (image.height != labels.height || image.width != labels.width)
    throw ConfigError("extract_patches: image and label shapes differ");
  PatchSet set;
  set.rects = patch_grid(image.height, image.width, size, overlap);
  for (const PatchRect& r : set.rects) {
    set.images.push_back(crop(image, r.r0, r.c0, r.size, r.size));
    set.labels.push_back(crop(labels, r.r0, r.c0, r.size, r.size));
  }
  return set;
}

}  // namespace fpcrf
