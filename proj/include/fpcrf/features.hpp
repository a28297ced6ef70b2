#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "fpcrf/errors.hpp"
#include "fpcrf/preprocess.hpp"
#include "fpcrf/types.hpp"

namespace fpcrf {

// ---------------------------------------------------------------------------
// toy_features: a hand-built 8-channel per-pixel embedding standing in for a
// learned feature extractor. Channels: R, G, B, row/H, col/W, local mean
// luminance, local std, gradient magnitude. Window statistics use replicated
// borders.
// ---------------------------------------------------------------------------
inline constexpr int kToyFeatureDim = 8;

inline FeatureMap toy_features(const FeatureMap& image, int window = 5) {
  if (image.dim != 3) throw ConfigError("toy_features: image must be H x W x 3");
  if (window < 3 || window % 2 == 0)
    throw ConfigError("toy_features: window must be an odd integer >= 3");
  const int h = image.height, w = image.width;

  std::vector<double> lum(static_cast<std::size_t>(h) * w);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      lum[static_cast<std::size_t>(r) * w + c] =
          (image.at(r, c, 0) + image.at(r, c, 1) + image.at(r, c, 2)) / 3.0;
  auto lum_at = [&](int r, int c) {
    r = std::clamp(r, 0, h - 1);
    c = std::clamp(c, 0, w - 1);
    return lum[static_cast<std::size_t>(r) * w + c];
  };

  const FeatureMap grad = gradient_magnitude(image);
  const int half = window / 2;
  const double count = static_cast<double>(window) * window;

  FeatureMap out(h, w, kToyFeatureDim);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      double sum = 0.0;
      for (int dr = -half; dr <= half; ++dr)
        for (int dc = -half; dc <= half; ++dc) sum += lum_at(r + dr, c + dc);
      const double mean = sum / count;
      // two-pass variance: no cancellation on near-constant windows
      double var = 0.0;
      for (int dr = -half; dr <= half; ++dr)
        for (int dc = -half; dc <= half; ++dc) {
          const double dev = lum_at(r + dr, c + dc) - mean;
          var += dev * dev;
        }
      var /= count;
      out.at(r, c, 0) = image.at(r, c, 0);
      out.at(r, c, 1) = image.at(r, c, 1);
      out.at(r, c, 2) = image.at(r, c, 2);
      out.at(r, c, 3) = static_cast<double>(r) / h;
      out.at(r, c, 4) = static_cast<double>(c) / w;
      out.at(r, c, 5) = mean;
      out.at(r, c, 6) = std::sqrt(var);
      out.at(r, c, 7) = grad.at(r, c, 0);
    }
  return out;
}

// ---------------------------------------------------------------------------
// LogisticUnary: per-pixel multinomial logistic head z = W f + b over the
// feature vector; psi_u(l) = logsumexp(z) - z_l, so softmax(-psi) recovers
// softmax(z). Jointly trainable with the CRF parameters.
// ---------------------------------------------------------------------------
struct LogisticUnary {
  int classes = 0;
  int dim = 0;
  std::vector<double> weights;  // [l * dim + d]
  std::vector<double> bias;     // [l]

  LogisticUnary() = default;
  LogisticUnary(int c, int d)
      : classes(c), dim(d),
        weights(static_cast<std::size_t>(c) * static_cast<std::size_t>(d), 0.0), bias(c, 0.0) {}

  UnaryField unary(const FeatureMap& features) const {
    if (features.dim != dim) throw ConfigError("logistic unary: feature dimension mismatch");
    UnaryField out(features.height, features.width, classes);
    const std::size_t n = out.pixels();
    std::vector<double> z(static_cast<std::size_t>(classes));
    for (std::size_t i = 0; i < n; ++i) {
      const double* f = features.data.data() + i * dim;
      double peak = -1e300;
      for (int l = 0; l < classes; ++l) {
        double s = bias[l];
        const double* wl = weights.data() + static_cast<std::size_t>(l) * dim;
        for (int d = 0; d < dim; ++d) s += wl[d] * f[d];
        z[l] = s;
        peak = std::max(peak, s);
      }
      double lse = 0.0;
      for (int l = 0; l < classes; ++l) lse += std::exp(z[l] - peak);
      lse = peak + std::log(lse);
      for (int l = 0; l < classes; ++l) out.psi[i * classes + l] = lse - z[l];
    }
    return out;
  }

  // Chain rule from d(loss)/d(psi) into the head parameters. softmax(z) is
  // recovered as exp(-psi) — no extra forward cache needed.
  void backward(const FeatureMap& features, const UnaryField& psi, const std::vector<double>& dpsi,
                std::vector<double>& d_weights, std::vector<double>& d_bias) const {
    const std::size_t n = psi.pixels();
    d_weights.assign(weights.size(), 0.0);
    d_bias.assign(bias.size(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const double* f = features.data.data() + i * dim;
      double total = 0.0;
      for (int l = 0; l < classes; ++l) total += dpsi[i * classes + l];
      for (int l = 0; l < classes; ++l) {
        const double sigma = std::exp(-psi.psi[i * classes + l]);
        const double dz = sigma * total - dpsi[i * classes + l];
        d_bias[l] += dz;
        double* dwl = d_weights.data() + static_cast<std::size_t>(l) * dim;
        for (int d = 0; d < dim; ++d) dwl[d] += dz * f[d];
      }
    }
  }
};

}  // namespace fpcrf
