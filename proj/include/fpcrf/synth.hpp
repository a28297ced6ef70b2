#pragma once

#include <algorithm>
#include <vector>

#include "fpcrf/rng.hpp"
#include "fpcrf/types.hpp"

namespace fpcrf {

// ---------------------------------------------------------------------------
// Synthetic rectangles-plus-noise scenes: textured bright boxes on a darker
// textured ground, with impulse noise corrupting a fraction of pixels. The
// boxes are the positive class. Deterministic given the RNG stream.
// ---------------------------------------------------------------------------
struct SynthParams {
  int size = 128;
  int min_rects = 2;
  int max_rects = 5;
  int min_side = 10;
  int max_side = 40;
  int margin = 4;            // keep-out border for rectangle placement
  double background = 0.2;   // ground base intensity
  double foreground = 0.65;  // box base intensity
  double texture = 0.06;     // +/- uniform texture amplitude
  double noise = 0.08;       // per-pixel impulse probability
};

struct SynthPatch {
  FeatureMap rgb;     // H x W x 3, equal channels
  BinaryMask mask;    // box = 1
  LabelField labels;  // two classes, label = mask bit
};

inline SynthPatch synth_rectangles(SplitMix64& rng, const SynthParams& p) {
  const int n = p.size;
  SynthPatch patch;
  patch.rgb = FeatureMap(n, n, 3);
  patch.mask = BinaryMask(n, n);
  patch.labels = LabelField(n, n, 2);

  const int rects = rng.next_int(p.min_rects, p.max_rects);
  for (int k = 0; k < rects; ++k) {
    const int max_side = std::min(p.max_side, n - 2 * p.margin);
    const int side_h = rng.next_int(p.min_side, max_side);
    const int side_w = rng.next_int(p.min_side, max_side);
    const int r0 = rng.next_int(p.margin, n - p.margin - side_h);
    const int c0 = rng.next_int(p.margin, n - p.margin - side_w);
    for (int r = r0; r < r0 + side_h; ++r)
      for (int c = c0; c < c0 + side_w; ++c) patch.mask.at(r, c) = 1;
  }

  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) {
      const bool building = patch.mask.at(r, c) != 0;
      double v = (building ? p.foreground : p.background) + rng.next_range(-p.texture, p.texture);
      if (rng.next_double() < p.noise) v = rng.next_double();  // impulse
      v = std::clamp(v, 0.0, 1.0);
      for (int d = 0; d < 3; ++d) patch.rgb.at(r, c, d) = v;
      patch.labels.at(r, c) = building ? 1 : 0;
    }
  return patch;
}

inline std::vector<SynthPatch> synth_dataset(std::uint64_t seed, int count, const SynthParams& p) {
  SplitMix64 rng(seed);
  std::vector<SynthPatch> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) out.push_back(synth_rectangles(rng, p));
  return out;
}

}  // namespace fpcrf
