#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <utility>
#include <vector>

#include "fpcrf/errors.hpp"
#include "fpcrf/inference.hpp"
#include "fpcrf/kernels.hpp"
#include "fpcrf/parallel.hpp"
#include "fpcrf/types.hpp"

namespace fpcrf {

// ---------------------------------------------------------------------------
// Reverse-mode differentiation through the unrolled fixed-point loop. The
// forward pass below reuses the exact inference building blocks but always
// runs the full iteration count (no tolerance early-out), so the computation
// graph has a fixed shape and finite-difference checks see a smooth loss.
// ---------------------------------------------------------------------------

struct UnrolledForward {
  ProbabilityField q0;
  std::vector<std::vector<MessageField>> messages;  // [iteration][kernel]
  std::vector<ProbabilityField> iterates;           // [iteration]

  const ProbabilityField& final_q() const { return iterates.empty() ? q0 : iterates.back(); }
};

inline UnrolledForward unrolled_forward(const UnaryField& unary, const KernelStack& stack,
                                        const CrfParams& params, int threads = 1) {
  params.validate();
  if (unary.height != stack.height || unary.width != stack.width)
    throw ConfigError("unrolled_forward: unary and kernel stack shapes differ");
  if (unary.classes != params.classes)
    throw ConfigError("unrolled_forward: unary classes do not match params");
  if (stack.kernel_count() != params.kernel_count())
    throw ConfigError("unrolled_forward: kernel stack does not match params kernels");

  const int classes = unary.classes;
  UnrolledForward fwd;
  fwd.q0 = init_marginals(unary);
  fwd.messages.reserve(params.iterations);
  fwd.iterates.reserve(params.iterations);

  const ProbabilityField* cur = &fwd.q0;
  for (int it = 0; it < params.iterations; ++it) {
    fwd.messages.push_back(message_pass(*cur, stack, threads));
    const MessageField qc =
        weight_messages(fwd.messages.back(), params.kernel_weights, cur->q.size());
    const MessageField qh = compatibility_transform(qc, params.compatibility, classes);

    ProbabilityField next(unary.height, unary.width, classes);
    const std::size_t n = unary.pixels();
    std::vector<double> energy(static_cast<std::size_t>(classes));
    for (std::size_t i = 0; i < n; ++i) {
      for (int l = 0; l < classes; ++l)
        energy[static_cast<std::size_t>(l)] = unary.psi[i * classes + l] + qh[i * classes + l];
      softmax_from_energy(energy.data(), classes, next.q.data() + i * classes);
    }
    fwd.iterates.push_back(std::move(next));
    cur = &fwd.iterates.back();
  }
  return fwd;
}

// Mean negative log marginal probability of the reference labels, with the
// probability clamped away from zero before the log.
inline double nll_loss(const ProbabilityField& q, const LabelField& truth) {
  if (q.height != truth.height || q.width != truth.width)
    throw ConfigError("nll_loss: marginals and labels shapes differ");
  const std::size_t n = q.pixels();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const int l = truth.labels[i];
    if (l < 0 || l >= q.classes) throw ConfigError("nll_loss: label outside class range");
    total += -std::log(std::max(q.q[i * q.classes + l], kProbabilityClamp));
  }
  return total / static_cast<double>(n);
}

// q = softmax(-E); given d(loss)/dq for one class row, produce d(loss)/dE.
inline void softmax_backward_to_energy(const double* q, const double* dq, int classes,
                                       double* denergy) {
  double inner = 0.0;
  for (int l = 0; l < classes; ++l) inner += dq[l] * q[l];
  for (int l = 0; l < classes; ++l) denergy[l] = q[l] * (inner - dq[l]);
}

namespace detail {

// dst_i(l) += sum_{in-window j} k_m(i,j) src_j(l). The forward message pass
// for one kernel — and, because the stored kernels are symmetric, also the
// adjoint of that pass. Loop structure mirrors message_pass.
inline void apply_kernel(const KernelStack& stack, int m, const MessageField& src, int classes,
                         MessageField& dst, int threads) {
  const int h = stack.height, w = stack.width;
  const std::size_t hw = stack.pixels();
  const std::vector<double>& k = stack.values[m];
  parallel_for(h, threads, [&](int row_begin, int row_end) {
    for (int o = 0; o < stack.offsets.count(); ++o) {
      const int dy = stack.offsets.offsets[o][0];
      const int dx = stack.offsets.offsets[o][1];
      const double* slice = k.data() + static_cast<std::size_t>(o) * hw;
      const int r0 = std::max(row_begin, -dy), r1 = std::min(row_end - 1, h - 1 - dy);
      const int c0 = std::max(0, -dx), c1 = w - 1 - std::max(0, dx);
      for (int r = r0; r <= r1; ++r)
        for (int c = c0; c <= c1; ++c) {
          const std::size_t i = static_cast<std::size_t>(r) * w + c;
          const std::size_t j = static_cast<std::size_t>(r + dy) * w + (c + dx);
          const double kv = slice[i];
          double* dst_row = dst.data() + i * classes;
          const double* src_row = src.data() + j * classes;
          for (int l = 0; l < classes; ++l) dst_row[l] += kv * src_row[l];
        }
    }
  });
}

// dk[o*HW + i] += sum_l dmsg_i(l) q_prev_j(l) for every in-window pair.
inline void accumulate_kernel_adjoint(const KernelStack& stack, const MessageField& dmsg,
                                      const ProbabilityField& q_prev, std::vector<double>& dk,
                                      int threads) {
  const int h = stack.height, w = stack.width;
  const int classes = q_prev.classes;
  const std::size_t hw = stack.pixels();
  parallel_for(stack.offsets.count(), threads, [&](int o_begin, int o_end) {
    for (int o = o_begin; o < o_end; ++o) {
      const int dy = stack.offsets.offsets[o][0];
      const int dx = stack.offsets.offsets[o][1];
      double* slice = dk.data() + static_cast<std::size_t>(o) * hw;
      const int r0 = std::max(0, -dy), r1 = h - 1 - std::max(0, dy);
      const int c0 = std::max(0, -dx), c1 = w - 1 - std::max(0, dx);
      for (int r = r0; r <= r1; ++r)
        for (int c = c0; c <= c1; ++c) {
          const std::size_t i = static_cast<std::size_t>(r) * w + c;
          const std::size_t j = static_cast<std::size_t>(r + dy) * w + (c + dx);
          const double* dm = dmsg.data() + i * classes;
          const double* qp = q_prev.q.data() + j * classes;
          double s = 0.0;
          for (int l = 0; l < classes; ++l) s += dm[l] * qp[l];
          slice[i] += s;
        }
    }
  });
}

// Chain d(loss)/dk into the bandwidths of one kernel. For a Gaussian block
// exp(-sq/(2 th^2)), d k/d th = k * sq / th^3; the cosine kernel has none.
inline void bandwidth_gradients_from_dk(const KernelStack& stack, int m,
                                        const std::vector<double>& dk, const FeatureMap* features,
                                        const FeatureMap* rgb, const Bandwidths& bw,
                                        Bandwidths& d_bw) {
  const KernelKind kind = stack.kinds[m];
  if (kind == KernelKind::FeatureCosine) return;
  if ((kind == KernelKind::FeatureDifference || kind == KernelKind::FeatureSpatial) && !features)
    throw ConfigError("bandwidth gradients need the feature map for feature kernels");
  if (kind == KernelKind::Appearance && !rgb)
    throw ConfigError("bandwidth gradients need the RGB image for the appearance kernel");

  const int h = stack.height, w = stack.width;
  const std::size_t hw = stack.pixels();
  for (int o = 0; o < stack.offsets.count(); ++o) {
    const int dy = stack.offsets.offsets[o][0];
    const int dx = stack.offsets.offsets[o][1];
    const double sq_pos = static_cast<double>(dy) * dy + static_cast<double>(dx) * dx;
    const double* dslice = dk.data() + static_cast<std::size_t>(o) * hw;
    const int r0 = std::max(0, -dy), r1 = h - 1 - std::max(0, dy);
    const int c0 = std::max(0, -dx), c1 = w - 1 - std::max(0, dx);
    for (int r = r0; r <= r1; ++r)
      for (int c = c0; c <= c1; ++c) {
        const std::size_t i = static_cast<std::size_t>(r) * w + c;
        const double g = dslice[i];
        if (g == 0.0) continue;
        const int rj = r + dy, cj = c + dx;
        const double gk = g * stack.at(m, o, i);
        switch (kind) {
          case KernelKind::Appearance: {
            const double sq_rgb = sq_dist(rgb->pixel(r, c), rgb->pixel(rj, cj), 3);
            d_bw.alpha += gk * sq_pos / (bw.alpha * bw.alpha * bw.alpha);
            d_bw.beta += gk * sq_rgb / (bw.beta * bw.beta * bw.beta);
            break;
          }
          case KernelKind::Smooth:
            d_bw.gamma += gk * sq_pos / (bw.gamma * bw.gamma * bw.gamma);
            break;
          case KernelKind::FeatureDifference: {
            const double sq_f =
                sq_dist(features->pixel(r, c), features->pixel(rj, cj), features->dim);
            d_bw.delta += gk * sq_f / (bw.delta * bw.delta * bw.delta);
            break;
          }
          case KernelKind::FeatureSpatial: {
            const double sq_f =
                sq_dist(features->pixel(r, c), features->pixel(rj, cj), features->dim);
            d_bw.zeta += gk * sq_f / (bw.zeta * bw.zeta * bw.zeta);
            d_bw.eta += gk * sq_pos / (bw.eta * bw.eta * bw.eta);
            break;
          }
          case KernelKind::FeatureCosine:
            break;
        }
      }
  }
}

}  // namespace detail

struct PatchGradients {
  std::vector<double> d_weights;                          // per active kernel
  Bandwidths d_bandwidths{0.0, 0.0, 0.0, 0.0, 0.0, 0.0};  // unused entries stay 0
  std::vector<double> d_compatibility;                    // classes x classes
  std::vector<double> d_unary;                            // d loss / d psi, pixel-major
};

// Loss and gradients for one patch. `fwd` must come from unrolled_forward on
// the same unary/stack/params. `features`/`rgb` are only needed when
// `bandwidth_grads` is set and the respective kernels are active (they must
// be the exact arrays the stack was built from).
inline double backprop_patch(const UnaryField& unary, const KernelStack& stack,
                             const UnrolledForward& fwd, const CrfParams& params,
                             const LabelField& truth, PatchGradients& out,
                             const FeatureMap* features = nullptr,
                             const FeatureMap* rgb = nullptr, bool bandwidth_grads = true,
                             int threads = 1) {
  const int classes = params.classes;
  const std::size_t n = unary.pixels();
  const std::size_t nc = n * static_cast<std::size_t>(classes);
  const int m_count = params.kernel_count();
  const int iterations = static_cast<int>(fwd.iterates.size());
  if (iterations != params.iterations)
    throw ConfigError("backprop_patch: forward cache does not match params.iterations");

  const ProbabilityField& q_final = fwd.final_q();
  const double loss = nll_loss(q_final, truth);

  out.d_weights.assign(static_cast<std::size_t>(m_count), 0.0);
  out.d_bandwidths = Bandwidths{0.0, 0.0, 0.0, 0.0, 0.0, 0.0};
  out.d_compatibility.assign(static_cast<std::size_t>(classes) * classes, 0.0);
  out.d_unary.assign(nc, 0.0);

  std::vector<std::vector<double>> dk;
  if (bandwidth_grads) {
    dk.assign(m_count, {});
    for (auto& v : dk) v.assign(stack.values.empty() ? 0 : stack.values[0].size(), 0.0);
  }

  // d loss / d q_final: nonzero only at the reference label of each pixel.
  MessageField dq(nc, 0.0);
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int l = truth.labels[i];
    const double p = q_final.q[i * classes + l];
    if (p > kProbabilityClamp) dq[i * classes + l] = -inv_n / p;
    // clamped pixels contribute a zero subgradient
  }

  MessageField denergy(nc, 0.0);
  MessageField dqc(nc, 0.0);
  MessageField dmsg(nc, 0.0);

  for (int t = iterations - 1; t >= 0; --t) {
    const ProbabilityField& q_t = fwd.iterates[static_cast<std::size_t>(t)];
    const ProbabilityField& q_prev = (t == 0) ? fwd.q0 : fwd.iterates[static_cast<std::size_t>(t - 1)];
    const std::vector<MessageField>& msgs = fwd.messages[static_cast<std::size_t>(t)];

    // softmax(-(psi + qh)) backward; denergy doubles as d(loss)/d qh
    for (std::size_t i = 0; i < n; ++i)
      softmax_backward_to_energy(q_t.q.data() + i * classes, dq.data() + i * classes, classes,
                                 denergy.data() + i * classes);
    for (std::size_t x = 0; x < nc; ++x) out.d_unary[x] += denergy[x];

    // compatibility backward needs the weighted messages of this iteration
    const MessageField qc = weight_messages(msgs, params.kernel_weights, nc);
    for (std::size_t i = 0; i < n; ++i) {
      const double* dqh = denergy.data() + i * classes;
      const double* qc_row = qc.data() + i * classes;
      double* dqc_row = dqc.data() + i * classes;
      for (int l = 0; l < classes; ++l) {
        const double g = dqh[l];
        if (g == 0.0) {
          continue;
        }
        double* mu_row = out.d_compatibility.data() + static_cast<std::size_t>(l) * classes;
        for (int lp = 0; lp < classes; ++lp) mu_row[lp] += g * qc_row[lp];
      }
      for (int lp = 0; lp < classes; ++lp) {
        double s = 0.0;
        for (int l = 0; l < classes; ++l) s += params.mu(l, lp) * dqh[l];
        dqc_row[lp] = s;
      }
    }

    // weighting backward, then the message pass adjoint into q_prev
    std::fill(dq.begin(), dq.end(), 0.0);
    for (int m = 0; m < m_count; ++m) {
      double dw = 0.0;
      for (std::size_t x = 0; x < nc; ++x) dw += dqc[x] * msgs[static_cast<std::size_t>(m)][x];
      out.d_weights[static_cast<std::size_t>(m)] += dw;

      const double wm = params.kernel_weights[static_cast<std::size_t>(m)];
      for (std::size_t x = 0; x < nc; ++x) dmsg[x] = wm * dqc[x];
      detail::apply_kernel(stack, m, dmsg, classes, dq, threads);
      if (bandwidth_grads)
        detail::accumulate_kernel_adjoint(stack, dmsg, q_prev, dk[static_cast<std::size_t>(m)],
                                          threads);
    }
  }

  // dq now holds d(loss)/d q0; q0 = softmax(-psi)
  for (std::size_t i = 0; i < n; ++i) {
    softmax_backward_to_energy(fwd.q0.q.data() + i * classes, dq.data() + i * classes, classes,
                               denergy.data() + i * classes);
    for (int l = 0; l < classes; ++l) out.d_unary[i * classes + l] += denergy[i * classes + l];
  }

  if (bandwidth_grads)
    for (int m = 0; m < m_count; ++m)
      detail::bandwidth_gradients_from_dk(stack, m, dk[static_cast<std::size_t>(m)], features, rgb,
                                          params.bandwidths, out.d_bandwidths);

  return loss;
}

}  // namespace fpcrf
