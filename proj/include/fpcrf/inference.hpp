#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "fpcrf/errors.hpp"
#include "fpcrf/kernels.hpp"
#include "fpcrf/parallel.hpp"
#include "fpcrf/types.hpp"

namespace fpcrf {

// Per-kernel message buffers share ProbabilityField indexing ((pix*C)+l) but
// are not normalized, so they get their own alias.
using MessageField = std::vector<double>;

struct MeanFieldTrace {
  std::vector<double> deltas;  // max-over-pixels, max-over-labels |dQ| per iteration
  int iterations_run = 0;
  bool converged = false;
};

// softmax of -energy over one class row, with max-subtraction. Every softmax
// in the engine funnels through here so that runs which produce the same
// energies produce bit-identical marginals.
inline void softmax_from_energy(const double* energy, int classes, double* out) {
  double peak = -energy[0];
  for (int l = 1; l < classes; ++l) peak = std::max(peak, -energy[l]);
  double sum = 0.0;
  for (int l = 0; l < classes; ++l) {
    const double e = std::exp(-energy[l] - peak);
    out[l] = e;
    sum += e;
  }
  for (int l = 0; l < classes; ++l) out[l] /= sum;
}

// Table step 1: Q_i(l) = exp(-psi_u(i,l)) / sum_l' exp(-psi_u(i,l'))
inline ProbabilityField init_marginals(const UnaryField& unary) {
  ProbabilityField q(unary.height, unary.width, unary.classes);
  const std::size_t n = unary.pixels();
  for (std::size_t i = 0; i < n; ++i)
    softmax_from_energy(unary.psi.data() + i * unary.classes, unary.classes,
                        q.q.data() + i * unary.classes);
  return q;
}

// Message passing: Qt^(m)_i(l) = sum_{in-window j != i} k^(m)(f_i,f_j) Q_j(l).
// Offsets accumulate in enumeration order for every output pixel and threads
// own disjoint row ranges, so the result is independent of the thread count.
inline std::vector<MessageField> message_pass(const ProbabilityField& q, const KernelStack& stack,
                                              int threads = 1) {
  if (q.height != stack.height || q.width != stack.width)
    throw ConfigError("message_pass: marginals and kernel stack shapes differ");
  const int h = q.height, w = q.width, classes = q.classes;
  const std::size_t hw = q.pixels();

  std::vector<MessageField> messages(stack.kernel_count());
  for (auto& m : messages) m.assign(hw * static_cast<std::size_t>(classes), 0.0);

  for (int m = 0; m < stack.kernel_count(); ++m) {
    const std::vector<double>& k = stack.values[m];
    MessageField& out = messages[m];
    parallel_for(h, threads, [&](int row_begin, int row_end) {
      for (int o = 0; o < stack.offsets.count(); ++o) {
        const int dy = stack.offsets.offsets[o][0];
        const int dx = stack.offsets.offsets[o][1];
        const double* slice = k.data() + static_cast<std::size_t>(o) * hw;
        const int r0 = std::max(row_begin, -dy), r1 = std::min(row_end - 1, h - 1 - dy);
        const int c0 = std::max(0, -dx), c1 = w - 1 - std::max(0, dx);
        for (int r = r0; r <= r1; ++r) {
          for (int c = c0; c <= c1; ++c) {
            const std::size_t i = static_cast<std::size_t>(r) * w + c;
            const std::size_t j = static_cast<std::size_t>(r + dy) * w + (c + dx);
            const double kv = slice[i];
            double* dst = out.data() + i * classes;
            const double* src = q.q.data() + j * classes;
            for (int l = 0; l < classes; ++l) dst[l] += kv * src[l];
          }
        }
      }
    });
  }
  return messages;
}

// Weighting: Qc_i(l) = sum_m w^(m) Qt^(m)_i(l)
inline MessageField weight_messages(const std::vector<MessageField>& messages,
                                    const std::vector<double>& weights, std::size_t values) {
  if (messages.size() != weights.size())
    throw ConfigError("weight_messages: weight count does not match message fields");
  MessageField out(values, 0.0);
  for (std::size_t m = 0; m < messages.size(); ++m) {
    if (messages[m].size() != values)
      throw ConfigError("weight_messages: message field size mismatch");
    const double wm = weights[m];
    for (std::size_t x = 0; x < values; ++x) out[x] += wm * messages[m][x];
  }
  return out;
}

// Compatibility transform: Qh_i(l) = sum_l' mu(l,l') Qc_i(l') — the 1x1 filter.
inline MessageField compatibility_transform(const MessageField& qc,
                                            const std::vector<double>& mu, int classes) {
  if (mu.size() != static_cast<std::size_t>(classes) * static_cast<std::size_t>(classes))
    throw ConfigError("compatibility_transform: mu must be classes x classes");
  if (qc.size() % static_cast<std::size_t>(classes) != 0)
    throw ConfigError("compatibility_transform: field size not divisible by classes");
  MessageField out(qc.size(), 0.0);
  const std::size_t pixels = qc.size() / static_cast<std::size_t>(classes);
  for (std::size_t i = 0; i < pixels; ++i) {
    const double* src = qc.data() + i * classes;
    double* dst = out.data() + i * classes;
    for (int l = 0; l < classes; ++l) {
      double s = 0.0;
      const double* row = mu.data() + static_cast<std::size_t>(l) * classes;
      for (int lp = 0; lp < classes; ++lp) s += row[lp] * src[lp];
      dst[l] = s;
    }
  }
  return out;
}

// The full fixed-point loop. Runs message pass -> weighting -> compatibility
// -> add unary -> normalize, synchronously on the previous iterate, until
// max |dQ| < tolerance or params.iterations rounds.
inline std::pair<ProbabilityField, MeanFieldTrace> mean_field(const UnaryField& unary,
                                                              const KernelStack& stack,
                                                              const CrfParams& params,
                                                              int threads = 1) {
  params.validate();
  if (unary.height != stack.height || unary.width != stack.width)
    throw ConfigError("mean_field: unary and kernel stack shapes differ");
  if (unary.classes != params.classes)
    throw ConfigError("mean_field: unary classes do not match params");
  if (stack.kernel_count() != params.kernel_count())
    throw ConfigError("mean_field: kernel stack does not match params kernels");

  const int classes = unary.classes;
  const std::size_t n = unary.pixels();
  ProbabilityField q = init_marginals(unary);
  MeanFieldTrace trace;

  for (int it = 0; it < params.iterations; ++it) {
    const std::vector<MessageField> messages = message_pass(q, stack, threads);
    const MessageField qc = weight_messages(messages, params.kernel_weights, q.q.size());
    const MessageField qh = compatibility_transform(qc, params.compatibility, classes);

    ProbabilityField next(q.height, q.width, classes);
    parallel_for(q.height, threads, [&](int row_begin, int row_end) {
      std::vector<double> energy(static_cast<std::size_t>(classes));
      for (int r = row_begin; r < row_end; ++r)
        for (int c = 0; c < q.width; ++c) {
          const std::size_t i = static_cast<std::size_t>(r) * q.width + c;
          for (int l = 0; l < classes; ++l)
            energy[static_cast<std::size_t>(l)] = unary.psi[i * classes + l] + qh[i * classes + l];
          softmax_from_energy(energy.data(), classes, next.q.data() + i * classes);
        }
    });

    double delta = 0.0;
    for (std::size_t x = 0; x < n * static_cast<std::size_t>(classes); ++x)
      delta = std::max(delta, std::abs(next.q[x] - q.q[x]));
    q = std::move(next);
    trace.deltas.push_back(delta);
    if (delta < params.tolerance) {
      trace.converged = true;
      break;
    }
  }
  trace.iterations_run = static_cast<int>(trace.deltas.size());
  return {std::move(q), std::move(trace)};
}

// MAP labeling: per-pixel argmax, ties toward the smallest label index.
inline LabelField map_labels(const ProbabilityField& q) {
  LabelField out(q.height, q.width, q.classes);
  const std::size_t n = q.pixels();
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = q.q.data() + i * q.classes;
    int best = 0;
    for (int l = 1; l < q.classes; ++l)
      if (row[l] > row[best]) best = l;
    out.labels[i] = best;
  }
  return out;
}

// Gibbs energy of a labeling: unary sum plus the ordered-pair pairwise sum
// mu(x_i, x_j) * sum_m w^(m) k^(m), each direction counted once.
inline double gibbs_energy(const LabelField& labels, const UnaryField& unary,
                           const KernelStack& stack, const CrfParams& params) {
  if (labels.height != unary.height || labels.width != unary.width)
    throw ConfigError("gibbs_energy: label and unary shapes differ");
  const int h = unary.height, w = unary.width;
  const std::size_t hw = unary.pixels();

  double energy = 0.0;
  for (std::size_t i = 0; i < hw; ++i)
    energy += unary.psi[i * unary.classes + labels.labels[i]];

  for (int o = 0; o < stack.offsets.count(); ++o) {
    const int dy = stack.offsets.offsets[o][0];
    const int dx = stack.offsets.offsets[o][1];
    const int r0 = std::max(0, -dy), r1 = h - 1 - std::max(0, dy);
    const int c0 = std::max(0, -dx), c1 = w - 1 - std::max(0, dx);
    for (int r = r0; r <= r1; ++r)
      for (int c = c0; c <= c1; ++c) {
        const std::size_t i = static_cast<std::size_t>(r) * w + c;
        const std::size_t j = static_cast<std::size_t>(r + dy) * w + (c + dx);
        double kernels_sum = 0.0;
        for (int m = 0; m < stack.kernel_count(); ++m)
          kernels_sum += params.kernel_weights[m] * stack.at(m, o, i);
        energy += params.mu(labels.labels[i], labels.labels[j]) * kernels_sum;
      }
  }
  return energy;
}

}  // namespace fpcrf
