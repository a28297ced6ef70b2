#pragma once

#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "fpcrf/errors.hpp"
#include "fpcrf/types.hpp"

namespace fpcrf {

// ---------------------------------------------------------------------------
// Segmentation scoring with building = positive class: confusion counts, the
// five summary metrics, and pooled (micro-averaged) evaluation over patch
// lists with CSV reporting.
// ---------------------------------------------------------------------------

struct ConfusionCounts {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;
  std::uint64_t tn = 0;

  std::uint64_t total() const { return tp + fp + fn + tn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
};

inline ConfusionCounts confusion(const BinaryMask& pred, const BinaryMask& truth) {
  if (pred.height != truth.height || pred.width != truth.width)
    throw ConfigError("confusion: prediction and reference mask shapes differ");
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.bits.size(); ++i) {
    const bool p = pred.bits[i] != 0;
    const bool t = truth.bits[i] != 0;
    if (p && t) ++c.tp;
    else if (p && !t) ++c.fp;
    else if (!p && t) ++c.fn;
    else ++c.tn;
  }
  return c;
}

struct Metrics {
  double overall_accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double iou = 0.0;
  bool degenerate = false;  // some ratio hit 0/0 and was defined as 0
};

inline Metrics metrics(const ConfusionCounts& c) {
  if (c.total() == 0) throw ConfigError("metrics: no evaluated pixels");
  Metrics m;
  const auto ratio = [&m](std::uint64_t num, std::uint64_t den) {
    if (den == 0) {
      m.degenerate = true;
      return 0.0;
    }
    return static_cast<double>(num) / static_cast<double>(den);
  };
  m.overall_accuracy = ratio(c.tp + c.tn, c.total());
  m.precision = ratio(c.tp, c.tp + c.fp);
  m.recall = ratio(c.tp, c.tp + c.fn);
  if (m.precision + m.recall == 0.0) {
    m.degenerate = true;
    m.f1 = 0.0;
  } else {
    m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
  }
  m.iou = ratio(c.tp, c.tp + c.fp + c.fn);
  return m;
}

struct EvaluationRow {
  std::string patch;
  ConfusionCounts counts;
  Metrics scores;
};

struct Evaluation {
  std::vector<EvaluationRow> rows;
  ConfusionCounts pooled;
  Metrics total;

  // header + one row per patch + the pooled TOTAL row
  std::string csv(bool per_patch = true) const {
    const auto fmt = [](const std::string& name, const Metrics& m) {
      char line[192];
      std::snprintf(line, sizeof(line), "%s,%.10g,%.10g,%.10g,%.10g,%.10g\n", name.c_str(),
                    m.overall_accuracy, m.precision, m.recall, m.f1, m.iou);
      return std::string(line);
    };
    std::string out = "patch,oa,precision,recall,f1,iou\n";
    if (per_patch)
      for (const EvaluationRow& row : rows) out += fmt(row.patch, row.scores);
    out += fmt("TOTAL", total);
    return out;
  }
};

// Counts pool across patches before the metrics are computed (micro-average),
// matching how the stitched map would score; per-patch rows come along for
// diagnostics. Names default to the patch index.
inline Evaluation evaluate_run(const std::vector<BinaryMask>& pred,
                               const std::vector<BinaryMask>& truth,
                               const std::vector<std::string>* names = nullptr) {
  if (pred.size() != truth.size())
    throw ConfigError("evaluate_run: prediction and reference lists differ in length");
  if (pred.empty()) throw ConfigError("evaluate_run: nothing to evaluate");
  if (names && names->size() != pred.size())
    throw ConfigError("evaluate_run: name list does not match the patches");

  Evaluation ev;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    EvaluationRow row;
    row.patch = names ? (*names)[i] : std::to_string(i);
    row.counts = confusion(pred[i], truth[i]);
    row.scores = metrics(row.counts);
    ev.pooled += row.counts;
    ev.rows.push_back(std::move(row));
  }
  ev.total = metrics(ev.pooled);
  return ev;
}

}  // namespace fpcrf
