#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "pnml/errors.hpp"
#include "pnml/model.hpp"
#include "pnml/pnml.hpp"

namespace pnml {

inline constexpr double kProbFloor = 1e-300;

/// -log10 q(y), with q(y) floored at 1e-300.
inline double log_loss(std::span<const double> q, Label y) {
  if (y < 0 || static_cast<std::size_t>(y) >= q.size()) throw UsageError("log_loss: bad label");
  return -std::log10(std::max(q[static_cast<std::size_t>(y)], kProbFloor));
}

inline bool loss_floored(std::span<const double> q, Label y) {
  return q[static_cast<std::size_t>(y)] < kProbFloor;
}

inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

inline double max_prob_score(std::span<const double> q) {
  return *std::max_element(q.begin(), q.end());
}

/// 1 - p2/p1 with p1 >= p2 the two largest entries.
inline double ratio_score(std::span<const double> q) {
  if (q.size() < 2) return 1.0;
  double p1 = -1.0, p2 = -1.0;
  for (double v : q) {
    if (v > p1) {
      p2 = p1;
      p1 = v;
    } else if (v > p2) {
      p2 = v;
    }
  }
  if (!(p1 > 0.0)) return 0.0;
  return std::clamp(1.0 - p2 / p1, 0.0, 1.0);
}

/// Everything recorded about one evaluated test sample. Losses are base 10.
struct SampleRecord {
  std::size_t sample_id = 0;
  Label true_label = 0;
  ProbVector erm_q;
  PnmlResult pnml;
  double erm_loss = 0.0;
  double pnml_loss = 0.0;
  double genie_loss = 0.0;
  bool erm_correct = false;
  bool pnml_correct = false;
  bool floored = false;

  Label erm_pred() const { return static_cast<Label>(argmax(erm_q)); }
  Label pnml_pred() const { return static_cast<Label>(argmax(pnml.q_pnml)); }
  double regret() const { return pnml.regret_gamma; }
};

/// Builds a record and re-checks pnml loss = genie loss + regret (to 1e-9).
inline SampleRecord make_record(std::size_t id, Label y, ProbVector erm_q, PnmlResult pnml) {
  SampleRecord r;
  r.sample_id = id;
  r.true_label = y;
  r.erm_loss = log_loss(erm_q, y);
  r.pnml_loss = log_loss(pnml.q_pnml, y);
  r.genie_loss = log_loss(pnml.genie_probs, y);
  r.floored = loss_floored(erm_q, y) || loss_floored(pnml.q_pnml, y) ||
              loss_floored(pnml.genie_probs, y);
  r.erm_correct = static_cast<Label>(argmax(erm_q)) == y;
  r.pnml_correct = static_cast<Label>(argmax(pnml.q_pnml)) == y;
  r.erm_q = std::move(erm_q);
  r.pnml = std::move(pnml);
  if (!r.floored && std::abs(r.pnml_loss - (r.genie_loss + r.pnml.regret_gamma)) > 1e-9) {
    throw Error("sample " + std::to_string(id) + ": pNML loss != genie loss + regret");
  }
  return r;
}

struct ScoreHistogram {
  std::vector<double> bin_edges;  // bins + 1 ascending edges
  std::vector<std::size_t> counts;
  ProbVector smoothed_pmf;

  std::size_t bins() const noexcept { return counts.size(); }
};

/// Equal-width bins over [lo, hi]; out-of-range scores land in the edge bins.
/// pmf = (counts + smoothing) / sum(counts + smoothing).
inline ScoreHistogram build_histogram(std::span<const double> scores, double lo, double hi,
                                      std::size_t bins, double smoothing) {
  if (scores.empty()) throw UsageError("build_histogram: no scores");
  if (bins < 2) throw UsageError("build_histogram: need at least 2 bins");
  if (!(lo < hi)) throw UsageError("build_histogram: empty range");
  if (!(smoothing >= 0.0)) throw UsageError("build_histogram: negative smoothing");
  ScoreHistogram h;
  h.bin_edges.resize(bins + 1);
  const double width = (hi - lo) / static_cast<double>(bins);
  for (std::size_t i = 0; i <= bins; ++i) h.bin_edges[i] = lo + width * static_cast<double>(i);
  h.bin_edges[bins] = hi;
  h.counts.assign(bins, 0);
  for (double s : scores) {
    double pos = std::floor((s - lo) / width);
    if (!(pos >= 0.0)) pos = 0.0;  // also catches NaN
    const auto idx = std::min(static_cast<std::size_t>(pos), bins - 1);
    ++h.counts[idx];
  }
  const double total = static_cast<double>(scores.size()) + smoothing * static_cast<double>(bins);
  h.smoothed_pmf.resize(bins);
  for (std::size_t i = 0; i < bins; ++i) {
    h.smoothed_pmf[i] = (static_cast<double>(h.counts[i]) + smoothing) / total;
  }
  return h;
}

namespace detail {

inline void check_pmfs(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty()) throw UsageError("pmfs have different bin structure");
}

}  // namespace detail

/// KL(a || b) in nats; terms with a_i = 0 contribute nothing.
inline double kl_divergence(std::span<const double> a, std::span<const double> b) {
  detail::check_pmfs(a, b);
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] > 0.0) d += a[i] * std::log(a[i] / b[i]);
  }
  return d;
}

/// Symmetrized KL: (KL(q1||q2) + KL(q2||q1)) / 2, nats.
inline double d_kl(std::span<const double> q1, std::span<const double> q2) {
  detail::check_pmfs(q1, q2);
  return 0.5 * (kl_divergence(q1, q2) + kl_divergence(q2, q1));
}

/// Normalized geometric mixture q1^lambda q2^(1-lambda).
inline ProbVector geometric_mixture(std::span<const double> q1, std::span<const double> q2,
                                    double lambda) {
  detail::check_pmfs(q1, q2);
  ProbVector q(q1.size());
  double s = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    q[i] = std::exp(lambda * std::log(q1[i]) + (1.0 - lambda) * std::log(q2[i]));
    s += q[i];
  }
  for (double& v : q) v /= s;
  return q;
}

struct LrtDistance {
  double lambda_star = 0.5;
  double distance = 0.0;  // nats
};

/// Chernoff-point distance: bisection on f(l) = D(q_l||q1) - D(q_l||q2), which
/// is nonnegative at 0 and nonpositive at 1. Returns D(q_l*||q1).
inline LrtDistance d_lrt(std::span<const double> q1, std::span<const double> q2) {
  detail::check_pmfs(q1, q2);
  for (std::size_t i = 0; i < q1.size(); ++i) {
    if (!(q1[i] > 0.0 && q2[i] > 0.0)) throw UsageError("d_lrt: pmfs must be strictly positive");
  }
  if (std::equal(q1.begin(), q1.end(), q2.begin())) return {0.5, 0.0};
  auto balance = [&](double l) {
    const auto q = geometric_mixture(q1, q2, l);
    return kl_divergence(q, q1) - kl_divergence(q, q2);
  };
  double lo = 0.0, hi = 1.0, mid = 0.5;
  for (int it = 0; it < 200; ++it) {
    mid = 0.5 * (lo + hi);
    const double f = balance(mid);
    if (std::abs(f) < 1e-10 || hi - lo < 1e-16) break;
    if (f > 0.0) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return {mid, kl_divergence(geometric_mixture(q1, q2, mid), q1)};
}

struct ThresholdRow {
  double threshold = 0.0;
  std::size_t retained = 0;
  double fraction = 0.0;
  double erm_accuracy = 0.0;
  double pnml_accuracy = 0.0;
  double erm_mean_loss = 0.0;
  double pnml_mean_loss = 0.0;
  bool empty = true;
};

/// For each threshold t, statistics over the samples whose regret is below t.
inline std::vector<ThresholdRow> threshold_report(std::span<const SampleRecord> records,
                                                  std::span<const double> thresholds) {
  if (records.empty()) throw UsageError("threshold_report: no records");
  std::vector<ThresholdRow> rows;
  for (double t : thresholds) {
    ThresholdRow row;
    row.threshold = t;
    std::size_t erm_ok = 0, pnml_ok = 0;
    for (const auto& r : records) {
      if (!(r.regret() < t)) continue;
      ++row.retained;
      erm_ok += r.erm_correct;
      pnml_ok += r.pnml_correct;
      row.erm_mean_loss += r.erm_loss;
      row.pnml_mean_loss += r.pnml_loss;
    }
    row.fraction = static_cast<double>(row.retained) / static_cast<double>(records.size());
    row.empty = row.retained == 0;
    if (!row.empty) {
      const double n = static_cast<double>(row.retained);
      row.erm_accuracy = static_cast<double>(erm_ok) / n;
      row.pnml_accuracy = static_cast<double>(pnml_ok) / n;
      row.erm_mean_loss /= n;
      row.pnml_mean_loss /= n;
    }
    rows.push_back(row);
  }
  return rows;
}

struct MeanStd {
  double mean = 0.0;
  double stddev = 0.0;  // population
};

inline MeanStd mean_std(std::span<const double> v) {
  MeanStd m;
  if (v.empty()) return m;
  for (double x : v) m.mean += x;
  m.mean /= static_cast<double>(v.size());
  for (double x : v) m.stddev += (x - m.mean) * (x - m.mean);
  m.stddev = std::sqrt(m.stddev / static_cast<double>(v.size()));
  return m;
}

}  // namespace pnml
