// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "sslu/decoder.hpp"
#include "sslu/errors.hpp"
#include "sslu/types.hpp"

namespace sslu {

// Exact ordered match of whole sequences.
inline double sequence_accuracy(std::span<const LabelSequence> predictions, std::span<const LabelSequence> references) {
  if (predictions.size() != references.size()) {
    throw DataError("sequence_accuracy: " + std::to_string(predictions.size()) + " predictions for " +
                    std::to_string(references.size()) + " references");
  }
  if (references.empty()) throw DataError("sequence_accuracy: no utterances");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < references.size(); ++i) correct += predictions[i] == references[i];
  return static_cast<double>(correct) / static_cast<double>(references.size());
}

inline double median_of(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct SpottingReport {
  double bucket_ms = 100.0;
  std::map<long long, std::size_t> histogram;  // bucket start (ms) -> count
  std::size_t count = 0;
  double fraction_early = 0.0;
  double fraction_exact = 0.0;
  double fraction_late = 0.0;
  double mean_ms = 0.0;
  double median_ms = 0.0;
};

// Only matched events carry a relative position; unmatched ones are ignored.
inline SpottingReport early_spotting_report(std::span<const SpottingEvent> events, double bucket_ms = 100.0) {
  if (!(bucket_ms > 0.0)) throw ContractViolation("early_spotting_report: bucket width must be positive");
  SpottingReport r;
  r.bucket_ms = bucket_ms;
  std::vector<double> rel;
  for (const auto& e : events) {
    if (e.matched) rel.push_back(e.relative_ms());
  }
  r.count = rel.size();
  if (rel.empty()) {
    r.mean_ms = r.median_ms = std::numeric_limits<double>::quiet_NaN();
    return r;
  }
  std::size_t early = 0, exact = 0;
  for (double x : rel) {
    early += x < 0.0;
    exact += x == 0.0;
    const auto b = static_cast<long long>(std::floor(x / bucket_ms));
    ++r.histogram[b * static_cast<long long>(bucket_ms)];
  }
  const double n = static_cast<double>(rel.size());
  r.fraction_early = static_cast<double>(early) / n;
  r.fraction_exact = static_cast<double>(exact) / n;
  r.fraction_late = static_cast<double>(rel.size() - early - exact) / n;
  r.mean_ms = std::accumulate(rel.begin(), rel.end(), 0.0) / n;
  r.median_ms = median_of(std::move(rel));
  return r;
}

// Ranks starting at 1; ties share their average rank.
inline std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> rank(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[idx[k]] = r;
    i = j + 1;
  }
  return rank;
}

inline double pearson(std::span<const double> a, std::span<const double> b) {
  const std::size_t n = a.size();
  if (n != b.size() || n < 2) return std::numeric_limits<double>::quiet_NaN();
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / static_cast<double>(n);
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / static_cast<double>(n);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return sab / std::sqrt(saa * sbb);
}

inline double spearman(std::span<const double> a, std::span<const double> b) {
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  return pearson(ra, rb);
}

struct LengthPositionSeries {
  std::vector<std::pair<double, double>> pairs;  // (length, relative ms)
  double spearman = std::numeric_limits<double>::quiet_NaN();
};

// lengths[i] belongs to events[i]; unmatched events are dropped.
inline LengthPositionSeries length_vs_position(std::span<const SpottingEvent> events, std::span<const double> lengths) {
  if (events.size() != lengths.size()) {
    throw DataError("length_vs_position: " + std::to_string(events.size()) + " events for " +
                    std::to_string(lengths.size()) + " lengths");
  }
  LengthPositionSeries s;
  std::vector<double> len, pos;
  for (std::size_t i = 0; i < events.size(); ++i) {
    if (!events[i].matched) continue;
    s.pairs.emplace_back(lengths[i], events[i].relative_ms());
    len.push_back(lengths[i]);
    pos.push_back(events[i].relative_ms());
  }
  s.spearman = spearman(len, pos);
  return s;
}

// V x V counts over pairs of equal length, position by position.
inline std::vector<std::vector<std::size_t>> confusion_matrix(std::span<const LabelSequence> predictions,
                                                              std::span<const LabelSequence> references,
                                                              std::size_t vocab) {
  if (predictions.size() != references.size()) throw DataError("confusion_matrix: list length mismatch");
  std::vector<std::vector<std::size_t>> m(vocab, std::vector<std::size_t>(vocab, 0));
  for (std::size_t i = 0; i < references.size(); ++i) {
    if (predictions[i].size() != references[i].size()) continue;
    for (std::size_t k = 0; k < references[i].size(); ++k) {
      const int r = references[i][k], p = predictions[i][k];
      if (r < 0 || p < 0 || static_cast<std::size_t>(r) >= vocab || static_cast<std::size_t>(p) >= vocab) {
        throw DataError("confusion_matrix: label out of range");
      }
      ++m[static_cast<std::size_t>(r)][static_cast<std::size_t>(p)];
    }
  }
  return m;
}

// --- CSV writers -----------------------------------------------------------

inline std::string metrics_csv(std::span<const std::pair<std::string, double>> rows) {
  std::ostringstream os;
  os.precision(17);
  os << "metric,value\n";
  for (const auto& [k, v] : rows) os << k << ',' << v << '\n';
  return os.str();
}

inline std::string spotting_summary_csv(const SpottingReport& r) {
  const std::vector<std::pair<std::string, double>> rows{{"count", static_cast<double>(r.count)},
                                                         {"fraction_early", r.fraction_early},
                                                         {"fraction_exact", r.fraction_exact},
                                                         {"fraction_late", r.fraction_late},
                                                         {"mean_ms", r.mean_ms},
                                                         {"median_ms", r.median_ms},
                                                         {"bucket_ms", r.bucket_ms}};
  return metrics_csv(rows);
}

inline std::string histogram_csv(const SpottingReport& r) {
  std::ostringstream os;
  os << "bucket_ms,count\n";
  for (const auto& [b, c] : r.histogram) os << b << ',' << c << '\n';
  return os.str();
}

inline std::string length_position_csv(const LengthPositionSeries& s) {
  std::ostringstream os;
  os.precision(17);
  os << "length_chars,relative_ms\n";
  for (const auto& [l, p] : s.pairs) os << l << ',' << p << '\n';
  return os.str();
}

inline std::string confusion_csv(const std::vector<std::vector<std::size_t>>& m) {
  std::ostringstream os;
  os << "reference,predicted,count\n";
  for (std::size_t r = 0; r < m.size(); ++r) {
    for (std::size_t p = 0; p < m[r].size(); ++p) {
      if (m[r][p]) os << r << ',' << p << ',' << m[r][p] << '\n';
    }
  }
  return os.str();
}

}  // namespace sslu
