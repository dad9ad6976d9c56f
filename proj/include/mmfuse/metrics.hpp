#pragma once

// Ranking metrics: one-vs-rest ROC and precision-recall AUCs, their macro
// averages over classes, and percentile-bootstrap confidence intervals over
// case-level resamples. Pure functions; each bootstrap resample derives its
// RNG stream from (seed, resample index), so results do not depend on
// evaluation order.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "mmfuse/errors.hpp"
#include "mmfuse/numerics.hpp"

namespace mmfuse {

// Per-sample class-probability rows plus true class indices. case_ids, when
// non-empty, group samples that must travel together under resampling; an
// empty vector treats every sample as its own case.
struct ScoredLabels {
  std::vector<RealVec> scores;
  std::vector<std::size_t> labels;
  std::vector<std::string> case_ids;
};

inline void validate_scored(const ScoredLabels& s) {
  if (s.scores.size() != s.labels.size())
    throw DimensionError("scored labels: scores/labels size mismatch");
  if (!s.case_ids.empty() && s.case_ids.size() != s.scores.size())
    throw DimensionError("scored labels: case_ids size mismatch");
  if (s.scores.empty()) throw DataError("scored labels: empty");
  const std::size_t k = s.scores.front().size();
  for (std::size_t i = 0; i < s.scores.size(); ++i) {
    if (s.scores[i].size() != k) throw DimensionError("scored labels: ragged score rows");
    double sum = 0.0;
    for (std::size_t c = 0; c < k; ++c) sum += s.scores[i][c];
    if (std::abs(sum - 1.0) > 1e-9)
      throw DataError("scored labels: row " + std::to_string(i) + " sums to " +
                      std::to_string(sum));
    if (s.labels[i] >= k) throw DataError("scored labels: label index out of range");
  }
}

// Mann-Whitney ROC AUC via midranks; tied pairs contribute one half each.
inline double roc_auc_binary(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size())
    throw DimensionError("roc_auc_binary: scores/labels size mismatch");
  std::size_t pos = 0;
  for (int y : labels) pos += (y == 1);
  const std::size_t neg = scores.size() - pos;
  if (pos == 0 || neg == 0)
    throw UndefinedMetricError("roc_auc_binary: needs at least one positive and one negative");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + j) + 1.0;  // ranks are 1-based
    for (std::size_t k = i; k <= j; ++k)
      if (labels[order[k]] == 1) rank_sum_pos += midrank;
    i = j + 1;
  }
  const double p = static_cast<double>(pos);
  return (rank_sum_pos - p * (p + 1.0) / 2.0) / (p * static_cast<double>(neg));
}

// Average precision: precision at each positive's rank, scores descending,
// equal scores kept in original order.
inline double pr_auc_binary(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size())
    throw DimensionError("pr_auc_binary: scores/labels size mismatch");
  std::size_t pos = 0;
  for (int y : labels) pos += (y == 1);
  if (pos == 0) throw UndefinedMetricError("pr_auc_binary: needs at least one positive");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double ap = 0.0;
  std::size_t hits = 0;
  for (std::size_t r = 0; r < order.size(); ++r) {
    if (labels[order[r]] == 1) {
      ++hits;
      ap += static_cast<double>(hits) / static_cast<double>(r + 1);
    }
  }
  return ap / static_cast<double>(pos);
}

enum class MetricKind { roc, pr };
inline std::string to_string(MetricKind k) { return k == MetricKind::roc ? "auc_roc" : "auc_pr"; }

struct MacroResult {
  double value = 0.0;
  std::vector<std::size_t> skipped_classes;  // undefined one-vs-rest problems
};

// Unweighted mean of per-class one-vs-rest AUCs. Classes whose one-vs-rest
// problem is undefined (no positives, or no negatives for ROC) are skipped
// and reported.
inline MacroResult macro_auc_detailed(const ScoredLabels& scored, MetricKind kind) {
  validate_scored(scored);
  const std::size_t k = scored.scores.front().size();
  if (k < 2) throw DimensionError("macro_auc: needs >= 2 classes");
  MacroResult out;
  double sum = 0.0;
  std::size_t defined = 0;
  for (std::size_t c = 0; c < k; ++c) {
    std::vector<double> s(scored.scores.size());
    std::vector<int> y(scored.scores.size());
    for (std::size_t i = 0; i < scored.scores.size(); ++i) {
      s[i] = scored.scores[i][c];
      y[i] = scored.labels[i] == c ? 1 : 0;
    }
    try {
      sum += kind == MetricKind::roc ? roc_auc_binary(s, y) : pr_auc_binary(s, y);
      ++defined;
    } catch (const UndefinedMetricError&) {
      out.skipped_classes.push_back(c);
    }
  }
  if (defined == 0) throw UndefinedMetricError("macro_auc: every class is undefined");
  out.value = sum / static_cast<double>(defined);
  return out;
}

inline double macro_auc(const ScoredLabels& scored, MetricKind kind) {
  return macro_auc_detailed(scored, kind).value;
}

struct CiResult {
  double point = 0.0;
  double lo = 0.0;
  double hi = 0.0;
  std::size_t n_resamples = 0;
  double level = 0.95;
  std::size_t n_undefined = 0;  // resamples skipped because the metric was undefined
};

// Percentile bootstrap over case-level resamples with replacement. Cases keep
// their slides together; resamples on which the metric is undefined are
// skipped and counted, and more than 50% undefined aborts.
inline CiResult bootstrap_ci(const ScoredLabels& scored,
                             const std::function<double(const ScoredLabels&)>& metric,
                             std::size_t n_resamples = 1000, double level = 0.95,
                             std::uint64_t seed = 0) {
  validate_scored(scored);
  if (n_resamples < 100)
    throw ConfigError("bootstrap_ci: n_resamples must be >= 100, got " +
                      std::to_string(n_resamples));
  if (!(level > 0.0 && level < 1.0)) throw ConfigError("bootstrap_ci: level must be in (0,1)");

  // group sample indices by case, preserving first-appearance order
  std::vector<std::vector<std::size_t>> groups;
  if (scored.case_ids.empty()) {
    groups.resize(scored.scores.size());
    for (std::size_t i = 0; i < scored.scores.size(); ++i) groups[i] = {i};
  } else {
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < scored.case_ids.size(); ++i) {
      auto [it, fresh] = index.try_emplace(scored.case_ids[i], groups.size());
      if (fresh) groups.emplace_back();
      groups[it->second].push_back(i);
    }
  }

  CiResult out;
  out.point = metric(scored);
  out.n_resamples = n_resamples;
  out.level = level;

  RngStream root(seed, 17);
  std::vector<double> stats;
  stats.reserve(n_resamples);
  for (std::size_t r = 0; r < n_resamples; ++r) {
    auto rng = root.substream(r);
    ScoredLabels resampled;
    const bool keep_cases = !scored.case_ids.empty();
    for (std::size_t g = 0; g < groups.size(); ++g) {
      const auto& chosen = groups[rng.next_below(groups.size())];
      for (auto i : chosen) {
        resampled.scores.push_back(scored.scores[i]);
        resampled.labels.push_back(scored.labels[i]);
        if (keep_cases) resampled.case_ids.push_back(scored.case_ids[i]);
      }
    }
    try {
      stats.push_back(metric(resampled));
    } catch (const UndefinedMetricError&) {
      ++out.n_undefined;
    }
  }
  if (2 * out.n_undefined > n_resamples)
    throw UndefinedMetricError("bootstrap_ci: metric undefined on more than half the resamples");

  std::sort(stats.begin(), stats.end());
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(stats.size() - 1);
    const std::size_t i = static_cast<std::size_t>(std::floor(pos));
    const double frac = pos - std::floor(pos);
    if (i + 1 >= stats.size()) return stats.back();
    return stats[i] + frac * (stats[i + 1] - stats[i]);
  };
  out.lo = quantile((1.0 - level) / 2.0);
  out.hi = quantile(1.0 - (1.0 - level) / 2.0);
  return out;
}

inline CiResult bootstrap_ci(const ScoredLabels& scored, MetricKind kind,
                             std::size_t n_resamples = 1000, double level = 0.95,
                             std::uint64_t seed = 0) {
  return bootstrap_ci(
      scored, [kind](const ScoredLabels& s) { return macro_auc(s, kind); }, n_resamples, level,
      seed);
}

}  // namespace mmfuse
