#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <tuple>
#include <utility>
#include <vector>

#include "bsift/datamodel.hpp"
#include "bsift/error.hpp"

namespace bsift {

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
  double threshold = 0.0;

  friend bool operator==(const RocPoint&, const RocPoint&) = default;
};

namespace detail {

struct RocCounts {
  std::int64_t positives = 0;
  std::int64_t negatives = 0;
  // (FP, TP, threshold) after admitting each distinct score, descending;
  // the first entry is the +inf sentinel with (0, 0).
  std::vector<std::tuple<std::int64_t, std::int64_t, double>> steps;
};

template <typename Label>
RocCounts roc_counts(std::span<const double> scores, std::span<const Label> labels) {
  require(scores.size() == labels.size(), "scores and labels differ in length");
  RocCounts rc;
  for (auto l : labels) (l ? rc.positives : rc.negatives) += 1;
  require(rc.positives > 0 && rc.negatives > 0, "ROC needs both positive and negative labels");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  rc.steps.emplace_back(0, 0, std::numeric_limits<double>::infinity());
  std::int64_t fp = 0, tp = 0;
  for (std::size_t k = 0; k < order.size();) {
    const double s = scores[order[k]];
    for (; k < order.size() && scores[order[k]] == s; ++k) (labels[order[k]] ? tp : fp) += 1;
    rc.steps.emplace_back(fp, tp, s);
  }
  return rc;
}

}  // namespace detail

// ROC points for the rule "positive iff score >= threshold", thresholds being
// +inf followed by the distinct scores in descending order.
template <typename Label>
std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const Label> labels) {
  const auto rc = detail::roc_counts(scores, labels);
  std::vector<RocPoint> out;
  out.reserve(rc.steps.size());
  for (const auto& [fp, tp, th] : rc.steps) {
    out.push_back({static_cast<double>(fp) / static_cast<double>(rc.negatives),
                   static_cast<double>(tp) / static_cast<double>(rc.positives), th});
  }
  return out;
}

// Trapezoidal area under roc_curve, accumulated in integers so that it equals
// (#concordant pairs + 0.5 #tied pairs) / (P * N) exactly.
template <typename Label>
double auroc(std::span<const double> scores, std::span<const Label> labels) {
  const auto rc = detail::roc_counts(scores, labels);
  std::int64_t twice_area = 0;  // in units of 1 / (P * N)
  for (std::size_t k = 1; k < rc.steps.size(); ++k) {
    const auto [fp0, tp0, th0] = rc.steps[k - 1];
    const auto [fp1, tp1, th1] = rc.steps[k];
    twice_area += (fp1 - fp0) * (tp1 + tp0);
  }
  return static_cast<double>(twice_area) / static_cast<double>(2 * rc.positives * rc.negatives);
}

inline std::vector<std::uint8_t> as_labels(const std::vector<bool>& flags) {
  return {flags.begin(), flags.end()};
}

struct RateAtZero {
  double tpr = 0.0;
  double fpr = 0.0;
};

// TPR / FPR of the built-in rule "backdoor iff MSPC > 0".
template <typename Label>
RateAtZero tpr_fpr_at_zero(const ScoreVector& mspc, std::span<const Label> labels) {
  detail::require(mspc.kind == ScoreKind::Mspc, "threshold-0 rule applies to MSPC scores");
  detail::require(mspc.size() == labels.size(), "scores and labels differ in length");
  std::size_t p = 0, n = 0, tp = 0, fp = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool flagged = mspc.scores[i] > 0.0;
    if (labels[i]) {
      ++p;
      tp += flagged;
    } else {
      ++n;
      fp += flagged;
    }
  }
  detail::require(p > 0 && n > 0, "TPR/FPR need both positive and negative labels");
  return {static_cast<double>(tp) / static_cast<double>(p), static_cast<double>(fp) / static_cast<double>(n)};
}

// Normalized corruption ratio of a selected "clean" subset, in percent:
// (poison fraction of the selection) / gamma * 100.
inline double ncr(std::span<const std::size_t> selected, const PoisonedDataset& d) {
  detail::require(!selected.empty(), "selection is empty");
  detail::require(d.gamma > 0.0, "NCR needs a poisoned dataset (gamma > 0)");
  std::size_t poisoned = 0;
  for (std::size_t i : selected) {
    detail::require(i < d.size(), "selected index out of range");
    poisoned += d.is_backdoor[i];
  }
  const double frac = static_cast<double>(poisoned) / static_cast<double>(selected.size());
  return frac / d.gamma * 100.0;
}

// Indices of the k lowest scores; ties broken by index.
inline std::vector<std::size_t> bottom_k(std::span<const double> scores, std::size_t k) {
  detail::require(k <= scores.size(), "k exceeds the number of scores");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  idx.resize(k);
  return idx;
}

// Most-clean-first order: ascending score; ties broken by descending
// `tiebreak` (for MSPC, the masked KL: a sample whose prediction moves more
// under scaling is less backdoor-like), then by index.
inline std::vector<std::size_t> clean_first_order(std::span<const double> scores, std::span<const double> tiebreak) {
  detail::require(scores.size() == tiebreak.size(), "scores and tie-break keys differ in length");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] < scores[b];
    return tiebreak[a] > tiebreak[b];
  });
  return idx;
}

// First k of clean_first_order.
inline std::vector<std::size_t> bottom_k(std::span<const double> scores, std::span<const double> tiebreak,
                                         std::size_t k) {
  detail::require(k <= scores.size(), "k exceeds the number of scores");
  auto idx = clean_first_order(scores, tiebreak);
  idx.resize(k);
  return idx;
}

}  // namespace bsift
