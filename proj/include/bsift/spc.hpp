#pragma once

// Vanilla scaled prediction consistency: the fraction of scales n at which
// argmax F(min(n x, 1)) agrees with argmax F(x).

#include <span>
#include <vector>

#include "bsift/classifier.hpp"
#include "bsift/datamodel.hpp"
#include "bsift/error.hpp"

namespace bsift {

// Per-sample count of scales whose prediction on `transformed(x, n)` matches
// `reference`. Shared by SPC and MSPC.
template <typename Transform>
std::vector<int> agreement_counts(const Classifier& model, const Tensor& x, const std::vector<int>& reference,
                                  std::span<const int> scales, Transform&& transformed) {
  std::vector<int> counts(x.n, 0);
  for (int n : scales) {
    const auto pred = predict(model, transformed(x, n));
    for (std::size_t i = 0; i < x.n; ++i) counts[i] += pred[i] == reference[i];
  }
  return counts;
}

inline std::vector<int> spc_agreements(const Classifier& model, const Tensor& x, std::span<const int> scales) {
  detail::require(!scales.empty(), "scale set is empty");
  for (int n : scales) detail::require(n >= 1, "scale must be at least 1");
  const auto reference = predict(model, x);
  return agreement_counts(model, x, reference, scales,
                          [](const Tensor& t, int n) { return scale_and_clamp(t, n); });
}

inline double spc_from_count(int agree, std::size_t num_scales) {
  return static_cast<double>(agree) / static_cast<double>(num_scales);
}

inline double spc_score(const Classifier& model, const Image& x, std::span<const int> scales) {
  return spc_from_count(spc_agreements(model, to_tensor(x), scales)[0], scales.size());
}

inline ScoreVector spc_score_dataset(const Classifier& model, const Tensor& x, std::span<const int> scales) {
  const auto counts = spc_agreements(model, x, scales);
  ScoreVector out{std::vector<double>(x.n), ScoreKind::Spc};
  for (std::size_t i = 0; i < x.n; ++i) out.scores[i] = spc_from_count(counts[i], scales.size());
  return out;
}

inline ScoreVector spc_score_dataset(const Classifier& model, const PoisonedDataset& d,
                                     std::span<const int> scales) {
  return spc_score_dataset(model, d.batch.images, scales);
}

}  // namespace bsift
