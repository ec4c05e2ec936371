#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <tuple>
#include <string>
#include <vector>

#include "bsift/classifier.hpp"
#include "bsift/datamodel.hpp"
#include "bsift/error.hpp"
#include "bsift/kl_consistency.hpp"
#include "bsift/rng.hpp"

namespace bsift {

enum class PlacementKind { Patch, FullImage };

struct Placement {
  PlacementKind kind = PlacementKind::Patch;
  std::size_t row = 0;  // top-left corner for patches
  std::size_t col = 0;

  friend bool operator==(const Placement&, const Placement&) = default;
};

// Trigger pattern plus how it is stamped. blend_alpha == 0 means the pattern
// replaces the covered pixels; otherwise x' = (1 - alpha) x + alpha t.
struct TriggerSpec {
  Image pattern;
  Placement placement;
  double blend_alpha = 0.0;

  friend bool operator==(const TriggerSpec&, const TriggerSpec&) = default;
};

inline void validate(const TriggerSpec& t, const ImageShape& image) {
  detail::require(t.blend_alpha >= 0.0 && t.blend_alpha <= 1.0, "blend_alpha must lie in [0,1]");
  for (float v : t.pattern.data) detail::require(v >= 0.0f && v <= 1.0f, "trigger pattern outside [0,1]");
  const ImageShape& p = t.pattern.shape;
  detail::require(p.channels == image.channels, "trigger channel count does not match image");
  if (t.placement.kind == PlacementKind::FullImage) {
    detail::require(p == image, "full-image trigger shape " + to_string(p) +
                                    " does not match image shape " + to_string(image));
  } else {
    detail::require(p.height >= 1 && p.width >= 1, "trigger patch is empty");
    detail::require(t.placement.row + p.height <= image.height &&
                        t.placement.col + p.width <= image.width,
                    "trigger patch does not fit inside the image");
  }
}

// Random 8-bit RGB patch of side patch_size at the bottom-right corner.
inline TriggerSpec make_badnets_trigger(std::size_t patch_size, ImageShape image, std::uint64_t seed) {
  detail::require(patch_size >= 1, "patch_size must be at least 1");
  detail::require(patch_size <= std::min(image.height, image.width),
                  "patch_size " + std::to_string(patch_size) + " larger than image " + to_string(image));
  Rng rng(seed);
  TriggerSpec t;
  t.pattern = Image({image.channels, patch_size, patch_size});
  for (float& v : t.pattern.data) v = static_cast<float>(rng.below(256)) / 255.0f;
  t.placement = {PlacementKind::Patch, image.height - patch_size, image.width - patch_size};
  t.blend_alpha = 0.0;
  return t;
}

// Full-image random pattern blended with weight 0.2: x' = 0.8 x + 0.2 t.
inline TriggerSpec make_blend_trigger(ImageShape image, std::uint64_t seed, double alpha = 0.2) {
  detail::require(image.size() > 0, "image shape is empty");
  Rng rng(seed);
  TriggerSpec t;
  t.pattern = Image(image);
  for (float& v : t.pattern.data) v = static_cast<float>(rng.below(256)) / 255.0f;
  t.placement = {PlacementKind::FullImage, 0, 0};
  t.blend_alpha = alpha;
  return t;
}

namespace detail {

// Calls fn(image_offset, pattern_offset) for every element the trigger covers.
template <typename Fn>
void for_each_covered(const TriggerSpec& t, const ImageShape& image, Fn&& fn) {
  const ImageShape& p = t.pattern.shape;
  if (t.placement.kind == PlacementKind::FullImage) {
    for (std::size_t k = 0; k < image.size(); ++k) fn(k, k);
    return;
  }
  for (std::size_t c = 0; c < p.channels; ++c) {
    for (std::size_t y = 0; y < p.height; ++y) {
      for (std::size_t x = 0; x < p.width; ++x) {
        const std::size_t img = (c * image.height + t.placement.row + y) * image.width + t.placement.col + x;
        fn(img, (c * p.height + y) * p.width + x);
      }
    }
  }
}

inline void stamp_sample(std::span<float> x, const TriggerSpec& t, const ImageShape& image) {
  const float a = static_cast<float>(t.blend_alpha);
  for_each_covered(t, image, [&](std::size_t i, std::size_t j) {
    const float v = (a == 0.0f) ? t.pattern.data[j] : (1.0f - a) * x[i] + a * t.pattern.data[j];
    x[i] = std::clamp(v, 0.0f, 1.0f);
  });
}

}  // namespace detail

inline Tensor stamp(const Tensor& x, const TriggerSpec& t) {
  validate(t, x.shape);
  Tensor out = x;
  for (std::size_t i = 0; i < out.n; ++i) detail::stamp_sample(out.sample(i), t, out.shape);
  return out;
}

inline ImageBatch stamp(const ImageBatch& x, const TriggerSpec& t) { return {stamp(x.images, t), x.labels}; }

// Replaces floor(gamma * N) seeded-random samples by stamped copies relabeled
// to target_label. Samples already carrying the target label are skipped when
// enough other samples exist.
inline PoisonedDataset poison_dataset(const ImageBatch& clean, int num_classes, const TriggerSpec& t,
                                      double gamma, int target_label, std::uint64_t seed,
                                      std::string attack_name = "custom") {
  validate(clean, num_classes);
  validate(t, clean.shape());
  detail::require(gamma > 0.0 && gamma < 1.0, "gamma must lie in (0,1)");
  detail::require(target_label >= 0 && target_label < num_classes, "target_label outside class range");
  const std::size_t count = poison_quota(gamma, clean.size());
  detail::require(count > 0, "poison count is zero");

  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    if (clean.labels[i] != target_label) candidates.push_back(i);
  }
  if (candidates.size() < count) {
    candidates.resize(clean.size());
    std::iota(candidates.begin(), candidates.end(), std::size_t{0});
  }
  Rng rng(seed);
  rng.shuffle(candidates);

  PoisonedDataset d;
  d.batch = clean;
  d.is_backdoor.assign(clean.size(), false);
  d.num_classes = num_classes;
  d.target_label = target_label;
  d.gamma = gamma;
  d.attack_name = std::move(attack_name);
  d.seed = seed;
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t i = candidates[k];
    detail::stamp_sample(d.batch.images.sample(i), t, clean.shape());
    d.batch.labels[i] = target_label;
    d.is_backdoor[i] = true;
  }
  return d;
}

// ---------------------------------------------------------------------------
// White-box adaptive trigger

struct AdaptiveConfig {
  int steps = 50;
  double step_size = 0.05;
  double tau = 0.1;
  std::vector<int> scales = {2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12};
  // When set, a step that lowers the objective is retried with half the
  // step size (up to max_halvings times) and dropped if it never succeeds.
  bool step_halving = true;
  int max_halvings = 20;
  std::size_t chunk = 128;
};

struct AdaptiveResult {
  TriggerSpec trigger;
  std::vector<double> objective_trace;  // objective before step 1, then after each step
};

namespace detail {

// Objective value and its gradient w.r.t. the trigger pattern.
inline std::pair<double, std::vector<double>> adaptive_value_grad(const Classifier& model, const Mask& m,
                                                                  const Tensor& clean, const TriggerSpec& t,
                                                                  const AdaptiveConfig& cfg, bool want_grad) {
  const ImageShape shape = clean.shape;
  const float tau = static_cast<float>(cfg.tau);
  std::vector<double> grad(want_grad ? t.pattern.data.size() : 0, 0.0);
  double value = 0.0;
  const double inv_n = 1.0 / static_cast<double>(clean.n);
  const float a = static_cast<float>(t.blend_alpha);

  for (std::size_t begin = 0; begin < clean.n; begin += cfg.chunk) {
    const std::size_t end = std::min(clean.n, begin + cfg.chunk);
    Tensor x = stamp(slice(clean, begin, end), t);
    Tensor v(x.n, shape);
    for (std::size_t i = 0; i < x.n; ++i) apply_mask_shift(x.sample(i), m.values(), tau, v.sample(i));

    Matrix z1;
    MatrixD ref;
    std::vector<double> weights(x.n, inv_n);
    ScaledKl kl;
    Tensor gx_ref;
    if (want_grad) {
      // The reference prediction depends on t as well; run the second-argument
      // pass first, then backpropagate its reference cotangent.
      z1 = model.logits(x);
      ref = log_probabilities(z1);
      kl = scaled_kl(model, v, ref, weights, cfg.scales, true, true);
      Matrix gref(kl.grad_ref.rows(), kl.grad_ref.cols());
      for (Eigen::Index i = 0; i < gref.rows(); ++i)
        for (Eigen::Index k = 0; k < gref.cols(); ++k) gref(i, k) = static_cast<float>(kl.grad_ref(i, k));
      gx_ref = model.input_gradient(x, gref);
    } else {
      ref = log_probabilities(model.logits(x));
      kl = scaled_kl(model, v, ref, weights, cfg.scales, false, false);
    }
    value += kl.value;
    if (!want_grad) continue;

    for (std::size_t i = 0; i < x.n; ++i) {
      auto gv = kl.grad_shifted.sample(i);
      auto gr = gx_ref.sample(i);
      // Stamping is a convex combination of in-range values, so its clamp
      // never binds and d x / d t is alpha (or 1 for replacement).
      for_each_covered(t, shape, [&](std::size_t p, std::size_t q) {
        const double gx = static_cast<double>(gv[p]) * m.values()[p] + gr[p];
        grad[q] += gx * (a == 0.0f ? 1.0 : static_cast<double>(a));
      });
    }
  }
  return {value, std::move(grad)};
}

}  // namespace detail

// (1/N) sum_i (1/|S|) sum_n KL(F(x_i) || F(clamp(n (x_i - tau) * m))) with
// x_i the clean images stamped with t.
inline double adaptive_objective(const Classifier& model, const Mask& m, const Tensor& clean,
                                 const TriggerSpec& t, const AdaptiveConfig& cfg) {
  return detail::adaptive_value_grad(model, m, clean, t, cfg, false).first;
}

// Projected gradient ascent on the trigger pattern. The adversary wants the
// masked scaled copies of its poisoned samples to disagree with their
// unscaled prediction, i.e. to push their MSPC below zero.
inline AdaptiveResult optimize_adaptive_trigger(const Classifier& model, const Mask& m, const Tensor& clean,
                                                const TriggerSpec& init, const AdaptiveConfig& cfg) {
  detail::require(clean.n >= 1, "clean batch is empty");
  detail::require(m.shape() == clean.shape, "mask shape does not match images");
  detail::require(cfg.steps >= 0 && cfg.step_size > 0.0, "steps must be >= 0 and step_size > 0");
  detail::require(cfg.tau >= 0.0 && cfg.tau < 1.0, "tau must lie in [0,1)");
  validate(init, clean.shape);

  AdaptiveResult r{init, {}};
  auto [value, grad] = detail::adaptive_value_grad(model, m, clean, r.trigger, cfg, true);
  if (!std::isfinite(value)) throw NumericFailure("adaptive trigger", 0);
  r.objective_trace.push_back(value);

  for (int step = 1; step <= cfg.steps; ++step) {
    double lr = cfg.step_size;
    bool accepted = false;
    TriggerSpec candidate = r.trigger;
    double cand_value = value;
    for (int attempt = 0; attempt <= (cfg.step_halving ? cfg.max_halvings : 0); ++attempt) {
      candidate = r.trigger;
      for (std::size_t k = 0; k < grad.size(); ++k) {
        const double v = candidate.pattern.data[k] + lr * grad[k];
        candidate.pattern.data[k] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
      cand_value = adaptive_objective(model, m, clean, candidate, cfg);
      if (!std::isfinite(cand_value)) throw NumericFailure("adaptive trigger", step);
      if (!cfg.step_halving || cand_value >= value) {
        accepted = true;
        break;
      }
      lr *= 0.5;
    }
    if (accepted) {
      r.trigger = std::move(candidate);
      std::tie(value, grad) = detail::adaptive_value_grad(model, m, clean, r.trigger, cfg, true);
    }
    r.objective_trace.push_back(value);
  }
  return r;
}

}  // namespace bsift
