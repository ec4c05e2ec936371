#pragma once

// Mask-aware scaled prediction consistency (MSPC) and the bi-level solver
// that learns the trigger-focus mask while splitting the training set.
//
//   mspc(x; m, tau) = (1/|S|) sum_n phi(argmax F(x) - argmax F(clamp(n (x - tau) * m)))
//
// Lower level: given the split w, fit m by minimizing
//
//   (1/N) sum_i w_i (1/|S|) sum_n KL(F(x_i) || F(clamp(n (x_i - tau) * m))) + lambda |m|_1
//
// over m in [0,1]^(CxHxW). Upper level: given m, w_i = 1 iff mspc_i > 0,
// which is the exact minimizer of sum_i (1 - w_i) mspc_i. The two levels are
// alternated starting from the upper level with m = 1.

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "bsift/classifier.hpp"
#include "bsift/datamodel.hpp"
#include "bsift/error.hpp"
#include "bsift/kl_consistency.hpp"
#include "bsift/rng.hpp"
#include "bsift/spc.hpp"

namespace bsift {

inline constexpr int phi(int x) { return x == 0 ? 1 : -1; }

namespace detail {

inline void require_odd_scales(std::span<const int> scales) {
  require(!scales.empty(), "scale set is empty");
  require(scales.size() % 2 == 1, "MSPC needs an odd number of scales");
}

inline Tensor masked_shifted(const Tensor& x, const Mask& m, double tau) { return apply_mask_shift(x, m, tau); }

}  // namespace detail

// Mean of phi over the scales, written as 2 * (agreements / |S|) - 1 so that
// with m = 1 and tau = 0 it equals 2 * spc - 1 bit for bit.
inline double mspc_from_count(int agree, std::size_t num_scales) {
  return 2.0 * (static_cast<double>(agree) / static_cast<double>(num_scales)) - 1.0;
}

inline std::vector<int> mspc_agreements(const Classifier& model, const Tensor& x, const Mask& m, double tau,
                                        std::span<const int> scales) {
  detail::require_odd_scales(scales);
  const Tensor shifted = detail::masked_shifted(x, m, tau);
  const auto reference = predict(model, x);
  return agreement_counts(model, shifted, reference, scales,
                          [](const Tensor& t, int n) { return scale_and_clamp(t, n); });
}

inline double mspc_loss(const Classifier& model, const Image& x, const Mask& m, double tau,
                        std::span<const int> scales) {
  return mspc_from_count(mspc_agreements(model, to_tensor(x), m, tau, scales)[0], scales.size());
}

inline ScoreVector mspc_score_dataset(const Classifier& model, const Tensor& x, const Mask& m, double tau,
                                      std::span<const int> scales) {
  const auto counts = mspc_agreements(model, x, m, tau, scales);
  ScoreVector out{std::vector<double>(x.n), ScoreKind::Mspc};
  for (std::size_t i = 0; i < x.n; ++i) out.scores[i] = mspc_from_count(counts[i], scales.size());
  return out;
}

// Per-sample (1/|S|) sum_n KL(F(x_i) || F(clamp(n (x_i - tau) * m))): the
// unweighted lower-level term. Used to order samples that tie on MSPC; a
// larger value means the prediction moves more under masked scaling.
inline std::vector<double> masked_kl_per_sample(const Classifier& model, const Tensor& x, const Mask& m, double tau,
                                                std::span<const int> scales, std::size_t chunk = 256) {
  detail::require(!scales.empty(), "scale set is empty");
  std::vector<double> out(x.n, 0.0);
  const double inv_s = 1.0 / static_cast<double>(scales.size());
  for (std::size_t begin = 0; begin < x.n; begin += chunk) {
    const std::size_t end = std::min(x.n, begin + chunk);
    const Tensor t = detail::slice(x, begin, end);
    const MatrixD ref = log_probabilities(model.logits(t));
    const Tensor v = detail::masked_shifted(t, m, tau);
    for (int n : scales) {
      const MatrixD logq = log_probabilities(model.logits(scale_and_clamp(v, n)));
      for (std::size_t i = begin; i < end; ++i) {
        const auto r = static_cast<Eigen::Index>(i - begin);
        out[i] += inv_s * kl_divergence(ref.row(r), logq.row(r));
      }
    }
  }
  return out;
}

// w_i = 1 iff mspc_i > 0.
inline SplitVector upper_level_split(const ScoreVector& mspc) {
  detail::require(mspc.kind == ScoreKind::Mspc, "upper level split needs MSPC scores");
  SplitVector w{std::vector<std::uint8_t>(mspc.size(), 0)};
  for (std::size_t i = 0; i < mspc.size(); ++i) {
    detail::require(mspc.scores[i] != 0.0,
                    "MSPC score of sample " + std::to_string(i) + " is exactly 0 (even scale count?)");
    w.w[i] = mspc.scores[i] > 0.0 ? 1 : 0;
  }
  return w;
}

// ---------------------------------------------------------------------------
// Lower level

struct BilevelConfig {
  double tau = 0.1;
  double lambda_l1 = 1e-3;
  std::vector<int> scales = {2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12};
  int lower_epochs = 10;
  int outer_rounds = 4;
  double lower_lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t batch_size = 1000;
  std::uint64_t seed = 0;
  // Deterministic test mode: every epoch is one full-gradient step, and a
  // step that would raise the objective is retried with half the step size.
  bool full_batch_mode = false;
  int max_halvings = 30;
  std::size_t chunk = 128;  // samples per forward/backward pass
};

inline void validate(const BilevelConfig& c) {
  detail::require(c.tau >= 0.0 && c.tau < 1.0, "tau must lie in [0,1)");
  detail::require(c.lambda_l1 >= 0.0, "lambda must be non-negative");
  detail::require_odd_scales(c.scales);
  ScaleSet check(c.scales);
  detail::require(c.lower_epochs >= 0 && c.outer_rounds >= 0, "epoch and round counts must be non-negative");
  detail::require(c.lower_lr > 0.0, "lower_lr must be positive");
  detail::require(c.momentum >= 0.0 && c.momentum < 1.0, "momentum must lie in [0,1)");
  detail::require(c.weight_decay >= 0.0, "weight_decay must be non-negative");
  detail::require(c.batch_size >= 1 && c.chunk >= 1, "batch sizes must be positive");
}

inline nlohmann::json to_json(const BilevelConfig& c) {
  return {{"tau", c.tau},
          {"lambda", c.lambda_l1},
          {"scales", c.scales},
          {"lower_epochs", c.lower_epochs},
          {"outer_rounds", c.outer_rounds},
          {"lower_lr", c.lower_lr},
          {"momentum", c.momentum},
          {"weight_decay", c.weight_decay},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"full_batch_mode", c.full_batch_mode}};
}

inline void update_from_json(BilevelConfig& c, const nlohmann::json& j) {
  c.tau = j.value("tau", c.tau);
  c.lambda_l1 = j.value("lambda", c.lambda_l1);
  c.scales = j.value("scales", c.scales);
  c.lower_epochs = j.value("lower_epochs", c.lower_epochs);
  c.outer_rounds = j.value("outer_rounds", c.outer_rounds);
  c.lower_lr = j.value("lower_lr", c.lower_lr);
  c.momentum = j.value("momentum", c.momentum);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  c.full_batch_mode = j.value("full_batch_mode", c.full_batch_mode);
}

// Value of the lower-level objective and, optionally, its gradient.
struct MaskObjective {
  double kl_sum = 0.0;  // sum_i w_i (1/|S|) sum_n KL_{i,n}
  double value = 0.0;   // kl_sum / N + lambda |m|_1
  std::vector<double> grad;
};

// Lower-level objective restricted to the rows of `x` listed in `rows`
// (each with w_i = 1, normalized by `normalizer`). Rows with w_i = 0 have
// zero weight and are never evaluated. `ref_logp` holds the reference
// log-probabilities of those rows.
inline MaskObjective mask_objective_rows(const Classifier& model, const Tensor& x,
                                         std::span<const std::size_t> rows, const MatrixD& ref_logp,
                                         const Mask& m, const BilevelConfig& cfg, double normalizer,
                                         bool want_grad) {
  const ImageShape shape = x.shape;
  const std::size_t dim = shape.size();
  const auto tau = static_cast<float>(cfg.tau);
  MaskObjective out;
  if (want_grad) out.grad.assign(dim, 0.0);
  for (std::size_t begin = 0; begin < rows.size(); begin += cfg.chunk) {
    const std::size_t end = std::min(rows.size(), begin + cfg.chunk);
    Tensor v(end - begin, shape);
    MatrixD ref(static_cast<Eigen::Index>(end - begin), ref_logp.cols());
    for (std::size_t k = begin; k < end; ++k) {
      apply_mask_shift(x.sample(rows[k]), m.values(), tau, v.sample(k - begin));
      ref.row(static_cast<Eigen::Index>(k - begin)) = ref_logp.row(static_cast<Eigen::Index>(k));
    }
    const std::vector<double> weights(end - begin, 1.0);
    const ScaledKl kl = scaled_kl(model, v, ref, weights, cfg.scales, want_grad, false);
    out.kl_sum += kl.value;
    if (!want_grad) continue;
    // d v / d m = x - tau
    for (std::size_t k = begin; k < end; ++k) {
      auto gv = kl.grad_shifted.sample(k - begin);
      auto xs = x.sample(rows[k]);
      for (std::size_t p = 0; p < dim; ++p) {
        out.grad[p] += static_cast<double>(gv[p]) * static_cast<double>(xs[p] - tau);
      }
    }
  }
  const double l1 = m.l1_norm();
  out.value = out.kl_sum / normalizer + cfg.lambda_l1 * l1;
  if (want_grad) {
    const auto mv = m.values();
    for (std::size_t p = 0; p < dim; ++p) {
      out.grad[p] = out.grad[p] / normalizer + cfg.lambda_l1 * (mv[p] > 0.0f ? 1.0 : 0.0);
    }
  }
  return out;
}

inline std::vector<std::size_t> selected_rows(const SplitVector& w) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (w.w[i] == 1) rows.push_back(i);
  }
  return rows;
}

// Reference log-probabilities F(x_i) for the listed rows; constants of the
// lower level.
inline MatrixD reference_log_probs(const Classifier& model, const Tensor& x, std::span<const std::size_t> rows,
                                   std::size_t chunk = 256) {
  MatrixD out(static_cast<Eigen::Index>(rows.size()), model.num_classes());
  for (std::size_t begin = 0; begin < rows.size(); begin += chunk) {
    const std::size_t end = std::min(rows.size(), begin + chunk);
    Tensor t(end - begin, x.shape);
    for (std::size_t k = begin; k < end; ++k) {
      auto src = x.sample(rows[k]);
      std::copy(src.begin(), src.end(), t.sample(k - begin).begin());
    }
    out.middleRows(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(end - begin)) =
        log_probabilities(model.logits(t));
  }
  return out;
}

// Full lower-level objective over the whole dataset (normalized by N).
inline MaskObjective lower_level_objective(const Classifier& model, const Tensor& x, const SplitVector& w,
                                           const Mask& m, const BilevelConfig& cfg, bool want_grad = false) {
  detail::require(w.size() == x.n, "split length does not match dataset");
  detail::require(m.shape() == x.shape, "mask shape does not match images");
  const auto rows = selected_rows(w);
  const MatrixD ref = reference_log_probs(model, x, rows);
  return mask_objective_rows(model, x, rows, ref, m, cfg, static_cast<double>(x.n), want_grad);
}

struct MaskResult {
  Mask mask;
  std::vector<double> objective_trace;  // one value per epoch
  double final_objective = std::numeric_limits<double>::quiet_NaN();  // full-batch mode only
};

namespace detail {

inline Mask project(std::span<const float> m, std::span<const double> direction, double lr, ImageShape shape) {
  Image img(shape);
  for (std::size_t p = 0; p < img.data.size(); ++p) {
    img.data[p] = static_cast<float>(std::clamp(static_cast<double>(m[p]) - lr * direction[p], 0.0, 1.0));
  }
  return Mask(std::move(img));
}

}  // namespace detail

// Called after every mask update with the epoch and the new mask.
using MaskStepCallback = std::function<void(int epoch, const Mask& m)>;

// Lower-level solver: SGD with momentum and weight decay on the mask,
// projected onto [0,1] after every step.
inline MaskResult optimize_mask(const Classifier& model, const Tensor& x, const SplitVector& w,
                                const BilevelConfig& cfg, const Mask& init, const MaskStepCallback& on_step = {}) {
  validate(cfg);
  detail::require(w.size() == x.n, "split length does not match dataset");
  detail::require(init.shape() == x.shape, "mask shape does not match images");
  for (auto v : w.w) detail::require(v <= 1, "split vector must be binary");
  const auto rows = selected_rows(w);
  detail::require(!rows.empty(), "lower level has empty support");

  const MatrixD ref = reference_log_probs(model, x, rows);
  const std::size_t dim = x.shape.size();
  std::vector<double> velocity(dim, 0.0), direction(dim);
  MaskResult r{init, {}};

  auto make_direction = [&](const Mask& m, const std::vector<double>& grad) {
    const auto mv = m.values();
    for (std::size_t p = 0; p < dim; ++p) {
      direction[p] = cfg.momentum * velocity[p] + grad[p] + cfg.weight_decay * mv[p];
    }
  };

  if (cfg.full_batch_mode) {
    const double n = static_cast<double>(x.n);
    MaskObjective cur = mask_objective_rows(model, x, rows, ref, r.mask, cfg, n, true);
    for (int epoch = 0; epoch < cfg.lower_epochs; ++epoch) {
      if (!std::isfinite(cur.value)) throw NumericFailure("optimize_mask", epoch);
      r.objective_trace.push_back(cur.value);
      make_direction(r.mask, cur.grad);
      double lr = cfg.lower_lr;
      for (int attempt = 0; attempt <= cfg.max_halvings; ++attempt, lr *= 0.5) {
        Mask cand = detail::project(r.mask.values(), direction, lr, x.shape);
        MaskObjective next = mask_objective_rows(model, x, rows, ref, cand, cfg, n, true);
        if (!std::isfinite(next.value)) throw NumericFailure("optimize_mask", epoch);
        if (next.value <= cur.value) {
          velocity = direction;
          r.mask = std::move(cand);
          cur = std::move(next);
          if (on_step) on_step(epoch, r.mask);
          break;
        }
      }
    }
    r.final_objective = cur.value;
    return r;
  }

  Rng rng(cfg.seed ^ 0x5eedfacecafef00dULL);
  std::vector<std::size_t> in_row(x.n, SIZE_MAX);  // dataset index -> row in `ref`
  for (std::size_t k = 0; k < rows.size(); ++k) in_row[rows[k]] = k;
  for (int epoch = 0; epoch < cfg.lower_epochs; ++epoch) {
    const auto order = rng.permutation(x.n);
    double epoch_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t begin = 0; begin < x.n; begin += cfg.batch_size) {
      const std::size_t end = std::min(x.n, begin + cfg.batch_size);
      std::vector<std::size_t> batch_rows;
      std::vector<Eigen::Index> ref_rows;
      for (std::size_t k = begin; k < end; ++k) {
        if (in_row[order[k]] != SIZE_MAX) {
          batch_rows.push_back(order[k]);
          ref_rows.push_back(static_cast<Eigen::Index>(in_row[order[k]]));
        }
      }
      MatrixD batch_ref(static_cast<Eigen::Index>(ref_rows.size()), ref.cols());
      for (std::size_t k = 0; k < ref_rows.size(); ++k) batch_ref.row(static_cast<Eigen::Index>(k)) = ref.row(ref_rows[k]);
      const MaskObjective obj = mask_objective_rows(model, x, batch_rows, batch_ref, r.mask, cfg,
                                                    static_cast<double>(end - begin), true);
      if (!std::isfinite(obj.value)) throw NumericFailure("optimize_mask", epoch);
      epoch_sum += obj.value;
      ++batches;
      make_direction(r.mask, obj.grad);
      velocity = direction;
      r.mask = detail::project(r.mask.values(), direction, cfg.lower_lr, x.shape);
      if (on_step) on_step(epoch, r.mask);
    }
    r.objective_trace.push_back(epoch_sum / static_cast<double>(batches));
  }
  return r;
}

// ---------------------------------------------------------------------------
// Bi-level driver

struct BilevelResult {
  Mask mask;
  ScoreVector mspc;
  SplitVector w;
  std::vector<double> masked_kl;  // per-sample tie-break key under the final mask
  std::vector<std::vector<double>> objective_trace;  // [round][epoch]
  std::vector<std::size_t> selected_per_round;        // |w| fed to each lower level
  std::vector<std::string> warnings;
};

using RoundCallback = std::function<void(int round, const ScoreVector& mspc, const SplitVector& w)>;

inline BilevelResult run_bilevel(const Classifier& model, const Tensor& x, const BilevelConfig& cfg,
                                 const RoundCallback& on_round = {}) {
  validate(cfg);
  detail::require(x.n >= 1, "dataset is empty");
  BilevelResult r;
  r.mask = Mask::ones(x.shape);
  for (int round = 0; round < cfg.outer_rounds; ++round) {
    const ScoreVector mspc = mspc_score_dataset(model, x, r.mask, cfg.tau, cfg.scales);
    const SplitVector w = upper_level_split(mspc);
    if (on_round) on_round(round, mspc, w);
    r.selected_per_round.push_back(w.count());
    if (w.count() == 0) {
      r.warnings.push_back("round " + std::to_string(round) +
                           ": upper level selected no samples; lower level skipped, mask unchanged");
      r.objective_trace.emplace_back();
      continue;
    }
    MaskResult lower = optimize_mask(model, x, w, cfg, r.mask);
    r.mask = std::move(lower.mask);
    r.objective_trace.push_back(std::move(lower.objective_trace));
  }
  r.mspc = mspc_score_dataset(model, x, r.mask, cfg.tau, cfg.scales);
  r.w = upper_level_split(r.mspc);
  r.masked_kl = masked_kl_per_sample(model, x, r.mask, cfg.tau, cfg.scales, cfg.chunk);
  return r;
}

}  // namespace bsift
