#pragma once

// Shared differentiable core of the mask objective and the adaptive trigger
// objective: the mean KL divergence between a sample's reference prediction
// and the prediction on its masked, shifted, scaled and clamped copy.

#include <cmath>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "bsift/classifier.hpp"
#include "bsift/datamodel.hpp"
#include "bsift/error.hpp"

namespace bsift {

using MatrixD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Row-wise log-softmax of logits.
inline MatrixD log_probabilities(const Matrix& z) {
  MatrixD out(z.rows(), z.cols());
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const auto lp = log_softmax(std::span<const float>(z.row(i).data(), static_cast<std::size_t>(z.cols())));
    for (Eigen::Index k = 0; k < z.cols(); ++k) out(i, k) = lp[static_cast<std::size_t>(k)];
  }
  return out;
}

// D_KL(p || q) from log-probabilities.
template <typename RowA, typename RowB>
double kl_divergence(const RowA& logp, const RowB& logq) {
  double kl = 0.0;
  for (Eigen::Index k = 0; k < logp.size(); ++k) {
    const double p = std::exp(logp(k));
    if (p > 0.0) kl += p * (logp(k) - logq(k));
  }
  return kl;
}

struct ScaledKl {
  double value = 0.0;      // sum_i weight_i * mean_n KL_{i,n}
  Tensor grad_shifted;     // d value / d v, where v = (x - tau) * m; empty unless requested
  MatrixD grad_ref;        // d value / d reference logits; empty unless requested
};

// Evaluates sum_i weight_i * (1/|S|) sum_{n in S} KL(p_i || softmax(F(clamp(n * v_i, 0, 1))))
// for the masked-shifted inputs v and reference log-probabilities ref_logp
// (rows aligned with v). Gradients follow the clamp's inclusive subgradient
// convention: they pass where 0 <= n * v <= 1.
inline ScaledKl scaled_kl(const Classifier& model, const Tensor& shifted, const MatrixD& ref_logp,
                          std::span<const double> weights, std::span<const int> scales,
                          bool want_grad_shifted, bool want_grad_ref) {
  detail::require(!scales.empty(), "scale set is empty");
  detail::require(ref_logp.rows() == static_cast<Eigen::Index>(shifted.n) &&
                      weights.size() == shifted.n,
                  "reference predictions do not match batch");
  const double inv_s = 1.0 / static_cast<double>(scales.size());
  ScaledKl out;
  if (want_grad_shifted) out.grad_shifted = Tensor(shifted.n, shifted.shape);
  if (want_grad_ref) out.grad_ref = MatrixD::Zero(ref_logp.rows(), ref_logp.cols());

  Tensor scaled(shifted.n, shifted.shape);
  for (int n : scales) {
    scale_and_clamp(shifted.data, n, scaled.data);
    std::vector<double> kl(shifted.n, 0.0);
    MatrixD logq;
    auto cotangent = [&](const Matrix& z) {
      logq = log_probabilities(z);
      Matrix g(z.rows(), z.cols());
      for (Eigen::Index i = 0; i < z.rows(); ++i) {
        kl[static_cast<std::size_t>(i)] = kl_divergence(ref_logp.row(i), logq.row(i));
        const double c = weights[static_cast<std::size_t>(i)] * inv_s;
        for (Eigen::Index k = 0; k < z.cols(); ++k) {
          // d KL(p||softmax(z)) / dz_k = q_k - p_k
          g(i, k) = static_cast<float>(c * (std::exp(logq(i, k)) - std::exp(ref_logp(i, k))));
        }
      }
      return g;
    };

    if (want_grad_shifted) {
      Matrix z;
      const Tensor gu = model.vjp(scaled, cotangent, z);
      const float fn = static_cast<float>(n);
      for (std::size_t k = 0; k < shifted.data.size(); ++k) {
        const float nv = fn * shifted.data[k];
        if (nv >= 0.0f && nv <= 1.0f) out.grad_shifted.data[k] += fn * gu.data[k];
      }
    } else {
      cotangent(model.logits(scaled));
    }

    for (std::size_t i = 0; i < shifted.n; ++i) {
      if (!std::isfinite(kl[i])) throw NumericFailure("scaled KL", static_cast<long>(i));
      out.value += weights[i] * inv_s * kl[i];
      if (want_grad_ref) {
        // d KL(softmax(a)||q) / da_k = p_k (log p_k - log q_k - KL)
        const auto ii = static_cast<Eigen::Index>(i);
        for (Eigen::Index k = 0; k < ref_logp.cols(); ++k) {
          const double p = std::exp(ref_logp(ii, k));
          out.grad_ref(ii, k) += weights[i] * inv_s * p * (ref_logp(ii, k) - logq(ii, k) - kl[i]);
        }
      }
    }
  }
  return out;
}

}  // namespace bsift
