#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include <Eigen/Core>

#include "bsift/datamodel.hpp"
#include "bsift/parallel.hpp"

namespace bsift {

// Row-major float matrix; one row per sample.
using Matrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// A differentiable image classifier. Implementations must be safe for
// concurrent calls to the const members.
class Classifier {
 public:
  virtual ~Classifier() = default;

  virtual int num_classes() const = 0;
  virtual ImageShape input_shape() const = 0;

  // Pre-softmax scores, N x num_classes.
  virtual Matrix logits(const Tensor& x) const = 0;

  // Gradient w.r.t. x of sum_{i,k} grad_logits(i,k) * logits(x)(i,k).
  virtual Tensor input_gradient(const Tensor& x, const Matrix& grad_logits) const = 0;

  // Forward pass followed by a vector-Jacobian product whose cotangent is
  // computed from the logits by `grad_fn`. Returns the input gradient and
  // leaves the logits in `z`. Overridden by models that can reuse the
  // forward pass.
  virtual Tensor vjp(const Tensor& x, const std::function<Matrix(const Matrix&)>& grad_fn,
                     Matrix& z) const {
    z = logits(x);
    return input_gradient(x, grad_fn(z));
  }
};

inline void softmax_rows_inplace(Matrix& z) {
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const float mx = z.row(i).maxCoeff();
    double sum = 0.0;
    for (Eigen::Index k = 0; k < z.cols(); ++k) {
      const double e = std::exp(static_cast<double>(z(i, k) - mx));
      z(i, k) = static_cast<float>(e);
      sum += e;
    }
    z.row(i) /= static_cast<float>(sum);
  }
}

// Log-softmax in double; used wherever KL terms are formed.
inline std::vector<double> log_softmax(std::span<const float> z) {
  float mx = z[0];
  for (float v : z) mx = std::max(mx, v);
  double sum = 0.0;
  for (float v : z) sum += std::exp(static_cast<double>(v - mx));
  const double lse = static_cast<double>(mx) + std::log(sum);
  std::vector<double> out(z.size());
  for (std::size_t k = 0; k < z.size(); ++k) out[k] = static_cast<double>(z[k]) - lse;
  return out;
}

// Index of the largest entry; ties go to the lowest index.
template <typename Row>
int argmax(const Row& row) {
  int best = 0;
  for (Eigen::Index k = 1; k < row.size(); ++k) {
    if (row(k) > row(best)) best = static_cast<int>(k);
  }
  return best;
}

inline Matrix probabilities(const Classifier& model, const Tensor& x) {
  Matrix z = model.logits(x);
  softmax_rows_inplace(z);
  return z;
}

namespace detail {

inline Tensor slice(const Tensor& x, std::size_t begin, std::size_t end) {
  Tensor out(end - begin, x.shape);
  std::copy(x.data.begin() + static_cast<std::ptrdiff_t>(begin * x.sample_size()),
            x.data.begin() + static_cast<std::ptrdiff_t>(end * x.sample_size()), out.data.begin());
  return out;
}

}  // namespace detail

// Predicted class per sample, evaluated in chunks across workers.
inline std::vector<int> predict(const Classifier& model, const Tensor& x, std::size_t chunk = 256) {
  std::vector<int> out(x.n);
  const std::size_t chunks = (x.n + chunk - 1) / chunk;
  parallel_for(chunks, [&](std::size_t c0, std::size_t c1) {
    for (std::size_t c = c0; c < c1; ++c) {
      const std::size_t begin = c * chunk;
      const std::size_t end = std::min(x.n, begin + chunk);
      const Matrix z = model.logits(detail::slice(x, begin, end));
      for (std::size_t i = begin; i < end; ++i) {
        out[i] = argmax(z.row(static_cast<Eigen::Index>(i - begin)));
      }
    }
  });
  return out;
}

}  // namespace bsift
