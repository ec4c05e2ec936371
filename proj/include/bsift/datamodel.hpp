#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <new>
#include <span>
#include <string>
#include <vector>

#include "bsift/error.hpp"

namespace bsift {

// Allocator with a fixed 64-byte alignment. Eigen's vectorized reductions
// peel a different number of leading elements depending on pointer
// alignment, so heap buffers with varying alignment would make sums (and
// hence training) differ from run to run.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) noexcept {
    return true;
  }
};

using FloatBuffer = std::vector<float, AlignedAllocator<float>>;

// Channel-height-width shape of one image.
struct ImageShape {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t size() const { return channels * height * width; }
  friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

inline std::string to_string(const ImageShape& s) {
  return std::to_string(s.channels) + "x" + std::to_string(s.height) + "x" +
         std::to_string(s.width);
}

// Dense rank-4 float tensor in N x C x H x W row-major order.
struct Tensor {
  std::size_t n = 0;
  ImageShape shape;
  FloatBuffer data;

  Tensor() = default;
  Tensor(std::size_t count, ImageShape s, float fill = 0.0f)
      : n(count), shape(s), data(count * s.size(), fill) {}

  std::size_t sample_size() const { return shape.size(); }

  std::span<float> sample(std::size_t i) {
    return {data.data() + i * sample_size(), sample_size()};
  }
  std::span<const float> sample(std::size_t i) const {
    return {data.data() + i * sample_size(), sample_size()};
  }

  float& at(std::size_t i, std::size_t c, std::size_t y, std::size_t x) {
    return data[((i * shape.channels + c) * shape.height + y) * shape.width + x];
  }
  float at(std::size_t i, std::size_t c, std::size_t y, std::size_t x) const {
    return data[((i * shape.channels + c) * shape.height + y) * shape.width + x];
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

// A single C x H x W image.
struct Image {
  ImageShape shape;
  FloatBuffer data;

  Image() = default;
  Image(ImageShape s, float fill = 0.0f) : shape(s), data(s.size(), fill) {}

  float& at(std::size_t c, std::size_t y, std::size_t x) {
    return data[(c * shape.height + y) * shape.width + x];
  }
  float at(std::size_t c, std::size_t y, std::size_t x) const {
    return data[(c * shape.height + y) * shape.width + x];
  }

  friend bool operator==(const Image&, const Image&) = default;
};

// Images in [0,1] with integer class labels.
struct ImageBatch {
  Tensor images;
  std::vector<int> labels;

  std::size_t size() const { return images.n; }
  const ImageShape& shape() const { return images.shape; }

  Image image(std::size_t i) const {
    Image out(images.shape);
    auto src = images.sample(i);
    std::copy(src.begin(), src.end(), out.data.begin());
    return out;
  }

  friend bool operator==(const ImageBatch&, const ImageBatch&) = default;
};

inline Tensor to_tensor(const Image& img) {
  Tensor t(1, img.shape);
  std::copy(img.data.begin(), img.data.end(), t.data.begin());
  return t;
}

// Rows `idx` of `batch`, in the given order.
inline ImageBatch subset(const ImageBatch& batch, std::span<const std::size_t> idx) {
  ImageBatch out;
  out.images = Tensor(idx.size(), batch.shape());
  out.labels.resize(idx.size());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    auto src = batch.images.sample(idx[k]);
    std::copy(src.begin(), src.end(), out.images.sample(k).begin());
    out.labels[k] = batch.labels[idx[k]];
  }
  return out;
}

// Throws InvalidArgument unless the batch is non-empty, pixels lie in [0,1]
// and labels lie in [0, num_classes).
inline void validate(const ImageBatch& batch, int num_classes) {
  detail::require(batch.size() >= 1, "image batch is empty");
  detail::require(batch.labels.size() == batch.size(), "label count does not match image count");
  detail::require(batch.images.data.size() == batch.size() * batch.shape().size(),
                  "pixel buffer does not match shape");
  for (float v : batch.images.data) {
    detail::require(v >= 0.0f && v <= 1.0f, "pixel outside [0,1]");
  }
  for (int y : batch.labels) {
    detail::require(y >= 0 && y < num_classes, "label " + std::to_string(y) + " outside class range");
  }
}

// Training set delivered by a third party: a mixture of clean and
// trigger-stamped, label-flipped samples. Ground-truth flags are carried for
// evaluation only; detection never reads them.
struct PoisonedDataset {
  ImageBatch batch;
  std::vector<bool> is_backdoor;
  int num_classes = 0;
  int target_label = 0;
  double gamma = 0.0;
  std::string attack_name;
  std::uint64_t seed = 0;

  std::size_t size() const { return batch.size(); }

  std::size_t poison_count() const {
    return static_cast<std::size_t>(std::count(is_backdoor.begin(), is_backdoor.end(), true));
  }

  friend bool operator==(const PoisonedDataset&, const PoisonedDataset&) = default;
};

// floor(gamma * n) with a small guard against 0.1 * 500 = 49.999...
inline std::size_t poison_quota(double gamma, std::size_t n) {
  return static_cast<std::size_t>(std::floor(gamma * static_cast<double>(n) + 1e-9));
}

inline void validate(const PoisonedDataset& d) {
  detail::require(d.num_classes >= 2, "num_classes must be at least 2");
  validate(d.batch, d.num_classes);
  detail::require(d.is_backdoor.size() == d.size(), "is_backdoor length does not match image count");
  detail::require(d.target_label >= 0 && d.target_label < d.num_classes, "target_label outside class range");
  // gamma == 0 marks a clean bundle (no backdoor rows).
  detail::require(d.gamma >= 0.0 && d.gamma < 1.0, "gamma must lie in [0,1)");
  detail::require(d.poison_count() == poison_quota(d.gamma, d.size()),
                  "backdoor flag count does not equal floor(gamma * N)");
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d.is_backdoor[i]) {
      detail::require(d.batch.labels[i] == d.target_label, "backdoor sample without target label");
    }
  }
}

// Set of integer scale factors. Odd cardinality keeps MSPC away from zero.
class ScaleSet {
 public:
  explicit ScaleSet(std::vector<int> scales) : scales_(std::move(scales)) {
    detail::require(!scales_.empty(), "scale set is empty");
    std::vector<int> sorted = scales_;
    std::sort(sorted.begin(), sorted.end());
    detail::require(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end(),
                    "scale set contains duplicates");
    detail::require(sorted.front() >= 2, "scales must be at least 2");
    detail::require(scales_.size() % 2 == 1, "scale set cardinality must be odd");
  }

  // {first, first+1, ..., last}
  static ScaleSet range(int first, int last) {
    std::vector<int> s;
    for (int n = first; n <= last; ++n) s.push_back(n);
    return ScaleSet(std::move(s));
  }

  static ScaleSet default_set() { return range(2, 12); }

  std::span<const int> values() const { return scales_; }
  std::size_t size() const { return scales_.size(); }
  operator std::span<const int>() const { return scales_; }

  friend bool operator==(const ScaleSet&, const ScaleSet&) = default;

 private:
  std::vector<int> scales_;
};

// Global trigger-focus map, one value per input element, each in [0,1].
class Mask {
 public:
  Mask() = default;
  explicit Mask(Image values) : values_(std::move(values)) {
    for (float v : values_.data) {
      detail::require(v >= 0.0f && v <= 1.0f, "mask entry outside [0,1]");
    }
  }

  static Mask filled(ImageShape shape, float value) { return Mask(Image(shape, value)); }
  static Mask ones(ImageShape shape) { return filled(shape, 1.0f); }

  const ImageShape& shape() const { return values_.shape; }
  const Image& image() const { return values_; }
  std::span<const float> values() const { return values_.data; }

  double l1_norm() const {
    double s = 0.0;
    for (float v : values_.data) s += std::fabs(v);
    return s;
  }

  friend bool operator==(const Mask&, const Mask&) = default;

 private:
  Image values_;
};

enum class ScoreKind { Spc, Mspc };

struct ScoreVector {
  std::vector<double> scores;
  ScoreKind kind = ScoreKind::Spc;

  std::size_t size() const { return scores.size(); }
  friend bool operator==(const ScoreVector&, const ScoreVector&) = default;
};

// Binary split; 1 marks a predicted backdoor sample.
struct SplitVector {
  std::vector<std::uint8_t> w;

  std::size_t size() const { return w.size(); }
  std::size_t count() const { return static_cast<std::size_t>(std::count(w.begin(), w.end(), 1)); }
  friend bool operator==(const SplitVector&, const SplitVector&) = default;
};

// ---------------------------------------------------------------------------
// Scale / mask primitives

// min(n * x, 1) elementwise, written into `out` (same length as `in`).
inline void scale_and_clamp(std::span<const float> in, int n, std::span<float> out) {
  const float s = static_cast<float>(n);
  for (std::size_t k = 0; k < in.size(); ++k) {
    out[k] = std::clamp(s * in[k], 0.0f, 1.0f);
  }
}

inline Tensor scale_and_clamp(const Tensor& x, int n) {
  detail::require(n >= 1, "scale must be at least 1");
  Tensor out(x.n, x.shape);
  scale_and_clamp(x.data, n, out.data);
  return out;
}

inline ImageBatch scale_and_clamp(const ImageBatch& x, int n) {
  return {scale_and_clamp(x.images, n), x.labels};
}

inline Image scale_and_clamp(const Image& x, int n) {
  detail::require(n >= 1, "scale must be at least 1");
  Image out(x.shape);
  scale_and_clamp(x.data, n, out.data);
  return out;
}

// (x - tau) * m elementwise; no clamping, values may go negative.
inline void apply_mask_shift(std::span<const float> x, std::span<const float> mask, float tau,
                             std::span<float> out) {
  for (std::size_t k = 0; k < x.size(); ++k) out[k] = (x[k] - tau) * mask[k];
}

inline Tensor apply_mask_shift(const Tensor& x, const Mask& m, double tau) {
  detail::require(x.shape == m.shape(), "mask shape " + to_string(m.shape()) +
                                            " does not match image shape " + to_string(x.shape));
  detail::require(tau >= 0.0 && tau < 1.0, "tau must lie in [0,1)");
  Tensor out(x.n, x.shape);
  for (std::size_t i = 0; i < x.n; ++i) {
    apply_mask_shift(x.sample(i), m.values(), static_cast<float>(tau), out.sample(i));
  }
  return out;
}

inline ImageBatch apply_mask_shift(const ImageBatch& x, const Mask& m, double tau) {
  return {apply_mask_shift(x.images, m, tau), x.labels};
}

inline Image apply_mask_shift(const Image& x, const Mask& m, double tau) {
  detail::require(x.shape == m.shape(), "mask shape does not match image shape");
  detail::require(tau >= 0.0 && tau < 1.0, "tau must lie in [0,1)");
  Image out(x.shape);
  apply_mask_shift(x.data, m.values(), static_cast<float>(tau), out.data);
  return out;
}

}  // namespace bsift
