#pragma once

// Seeded synthetic stand-in for CIFAR-10: 32x32 RGB images of ten colored
// geometric shapes on noisy backgrounds. The class is the shape. Image
// brightness varies from dim to mid-tone, and foreground and background
// differ in color more than brightness, so most images wash out under large
// pixel scaling the way natural photos do.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>

#include "bsift/bundle_io.hpp"
#include "bsift/datamodel.hpp"
#include "bsift/error.hpp"
#include "bsift/rng.hpp"

namespace bsift {

inline constexpr int kToyClasses = 10;

namespace detail {

// Membership test for class `k` at offset (dx, dy) from the center, radius r.
inline bool toy_shape_contains(int k, double dx, double dy, double r) {
  const double ax = std::fabs(dx), ay = std::fabs(dy);
  switch (k) {
    case 0:  // disc
      return dx * dx + dy * dy <= r * r;
    case 1:  // square
      return std::max(ax, ay) <= 0.8 * r;
    case 2:  // triangle, apex up
      return dy >= -0.8 * r && dy <= 0.8 * r && ax <= 0.5 * (dy + 0.8 * r);
    case 3:  // plus
      return (ax <= r / 3 && ay <= r) || (ay <= r / 3 && ax <= r);
    case 4: {  // ring
      const double d = std::sqrt(dx * dx + dy * dy);
      return d <= r && d >= 0.55 * r;
    }
    case 5:  // diamond
      return ax + ay <= r;
    case 6:  // X
      return std::max(ax, ay) <= 0.85 * r && (std::fabs(dx - dy) <= r / 3.5 || std::fabs(dx + dy) <= r / 3.5);
    case 7:  // two horizontal bars
      return ax <= r && std::fabs(ay - 0.5 * r) <= r / 5;
    case 8:  // two vertical bars
      return ay <= r && std::fabs(ax - 0.5 * r) <= r / 5;
    case 9:  // hollow square
      return std::max(ax, ay) <= 0.85 * r && std::max(ax, ay) >= 0.5 * r;
    default:
      return false;
  }
}

}  // namespace detail

// n images with labels cycling through the classes, pixels quantized to 8 bits.
inline ImageBatch make_toy_images(std::size_t n, std::uint64_t seed, ImageShape shape = {3, 32, 32}) {
  detail::require(n >= 1, "toy dataset size must be positive");
  detail::require(shape.channels >= 1 && shape.height >= 8 && shape.width >= 8, "toy image too small");
  Rng rng(seed);
  ImageBatch out;
  out.images = Tensor(n, shape);
  out.labels.resize(n);
  const double h = static_cast<double>(shape.height), w = static_cast<double>(shape.width);
  for (std::size_t i = 0; i < n; ++i) {
    const int k = static_cast<int>(i % kToyClasses);
    out.labels[i] = k;
    std::vector<double> fg(shape.channels), bg(shape.channels);
    const double base = 0.15 + 0.6 * rng.uniform();
    for (std::size_t c = 0; c < shape.channels; ++c) {
      bg[c] = std::clamp(base + 0.15 * (rng.uniform() - 0.5), 0.0, 1.0);
      const double contrast = 0.2 + 0.15 * rng.uniform();
      fg[c] = bg[c] - contrast >= 0.05 ? bg[c] - contrast : bg[c] + contrast;
    }
    const double r = (0.22 + 0.12 * rng.uniform()) * std::min(h, w);
    const double cx = w / 2 + (rng.uniform() - 0.5) * 0.25 * w;
    const double cy = h / 2 + (rng.uniform() - 0.5) * 0.25 * h;
    auto img = out.images.sample(i);
    for (std::size_t y = 0; y < shape.height; ++y) {
      for (std::size_t x = 0; x < shape.width; ++x) {
        const bool inside = detail::toy_shape_contains(k, static_cast<double>(x) + 0.5 - cx,
                                                        static_cast<double>(y) + 0.5 - cy, r);
        for (std::size_t c = 0; c < shape.channels; ++c) {
          const double v = std::clamp((inside ? fg[c] : bg[c]) + 0.04 * rng.normal(), 0.0, 1.0);
          img[(c * shape.height + y) * shape.width + x] = decode_pixel(encode_pixel(static_cast<float>(v)));
        }
      }
    }
  }
  // Interleaved labels would leak order into minibatches; shuffle rows.
  const auto perm = rng.permutation(n);
  return subset(out, perm);
}

// Clean dataset wrapper used for bundles that carry no backdoor.
inline PoisonedDataset as_clean_dataset(ImageBatch batch, int num_classes, std::uint64_t seed) {
  PoisonedDataset d;
  d.is_backdoor.assign(batch.size(), false);
  d.batch = std::move(batch);
  d.num_classes = num_classes;
  d.target_label = 0;
  d.gamma = 0.0;
  d.attack_name = "none";
  d.seed = seed;
  return d;
}

}  // namespace bsift
