#pragma once

// Layers of the small image classifiers. Every layer works on whole
// N x C x H x W batches and provides the backward pass needed both for
// parameter training and for gradients with respect to the input image.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "bsift/datamodel.hpp"
#include "bsift/rng.hpp"

namespace bsift::nn {

using MatrixRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatrixRM>;
using ConstMapRM = Eigen::Map<const MatrixRM>;

// Parameter gradients for one layer, in the same order as params().
using GradSlice = std::span<FloatBuffer>;

// 3x3 convolution, stride 1, zero padding 1.
struct Conv2d {
  std::size_t in_ch = 0;
  std::size_t out_ch = 0;
  FloatBuffer weight;  // out_ch x (in_ch * 9)
  FloatBuffer bias;    // out_ch

  static constexpr std::size_t kKernel = 3;

  Conv2d() = default;
  Conv2d(std::size_t in, std::size_t out)
      : in_ch(in), out_ch(out), weight(out * in * 9, 0.0f), bias(out, 0.0f) {}

  std::size_t patch() const { return in_ch * kKernel * kKernel; }

  ImageShape out_shape(ImageShape in) const { return {out_ch, in.height, in.width}; }

  void init(Rng& rng) {
    const double sd = std::sqrt(2.0 / static_cast<double>(patch()));
    for (float& v : weight) v = static_cast<float>(sd * rng.normal());
    std::fill(bias.begin(), bias.end(), 0.0f);
  }

  std::vector<std::span<float>> params() { return {weight, bias}; }

  // cols is (in_ch*9) x (H*W).
  void im2col(std::span<const float> img, std::size_t h, std::size_t w, MatrixRM& cols) const {
    cols.resize(static_cast<Eigen::Index>(patch()), static_cast<Eigen::Index>(h * w));
    for (std::size_t c = 0; c < in_ch; ++c) {
      const float* src = img.data() + c * h * w;
      for (std::size_t ky = 0; ky < kKernel; ++ky) {
        for (std::size_t kx = 0; kx < kKernel; ++kx) {
          float* dst = cols.data() + ((c * kKernel + ky) * kKernel + kx) * h * w;
          for (std::size_t y = 0; y < h; ++y) {
            const long sy = static_cast<long>(y + ky) - 1;
            float* drow = dst + y * w;
            if (sy < 0 || sy >= static_cast<long>(h)) {
              std::fill(drow, drow + w, 0.0f);
              continue;
            }
            const float* srow = src + static_cast<std::size_t>(sy) * w;
            for (std::size_t x = 0; x < w; ++x) {
              const long sx = static_cast<long>(x + kx) - 1;
              drow[x] = (sx < 0 || sx >= static_cast<long>(w)) ? 0.0f : srow[sx];
            }
          }
        }
      }
    }
  }

  void col2im_add(const MatrixRM& cols, std::size_t h, std::size_t w, std::span<float> img) const {
    for (std::size_t c = 0; c < in_ch; ++c) {
      float* dst = img.data() + c * h * w;
      for (std::size_t ky = 0; ky < kKernel; ++ky) {
        for (std::size_t kx = 0; kx < kKernel; ++kx) {
          const float* src = cols.data() + ((c * kKernel + ky) * kKernel + kx) * h * w;
          for (std::size_t y = 0; y < h; ++y) {
            const long sy = static_cast<long>(y + ky) - 1;
            if (sy < 0 || sy >= static_cast<long>(h)) continue;
            float* drow = dst + static_cast<std::size_t>(sy) * w;
            const float* srow = src + y * w;
            for (std::size_t x = 0; x < w; ++x) {
              const long sx = static_cast<long>(x + kx) - 1;
              if (sx >= 0 && sx < static_cast<long>(w)) drow[sx] += srow[x];
            }
          }
        }
      }
    }
  }

  void forward(const Tensor& in, Tensor& out) const {
    const std::size_t h = in.shape.height, w = in.shape.width, hw = h * w;
    out = Tensor(in.n, out_shape(in.shape));
    const ConstMapRM wmat(weight.data(), static_cast<Eigen::Index>(out_ch),
                          static_cast<Eigen::Index>(patch()));
    const Eigen::Map<const Eigen::VectorXf> b(bias.data(), static_cast<Eigen::Index>(out_ch));
    MatrixRM cols;
    for (std::size_t i = 0; i < in.n; ++i) {
      im2col(in.sample(i), h, w, cols);
      MapRM o(out.sample(i).data(), static_cast<Eigen::Index>(out_ch), static_cast<Eigen::Index>(hw));
      o.noalias() = wmat * cols;
      o.colwise() += b;
    }
  }

  void backward(const Tensor& in, const Tensor& gout, Tensor* gin, GradSlice grads) const {
    const std::size_t h = in.shape.height, w = in.shape.width, hw = h * w;
    const ConstMapRM wmat(weight.data(), static_cast<Eigen::Index>(out_ch),
                          static_cast<Eigen::Index>(patch()));
    if (gin) *gin = Tensor(in.n, in.shape);
    MatrixRM cols, gcols;
    for (std::size_t i = 0; i < in.n; ++i) {
      const ConstMapRM g(gout.sample(i).data(), static_cast<Eigen::Index>(out_ch),
                         static_cast<Eigen::Index>(hw));
      if (!grads.empty()) {
        im2col(in.sample(i), h, w, cols);
        MapRM gw(grads[0].data(), static_cast<Eigen::Index>(out_ch), static_cast<Eigen::Index>(patch()));
        gw.noalias() += g * cols.transpose();
        Eigen::Map<Eigen::VectorXf> gb(grads[1].data(), static_cast<Eigen::Index>(out_ch));
        gb += g.rowwise().sum();
      }
      if (gin) {
        gcols.noalias() = wmat.transpose() * g;
        col2im_add(gcols, h, w, gin->sample(i));
      }
    }
  }
};

struct Relu {
  ImageShape out_shape(ImageShape in) const { return in; }
  std::vector<std::span<float>> params() { return {}; }

  void forward(const Tensor& in, Tensor& out) const {
    out = Tensor(in.n, in.shape);
    std::transform(in.data.begin(), in.data.end(), out.data.begin(),
                   [](float v) { return v > 0.0f ? v : 0.0f; });
  }

  void backward(const Tensor& in, const Tensor& gout, Tensor* gin, GradSlice) const {
    if (!gin) return;
    *gin = Tensor(in.n, in.shape);
    for (std::size_t k = 0; k < in.data.size(); ++k) {
      gin->data[k] = in.data[k] > 0.0f ? gout.data[k] : 0.0f;
    }
  }
};

// 2x2 max pooling, stride 2 (odd trailing rows/columns are dropped).
struct MaxPool2 {
  ImageShape out_shape(ImageShape in) const { return {in.channels, in.height / 2, in.width / 2}; }
  std::vector<std::span<float>> params() { return {}; }

  void forward(const Tensor& in, Tensor& out) const {
    const ImageShape os = out_shape(in.shape);
    out = Tensor(in.n, os);
    for (std::size_t i = 0; i < in.n; ++i) {
      for (std::size_t c = 0; c < os.channels; ++c) {
        for (std::size_t y = 0; y < os.height; ++y) {
          for (std::size_t x = 0; x < os.width; ++x) {
            float m = in.at(i, c, 2 * y, 2 * x);
            m = std::max(m, in.at(i, c, 2 * y, 2 * x + 1));
            m = std::max(m, in.at(i, c, 2 * y + 1, 2 * x));
            m = std::max(m, in.at(i, c, 2 * y + 1, 2 * x + 1));
            out.at(i, c, y, x) = m;
          }
        }
      }
    }
  }

  // Gradient goes to the first maximal element in scan order.
  void backward(const Tensor& in, const Tensor& gout, Tensor* gin, GradSlice) const {
    if (!gin) return;
    const ImageShape os = out_shape(in.shape);
    *gin = Tensor(in.n, in.shape);
    for (std::size_t i = 0; i < in.n; ++i) {
      for (std::size_t c = 0; c < os.channels; ++c) {
        for (std::size_t y = 0; y < os.height; ++y) {
          for (std::size_t x = 0; x < os.width; ++x) {
            std::size_t by = 2 * y, bx = 2 * x;
            float best = in.at(i, c, by, bx);
            for (std::size_t dy = 0; dy < 2; ++dy) {
              for (std::size_t dx = 0; dx < 2; ++dx) {
                const float v = in.at(i, c, 2 * y + dy, 2 * x + dx);
                if (v > best) {
                  best = v;
                  by = 2 * y + dy;
                  bx = 2 * x + dx;
                }
              }
            }
            gin->at(i, c, by, bx) += gout.at(i, c, y, x);
          }
        }
      }
    }
  }
};

// Mean over the spatial dimensions.
struct GlobalAvgPool {
  ImageShape out_shape(ImageShape in) const { return {in.channels, 1, 1}; }
  std::vector<std::span<float>> params() { return {}; }

  void forward(const Tensor& in, Tensor& out) const {
    out = Tensor(in.n, out_shape(in.shape));
    const std::size_t hw = in.shape.height * in.shape.width;
    for (std::size_t i = 0; i < in.n; ++i) {
      auto s = in.sample(i);
      for (std::size_t c = 0; c < in.shape.channels; ++c) {
        double acc = 0.0;
        for (std::size_t k = 0; k < hw; ++k) acc += s[c * hw + k];
        out.data[i * in.shape.channels + c] = static_cast<float>(acc / static_cast<double>(hw));
      }
    }
  }

  void backward(const Tensor& in, const Tensor& gout, Tensor* gin, GradSlice) const {
    if (!gin) return;
    *gin = Tensor(in.n, in.shape);
    const std::size_t hw = in.shape.height * in.shape.width;
    const float inv = 1.0f / static_cast<float>(hw);
    for (std::size_t i = 0; i < in.n; ++i) {
      auto g = gin->sample(i);
      for (std::size_t c = 0; c < in.shape.channels; ++c) {
        const float v = gout.data[i * in.shape.channels + c] * inv;
        std::fill(g.begin() + static_cast<std::ptrdiff_t>(c * hw),
                  g.begin() + static_cast<std::ptrdiff_t>((c + 1) * hw), v);
      }
    }
  }
};

// Fully connected layer over the flattened sample.
struct Linear {
  std::size_t in_features = 0;
  std::size_t out_features = 0;
  FloatBuffer weight;  // out x in
  FloatBuffer bias;

  Linear() = default;
  Linear(std::size_t in, std::size_t out)
      : in_features(in), out_features(out), weight(in * out, 0.0f), bias(out, 0.0f) {}

  ImageShape out_shape(ImageShape) const { return {out_features, 1, 1}; }
  std::vector<std::span<float>> params() { return {weight, bias}; }

  void init(Rng& rng) {
    const double sd = std::sqrt(1.0 / static_cast<double>(in_features));
    for (float& v : weight) v = static_cast<float>(sd * rng.normal());
    std::fill(bias.begin(), bias.end(), 0.0f);
  }

  void forward(const Tensor& in, Tensor& out) const {
    out = Tensor(in.n, out_shape(in.shape));
    const ConstMapRM x(in.data.data(), static_cast<Eigen::Index>(in.n),
                       static_cast<Eigen::Index>(in_features));
    const ConstMapRM wm(weight.data(), static_cast<Eigen::Index>(out_features),
                        static_cast<Eigen::Index>(in_features));
    const Eigen::Map<const Eigen::RowVectorXf> b(bias.data(), static_cast<Eigen::Index>(out_features));
    MapRM o(out.data.data(), static_cast<Eigen::Index>(in.n), static_cast<Eigen::Index>(out_features));
    o.noalias() = x * wm.transpose();
    o.rowwise() += b;
  }

  void backward(const Tensor& in, const Tensor& gout, Tensor* gin, GradSlice grads) const {
    const auto n = static_cast<Eigen::Index>(in.n);
    const ConstMapRM g(gout.data.data(), n, static_cast<Eigen::Index>(out_features));
    const ConstMapRM wm(weight.data(), static_cast<Eigen::Index>(out_features),
                        static_cast<Eigen::Index>(in_features));
    if (!grads.empty()) {
      const ConstMapRM x(in.data.data(), n, static_cast<Eigen::Index>(in_features));
      MapRM gw(grads[0].data(), static_cast<Eigen::Index>(out_features),
               static_cast<Eigen::Index>(in_features));
      gw.noalias() += g.transpose() * x;
      Eigen::Map<Eigen::RowVectorXf> gb(grads[1].data(), static_cast<Eigen::Index>(out_features));
      gb += g.colwise().sum();
    }
    if (gin) {
      *gin = Tensor(in.n, in.shape);
      MapRM gx(gin->data.data(), n, static_cast<Eigen::Index>(in_features));
      gx.noalias() = g * wm;
    }
  }
};

// out = relu(x + conv_b(relu(conv_a(x)))), channel count preserved.
struct Residual {
  Conv2d conv_a;
  Conv2d conv_b;

  Residual() = default;
  explicit Residual(std::size_t channels) : conv_a(channels, channels), conv_b(channels, channels) {}

  ImageShape out_shape(ImageShape in) const { return in; }

  void init(Rng& rng) {
    conv_a.init(rng);
    conv_b.init(rng);
    // Start close to the identity map.
    for (float& v : conv_b.weight) v *= 0.1f;
  }

  std::vector<std::span<float>> params() {
    return {conv_a.weight, conv_a.bias, conv_b.weight, conv_b.bias};
  }

  // aux receives {conv_a out, relu out, pre-activation sum}.
  void forward(const Tensor& in, Tensor& out, std::vector<Tensor>* aux = nullptr) const {
    Tensor a, r, b;
    conv_a.forward(in, a);
    Relu{}.forward(a, r);
    conv_b.forward(r, b);
    for (std::size_t k = 0; k < b.data.size(); ++k) b.data[k] += in.data[k];
    Relu{}.forward(b, out);
    if (aux) *aux = {std::move(a), std::move(r), std::move(b)};
  }

  void backward(const Tensor& in, const std::vector<Tensor>& aux, const Tensor& gout, Tensor* gin,
                GradSlice grads) const {
    const Tensor& a = aux[0];
    const Tensor& r = aux[1];
    const Tensor& sum = aux[2];
    Tensor g_sum, g_r, g_a, g_x;
    Relu{}.backward(sum, gout, &g_sum, {});
    conv_b.backward(r, g_sum, &g_r, grads.empty() ? GradSlice{} : grads.subspan(2, 2));
    Relu{}.backward(a, g_r, &g_a, {});
    conv_a.backward(in, g_a, gin ? &g_x : nullptr, grads.empty() ? GradSlice{} : grads.subspan(0, 2));
    if (gin) {
      for (std::size_t k = 0; k < g_x.data.size(); ++k) g_x.data[k] += g_sum.data[k];
      *gin = std::move(g_x);
    }
  }
};

}  // namespace bsift::nn
