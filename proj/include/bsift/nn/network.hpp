#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "bsift/classifier.hpp"
#include "bsift/error.hpp"
#include "bsift/nn/layers.hpp"
#include "bsift/rng.hpp"

namespace bsift::nn {

using Layer = std::variant<Conv2d, Relu, MaxPool2, GlobalAvgPool, Linear, Residual>;

// Architecture identifier plus the few knobs the builders take.
struct ArchSpec {
  std::string name = "small_cnn";  // "small_cnn" | "resnet_mini"
  std::size_t width = 16;          // channel count of the first block
  ImageShape input{3, 32, 32};
  int num_classes = 10;

  friend bool operator==(const ArchSpec&, const ArchSpec&) = default;
};

inline nlohmann::json to_json(const ArchSpec& a) {
  return {{"arch", a.name},
          {"width", a.width},
          {"input", {a.input.channels, a.input.height, a.input.width}},
          {"num_classes", a.num_classes}};
}

inline ArchSpec arch_from_json(const nlohmann::json& j) {
  ArchSpec a;
  try {
    a.name = j.at("arch").get<std::string>();
    a.width = j.at("width").get<std::size_t>();
    const auto in = j.at("input");
    a.input = {in.at(0).get<std::size_t>(), in.at(1).get<std::size_t>(), in.at(2).get<std::size_t>()};
    a.num_classes = j.at("num_classes").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("arch", e.what());
  }
  return a;
}

// Per-layer intermediate values kept by a training forward pass.
struct ForwardTrace {
  std::vector<Tensor> inputs;             // input of layer k; back() is the network output
  std::vector<std::vector<Tensor>> aux;   // layer-private values (residual blocks)
};

class Network final : public Classifier {
 public:
  explicit Network(ArchSpec arch) : arch_(std::move(arch)) { build(); }

  const ArchSpec& arch() const { return arch_; }
  int num_classes() const override { return arch_.num_classes; }
  ImageShape input_shape() const override { return arch_.input; }

  void init(std::uint64_t seed) {
    Rng rng(seed);
    for (auto& layer : layers_) {
      std::visit(
          [&](auto& l) {
            if constexpr (requires { l.init(rng); }) l.init(rng);
          },
          layer);
    }
  }

  std::vector<std::span<float>> params() {
    std::vector<std::span<float>> out;
    for (auto& layer : layers_) {
      for (auto s : std::visit([](auto& l) { return l.params(); }, layer)) out.push_back(s);
    }
    return out;
  }

  std::size_t param_count() {
    std::size_t n = 0;
    for (auto s : params()) n += s.size();
    return n;
  }

  // Zeroed gradient buffers matching params().
  std::vector<FloatBuffer> zero_grads() {
    std::vector<FloatBuffer> g;
    for (auto s : params()) g.emplace_back(s.size(), 0.0f);
    return g;
  }

  Matrix logits(const Tensor& x) const override {
    check_input(x);
    Tensor cur = x, next;
    for (const auto& layer : layers_) {
      std::visit([&](const auto& l) { l.forward(cur, next); }, layer);
      std::swap(cur, next);
    }
    return to_matrix(cur);
  }

  ForwardTrace forward_trace(const Tensor& x) const {
    check_input(x);
    ForwardTrace t;
    t.inputs.reserve(layers_.size() + 1);
    t.aux.resize(layers_.size());
    t.inputs.push_back(x);
    for (std::size_t k = 0; k < layers_.size(); ++k) {
      Tensor out;
      std::visit(
          [&](const auto& l) {
            if constexpr (std::is_same_v<std::decay_t<decltype(l)>, Residual>) {
              l.forward(t.inputs[k], out, &t.aux[k]);
            } else {
              l.forward(t.inputs[k], out);
            }
          },
          layers_[k]);
      t.inputs.push_back(std::move(out));
    }
    return t;
  }

  // Backpropagates grad_logits through a recorded trace. Parameter gradients
  // are accumulated into `grads` when non-empty; the input gradient is
  // returned when `want_input` is set.
  Tensor backward(const ForwardTrace& t, const Matrix& grad_logits,
                  std::vector<FloatBuffer>* grads, bool want_input) const {
    const Tensor& out = t.inputs.back();
    Tensor g(out.n, out.shape);
    std::copy(grad_logits.data(), grad_logits.data() + g.data.size(), g.data.begin());

    std::vector<std::size_t> offsets;  // first param index per layer
    std::size_t p = 0;
    for (const auto& layer : layers_) {
      offsets.push_back(p);
      p += param_arity(layer);
    }

    for (std::size_t k = layers_.size(); k-- > 0;) {
      const bool need_gin = want_input || k > 0;
      const std::size_t arity = param_arity(layers_[k]);
      GradSlice gs = (grads && arity > 0) ? GradSlice(grads->data() + offsets[k], arity) : GradSlice{};
      if (!need_gin && gs.empty()) break;
      Tensor gin;
      std::visit(
          [&](const auto& l) {
            if constexpr (std::is_same_v<std::decay_t<decltype(l)>, Residual>) {
              l.backward(t.inputs[k], t.aux[k], g, need_gin ? &gin : nullptr, gs);
            } else {
              l.backward(t.inputs[k], g, need_gin ? &gin : nullptr, gs);
            }
          },
          layers_[k]);
      g = std::move(gin);
    }
    return g;
  }

  Tensor input_gradient(const Tensor& x, const Matrix& grad_logits) const override {
    return backward(forward_trace(x), grad_logits, nullptr, true);
  }

  Tensor vjp(const Tensor& x, const std::function<Matrix(const Matrix&)>& grad_fn,
             Matrix& z) const override {
    const ForwardTrace t = forward_trace(x);
    z = to_matrix(t.inputs.back());
    return backward(t, grad_fn(z), nullptr, true);
  }

  // Checkpoint: "BSIFTNN1", u64 header length, JSON arch header, then every
  // parameter as little-endian float32 in params() order.
  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    const std::string header = to_json(arch_).dump();
    const std::uint64_t len = header.size();
    out.write(kMagic, 8);
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    auto self = const_cast<Network*>(this);
    for (auto s : self->params()) {
      out.write(reinterpret_cast<const char*>(s.data()), static_cast<std::streamsize>(s.size_bytes()));
    }
    if (!out) throw IoError("write failed: " + path.string());
  }

  static Network load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    char magic[8];
    std::uint64_t len = 0;
    in.read(magic, 8);
    in.read(reinterpret_cast<char*>(&len), sizeof len);
    if (!in || std::memcmp(magic, kMagic, 8) != 0 || len > (1u << 20)) {
      throw FormatError("checkpoint", "bad magic or header in " + path.string());
    }
    std::string header(len, '\0');
    in.read(header.data(), static_cast<std::streamsize>(len));
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(header);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("checkpoint", e.what());
    }
    Network net(arch_from_json(j));
    for (auto s : net.params()) {
      in.read(reinterpret_cast<char*>(s.data()), static_cast<std::streamsize>(s.size_bytes()));
      if (!in) throw FormatError("checkpoint", "truncated parameter payload");
    }
    if (in.peek() != std::char_traits<char>::eof()) {
      throw FormatError("checkpoint", "trailing bytes after parameters");
    }
    return net;
  }

 private:
  static constexpr char kMagic[8] = {'B', 'S', 'I', 'F', 'T', 'N', 'N', '1'};

  static std::size_t param_arity(const Layer& layer) {
    return std::visit(
        [](const auto& l) -> std::size_t {
          using T = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<T, Conv2d> || std::is_same_v<T, Linear>) return 2;
          if constexpr (std::is_same_v<T, Residual>) return 4;
          return 0;
        },
        layer);
  }

  void check_input(const Tensor& x) const {
    detail::require(x.shape == arch_.input, "input shape " + to_string(x.shape) +
                                                " does not match network input " + to_string(arch_.input));
  }

  static Matrix to_matrix(const Tensor& t) {
    Matrix m(static_cast<Eigen::Index>(t.n), static_cast<Eigen::Index>(t.sample_size()));
    std::copy(t.data.begin(), t.data.end(), m.data());
    return m;
  }

  void build() {
    detail::require(arch_.num_classes >= 2, "num_classes must be at least 2");
    detail::require(arch_.width >= 1, "width must be positive");
    const ImageShape in = arch_.input;
    const std::size_t w = arch_.width;
    if (arch_.name == "small_cnn") {
      detail::require(in.height % 8 == 0 && in.width % 8 == 0,
                      "small_cnn needs height and width divisible by 8");
      layers_ = {Conv2d(in.channels, w), Relu{}, MaxPool2{},
                 Conv2d(w, 2 * w),       Relu{}, MaxPool2{},
                 Conv2d(2 * w, 4 * w),   Relu{}, MaxPool2{}};
      layers_.emplace_back(Linear(4 * w * (in.height / 8) * (in.width / 8),
                                  static_cast<std::size_t>(arch_.num_classes)));
    } else if (arch_.name == "resnet_mini") {
      detail::require(in.height % 4 == 0 && in.width % 4 == 0,
                      "resnet_mini needs height and width divisible by 4");
      layers_ = {Conv2d(in.channels, w), Relu{},      Residual(w),        MaxPool2{},
                 Conv2d(w, 2 * w),       Relu{},      Residual(2 * w),    MaxPool2{},
                 Residual(2 * w),        GlobalAvgPool{}};
      layers_.emplace_back(Linear(2 * w, static_cast<std::size_t>(arch_.num_classes)));
    } else {
      throw InvalidArgument("unknown architecture '" + arch_.name + "'");
    }
  }

  ArchSpec arch_;
  std::vector<Layer> layers_;
};

}  // namespace bsift::nn
