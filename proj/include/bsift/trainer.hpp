#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "bsift/attacks.hpp"
#include "bsift/classifier.hpp"
#include "bsift/datamodel.hpp"
#include "bsift/error.hpp"
#include "bsift/nn/network.hpp"
#include "bsift/rng.hpp"

namespace bsift {

struct TrainConfig {
  int epochs = 20;
  std::size_t batch_size = 128;
  double learning_rate = 0.02;  // no batch norm in the built-in nets; 0.1 can collapse training
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::vector<int> milestones = {10, 15};
  double lr_decay = 0.1;
  std::uint64_t seed = 0;
  std::string arch = "small_cnn";
  std::size_t width = 16;
};

inline void validate(const TrainConfig& c) {
  detail::require(c.epochs >= 0, "epochs must be non-negative");
  detail::require(c.batch_size >= 1, "batch_size must be positive");
  detail::require(c.learning_rate > 0.0, "learning_rate must be positive");
  detail::require(c.momentum >= 0.0 && c.momentum < 1.0, "momentum must lie in [0,1)");
  detail::require(c.weight_decay >= 0.0, "weight_decay must be non-negative");
  detail::require(c.lr_decay > 0.0, "lr_decay must be positive");
  for (int m : c.milestones) {
    detail::require(m > 0 && m < c.epochs, "milestone " + std::to_string(m) + " not inside (0, epochs)");
  }
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},       {"batch_size", c.batch_size}, {"lr", c.learning_rate},
          {"momentum", c.momentum},   {"weight_decay", c.weight_decay},
          {"milestones", c.milestones}, {"lr_decay", c.lr_decay}, {"seed", c.seed},
          {"arch", c.arch},           {"width", c.width}};
}

// Reads the keys present in `j`; absent keys keep their current value.
inline void update_from_json(TrainConfig& c, const nlohmann::json& j) {
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("lr", c.learning_rate);
  c.momentum = j.value("momentum", c.momentum);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.milestones = j.value("milestones", c.milestones);
  c.lr_decay = j.value("lr_decay", c.lr_decay);
  c.seed = j.value("seed", c.seed);
  c.arch = j.value("arch", c.arch);
  c.width = j.value("width", c.width);
}

struct EvalReport {
  double acc = 0.0;
  double asr = 0.0;
};

struct EpochStats {
  int epoch = 0;
  double lr = 0.0;
  double mean_loss = 0.0;
  double train_acc = 0.0;
};

using EpochCallback = std::function<void(const EpochStats&)>;

// Minibatch SGD with momentum, weight decay and a multi-step schedule on
// softmax cross-entropy. No augmentation. Deterministic given the seed.
inline nn::Network train_classifier(const ImageBatch& data, int num_classes, const TrainConfig& cfg,
                                    const EpochCallback& on_epoch = {}) {
  validate(cfg);
  validate(data, num_classes);
  nn::Network net(nn::ArchSpec{cfg.arch, cfg.width, data.shape(), num_classes});
  net.init(cfg.seed);
  auto params = net.params();
  auto grads = net.zero_grads();
  std::vector<FloatBuffer> velocity = net.zero_grads();
  Rng rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);

  const std::size_t n = data.size();
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double lr = cfg.learning_rate;
    for (int m : cfg.milestones) {
      if (epoch >= m) lr *= cfg.lr_decay;
    }
    const auto order = rng.permutation(n);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t begin = 0; begin < n; begin += cfg.batch_size) {
      const std::size_t end = std::min(n, begin + cfg.batch_size);
      const ImageBatch batch = subset(data, std::span(order).subspan(begin, end - begin));
      const std::size_t b = batch.size();

      const nn::ForwardTrace trace = net.forward_trace(batch.images);
      const Tensor& out = trace.inputs.back();
      Matrix g(static_cast<Eigen::Index>(b), num_classes);
      double batch_loss = 0.0;
      for (std::size_t i = 0; i < b; ++i) {
        const auto lp = log_softmax(out.sample(i));
        const int y = batch.labels[i];
        batch_loss -= lp[static_cast<std::size_t>(y)];
        int best = 0;
        for (int k = 0; k < num_classes; ++k) {
          g(static_cast<Eigen::Index>(i), k) =
              static_cast<float>((std::exp(lp[static_cast<std::size_t>(k)]) - (k == y ? 1.0 : 0.0)) /
                                 static_cast<double>(b));
          if (lp[static_cast<std::size_t>(k)] > lp[static_cast<std::size_t>(best)]) best = k;
        }
        if (best == y) ++correct;
      }
      if (!std::isfinite(batch_loss)) {
        throw NumericFailure("train_classifier epoch " + std::to_string(epoch), step);
      }
      loss_sum += batch_loss;

      for (auto& gr : grads) std::fill(gr.begin(), gr.end(), 0.0f);
      net.backward(trace, g, &grads, false);
      const auto flr = static_cast<float>(lr);
      const auto fmom = static_cast<float>(cfg.momentum);
      const auto fwd = static_cast<float>(cfg.weight_decay);
      for (std::size_t p = 0; p < params.size(); ++p) {
        for (std::size_t k = 0; k < params[p].size(); ++k) {
          const float gk = grads[p][k] + fwd * params[p][k];
          velocity[p][k] = fmom * velocity[p][k] + gk;
          params[p][k] -= flr * velocity[p][k];
        }
      }
      ++step;
    }
    if (on_epoch) {
      on_epoch({epoch, lr, loss_sum / static_cast<double>(n),
                static_cast<double>(correct) / static_cast<double>(n)});
    }
  }
  return net;
}

inline nn::Network train_classifier(const PoisonedDataset& d, const TrainConfig& cfg,
                                    const EpochCallback& on_epoch = {}) {
  return train_classifier(d.batch, d.num_classes, cfg, on_epoch);
}

// Fraction of samples whose predicted class equals the label.
inline double evaluate_acc(const Classifier& model, const ImageBatch& test) {
  detail::require(test.size() >= 1, "test set is empty");
  const auto pred = predict(model, test.images);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == test.labels[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

// Fraction of triggered non-target test samples classified as target_label.
inline double evaluate_asr(const Classifier& model, const ImageBatch& clean_test, const TriggerSpec& t,
                           int target_label) {
  detail::require(clean_test.size() >= 1, "test set is empty");
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < clean_test.size(); ++i) {
    if (clean_test.labels[i] != target_label) idx.push_back(i);
  }
  detail::require(!idx.empty(), "every test sample already has the target label");
  const Tensor triggered = stamp(subset(clean_test, idx).images, t);
  const auto pred = predict(model, triggered);
  std::size_t hit = 0;
  for (int p : pred) hit += p == target_label;
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

// Trains a fresh model on the samples with w_i == 0 and reports ACC/ASR on
// the held-out clean test set.
inline std::pair<nn::Network, EvalReport> retrain_on_clean(const PoisonedDataset& d, const SplitVector& w,
                                                           const TrainConfig& cfg, const ImageBatch& clean_test,
                                                           const TriggerSpec& t,
                                                           const EpochCallback& on_epoch = {}) {
  detail::require(w.size() == d.size(), "split length does not match dataset");
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (w.w[i] == 0) keep.push_back(i);
  }
  detail::require(!keep.empty(), "no clean samples identified");
  nn::Network net = train_classifier(subset(d.batch, keep), d.num_classes, cfg, on_epoch);
  EvalReport r;
  r.acc = evaluate_acc(net, clean_test);
  r.asr = evaluate_asr(net, clean_test, t, d.target_label);
  return {std::move(net), r};
}

}  // namespace bsift
