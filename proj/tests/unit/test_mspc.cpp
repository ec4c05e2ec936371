#include <gtest/gtest.h>

#include <cmath>

#include "bsift/mspc.hpp"
#include "support/models.hpp"

using namespace bsift;
using fixtures::BrightnessModel;
using fixtures::ConstantModel;
using fixtures::LinearModel;

namespace {

const std::vector<int> kScales = {2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12};

// Independent oracles -------------------------------------------------------

std::vector<double> softmax_d(const Matrix& z, Eigen::Index row) {
  std::vector<double> p(static_cast<std::size_t>(z.cols()));
  double mx = z(row, 0);
  for (Eigen::Index k = 1; k < z.cols(); ++k) mx = std::max(mx, static_cast<double>(z(row, k)));
  double sum = 0.0;
  for (Eigen::Index k = 0; k < z.cols(); ++k) sum += p[static_cast<std::size_t>(k)] = std::exp(z(row, k) - mx);
  for (double& v : p) v /= sum;
  return p;
}

int argmax_v(const Matrix& z, Eigen::Index row) {
  int best = 0;
  for (Eigen::Index k = 1; k < z.cols(); ++k) {
    if (z(row, k) > z(row, best)) best = static_cast<int>(k);
  }
  return best;
}

Tensor one(const Tensor& x, std::size_t i) {
  Tensor t(1, x.shape);
  auto src = x.sample(i);
  std::copy(src.begin(), src.end(), t.data.begin());
  return t;
}

// clamp(n (x - tau) * m, 0, 1), computed pixel by pixel.
Tensor transform(const Tensor& x, const Mask& m, double tau, int n) {
  Tensor out(x.n, x.shape);
  const auto mv = m.values();
  for (std::size_t i = 0; i < x.n; ++i) {
    auto src = x.sample(i);
    auto dst = out.sample(i);
    for (std::size_t p = 0; p < src.size(); ++p) {
      const float v = static_cast<float>(n) * ((src[p] - static_cast<float>(tau)) * mv[p]);
      dst[p] = std::clamp(v, 0.0f, 1.0f);
    }
  }
  return out;
}

// sum over selected i of (1/|S|) sum_n KL(F(x_i) || F(T_n(x_i))).
double kl_oracle(const Classifier& model, const Tensor& x, const SplitVector& w, const Mask& m, double tau,
                 const std::vector<int>& scales) {
  double total = 0.0;
  for (std::size_t i = 0; i < x.n; ++i) {
    if (!w.w[i]) continue;
    const Tensor xi = one(x, i);
    const auto p = softmax_d(model.logits(xi), 0);
    double per = 0.0;
    for (int n : scales) {
      const auto q = softmax_d(model.logits(transform(xi, m, tau, n)), 0);
      for (std::size_t k = 0; k < p.size(); ++k) per += p[k] * (std::log(p[k]) - std::log(q[k]));
    }
    total += per / static_cast<double>(scales.size());
  }
  return total;
}

Tensor range_tensor(std::size_t n, ImageShape s, std::uint64_t seed, float lo, float hi) {
  Tensor t = fixtures::random_tensor(n, s, seed);
  for (float& v : t.data) v = lo + (hi - lo) * v;
  return t;
}

Mask random_mask(ImageShape s, std::uint64_t seed, float lo, float hi) {
  Image img(s);
  Rng rng(seed);
  for (float& v : img.data) v = lo + (hi - lo) * static_cast<float>(rng.uniform());
  return Mask(std::move(img));
}

SplitVector random_split(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  SplitVector w{std::vector<std::uint8_t>(n)};
  for (auto& v : w.w) v = rng.uniform() < 0.6 ? 1 : 0;
  w.w[0] = 1;
  return w;
}

}  // namespace

// Score ---------------------------------------------------------------------

TEST(Mspc, PhiAndCountArithmetic) {
  EXPECT_EQ(phi(0), 1);
  EXPECT_EQ(phi(3), -1);
  EXPECT_EQ(phi(-2), -1);
  EXPECT_DOUBLE_EQ(mspc_from_count(11, 11), 1.0);
  EXPECT_DOUBLE_EQ(mspc_from_count(0, 11), -1.0);
  EXPECT_DOUBLE_EQ(mspc_from_count(3, 11), -5.0 / 11.0);
}

TEST(Mspc, MatchesPhiSumOracle) {
  // Flat 0.1 image, threshold 0.45, tau 0, m = 1: scales 2..4 agree.
  const ImageShape s{1, 2, 2};
  const BrightnessModel model(s, 0.45f);
  const Image x(s, 0.1f);
  EXPECT_DOUBLE_EQ(mspc_loss(model, x, Mask::ones(s), 0.0, kScales), -5.0 / 11.0);

  // Random linear models, random masks: sum of phi over scales divided by |S|.
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const ImageShape s3{3, 4, 4};
    const LinearModel lm(s3, 4, seed, 6.0f);
    const Tensor xt = fixtures::random_tensor(8, s3, seed + 100);
    const Mask m = random_mask(s3, seed + 200, 0.0f, 1.0f);
    const double tau = 0.1;
    const auto sv = mspc_score_dataset(lm, xt, m, tau, kScales);
    EXPECT_EQ(sv.kind, ScoreKind::Mspc);
    const Matrix z0 = lm.logits(xt);
    std::vector<int> sum(xt.n, 0);
    for (int n : kScales) {
      const Matrix zn = lm.logits(transform(xt, m, tau, n));
      for (std::size_t i = 0; i < xt.n; ++i) {
        sum[i] += phi(argmax_v(z0, static_cast<Eigen::Index>(i)) - argmax_v(zn, static_cast<Eigen::Index>(i)));
      }
    }
    for (std::size_t i = 0; i < xt.n; ++i) {
      EXPECT_NEAR(sv.scores[i], static_cast<double>(sum[i]) / 11.0, 1e-15) << "seed " << seed << " i " << i;
    }
  }
}

TEST(Mspc, UnitMaskZeroShiftEqualsTwiceSpcMinusOne) {
  const ImageShape s{3, 4, 4};
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const LinearModel model(s, 5, seed, 5.0f);
    const Image x = fixtures::random_image(s, seed + 1000);
    const double spc = spc_score(model, x, kScales);
    EXPECT_EQ(mspc_loss(model, x, Mask::ones(s), 0.0, kScales), 2.0 * spc - 1.0) << "seed " << seed;
  }
}

TEST(Mspc, RejectsEvenScaleCount) {
  const ImageShape s{1, 2, 2};
  const ConstantModel model(s, 2, 0);
  EXPECT_THROW(mspc_loss(model, Image(s, 0.5f), Mask::ones(s), 0.1, std::vector<int>{2, 3}), InvalidArgument);
}

// Upper level -----------------------------------------------------------------

TEST(UpperLevel, MatchesBruteForceMinimizer) {
  Rng rng(42);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + static_cast<std::size_t>(rng.uniform() * 12);
    ScoreVector sv{std::vector<double>(n), ScoreKind::Mspc};
    for (double& v : sv.scores) {
      const int agree = static_cast<int>(rng.uniform() * 12) % 12;  // 0..11
      v = mspc_from_count(agree, 11);
    }
    double best = std::numeric_limits<double>::infinity();
    std::uint32_t best_mask = 0;
    for (std::uint32_t bits = 0; bits < (1u << n); ++bits) {
      double obj = 0.0;
      for (std::size_t i = 0; i < n; ++i) obj += (1 - ((bits >> i) & 1u)) * sv.scores[i];
      if (obj < best) {
        best = obj;
        best_mask = bits;
      }
    }
    const SplitVector w = upper_level_split(sv);
    for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(w.w[i], (best_mask >> i) & 1u);
  }
}

TEST(UpperLevel, RejectsExactZeroAndSpcScores) {
  EXPECT_THROW(upper_level_split(ScoreVector{{0.5, 0.0}, ScoreKind::Mspc}), InvalidArgument);
  EXPECT_THROW(upper_level_split(ScoreVector{{0.5}, ScoreKind::Spc}), InvalidArgument);
}

// Lower level -----------------------------------------------------------------

TEST(LowerLevel, KlIsNonNegativeAndZeroForConstantModel) {
  const ImageShape s{3, 4, 4};
  const Tensor x = fixtures::random_tensor(12, s, 1);
  const SplitVector w = random_split(12, 2);
  BilevelConfig cfg;
  const Mask m = random_mask(s, 3, 0.0f, 1.0f);
  EXPECT_EQ(lower_level_objective(ConstantModel(s, 10, 3), x, w, m, cfg).kl_sum, 0.0);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    EXPECT_GE(lower_level_objective(LinearModel(s, 4, seed, 5.0f), x, w, m, cfg).kl_sum, 0.0);
  }
}

TEST(LowerLevel, ObjectiveMatchesOracle) {
  const ImageShape s{3, 4, 4};
  const Tensor x = fixtures::random_tensor(10, s, 5);
  const SplitVector w = random_split(10, 6);
  const LinearModel model(s, 4, 9, 5.0f);
  BilevelConfig cfg;
  cfg.lambda_l1 = 0.01;
  // m = 1: value = KL / N + lambda * C * H * W.
  const auto at_one = lower_level_objective(model, x, w, Mask::ones(s), cfg);
  const double kl1 = kl_oracle(model, x, w, Mask::ones(s), cfg.tau, cfg.scales);
  EXPECT_NEAR(at_one.kl_sum, kl1, 1e-6 * std::max(1.0, kl1));
  EXPECT_NEAR(at_one.value, kl1 / 10.0 + 0.01 * 48.0, 1e-6);
  // Random mask.
  const Mask m = random_mask(s, 7, 0.0f, 1.0f);
  const auto at_m = lower_level_objective(model, x, w, m, cfg);
  const double klm = kl_oracle(model, x, w, m, cfg.tau, cfg.scales);
  EXPECT_NEAR(at_m.kl_sum, klm, 1e-6 * std::max(1.0, klm));
  EXPECT_NEAR(at_m.value, klm / 10.0 + 0.01 * m.l1_norm(), 1e-6);
}

TEST(LowerLevel, GradientMatchesFiniteDifferences) {
  // Pixels and mask chosen so that no scaled value touches the clamp.
  const ImageShape s{2, 3, 3};
  const Tensor x = range_tensor(6, s, 11, 0.15f, 0.3f);
  const SplitVector w{{1, 0, 1, 1, 0, 1}};
  const LinearModel model(s, 3, 13, 3.0f);
  BilevelConfig cfg;
  cfg.scales = {2, 3, 5};
  cfg.lambda_l1 = 0.02;
  const Mask m = random_mask(s, 17, 0.2f, 0.8f);
  const auto obj = lower_level_objective(model, x, w, m, cfg, true);
  const float h = 1e-3f;
  for (std::size_t p = 0; p < s.size(); ++p) {
    Image up = m.image(), dn = m.image();
    up.data[p] += h;
    dn.data[p] -= h;
    const double fd = (lower_level_objective(model, x, w, Mask(up), cfg).value -
                       lower_level_objective(model, x, w, Mask(dn), cfg).value) /
                      (static_cast<double>(up.data[p]) - static_cast<double>(dn.data[p]));
    EXPECT_NEAR(obj.grad[p], fd, 1e-3 + 1e-2 * std::fabs(fd)) << "pixel " << p;
  }
}

TEST(LowerLevel, UnselectedSamplesContributeNothing) {
  const ImageShape s{3, 4, 4};
  const LinearModel model(s, 4, 21, 5.0f);
  const Tensor base = fixtures::random_tensor(6, s, 22);
  const Tensor extra = fixtures::random_tensor(5, s, 23);
  Tensor both(11, s);
  std::copy(base.data.begin(), base.data.end(), both.data.begin());
  std::copy(extra.data.begin(), extra.data.end(), both.data.begin() + static_cast<std::ptrdiff_t>(base.data.size()));
  const SplitVector w6{{1, 1, 0, 1, 1, 1}};
  SplitVector w11 = w6;
  w11.w.resize(11, 0);
  BilevelConfig cfg;
  cfg.lambda_l1 = 0.0;
  const Mask m = random_mask(s, 24, 0.0f, 1.0f);
  const auto a = lower_level_objective(model, base, w6, m, cfg, true);
  const auto b = lower_level_objective(model, both, w11, m, cfg, true);
  EXPECT_EQ(a.kl_sum, b.kl_sum);
  // The two objectives differ only in the 1/N normalizer.
  for (std::size_t p = 0; p < a.grad.size(); ++p) EXPECT_NEAR(a.grad[p] * 6.0, b.grad[p] * 11.0, 1e-9);
}

TEST(LowerLevel, LargeLambdaShrinksMaskEveryStep) {
  const ImageShape s{3, 4, 4};
  const LinearModel model(s, 4, 31, 3.0f);
  const Tensor x = fixtures::random_tensor(10, s, 32);
  const SplitVector w = random_split(10, 33);
  BilevelConfig cfg;
  cfg.lambda_l1 = 1e3;
  cfg.lower_lr = 1e-5;
  cfg.full_batch_mode = true;
  double prev = Mask::ones(s).l1_norm();
  for (int epochs = 1; epochs <= 6; ++epochs) {
    cfg.lower_epochs = epochs;
    const double l1 = optimize_mask(model, x, w, cfg, Mask::ones(s)).mask.l1_norm();
    EXPECT_LT(l1, prev) << "epochs " << epochs;
    prev = l1;
  }
}

TEST(LowerLevel, ScaleInvariantSampleHasTinyObjective) {
  // Bright flat image: every scaled copy saturates to white and the
  // brightness model is confidently class 1 throughout.
  const ImageShape s{1, 4, 4};
  const BrightnessModel model(s, 0.5f, 40.0f);
  Tensor x(3, s);
  std::fill(x.data.begin(), x.data.end(), 0.95f);
  BilevelConfig cfg;
  cfg.lambda_l1 = 0.0;
  const auto obj = lower_level_objective(model, x, SplitVector{{1, 1, 1}}, Mask::ones(s), cfg);
  EXPECT_LT(obj.value, 1e-6);
}

TEST(LowerLevel, FullBatchDescentIsMonotoneAndProjected) {
  const ImageShape s{3, 4, 4};
  const LinearModel model(s, 4, 41, 5.0f);
  const Tensor x = fixtures::random_tensor(20, s, 42);
  const SplitVector w = random_split(20, 43);
  BilevelConfig cfg;
  cfg.lambda_l1 = 0.01;
  cfg.lower_epochs = 50;
  cfg.full_batch_mode = true;
  const auto r = optimize_mask(model, x, w, cfg, Mask::ones(s));
  ASSERT_EQ(r.objective_trace.size(), 50u);
  for (std::size_t k = 1; k < r.objective_trace.size(); ++k) {
    EXPECT_LE(r.objective_trace[k], r.objective_trace[k - 1]);
  }
  EXPECT_LE(r.final_objective, r.objective_trace.back());
  EXPECT_LT(r.final_objective, r.objective_trace.front());
  for (float v : r.mask.values()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
  EXPECT_DOUBLE_EQ(r.final_objective, lower_level_objective(model, x, w, r.mask, cfg).value);
}

TEST(LowerLevel, MinibatchStaysInBoxAndIsDeterministic) {
  const ImageShape s{3, 4, 4};
  const LinearModel model(s, 4, 51, 5.0f);
  const Tensor x = fixtures::random_tensor(30, s, 52);
  const SplitVector w = random_split(30, 53);
  BilevelConfig cfg;
  cfg.lambda_l1 = 0.01;
  cfg.lower_epochs = 5;
  cfg.batch_size = 7;
  cfg.lower_lr = 0.5;
  const auto a = optimize_mask(model, x, w, cfg, Mask::ones(s));
  const auto b = optimize_mask(model, x, w, cfg, Mask::ones(s));
  EXPECT_EQ(a.mask, b.mask);
  EXPECT_EQ(a.objective_trace, b.objective_trace);
  EXPECT_EQ(a.objective_trace.size(), 5u);
  for (float v : a.mask.values()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
  cfg.seed = 1;
  EXPECT_NE(optimize_mask(model, x, w, cfg, Mask::ones(s)).mask, a.mask);
}

TEST(LowerLevel, EmptySupportRejected) {
  const ImageShape s{1, 2, 2};
  const Tensor x = fixtures::random_tensor(3, s, 1);
  EXPECT_THROW(optimize_mask(ConstantModel(s, 2, 0), x, SplitVector{{0, 0, 0}}, BilevelConfig{}, Mask::ones(s)),
               InvalidArgument);
  EXPECT_THROW(optimize_mask(ConstantModel(s, 2, 0), x, SplitVector{{0, 2, 0}}, BilevelConfig{}, Mask::ones(s)),
               InvalidArgument);
}

TEST(LowerLevel, ConfigValidation) {
  BilevelConfig c;
  c.tau = 1.0;
  EXPECT_THROW(validate(c), InvalidArgument);
  c = {};
  c.lambda_l1 = -1.0;
  EXPECT_THROW(validate(c), InvalidArgument);
  c = {};
  c.scales = {2, 3, 4, 5};
  EXPECT_THROW(validate(c), InvalidArgument);
  c = {};
  c.batch_size = 0;
  EXPECT_THROW(validate(c), InvalidArgument);
  c = {};
  BilevelConfig back;
  c.lambda_l1 = 0.25;
  c.scales = {3, 5, 7};
  update_from_json(back, to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
}

// Bi-level driver ---------------------------------------------------------------

TEST(Bilevel, ZeroRoundsGivesTwiceSpcMinusOne) {
  const ImageShape s{3, 4, 4};
  const LinearModel model(s, 5, 61, 5.0f);
  const Tensor x = fixtures::random_tensor(40, s, 62);
  BilevelConfig cfg;
  cfg.tau = 0.0;
  cfg.outer_rounds = 0;
  const auto r = run_bilevel(model, x, cfg);
  const auto spc = spc_score_dataset(model, x, cfg.scales);
  for (std::size_t i = 0; i < x.n; ++i) EXPECT_EQ(r.mspc.scores[i], 2.0 * spc.scores[i] - 1.0);
  EXPECT_EQ(r.mask, Mask::ones(s));
  EXPECT_TRUE(r.objective_trace.empty());
}

TEST(Bilevel, DeterministicAndTraced) {
  const ImageShape s{3, 4, 4};
  const LinearModel model(s, 5, 71, 5.0f);
  const Tensor x = fixtures::random_tensor(40, s, 72);
  BilevelConfig cfg;
  cfg.outer_rounds = 2;
  cfg.lower_epochs = 3;
  cfg.batch_size = 16;
  cfg.lambda_l1 = 0.01;
  std::vector<int> rounds_seen;
  const auto a = run_bilevel(model, x, cfg, [&](int round, const ScoreVector& sv, const SplitVector& w) {
    rounds_seen.push_back(round);
    EXPECT_EQ(upper_level_split(sv), w);
  });
  const auto b = run_bilevel(model, x, cfg);
  EXPECT_EQ(rounds_seen, (std::vector<int>{0, 1}));
  EXPECT_EQ(a.mask, b.mask);
  EXPECT_EQ(a.mspc, b.mspc);
  EXPECT_EQ(a.w, b.w);
  EXPECT_EQ(a.objective_trace, b.objective_trace);
  ASSERT_EQ(a.objective_trace.size(), 2u);
  EXPECT_EQ(a.selected_per_round.size(), 2u);
  EXPECT_EQ(a.w, upper_level_split(a.mspc));
  EXPECT_EQ(a.mspc, mspc_score_dataset(model, x, a.mask, cfg.tau, cfg.scales));
}

TEST(Bilevel, EmptySelectionWarnsAndKeepsMask) {
  // Dark flat images brighten past the threshold at every scale, so every
  // MSPC is -1 and the upper level selects nothing.
  const ImageShape s{1, 2, 2};
  const BrightnessModel model(s, 0.3f);
  Tensor x(4, s);
  std::fill(x.data.begin(), x.data.end(), 0.2f);
  BilevelConfig cfg;
  cfg.tau = 0.0;
  cfg.outer_rounds = 2;
  const auto r = run_bilevel(model, x, cfg);
  EXPECT_EQ(r.warnings.size(), 2u);
  EXPECT_EQ(r.selected_per_round, (std::vector<std::size_t>{0, 0}));
  EXPECT_EQ(r.mask, Mask::ones(s));
  for (double v : r.mspc.scores) EXPECT_EQ(v, -1.0);
}

TEST(MaskedKl, MatchesOracleAndFeedsResult) {
  const ImageShape s{3, 4, 4};
  const LinearModel model(s, 4, 81, 5.0f);
  const Tensor x = fixtures::random_tensor(9, s, 82);
  const Mask m = random_mask(s, 83, 0.0f, 1.0f);
  const auto kl = masked_kl_per_sample(model, x, m, 0.1, kScales, 4);
  ASSERT_EQ(kl.size(), 9u);
  for (std::size_t i = 0; i < x.n; ++i) {
    SplitVector only{std::vector<std::uint8_t>(x.n, 0)};
    only.w[i] = 1;
    const double want = kl_oracle(model, x, only, m, 0.1, kScales);
    EXPECT_NEAR(kl[i], want, 1e-6 * std::max(1.0, want));
  }
  BilevelConfig cfg;
  cfg.outer_rounds = 0;
  const auto r = run_bilevel(model, x, cfg);
  EXPECT_EQ(r.masked_kl, masked_kl_per_sample(model, x, Mask::ones(s), cfg.tau, cfg.scales, cfg.chunk));
}
