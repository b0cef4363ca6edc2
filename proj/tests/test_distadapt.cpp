#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "dran/distadapt.hpp"
#include "support.hpp"

using namespace dran;
using dran::testing::check_gradients;
using dran::testing::check_param_gradients;
using dran::testing::probe;

namespace {

void expect_rows_sum_to_one(const Tensor& w, double tol = 1e-9) {
  const std::size_t s = w.dim(-1);
  for (std::size_t r = 0; r < w.size() / s; ++r) {
    double acc = 0.0;
    for (std::size_t j = 0; j < s; ++j) acc += w[r * s + j];
    ASSERT_NEAR(acc, 1.0, tol) << "row " << r;
  }
}

Tensor sinusoid_block(std::size_t L, double cycles, double amp, double phase) {
  std::vector<double> v(L);
  for (std::size_t t = 0; t < L; ++t) {
    v[t] = amp * std::cos(2.0 * std::numbers::pi * cycles * static_cast<double>(t) /
                              static_cast<double>(L) + phase);
  }
  return Tensor::from({1, L, 1, 1}, v);
}

}  // namespace

TEST(Lowpass, FullKeepIsIdentity) {
  std::mt19937_64 rng(1);
  Tensor x = Tensor::randn({2, 12, 3, 2}, rng);
  Tensor y = lowpass_filter(x, 1.0);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y[i], x[i], 1e-9);
}

TEST(Lowpass, DcSignalUnchanged) {
  Tensor x = Tensor::full({1, 10, 2, 1}, 3.25);
  for (double f : {0.05, 0.3, 0.7, 1.0}) {
    Tensor y = lowpass_filter(x, f);
    for (double v : y.data()) EXPECT_NEAR(v, 3.25, 1e-12);
  }
}

TEST(Lowpass, RemovesNyquistComponent) {
  const std::size_t L = 8;
  Tensor slow = sinusoid_block(L, 1.0, 1.5, 0.3);
  Tensor fast = sinusoid_block(L, L / 2.0, 0.8, 0.0);
  Tensor y = lowpass_filter(add(slow, fast), 0.25);
  // Oracle: the 1-cycle component, recovered by a direct DFT of
  // that component alone (it is its own reconstruction).
  std::vector<double> oracle(L, 0.0);
  for (std::size_t k : {std::size_t{1}, L - 1}) {
    double re = 0.0, im = 0.0;
    for (std::size_t t = 0; t < L; ++t) {
      const double a = 2.0 * std::numbers::pi * static_cast<double>(k * t) / L;
      re += slow[t] * std::cos(a);
      im -= slow[t] * std::sin(a);
    }
    for (std::size_t t = 0; t < L; ++t) {
      const double a = 2.0 * std::numbers::pi * static_cast<double>(k * t) / L;
      oracle[t] += (re * std::cos(a) - im * std::sin(a)) / L;
    }
  }
  for (std::size_t t = 0; t < L; ++t) {
    EXPECT_NEAR(y[t], oracle[t], 1e-12);
    EXPECT_NEAR(y[t], slow[t], 1e-12);
  }
}

TEST(Lowpass, RejectsBadKeepFraction) {
  EXPECT_THROW(lowpass_filter(Tensor::zeros({1, 4, 1, 1}), 0.0), Error);
  EXPECT_THROW(lowpass_filter(Tensor::zeros({1, 4, 1, 1}), 1.5), Error);
}

TEST(Normalize, HandExample) {
  auto n = temporal_normalize(Tensor::from({1, 3, 1, 1}, {1, 2, 3}));
  EXPECT_NEAR(n.x_norm[0], -1.2247448713915890, 1e-12);
  EXPECT_NEAR(n.x_norm[1], 0.0, 1e-15);
  EXPECT_NEAR(n.x_norm[2], 1.2247448713915890, 1e-12);
  EXPECT_EQ(n.stats.mu.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_NEAR(n.stats.sigma.item(), std::sqrt(2.0 / 3.0), 1e-15);
}

TEST(Normalize, ConstantSliceNormalizesToZeros) {
  auto n = temporal_normalize(Tensor::full({2, 3, 2, 1}, 5.0));
  for (double v : n.x_norm.data()) EXPECT_EQ(v, 0.0);
  for (double s : n.stats.sigma.data()) EXPECT_EQ(s, 1e-5);
}

TEST(Normalize, InverseAndMoments) {
  std::mt19937_64 rng(2);
  Tensor x = Tensor::randn({3, 12, 4, 2}, rng, 3.0);
  x = add_scalar(x, 10.0);
  auto n = temporal_normalize(x);
  Tensor back = temporal_denormalize(n.x_norm, n.stats);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(back[i], x[i], 1e-12);
  Tensor m = mean(n.x_norm, 1);
  Tensor v = mean(square(n.x_norm), 1);
  for (std::size_t i = 0; i < m.size(); ++i) {
    EXPECT_NEAR(m[i], 0.0, 1e-9);
    EXPECT_NEAR(v[i], 1.0, 1e-9);
  }
}

// The statistics are computed from data; nothing upstream is trainable.
TEST(Normalize, CarriesNoGraph) {
  Tensor x = Tensor::from({1, 3, 1, 1}, {1, 2, 3}, true);
  auto n = temporal_normalize(x);
  EXPECT_FALSE(n.x_norm.requires_grad());
  EXPECT_FALSE(n.stats.sigma.requires_grad());
}

TEST(Attention, ZeroScaleGivesUniformWeightsAndMeanOfValues) {
  std::mt19937_64 rng(4);
  Tensor q = Tensor::randn({2, 3, 5, 4}, rng), k = Tensor::randn({2, 3, 5, 4}, rng),
         v = Tensor::randn({2, 3, 5, 4}, rng);
  auto att = scaled_attention(q, k, v, 0.5, Tensor::zeros({2, 1, 1, 1}), Tensor::zeros({2, 1, 1, 5}));
  for (double w : att.weights.data()) EXPECT_NEAR(w, 0.2, 1e-15);
  Tensor vbar = mean(v, 2);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t h = 0; h < 3; ++h)
      for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t d = 0; d < 4; ++d)
          EXPECT_NEAR(att.out.at({b, h, i, d}), vbar.at({b, h, 0, d}), 1e-12);
}

TEST(Attention, DeltaShiftsZeroLogits) {
  Tensor q = Tensor::zeros({1, 2, 1}), k = Tensor::zeros({1, 2, 1});
  Tensor v = Tensor::from({1, 2, 1}, {1.0, 0.0});
  auto att = scaled_attention(q, k, v, 1.0, {}, Tensor::from({1, 1, 2}, {1.0, 0.0}));
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_NEAR(att.weights.at({0, i, 0}), 0.7310585786300049, 1e-12);
    EXPECT_NEAR(att.weights.at({0, i, 1}), 0.2689414213699951, 1e-12);
  }
}

TEST(Attention, TemporalLayerWithForcedFactors) {
  DranConfig c = DranConfig::tiny();
  ParamStore ps;
  nn::Rng rng(5);
  init_temporal_layers(ps, c, rng);
  Tensor x = Tensor::randn({2, c.L, c.N, c.d_model}, rng);
  DestatFactors zero{Tensor::zeros({2, c.N, 1}), Tensor::zeros({2, c.N, c.L})};
  auto out = temporal_attention(ps, c, x, zero);
  EXPECT_EQ(out.x_tem.shape(), x.shape());
  EXPECT_EQ(out.first_weights.shape(), (Shape{2, c.N, c.heads, c.L, c.L}));
  for (double w : out.first_weights.data()) EXPECT_NEAR(w, 1.0 / c.L, 1e-15);

  auto plain = temporal_attention(ps, c, x, std::nullopt);
  expect_rows_sum_to_one(plain.first_weights);
}

TEST(Attention, DestatFactorsShapesAndPositivity) {
  DranConfig c = DranConfig::tiny();
  ParamStore ps;
  nn::Rng rng(6);
  init_destat_projectors(ps, c, rng);
  Tensor x = Tensor::randn({3, c.L, c.N, c.d_in}, rng, 4.0);
  auto n = temporal_normalize(x);
  Tensor emb = Tensor::randn({3, c.L, c.N, c.d_model}, rng);
  auto f = destat_factors(ps, emb, n.stats);
  EXPECT_EQ(f.tau.shape(), (Shape{3, c.N, 1}));
  EXPECT_EQ(f.delta.shape(), (Shape{3, c.N, c.L}));
  for (double t : f.tau.data()) EXPECT_GT(t, 0.0);
  init_temporal_layers(ps, c, rng);
  auto out = temporal_attention(ps, c, emb, f);
  expect_rows_sum_to_one(out.first_weights);
}

TEST(Attention, DestationaryGradients) {
  DranConfig c = DranConfig::tiny();
  ParamStore ps;
  nn::Rng rng(7);
  init_destat_projectors(ps, c, rng);
  init_temporal_layers(ps, c, rng);
  Tensor x = Tensor::randn({2, c.L, c.N, c.d_in}, rng);
  Tensor emb = Tensor::randn({2, c.L, c.N, c.d_model}, rng);
  auto res = check_param_gradients(ps, [&] {
    auto n = temporal_normalize(x);
    return probe(temporal_attention(ps, c, emb, destat_factors(ps, emb, n.stats)).x_tem);
  }, 1e-6);
  EXPECT_EQ(res.params_failed, 0u) << res.elements.worst << " at " << res.elements.worst_where;
}

TEST(Sfl, PositiveSigmaAndShapes) {
  DranConfig c = DranConfig::tiny();
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    ParamStore ps;
    nn::Rng rng(seed);
    init_sfl(ps, c, rng);
    const std::size_t B = 1 + seed % 3;
    Tensor raw = Tensor::randn({B, c.L, c.N, c.d_in}, rng, 10.0);
    Tensor tem = Tensor::randn({B, c.L, c.N, c.d_model}, rng, 3.0);
    auto n = temporal_normalize(raw);
    auto f = sfl(ps, c, raw, tem, n.stats);
    EXPECT_EQ(f.mu_spa.shape(), (Shape{B, 1, c.N, c.d_model}));
    EXPECT_EQ(f.sigma_spa.shape(), (Shape{B, 1, c.N, c.d_model}));
    for (double s : f.sigma_spa.data()) EXPECT_GE(s, c.sigma_floor);
  }
}

TEST(Sfl, GradientMatchesFiniteDifferences) {
  DranConfig c = DranConfig::tiny();
  ParamStore ps;
  nn::Rng rng(8);
  init_sfl(ps, c, rng);
  Tensor raw = Tensor::randn({2, c.L, c.N, c.d_in}, rng);
  Tensor tem = Tensor::randn({2, c.L, c.N, c.d_model}, rng);
  auto loss = [&] {
    auto n = temporal_normalize(raw);
    auto f = sfl(ps, c, raw, tem, n.stats);
    return probe(spatial_denormalize(tem, f));
  };
  auto res = check_param_gradients(ps, loss, 1e-6);
  EXPECT_EQ(res.params_failed, 0u) << res.elements.worst << " at " << res.elements.worst_where;
  auto inputs = check_gradients({&tem}, loss, 1e-6);
  EXPECT_EQ(inputs.failed, 0u) << inputs.worst_where;
}

TEST(Denormalize, Examples) {
  const Tensor x = Tensor::full({1, 2, 1, 3}, 4.0);
  SpatialFactors id{Tensor::zeros({1, 1, 1, 3}), Tensor::full({1, 1, 1, 3}, 1.0)};
  Tensor y = spatial_denormalize(x, id);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y[i], x[i]);

  SpatialFactors f{Tensor::full({1, 1, 1, 3}, 1.0), Tensor::full({1, 1, 1, 3}, 2.0)};
  const Tensor divided = spatial_denormalize(x, f);
  const Tensor multiplied = spatial_denormalize(x, f, true);
  for (double v : divided.data()) EXPECT_EQ(v, 3.0);
  for (double v : multiplied.data()) EXPECT_EQ(v, 9.0);

  SpatialFactors g{Tensor::from({1, 1, 1, 3}, {1, 2, 3}), Tensor::full({1, 1, 1, 3}, 0.5)};
  Tensor z = spatial_denormalize(Tensor::zeros({1, 2, 1, 3}), g);
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t d = 0; d < 3; ++d) EXPECT_EQ(z.at({0, l, 0, d}), static_cast<double>(d + 1));
}
