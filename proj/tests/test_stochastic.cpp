#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "dran/stochastic.hpp"
#include "support.hpp"

using namespace dran;
using dran::testing::check_gradients;
using dran::testing::check_param_gradients;
using dran::testing::probe;

namespace {

DranConfig small_config() {
  DranConfig c = DranConfig::tiny();
  c.L = 3;
  c.H = 2;
  c.N = 2;
  c.d_model = 4;
  c.latent = 3;
  return c;
}

bool same_bits(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

TEST(Reparameterize, ZeroSigmaReturnsMean) {
  std::mt19937_64 rng(1);
  Tensor mu = Tensor::randn({3, 4}, rng);
  Tensor z = reparameterize(mu, Tensor::zeros({3, 4}), Tensor::randn({3, 4}, rng));
  EXPECT_TRUE(same_bits(z, mu));
}

// Each trial misses the 3-sigma band with probability 0.0027, so at most
// two misses in 20 independent trials.
TEST(Reparameterize, MonteCarloMeanAndSpread) {
  const std::size_t M = 10000;
  const double mu = 1.5, sigma = 0.7;
  int misses = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    Tensor z = reparameterize(Tensor::full({M}, mu), Tensor::full({M}, sigma),
                              Tensor::randn({M}, rng));
    double m = 0.0, v = 0.0;
    for (double x : z.data()) m += x;
    m /= M;
    for (double x : z.data()) v += (x - m) * (x - m);
    v /= M;
    if (std::abs(m - mu) > 3.0 * sigma / 100.0) ++misses;
    EXPECT_NEAR(std::sqrt(v), sigma, 0.02);
  }
  EXPECT_LE(misses, 2);
}

TEST(Reparameterize, GradientOfMeanIsOne) {
  std::mt19937_64 rng(3);
  Tensor mu = Tensor::randn({2, 5}, rng, 1.0, true);
  Tensor sigma = Tensor::full({2, 5}, 0.3, true);
  Tensor eps = Tensor::randn({2, 5}, rng);
  Tensor z = reparameterize(mu, sigma, eps);
  sum_all(z).backward();
  for (double g : mu.grad()) EXPECT_EQ(g, 1.0);
  for (std::size_t i = 0; i < eps.size(); ++i) EXPECT_EQ(sigma.grad()[i], eps[i]);
}

TEST(Stochastic, SameSeedSameOutputs) {
  DranConfig c = small_config();
  ParamStore ps;
  nn::Rng init(4);
  init_stochastic(ps, c, init);
  Tensor x = Tensor::randn({2, c.L, c.N, c.d_model}, init);
  std::mt19937_64 r1(99), r2(99), r3(100);
  auto a = stochastic_forward(ps, c, x, SampleMode::sample, &r1);
  auto b = stochastic_forward(ps, c, x, SampleMode::sample, &r2);
  auto d = stochastic_forward(ps, c, x, SampleMode::sample, &r3);
  EXPECT_TRUE(same_bits(a.outputs.x_rec, b.outputs.x_rec));
  EXPECT_TRUE(same_bits(a.outputs.x_s, b.outputs.x_s));
  EXPECT_TRUE(same_bits(a.latents.z_f, b.latents.z_f));
  EXPECT_FALSE(same_bits(a.latents.z_f, d.latents.z_f));
}

TEST(Stochastic, MeanModeUsesMuAndNeedsNoRng) {
  DranConfig c = small_config();
  ParamStore ps;
  nn::Rng init(5);
  init_stochastic(ps, c, init);
  Tensor x = Tensor::randn({1, c.L, c.N, c.d_model}, init);
  auto r = stochastic_forward<std::mt19937_64>(ps, c, x, SampleMode::mean, nullptr);
  EXPECT_TRUE(same_bits(r.latents.z_b, r.latents.mu_b));
  EXPECT_TRUE(same_bits(r.latents.z_f, r.latents.mu_f));
  EXPECT_EQ(r.outputs.x_rec.shape(), (Shape{1, c.L, c.N, c.d_in}));
  EXPECT_EQ(r.outputs.x_s.shape(), (Shape{1, c.L, c.N, c.d_model}));
  EXPECT_EQ(r.latents.mu_b.shape(), (Shape{1, c.L, c.N, c.latent}));
  EXPECT_THROW(stochastic_forward<std::mt19937_64>(ps, c, x, SampleMode::sample, nullptr), Error);
}

TEST(Stochastic, ReconstructionSourceFollowsFlag) {
  DranConfig c = small_config();
  ParamStore ps;
  nn::Rng init(6);
  c.latent = 8;  // a 3-wide ReLU stack can be dead at init
  init_stochastic(ps, c, init);
  Tensor x = Tensor::randn({1, c.L, c.N, c.d_model}, init);
  auto a = stochastic_forward<std::mt19937_64>(ps, c, x, SampleMode::mean, nullptr);
  c.eq15_literal = true;
  auto b = stochastic_forward<std::mt19937_64>(ps, c, x, SampleMode::mean, nullptr);
  EXPECT_FALSE(same_bits(a.outputs.x_rec, b.outputs.x_rec));
  EXPECT_TRUE(same_bits(a.outputs.x_s, b.outputs.x_s));
}

TEST(Kl, StandardNormalExamples) {
  EXPECT_EQ(kl_standard_normal(Tensor::zeros({4}), Tensor::zeros({4})).item(), 0.0);
  EXPECT_EQ(kl_standard_normal(Tensor::full({4}, 1.0), Tensor::zeros({4})).item(), 0.5);
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    EXPECT_GE(kl_standard_normal(Tensor::randn({6}, rng, 2.0), Tensor::randn({6}, rng, 2.0)).item(),
              0.0);
  }
}

TEST(Kl, WeightedPairSum) {
  LatentPair lat;
  lat.mu_b = Tensor::full({2}, 1.0);
  lat.logvar_b = Tensor::zeros({2});
  lat.mu_f = Tensor::zeros({2});
  lat.logvar_f = Tensor::zeros({2});
  EXPECT_EQ(kl_to_standard_normal(lat).item(), 0.5);
  EXPECT_EQ(kl_to_standard_normal(lat, 2.0, 1.0).item(), 1.0);
  EXPECT_EQ(kl_to_standard_normal(lat, 0.0, 1.0).item(), 0.0);
}

TEST(Decoder, ShapeAndZeroInput) {
  DranConfig c = small_config();
  ParamStore ps;
  nn::Rng init(8);
  init_decoder(ps, c, init);
  for (const char* b : {"dec.fc1.bias", "dec.fc2.bias"})
    for (auto& v : ps.get(b).mutable_data()) v = 0.0;
  Tensor y = decode(ps, c, Tensor::zeros({3, c.L, c.N, c.d_model}),
                    Tensor::zeros({3, c.L, c.N, c.d_model}));
  EXPECT_EQ(y.shape(), (Shape{3, c.H, c.N, c.d_in}));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(decode(ps, c, Tensor::zeros({3, c.L + 1, c.N, c.d_model}),
                      Tensor::zeros({3, c.L + 1, c.N, c.d_model})),
               Error);
}

TEST(Decoder, WithoutStochasticInputWidth) {
  DranConfig c = small_config();
  c.ablations.no_sto = true;
  ParamStore ps;
  nn::Rng init(9);
  init_decoder(ps, c, init);
  EXPECT_EQ(ps.get("dec.fc1.weight").dim(0), c.d_model);
  Tensor y = decode(ps, c, Tensor::randn({2, c.L, c.N, c.d_model}, init));
  EXPECT_EQ(y.shape(), (Shape{2, c.H, c.N, c.d_in}));
  EXPECT_THROW(decode(ps, c, Tensor::zeros({2, c.L, c.N, c.d_model}),
                      Tensor::zeros({2, c.L, c.N, c.d_model})),
               Error);
}

TEST(Decoder, NodesDecodedIndependently) {
  DranConfig c = small_config();
  c.ablations.no_sto = true;
  ParamStore ps;
  nn::Rng init(10);
  init_decoder(ps, c, init);
  Tensor x = Tensor::randn({1, c.L, c.N, c.d_model}, init);
  Tensor y0 = decode(ps, c, x);
  auto d = x.mutable_data();
  for (std::size_t l = 0; l < c.L; ++l) d[(l * c.N + 1) * c.d_model] += 3.0;
  Tensor y1 = decode(ps, c, x);
  for (std::size_t h = 0; h < c.H; ++h) EXPECT_EQ(y0.at({0, h, 0, 0}), y1.at({0, h, 0, 0}));
}

TEST(StochasticGradients, LatentsReconstructionAndDecoder) {
  DranConfig c = small_config();
  ParamStore ps;
  nn::Rng init(11);
  init_stochastic(ps, c, init);
  init_decoder(ps, c, init);
  Tensor x = Tensor::randn({2, c.L, c.N, c.d_model}, init);
  auto loss = [&] {
    std::mt19937_64 rng(12);  // same eps on every evaluation
    auto r = stochastic_forward(ps, c, x, SampleMode::sample, &rng);
    Tensor y = decode(ps, c, x, r.outputs.x_s);
    return add(add(probe(y, 1), probe(r.outputs.x_rec, 2)), kl_to_standard_normal(r.latents));
  };
  auto res = check_param_gradients(ps, loss, 1e-6);
  EXPECT_EQ(res.params_failed, 0u) << res.elements.worst_where;
  auto in = check_gradients({&x}, loss, 1e-6);
  EXPECT_EQ(in.failed, 0u) << in.worst_where;
}
