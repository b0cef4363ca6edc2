#pragma once

// Backward/forward variational learners and the forecast decoder.

#include <cmath>
#include <string>

#include "dran/config.hpp"
#include "dran/nn.hpp"
#include "dran/ops.hpp"

namespace dran {

struct LatentPair {
  Tensor mu_b, logvar_b, sigma_b, z_b;
  Tensor mu_f, logvar_f, sigma_f, z_f;
};

struct StochOutputs {
  Tensor x_rec;  // [B, L, N, D_in]
  Tensor x_s;    // [B, L, N, D_model]
};

struct StochasticResult {
  LatentPair latents;
  StochOutputs outputs;
};

enum class SampleMode {
  sample,  // z = mu + sigma * eps, eps ~ N(0, I)
  mean,    // z = mu
};

inline Tensor reparameterize(const Tensor& mu, const Tensor& sigma, const Tensor& eps) {
  return add(mu, mul(sigma, eps));
}

namespace detail {

inline void init_mlp3(ParamStore& ps, const std::string& p, std::size_t in, std::size_t hidden,
                      std::size_t out, nn::Rng& rng) {
  nn::init_linear(ps, p + ".fc1", in, hidden, rng);
  nn::init_linear(ps, p + ".fc2", hidden, hidden, rng);
  nn::init_linear(ps, p + ".fc3", hidden, out, rng);
}

inline Tensor mlp3(const ParamStore& ps, const std::string& p, const Tensor& x) {
  Tensor h = relu(nn::linear(ps, p + ".fc1", x));
  h = relu(nn::linear(ps, p + ".fc2", h));
  return nn::linear(ps, p + ".fc3", h);
}

}  // namespace detail

inline void init_stochastic(ParamStore& ps, const DranConfig& c, nn::Rng& rng) {
  detail::init_mlp3(ps, "sto.b_lat", c.d_model, c.latent, 2 * c.latent, rng);
  detail::init_mlp3(ps, "sto.f_lat", c.d_model, c.latent, 2 * c.latent, rng);
  detail::init_mlp3(ps, "sto.b_rec", c.latent, c.latent, c.d_model, rng);
  detail::init_mlp3(ps, "sto.f_rec", c.latent, c.latent, c.d_model, rng);
  nn::init_linear(ps, "sto.rec_out", c.d_model, c.d_in, rng);
}

// Both latent heads read x_d. The reconstruction reads z_b unless
// eq15_literal, in which case it reads z_f.
template <class Rng>
StochasticResult stochastic_forward(const ParamStore& ps, const DranConfig& c, const Tensor& x_d,
                                    SampleMode mode, Rng* rng) {
  if (mode == SampleMode::sample && rng == nullptr) {
    throw Error("stochastic_forward: sampling requires an RNG");
  }
  LatentPair lat;
  auto head = [&](const std::string& p, Tensor& mu, Tensor& logvar, Tensor& sigma, Tensor& z) {
    Tensor h = detail::mlp3(ps, p, x_d);
    mu = slice(h, -1, 0, c.latent);
    logvar = slice(h, -1, c.latent, c.latent);
    sigma = exp(mul_scalar(logvar, 0.5));
    if (mode == SampleMode::sample) {
      z = reparameterize(mu, sigma, Tensor::randn(mu.shape(), *rng));
    } else {
      z = mu;
    }
  };
  head("sto.b_lat", lat.mu_b, lat.logvar_b, lat.sigma_b, lat.z_b);
  head("sto.f_lat", lat.mu_f, lat.logvar_f, lat.sigma_f, lat.z_f);

  const Tensor& rec_src = c.eq15_literal ? lat.z_f : lat.z_b;
  Tensor x_rec = nn::linear(ps, "sto.rec_out", detail::mlp3(ps, "sto.b_rec", rec_src));
  Tensor x_s = detail::mlp3(ps, "sto.f_rec", lat.z_f);
  return {lat, {x_rec, x_s}};
}

// Mean over elements of 0.5 * (mu^2 + sigma^2 - 1 - log sigma^2).
inline Tensor kl_standard_normal(const Tensor& mu, const Tensor& logvar) {
  Tensor t = sub(add(square(mu), exp(logvar)), add_scalar(logvar, 1.0));
  return mul_scalar(mean_all(t), 0.5);
}

inline Tensor kl_to_standard_normal(const LatentPair& lat, double weight_b = 1.0,
                                    double weight_f = 1.0) {
  return add(mul_scalar(kl_standard_normal(lat.mu_b, lat.logvar_b), weight_b),
             mul_scalar(kl_standard_normal(lat.mu_f, lat.logvar_f), weight_f));
}

inline void init_decoder(ParamStore& ps, const DranConfig& c, nn::Rng& rng) {
  const std::size_t in = c.ablations.no_sto ? c.d_model : 2 * c.d_model;
  nn::init_linear(ps, "dec.fc1", in, c.d_model, rng);
  nn::init_linear(ps, "dec.fc2", c.L * c.d_model, c.H * c.d_in, rng);
}

// Feature fusion per (b, l, n), then an affine map over the flattened
// (L * width) axis of each node producing H steps. x_s may be undefined.
inline Tensor decode(const ParamStore& ps, const DranConfig& c, const Tensor& x_d,
                     const Tensor& x_s = {}) {
  Tensor in = x_s.defined() ? concat({x_d, x_s}, -1) : x_d;
  const std::size_t B = in.dim(0), L = in.dim(1), N = in.dim(2);
  if (L != c.L) throw Error("decode: lookback axis " + std::to_string(L) + " != L");
  Tensor h = relu(nn::linear(ps, "dec.fc1", in));  // [B, L, N, D]
  Tensor flat = reshape(permute(h, {0, 2, 1, 3}), {B, N, L * c.d_model});
  Tensor y = nn::linear(ps, "dec.fc2", flat);  // [B, N, H * D_in]
  return permute(reshape(y, {B, N, c.H, c.d_in}), {0, 2, 1, 3});
}

}  // namespace dran
