#pragma once

// Distribution adaptation: low-pass filtering, per-window temporal
// normalization, de-stationary temporal attention, and the spatial factor
// learner that re-scales the temporal representation before spatial layers.

#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "dran/config.hpp"
#include "dran/nn.hpp"
#include "dran/ops.hpp"

namespace dran {

// Keeps the lowest ceil(keep_frac * L) DFT bins along the time axis of a
// [B, L, N, D] block, completed to conjugate pairs so the result is real.
// Operates on data only; the result carries no gradient.
inline Tensor lowpass_filter(const Tensor& x, double keep_frac) {
  if (!(keep_frac > 0.0 && keep_frac <= 1.0)) {
    throw Error("lowpass_filter: keep_frac must be in (0,1]");
  }
  if (x.rank() != 4) throw Error("lowpass_filter: expected [B,L,N,D], got " + to_string(x.shape()));
  const std::size_t B = x.dim(0), L = x.dim(1), N = x.dim(2), D = x.dim(3);
  std::vector<double> out(x.data().begin(), x.data().end());
  const auto kept = static_cast<std::size_t>(std::ceil(keep_frac * static_cast<double>(L)));
  if (kept >= L) return Tensor::from(x.shape(), std::move(out));
  // The j-th bin in ascending-frequency order has frequency ceil(j/2).
  const std::size_t max_freq = kept / 2;
  std::vector<bool> keep(L);
  for (std::size_t k = 0; k < L; ++k) keep[k] = std::min(k, L - k) <= max_freq;

  std::vector<double> cos_t(L * L), sin_t(L * L);
  for (std::size_t k = 0; k < L; ++k) {
    for (std::size_t t = 0; t < L; ++t) {
      const double a = 2.0 * std::numbers::pi * static_cast<double>((k * t) % L) /
                       static_cast<double>(L);
      cos_t[k * L + t] = std::cos(a);
      sin_t[k * L + t] = std::sin(a);
    }
  }
  const auto xv = x.data();
  const std::size_t row = N * D;
  std::vector<double> re(L), im(L);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < row; ++c) {
      const std::size_t base = b * L * row + c;
      for (std::size_t k = 0; k < L; ++k) {
        re[k] = im[k] = 0.0;
        if (!keep[k]) continue;
        for (std::size_t t = 0; t < L; ++t) {
          const double v = xv[base + t * row];
          re[k] += v * cos_t[k * L + t];
          im[k] -= v * sin_t[k * L + t];
        }
      }
      for (std::size_t t = 0; t < L; ++t) {
        double acc = 0.0;
        for (std::size_t k = 0; k < L; ++k) {
          if (keep[k]) acc += re[k] * cos_t[k * L + t] - im[k] * sin_t[k * L + t];
        }
        out[base + t * row] = acc / static_cast<double>(L);
      }
    }
  }
  return Tensor::from(x.shape(), std::move(out));
}

struct NormStats {
  Tensor mu;     // [B, 1, N, D]
  Tensor sigma;  // [B, 1, N, D], floored
};

struct Normalized {
  Tensor x_norm;
  NormStats stats;
};

// Per-window, per-node standardization along the lookback axis with the
// population standard deviation floored at sigma_floor.
inline Normalized temporal_normalize(const Tensor& x, double sigma_floor = 1e-5) {
  if (x.rank() != 4) throw Error("temporal_normalize: expected [B,L,N,D], got " + to_string(x.shape()));
  const std::size_t B = x.dim(0), L = x.dim(1), N = x.dim(2), D = x.dim(3);
  if (L < 2) throw Error("temporal_normalize: L must be >= 2");
  const std::size_t row = N * D;
  const auto xv = x.data();
  std::vector<double> mu(B * row), sigma(B * row), norm(x.size());
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < row; ++c) {
      const std::size_t base = b * L * row + c;
      double s = 0.0;
      for (std::size_t t = 0; t < L; ++t) s += xv[base + t * row];
      const double m = s / static_cast<double>(L);
      double ss = 0.0;
      for (std::size_t t = 0; t < L; ++t) {
        const double d = xv[base + t * row] - m;
        ss += d * d;
      }
      const double sd = std::max(std::sqrt(ss / static_cast<double>(L)), sigma_floor);
      mu[b * row + c] = m;
      sigma[b * row + c] = sd;
      for (std::size_t t = 0; t < L; ++t) norm[base + t * row] = (xv[base + t * row] - m) / sd;
    }
  }
  return {Tensor::from(x.shape(), std::move(norm)),
          {Tensor::from({B, 1, N, D}, std::move(mu)), Tensor::from({B, 1, N, D}, std::move(sigma))}};
}

inline Tensor temporal_denormalize(const Tensor& x_norm, const NormStats& stats) {
  return add(mul(x_norm, stats.sigma), stats.mu);
}

// ---------------------------------------------------------------------------
// Attention

// [..., S, D] -> [..., heads, S, D/heads]
inline Tensor split_heads(const Tensor& x, std::size_t heads) {
  const std::size_t r = x.rank();
  const std::size_t S = x.dim(-2), D = x.dim(-1);
  if (D % heads != 0) throw Error("split_heads: width not divisible by heads");
  Shape s(x.shape().begin(), x.shape().end() - 2);
  s.push_back(S);
  s.push_back(heads);
  s.push_back(D / heads);
  std::vector<std::size_t> axes(r + 1);
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  std::swap(axes[r - 2], axes[r - 1]);
  return permute(reshape(x, s), axes);
}

// [..., heads, S, dh] -> [..., S, heads*dh]
inline Tensor merge_heads(const Tensor& x) {
  const std::size_t r = x.rank();
  std::vector<std::size_t> axes(r);
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  std::swap(axes[r - 3], axes[r - 2]);
  Tensor y = permute(x, axes);
  Shape s(y.shape().begin(), y.shape().end() - 2);
  s.push_back(y.dim(-2) * y.dim(-1));
  return reshape(y, s);
}

struct AttentionOutput {
  Tensor out;      // [..., S, dh]
  Tensor logits;   // [..., S, S]
  Tensor weights;  // softmax(logits) over the last axis
};

// logits = tau * (q k^T) * scale + delta; tau and delta broadcast against the
// logits and may be undefined.
inline AttentionOutput scaled_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                        double scale, const Tensor& tau = {},
                                        const Tensor& delta = {}) {
  Tensor logits = matmul(q, transpose(k));
  if (scale != 1.0) logits = mul_scalar(logits, scale);
  if (tau.defined()) logits = mul(logits, tau);
  if (delta.defined()) logits = add(logits, delta);
  Tensor w = softmax(logits, -1);
  return {matmul(w, v), logits, w};
}

struct DestatFactors {
  Tensor tau;    // [B, N, 1], positive
  Tensor delta;  // [B, N, L]
};

namespace detail {

// [B, L, N, C] -> conv over C with L as channels -> [B, N, C]
inline Tensor nodewise_conv(const ParamStore& ps, const std::string& path, const Tensor& x) {
  const std::size_t B = x.dim(0), L = x.dim(1), N = x.dim(2), C = x.dim(3);
  Tensor per_node = reshape(permute(x, {0, 2, 1, 3}), {B * N, L, C});
  return reshape(nn::conv1d(ps, path, per_node), {B, N, C});
}

inline Tensor stat_rows(const Tensor& stat) {
  return reshape(stat, {stat.dim(0), stat.dim(2), stat.dim(3)});
}

}  // namespace detail

inline void init_destat_projectors(ParamStore& ps, const DranConfig& c, nn::Rng& rng) {
  for (const char* which : {"tem.tau", "tem.delta"}) {
    const std::string p = which;
    nn::init_conv1d(ps, p + ".conv", c.L, 1, c.conv_kernel, rng);
    nn::init_linear(ps, p + ".fc1", c.d_model + c.d_in, c.mlp_hidden, rng);
    nn::init_linear(ps, p + ".fc2", c.mlp_hidden, p == "tem.tau" ? 1 : c.L, rng);
  }
}

// log tau = MLP(conv(x_emb), sigma_X); delta = MLP(conv(x_emb), mu_X).
inline DestatFactors destat_factors(const ParamStore& ps, const Tensor& x_emb,
                                    const NormStats& stats) {
  auto project = [&](const std::string& p, const Tensor& stat) {
    Tensor feats = concat({detail::nodewise_conv(ps, p + ".conv", x_emb), detail::stat_rows(stat)}, -1);
    return nn::linear(ps, p + ".fc2", relu(nn::linear(ps, p + ".fc1", feats)));
  };
  return {exp(project("tem.tau", stats.sigma)), project("tem.delta", stats.mu)};
}

inline void init_temporal_layers(ParamStore& ps, const DranConfig& c, nn::Rng& rng) {
  for (std::size_t l = 0; l < c.tem_layers; ++l) {
    const std::string p = "tem.layer" + std::to_string(l);
    for (const char* proj : {".q", ".k", ".v", ".o"}) nn::init_linear(ps, p + proj, c.d_model, c.d_model, rng);
    nn::init_layer_norm(ps, p + ".ln1", c.d_model);
    nn::init_linear(ps, p + ".ffn1", c.d_model, c.ffn, rng);
    nn::init_linear(ps, p + ".ffn2", c.ffn, c.d_model, rng);
    nn::init_layer_norm(ps, p + ".ln2", c.d_model);
  }
}

struct TemporalOutput {
  Tensor x_tem;            // [B, L, N, D_model]
  Tensor first_weights;    // [B, N, heads, L, L]
};

// Stacked post-norm encoder layers attending over the lookback axis of each
// node. With factors present the logits are tau * QK^T / sqrt(d) + delta;
// without them this is standard attention.
inline TemporalOutput temporal_attention(const ParamStore& ps, const DranConfig& c,
                                         const Tensor& x_emb,
                                         const std::optional<DestatFactors>& factors) {
  const std::size_t B = x_emb.dim(0), L = x_emb.dim(1), N = x_emb.dim(2);
  Tensor tau, delta;
  if (factors) {
    tau = reshape(factors->tau, {B, N, 1, 1, 1});
    delta = reshape(factors->delta, {B, N, 1, 1, L});
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(c.head_dim()));
  Tensor h = permute(x_emb, {0, 2, 1, 3});  // [B, N, L, D]
  TemporalOutput out;
  for (std::size_t l = 0; l < c.tem_layers; ++l) {
    const std::string p = "tem.layer" + std::to_string(l);
    auto att = scaled_attention(split_heads(nn::linear(ps, p + ".q", h), c.heads),
                                split_heads(nn::linear(ps, p + ".k", h), c.heads),
                                split_heads(nn::linear(ps, p + ".v", h), c.heads), scale, tau,
                                delta);
    if (l == 0) out.first_weights = att.weights;
    Tensor a = nn::linear(ps, p + ".o", merge_heads(att.out));
    h = nn::layer_norm(ps, p + ".ln1", add(h, a));
    Tensor f = nn::linear(ps, p + ".ffn2", relu(nn::linear(ps, p + ".ffn1", h)));
    h = nn::layer_norm(ps, p + ".ln2", add(h, f));
  }
  out.x_tem = permute(h, {0, 2, 1, 3});
  return out;
}

// ---------------------------------------------------------------------------
// Spatial factor learner

struct SpatialFactors {
  Tensor mu_spa;     // [B, 1, N, D_model]
  Tensor sigma_spa;  // [B, 1, N, D_model], >= sigma_floor
};

inline void init_sfl(ParamStore& ps, const DranConfig& c, nn::Rng& rng) {
  nn::init_conv1d(ps, "sfl.conv_raw", c.L, 1, c.conv_kernel, rng);
  nn::init_linear(ps, "sfl.fc_raw", c.d_in, c.mlp_hidden, rng);
  nn::init_conv1d(ps, "sfl.conv_tem", c.L, 1, c.conv_kernel, rng);
  nn::init_linear(ps, "sfl.fc_tem", c.d_model, c.mlp_hidden, rng);
  nn::init_linear(ps, "sfl.fc_mu", c.d_in, c.mlp_hidden, rng);
  nn::init_linear(ps, "sfl.fc_sigma", c.d_in, c.mlp_hidden, rng);
  nn::init_linear(ps, "sfl.mlp1", 4 * c.mlp_hidden, c.mlp_hidden, rng);
  nn::init_linear(ps, "sfl.mlp2", c.mlp_hidden, 2 * c.d_model, rng);
}

inline SpatialFactors sfl(const ParamStore& ps, const DranConfig& c, const Tensor& x_raw,
                          const Tensor& x_tem, const NormStats& stats) {
  if (x_raw.rank() != 4 || x_tem.rank() != 4 || x_raw.dim(0) != x_tem.dim(0) ||
      x_raw.dim(1) != x_tem.dim(1) || x_raw.dim(2) != x_tem.dim(2)) {
    throw Error("sfl: inconsistent shapes " + to_string(x_raw.shape()) + " and " +
                to_string(x_tem.shape()));
  }
  const std::size_t B = x_tem.dim(0), N = x_tem.dim(2), D = x_tem.dim(3);
  Tensor f_raw = nn::linear(ps, "sfl.fc_raw", detail::nodewise_conv(ps, "sfl.conv_raw", x_raw));
  Tensor f_tem = nn::linear(ps, "sfl.fc_tem", detail::nodewise_conv(ps, "sfl.conv_tem", x_tem));
  Tensor f_mu = nn::linear(ps, "sfl.fc_mu", detail::stat_rows(stats.mu));
  Tensor f_sigma = nn::linear(ps, "sfl.fc_sigma", detail::stat_rows(stats.sigma));
  Tensor h = relu(nn::linear(ps, "sfl.mlp1", concat({f_raw, f_tem, f_mu, f_sigma}, -1)));
  Tensor out = nn::linear(ps, "sfl.mlp2", h);  // [B, N, 2D]
  Tensor mu = reshape(slice(out, -1, 0, D), {B, 1, N, D});
  Tensor sigma = add_scalar(softplus(reshape(slice(out, -1, D, D), {B, 1, N, D})), c.sigma_floor);
  return {mu, sigma};
}

// x_spa = x_tem / sigma_spa + mu_spa (or x_tem * sigma_spa + mu_spa).
inline Tensor spatial_denormalize(const Tensor& x_tem, const SpatialFactors& f,
                                  bool multiply = false) {
  Tensor scaled = multiply ? mul(x_tem, f.sigma_spa) : div(x_tem, f.sigma_spa);
  return add(scaled, f.mu_spa);
}

}  // namespace dran
