#pragma once

// Full forward pass: filter -> normalize -> embed -> de-stationary attention
// -> SFL de-normalization -> dynamic/static fusion -> stochastic learner ->
// decoder. Ablation switches bypass the corresponding stages.

#include <optional>
#include <random>

#include "dran/config.hpp"
#include "dran/distadapt.hpp"
#include "dran/dsfl.hpp"
#include "dran/nn.hpp"
#include "dran/params.hpp"
#include "dran/stochastic.hpp"

namespace dran {

struct DranModel {
  DranConfig config;
  ParamStore params;

  static DranModel create(const DranConfig& cfg) {
    cfg.validate();
    DranModel m{cfg, {}};
    nn::Rng rng(cfg.seed);
    ParamStore& ps = m.params;
    const Ablations& a = cfg.ablations;
    nn::init_linear(ps, "tem.embed", cfg.d_in, cfg.d_model, rng);
    if (!a.no_sta) init_destat_projectors(ps, cfg, rng);
    init_temporal_layers(ps, cfg, rng);
    if (!a.no_sta && !a.no_sfl) init_sfl(ps, cfg, rng);
    init_dynamic_branch(ps, cfg, rng);
    if (!a.no_dsfl) {
      init_node_embedding(ps, cfg, rng);
      if (a.no_gate) {
        init_concat_projection(ps, cfg, rng);
      } else {
        init_gated_fusion(ps, cfg, rng);
      }
    }
    if (!a.no_sto) init_stochastic(ps, cfg, rng);
    init_decoder(ps, cfg, rng);
    return m;
  }
};

struct Intermediates {
  Tensor x_filtered;
  Tensor x_norm;
  std::optional<NormStats> stats;
  std::optional<DestatFactors> destat;
  Tensor temporal_weights;
  Tensor x_tem;
  std::optional<SpatialFactors> spatial;
  Tensor x_spa;
  Tensor a_dy;
  Tensor dy_weights;
  std::optional<StaticRelations> relations;
  Tensor gate;
  Tensor x_d;
};

struct ForwardResult {
  Tensor forecast;                    // [B, H, N, D_in]
  Tensor x_rec;                       // undefined without the stochastic learner
  std::optional<LatentPair> latents;
  Intermediates mid;
};

enum class RunMode { train, eval };

template <class Rng = std::mt19937_64>
ForwardResult dran_forward(const DranModel& model, const Tensor& lookback, RunMode mode,
                           Rng* rng = nullptr) {
  const DranConfig& c = model.config;
  const ParamStore& ps = model.params;
  const Ablations& a = c.ablations;
  if (lookback.rank() != 4 || lookback.dim(1) != c.L || lookback.dim(2) != c.N ||
      lookback.dim(3) != c.d_in) {
    throw Error("dran_forward: lookback shape " + to_string(lookback.shape()) +
                " does not match config [B," + std::to_string(c.L) + "," +
                std::to_string(c.N) + "," + std::to_string(c.d_in) + "]");
  }
  ForwardResult r;
  Intermediates& m = r.mid;
  m.x_filtered = lowpass_filter(lookback, c.keep_frac);
  if (a.no_sta) {
    m.x_norm = m.x_filtered;
  } else {
    auto n = temporal_normalize(m.x_filtered, c.sigma_floor);
    m.x_norm = n.x_norm;
    m.stats = n.stats;
  }
  Tensor emb = nn::linear(ps, "tem.embed", m.x_norm);
  if (!a.no_sta) m.destat = destat_factors(ps, emb, *m.stats);
  auto tem = temporal_attention(ps, c, emb, m.destat);
  m.x_tem = tem.x_tem;
  m.temporal_weights = tem.first_weights;
  if (!a.no_sta && !a.no_sfl) {
    m.spatial = sfl(ps, c, m.x_filtered, m.x_tem, *m.stats);
    m.x_spa = spatial_denormalize(m.x_tem, *m.spatial, c.denorm_multiply);
  } else {
    m.x_spa = m.x_tem;
  }

  auto dyn = dynamic_branch(ps, c, m.x_spa);
  m.a_dy = dyn.a_dy;
  m.dy_weights = dyn.weights;
  if (a.no_dsfl) {
    m.x_d = dyn.x_dy;
  } else {
    auto st = static_branch(ps, c, m.x_spa);
    m.relations = st.relations;
    if (a.no_gate) {
      m.x_d = concat_fusion(ps, dyn.x_dy, st.x_st);
    } else {
      auto fused = gated_fusion(ps, dyn.x_dy, st.x_st);
      m.x_d = fused.x_d;
      m.gate = fused.z;
    }
  }

  if (a.no_sto) {
    r.forecast = decode(ps, c, m.x_d);
  } else {
    const SampleMode sm = mode == RunMode::train ? SampleMode::sample : SampleMode::mean;
    auto sto = stochastic_forward(ps, c, m.x_d, sm, rng);
    r.latents = sto.latents;
    r.x_rec = sto.outputs.x_rec;
    r.forecast = decode(ps, c, m.x_d, sto.outputs.x_s);
  }
  return r;
}

struct LossParts {
  Tensor total;
  Tensor pred;
  Tensor rec;
  Tensor kl;
};

// L = MAE(forecast, horizon) + alpha * MAE(x_rec, lookback) + beta * kl.
// x_rec and kl may be undefined (no stochastic learner).
inline LossParts total_loss(const Tensor& forecast, const Tensor& horizon, const Tensor& x_rec,
                            const Tensor& lookback, const Tensor& kl, double alpha, double beta) {
  if (forecast.shape() != horizon.shape()) {
    throw Error("total_loss: forecast " + to_string(forecast.shape()) + " vs horizon " +
                to_string(horizon.shape()));
  }
  LossParts l;
  l.pred = mean_all(abs(sub(forecast, horizon)));
  l.total = l.pred;
  if (x_rec.defined()) {
    if (x_rec.shape() != lookback.shape()) {
      throw Error("total_loss: reconstruction " + to_string(x_rec.shape()) + " vs lookback " +
                  to_string(lookback.shape()));
    }
    l.rec = mean_all(abs(sub(x_rec, lookback)));
    l.total = add(l.total, mul_scalar(l.rec, alpha));
  } else {
    l.rec = Tensor::scalar(0.0);
  }
  if (kl.defined()) {
    l.kl = kl;
    l.total = add(l.total, mul_scalar(kl, beta));
  } else {
    l.kl = Tensor::scalar(0.0);
  }
  return l;
}

template <class Rng = std::mt19937_64>
LossParts batch_loss(const DranModel& model, const Tensor& lookback, const Tensor& horizon,
                     RunMode mode, Rng* rng = nullptr) {
  auto r = dran_forward(model, lookback, mode, rng);
  Tensor kl;
  if (r.latents) {
    kl = kl_to_standard_normal(*r.latents, model.config.kl_weight_b, model.config.kl_weight_f);
  }
  return total_loss(r.forecast, horizon, r.x_rec, lookback, kl, model.config.alpha,
                    model.config.beta);
}

}  // namespace dran
