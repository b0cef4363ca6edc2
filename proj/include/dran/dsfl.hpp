#pragma once

// Dynamic-static fusion: per-time-step spatial attention (dynamic relations),
// aggregation over a Gram matrix of trainable node embeddings (static
// relations), and a sigmoid gate mixing the two.

#include <cmath>
#include <string>

#include "dran/config.hpp"
#include "dran/distadapt.hpp"
#include "dran/nn.hpp"
#include "dran/ops.hpp"

namespace dran {

inline void init_dynamic_branch(ParamStore& ps, const DranConfig& c, nn::Rng& rng) {
  for (std::size_t l = 0; l < c.spa_layers; ++l) {
    const std::string p = "dsfl.dyn.layer" + std::to_string(l);
    for (const char* proj : {".q", ".k", ".v"}) nn::init_linear(ps, p + proj, c.d_model, c.d_model, rng);
  }
}

struct DynamicOutput {
  Tensor x_dy;     // [B, L, N, D_model]
  Tensor a_dy;     // first layer logits, [B, heads, L, N, N]
  Tensor weights;  // softmax(a_dy), same layout
};

// Stacked multi-head attention across nodes at each time step. Heads are
// concatenated without an output projection.
inline DynamicOutput dynamic_branch(const ParamStore& ps, const DranConfig& c,
                                    const Tensor& x_spa) {
  if (x_spa.rank() != 4 || x_spa.dim(3) != c.d_model) {
    throw Error("dynamic_branch: expected [B,L,N," + std::to_string(c.d_model) + "], got " +
                to_string(x_spa.shape()));
  }
  const double scale =
      c.spatial_logit_scaling ? 1.0 / std::sqrt(static_cast<double>(c.head_dim())) : 1.0;
  DynamicOutput out;
  Tensor h = x_spa;
  for (std::size_t l = 0; l < c.spa_layers; ++l) {
    const std::string p = "dsfl.dyn.layer" + std::to_string(l);
    auto att = scaled_attention(split_heads(nn::linear(ps, p + ".q", h), c.heads),
                                split_heads(nn::linear(ps, p + ".k", h), c.heads),
                                split_heads(nn::linear(ps, p + ".v", h), c.heads), scale);
    if (l == 0) {
      out.a_dy = permute(att.logits, {0, 2, 1, 3, 4});
      out.weights = permute(att.weights, {0, 2, 1, 3, 4});
    }
    h = merge_heads(att.out);
  }
  out.x_dy = h;
  return out;
}

// E_a: [L, N, C_e], uniform in +-0.5/sqrt(C_e).
inline void init_node_embedding(ParamStore& ps, const DranConfig& c, nn::Rng& rng) {
  const double bound = 0.5 / std::sqrt(static_cast<double>(c.c_e));
  ps.add("dsfl.emb", Tensor::uniform({c.L, c.N, c.c_e}, rng, -bound, bound));
  nn::init_linear(ps, "dsfl.W", c.d_model, c.d_model, rng, /*bias=*/false);
}

struct StaticRelations {
  Tensor gram;  // E_a E_a^T per time step, [L, N, N]
  Tensor a_st;  // row-softmax of gram, or gram itself
};

inline StaticRelations static_relations(const Tensor& emb, bool rownorm) {
  if (emb.rank() != 3) throw Error("static_relations: expected [L,N,C], got " + to_string(emb.shape()));
  Tensor gram = matmul(emb, transpose(emb));
  return {gram, rownorm ? softmax(gram, -1) : gram};
}

// x_st = A_st x_spa W.
inline Tensor static_aggregate(const Tensor& a_st, const Tensor& x_spa, const Tensor& w) {
  return matmul(matmul(a_st, x_spa), w);
}

struct StaticOutput {
  Tensor x_st;
  StaticRelations relations;
};

inline StaticOutput static_branch(const ParamStore& ps, const DranConfig& c, const Tensor& x_spa) {
  const Tensor& emb = ps.get("dsfl.emb");
  if (emb.dim(0) != x_spa.dim(1) || emb.dim(1) != x_spa.dim(2)) {
    throw Error("static_branch: embedding " + to_string(emb.shape()) +
                " does not match input " + to_string(x_spa.shape()));
  }
  auto rel = static_relations(emb, c.a_st_rownorm);
  return {static_aggregate(rel.a_st, x_spa, ps.get("dsfl.W.weight")), rel};
}

inline void init_gated_fusion(ParamStore& ps, const DranConfig& c, nn::Rng& rng) {
  nn::init_linear(ps, "dsfl.gate", 2 * c.d_model, c.d_model, rng);
  nn::init_linear(ps, "dsfl.fc_dy", c.d_model, c.d_model, rng);
  nn::init_linear(ps, "dsfl.fc_st", c.d_model, c.d_model, rng);
}

struct FusionOutput {
  Tensor x_d;
  Tensor z;  // gate in (0, 1)
};

// z = sigmoid(Linear([x_dy, x_st])); x_d = z * FC(x_dy) + (1 - z) * FC(x_st).
inline FusionOutput gated_fusion(const ParamStore& ps, const Tensor& x_dy, const Tensor& x_st) {
  if (x_dy.shape() != x_st.shape()) {
    throw Error("gated_fusion: shapes " + to_string(x_dy.shape()) + " and " +
                to_string(x_st.shape()) + " differ");
  }
  Tensor z = sigmoid(nn::linear(ps, "dsfl.gate", concat({x_dy, x_st}, -1)));
  Tensor a = nn::linear(ps, "dsfl.fc_dy", x_dy);
  Tensor b = nn::linear(ps, "dsfl.fc_st", x_st);
  // z*a + (1-z)*b == b + z*(a-b)
  Tensor x_d = add(b, mul(z, sub(a, b)));
  return {x_d, z};
}

inline void init_concat_projection(ParamStore& ps, const DranConfig& c, nn::Rng& rng) {
  nn::init_linear(ps, "dsfl.cat_proj", 2 * c.d_model, c.d_model, rng);
}

// Gate-free fusion: a single linear map of the concatenated features.
inline Tensor concat_fusion(const ParamStore& ps, const Tensor& x_dy, const Tensor& x_st) {
  return nn::linear(ps, "dsfl.cat_proj", concat({x_dy, x_st}, -1));
}

}  // namespace dran
