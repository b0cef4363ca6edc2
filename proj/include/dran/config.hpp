#pragma once

// Model/training configuration, named presets, and ablation variants.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "dran/tensor.hpp"

namespace dran {

struct Ablations {
  bool no_sto = false;
  bool no_sta = false;
  bool no_sfl = false;
  bool no_dsfl = false;
  bool no_gate = false;

  bool operator==(const Ablations&) const = default;
};

struct SplitFractions {
  double train = 0.6;
  double val = 0.2;
  double test = 0.2;
};

struct DranConfig {
  // Dimensions.
  std::size_t L = 12;
  std::size_t H = 12;
  std::size_t N = 8;
  std::size_t d_in = 1;
  std::size_t d_model = 160;
  std::size_t c_e = 80;
  std::size_t latent = 64;
  std::size_t heads = 4;
  std::size_t tem_layers = 3;
  std::size_t spa_layers = 3;
  std::size_t ffn = 256;
  std::size_t mlp_hidden = 64;  // de-stationary factor MLPs and SFL linear width
  std::size_t conv_kernel = 3;  // circular padding
  std::size_t decoder_layers = 2;

  // Loss weights (Weather selection).
  double alpha = 1.0;
  double beta = 5.0;
  double kl_weight_b = 1.0;
  double kl_weight_f = 1.0;

  // Optimization.
  double lr = 1e-3;
  std::size_t batch = 32;
  std::size_t epochs = 100;
  std::uint64_t seed = 31;
  double clip_norm = 0.0;  // 0 disables clipping

  Ablations ablations;

  // Numerics and interpretation switches.
  double keep_frac = 1.0;
  double sigma_floor = 1e-5;
  bool denorm_multiply = false;
  bool eq15_literal = false;
  bool a_st_rownorm = true;
  bool spatial_logit_scaling = true;

  std::size_t head_dim() const { return d_model / heads; }

  void validate() const {
    auto fail = [](const std::string& msg) { throw Error("config: " + msg); };
    if (L < 2) fail("L must be >= 2");
    if (H < 1) fail("H must be >= 1");
    if (N < 1 || d_in < 1) fail("N and d_in must be >= 1");
    if (heads == 0 || d_model % heads != 0) fail("d_model must be divisible by heads");
    if (tem_layers == 0 || spa_layers == 0) fail("layer counts must be >= 1");
    if (conv_kernel % 2 == 0) fail("conv_kernel must be odd");
    if (decoder_layers != 2) fail("decoder_layers is fixed at 2");
    if (alpha < 0 || beta < 0) fail("alpha and beta must be >= 0");
    if (!(keep_frac > 0.0 && keep_frac <= 1.0)) fail("keep_frac must be in (0,1]");
    if (!(sigma_floor > 0.0)) fail("sigma_floor must be > 0");
    if (batch == 0) fail("batch must be >= 1");
    if (ablations.no_sta && ablations.no_sfl) {
      fail("no_sta and no_sfl are mutually exclusive (no_sta already removes SFL)");
    }
    if (ablations.no_dsfl && ablations.no_gate) {
      fail("no_dsfl and no_gate are mutually exclusive");
    }
  }

  // Gradient-check scale configuration.
  static DranConfig tiny() {
    DranConfig c;
    c.L = 8;
    c.H = 4;
    c.N = 4;
    c.d_in = 1;
    c.d_model = 8;
    c.heads = 2;
    c.tem_layers = 1;
    c.spa_layers = 1;
    c.c_e = 8;
    c.latent = 8;
    c.ffn = 16;
    c.mlp_hidden = 8;
    c.batch = 2;
    return c;
  }
};

struct DatasetPreset {
  std::string_view name;
  std::size_t L, H, N, d_in;
  double alpha, beta;
  SplitFractions split;
};

// Lookback/horizon/node counts and split ratios from the dataset table, and
// the selected (alpha, beta) pair per dataset.
inline constexpr std::array<DatasetPreset, 6> kDatasetPresets{{
    {"weather", 24, 12, 263, 1, 1.00, 5.00, {0.7, 0.1, 0.2}},
    {"nycbike1", 19, 1, 128, 2, 7.50, 5.00, {0.7, 0.1, 0.2}},
    {"nycbike2", 35, 1, 200, 2, 3.50, 1.00, {0.7, 0.1, 0.2}},
    {"nyctaxi", 35, 1, 200, 2, 3.50, 0.50, {0.7, 0.1, 0.2}},
    {"pems04", 12, 12, 307, 1, 1.00, 10.00, {0.6, 0.2, 0.2}},
    {"pems08", 12, 12, 170, 1, 1.00, 1.00, {0.6, 0.2, 0.2}},
}};

inline const DatasetPreset& dataset_preset(std::string_view name) {
  for (const auto& p : kDatasetPresets) {
    if (p.name == name) return p;
  }
  throw Error("unknown dataset preset: " + std::string(name));
}

inline DranConfig config_for_dataset(std::string_view name) {
  const auto& p = dataset_preset(name);
  DranConfig c;
  c.L = p.L;
  c.H = p.H;
  c.N = p.N;
  c.d_in = p.d_in;
  c.alpha = p.alpha;
  c.beta = p.beta;
  return c;
}

// Ablation variants in reporting order.
inline constexpr std::array<std::string_view, 6> kVariants{
    "full", "no_sto", "no_sta", "no_sfl", "no_dsfl", "no_gate"};

inline std::string variant_name(const Ablations& a) {
  std::string name;
  auto append = [&](bool on, const char* tag) {
    if (!on) return;
    if (!name.empty()) name += '+';
    name += tag;
  };
  append(a.no_sto, "no_sto");
  append(a.no_sta, "no_sta");
  append(a.no_sfl, "no_sfl");
  append(a.no_dsfl, "no_dsfl");
  append(a.no_gate, "no_gate");
  return name.empty() ? "full" : name;
}

inline Ablations ablations_for_variant(std::string_view variant) {
  Ablations a;
  if (variant == "full") return a;
  if (variant == "no_sto") a.no_sto = true;
  else if (variant == "no_sta") a.no_sta = true;
  else if (variant == "no_sfl") a.no_sfl = true;
  else if (variant == "no_dsfl") a.no_dsfl = true;
  else if (variant == "no_gate") a.no_gate = true;
  else throw Error("unknown ablation variant: " + std::string(variant));
  return a;
}

inline nlohmann::json to_json(const DranConfig& c) {
  return nlohmann::json{
      {"L", c.L},
      {"H", c.H},
      {"N", c.N},
      {"d_in", c.d_in},
      {"d_model", c.d_model},
      {"c_e", c.c_e},
      {"latent", c.latent},
      {"heads", c.heads},
      {"tem_layers", c.tem_layers},
      {"spa_layers", c.spa_layers},
      {"ffn", c.ffn},
      {"mlp_hidden", c.mlp_hidden},
      {"conv_kernel", c.conv_kernel},
      {"decoder_layers", c.decoder_layers},
      {"alpha", c.alpha},
      {"beta", c.beta},
      {"kl_weight_b", c.kl_weight_b},
      {"kl_weight_f", c.kl_weight_f},
      {"lr", c.lr},
      {"batch", c.batch},
      {"epochs", c.epochs},
      {"seed", c.seed},
      {"clip_norm", c.clip_norm},
      {"ablations",
       {{"no_sto", c.ablations.no_sto},
        {"no_sta", c.ablations.no_sta},
        {"no_sfl", c.ablations.no_sfl},
        {"no_dsfl", c.ablations.no_dsfl},
        {"no_gate", c.ablations.no_gate}}},
      {"keep_frac", c.keep_frac},
      {"sigma_floor", c.sigma_floor},
      {"denorm_multiply", c.denorm_multiply},
      {"eq15_literal", c.eq15_literal},
      {"a_st_rownorm", c.a_st_rownorm},
      {"spatial_logit_scaling", c.spatial_logit_scaling},
  };
}

// Missing keys keep their defaults; unknown keys are rejected.
inline DranConfig config_from_json(const nlohmann::json& j, DranConfig c = {}) {
  if (!j.is_object()) throw Error("config: expected a JSON object");
  const nlohmann::json known = to_json(c);
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw Error("config: unknown key '" + key + "'");
  }
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("L", c.L);
  get("H", c.H);
  get("N", c.N);
  get("d_in", c.d_in);
  get("d_model", c.d_model);
  get("c_e", c.c_e);
  get("latent", c.latent);
  get("heads", c.heads);
  get("tem_layers", c.tem_layers);
  get("spa_layers", c.spa_layers);
  get("ffn", c.ffn);
  get("mlp_hidden", c.mlp_hidden);
  get("conv_kernel", c.conv_kernel);
  get("decoder_layers", c.decoder_layers);
  get("alpha", c.alpha);
  get("beta", c.beta);
  get("kl_weight_b", c.kl_weight_b);
  get("kl_weight_f", c.kl_weight_f);
  get("lr", c.lr);
  get("batch", c.batch);
  get("epochs", c.epochs);
  get("seed", c.seed);
  get("clip_norm", c.clip_norm);
  if (j.contains("ablations")) {
    const auto& a = j.at("ablations");
    for (const auto& [key, value] : a.items()) {
      if (!known.at("ablations").contains(key)) {
        throw Error("config: unknown ablation '" + key + "'");
      }
    }
    auto geta = [&](const char* key, bool& field) {
      if (a.contains(key)) a.at(key).get_to(field);
    };
    geta("no_sto", c.ablations.no_sto);
    geta("no_sta", c.ablations.no_sta);
    geta("no_sfl", c.ablations.no_sfl);
    geta("no_dsfl", c.ablations.no_dsfl);
    geta("no_gate", c.ablations.no_gate);
  }
  get("keep_frac", c.keep_frac);
  get("sigma_floor", c.sigma_floor);
  get("denorm_multiply", c.denorm_multiply);
  get("eq15_literal", c.eq15_literal);
  get("a_st_rownorm", c.a_st_rownorm);
  get("spatial_logit_scaling", c.spatial_logit_scaling);
  return c;
}

}  // namespace dran
