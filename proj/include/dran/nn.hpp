#pragma once

// Small layer building blocks over ParamStore paths.

#include <cmath>
#include <random>
#include <string>

#include "dran/ops.hpp"
#include "dran/params.hpp"

namespace dran::nn {

using Rng = std::mt19937_64;

// Weight [in, out] and bias [out], uniform in +-1/sqrt(in).
inline void init_linear(ParamStore& ps, const std::string& path, std::size_t in,
                        std::size_t out, Rng& rng, bool bias = true) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  ps.add(path + ".weight", Tensor::uniform({in, out}, rng, -bound, bound));
  if (bias) ps.add(path + ".bias", Tensor::uniform({out}, rng, -bound, bound));
}

inline Tensor linear(const ParamStore& ps, const std::string& path, const Tensor& x) {
  Tensor y = matmul(x, ps.get(path + ".weight"));
  const std::string b = path + ".bias";
  return ps.contains(b) ? add(y, ps.get(b)) : y;
}

inline void init_layer_norm(ParamStore& ps, const std::string& path, std::size_t width) {
  ps.add(path + ".gain", Tensor::full({width}, 1.0));
  ps.add(path + ".bias", Tensor::zeros({width}));
}

// Normalizes over the last axis.
inline Tensor layer_norm(const ParamStore& ps, const std::string& path, const Tensor& x,
                         double eps = 1e-5) {
  Tensor centered = sub(x, mean(x, -1));
  Tensor var = mean(square(centered), -1);
  Tensor normed = div(centered, sqrt(add_scalar(var, eps)));
  return add(mul(normed, ps.get(path + ".gain")), ps.get(path + ".bias"));
}

// 1-D circular convolution weights: [out_ch, in_ch, kernel] plus bias.
inline void init_conv1d(ParamStore& ps, const std::string& path, std::size_t in_ch,
                        std::size_t out_ch, std::size_t kernel, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_ch * kernel));
  ps.add(path + ".weight", Tensor::uniform({out_ch, in_ch, kernel}, rng, -bound, bound));
  ps.add(path + ".bias", Tensor::uniform({out_ch}, rng, -bound, bound));
}

inline Tensor conv1d(const ParamStore& ps, const std::string& path, const Tensor& x) {
  return conv1d_circular(x, ps.get(path + ".weight"), ps.get(path + ".bias"));
}

}  // namespace dran::nn
