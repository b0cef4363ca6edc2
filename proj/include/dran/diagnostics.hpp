#pragma once

// Gaussian kernel density estimates, grid-quadrature KL divergence, shift
// detection, and forecast error metrics.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dran/data.hpp"
#include "dran/tensor.hpp"

namespace dran {

enum class KernelConstant {
  normalized,  // 1/sqrt(2*pi): integrates to one
  printed,     // 1/(2*pi): does not integrate to one
};

struct KdeOptions {
  double bandwidth = 0.1;
  std::size_t grid_size = 512;
  KernelConstant constant = KernelConstant::normalized;
};

struct DensityEstimate {
  std::vector<double> grid;     // uniform over [min - 3h, max + 3h]
  std::vector<double> density;
  double h = 0.1;

  // Linear interpolation; zero outside the grid.
  double at(double x) const {
    if (grid.empty() || x < grid.front() || x > grid.back()) return 0.0;
    if (grid.size() == 1) return density.front();
    const double step = (grid.back() - grid.front()) / static_cast<double>(grid.size() - 1);
    const double pos = (x - grid.front()) / step;
    const auto i = std::min(static_cast<std::size_t>(pos), grid.size() - 2);
    const double w = pos - static_cast<double>(i);
    return (1.0 - w) * density[i] + w * density[i + 1];
  }

  double integral() const {
    double total = 0.0;
    for (std::size_t i = 1; i < grid.size(); ++i) {
      total += 0.5 * (density[i] + density[i - 1]) * (grid[i] - grid[i - 1]);
    }
    return total;
  }
};

// f(xi) = 1/(m h) * sum_i k((xi - x_i) / h).
inline double kde_at(std::span<const double> samples, double h, double xi,
                     KernelConstant constant = KernelConstant::normalized) {
  if (samples.empty()) throw Error("kde: no samples");
  if (!(h > 0.0)) throw Error("kde: bandwidth must be > 0");
  const double c = constant == KernelConstant::normalized
                       ? 1.0 / std::sqrt(2.0 * std::numbers::pi)
                       : 1.0 / (2.0 * std::numbers::pi);
  double acc = 0.0;
  for (double s : samples) {
    const double u = (xi - s) / h;
    acc += c * std::exp(-0.5 * u * u);
  }
  return acc / (static_cast<double>(samples.size()) * h);
}

inline DensityEstimate kde(std::span<const double> samples, const KdeOptions& opt = {}) {
  if (samples.empty()) throw Error("kde: no samples");
  if (!(opt.bandwidth > 0.0)) throw Error("kde: bandwidth must be > 0");
  if (opt.grid_size < 2) throw Error("kde: grid_size must be >= 2");
  const auto [lo_it, hi_it] = std::minmax_element(samples.begin(), samples.end());
  const double lo = *lo_it - 3.0 * opt.bandwidth;
  const double hi = *hi_it + 3.0 * opt.bandwidth;
  DensityEstimate est;
  est.h = opt.bandwidth;
  est.grid.resize(opt.grid_size);
  est.density.resize(opt.grid_size);
  const double step = (hi - lo) / static_cast<double>(opt.grid_size - 1);
  for (std::size_t g = 0; g < opt.grid_size; ++g) {
    est.grid[g] = lo + step * static_cast<double>(g);
    est.density[g] = kde_at(samples, opt.bandwidth, est.grid[g], opt.constant);
  }
  return est;
}

inline constexpr double kDensityFloor = 1e-12;

// Trapezoidal integral of p*log(p/q) over p's grid, with q interpolated onto
// that grid and both floored at 1e-12.
inline double kl_divergence(const DensityEstimate& p, const DensityEstimate& q) {
  if (p.grid.size() < 2) throw Error("kl_divergence: p needs a grid");
  std::vector<double> integrand(p.grid.size());
  for (std::size_t i = 0; i < p.grid.size(); ++i) {
    const double pi = std::max(p.density[i], kDensityFloor);
    const double qi = std::max(q.at(p.grid[i]), kDensityFloor);
    integrand[i] = pi * std::log(pi / qi);
  }
  double total = 0.0;
  for (std::size_t i = 1; i < p.grid.size(); ++i) {
    total += 0.5 * (integrand[i] + integrand[i - 1]) * (p.grid[i] - p.grid[i - 1]);
  }
  return total;
}

struct ShiftVerdict {
  double kl = 0.0;
  double delta = 0.1;
  bool shifted = false;
};

inline nlohmann::json to_json(const ShiftVerdict& v) {
  nlohmann::json j{{"kl", v.kl}, {"shifted", v.shifted}};
  if (std::isfinite(v.delta)) {
    j["delta"] = v.delta;
  } else {
    j["delta"] = "inf";
  }
  return j;
}

// Values of one node/feature over the time rows [range.begin, range.end).
inline std::vector<double> node_values(const SeriesPanel& panel, std::size_t node,
                                       const SegmentRange& range, std::size_t feature = 0) {
  if (node >= panel.nodes()) {
    throw Error("node index " + std::to_string(node) + " out of range (N=" +
                std::to_string(panel.nodes()) + ")");
  }
  if (feature >= panel.features()) throw Error("feature index out of range");
  if (range.end <= range.begin) throw Error("empty window");
  if (range.end > panel.steps()) throw Error("window exceeds panel length");
  std::vector<double> out;
  out.reserve(range.length());
  for (std::size_t t = range.begin; t < range.end; ++t) out.push_back(panel.value(t, node, feature));
  return out;
}

inline ShiftVerdict detect_shift(const SeriesPanel& panel, std::size_t node,
                                 const SegmentRange& window_a, const SegmentRange& window_b,
                                 double h = 0.1, double delta = 0.1,
                                 std::size_t feature = 0) {
  const auto a = node_values(panel, node, window_a, feature);
  const auto b = node_values(panel, node, window_b, feature);
  KdeOptions opt;
  opt.bandwidth = h;
  const double kl = kl_divergence(kde(a, opt), kde(b, opt));
  return {kl, delta, kl > delta};
}

inline void write_density_csv(const DensityEstimate& est, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path);
  out << "grid,density\n";
  for (std::size_t i = 0; i < est.grid.size(); ++i) {
    out << detail::format_double(est.grid[i]) << ',' << detail::format_double(est.density[i])
        << '\n';
  }
}

// ---------------------------------------------------------------------------
// Metrics

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw Error(std::string(what) + ": shapes " + to_string(a.shape()) + " and " +
                to_string(b.shape()) + " differ");
  }
}

inline double mae(const Tensor& pred, const Tensor& target) {
  require_same_shape(pred, target, "mae");
  if (pred.size() == 0) throw Error("mae: empty input");
  const auto p = pred.data();
  const auto t = target.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) acc += std::abs(p[i] - t[i]);
  return acc / static_cast<double>(p.size());
}

// Percent; elements with |target| < floor are excluded.
inline double mape(const Tensor& pred, const Tensor& target, double floor = 1e-3) {
  require_same_shape(pred, target, "mape");
  const auto p = pred.data();
  const auto t = target.data();
  double acc = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (std::abs(t[i]) < floor) continue;
    acc += std::abs((p[i] - t[i]) / t[i]);
    ++count;
  }
  if (count == 0) throw Error("mape: no valid elements");
  return 100.0 * acc / static_cast<double>(count);
}

}  // namespace dran
