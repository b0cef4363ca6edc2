#pragma once

// Series panels, CSV ingestion, chronological windowing, and the synthetic
// non-stationary generator.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include <nlohmann/json.hpp>

#include "dran/config.hpp"
#include "dran/tensor.hpp"

namespace dran {

// values: [T, N, D] in time-major order.
struct SeriesPanel {
  Tensor values;
  std::vector<std::int64_t> timestamps;
  std::vector<std::string> node_ids;

  std::size_t steps() const { return values.dim(0); }
  std::size_t nodes() const { return values.dim(1); }
  std::size_t features() const { return values.dim(2); }

  double value(std::size_t t, std::size_t n, std::size_t d) const {
    return values[(t * nodes() + n) * features() + d];
  }

  void validate() const {
    if (values.rank() != 3) throw Error("panel: values must be [T,N,D]");
    if (timestamps.size() != steps() || node_ids.size() != nodes()) {
      throw Error("panel: timestamp/node id counts do not match values");
    }
    if (nodes() < 1 || features() < 1) throw Error("panel: needs N >= 1 and D >= 1");
    for (std::size_t i = 1; i < timestamps.size(); ++i) {
      if (timestamps[i] <= timestamps[i - 1]) {
        throw Error("panel: timestamps must be strictly increasing");
      }
    }
  }
};

struct CsvSchema {
  std::string timestamp_column = "timestamp";
  std::string node_column = "node_id";
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline std::string trim(std::string s) {
  const auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

template <class T>
bool parse_number(const std::string& text, T& out) {
  const char* first = text.data();
  const char* last = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc() && ptr == last;
}

inline std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

}  // namespace detail

// Header: timestamp,node_id,f0..f{D-1} (column names per schema; every other
// column is a feature, in header order). Rows may come in any order; the
// panel is dense over (timestamp, node).
inline SeriesPanel load_csv(const std::string& path, const CsvSchema& schema = {}) {
  std::ifstream in(path);
  if (!in) throw Error("load_csv: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw Error("load_csv: empty file " + path);
  const auto header = detail::split_csv_line(detail::trim(line));
  std::ptrdiff_t ts_col = -1, node_col = -1;
  std::vector<std::size_t> feat_cols;
  for (std::size_t i = 0; i < header.size(); ++i) {
    const auto name = detail::trim(header[i]);
    if (name == schema.timestamp_column) ts_col = static_cast<std::ptrdiff_t>(i);
    else if (name == schema.node_column) node_col = static_cast<std::ptrdiff_t>(i);
    else feat_cols.push_back(i);
  }
  if (ts_col < 0 || node_col < 0 || feat_cols.empty()) {
    throw Error("load_csv: header must contain " + schema.timestamp_column + ", " +
                schema.node_column + " and at least one feature column");
  }
  const std::size_t D = feat_cols.size();

  std::map<std::pair<std::int64_t, std::string>, std::vector<double>> cells;
  std::map<std::pair<std::int64_t, std::string>, std::size_t> first_row;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto fields = detail::split_csv_line(line);
    const std::string where = path + ":" + std::to_string(row);
    if (fields.size() != header.size()) {
      throw Error("load_csv: row " + std::to_string(row) + " has " +
                  std::to_string(fields.size()) + " fields, expected " +
                  std::to_string(header.size()) + " (" + where + ")");
    }
    std::int64_t ts = 0;
    if (!detail::parse_number(detail::trim(fields[ts_col]), ts)) {
      throw Error("load_csv: non-integer timestamp at row " + std::to_string(row));
    }
    std::string node = detail::trim(fields[node_col]);
    std::vector<double> vals(D);
    for (std::size_t d = 0; d < D; ++d) {
      const auto text = detail::trim(fields[feat_cols[d]]);
      if (text.empty()) {
        throw Error("load_csv: missing value in column '" + header[feat_cols[d]] +
                    "' at row " + std::to_string(row));
      }
      if (!detail::parse_number(text, vals[d]) || !std::isfinite(vals[d])) {
        throw Error("load_csv: non-numeric value '" + text + "' in column '" +
                    header[feat_cols[d]] + "' at row " + std::to_string(row));
      }
    }
    auto key = std::make_pair(ts, node);
    if (auto it = first_row.find(key); it != first_row.end()) {
      throw Error("load_csv: duplicate (timestamp=" + std::to_string(ts) + ", node=" +
                  node + ") at row " + std::to_string(row) + ", first seen at row " +
                  std::to_string(it->second));
    }
    first_row.emplace(key, row);
    cells.emplace(std::move(key), std::move(vals));
  }
  if (cells.empty()) throw Error("load_csv: no data rows in " + path);

  std::vector<std::int64_t> timestamps;
  std::vector<std::string> nodes;
  for (const auto& [key, v] : cells) {
    if (timestamps.empty() || timestamps.back() != key.first) timestamps.push_back(key.first);
    nodes.push_back(key.second);
  }
  std::sort(nodes.begin(), nodes.end());
  nodes.erase(std::unique(nodes.begin(), nodes.end()), nodes.end());

  const std::size_t T = timestamps.size(), N = nodes.size();
  std::vector<double> values(T * N * D);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t n = 0; n < N; ++n) {
      auto it = cells.find({timestamps[t], nodes[n]});
      if (it == cells.end()) {
        throw Error("load_csv: missing cell (timestamp=" + std::to_string(timestamps[t]) +
                    ", node=" + nodes[n] + ")");
      }
      std::copy(it->second.begin(), it->second.end(), values.begin() + (t * N + n) * D);
    }
  }
  SeriesPanel panel{Tensor::from({T, N, D}, std::move(values)), std::move(timestamps),
                    std::move(nodes)};
  panel.validate();
  return panel;
}

// Shortest round-trip decimal formatting; load_csv reproduces values bit-exactly.
inline void save_csv(const SeriesPanel& panel, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("save_csv: cannot open " + path);
  out << "timestamp,node_id";
  for (std::size_t d = 0; d < panel.features(); ++d) out << ",f" << d;
  out << '\n';
  for (std::size_t t = 0; t < panel.steps(); ++t) {
    for (std::size_t n = 0; n < panel.nodes(); ++n) {
      out << panel.timestamps[t] << ',' << panel.node_ids[n];
      for (std::size_t d = 0; d < panel.features(); ++d) {
        out << ',' << detail::format_double(panel.value(t, n, d));
      }
      out << '\n';
    }
  }
  if (!out) throw Error("save_csv: write failed for " + path);
}

// ---------------------------------------------------------------------------
// Windowing

struct SplitSpec {
  double train_frac = 0.6;
  double val_frac = 0.2;
  double test_frac = 0.2;

  static SplitSpec from(const SplitFractions& f) { return {f.train, f.val, f.test}; }

  void validate() const {
    for (double f : {train_frac, val_frac, test_frac}) {
      if (!(f > 0.0 && f < 1.0)) throw Error("split: fractions must lie in (0,1)");
    }
    if (std::abs(train_frac + val_frac + test_frac - 1.0) > 1e-9) {
      throw Error("split: fractions must sum to 1");
    }
  }
};

struct SegmentRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t length() const { return end - begin; }
};

struct SplitRanges {
  SegmentRange train, val, test;
};

inline SplitRanges split_ranges(std::size_t T, const SplitSpec& split) {
  split.validate();
  const auto n_train = static_cast<std::size_t>(std::floor(split.train_frac * T));
  const auto n_val = static_cast<std::size_t>(std::floor(split.val_frac * T));
  return {{0, n_train}, {n_train, n_train + n_val}, {n_train + n_val, T}};
}

// Window positions t: lookback rows [t-L, t), horizon rows [t, t+H), all within
// one segment. Positions advance by `stride`.
inline std::vector<std::size_t> window_positions(const SegmentRange& seg, std::size_t L,
                                                 std::size_t H, std::size_t stride = 1) {
  if (L < 1 || H < 1) throw Error("windows: L and H must be >= 1");
  if (stride < 1) throw Error("windows: stride must be >= 1");
  std::vector<std::size_t> ts;
  if (L + H > seg.length()) return ts;
  for (std::size_t t = seg.begin + L; t + H <= seg.end; t += stride) ts.push_back(t);
  return ts;
}

struct WindowIndex {
  std::vector<std::size_t> train, val, test;
};

inline WindowIndex window_index(const SeriesPanel& panel, std::size_t L, std::size_t H,
                                const SplitSpec& split, std::size_t stride = 1) {
  const auto r = split_ranges(panel.steps(), split);
  auto one = [&](const SegmentRange& seg, const char* name) {
    if (L + H > seg.length()) {
      throw Error(std::string("windows: L+H = ") + std::to_string(L + H) +
                  " exceeds the " + name + " split length " + std::to_string(seg.length()));
    }
    return window_positions(seg, L, H, stride);
  };
  return {one(r.train, "train"), one(r.val, "val"), one(r.test, "test")};
}

struct WindowBatch {
  Tensor lookback;  // [B, L, N, D]
  Tensor horizon;   // [B, H, N, D]
  std::vector<std::size_t> start_indices;  // first horizon row of each window

  std::size_t size() const { return start_indices.size(); }
};

inline WindowBatch extract_batch(const SeriesPanel& panel, std::size_t L, std::size_t H,
                                 std::span<const std::size_t> positions) {
  const std::size_t N = panel.nodes(), D = panel.features(), B = positions.size();
  const std::size_t row = N * D;
  std::vector<double> look(B * L * row), hor(B * H * row);
  const auto v = panel.values.data();
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t t = positions[b];
    if (t < L || t + H > panel.steps()) throw Error("extract_batch: window out of range");
    std::copy_n(v.begin() + (t - L) * row, L * row, look.begin() + b * L * row);
    std::copy_n(v.begin() + t * row, H * row, hor.begin() + b * H * row);
  }
  return {Tensor::from({B, L, N, D}, std::move(look)),
          Tensor::from({B, H, N, D}, std::move(hor)),
          std::vector<std::size_t>(positions.begin(), positions.end())};
}

// Consecutive batches; the final partial batch is kept.
inline std::vector<WindowBatch> make_batches(const SeriesPanel& panel, std::size_t L,
                                             std::size_t H,
                                             std::span<const std::size_t> positions,
                                             std::size_t batch) {
  if (batch < 1) throw Error("make_batches: batch must be >= 1");
  std::vector<WindowBatch> out;
  for (std::size_t i = 0; i < positions.size(); i += batch) {
    const std::size_t n = std::min(batch, positions.size() - i);
    out.push_back(extract_batch(panel, L, H, positions.subspan(i, n)));
  }
  return out;
}

struct SplitBatches {
  std::vector<WindowBatch> train, val, test;
};

inline SplitBatches make_windows(const SeriesPanel& panel, std::size_t L, std::size_t H,
                                 const SplitSpec& split, std::size_t batch,
                                 std::size_t stride = 1) {
  const auto idx = window_index(panel, L, H, split, stride);
  return {make_batches(panel, L, H, idx.train, batch),
          make_batches(panel, L, H, idx.val, batch),
          make_batches(panel, L, H, idx.test, batch)};
}

// ---------------------------------------------------------------------------
// Synthetic generator

// Trend slopes plus a mean/variance regime change at `change_at`
// (negative: midpoint of the series).
struct ShiftSpec {
  double trend = 0.0;
  double trend_spread = 0.0;
  double mean_jump = 0.0;
  double var_scale = 1.0;
  long change_at = -1;

  bool enabled() const {
    return trend != 0.0 || trend_spread != 0.0 || mean_jump != 0.0 || var_scale != 1.0;
  }
};

struct SynthParams {
  std::size_t n_nodes = 8;
  std::size_t steps = 400;
  std::size_t features = 1;
  std::uint64_t seed = 31;
  double period = 24.0;
  double amplitude = 1.0;
  double amplitude_spread = 0.5;
  double level_spread = 2.0;
  double phase_spread = 0.25;  // fraction of a cycle across the ring
  double diffusion = 0.3;
  double noise = 0.1;
};

// Parses comma-separated items: mean:<jump>@<t>, var:<scale>@<t>,
// trend:<slope>, spread:<slope spread>, or "none".
inline ShiftSpec parse_shift(const std::string& text) {
  ShiftSpec s;
  if (text.empty() || text == "none") return s;
  std::istringstream is(text);
  std::string item;
  while (std::getline(is, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw Error("shift: expected key:value in '" + item + "'");
    const std::string key = item.substr(0, colon);
    std::string value = item.substr(colon + 1);
    long at = -1;
    if (const auto amp = value.find('@'); amp != std::string::npos) {
      if (!detail::parse_number(value.substr(amp + 1), at) || at < 0) {
        throw Error("shift: bad change point in '" + item + "'");
      }
      value = value.substr(0, amp);
    }
    double v = 0.0;
    if (!detail::parse_number(value, v)) throw Error("shift: bad number in '" + item + "'");
    if (at >= 0) {
      if (s.change_at >= 0 && s.change_at != at) {
        throw Error("shift: conflicting change points");
      }
      s.change_at = at;
    }
    if (key == "mean") s.mean_jump = v;
    else if (key == "var") s.var_scale = v;
    else if (key == "trend") s.trend = v;
    else if (key == "spread") s.trend_spread = v;
    else throw Error("shift: unknown key '" + key + "'");
  }
  if (!(s.var_scale > 0.0)) throw Error("shift: var scale must be > 0");
  return s;
}

inline nlohmann::json to_json(const ShiftSpec& s) {
  return {{"trend", s.trend},         {"trend_spread", s.trend_spread},
          {"mean_jump", s.mean_jump}, {"var_scale", s.var_scale},
          {"change_at", s.change_at}};
}

inline ShiftSpec shift_from_json(const nlohmann::json& j) {
  ShiftSpec s;
  s.trend = j.value("trend", s.trend);
  s.trend_spread = j.value("trend_spread", s.trend_spread);
  s.mean_jump = j.value("mean_jump", s.mean_jump);
  s.var_scale = j.value("var_scale", s.var_scale);
  s.change_at = j.value("change_at", s.change_at);
  return s;
}

inline nlohmann::json to_json(const SynthParams& p) {
  return {{"n_nodes", p.n_nodes},
          {"steps", p.steps},
          {"features", p.features},
          {"seed", p.seed},
          {"period", p.period},
          {"amplitude", p.amplitude},
          {"amplitude_spread", p.amplitude_spread},
          {"level_spread", p.level_spread},
          {"phase_spread", p.phase_spread},
          {"diffusion", p.diffusion},
          {"noise", p.noise}};
}

inline SynthParams synth_params_from_json(const nlohmann::json& j) {
  SynthParams p;
  p.n_nodes = j.value("n_nodes", p.n_nodes);
  p.steps = j.value("steps", p.steps);
  p.features = j.value("features", p.features);
  p.seed = j.value("seed", p.seed);
  p.period = j.value("period", p.period);
  p.amplitude = j.value("amplitude", p.amplitude);
  p.amplitude_spread = j.value("amplitude_spread", p.amplitude_spread);
  p.level_spread = j.value("level_spread", p.level_spread);
  p.phase_spread = j.value("phase_spread", p.phase_spread);
  p.diffusion = j.value("diffusion", p.diffusion);
  p.noise = j.value("noise", p.noise);
  return p;
}

inline std::size_t resolved_change_point(const ShiftSpec& s, std::size_t steps) {
  return s.change_at < 0 ? steps / 2 : static_cast<std::size_t>(s.change_at);
}

// value[t,i,d] = level_i + amp_i * g(t) * sin(2*pi*t/P + phase_i + d/2)
//              + slope_i * t + jump(t) + r[t,i,d]
// r[t,i,d] = diffusion * mean(r[t-1, ring neighbours of i, d]) + g(t) * noise * eps
// where g(t) = sqrt(var_scale) after the change point (1 before) and
// jump(t) = mean_jump after it.
inline SeriesPanel synth_generate(const SynthParams& p, const ShiftSpec& shift) {
  if (p.n_nodes < 2) throw Error("synth: n_nodes must be >= 2");
  if (p.steps < 1 || p.features < 1) throw Error("synth: steps and features must be >= 1");
  if (!(p.period > 0.0)) throw Error("synth: period must be > 0");
  const std::size_t T = p.steps, N = p.n_nodes, D = p.features;
  const std::size_t change = resolved_change_point(shift, T);
  std::mt19937_64 rng(p.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);

  std::vector<double> level(N), amp(N), phase(N), slope(N);
  for (std::size_t i = 0; i < N; ++i) {
    const double u = static_cast<double>(i) / static_cast<double>(N - 1);
    level[i] = p.level_spread * u;
    amp[i] = p.amplitude * (1.0 + p.amplitude_spread * (u - 0.5));
    phase[i] = 2.0 * std::numbers::pi * p.phase_spread * static_cast<double>(i) /
               static_cast<double>(N);
    slope[i] = shift.trend + shift.trend_spread * (u - 0.5);
  }

  std::vector<double> values(T * N * D);
  std::vector<double> resid(N * D, 0.0), next(N * D, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    const bool after = t >= change;
    const double gain = after ? std::sqrt(shift.var_scale) : 1.0;
    const double jump = after ? shift.mean_jump : 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      const std::size_t left = (i + N - 1) % N, right = (i + 1) % N;
      for (std::size_t d = 0; d < D; ++d) {
        const double eps = gauss(rng);
        const double neighbours = 0.5 * (resid[left * D + d] + resid[right * D + d]);
        next[i * D + d] = p.diffusion * neighbours + gain * p.noise * eps;
        const double angle = 2.0 * std::numbers::pi * static_cast<double>(t) / p.period +
                             phase[i] + 0.5 * static_cast<double>(d);
        values[(t * N + i) * D + d] = level[i] + gain * amp[i] * std::sin(angle) +
                                      slope[i] * static_cast<double>(t) + jump +
                                      next[i * D + d];
      }
    }
    resid.swap(next);
  }

  std::vector<std::int64_t> ts(T);
  for (std::size_t t = 0; t < T; ++t) ts[t] = static_cast<std::int64_t>(t);
  const std::size_t width = std::to_string(N - 1).size();
  std::vector<std::string> ids(N);
  for (std::size_t i = 0; i < N; ++i) {
    std::string digits = std::to_string(i);
    ids[i] = "n" + std::string(width - digits.size(), '0') + digits;
  }
  return {Tensor::from({T, N, D}, std::move(values)), std::move(ts), std::move(ids)};
}

}  // namespace dran
