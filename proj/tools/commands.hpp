#pragma once

// Subcommand implementations for the `dran` tool. Each command reads its
// inputs, writes everything under --out and returns an exit code.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dran/checkpoint.hpp"
#include "dran/config.hpp"
#include "dran/data.hpp"
#include "dran/diagnostics.hpp"
#include "dran/hash.hpp"
#include "dran/training.hpp"

namespace dran::cli {

namespace fs = std::filesystem;
using nlohmann::json;

enum ExitCode : int { kOk = 0, kRuntime = 1, kUsage = 2 };

// Bad arguments detected after parsing (exit 2).
struct UsageError : Error {
  using Error::Error;
};

inline std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> out;
  auto num = [&](const std::string& s) -> std::uint64_t {
    if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) {
      throw UsageError("bad seed list '" + text + "'");
    }
    return std::stoull(s);
  };
  if (auto dots = text.find(".."); dots != std::string::npos) {
    const auto lo = num(text.substr(0, dots)), hi = num(text.substr(dots + 2));
    if (hi < lo) throw UsageError("empty seed range '" + text + "'");
    for (auto s = lo; s <= hi; ++s) out.push_back(s);
    return out;
  }
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(num(detail::trim(item)));
  if (out.empty()) throw UsageError("empty seed list");
  return out;
}

inline SplitSpec parse_split(const std::string& text) {
  std::stringstream ss(text);
  std::string item;
  std::vector<double> f;
  while (std::getline(ss, item, ',')) {
    try {
      f.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw UsageError("bad split '" + text + "'");
    }
  }
  if (f.size() != 3) throw UsageError("split needs three fractions, got '" + text + "'");
  SplitSpec s{f[0], f[1], f[2]};
  try {
    s.validate();
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  return s;
}

// "begin:end", half-open.
inline SegmentRange parse_range(const std::string& text) {
  const auto colon = text.find(':');
  try {
    if (colon == std::string::npos) throw std::invalid_argument("");
    return {std::stoull(text.substr(0, colon)), std::stoull(text.substr(colon + 1))};
  } catch (const std::exception&) {
    throw UsageError("bad window '" + text + "', expected begin:end");
  }
}

inline json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(path + ": " + e.what());
  }
}

inline void write_json(const json& j, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

inline json split_json(const SplitSpec& s) {
  return json::array({s.train_frac, s.val_frac, s.test_frac});
}

inline SplitSpec split_from_json(const json& j) {
  SplitSpec s{j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()};
  s.validate();
  return s;
}

inline void ensure_dir(const std::string& out) {
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw Error("cannot create " + out + ": " + ec.message());
}

inline const std::vector<std::size_t>& split_positions(const Dataset& d, const std::string& name) {
  if (name == "train") return d.windows.train;
  if (name == "val") return d.windows.val;
  if (name == "test") return d.windows.test;
  throw UsageError("unknown split '" + name + "' (train, val, test)");
}

// ---------------------------------------------------------------------------
// synth

struct SynthArgs {
  SynthParams params;
  std::string shift = "none";
  std::string out;
};

inline int cmd_synth(const SynthArgs& a) {
  if (a.params.n_nodes < 2) throw UsageError("--nodes must be >= 2");
  ShiftSpec shift;
  try {
    shift = parse_shift(a.shift);
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  ensure_dir(a.out);
  const SeriesPanel p = synth_generate(a.params, shift);
  save_csv(p, (fs::path(a.out) / "panel.csv").string());
  write_json({{"shift", to_json(shift)}, {"synth", to_json(a.params)}},
             fs::path(a.out) / "shift.json");
  std::cout << "wrote " << p.steps() << "x" << p.nodes() << "x" << p.features() << " panel to "
            << (fs::path(a.out) / "panel.csv").string() << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// train / ablate

struct TrainArgs {
  std::string config;     // JSON file with DranConfig fields (optional)
  std::string preset;     // dataset preset used as the base config (optional)
  std::string data;
  std::string seeds = "31";
  std::string ablate = "full";
  std::string manifest;   // re-run a previous manifest
  std::string split = "0.6,0.2,0.2";
  std::size_t stride = 1;
  std::string out;
  std::optional<std::size_t> epochs, batch;
  std::optional<double> lr, alpha, beta, clip_norm;
  bool verbose = false;
};

// Everything needed to reproduce a train/ablate invocation.
struct RunPlan {
  DranConfig config;
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> variants;
  std::string data;
  std::string data_hash;
  SplitSpec split;
  std::size_t stride = 1;
};

inline RunPlan plan_from_args(const TrainArgs& a, std::vector<std::string> variants) {
  RunPlan plan;
  if (!a.manifest.empty()) {
    const json m = read_json(a.manifest);
    plan.config = config_from_json(m.at("config"));
    plan.seeds = m.at("seeds").get<std::vector<std::uint64_t>>();
    plan.variants = m.at("variants").get<std::vector<std::string>>();
    plan.data = a.data.empty() ? m.at("data").get<std::string>() : a.data;
    plan.data_hash = git_file_hash(plan.data);
    if (plan.data_hash != m.at("data_hash").get<std::string>()) {
      throw Error("data file " + plan.data + " does not match the manifest hash");
    }
    plan.split = split_from_json(m.at("split"));
    plan.stride = m.at("stride").get<std::size_t>();
    return plan;
  }
  if (a.data.empty()) throw UsageError("--data is required (or --manifest)");
  DranConfig c;
  if (!a.preset.empty()) {
    try {
      c = config_for_dataset(a.preset);
    } catch (const Error& e) {
      throw UsageError(e.what());
    }
  }
  json given = json::object();
  if (!a.config.empty()) {
    given = read_json(a.config);
    c = config_from_json(given, c);
  }
  if (a.epochs) c.epochs = *a.epochs;
  if (a.batch) c.batch = *a.batch;
  if (a.lr) c.lr = *a.lr;
  if (a.alpha) c.alpha = *a.alpha;
  if (a.beta) c.beta = *a.beta;
  if (a.clip_norm) c.clip_norm = *a.clip_norm;
  plan.data = a.data;
  plan.data_hash = git_file_hash(a.data);
  const SeriesPanel panel = load_csv(a.data);
  // Node and feature counts follow the data unless the config pins them.
  if (!given.contains("N")) c.N = panel.nodes();
  if (!given.contains("d_in")) c.d_in = panel.features();
  plan.config = c;
  plan.seeds = parse_seeds(a.seeds);
  plan.variants = std::move(variants);
  for (const auto& v : plan.variants) {
    try {
      ablations_for_variant(v);
    } catch (const Error& e) {
      throw UsageError(e.what());
    }
  }
  plan.split = parse_split(a.split);
  plan.stride = a.stride;
  if (plan.stride == 0) throw UsageError("--stride must be >= 1");
  return plan;
}

inline json manifest_json(const RunPlan& p, const json& outputs) {
  DranConfig base = p.config;
  base.ablations = {};
  return {{"config", to_json(base)},
          {"seeds", p.seeds},
          {"variants", p.variants},
          {"data", p.data},
          {"data_hash", p.data_hash},
          {"split", split_json(p.split)},
          {"stride", p.stride},
          {"outputs", outputs}};
}

// Reports minus wall time, so reruns write identical files.
inline json stable_report_json(const TrainReport& r) {
  json j = to_json(r);
  j.erase("wall_seconds");
  return j;
}

struct VariantSummary {
  std::string variant;
  std::size_t param_count = 0;
  std::vector<SeedRun> runs;
  MeanStd mae, mape;
};

inline VariantSummary run_variant(const Dataset& data, const RunPlan& plan,
                                  const std::string& variant, const std::string& out,
                                  json& outputs, json& timing, bool verbose) {
  DranConfig c = plan.config;
  c.ablations = ablations_for_variant(variant);
  VariantSummary s;
  s.variant = variant;
  s.param_count = DranModel::create(c).params.total_elements();
  s.runs = run_seeds(data, c, plan.seeds, seed_threads());
  std::vector<double> maes, mapes;
  for (const auto& r : s.runs) {
    const std::string stem = variant + "_seed" + std::to_string(r.result.report.seed);
    const fs::path ckpt = fs::path(out) / (stem + ".ckpt");
    save_checkpoint(r.result.best, ckpt.string());
    json rep = stable_report_json(r.result.report);
    rep["test"] = to_json(r.test);
    write_json(rep, fs::path(out) / (stem + "_report.json"));
    write_report_csv(r.result.report, (fs::path(out) / (stem + "_report.csv")).string());
    outputs[stem] = {{"checkpoint", ckpt.string()},
                     {"report_json", (fs::path(out) / (stem + "_report.json")).string()},
                     {"report_csv", (fs::path(out) / (stem + "_report.csv")).string()}};
    timing[stem] = r.result.report.wall_seconds;
    maes.push_back(r.test.mae);
    mapes.push_back(r.test.mape);
    if (verbose) {
      std::cerr << stem << ": test MAE " << r.test.mae << ", best epoch "
                << r.result.report.best_epoch << ", " << r.result.report.wall_seconds << " s\n";
    }
  }
  s.mae = mean_std(maes);
  s.mape = mean_std(mapes);
  return s;
}

inline json aggregate_json(const VariantSummary& s, const Metrics& persistence) {
  json rows = json::array();
  for (const auto& r : s.runs) {
    rows.push_back({{"seed", r.result.report.seed},
                    {"test_mae", json_number(r.test.mae)},
                    {"test_mape", json_number(r.test.mape)},
                    {"best_epoch", r.result.report.best_epoch},
                    {"best_val_mae", json_number(r.result.report.best_val_mae)},
                    {"checkpoint_id", r.result.report.checkpoint_id}});
  }
  return {{"variant", s.variant},
          {"param_count", s.param_count},
          {"rows", rows},
          {"mean", {{"mae", json_number(s.mae.mean)}, {"mape", json_number(s.mape.mean)}}},
          {"std", {{"mae", json_number(s.mae.std)}, {"mape", json_number(s.mape.std)}}},
          {"persistence", to_json(persistence)}};
}

inline Dataset plan_dataset(const RunPlan& plan) {
  return make_dataset(load_csv(plan.data), plan.config.L, plan.config.H, plan.split, plan.stride);
}

inline int cmd_train(const TrainArgs& a) {
  RunPlan plan = plan_from_args(a, {a.ablate});
  if (plan.variants.size() != 1) throw UsageError("manifest is not a train manifest");
  ensure_dir(a.out);
  const Dataset data = plan_dataset(plan);
  json outputs = json::object(), timing = json::object();
  const auto s = run_variant(data, plan, plan.variants[0], a.out, outputs, timing, a.verbose);
  const json agg = aggregate_json(s, persistence_metrics(data, data.windows.test));
  write_json(agg, fs::path(a.out) / "aggregate.json");
  outputs["aggregate"] = (fs::path(a.out) / "aggregate.json").string();
  write_json(manifest_json(plan, outputs), fs::path(a.out) / "manifest.json");
  write_json(timing, fs::path(a.out) / "timing.json");
  std::cout << s.variant << ": test MAE " << s.mae.mean << " +- " << s.mae.std << " over "
            << s.runs.size() << " seed(s)\n";
  return kOk;
}

inline int cmd_ablate(const TrainArgs& a) {
  RunPlan plan = plan_from_args(a, {kVariants.begin(), kVariants.end()});
  ensure_dir(a.out);
  const Dataset data = plan_dataset(plan);
  const Metrics persistence = persistence_metrics(data, data.windows.test);
  json outputs = json::object(), timing = json::object(), variants = json::array();
  std::ofstream csv(fs::path(a.out) / "ablation.csv");
  if (!csv) throw Error("cannot write ablation.csv");
  csv << "variant,param_count";
  for (auto seed : plan.seeds) csv << ",mae_seed" << seed;
  csv << ",mae_mean,mae_std,mape_mean,mape_std\n";
  for (const auto& v : plan.variants) {
    const auto s = run_variant(data, plan, v, a.out, outputs, timing, a.verbose);
    csv << v << ',' << s.param_count;
    for (const auto& r : s.runs) csv << ',' << detail::format_double(r.test.mae);
    csv << ',' << detail::format_double(s.mae.mean) << ',' << detail::format_double(s.mae.std)
        << ',' << detail::format_double(s.mape.mean) << ',' << detail::format_double(s.mape.std)
        << '\n';
    variants.push_back(aggregate_json(s, persistence));
    std::cout << v << ": test MAE " << s.mae.mean << " +- " << s.mae.std << '\n';
  }
  csv.close();
  write_json({{"variants", variants}}, fs::path(a.out) / "aggregate.json");
  outputs["ablation_csv"] = (fs::path(a.out) / "ablation.csv").string();
  outputs["aggregate"] = (fs::path(a.out) / "aggregate.json").string();
  write_json(manifest_json(plan, outputs), fs::path(a.out) / "manifest.json");
  write_json(timing, fs::path(a.out) / "timing.json");
  return kOk;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string split = "0.6,0.2,0.2";
  std::string split_name = "test";
  std::size_t stride = 1;
  std::string out;  // optional
};

inline int cmd_eval(const EvalArgs& a) {
  const DranModel m = load_checkpoint(a.checkpoint);
  const Dataset data =
      make_dataset(load_csv(a.data), m.config.L, m.config.H, parse_split(a.split), a.stride);
  check_dataset(data, m.config);
  const auto& pos = split_positions(data, a.split_name);
  const json j = {{"split", a.split_name},
                  {"checkpoint_id", checkpoint_id(m)},
                  {"metrics", to_json(evaluate(m, data, pos))},
                  {"persistence", to_json(persistence_metrics(data, pos))}};
  if (!a.out.empty()) {
    ensure_dir(a.out);
    write_json(j, fs::path(a.out) / "metrics.json");
  }
  std::cout << j.dump(2) << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// diagnose

struct DiagnoseArgs {
  std::string data;
  std::size_t node = 0;
  std::size_t feature = 0;
  std::string window_a, window_b;
  double bandwidth = 0.1;
  double delta = 0.1;
  std::string out;
};

inline int cmd_diagnose(const DiagnoseArgs& a) {
  const SeriesPanel p = load_csv(a.data);
  if (a.node >= p.nodes()) {
    throw UsageError("--node " + std::to_string(a.node) + " out of range (panel has " +
                     std::to_string(p.nodes()) + " nodes)");
  }
  if (a.feature >= p.features()) throw UsageError("--feature out of range");
  const SegmentRange wa = parse_range(a.window_a), wb = parse_range(a.window_b);
  for (const auto& w : {wa, wb}) {
    if (w.end <= w.begin || w.end > p.steps()) {
      throw UsageError("window " + std::to_string(w.begin) + ":" + std::to_string(w.end) +
                       " outside [0, " + std::to_string(p.steps()) + ")");
    }
  }
  if (!(a.bandwidth > 0.0)) throw UsageError("--bandwidth must be > 0");
  ensure_dir(a.out);
  KdeOptions opt;
  opt.bandwidth = a.bandwidth;
  write_density_csv(kde(node_values(p, a.node, wa, a.feature), opt),
                    (fs::path(a.out) / "density_a.csv").string());
  write_density_csv(kde(node_values(p, a.node, wb, a.feature), opt),
                    (fs::path(a.out) / "density_b.csv").string());
  const ShiftVerdict v = detect_shift(p, a.node, wa, wb, a.bandwidth, a.delta, a.feature);
  json j = to_json(v);
  j["node"] = p.node_ids[a.node];
  j["window_a"] = {wa.begin, wa.end};
  j["window_b"] = {wb.begin, wb.end};
  j["bandwidth"] = a.bandwidth;
  write_json(j, fs::path(a.out) / "verdict.json");
  std::cout << j.dump() << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// export-relations

struct ExportArgs {
  std::string checkpoint;
  std::string data;
  std::string split = "0.6,0.2,0.2";
  std::string split_name = "test";
  std::size_t window = 0;  // index into the split's windows
  std::size_t step = 0;    // lookback position l
  std::optional<std::size_t> head;  // default: mean over heads
  bool raw = false;        // raw Gram for a_st (no row normalization)
  std::string out;
};

inline void write_matrix_csv(const std::vector<double>& m, std::size_t n,
                             const std::vector<std::string>& ids, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "node";
  for (const auto& id : ids) out << ',' << id;
  out << '\n';
  for (std::size_t i = 0; i < n; ++i) {
    out << ids[i];
    for (std::size_t j = 0; j < n; ++j) out << ',' << detail::format_double(m[i * n + j]);
    out << '\n';
  }
}

inline int cmd_export_relations(const ExportArgs& a) {
  const DranModel m = load_checkpoint(a.checkpoint);
  const DranConfig& c = m.config;
  const Dataset data = make_dataset(load_csv(a.data), c.L, c.H, parse_split(a.split));
  check_dataset(data, c);
  const auto& pos = split_positions(data, a.split_name);
  if (a.window >= pos.size()) {
    throw UsageError("--window " + std::to_string(a.window) + " out of range (" +
                     std::to_string(pos.size()) + " windows)");
  }
  if (a.step >= c.L) throw UsageError("--step must be < L = " + std::to_string(c.L));
  if (a.head && *a.head >= c.heads) throw UsageError("--head out of range");
  ensure_dir(a.out);

  NoGradScope no_grad;
  const std::size_t t = pos[a.window];
  const auto b = extract_batch(data.panel, c.L, c.H, std::span<const std::size_t>(&t, 1));
  const auto r = dran_forward(m, b.lookback, RunMode::eval);
  const std::size_t N = c.N;
  std::vector<double> dy(N * N, 0.0);
  const std::size_t h0 = a.head.value_or(0), h1 = a.head ? *a.head + 1 : c.heads;
  for (std::size_t h = h0; h < h1; ++h)
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < N; ++j)
        dy[i * N + j] += r.mid.dy_weights.at({0, h, a.step, i, j}) / static_cast<double>(h1 - h0);
  write_matrix_csv(dy, N, data.panel.node_ids, fs::path(a.out) / "a_dy.csv");
  json j = {{"window_start", t}, {"step", a.step}, {"a_dy", (fs::path(a.out) / "a_dy.csv").string()}};

  if (m.params.contains("dsfl.emb")) {
    const auto rel = static_relations(m.params.get("dsfl.emb"), c.a_st_rownorm && !a.raw);
    std::vector<double> st(N * N);
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t k = 0; k < N; ++k) st[i * N + k] = rel.a_st.at({a.step, i, k});
    write_matrix_csv(st, N, data.panel.node_ids, fs::path(a.out) / "a_st.csv");
    j["a_st"] = (fs::path(a.out) / "a_st.csv").string();
    j["a_st_raw"] = a.raw || !c.a_st_rownorm;
  } else {
    std::cerr << "checkpoint has no static branch (" << variant_name(c.ablations)
              << "); a_st not written\n";
  }
  std::cout << j.dump() << '\n';
  return kOk;
}

}  // namespace dran::cli
