#pragma once

// Training loop, evaluation, persistence baseline and seed-parallel runs.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <functional>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "dran/checkpoint.hpp"
#include "dran/data.hpp"
#include "dran/diagnostics.hpp"
#include "dran/model.hpp"
#include "dran/params.hpp"

namespace dran {

struct TrainingError : Error {
  using Error::Error;
};

// A panel together with its window start positions per split.
struct Dataset {
  SeriesPanel panel;
  std::size_t L = 0;
  std::size_t H = 0;
  WindowIndex windows;
};

inline Dataset make_dataset(SeriesPanel panel, std::size_t L, std::size_t H,
                            const SplitSpec& split, std::size_t stride = 1) {
  panel.validate();
  Dataset d{std::move(panel), L, H, {}};
  d.windows = window_index(d.panel, L, H, split, stride);
  return d;
}

struct LossRecord {
  double total = 0.0;
  double pred = 0.0;
  double rec = 0.0;
  double kl = 0.0;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  LossRecord train;
  LossRecord val;
  double val_mae = 0.0;
};

struct TrainReport {
  std::string variant;
  std::uint64_t seed = 0;
  std::size_t param_count = 0;
  std::vector<EpochRecord> epochs;
  double wall_seconds = 0.0;
  std::size_t best_epoch = 0;
  double best_val_mae = 0.0;
  std::string checkpoint_id;
};

struct TrainResult {
  DranModel best;
  TrainReport report;
};

struct TrainOptions {
  // Skips validation passes when the val split is empty or not wanted.
  bool validate = true;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct Metrics {
  double mae = 0.0;
  double mape = 0.0;
  std::size_t windows = 0;
};

inline std::mt19937_64 training_rng(std::uint64_t seed) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    0x7261696eu};
  return std::mt19937_64(seq);
}

inline void check_dataset(const Dataset& data, const DranConfig& cfg) {
  if (data.L != cfg.L || data.H != cfg.H) throw Error("dataset L/H do not match config");
  if (data.panel.nodes() != cfg.N || data.panel.features() != cfg.d_in) {
    throw Error("dataset has N=" + std::to_string(data.panel.nodes()) +
                ", D=" + std::to_string(data.panel.features()) + " but config has N=" +
                std::to_string(cfg.N) + ", D=" + std::to_string(cfg.d_in));
  }
}

// Forecasts for all windows at `positions`, evaluated with z = mu.
inline Tensor predict(const DranModel& model, const Dataset& data,
                      std::span<const std::size_t> positions, Tensor* targets = nullptr) {
  NoGradScope no_grad;
  std::vector<double> pred, tgt;
  for (const auto& b : make_batches(data.panel, data.L, data.H, positions, model.config.batch)) {
    auto r = dran_forward(model, b.lookback, RunMode::eval);
    const auto f = r.forecast.data();
    pred.insert(pred.end(), f.begin(), f.end());
    const auto h = b.horizon.data();
    tgt.insert(tgt.end(), h.begin(), h.end());
  }
  const Shape shape{positions.size(), data.H, data.panel.nodes(), data.panel.features()};
  if (targets) *targets = Tensor::from(shape, std::move(tgt));
  return Tensor::from(shape, std::move(pred));
}

// MAPE is NaN when every target lies below the floor.
inline Metrics metrics_of(const Tensor& pred, const Tensor& target) {
  Metrics m;
  m.windows = pred.dim(0);
  m.mae = mae(pred, target);
  try {
    m.mape = mape(pred, target);
  } catch (const Error&) {
    m.mape = std::numeric_limits<double>::quiet_NaN();
  }
  return m;
}

inline Metrics evaluate(const DranModel& model, const Dataset& data,
                        std::span<const std::size_t> positions) {
  if (positions.empty()) throw Error("evaluate: no windows");
  Tensor target;
  Tensor pred = predict(model, data, positions, &target);
  return metrics_of(pred, target);
}

// Repeats the last lookback row over the horizon.
inline Metrics persistence_metrics(const Dataset& data, std::span<const std::size_t> positions) {
  if (positions.empty()) throw Error("persistence: no windows");
  const std::size_t N = data.panel.nodes(), D = data.panel.features(), row = N * D;
  const Shape shape{positions.size(), data.H, N, D};
  std::vector<double> pred, tgt;
  const auto v = data.panel.values.data();
  for (std::size_t t : positions) {
    for (std::size_t s = 0; s < data.H; ++s) {
      pred.insert(pred.end(), v.begin() + (t - 1) * row, v.begin() + t * row);
      tgt.insert(tgt.end(), v.begin() + (t + s) * row, v.begin() + (t + s + 1) * row);
    }
  }
  return metrics_of(Tensor::from(shape, std::move(pred)), Tensor::from(shape, std::move(tgt)));
}

namespace detail {

inline void accumulate(LossRecord& acc, const LossParts& l, double weight) {
  acc.total += weight * l.total.item();
  acc.pred += weight * l.pred.item();
  acc.rec += weight * l.rec.item();
  acc.kl += weight * l.kl.item();
}

inline void scale(LossRecord& r, double s) {
  r.total *= s;
  r.pred *= s;
  r.rec *= s;
  r.kl *= s;
}

inline bool finite(const LossRecord& r) {
  return std::isfinite(r.total) && std::isfinite(r.pred) && std::isfinite(r.rec) &&
         std::isfinite(r.kl);
}

// Window-weighted mean of the loss components, z = mu.
inline LossRecord eval_losses(const DranModel& model, const Dataset& data,
                              std::span<const std::size_t> positions) {
  NoGradScope no_grad;
  LossRecord acc;
  for (const auto& b : make_batches(data.panel, data.L, data.H, positions, model.config.batch)) {
    accumulate(acc, batch_loss(model, b.lookback, b.horizon, RunMode::eval),
               static_cast<double>(b.size()));
  }
  scale(acc, 1.0 / static_cast<double>(positions.size()));
  return acc;
}

}  // namespace detail

inline TrainResult train(const Dataset& data, const DranConfig& cfg, const TrainOptions& opt = {}) {
  cfg.validate();
  check_dataset(data, cfg);
  if (data.windows.train.empty()) throw Error("train: no training windows");
  const bool do_val = opt.validate && !data.windows.val.empty();

  const auto t0 = std::chrono::steady_clock::now();
  DranModel model = DranModel::create(cfg);
  AdamState adam;
  adam.lr = cfg.lr;
  auto rng = training_rng(cfg.seed);

  TrainResult result;
  TrainReport& rep = result.report;
  rep.variant = variant_name(cfg.ablations);
  rep.seed = cfg.seed;
  rep.param_count = model.params.total_elements();
  rep.best_val_mae = std::numeric_limits<double>::infinity();
  bool have_best = false;

  std::vector<std::size_t> order = data.windows.train;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochRecord rec;
    rec.epoch = epoch;
    std::size_t batch_no = 0;
    for (std::size_t i = 0; i < order.size(); i += cfg.batch, ++batch_no) {
      const std::size_t n = std::min(cfg.batch, order.size() - i);
      const auto b = extract_batch(data.panel, cfg.L, cfg.H,
                                   std::span<const std::size_t>(order).subspan(i, n));
      auto where = [&] {
        return "epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch_no);
      };
      try {
        LossParts l = batch_loss(model, b.lookback, b.horizon, RunMode::train, &rng);
        if (!std::isfinite(l.total.item())) throw Error("loss is not finite");
        detail::accumulate(rec.train, l, static_cast<double>(n));
        l.total.backward();
        double grad_scale = 1.0;
        if (cfg.clip_norm > 0.0) {
          const double norm = grad_norm(model.params);
          if (norm > cfg.clip_norm) grad_scale = cfg.clip_norm / norm;
        }
        adam_step(model.params, adam, grad_scale);
      } catch (const TrainingError&) {
        throw;
      } catch (const Error& e) {
        throw TrainingError("non-finite training state at " + where() + ": " + e.what());
      }
    }
    detail::scale(rec.train, 1.0 / static_cast<double>(order.size()));

    if (do_val) {
      rec.val = detail::eval_losses(model, data, data.windows.val);
      rec.val_mae = rec.val.pred;
      if (!detail::finite(rec.val)) {
        throw TrainingError("non-finite validation loss at epoch " + std::to_string(epoch));
      }
    }
    // Without validation the last epoch wins.
    const double score = do_val ? rec.val_mae : 0.0;
    if (!have_best || score < rep.best_val_mae || !do_val) {
      have_best = true;
      rep.best_val_mae = score;
      rep.best_epoch = epoch;
      result.best = DranModel{cfg, model.params.clone()};
    }
    rep.epochs.push_back(rec);
    if (opt.on_epoch) opt.on_epoch(rec);
  }
  if (!have_best) result.best = DranModel{cfg, model.params.clone()};
  if (!do_val) rep.best_val_mae = std::numeric_limits<double>::quiet_NaN();
  rep.checkpoint_id = checkpoint_id(result.best);
  rep.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

// ---------------------------------------------------------------------------
// Reports

inline nlohmann::json to_json(const LossRecord& r) {
  return {{"total", r.total}, {"pred", r.pred}, {"rec", r.rec}, {"kl", r.kl}};
}

// NaN and infinities are written as null.
inline nlohmann::json json_number(double v) {
  return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

inline nlohmann::json to_json(const Metrics& m) {
  return {{"mae", json_number(m.mae)}, {"mape", json_number(m.mape)}, {"windows", m.windows}};
}

inline nlohmann::json to_json(const TrainReport& r) {
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : r.epochs) {
    epochs.push_back({{"epoch", e.epoch},
                      {"train", to_json(e.train)},
                      {"val", to_json(e.val)},
                      {"val_mae", e.val_mae}});
  }
  return {{"variant", r.variant},
          {"seed", r.seed},
          {"param_count", r.param_count},
          {"wall_seconds", r.wall_seconds},
          {"best_epoch", r.best_epoch},
          {"best_val_mae", json_number(r.best_val_mae)},
          {"checkpoint_id", r.checkpoint_id},
          {"epochs", epochs}};
}

inline void write_report_csv(const TrainReport& r, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path);
  out << "epoch,train_total,train_pred,train_rec,train_kl,val_total,val_pred,val_rec,val_kl\n";
  auto f = [](double v) { return detail::format_double(v); };
  for (const auto& e : r.epochs) {
    out << e.epoch << ',' << f(e.train.total) << ',' << f(e.train.pred) << ',' << f(e.train.rec)
        << ',' << f(e.train.kl) << ',' << f(e.val.total) << ',' << f(e.val.pred) << ','
        << f(e.val.rec) << ',' << f(e.val.kl) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Seed-level parallelism

// STF_DRAN_THREADS caps worker threads; default 1.
inline std::size_t seed_threads() {
  const char* env = std::getenv("STF_DRAN_THREADS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 1) throw Error("STF_DRAN_THREADS must be a positive integer");
  return static_cast<std::size_t>(v);
}

// Runs fn(i) for i in [0, n) on up to `threads` workers. The first exception
// (lowest index) is rethrown after all workers finish.
inline void parallel_for(std::size_t n, std::size_t threads,
                         const std::function<void(std::size_t)>& fn) {
  std::vector<std::exception_ptr> errors(n);
  auto guarded = [&](std::size_t i) {
    try {
      fn(i);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) guarded(i);
  } else {
    std::mutex mu;
    std::size_t next = 0;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < threads; ++w) {
      pool.emplace_back([&] {
        for (;;) {
          std::size_t i;
          {
            std::lock_guard<std::mutex> lock(mu);
            if (next >= n) return;
            i = next++;
          }
          guarded(i);
        }
      });
    }
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

struct SeedRun {
  TrainResult result;
  Metrics test;
};

// One training run per seed, results ordered as `seeds`.
inline std::vector<SeedRun> run_seeds(const Dataset& data, const DranConfig& cfg,
                                      const std::vector<std::uint64_t>& seeds,
                                      std::size_t threads = seed_threads()) {
  std::vector<std::optional<SeedRun>> slots(seeds.size());
  parallel_for(seeds.size(), threads, [&](std::size_t i) {
    DranConfig c = cfg;
    c.seed = seeds[i];
    auto r = train(data, c);
    Metrics m = evaluate(r.best, data, data.windows.test);
    slots[i].emplace(SeedRun{std::move(r), m});
  });
  std::vector<SeedRun> out;
  out.reserve(seeds.size());
  for (auto& s : slots) out.push_back(std::move(*s));
  return out;
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population
};

inline MeanStd mean_std(const std::vector<double>& xs) {
  MeanStd r;
  if (xs.empty()) return r;
  for (double x : xs) r.mean += x;
  r.mean /= static_cast<double>(xs.size());
  for (double x : xs) r.std += (x - r.mean) * (x - r.mean);
  r.std = std::sqrt(r.std / static_cast<double>(xs.size()));
  return r;
}

}  // namespace dran
