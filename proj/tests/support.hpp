#pragma once

// Shared test helpers: central finite differences and small fixtures.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "dran/ops.hpp"
#include "dran/params.hpp"
#include "dran/tensor.hpp"

namespace dran::testing {

inline std::string fmt_sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3e", v);
  return buf;
}

inline double rel_error(double analytic, double numeric, double floor = 1e-8) {
  return std::abs(analytic - numeric) / std::max(std::abs(analytic) + std::abs(numeric), floor);
}

// Resolution of a central difference: the two loss evaluations each carry
// roundoff of a few eps * |f|, so (f+ - f-) / 2h is only known to about
// eps * |f| / h in absolute terms.
inline double roundoff_bound(double f, double h) {
  return 10.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(f)) / h;
}

// A relative error below tol is only measurable when the gradient exceeds
// resolution / tol. Smaller gradients (e.g. attention key biases, exactly
// zero) are checked in absolute terms at the resolution instead.
inline bool resolvable(double analytic, double numeric, double f, double h, double tol) {
  return std::max(std::abs(analytic), std::abs(numeric)) >= roundoff_bound(f, h) / tol;
}

inline bool grad_ok(double analytic, double numeric, double f, double h, double tol) {
  if (rel_error(analytic, numeric) < tol) return true;
  return !resolvable(analytic, numeric, f, h, tol) &&
         std::abs(analytic - numeric) <= roundoff_bound(f, h);
}

struct GradCheck {
  std::size_t checked = 0;
  std::size_t failed = 0;
  std::size_t absolute = 0;  // below resolution / tol, judged in absolute terms
  double max_rel = 0.0;      // over the elements judged relatively
  double max_abs = 0.0;      // over the elements judged absolutely
  double worst = 0.0;        // over failing elements
  std::string worst_where;

  void record(double analytic, double numeric, double f, double h, double tol) {
    ++checked;
    if (resolvable(analytic, numeric, f, h, tol)) {
      max_rel = std::max(max_rel, rel_error(analytic, numeric));
    } else {
      ++absolute;
      max_abs = std::max(max_abs, std::abs(analytic - numeric));
    }
  }
};

// Perturbs every element of `inputs` by +-h and compares d(loss)/dx against
// the backward pass. `loss` must rebuild the graph from the current values.
inline GradCheck check_gradients(std::vector<Tensor*> inputs,
                                 const std::function<Tensor()>& loss, double tol,
                                 double h = 1e-5, const std::vector<std::string>& names = {}) {
  for (Tensor* t : inputs) {
    t->set_requires_grad(true);
    t->clear_grad();
  }
  Tensor f0 = loss();
  const double f = f0.item();
  f0.backward();
  GradCheck out;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor& t = *inputs[k];
    std::vector<double> g(t.grad().begin(), t.grad().end());
    if (g.empty()) g.assign(t.size(), 0.0);
    auto x = t.mutable_data();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double orig = x[i];
      double fp, fm;
      {
        NoGradScope ng;
        x[i] = orig + h;
        fp = loss().item();
        x[i] = orig - h;
        fm = loss().item();
      }
      x[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double err = rel_error(g[i], numeric);
      out.record(g[i], numeric, f, h, tol);
      const bool ok = grad_ok(g[i], numeric, f, h, tol);
      if (!ok) ++out.failed;
      if (!ok && err > out.worst) {
        out.worst = err;
        out.worst_where = (k < names.size() ? names[k] : "input" + std::to_string(k)) + "[" +
                          std::to_string(i) + "] analytic=" + fmt_sci(g[i]) +
                          " numeric=" + fmt_sci(numeric);
      }
    }
    t.clear_grad();
  }
  return out;
}

// Same check over every tensor of a parameter store. A parameter counts as
// failed when any of its elements does.
struct ParamGradCheck {
  std::size_t params = 0;
  std::size_t params_failed = 0;
  GradCheck elements;
  std::vector<std::string> failed_names;
};

inline ParamGradCheck check_param_gradients(ParamStore& ps, const std::function<Tensor()>& loss,
                                            double tol, double h = 1e-5) {
  ParamGradCheck out;
  ps.zero_grad();
  Tensor f0 = loss();
  const double f = f0.item();
  f0.backward();
  for (std::size_t k = 0; k < ps.count(); ++k) {
    Tensor& t = ps.at(k);
    std::vector<double> g(t.grad().begin(), t.grad().end());
    if (g.empty()) g.assign(t.size(), 0.0);
    auto x = t.mutable_data();
    bool bad = false;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double orig = x[i];
      double fp, fm;
      {
        NoGradScope ng;
        x[i] = orig + h;
        fp = loss().item();
        x[i] = orig - h;
        fm = loss().item();
      }
      x[i] = orig;
      const double err = rel_error(g[i], (fp - fm) / (2.0 * h));
      const bool ok = grad_ok(g[i], (fp - fm) / (2.0 * h), f, h, tol);
      out.elements.record(g[i], (fp - fm) / (2.0 * h), f, h, tol);
      if (!ok) {
        ++out.elements.failed;
        bad = true;
      }
      if (!ok && err > out.elements.worst) {
        out.elements.worst = err;
        out.elements.worst_where = ps.names()[k] + "[" + std::to_string(i) + "] analytic=" + fmt_sci(g[i]) + " numeric=" + fmt_sci((fp - fm) / (2.0 * h));
      }
    }
    ++out.params;
    if (bad) {
      ++out.params_failed;
      out.failed_names.push_back(ps.names()[k]);
    }
  }
  ps.zero_grad();
  return out;
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0,
                            double hi = 1.0) {
  return Tensor::uniform(std::move(shape), rng, lo, hi);
}

// Flattened weighted sum with fixed random weights: a generic scalar probe
// whose gradient exercises every output element.
inline Tensor probe(const Tensor& y, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  Tensor w = Tensor::uniform(y.shape(), rng, -1.0, 1.0);
  return sum_all(mul(y, w));
}

// A fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("dran_" + tag + "_" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::string file(const std::string& name) const { return (path_ / name).string(); }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream(path) << text;
}

}  // namespace dran::testing
