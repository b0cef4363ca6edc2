#pragma once

// Named parameter registry and the Adam optimizer.

#include <cmath>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "dran/tensor.hpp"

namespace dran {

// Parameters addressable by dotted path, kept in registration order.
class ParamStore {
 public:
  Tensor& add(const std::string& path, Tensor value) {
    if (index_.count(path)) throw Error("duplicate parameter path: " + path);
    value.set_requires_grad(true);
    index_.emplace(path, tensors_.size());
    names_.push_back(path);
    tensors_.push_back(std::move(value));
    return tensors_.back();
  }

  bool contains(const std::string& path) const { return index_.count(path) > 0; }

  const Tensor& get(const std::string& path) const {
    auto it = index_.find(path);
    if (it == index_.end()) throw Error("unknown parameter path: " + path);
    return tensors_[it->second];
  }

  Tensor& get(const std::string& path) {
    auto it = index_.find(path);
    if (it == index_.end()) throw Error("unknown parameter path: " + path);
    return tensors_[it->second];
  }

  const std::vector<std::string>& names() const { return names_; }
  std::size_t count() const { return tensors_.size(); }

  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.size();
    return n;
  }

  Tensor& at(std::size_t i) { return tensors_[i]; }
  const Tensor& at(std::size_t i) const { return tensors_[i]; }

  // Deep copy; the result shares no storage with this store.
  ParamStore clone() const {
    ParamStore out;
    for (std::size_t i = 0; i < tensors_.size(); ++i) {
      out.add(names_[i], tensors_[i].detach());
    }
    return out;
  }

  void zero_grad() {
    for (auto& t : tensors_) t.clear_grad();
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct AdamState {
  long step = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::map<std::string, std::vector<double>> m;
  std::map<std::string, std::vector<double>> v;
};

// Global L2 norm of all parameter gradients.
inline double grad_norm(const ParamStore& params) {
  double total = 0.0;
  for (std::size_t i = 0; i < params.count(); ++i) {
    for (double g : params.at(i).grad()) total += g * g;
  }
  return std::sqrt(total);
}

// Bias-corrected Adam update; consumes and clears the gradients.
inline void adam_step(ParamStore& params, AdamState& state, double grad_scale = 1.0) {
  for (std::size_t i = 0; i < params.count(); ++i) {
    if (!params.at(i).has_grad()) {
      throw Error("adam_step: missing gradient for parameter " + params.names()[i]);
    }
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.count(); ++i) {
    Tensor& p = params.at(i);
    const std::string& name = params.names()[i];
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.empty()) {
      m.assign(p.size(), 0.0);
      v.assign(p.size(), 0.0);
    }
    auto w = p.mutable_data();
    const auto g = p.grad();
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j] * grad_scale;
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * gj;
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * gj * gj;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      w[j] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
    p.clear_grad();
  }
}

}  // namespace dran
