#pragma once

// Dense row-major tensor of doubles with a dynamic reverse-mode tape.
//
// A Tensor is a cheap handle onto a shared node. Operations (see ops.hpp)
// produce new nodes; when any input requires a gradient the result records
// its parents and a backward closure. Tensor::backward() walks the graph in
// reverse topological order and then releases it.

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace dran {

using Shape = std::vector<std::size_t>;

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// Checked mode validates every op result for NaN/Inf and rejects
// near-zero denominators. Values are always validated at creation.
namespace detail {
inline thread_local bool checked_mode = true;
}

inline bool checked_mode() { return detail::checked_mode; }

class CheckedModeScope {
 public:
  explicit CheckedModeScope(bool enabled) : saved_(detail::checked_mode) {
    detail::checked_mode = enabled;
  }
  ~CheckedModeScope() { detail::checked_mode = saved_; }
  CheckedModeScope(const CheckedModeScope&) = delete;
  CheckedModeScope& operator=(const CheckedModeScope&) = delete;

 private:
  bool saved_;
};

// Inside a NoGradScope ops record no graph, whatever their inputs.
namespace detail {
inline thread_local bool grad_enabled = true;
}

inline bool grad_enabled() { return detail::grad_enabled; }

class NoGradScope {
 public:
  NoGradScope() : saved_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradScope() { detail::grad_enabled = saved_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  bool saved_;
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  bool consumed = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  double* grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad.data();
  }
};

inline void check_finite(std::span<const double> values, const char* where) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw Error(std::string("non-finite value in ") + where);
    }
  }
}

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false) {
    if (numel(shape) != values.size()) {
      throw Error("tensor: shape " + to_string(shape) + " needs " +
                  std::to_string(numel(shape)) + " values, got " +
                  std::to_string(values.size()));
    }
    detail::check_finite(values, "tensor creation");
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    std::vector<double> values(numel(shape), value);
    return from(std::move(shape), std::move(values), requires_grad);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), 0.0, requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return from({}, {value}, requires_grad);
  }

  template <class Rng>
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0,
                      bool requires_grad = false) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> values(numel(shape));
    for (auto& v : values) v = dist(rng);
    return from(std::move(shape), std::move(values), requires_grad);
  }

  template <class Rng>
  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi,
                        bool requires_grad = false) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> values(numel(shape));
    for (auto& v : values) v = dist(rng);
    return from(std::move(shape), std::move(values), requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }

  const Shape& shape() const { return node().shape; }
  std::size_t rank() const { return node().shape.size(); }
  std::size_t size() const { return node().data.size(); }

  // Negative axes count from the back.
  std::size_t dim(int axis) const { return shape()[normalize_axis(axis)]; }

  std::size_t normalize_axis(int axis) const {
    const int r = static_cast<int>(rank());
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) {
      throw Error("axis " + std::to_string(axis) + " out of range for shape " +
                  to_string(shape()));
    }
    return static_cast<std::size_t>(a);
  }

  std::span<const double> data() const { return node().data; }

  // Direct write access is reserved for optimizers and test fixtures.
  std::span<double> mutable_data() { return node().data; }

  double item() const {
    if (size() != 1) {
      throw Error("item() on tensor of shape " + to_string(shape()));
    }
    return node().data[0];
  }

  double operator[](std::size_t flat) const { return node().data.at(flat); }

  double at(std::initializer_list<std::size_t> index) const {
    const auto& s = shape();
    if (index.size() != s.size()) throw Error("at(): rank mismatch");
    std::size_t flat = 0;
    std::size_t i = 0;
    for (std::size_t idx : index) {
      if (idx >= s[i]) throw Error("at(): index out of range");
      flat = flat * s[i] + idx;
      ++i;
    }
    return node().data[flat];
  }

  bool requires_grad() const { return node().requires_grad; }
  void set_requires_grad(bool on) { node().requires_grad = on; }

  bool has_grad() const { return !node().grad.empty(); }
  std::span<const double> grad() const { return node().grad; }
  void clear_grad() { node().grad.clear(); }

  // A fresh leaf holding a copy of the values.
  Tensor detach() const { return from(shape(), node().data, false); }

  Tensor clone() const { return from(shape(), node().data, requires_grad()); }

  void backward() const;

  // Internal access for op implementations.
  const std::shared_ptr<detail::Node>& handle() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  detail::Node& node() const {
    if (!node_) throw Error("use of undefined tensor");
    return *node_;
  }

  std::shared_ptr<detail::Node> node_;
};

inline void Tensor::backward() const {
  auto& root = node();
  if (root.data.size() != 1) {
    throw Error("backward() requires a scalar loss, got shape " +
                to_string(root.shape));
  }
  if (root.consumed) {
    throw Error("backward() called twice on the same graph");
  }

  // Iterative post-order DFS gives a topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (n->consumed) {
      throw Error("backward() through a graph that was already consumed");
    }
    if (next < n->parents.size()) {
      detail::Node* p = n->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  root.grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
  for (detail::Node* n : order) {
    if (!n->is_leaf) {
      n->parents.clear();
      n->backward = nullptr;
      n->consumed = true;
    }
  }
}

}  // namespace dran
