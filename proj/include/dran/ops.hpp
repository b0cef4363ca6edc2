#pragma once

// Differentiable tensor operations. Every op returns a fresh tensor; when an
// input requires a gradient the result records a backward closure.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "dran/tensor.hpp"

namespace dran {

namespace detail {

inline Tensor make_op(Shape shape, std::vector<double> data,
                      std::initializer_list<const Tensor*> inputs,
                      std::function<void(Node&)> backward, const char* name) {
  if (dran::checked_mode()) check_finite(data, name);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->is_leaf = false;
  bool needs_grad = false;
  for (const Tensor* t : inputs) needs_grad = needs_grad || t->requires_grad();
  needs_grad = needs_grad && dran::grad_enabled();
  if (needs_grad) {
    node->requires_grad = true;
    for (const Tensor* t : inputs) node->parents.push_back(t->handle());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

inline Tensor make_op(Shape shape, std::vector<double> data,
                      const std::vector<Tensor>& inputs,
                      std::function<void(Node&)> backward, const char* name) {
  if (dran::checked_mode()) check_finite(data, name);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->is_leaf = false;
  bool needs_grad = false;
  for (const Tensor& t : inputs) needs_grad = needs_grad || t.requires_grad();
  needs_grad = needs_grad && dran::grad_enabled();
  if (needs_grad) {
    node->requires_grad = true;
    for (const Tensor& t : inputs) node->parents.push_back(t.handle());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw Error(std::string(op) + ": shapes " + to_string(a) + " and " +
                  to_string(b) + " are not broadcast-compatible");
    }
    out[i] = da == 1 ? db : da;
  }
  return out;
}

inline std::vector<std::size_t> contiguous_strides(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size());
  std::size_t s = 1;
  for (std::size_t i = shape.size(); i-- > 0;) {
    strides[i] = s;
    s *= shape[i];
  }
  return strides;
}

// Strides of `in` viewed at the rank of `out`, zero on broadcast axes.
inline std::vector<std::size_t> broadcast_strides(const Shape& in,
                                                  const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  const auto cs = contiguous_strides(in);
  const std::size_t offset = out.size() - in.size();
  for (std::size_t i = 0; i < in.size(); ++i) {
    strides[offset + i] = in[i] == 1 ? 0 : cs[i];
  }
  return strides;
}

// Calls f(out_index, a_offset, b_offset) over `out` in row-major order.
template <class F>
void for_each_strided(const Shape& out, const std::vector<std::size_t>& sa,
                      const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t total = numel(out);
  if (total == 0) return;
  const std::size_t r = out.size();
  if (r == 0) {
    f(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  const std::size_t inner = out[r - 1];
  const std::size_t step_a = sa[r - 1];
  const std::size_t step_b = sb[r - 1];
  std::vector<std::size_t> idx(r, 0);
  std::size_t oa = 0, ob = 0, i = 0;
  const std::size_t outer = total / inner;
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < inner; ++j) f(i++, oa + j * step_a, ob + j * step_b);
    for (std::size_t d = r - 1; d-- > 0;) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < out[d]) break;
      oa -= sa[d] * out[d];
      ob -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

struct AxisSplit {
  std::size_t outer, n, inner;
};

inline AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <class Fwd, class DA, class DB>
Tensor binary(const Tensor& a, const Tensor& b, const char* name, Fwd f, DA da,
              DB db) {
  const Shape out = broadcast_shape(a.shape(), b.shape(), name);
  const auto sa = broadcast_strides(a.shape(), out);
  const auto sb = broadcast_strides(b.shape(), out);
  std::vector<double> data(numel(out));
  const auto av = a.data();
  const auto bv = b.data();
  for_each_strided(out, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
    data[i] = f(av[ia], bv[ib]);
  });
  auto pa = a.handle();
  auto pb = b.handle();
  return make_op(
      out, std::move(data), {&a, &b},
      [pa, pb, sa, sb, da, db](Node& self) {
        const double* g = self.grad.data();
        const auto& x = pa->data;
        const auto& y = pb->data;
        double* ga = pa->requires_grad ? pa->grad_buffer() : nullptr;
        double* gb = pb->requires_grad ? pb->grad_buffer() : nullptr;
        for_each_strided(self.shape, sa, sb,
                         [&](std::size_t i, std::size_t ia, std::size_t ib) {
                           if (ga) ga[ia] += g[i] * da(x[ia], y[ib], self.data[i]);
                           if (gb) gb[ib] += g[i] * db(x[ia], y[ib], self.data[i]);
                         });
      },
      name);
}

// df is evaluated from (input, output).
template <class Fwd, class Df>
Tensor unary(const Tensor& a, const char* name, Fwd f, Df df) {
  const auto av = a.data();
  std::vector<double> data(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) data[i] = f(av[i]);
  auto pa = a.handle();
  return make_op(
      a.shape(), std::move(data), {&a},
      [pa, df](Node& self) {
        double* ga = pa->grad_buffer();
        const double* g = self.grad.data();
        for (std::size_t i = 0; i < self.data.size(); ++i) {
          ga[i] += g[i] * df(pa->data[i], self.data[i]);
        }
      },
      name);
}

}  // namespace detail

// Elementwise arithmetic with numpy-style broadcasting.

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  if (checked_mode()) {
    for (double v : b.data()) {
      if (std::abs(v) < 1e-12) {
        throw Error("div: |denominator| < 1e-12 (denominator shape " +
                    to_string(b.shape()) + ")");
      }
    }
  }
  return detail::binary(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double x, double y, double) { return -x / (y * y); });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  return detail::unary(
      a, "add_scalar", [c](double x) { return x + c; },
      [](double, double) { return 1.0; });
}

inline Tensor mul_scalar(const Tensor& a, double c) {
  return detail::unary(
      a, "mul_scalar", [c](double x) { return x * c; },
      [c](double, double) { return c; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double c) { return add_scalar(a, c); }
inline Tensor operator-(const Tensor& a, double c) { return add_scalar(a, -c); }
inline Tensor operator*(const Tensor& a, double c) { return mul_scalar(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return mul_scalar(a, c); }
inline Tensor operator-(const Tensor& a) { return mul_scalar(a, -1.0); }

// Elementwise functions.

inline Tensor exp(const Tensor& a) {
  return detail::unary(
      a, "exp", [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
  if (checked_mode()) {
    for (double v : a.data()) {
      if (!(v > 0.0)) throw Error("log: non-positive argument");
    }
  }
  return detail::unary(
      a, "log", [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

inline Tensor sqrt(const Tensor& a) {
  return detail::unary(
      a, "sqrt", [](double x) { return std::sqrt(x); },
      [](double, double y) { return 0.5 / y; });
}

inline Tensor square(const Tensor& a) {
  return detail::unary(
      a, "square", [](double x) { return x * x; },
      [](double x, double) { return 2.0 * x; });
}

inline Tensor abs(const Tensor& a) {
  return detail::unary(
      a, "abs", [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

inline double sigmoid_value(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary(a, "sigmoid", sigmoid_value,
                       [](double, double y) { return y * (1.0 - y); });
}

inline Tensor relu(const Tensor& a) {
  return detail::unary(
      a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor softplus(const Tensor& a) {
  return detail::unary(
      a, "softplus",
      [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); },
      [](double x, double) { return sigmoid_value(x); });
}

// Shape manipulation. All results own their storage.

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw Error("reshape: cannot reshape " + to_string(a.shape()) + " to " +
                to_string(shape));
  }
  std::vector<double> data(a.data().begin(), a.data().end());
  auto pa = a.handle();
  return detail::make_op(
      std::move(shape), std::move(data), {&a},
      [pa](detail::Node& self) {
        double* ga = pa->grad_buffer();
        for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
      },
      "reshape");
}

inline Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
  const Shape& in = a.shape();
  if (axes.size() != in.size()) {
    throw Error("permute: " + std::to_string(axes.size()) + " axes for shape " +
                to_string(in));
  }
  std::vector<bool> seen(in.size(), false);
  Shape out(in.size());
  const auto cs = detail::contiguous_strides(in);
  std::vector<std::size_t> strides(in.size());
  for (std::size_t i = 0; i < axes.size(); ++i) {
    if (axes[i] >= in.size() || seen[axes[i]]) throw Error("permute: invalid axes");
    seen[axes[i]] = true;
    out[i] = in[axes[i]];
    strides[i] = cs[axes[i]];
  }
  const std::vector<std::size_t> zero(in.size(), 0);
  std::vector<double> data(a.size());
  const auto av = a.data();
  detail::for_each_strided(out, strides, zero,
                           [&](std::size_t i, std::size_t ia, std::size_t) {
                             data[i] = av[ia];
                           });
  auto pa = a.handle();
  return detail::make_op(
      out, std::move(data), {&a},
      [pa, strides, zero](detail::Node& self) {
        double* ga = pa->grad_buffer();
        detail::for_each_strided(self.shape, strides, zero,
                                 [&](std::size_t i, std::size_t ia, std::size_t) {
                                   ga[ia] += self.grad[i];
                                 });
      },
      "permute");
}

// Swaps the trailing two axes.
inline Tensor transpose(const Tensor& a) {
  if (a.rank() < 2) throw Error("transpose: rank < 2 for " + to_string(a.shape()));
  std::vector<std::size_t> axes(a.rank());
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  std::swap(axes[a.rank() - 1], axes[a.rank() - 2]);
  return permute(a, axes);
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw Error("concat: no inputs");
  const std::size_t ax = parts[0].normalize_axis(axis);
  Shape out = parts[0].shape();
  out[ax] = 0;
  for (const auto& p : parts) {
    if (p.rank() != out.size()) throw Error("concat: rank mismatch");
    for (std::size_t d = 0; d < out.size(); ++d) {
      if (d != ax && p.shape()[d] != parts[0].shape()[d]) {
        throw Error("concat: shapes " + to_string(parts[0].shape()) + " and " +
                    to_string(p.shape()) + " differ off axis " + std::to_string(ax));
      }
    }
    out[ax] += p.shape()[ax];
  }
  const auto split = detail::split_at(out, ax);
  std::vector<double> data(numel(out));
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t n = p.shape()[ax];
    const auto pv = p.data();
    for (std::size_t o = 0; o < split.outer; ++o) {
      std::copy_n(pv.begin() + o * n * split.inner, n * split.inner,
                  data.begin() + (o * split.n + offset) * split.inner);
    }
    offset += n;
  }
  std::vector<std::shared_ptr<detail::Node>> handles;
  for (const auto& p : parts) handles.push_back(p.handle());
  return detail::make_op(
      out, std::move(data), parts,
      [handles, offsets, split, ax](detail::Node& self) {
        for (std::size_t k = 0; k < handles.size(); ++k) {
          auto& p = *handles[k];
          if (!p.requires_grad) continue;
          const std::size_t n = p.shape[ax];
          double* gp = p.grad_buffer();
          for (std::size_t o = 0; o < split.outer; ++o) {
            const double* src =
                self.grad.data() + (o * split.n + offsets[k]) * split.inner;
            double* dst = gp + o * n * split.inner;
            for (std::size_t j = 0; j < n * split.inner; ++j) dst[j] += src[j];
          }
        }
      },
      "concat");
}

inline Tensor slice(const Tensor& a, int axis, std::size_t start, std::size_t length) {
  const std::size_t ax = a.normalize_axis(axis);
  if (start + length > a.shape()[ax]) {
    throw Error("slice: [" + std::to_string(start) + ", " +
                std::to_string(start + length) + ") exceeds axis of " +
                to_string(a.shape()));
  }
  Shape out = a.shape();
  out[ax] = length;
  const auto split = detail::split_at(a.shape(), ax);
  std::vector<double> data(numel(out));
  const auto av = a.data();
  for (std::size_t o = 0; o < split.outer; ++o) {
    std::copy_n(av.begin() + (o * split.n + start) * split.inner, length * split.inner,
                data.begin() + o * length * split.inner);
  }
  auto pa = a.handle();
  return detail::make_op(
      out, std::move(data), {&a},
      [pa, split, start, length](detail::Node& self) {
        double* ga = pa->grad_buffer();
        for (std::size_t o = 0; o < split.outer; ++o) {
          const double* src = self.grad.data() + o * length * split.inner;
          double* dst = ga + (o * split.n + start) * split.inner;
          for (std::size_t j = 0; j < length * split.inner; ++j) dst[j] += src[j];
        }
      },
      "slice");
}

// Reductions. Accumulation order is fixed (ascending index).

inline Tensor sum(const Tensor& a, int axis, bool keepdim = true) {
  const std::size_t ax = a.normalize_axis(axis);
  const auto split = detail::split_at(a.shape(), ax);
  Shape out = a.shape();
  if (keepdim) {
    out[ax] = 1;
  } else {
    out.erase(out.begin() + static_cast<std::ptrdiff_t>(ax));
  }
  std::vector<double> data(split.outer * split.inner, 0.0);
  const auto av = a.data();
  for (std::size_t o = 0; o < split.outer; ++o) {
    for (std::size_t k = 0; k < split.n; ++k) {
      const double* src = av.data() + (o * split.n + k) * split.inner;
      double* dst = data.data() + o * split.inner;
      for (std::size_t j = 0; j < split.inner; ++j) dst[j] += src[j];
    }
  }
  auto pa = a.handle();
  return detail::make_op(
      out, std::move(data), {&a},
      [pa, split](detail::Node& self) {
        double* ga = pa->grad_buffer();
        for (std::size_t o = 0; o < split.outer; ++o) {
          const double* g = self.grad.data() + o * split.inner;
          for (std::size_t k = 0; k < split.n; ++k) {
            double* dst = ga + (o * split.n + k) * split.inner;
            for (std::size_t j = 0; j < split.inner; ++j) dst[j] += g[j];
          }
        }
      },
      "sum");
}

inline Tensor mean(const Tensor& a, int axis, bool keepdim = true) {
  const double n = static_cast<double>(a.dim(axis));
  return mul_scalar(sum(a, axis, keepdim), 1.0 / n);
}

inline Tensor sum_all(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  auto pa = a.handle();
  return detail::make_op(
      {}, {total}, {&a},
      [pa](detail::Node& self) {
        double* ga = pa->grad_buffer();
        const double g = self.grad[0];
        for (std::size_t i = 0; i < pa->data.size(); ++i) ga[i] += g;
      },
      "sum_all");
}

inline Tensor mean_all(const Tensor& a) {
  if (a.size() == 0) throw Error("mean_all: empty tensor");
  return mul_scalar(sum_all(a), 1.0 / static_cast<double>(a.size()));
}

inline Tensor softmax(const Tensor& a, int axis) {
  const std::size_t ax = a.normalize_axis(axis);
  const auto split = detail::split_at(a.shape(), ax);
  std::vector<double> data(a.size());
  const auto av = a.data();
  for (std::size_t o = 0; o < split.outer; ++o) {
    for (std::size_t j = 0; j < split.inner; ++j) {
      const std::size_t base = o * split.n * split.inner + j;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < split.n; ++k) mx = std::max(mx, av[base + k * split.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < split.n; ++k) {
        const double e = std::exp(av[base + k * split.inner] - mx);
        data[base + k * split.inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < split.n; ++k) data[base + k * split.inner] /= z;
    }
  }
  auto pa = a.handle();
  return detail::make_op(
      a.shape(), std::move(data), {&a},
      [pa, split](detail::Node& self) {
        double* ga = pa->grad_buffer();
        const auto& y = self.data;
        const auto& g = self.grad;
        for (std::size_t o = 0; o < split.outer; ++o) {
          for (std::size_t j = 0; j < split.inner; ++j) {
            const std::size_t base = o * split.n * split.inner + j;
            double dot = 0.0;
            for (std::size_t k = 0; k < split.n; ++k) {
              const std::size_t i = base + k * split.inner;
              dot += g[i] * y[i];
            }
            for (std::size_t k = 0; k < split.n; ++k) {
              const std::size_t i = base + k * split.inner;
              ga[i] += y[i] * (g[i] - dot);
            }
          }
        }
      },
      "softmax");
}

// Batched matrix product over the trailing two axes; leading axes broadcast.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw Error("matmul: operands need rank >= 2, got " + to_string(a.shape()) +
                " and " + to_string(b.shape()));
  }
  const std::size_t m = a.dim(-2), k = a.dim(-1);
  const std::size_t kb = b.dim(-2), n = b.dim(-1);
  if (k != kb) {
    throw Error("matmul: inner dimensions differ for " + to_string(a.shape()) +
                " and " + to_string(b.shape()));
  }
  const Shape a_batch(a.shape().begin(), a.shape().end() - 2);
  const Shape b_batch(b.shape().begin(), b.shape().end() - 2);
  const Shape out_batch = detail::broadcast_shape(a_batch, b_batch, "matmul");
  std::vector<std::size_t> pairs_a, pairs_b;
  detail::for_each_strided(out_batch, detail::broadcast_strides(a_batch, out_batch),
                           detail::broadcast_strides(b_batch, out_batch),
                           [&](std::size_t, std::size_t ia, std::size_t ib) {
                             pairs_a.push_back(ia);
                             pairs_b.push_back(ib);
                           });
  Shape out = out_batch;
  out.push_back(m);
  out.push_back(n);
  std::vector<double> data(numel(out), 0.0);
  const double* av = a.data().data();
  const double* bv = b.data().data();
  for (std::size_t p = 0; p < pairs_a.size(); ++p) {
    const double* A = av + pairs_a[p] * m * k;
    const double* B = bv + pairs_b[p] * k * n;
    double* C = data.data() + p * m * n;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t t = 0; t < k; ++t) {
        const double aik = A[i * k + t];
        const double* brow = B + t * n;
        double* crow = C + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
      }
    }
  }
  auto pa = a.handle();
  auto pb = b.handle();
  return detail::make_op(
      out, std::move(data), {&a, &b},
      [pa, pb, pairs_a, pairs_b, m, k, n](detail::Node& self) {
        double* ga = pa->requires_grad ? pa->grad_buffer() : nullptr;
        double* gb = pb->requires_grad ? pb->grad_buffer() : nullptr;
        for (std::size_t p = 0; p < pairs_a.size(); ++p) {
          const double* A = pa->data.data() + pairs_a[p] * m * k;
          const double* B = pb->data.data() + pairs_b[p] * k * n;
          const double* G = self.grad.data() + p * m * n;
          if (ga) {
            double* GA = ga + pairs_a[p] * m * k;
            for (std::size_t i = 0; i < m; ++i) {
              for (std::size_t t = 0; t < k; ++t) {
                double acc = 0.0;
                for (std::size_t j = 0; j < n; ++j) acc += G[i * n + j] * B[t * n + j];
                GA[i * k + t] += acc;
              }
            }
          }
          if (gb) {
            double* GB = gb + pairs_b[p] * k * n;
            for (std::size_t i = 0; i < m; ++i) {
              for (std::size_t t = 0; t < k; ++t) {
                const double aik = A[i * k + t];
                for (std::size_t j = 0; j < n; ++j) GB[t * n + j] += aik * G[i * n + j];
              }
            }
          }
        }
      },
      "matmul");
}

// 1-D convolution with circular padding.
// x: [M, C_in, W], weight: [C_out, C_in, K] (K odd), bias: [C_out] -> [M, C_out, W].
// The kernel slides along the last axis; channels are the middle axis.
inline Tensor conv1d_circular(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.rank() != 3 || weight.rank() != 3 || bias.rank() != 1) {
    throw Error("conv1d_circular: expected x[M,C,W], w[O,C,K], b[O], got " +
                to_string(x.shape()) + ", " + to_string(weight.shape()) + ", " +
                to_string(bias.shape()));
  }
  const std::size_t M = x.dim(0), C = x.dim(1), W = x.dim(2);
  const std::size_t O = weight.dim(0), K = weight.dim(2);
  if (weight.dim(1) != C || bias.dim(0) != O || K % 2 == 0) {
    throw Error("conv1d_circular: incompatible shapes " + to_string(x.shape()) +
                " and " + to_string(weight.shape()));
  }
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(K / 2);
  const auto wrap = [W](std::ptrdiff_t i) {
    const auto w = static_cast<std::ptrdiff_t>(W);
    return static_cast<std::size_t>(((i % w) + w) % w);
  };
  std::vector<double> data(M * O * W);
  const auto xv = x.data();
  const auto wv = weight.data();
  const auto bv = bias.data();
  for (std::size_t mi = 0; mi < M; ++mi) {
    for (std::size_t o = 0; o < O; ++o) {
      for (std::size_t t = 0; t < W; ++t) {
        double acc = bv[o];
        for (std::size_t c = 0; c < C; ++c) {
          for (std::size_t q = 0; q < K; ++q) {
            const std::size_t src =
                wrap(static_cast<std::ptrdiff_t>(t + q) - pad);
            acc += wv[(o * C + c) * K + q] * xv[(mi * C + c) * W + src];
          }
        }
        data[(mi * O + o) * W + t] = acc;
      }
    }
  }
  auto px = x.handle();
  auto pw = weight.handle();
  auto pb = bias.handle();
  return detail::make_op(
      {M, O, W}, std::move(data), {&x, &weight, &bias},
      [px, pw, pb, M, C, W, O, K, pad, wrap](detail::Node& self) {
        double* gx = px->requires_grad ? px->grad_buffer() : nullptr;
        double* gw = pw->requires_grad ? pw->grad_buffer() : nullptr;
        double* gb = pb->requires_grad ? pb->grad_buffer() : nullptr;
        for (std::size_t mi = 0; mi < M; ++mi) {
          for (std::size_t o = 0; o < O; ++o) {
            for (std::size_t t = 0; t < W; ++t) {
              const double g = self.grad[(mi * O + o) * W + t];
              if (gb) gb[o] += g;
              for (std::size_t c = 0; c < C; ++c) {
                for (std::size_t q = 0; q < K; ++q) {
                  const std::size_t src =
                      wrap(static_cast<std::ptrdiff_t>(t + q) - pad);
                  if (gw) gw[(o * C + c) * K + q] += g * px->data[(mi * C + c) * W + src];
                  if (gx) gx[(mi * C + c) * W + src] += g * pw->data[(o * C + c) * K + q];
                }
              }
            }
          }
        }
      },
      "conv1d_circular");
}

}  // namespace dran
