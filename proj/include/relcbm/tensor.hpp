#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "relcbm/error.hpp"

namespace relcbm::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated on demand
  bool requires_grad = false;
  bool tie = false;  // a max/min reduction met an exact tie in the forward pass
  const char* op = "leaf";
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

/// Handle to a node of the computation graph. Copies share the node.
class Tensor {
 public:
  Tensor() : node_(std::make_shared<Node>()) { node_->shape = {0}; }

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false) : node_(std::make_shared<Node>()) {
    if (numel(shape) != data.size()) {
      throw Error(ErrorCode::kShapeMismatch, "data length " + std::to_string(data.size()) +
                                                 " does not match shape " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(data);
    node_->requires_grad = requires_grad;
  }

  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }
  static Tensor full(Shape shape, double v) {
    auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v));
  }
  static Tensor scalar(double v, bool requires_grad = false) { return Tensor({}, {v}, requires_grad); }
  static Tensor vector(std::vector<double> v, bool requires_grad = false) {
    auto n = v.size();
    return Tensor({n}, std::move(v), requires_grad);
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v, bool requires_grad = false) {
    return Tensor({rows, cols}, std::move(v), requires_grad);
  }

  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->value.size(); }
  std::size_t dim() const { return node_->shape.size(); }
  std::size_t rows() const { return dim() == 0 ? 1 : node_->shape[0]; }
  std::size_t cols() const { return dim() < 2 ? 1 : node_->shape[1]; }

  std::span<const double> data() const { return node_->value; }
  std::span<double> mutable_data() { return node_->value; }
  double operator[](std::size_t i) const { return node_->value[i]; }
  double at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }
  double item() const {
    if (size() != 1) throw Error(ErrorCode::kNotScalar, "item() on shape " + shape_str(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }
  bool has_grad() const { return node_->grad.size() == node_->value.size() && !node_->value.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

  // Detached copy: same values, no graph history.
  Tensor detach() const { return Tensor(shape(), node_->value, false); }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

// Builds a result node; a graph edge is recorded only when a parent requires grad.
inline Tensor make_result(Shape shape, std::vector<double> value, std::vector<Tensor> parents, const char* op,
                          std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool any = std::any_of(parents.begin(), parents.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (any) {
    node->requires_grad = true;
    for (auto& p : parents) node->parents.push_back(p.node());
    node->backward = std::move(backward);
  }
  return Tensor(node);
}

namespace detail {

inline void accumulate(const NodePtr& parent, std::size_t i, double g) {
  if (!parent->requires_grad) return;
  parent->ensure_grad()[i] += g;
}

// Broadcast modes for binary elementwise ops: equal shapes, scalar rhs, or a
// 1xN / N row vector against an MxN lhs.
enum class Bcast { kSame, kScalar, kRow };

inline Bcast broadcast_mode(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Bcast::kSame;
  if (b.size() == 1) return Bcast::kScalar;
  if (a.dim() == 2 && b.size() == a.cols() &&
      ((b.dim() == 2 && b.rows() == 1) || b.dim() == 1)) {
    return Bcast::kRow;
  }
  throw Error(ErrorCode::kShapeMismatch, std::string(op) + " " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

inline std::size_t bindex(Bcast m, std::size_t i, std::size_t cols) {
  switch (m) {
    case Bcast::kSame: return i;
    case Bcast::kScalar: return 0;
    case Bcast::kRow: return i % cols;
  }
  return i;
}

struct AxisSplit {
  std::size_t outer, n, inner;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis, const char* op) {
  if (axis >= s.size()) {
    throw Error(ErrorCode::kShapeMismatch, std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                                               shape_str(s));
  }
  AxisSplit r{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

inline Shape drop_axis(const Shape& s, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i != axis) out.push_back(s[i]);
  }
  return out;
}

template <typename F, typename DA, typename DB>
Tensor binary(const Tensor& a, const Tensor& b, const char* op, F f, DA da, DB db) {
  const Bcast mode = broadcast_mode(a, b, op);
  const std::size_t cols = a.cols();
  std::vector<double> out(a.size());
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i], bv[bindex(mode, i, cols)]);
  return make_result(a.shape(), std::move(out), {a, b}, op, [mode, cols, da, db](Node& self) {
    const auto& pa = self.parents[0];
    const auto& pb = self.parents[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const std::size_t j = bindex(mode, i, cols);
      const double x = pa->value[i], y = pb->value[j];
      if (pa->requires_grad) pa->ensure_grad()[i] += self.grad[i] * da(x, y);
      if (pb->requires_grad) pb->ensure_grad()[j] += self.grad[i] * db(x, y);
    }
  });
}

template <typename F, typename D>
Tensor unary(const Tensor& a, const char* op, F f, D d) {
  std::vector<double> out(a.size());
  auto av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  return make_result(a.shape(), std::move(out), {a}, op, [d](Node& self) {
    const auto& pa = self.parents[0];
    auto& g = pa->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * d(pa->value[i], self.value[i]);
  });
}

}  // namespace detail

// ---- elementwise ------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

// Elementwise max/min of two tensors; ties route the gradient to `a`.
inline Tensor maximum(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "maximum", [](double x, double y) { return x >= y ? x : y; },
      [](double x, double y) { return x >= y ? 1.0 : 0.0; }, [](double x, double y) { return x >= y ? 0.0 : 1.0; });
}

inline Tensor minimum(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "minimum", [](double x, double y) { return x <= y ? x : y; },
      [](double x, double y) { return x <= y ? 1.0 : 0.0; }, [](double x, double y) { return x <= y ? 0.0 : 1.0; });
}

inline Tensor scale(const Tensor& a, double c) {
  return detail::unary(
      a, "scale", [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  return detail::unary(
      a, "add_scalar", [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

// 1 - x
inline Tensor one_minus(const Tensor& a) {
  return detail::unary(
      a, "one_minus", [](double x) { return 1.0 - x; }, [](double, double) { return -1.0; });
}

inline double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary(
      a, "sigmoid", sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

inline Tensor tanh(const Tensor& a) {
  return detail::unary(
      a, "tanh", [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Tensor relu(const Tensor& a) {
  return detail::unary(
      a, "relu", [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

inline Tensor log(const Tensor& a) {
  return detail::unary(
      a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

// Gradient passes only where the input lies inside [lo, hi].
inline Tensor clamp(const Tensor& a, double lo, double hi) {
  return detail::unary(
      a, "clamp", [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

/// Threshold at 0.5 in the forward pass, identity gradient in the backward pass.
inline Tensor straight_through_threshold(const Tensor& a, double threshold = 0.5) {
  return detail::unary(
      a, "harden", [threshold](double x) { return x > threshold ? 1.0 : 0.0; }, [](double, double) { return 1.0; });
}

// ---- structural ---------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw Error(ErrorCode::kShapeMismatch, "reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  std::vector<double> v(a.data().begin(), a.data().end());
  return make_result(std::move(shape), std::move(v), {a}, "reshape", [](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.dim() != 2 || b.dim() != 2 || a.cols() != b.rows()) {
    throw Error(ErrorCode::kShapeMismatch, "matmul " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(m * n, 0.0);
  const double* A = a.data().data();
  const double* B = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      if (av == 0.0) continue;
      const double* brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return make_result({m, n}, std::move(out), {a, b}, "matmul", [m, k, n](Node& self) {
    const auto& pa = self.parents[0];
    const auto& pb = self.parents[1];
    const double* G = self.grad.data();
    if (pa->requires_grad) {
      auto& ga = pa->ensure_grad();
      const double* B = pb->value.data();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          const double* brow = B + p * n;
          const double* grow = G + i * n;
          for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
          ga[i * k + p] += s;
        }
      }
    }
    if (pb->requires_grad) {
      auto& gb = pb->ensure_grad();
      const double* A = pa->value.data();
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = G + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const double av = A[i * k + p];
          if (av == 0.0) continue;
          double* gbrow = gb.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
        }
      }
    }
  });
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw Error(ErrorCode::kShapeMismatch, "concat of zero tensors");
  Shape out_shape = parts[0].shape();
  if (axis >= out_shape.size()) throw Error(ErrorCode::kShapeMismatch, "concat axis out of range");
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.dim() != parts[0].dim()) throw Error(ErrorCode::kShapeMismatch, "concat rank mismatch");
    for (std::size_t d = 0; d < p.dim(); ++d) {
      if (d != axis && p.shape()[d] != parts[0].shape()[d]) {
        throw Error(ErrorCode::kShapeMismatch, "concat " + shape_str(parts[0].shape()) + " with " +
                                                   shape_str(p.shape()) + " on axis " + std::to_string(axis));
      }
    }
    out_shape[axis] += p.shape()[axis];
  }
  const auto split = detail::split_axis(out_shape, axis, "concat");
  std::vector<double> out(numel(out_shape));
  std::vector<std::size_t> widths;
  for (const auto& p : parts) widths.push_back(p.shape()[axis] * split.inner);
  const std::size_t row = split.n * split.inner;
  std::size_t offset = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    auto v = parts[pi].data();
    for (std::size_t o = 0; o < split.outer; ++o) {
      std::copy_n(v.begin() + o * widths[pi], widths[pi], out.begin() + o * row + offset);
    }
    offset += widths[pi];
  }
  return make_result(std::move(out_shape), std::move(out), parts, "concat", [widths, split, row](Node& self) {
    std::size_t off = 0;
    for (std::size_t pi = 0; pi < self.parents.size(); ++pi) {
      const auto& p = self.parents[pi];
      if (p->requires_grad) {
        auto& g = p->ensure_grad();
        for (std::size_t o = 0; o < split.outer; ++o) {
          for (std::size_t i = 0; i < widths[pi]; ++i) g[o * widths[pi] + i] += self.grad[o * row + off + i];
        }
      }
      off += widths[pi];
    }
  });
}

/// out.flat[i] = src.flat[index[i]]; gradients scatter-add back.
inline Tensor gather(const Tensor& src, std::vector<std::size_t> index, Shape out_shape) {
  if (numel(out_shape) != index.size()) {
    throw Error(ErrorCode::kShapeMismatch, "gather: " + std::to_string(index.size()) + " indices for shape " +
                                               shape_str(out_shape));
  }
  std::vector<double> out(index.size());
  auto v = src.data();
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= v.size()) throw Error(ErrorCode::kShapeMismatch, "gather index out of range");
    out[i] = v[index[i]];
  }
  auto idx = std::make_shared<std::vector<std::size_t>>(std::move(index));
  return make_result(std::move(out_shape), std::move(out), {src}, "gather", [idx](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < idx->size(); ++i) g[(*idx)[i]] += self.grad[i];
  });
}

/// Rows of a 2-D tensor selected by index.
inline Tensor gather_rows(const Tensor& src, const std::vector<std::size_t>& rows) {
  if (src.dim() != 2) throw Error(ErrorCode::kShapeMismatch, "gather_rows needs a matrix");
  const std::size_t c = src.cols();
  std::vector<std::size_t> flat;
  flat.reserve(rows.size() * c);
  for (auto r : rows) {
    for (std::size_t j = 0; j < c; ++j) flat.push_back(r * c + j);
  }
  return gather(src, std::move(flat), {rows.size(), c});
}

/// Replaces the listed flat positions with constants; no gradient reaches them.
inline Tensor overwrite(const Tensor& src, const std::vector<std::size_t>& index, const std::vector<double>& values) {
  std::vector<double> out(src.data().begin(), src.data().end());
  std::vector<char> mask(out.size(), 0);
  for (std::size_t i = 0; i < index.size(); ++i) {
    out[index[i]] = values[i];
    mask[index[i]] = 1;
  }
  return make_result(src.shape(), std::move(out), {src}, "overwrite", [mask](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (!mask[i]) g[i] += self.grad[i];
    }
  });
}

// ---- reductions ---------------------------------------------------------------

namespace detail {

// Extreme-value reduction along an axis; gradient is routed to the selected
// element, ties broken by the lowest flat index.
inline Tensor extreme_reduce(const Tensor& a, std::size_t axis, bool want_max, const char* op) {
  const auto sp = split_axis(a.shape(), axis, op);
  if (sp.n == 0) throw Error(ErrorCode::kShapeMismatch, std::string(op) + " over an empty axis");
  std::vector<double> out(sp.outer * sp.inner);
  std::vector<std::size_t> arg(out.size());
  bool tie = false;
  auto v = a.data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      std::size_t best = o * sp.n * sp.inner + in;
      for (std::size_t k = 1; k < sp.n; ++k) {
        const std::size_t idx = (o * sp.n + k) * sp.inner + in;
        if (want_max ? v[idx] > v[best] : v[idx] < v[best]) {
          best = idx;
        }
      }
      for (std::size_t k = 0; k < sp.n; ++k) {
        const std::size_t idx = (o * sp.n + k) * sp.inner + in;
        if (idx != best && v[idx] == v[best]) tie = true;
      }
      out[o * sp.inner + in] = v[best];
      arg[o * sp.inner + in] = best;
    }
  }
  auto t = make_result(drop_axis(a.shape(), axis), std::move(out), {a}, op, [arg](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < arg.size(); ++i) g[arg[i]] += self.grad[i];
  });
  t.node()->tie = tie;
  return t;
}

}  // namespace detail

inline Tensor max_reduce(const Tensor& a, std::size_t axis) { return detail::extreme_reduce(a, axis, true, "max_reduce"); }
inline Tensor min_reduce(const Tensor& a, std::size_t axis) { return detail::extreme_reduce(a, axis, false, "min_reduce"); }

inline Tensor sum_reduce(const Tensor& a, std::size_t axis) {
  const auto sp = detail::split_axis(a.shape(), axis, "sum_reduce");
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  auto v = a.data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t k = 0; k < sp.n; ++k) {
      for (std::size_t in = 0; in < sp.inner; ++in) out[o * sp.inner + in] += v[(o * sp.n + k) * sp.inner + in];
    }
  }
  return make_result(detail::drop_axis(a.shape(), axis), std::move(out), {a}, "sum_reduce", [sp](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t k = 0; k < sp.n; ++k) {
        for (std::size_t in = 0; in < sp.inner; ++in) g[(o * sp.n + k) * sp.inner + in] += self.grad[o * sp.inner + in];
      }
    }
  });
}

inline Tensor mean_reduce(const Tensor& a, std::size_t axis) {
  const auto n = detail::split_axis(a.shape(), axis, "mean_reduce").n;
  if (n == 0) throw Error(ErrorCode::kShapeMismatch, "mean_reduce over an empty axis");
  return scale(sum_reduce(a, axis), 1.0 / static_cast<double>(n));
}

// Sum of all elements as a scalar.
inline Tensor sum_all(const Tensor& a) { return sum_reduce(reshape(a, {a.size()}), 0); }

inline Tensor mean_all(const Tensor& a) {
  if (a.size() == 0) throw Error(ErrorCode::kShapeMismatch, "mean of an empty tensor");
  return scale(sum_all(a), 1.0 / static_cast<double>(a.size()));
}

/// Row-wise softmax over the last axis.
inline Tensor softmax(const Tensor& a) {
  if (a.dim() == 0) throw Error(ErrorCode::kShapeMismatch, "softmax of a scalar");
  const std::size_t c = a.shape().back();
  const std::size_t r = a.size() / std::max<std::size_t>(c, 1);
  std::vector<double> out(a.size());
  auto v = a.data();
  for (std::size_t i = 0; i < r; ++i) {
    double m = v[i * c];
    for (std::size_t j = 1; j < c; ++j) m = std::max(m, v[i * c + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += (out[i * c + j] = std::exp(v[i * c + j] - m));
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= s;
  }
  return make_result(a.shape(), std::move(out), {a}, "softmax", [r, c](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += self.grad[i * c + j] * self.value[i * c + j];
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.value[i * c + j] * (self.grad[i * c + j] - dot);
    }
  });
}

/// Divides each row of a non-negative matrix by its sum.
inline Tensor normalize_rows(const Tensor& a) {
  if (a.dim() != 2) throw Error(ErrorCode::kShapeMismatch, "normalize_rows needs a matrix");
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(a.size());
  std::vector<double> sums(r, 0.0);
  auto v = a.data();
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) sums[i] += v[i * c + j];
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = v[i * c + j] / sums[i];
  }
  return make_result(a.shape(), std::move(out), {a}, "normalize_rows", [r, c, sums](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += self.grad[i * c + j] * self.value[i * c + j];
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += (self.grad[i * c + j] - dot) / sums[i];
    }
  });
}

/// Max or min over consecutive segments of a vector; `offsets` has one more
/// entry than there are segments. Gradient goes to the selected element.
inline Tensor segment_reduce(const Tensor& a, const std::vector<std::size_t>& offsets, bool want_max) {
  const std::size_t nseg = offsets.empty() ? 0 : offsets.size() - 1;
  if (!offsets.empty() && offsets.back() != a.size()) {
    throw Error(ErrorCode::kShapeMismatch, "segment offsets do not cover the input");
  }
  std::vector<double> out(nseg);
  std::vector<std::size_t> arg(nseg);
  bool tie = false;
  auto v = a.data();
  for (std::size_t s = 0; s < nseg; ++s) {
    if (offsets[s + 1] <= offsets[s]) throw Error(ErrorCode::kEmptyGroundingSet, "segment " + std::to_string(s));
    std::size_t best = offsets[s];
    for (std::size_t i = offsets[s] + 1; i < offsets[s + 1]; ++i) {
      if (want_max ? v[i] > v[best] : v[i] < v[best]) best = i;
    }
    for (std::size_t i = offsets[s]; i < offsets[s + 1]; ++i) {
      if (i != best && v[i] == v[best]) tie = true;
    }
    out[s] = v[best];
    arg[s] = best;
  }
  auto t = make_result({nseg}, std::move(out), {a}, want_max ? "segment_max" : "segment_min", [arg](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < arg.size(); ++i) g[arg[i]] += self.grad[i];
  });
  t.node()->tie = tie;
  return t;
}

// ---- primitive catalog ------------------------------------------------------

enum class Primitive {
  kAdd,
  kSub,
  kMul,
  kMatmul,
  kConcat,
  kSigmoid,
  kTanh,
  kRelu,
  kSoftmax,
  kMaxReduce,
  kMinReduce,
  kSumReduce,
  kMeanReduce,
  kClamp,
};

struct PrimitiveArgs {
  std::size_t axis = 0;
  double lo = 0.0;
  double hi = 1.0;
};

inline Tensor apply_primitive(Primitive op, const std::vector<Tensor>& in, PrimitiveArgs args = {}) {
  auto need = [&](std::size_t n) {
    if (in.size() != n) {
      throw Error(ErrorCode::kShapeMismatch, "primitive expects " + std::to_string(n) + " inputs, got " +
                                                 std::to_string(in.size()));
    }
  };
  switch (op) {
    case Primitive::kAdd: need(2); return add(in[0], in[1]);
    case Primitive::kSub: need(2); return sub(in[0], in[1]);
    case Primitive::kMul: need(2); return mul(in[0], in[1]);
    case Primitive::kMatmul: need(2); return matmul(in[0], in[1]);
    case Primitive::kConcat: return concat(in, args.axis);
    case Primitive::kSigmoid: need(1); return sigmoid(in[0]);
    case Primitive::kTanh: need(1); return tanh(in[0]);
    case Primitive::kRelu: need(1); return relu(in[0]);
    case Primitive::kSoftmax: need(1); return softmax(in[0]);
    case Primitive::kMaxReduce: need(1); return max_reduce(in[0], args.axis);
    case Primitive::kMinReduce: need(1); return min_reduce(in[0], args.axis);
    case Primitive::kSumReduce: need(1); return sum_reduce(in[0], args.axis);
    case Primitive::kMeanReduce: need(1); return mean_reduce(in[0], args.axis);
    case Primitive::kClamp: need(1); return clamp(in[0], args.lo, args.hi);
  }
  throw Error(ErrorCode::kShapeMismatch, "unknown primitive");
}

// ---- reverse pass -------------------------------------------------------------

namespace detail {

inline std::vector<Node*> topo_order(Node* root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;  // parents before children
}

}  // namespace detail

/// Accumulates d(root)/d(t) into every reachable tensor that requires grad.
inline void backward(const Tensor& root) {
  if (root.size() != 1) throw Error(ErrorCode::kNotScalar, "backward from shape " + shape_str(root.shape()));
  if (!root.requires_grad()) return;
  auto order = detail::topo_order(root.node().get());
  // Intermediate nodes start from zero each pass; leaves keep accumulating.
  for (Node* n : order) {
    if (n->backward) n->grad.assign(n->value.size(), 0.0);
  }
  root.node()->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward) n->backward(*n);
  }
}

/// True when any max/min reduction reachable from `root` met an exact tie.
inline bool has_tie(const Tensor& root) {
  std::vector<Node*> stack{root.node().get()};
  std::unordered_set<Node*> seen{root.node().get()};
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    if (n->tie) return true;
    for (const auto& p : n->parents) {
      if (seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  return false;
}

}  // namespace relcbm::ad
