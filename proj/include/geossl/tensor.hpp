#pragma once

// Define-by-run reverse-mode differentiation over dense double tensors.
//
// A Tensor is a shared handle to a graph node. Every forward op records its
// inputs and a backward rule on the output node whenever any input requires a
// gradient; backward() walks the reachable subgraph in reverse topological
// order and accumulates gradients into every node that requires one.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <new>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace geossl {

class TensorError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// 64-byte aligned storage keeps the vectorized kernel paths identical from run
// to run, which the reproducibility guarantees rely on.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() noexcept = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), kAlign));
  }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;
using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace detail {

struct Node {
  Shape shape;
  Buffer data;
  Buffer grad;
  bool requires_grad = false;
  bool consumed = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

class Tensor {
public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Buffer data(shape_numel(shape), 0.0);
    return make(std::move(shape), std::move(data), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    Buffer data(shape_numel(shape), value);
    return make(std::move(shape), std::move(data), requires_grad);
  }

  static Tensor from(Shape shape, std::span<const double> values, bool requires_grad = false) {
    if (values.size() != shape_numel(shape))
      throw TensorError("data length " + std::to_string(values.size()) +
                        " does not match shape " + shape_str(shape));
    Buffer data(values.begin(), values.end());
    return make(std::move(shape), std::move(data), requires_grad);
  }

  static Tensor from(Shape shape, std::initializer_list<double> values, bool requires_grad = false) {
    return from(std::move(shape), std::span<const double>(values.begin(), values.size()),
                requires_grad);
  }

  static Tensor scalar(double v) { return from({1}, {v}); }

  static Tensor make(Shape shape, Buffer data, bool requires_grad) {
    if (data.size() != shape_numel(shape))
      throw TensorError("data length does not match shape " + shape_str(shape));
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const double> data() const { return node_->data; }
  // Only meaningful on leaves; mutating an interior node invalidates its graph.
  std::span<double> mutable_data() { return node_->data; }

  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<const double> grad() const {
    if (!has_grad()) throw TensorError("tensor has no gradient");
    return node_->grad;
  }

  double item() const {
    if (numel() != 1) throw TensorError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  double operator[](std::size_t i) const { return node_->data.at(i); }

  void zero_grad() { node_->grad.clear(); }

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

private:
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  friend Tensor record(const char*, Shape, Buffer, std::vector<Tensor>,
                       std::function<void(detail::Node&)>);

  std::shared_ptr<detail::Node> node_;
};

// Creates an op output. The backward rule is attached only when some input
// requires a gradient.
inline Tensor record(const char* op, Shape shape, Buffer data, std::vector<Tensor> inputs,
                     std::function<void(detail::Node&)> backward_fn) {
  for (double v : data)
    if (!std::isfinite(v)) throw TensorError(std::string("non-finite output in ") + op);
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  bool needs = false;
  for (const auto& t : inputs) needs = needs || t.requires_grad();
  if (needs) {
    n->requires_grad = true;
    for (auto& t : inputs) n->parents.push_back(t.node_ptr());
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(n));
}

// Blocks gradient flow: the result shares values with x but is a fresh leaf.
inline Tensor stop_gradient(const Tensor& x) {
  return Tensor::make(x.shape(), Buffer(x.data().begin(), x.data().end()), false);
}

inline void backward(const Tensor& loss) {
  if (loss.numel() != 1)
    throw TensorError("backward() requires a scalar loss, got " + shape_str(loss.shape()));
  detail::Node* root = loss.node();
  if (root->consumed) throw TensorError("backward() called twice without reset_graph()");
  root->consumed = true;
  if (!root->requires_grad) return;

  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  // iterative post-order DFS
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      detail::Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (auto* n : order) n->ensure_grad();
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
}

// Clears gradients across the graph under `loss` so backward() may run again.
inline void reset_graph(const Tensor& loss) {
  std::vector<detail::Node*> stack{loss.node()};
  std::unordered_set<detail::Node*> seen{loss.node()};
  while (!stack.empty()) {
    auto* n = stack.back();
    stack.pop_back();
    n->grad.clear();
    n->consumed = false;
    for (auto& p : n->parents)
      if (seen.insert(p.get()).second) stack.push_back(p.get());
  }
}

// ---------------------------------------------------------------------------
// Elementwise

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw TensorError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
}

template <class Fwd, class DA, class DB>
Tensor binary(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, DA da, DB db) {
  require_same_shape(a, b, name);
  Buffer out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i], y[i]);
  Node* an = a.node();
  Node* bn = b.node();
  return record(name, a.shape(), std::move(out), {a, b}, [an, bn, da, db](Node& self) {
    if (an->requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        an->grad[i] += self.grad[i] * da(an->data[i], bn->data[i]);
    if (bn->requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        bn->grad[i] += self.grad[i] * db(an->data[i], bn->data[i]);
  });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  for (double v : b.data())
    if (v == 0.0) throw TensorError("div: division by zero");
  return detail::binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; }, [](double x, double y) { return -x / (y * y); });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

namespace detail {

template <class Fwd, class Deriv>
Tensor unary(const char* name, const Tensor& x, Fwd fwd, Deriv deriv) {
  Buffer out(x.numel());
  auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(in[i]);
  Node* xn = x.node();
  return record(name, x.shape(), std::move(out), {x}, [xn, deriv](Node& self) {
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      xn->grad[i] += self.grad[i] * deriv(xn->data[i], self.data[i]);
  });
}

}  // namespace detail

inline Tensor scale(const Tensor& x, double s) {
  return detail::unary(
      "scale", x, [s](double v) { return v * s; }, [s](double, double) { return s; });
}

inline Tensor add_scalar(const Tensor& x, double s) {
  return detail::unary(
      "add_scalar", x, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

inline Tensor div_scalar(const Tensor& x, double s) {
  if (s == 0.0) throw TensorError("div_scalar: division by zero");
  return scale(x, 1.0 / s);
}

inline Tensor operator*(const Tensor& x, double s) { return scale(x, s); }
inline Tensor operator*(double s, const Tensor& x) { return scale(x, s); }
inline Tensor operator/(const Tensor& x, double s) { return div_scalar(x, s); }
inline Tensor operator+(const Tensor& x, double s) { return add_scalar(x, s); }
inline Tensor operator-(const Tensor& x) { return scale(x, -1.0); }

inline Tensor relu(const Tensor& x) {
  return detail::unary(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Tensor exp(const Tensor& x) {
  return detail::unary(
      "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& x) {
  return detail::unary(
      "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw TensorError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  Buffer out(x.data().begin(), x.data().end());
  detail::Node* xn = x.node();
  return record("reshape", std::move(shape), std::move(out), {x}, [xn](detail::Node& self) {
    for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
  });
}

namespace detail {

// Views an axis of `shape` as [outer, extent, inner].
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size())
    throw TensorError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                      shape_str(shape));
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace detail

// Half-open range [begin, end) along `axis`.
inline Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  auto s = detail::split_axis(x.shape(), axis, "slice");
  if (begin >= end || end > s.extent)
    throw TensorError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                      ") invalid for extent " + std::to_string(s.extent));
  Shape shape = x.shape();
  shape[axis] = end - begin;
  const std::size_t len = (end - begin) * s.inner;
  Buffer out(s.outer * len);
  auto in = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(in.begin() + (o * s.extent + begin) * s.inner, len, out.begin() + o * len);
  detail::Node* xn = x.node();
  return record("slice", std::move(shape), std::move(out), {x},
                [xn, s, begin, len](detail::Node& self) {
                  for (std::size_t o = 0; o < s.outer; ++o) {
                    double* dst = xn->grad.data() + (o * s.extent + begin) * s.inner;
                    const double* src = self.grad.data() + o * len;
                    for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
                  }
                });
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw TensorError("concat: no inputs");
  Shape shape = parts[0].shape();
  if (axis >= shape.size()) throw TensorError("concat: axis out of range");
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape a = p.shape(), b = shape;
    if (a.size() != b.size()) throw TensorError("concat: rank mismatch");
    a[axis] = b[axis] = 0;
    if (a != b)
      throw TensorError("concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                        shape_str(shape));
    total += p.dim(axis);
  }
  shape[axis] = total;
  auto s = detail::split_axis(shape, axis, "concat");
  Buffer out(shape_numel(shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t len = p.dim(axis) * s.inner;
    auto in = p.data();
    for (std::size_t o = 0; o < s.outer; ++o)
      std::copy_n(in.begin() + o * len, len, out.begin() + (o * s.extent + off) * s.inner);
    off += p.dim(axis);
  }
  std::vector<detail::Node*> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return record("concat", std::move(shape), std::move(out), parts,
                [nodes, offsets, s](detail::Node& self) {
                  for (std::size_t k = 0; k < nodes.size(); ++k) {
                    detail::Node* pn = nodes[k];
                    if (!pn->requires_grad) continue;
                    const std::size_t ext = pn->data.size() / (s.outer * s.inner);
                    const std::size_t len = ext * s.inner;
                    for (std::size_t o = 0; o < s.outer; ++o) {
                      const double* src =
                          self.grad.data() + (o * s.extent + offsets[k]) * s.inner;
                      double* dst = pn->grad.data() + o * len;
                      for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
                    }
                  }
                });
}

inline Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) throw TensorError("transpose: expects a 2-D tensor");
  const std::size_t r = x.dim(0), c = x.dim(1);
  Buffer out(x.numel());
  auto in = x.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = in[i * c + j];
  detail::Node* xn = x.node();
  return record("transpose", {c, r}, std::move(out), {x}, [xn, r, c](detail::Node& self) {
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) xn->grad[i * c + j] += self.grad[j * r + i];
  });
}

// out.flat[k] = x.flat[index[k]]; gradients scatter-add back.
inline Tensor gather(const Tensor& x, std::vector<std::size_t> index, Shape shape) {
  if (index.size() != shape_numel(shape)) throw TensorError("gather: index/shape mismatch");
  Buffer out(index.size());
  auto in = x.data();
  for (std::size_t k = 0; k < index.size(); ++k) {
    if (index[k] >= in.size()) throw TensorError("gather: index out of range");
    out[k] = in[index[k]];
  }
  detail::Node* xn = x.node();
  return record("gather", std::move(shape), std::move(out), {x},
                [xn, index = std::move(index)](detail::Node& self) {
                  for (std::size_t k = 0; k < index.size(); ++k)
                    xn->grad[index[k]] += self.grad[k];
                });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  detail::Node* xn = x.node();
  return record("sum", {1}, Buffer{acc}, {x}, [xn](detail::Node& self) {
    const double g = self.grad[0];
    for (auto& v : xn->grad) v += g;
  });
}

inline Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw TensorError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

// Sums out `axis`, keeping it with extent 1.
inline Tensor sum(const Tensor& x, std::size_t axis) {
  auto s = detail::split_axis(x.shape(), axis, "sum");
  Shape shape = x.shape();
  shape[axis] = 1;
  Buffer out(s.outer * s.inner, 0.0);
  auto in = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t e = 0; e < s.extent; ++e)
      for (std::size_t i = 0; i < s.inner; ++i)
        out[o * s.inner + i] += in[(o * s.extent + e) * s.inner + i];
  detail::Node* xn = x.node();
  return record("sum_axis", std::move(shape), std::move(out), {x}, [xn, s](detail::Node& self) {
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t e = 0; e < s.extent; ++e)
        for (std::size_t i = 0; i < s.inner; ++i)
          xn->grad[(o * s.extent + e) * s.inner + i] += self.grad[o * s.inner + i];
  });
}

inline Tensor mean(const Tensor& x, std::size_t axis) {
  auto s = detail::split_axis(x.shape(), axis, "mean");
  return scale(sum(x, axis), 1.0 / static_cast<double>(s.extent));
}

// ---------------------------------------------------------------------------
// Normalizations along an axis

inline Tensor softmax(const Tensor& x, std::size_t axis) {
  auto s = detail::split_axis(x.shape(), axis, "softmax");
  Buffer out(x.numel());
  auto in = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      double mx = -INFINITY;
      for (std::size_t e = 0; e < s.extent; ++e) mx = std::max(mx, in[base + e * s.inner]);
      double z = 0.0;
      for (std::size_t e = 0; e < s.extent; ++e) {
        const double v = std::exp(in[base + e * s.inner] - mx);
        out[base + e * s.inner] = v;
        z += v;
      }
      for (std::size_t e = 0; e < s.extent; ++e) out[base + e * s.inner] /= z;
    }
  detail::Node* xn = x.node();
  return record("softmax", x.shape(), std::move(out), {x}, [xn, s](detail::Node& self) {
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.extent * s.inner + i;
        double dot = 0.0;
        for (std::size_t e = 0; e < s.extent; ++e)
          dot += self.grad[base + e * s.inner] * self.data[base + e * s.inner];
        for (std::size_t e = 0; e < s.extent; ++e) {
          const std::size_t k = base + e * s.inner;
          xn->grad[k] += self.data[k] * (self.grad[k] - dot);
        }
      }
  });
}

inline Tensor log_softmax(const Tensor& x, std::size_t axis) {
  auto s = detail::split_axis(x.shape(), axis, "log_softmax");
  Buffer out(x.numel());
  auto in = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      double mx = -INFINITY;
      for (std::size_t e = 0; e < s.extent; ++e) mx = std::max(mx, in[base + e * s.inner]);
      double z = 0.0;
      for (std::size_t e = 0; e < s.extent; ++e) z += std::exp(in[base + e * s.inner] - mx);
      const double lz = mx + std::log(z);
      for (std::size_t e = 0; e < s.extent; ++e)
        out[base + e * s.inner] = in[base + e * s.inner] - lz;
    }
  detail::Node* xn = x.node();
  return record("log_softmax", x.shape(), std::move(out), {x}, [xn, s](detail::Node& self) {
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.extent * s.inner + i;
        double gsum = 0.0;
        for (std::size_t e = 0; e < s.extent; ++e) gsum += self.grad[base + e * s.inner];
        for (std::size_t e = 0; e < s.extent; ++e) {
          const std::size_t k = base + e * s.inner;
          xn->grad[k] += self.grad[k] - std::exp(self.data[k]) * gsum;
        }
      }
  });
}

// x / ||x|| along `axis`. A zero-norm slice is an error.
inline Tensor l2_normalize(const Tensor& x, std::size_t axis) {
  auto s = detail::split_axis(x.shape(), axis, "l2_normalize");
  Buffer out(x.numel());
  std::vector<double> norms(s.outer * s.inner);
  auto in = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      double ss = 0.0;
      for (std::size_t e = 0; e < s.extent; ++e) ss += in[base + e * s.inner] * in[base + e * s.inner];
      const double n = std::sqrt(ss);
      if (n == 0.0) throw TensorError("l2_normalize: zero-norm vector");
      norms[o * s.inner + i] = n;
      for (std::size_t e = 0; e < s.extent; ++e) out[base + e * s.inner] = in[base + e * s.inner] / n;
    }
  detail::Node* xn = x.node();
  return record("l2_normalize", x.shape(), std::move(out), {x},
                [xn, s, norms = std::move(norms)](detail::Node& self) {
                  for (std::size_t o = 0; o < s.outer; ++o)
                    for (std::size_t i = 0; i < s.inner; ++i) {
                      const std::size_t base = o * s.extent * s.inner + i;
                      const double n = norms[o * s.inner + i];
                      double dot = 0.0;
                      for (std::size_t e = 0; e < s.extent; ++e)
                        dot += self.grad[base + e * s.inner] * self.data[base + e * s.inner];
                      for (std::size_t e = 0; e < s.extent; ++e) {
                        const std::size_t k = base + e * s.inner;
                        xn->grad[k] += (self.grad[k] - self.data[k] * dot) / n;
                      }
                    }
                });
}

// ---------------------------------------------------------------------------
// Linear algebra

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw TensorError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                      shape_str(b.shape()));
  const auto m = static_cast<Eigen::Index>(a.dim(0));
  const auto k = static_cast<Eigen::Index>(a.dim(1));
  const auto n = static_cast<Eigen::Index>(b.dim(1));
  Buffer out(static_cast<std::size_t>(m * n));
  detail::MapMat(out.data(), m, n).noalias() =
      detail::ConstMapMat(a.data().data(), m, k) * detail::ConstMapMat(b.data().data(), k, n);
  detail::Node* an = a.node();
  detail::Node* bn = b.node();
  return record("matmul", {a.dim(0), b.dim(1)}, std::move(out), {a, b},
                [an, bn, m, k, n](detail::Node& self) {
                  detail::ConstMapMat g(self.grad.data(), m, n);
                  if (an->requires_grad)
                    detail::MapMat(an->grad.data(), m, k).noalias() +=
                        g * detail::ConstMapMat(bn->data.data(), k, n).transpose();
                  if (bn->requires_grad)
                    detail::MapMat(bn->grad.data(), k, n).noalias() +=
                        detail::ConstMapMat(an->data.data(), m, k).transpose() * g;
                });
}

// x: [B, K] plus bias: [K] broadcast over rows.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (x.rank() != 2 || bias.rank() != 1 || bias.dim(0) != x.dim(1))
    throw TensorError("add_bias: shapes " + shape_str(x.shape()) + " and " +
                      shape_str(bias.shape()));
  const std::size_t r = x.dim(0), c = x.dim(1);
  Buffer out(x.data().begin(), x.data().end());
  auto b = bias.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += b[j];
  detail::Node* xn = x.node();
  detail::Node* bn = bias.node();
  return record("add_bias", x.shape(), std::move(out), {x, bias},
                [xn, bn, r, c](detail::Node& self) {
                  if (xn->requires_grad)
                    for (std::size_t i = 0; i < r * c; ++i) xn->grad[i] += self.grad[i];
                  if (bn->requires_grad)
                    for (std::size_t i = 0; i < r; ++i)
                      for (std::size_t j = 0; j < c; ++j) bn->grad[j] += self.grad[i * c + j];
                });
}

// ---------------------------------------------------------------------------
// Convolution and pooling over NCHW

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

namespace detail {

struct ConvGeom {
  std::size_t batch, cin, h, w, cout, kh, kw, stride, pad, ho, wo;
  std::size_t patch() const { return cin * kh * kw; }
  std::size_t cols() const { return batch * ho * wo; }
};

// cols layout: [cin*kh*kw, batch*ho*wo]
inline void im2col(const ConvGeom& g, const double* x, double* cols) {
  const std::size_t ncols = g.cols();
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        double* row = cols + ((c * g.kh + ky) * g.kw + kx) * ncols;
        for (std::size_t b = 0; b < g.batch; ++b) {
          const double* img = x + (b * g.cin + c) * g.h * g.w;
          for (std::size_t oy = 0; oy < g.ho; ++oy) {
            const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
            double* dst = row + (b * g.ho + oy) * g.wo;
            if (iy < 0 || iy >= static_cast<long>(g.h)) {
              std::fill_n(dst, g.wo, 0.0);
              continue;
            }
            const double* src = img + static_cast<std::size_t>(iy) * g.w;
            for (std::size_t ox = 0; ox < g.wo; ++ox) {
              const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
              dst[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? 0.0 : src[ix];
            }
          }
        }
      }
}

inline void col2im(const ConvGeom& g, const double* cols, double* dx) {
  const std::size_t ncols = g.cols();
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const double* row = cols + ((c * g.kh + ky) * g.kw + kx) * ncols;
        for (std::size_t b = 0; b < g.batch; ++b) {
          double* img = dx + (b * g.cin + c) * g.h * g.w;
          for (std::size_t oy = 0; oy < g.ho; ++oy) {
            const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
            if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
            const double* src = row + (b * g.ho + oy) * g.wo;
            double* dst = img + static_cast<std::size_t>(iy) * g.w;
            for (std::size_t ox = 0; ox < g.wo; ++ox) {
              const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
              if (ix >= 0 && ix < static_cast<long>(g.w)) dst[ix] += src[ox];
            }
          }
        }
      }
}

}  // namespace detail

// x: [B, Cin, H, W], weight: [Cout, Cin, KH, KW], bias: [Cout] or undefined.
inline Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
                     Conv2dOptions opt = {}) {
  if (x.rank() != 4 || weight.rank() != 4 || weight.dim(1) != x.dim(1))
    throw TensorError("conv2d: incompatible shapes " + shape_str(x.shape()) + " and " +
                      shape_str(weight.shape()));
  if (opt.stride == 0) throw TensorError("conv2d: stride must be positive");
  detail::ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0), weight.dim(2),
                     weight.dim(3), opt.stride, opt.padding, 0, 0};
  if (g.h + 2 * g.pad < g.kh || g.w + 2 * g.pad < g.kw)
    throw TensorError("conv2d: kernel larger than padded input " + shape_str(x.shape()));
  g.ho = (g.h + 2 * g.pad - g.kh) / g.stride + 1;
  g.wo = (g.w + 2 * g.pad - g.kw) / g.stride + 1;
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != g.cout))
    throw TensorError("conv2d: bias shape " + shape_str(bias.shape()));

  auto cols = std::make_shared<Buffer>(g.patch() * g.cols());
  detail::im2col(g, x.data().data(), cols->data());
  const auto P = static_cast<Eigen::Index>(g.patch());
  const auto NC = static_cast<Eigen::Index>(g.cols());
  const auto CO = static_cast<Eigen::Index>(g.cout);
  Buffer prod(g.cout * g.cols());
  detail::MapMat(prod.data(), CO, NC).noalias() =
      detail::ConstMapMat(weight.data().data(), CO, P) * detail::ConstMapMat(cols->data(), P, NC);

  // [Cout, B*HoWo] -> [B, Cout, Ho, Wo]
  const std::size_t hw = g.ho * g.wo;
  Buffer out(g.batch * g.cout * hw);
  auto bd = has_bias ? bias.data() : std::span<const double>{};
  for (std::size_t co = 0; co < g.cout; ++co)
    for (std::size_t b = 0; b < g.batch; ++b) {
      const double* src = prod.data() + co * g.cols() + b * hw;
      double* dst = out.data() + (b * g.cout + co) * hw;
      const double bv = has_bias ? bd[co] : 0.0;
      for (std::size_t i = 0; i < hw; ++i) dst[i] = src[i] + bv;
    }

  std::vector<Tensor> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  detail::Node* xn = x.node();
  detail::Node* wn = weight.node();
  detail::Node* bn = has_bias ? bias.node() : nullptr;
  return record(
      "conv2d", {g.batch, g.cout, g.ho, g.wo}, std::move(out), std::move(inputs),
      [xn, wn, bn, g, cols, P, NC, CO, hw](detail::Node& self) {
        Buffer gm(g.cout * g.cols());
        for (std::size_t co = 0; co < g.cout; ++co)
          for (std::size_t b = 0; b < g.batch; ++b)
            std::copy_n(self.grad.data() + (b * g.cout + co) * hw, hw,
                        gm.data() + co * g.cols() + b * hw);
        detail::ConstMapMat G(gm.data(), CO, NC);
        if (wn->requires_grad)
          detail::MapMat(wn->grad.data(), CO, P).noalias() +=
              G * detail::ConstMapMat(cols->data(), P, NC).transpose();
        if (bn && bn->requires_grad)
          for (std::size_t co = 0; co < g.cout; ++co) {
            double acc = 0.0;
            const double* row = gm.data() + co * g.cols();
            for (std::size_t i = 0; i < g.cols(); ++i) acc += row[i];
            bn->grad[co] += acc;
          }
        if (xn->requires_grad) {
          Buffer dcols(g.patch() * g.cols());
          detail::MapMat(dcols.data(), P, NC).noalias() =
              detail::ConstMapMat(wn->data.data(), CO, P).transpose() * G;
          detail::col2im(g, dcols.data(), xn->grad.data());
        }
      });
}

inline Tensor conv2d(const Tensor& x, const Tensor& weight, Conv2dOptions opt = {}) {
  return conv2d(x, weight, Tensor{}, opt);
}

// Window `kernel`, step `stride`, floor mode, no padding.
inline Tensor avg_pool2d(const Tensor& x, std::size_t kernel, std::size_t stride) {
  if (x.rank() != 4) throw TensorError("avg_pool2d: expects NCHW input");
  if (kernel == 0 || stride == 0) throw TensorError("avg_pool2d: kernel and stride must be positive");
  const std::size_t n = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h < kernel || w < kernel)
    throw TensorError("avg_pool2d: input " + shape_str(x.shape()) + " smaller than window");
  const std::size_t ho = (h - kernel) / stride + 1, wo = (w - kernel) / stride + 1;
  const double inv = 1.0 / static_cast<double>(kernel * kernel);
  Buffer out(n * ho * wo, 0.0);
  auto in = x.data();
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        double acc = 0.0;
        for (std::size_t ky = 0; ky < kernel; ++ky)
          for (std::size_t kx = 0; kx < kernel; ++kx)
            acc += in[(p * h + oy * stride + ky) * w + ox * stride + kx];
        out[(p * ho + oy) * wo + ox] = acc * inv;
      }
  detail::Node* xn = x.node();
  return record("avg_pool2d", {x.dim(0), x.dim(1), ho, wo}, std::move(out), {x},
                [xn, n, h, w, ho, wo, kernel, stride, inv](detail::Node& self) {
                  for (std::size_t p = 0; p < n; ++p)
                    for (std::size_t oy = 0; oy < ho; ++oy)
                      for (std::size_t ox = 0; ox < wo; ++ox) {
                        const double gv = self.grad[(p * ho + oy) * wo + ox] * inv;
                        for (std::size_t ky = 0; ky < kernel; ++ky)
                          for (std::size_t kx = 0; kx < kernel; ++kx)
                            xn->grad[(p * h + oy * stride + ky) * w + ox * stride + kx] += gv;
                      }
                });
}

// [B, C, H, W] -> [B, C]
inline Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() != 4) throw TensorError("global_avg_pool: expects NCHW input");
  const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  return reshape(mean(reshape(x, {b, c, hw}), 2), {b, c});
}

}  // namespace geossl
