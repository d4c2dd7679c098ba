#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <limits>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "sknas/rng.hpp"

namespace sknas {

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<int>;

inline int64_t numel(const Shape& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

inline void check_shape(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

// Row-major strides in elements.
inline std::vector<int64_t> row_major_strides(const Shape& shape) {
  std::vector<int64_t> st(shape.size());
  int64_t s = 1;
  for (int i = static_cast<int>(shape.size()) - 1; i >= 0; --i) {
    st[i] = s;
    s *= shape[i];
  }
  return st;
}

struct TensorNode;

// Value-semantics handle to a node of the autodiff graph. Copying a Tensor
// copies the handle, not the buffer.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor ones(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, double value, bool requires_grad = false);
  static Tensor from_data(const Shape& shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  // Gaussian leaf tensor; consumes shape-many normal() draws in row-major order.
  static Tensor randn(Rng& rng, const Shape& shape, double stddev = 1.0,
                      bool requires_grad = false);

  // Internal: op node with a backward function.
  static Tensor make_op(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                        std::function<void(TensorNode&)> backward);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int ndim() const;
  int dim(int axis) const;
  int64_t size() const;
  bool requires_grad() const;
  void set_requires_grad(bool value);

  std::vector<double>& data();
  const std::vector<double>& data() const;
  bool has_grad() const;
  std::vector<double>& grad();
  const std::vector<double>& grad() const;
  void zero_grad();

  double item() const;

  // Runs reverse-mode accumulation from this scalar.
  void backward() const;

  TensorNode* node() const { return node_.get(); }

 private:
  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}
  std::shared_ptr<TensorNode> node_;
};

struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until the node participates in a backward pass
  bool requires_grad = false;
  std::vector<Tensor> inputs;
  std::function<void(TensorNode&)> backward;

  int64_t size() const { return static_cast<int64_t>(value.size()); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

inline Tensor Tensor::from_data(const Shape& shape, std::vector<double> data,
                                bool requires_grad) {
  check_shape(numel(shape) == static_cast<int64_t>(data.size()),
              "from_data: shape " + shape_str(shape) + " does not match buffer of " +
                  std::to_string(data.size()) + " elements");
  auto node = std::make_shared<TensorNode>();
  node->shape = shape;
  node->value = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

inline Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  return from_data(shape, std::vector<double>(numel(shape), 0.0), requires_grad);
}

inline Tensor Tensor::ones(const Shape& shape, bool requires_grad) {
  return from_data(shape, std::vector<double>(numel(shape), 1.0), requires_grad);
}

inline Tensor Tensor::full(const Shape& shape, double value, bool requires_grad) {
  return from_data(shape, std::vector<double>(numel(shape), value), requires_grad);
}

inline Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({}, {value}, requires_grad);
}

inline Tensor Tensor::randn(Rng& rng, const Shape& shape, double stddev, bool requires_grad) {
  std::vector<double> data(numel(shape));
  for (auto& v : data) v = rng.normal() * stddev;
  return from_data(shape, std::move(data), requires_grad);
}

inline Tensor Tensor::make_op(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                              std::function<void(TensorNode&)> backward) {
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool rg = false;
  for (const auto& in : inputs) rg = rg || in.requires_grad();
  node->requires_grad = rg;
  if (rg) {
    // Only a differentiable path keeps the graph alive; pure inference
    // produces free-standing buffers.
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

inline const Shape& Tensor::shape() const { return node_->shape; }
inline int Tensor::ndim() const { return static_cast<int>(node_->shape.size()); }
inline int Tensor::dim(int axis) const { return node_->shape.at(axis); }
inline int64_t Tensor::size() const { return node_->size(); }
inline bool Tensor::requires_grad() const { return node_->requires_grad; }

inline void Tensor::set_requires_grad(bool value) {
  if (value && node_->backward)
    throw std::logic_error("set_requires_grad: only leaf tensors can be toggled");
  node_->requires_grad = value;
}

inline std::vector<double>& Tensor::data() { return node_->value; }
inline const std::vector<double>& Tensor::data() const { return node_->value; }
inline bool Tensor::has_grad() const { return !node_->grad.empty(); }

inline std::vector<double>& Tensor::grad() {
  node_->ensure_grad();
  return node_->grad;
}

inline const std::vector<double>& Tensor::grad() const {
  if (node_->grad.empty())
    throw std::logic_error("grad(): no gradient populated; run backward() first");
  return node_->grad;
}

inline void Tensor::zero_grad() { node_->grad.clear(); }

inline double Tensor::item() const {
  check_shape(size() == 1, "item(): tensor has " + std::to_string(size()) + " elements");
  return node_->value[0];
}

inline void Tensor::backward() const {
  check_shape(size() == 1, "backward(): root must be a scalar, got " + shape_str(shape()));
  if (!node_->requires_grad) return;

  // Iterative DFS postorder = topological order of the executed subgraph.
  std::vector<TensorNode*> topo;
  std::unordered_set<TensorNode*> visited;
  std::vector<std::pair<TensorNode*, size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      TensorNode* child = node->inputs[next++].node();
      if (child->requires_grad && !visited.count(child)) {
        visited.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }

  // Interior nodes get a fresh pass; only leaves accumulate across calls.
  for (TensorNode* n : topo) {
    n->ensure_grad();
    if (n->backward) std::fill(n->grad.begin(), n->grad.end(), 0.0);
  }
  node_->grad[0] += 1.0;
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

// ---------------------------------------------------------------------------
// Broadcasting machinery (NumPy rules, aligned to the right).

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const size_t n = std::max(a.size(), b.size());
  Shape out(n);
  for (size_t i = 0; i < n; ++i) {
    int da = i < n - a.size() ? 1 : a[i - (n - a.size())];
    int db = i < n - b.size() ? 1 : b[i - (n - b.size())];
    if (da != db && da != 1 && db != 1)
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides for reading `in` under iteration of `out`; 0 where `in` broadcasts.
inline std::vector<int64_t> broadcast_strides(const Shape& out, const Shape& in) {
  auto in_strides = row_major_strides(in);
  std::vector<int64_t> st(out.size(), 0);
  const size_t off = out.size() - in.size();
  for (size_t i = 0; i < in.size(); ++i) {
    if (in[i] != 1) st[off + i] = in_strides[i];
  }
  return st;
}

// Walks the row-major index space of `shape`, tracking one mapped offset.
template <class F>
inline void nd_walk1(const Shape& shape, const std::vector<int64_t>& strides, F&& f) {
  const int64_t n = numel(shape);
  const int nd = static_cast<int>(shape.size());
  std::vector<int> idx(nd, 0);
  int64_t off = 0;
  for (int64_t i = 0; i < n; ++i) {
    f(i, off);
    for (int d = nd - 1; d >= 0; --d) {
      off += strides[d];
      if (++idx[d] < shape[d]) break;
      idx[d] = 0;
      off -= strides[d] * shape[d];
    }
  }
}

// Same, tracking two mapped offsets.
template <class F>
inline void nd_walk2(const Shape& shape, const std::vector<int64_t>& sa,
                     const std::vector<int64_t>& sb, F&& f) {
  const int64_t n = numel(shape);
  const int nd = static_cast<int>(shape.size());
  std::vector<int> idx(nd, 0);
  int64_t offa = 0, offb = 0;
  for (int64_t i = 0; i < n; ++i) {
    f(i, offa, offb);
    for (int d = nd - 1; d >= 0; --d) {
      offa += sa[d];
      offb += sb[d];
      if (++idx[d] < shape[d]) break;
      idx[d] = 0;
      offa -= sa[d] * shape[d];
      offb -= sb[d] * shape[d];
    }
  }
}

// Accumulates `gout` (laid out as `out_shape`) into `acc` (laid out as
// `in_shape`), summing over broadcast dimensions.
inline void reduce_into(const Shape& out_shape, const std::vector<double>& gout,
                        const Shape& in_shape, std::vector<double>& acc) {
  if (out_shape == in_shape) {
    for (size_t i = 0; i < gout.size(); ++i) acc[i] += gout[i];
    return;
  }
  nd_walk1(out_shape, broadcast_strides(out_shape, in_shape),
           [&](int64_t i, int64_t off) { acc[off] += gout[i]; });
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic.

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) {
    std::vector<double> out(a.size());
    const auto &av = a.data(), &bv = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    return Tensor::make_op(a.shape(), std::move(out), {a, b}, [](TensorNode& self) {
      for (int k = 0; k < 2; ++k) {
        auto& in = self.inputs[k];
        if (!in.requires_grad()) continue;
        auto& g = in.grad();
        for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
    });
  }
  Shape os = broadcast_shape(a.shape(), b.shape());
  std::vector<double> out(numel(os));
  const auto sa = broadcast_strides(os, a.shape());
  const auto sb = broadcast_strides(os, b.shape());
  const auto &av = a.data(), &bv = b.data();
  nd_walk2(os, sa, sb, [&](int64_t i, int64_t ia, int64_t ib) { out[i] = av[ia] + bv[ib]; });
  return Tensor::make_op(std::move(os), std::move(out), {a, b}, [](TensorNode& self) {
    for (int k = 0; k < 2; ++k) {
      auto& in = self.inputs[k];
      if (in.requires_grad()) reduce_into(self.shape, self.grad, in.shape(), in.grad());
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) {
    std::vector<double> out(a.size());
    const auto &av = a.data(), &bv = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    return Tensor::make_op(a.shape(), std::move(out), {a, b}, [](TensorNode& self) {
      const auto& av = self.inputs[0].data();
      const auto& bv = self.inputs[1].data();
      if (self.inputs[0].requires_grad()) {
        auto& g = self.inputs[0].grad();
        for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
      }
      if (self.inputs[1].requires_grad()) {
        auto& g = self.inputs[1].grad();
        for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
      }
    });
  }
  Shape os = broadcast_shape(a.shape(), b.shape());
  std::vector<double> out(numel(os));
  const auto sa = broadcast_strides(os, a.shape());
  const auto sb = broadcast_strides(os, b.shape());
  const auto &av = a.data(), &bv = b.data();
  nd_walk2(os, sa, sb, [&](int64_t i, int64_t ia, int64_t ib) { out[i] = av[ia] * bv[ib]; });
  return Tensor::make_op(std::move(os), std::move(out), {a, b}, [](TensorNode& self) {
    const auto& a = self.inputs[0];
    const auto& b = self.inputs[1];
    const auto sa = broadcast_strides(self.shape, a.shape());
    const auto sb = broadcast_strides(self.shape, b.shape());
    const auto &av = a.data(), &bv = b.data();
    const bool ga = a.requires_grad(), gb = b.requires_grad();
    auto* agrad = ga ? &const_cast<Tensor&>(a).grad() : nullptr;
    auto* bgrad = gb ? &const_cast<Tensor&>(b).grad() : nullptr;
    nd_walk2(self.shape, sa, sb, [&](int64_t i, int64_t ia, int64_t ib) {
      if (ga) (*agrad)[ia] += self.grad[i] * bv[ib];
      if (gb) (*bgrad)[ib] += self.grad[i] * av[ia];
    });
  });
}

inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  const auto& av = a.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
  return Tensor::make_op(a.shape(), std::move(out), {a}, [c](TensorNode& self) {
    if (!self.inputs[0].requires_grad()) return;
    auto& g = self.inputs[0].grad();
    for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * c;
  });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  const auto& av = a.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + c;
  return Tensor::make_op(a.shape(), std::move(out), {a}, [](TensorNode& self) {
    if (!self.inputs[0].requires_grad()) return;
    auto& g = self.inputs[0].grad();
    for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return add(a, neg(b)); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double c) { return scale(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }

// Value copy detached from the graph.
inline Tensor detach(const Tensor& a) { return Tensor::from_data(a.shape(), a.data()); }

// ---------------------------------------------------------------------------
// Shape ops.

inline Tensor reshape(const Tensor& a, const Shape& shape) {
  check_shape(numel(shape) == a.size(), "reshape: cannot view " + shape_str(a.shape()) +
                                            " as " + shape_str(shape));
  return Tensor::make_op(shape, a.data(), {a}, [](TensorNode& self) {
    if (!self.inputs[0].requires_grad()) return;
    auto& g = self.inputs[0].grad();
    for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

inline Tensor transpose2d(const Tensor& a) {
  check_shape(a.ndim() == 2, "transpose2d: expected a matrix, got " + shape_str(a.shape()));
  const int m = a.dim(0), n = a.dim(1);
  std::vector<double> out(a.size());
  const auto& av = a.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[static_cast<int64_t>(j) * m + i] = av[static_cast<int64_t>(i) * n + j];
  return Tensor::make_op({n, m}, std::move(out), {a}, [m, n](TensorNode& self) {
    if (!self.inputs[0].requires_grad()) return;
    auto& g = self.inputs[0].grad();
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < m; ++i)
        g[static_cast<int64_t>(i) * n + j] += self.grad[static_cast<int64_t>(j) * m + i];
  });
}

namespace detail {
// Collapses `shape` around `axis` into (outer, axis extent, inner).
inline void axis_split(const Shape& shape, int axis, int64_t& outer, int64_t& mid,
                       int64_t& inner) {
  outer = 1;
  for (int i = 0; i < axis; ++i) outer *= shape[i];
  mid = shape[axis];
  inner = 1;
  for (size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
}

inline int normalize_axis(int axis, int ndim, const char* what) {
  if (axis < 0) axis += ndim;
  if (axis < 0 || axis >= ndim)
    throw ShapeError(std::string(what) + ": axis " + std::to_string(axis) +
                     " out of range for rank " + std::to_string(ndim));
  return axis;
}
}  // namespace detail

inline Tensor slice(const Tensor& a, int axis, int start, int stop) {
  axis = detail::normalize_axis(axis, a.ndim(), "slice");
  check_shape(start >= 0 && stop <= a.dim(axis) && start < stop,
              "slice: range [" + std::to_string(start) + "," + std::to_string(stop) +
                  ") invalid for axis extent " + std::to_string(a.dim(axis)));
  Shape os = a.shape();
  os[axis] = stop - start;
  int64_t outer, mid, inner;
  detail::axis_split(a.shape(), axis, outer, mid, inner);
  const int64_t omid = stop - start;
  std::vector<double> out(outer * omid * inner);
  const auto& av = a.data();
  for (int64_t o = 0; o < outer; ++o)
    std::memcpy(out.data() + o * omid * inner, av.data() + (o * mid + start) * inner,
                sizeof(double) * omid * inner);
  return Tensor::make_op(std::move(os), std::move(out), {a},
                         [outer, mid, inner, start, omid](TensorNode& self) {
                           if (!self.inputs[0].requires_grad()) return;
                           auto& g = self.inputs[0].grad();
                           for (int64_t o = 0; o < outer; ++o) {
                             const double* src = self.grad.data() + o * omid * inner;
                             double* dst = g.data() + (o * mid + start) * inner;
                             for (int64_t i = 0; i < omid * inner; ++i) dst[i] += src[i];
                           }
                         });
}

inline Tensor index_select(const Tensor& a, int axis, const std::vector<int>& indices) {
  axis = detail::normalize_axis(axis, a.ndim(), "index_select");
  for (int idx : indices)
    check_shape(idx >= 0 && idx < a.dim(axis),
                "index_select: index " + std::to_string(idx) + " out of range for extent " +
                    std::to_string(a.dim(axis)));
  Shape os = a.shape();
  os[axis] = static_cast<int>(indices.size());
  int64_t outer, mid, inner;
  detail::axis_split(a.shape(), axis, outer, mid, inner);
  const int64_t omid = static_cast<int64_t>(indices.size());
  std::vector<double> out(outer * omid * inner);
  const auto& av = a.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t j = 0; j < omid; ++j)
      std::memcpy(out.data() + (o * omid + j) * inner, av.data() + (o * mid + indices[j]) * inner,
                  sizeof(double) * inner);
  return Tensor::make_op(std::move(os), std::move(out), {a},
                         [outer, mid, inner, indices, omid](TensorNode& self) {
                           if (!self.inputs[0].requires_grad()) return;
                           auto& g = self.inputs[0].grad();
                           for (int64_t o = 0; o < outer; ++o)
                             for (int64_t j = 0; j < omid; ++j) {
                               const double* src = self.grad.data() + (o * omid + j) * inner;
                               double* dst = g.data() + (o * mid + indices[j]) * inner;
                               for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
                             }
                         });
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  check_shape(!parts.empty(), "concat: no tensors given");
  axis = detail::normalize_axis(axis, parts[0].ndim(), "concat");
  Shape os = parts[0].shape();
  int total = 0;
  for (const auto& p : parts) {
    check_shape(p.ndim() == parts[0].ndim(), "concat: rank mismatch");
    for (int d = 0; d < p.ndim(); ++d)
      check_shape(d == axis || p.dim(d) == parts[0].dim(d),
                  "concat: shape " + shape_str(p.shape()) + " incompatible with " +
                      shape_str(parts[0].shape()) + " on axis " + std::to_string(axis));
    total += p.dim(axis);
  }
  os[axis] = total;
  int64_t outer, omid, inner;
  detail::axis_split(os, axis, outer, omid, inner);
  std::vector<double> out(outer * omid * inner);
  int64_t off = 0;
  for (const auto& p : parts) {
    const int64_t pmid = p.dim(axis);
    const auto& pv = p.data();
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(out.data() + (o * omid + off) * inner, pv.data() + o * pmid * inner,
                  sizeof(double) * pmid * inner);
    off += pmid;
  }
  return Tensor::make_op(std::move(os), std::move(out), parts,
                         [outer, omid, inner, axis](TensorNode& self) {
                           int64_t off = 0;
                           for (auto& p : self.inputs) {
                             const int64_t pmid = p.dim(axis);
                             if (p.requires_grad()) {
                               auto& g = p.grad();
                               for (int64_t o = 0; o < outer; ++o) {
                                 const double* src = self.grad.data() + (o * omid + off) * inner;
                                 double* dst = g.data() + o * pmid * inner;
                                 for (int64_t i = 0; i < pmid * inner; ++i) dst[i] += src[i];
                               }
                             }
                             off += pmid;
                           }
                         });
}

// ---------------------------------------------------------------------------
// Reductions.

inline Tensor sum(const Tensor& a, std::vector<int> axes, bool keepdims = false) {
  const int nd = a.ndim();
  std::vector<bool> reduce(nd, false);
  for (int ax : axes) reduce[detail::normalize_axis(ax, nd, "sum")] = true;
  Shape os;
  Shape kept = a.shape();
  for (int i = 0; i < nd; ++i) {
    if (reduce[i])
      kept[i] = 1;
    else
      os.push_back(a.dim(i));
  }
  Shape out_shape = keepdims ? kept : os;
  // Strides of the (keepdim) output under iteration of the full input shape.
  auto map = broadcast_strides(a.shape(), kept);
  std::vector<double> out(numel(kept), 0.0);
  const auto& av = a.data();
  nd_walk1(a.shape(), map, [&](int64_t i, int64_t off) { out[off] += av[i]; });
  Shape in_shape = a.shape();
  return Tensor::make_op(out_shape, std::move(out), {a},
                         [in_shape, kept](TensorNode& self) {
                           if (!self.inputs[0].requires_grad()) return;
                           auto& g = self.inputs[0].grad();
                           const auto map = broadcast_strides(in_shape, kept);
                           nd_walk1(in_shape, map,
                                    [&](int64_t i, int64_t off) { g[i] += self.grad[off]; });
                         });
}

inline Tensor sum_all(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  return Tensor::make_op({}, {total}, {a}, [](TensorNode& self) {
    if (!self.inputs[0].requires_grad()) return;
    auto& g = self.inputs[0].grad();
    const double go = self.grad[0];
    for (size_t i = 0; i < g.size(); ++i) g[i] += go;
  });
}

inline Tensor mean(const Tensor& a, std::vector<int> axes, bool keepdims = false) {
  int64_t count = 1;
  for (int ax : axes) count *= a.dim(detail::normalize_axis(ax, a.ndim(), "mean"));
  return scale(sum(a, std::move(axes), keepdims), 1.0 / static_cast<double>(count));
}

inline Tensor mean_all(const Tensor& a) {
  return scale(sum_all(a), 1.0 / static_cast<double>(a.size()));
}

// ---------------------------------------------------------------------------
// Nonlinearities.

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.size());
  const auto& av = a.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
  return Tensor::make_op(a.shape(), std::move(out), {a}, [](TensorNode& self) {
    if (!self.inputs[0].requires_grad()) return;
    const auto& av = self.inputs[0].data();
    auto& g = self.inputs[0].grad();
    // subgradient at 0 is 0
    for (size_t i = 0; i < g.size(); ++i)
      if (av[i] > 0.0) g[i] += self.grad[i];
  });
}

// Per-channel PReLU for NCHW-style tensors; `slope` has shape (C) with C the
// extent of axis 1.
inline Tensor prelu(const Tensor& a, const Tensor& slope) {
  check_shape(a.ndim() >= 2, "prelu: input must have a channel axis, got " +
                                 shape_str(a.shape()));
  check_shape(slope.ndim() == 1 && slope.dim(0) == a.dim(1),
              "prelu: slope shape " + shape_str(slope.shape()) + " must be (" +
                  std::to_string(a.dim(1)) + ")");
  int64_t outer, channels, inner;
  detail::axis_split(a.shape(), 1, outer, channels, inner);
  std::vector<double> out(a.size());
  const auto& av = a.data();
  const auto& sv = slope.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t c = 0; c < channels; ++c) {
      const double s = sv[c];
      const double* src = av.data() + (o * channels + c) * inner;
      double* dst = out.data() + (o * channels + c) * inner;
      for (int64_t i = 0; i < inner; ++i) dst[i] = src[i] >= 0.0 ? src[i] : s * src[i];
    }
  return Tensor::make_op(a.shape(), std::move(out), {a, slope},
                         [outer, channels, inner](TensorNode& self) {
                           const auto& av = self.inputs[0].data();
                           const auto& sv = self.inputs[1].data();
                           const bool gx = self.inputs[0].requires_grad();
                           const bool gs = self.inputs[1].requires_grad();
                           auto* xg = gx ? &self.inputs[0].grad() : nullptr;
                           auto* sg = gs ? &self.inputs[1].grad() : nullptr;
                           for (int64_t o = 0; o < outer; ++o)
                             for (int64_t c = 0; c < channels; ++c) {
                               const double s = sv[c];
                               const int64_t base = (o * channels + c) * inner;
                               for (int64_t i = 0; i < inner; ++i) {
                                 const double x = av[base + i];
                                 const double go = self.grad[base + i];
                                 if (gx) (*xg)[base + i] += x > 0.0 ? go : (x < 0.0 ? s * go : 0.0);
                                 if (gs && x < 0.0) (*sg)[c] += x * go;
                               }
                             }
                         });
}

inline Tensor sigmoid(const Tensor& a) {
  std::vector<double> out(a.size());
  const auto& av = a.data();
  for (size_t i = 0; i < out.size(); ++i) {
    const double x = av[i];
    out[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  return Tensor::make_op(a.shape(), std::move(out), {a}, [](TensorNode& self) {
    if (!self.inputs[0].requires_grad()) return;
    auto& g = self.inputs[0].grad();
    for (size_t i = 0; i < g.size(); ++i) {
      const double y = self.value[i];
      g[i] += self.grad[i] * y * (1.0 - y);
    }
  });
}

inline Tensor abs(const Tensor& a) {
  std::vector<double> out(a.size());
  const auto& av = a.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::fabs(av[i]);
  return Tensor::make_op(a.shape(), std::move(out), {a}, [](TensorNode& self) {
    if (!self.inputs[0].requires_grad()) return;
    const auto& av = self.inputs[0].data();
    auto& g = self.inputs[0].grad();
    for (size_t i = 0; i < g.size(); ++i) {
      if (av[i] > 0.0)
        g[i] += self.grad[i];
      else if (av[i] < 0.0)
        g[i] -= self.grad[i];
    }
  });
}

// Numerically-stabilized softmax along `axis`.
inline Tensor softmax(const Tensor& a, int axis) {
  axis = detail::normalize_axis(axis, std::max(a.ndim(), 1), "softmax");
  check_shape(a.ndim() >= 1, "softmax: needs at least rank 1");
  int64_t outer, mid, inner;
  detail::axis_split(a.shape(), axis, outer, mid, inner);
  std::vector<double> out(a.size());
  const auto& av = a.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t i = 0; i < inner; ++i) {
      const int64_t base = o * mid * inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t m = 0; m < mid; ++m) mx = std::max(mx, av[base + m * inner]);
      double denom = 0.0;
      for (int64_t m = 0; m < mid; ++m) {
        const double e = std::exp(av[base + m * inner] - mx);
        out[base + m * inner] = e;
        denom += e;
      }
      for (int64_t m = 0; m < mid; ++m) out[base + m * inner] /= denom;
    }
  return Tensor::make_op(a.shape(), std::move(out), {a},
                         [outer, mid, inner](TensorNode& self) {
                           if (!self.inputs[0].requires_grad()) return;
                           auto& g = self.inputs[0].grad();
                           for (int64_t o = 0; o < outer; ++o)
                             for (int64_t i = 0; i < inner; ++i) {
                               const int64_t base = o * mid * inner + i;
                               double dot = 0.0;
                               for (int64_t m = 0; m < mid; ++m)
                                 dot += self.grad[base + m * inner] * self.value[base + m * inner];
                               for (int64_t m = 0; m < mid; ++m) {
                                 const int64_t k = base + m * inner;
                                 g[k] += self.value[k] * (self.grad[k] - dot);
                               }
                             }
                         });
}

// ---------------------------------------------------------------------------
// Matrix multiply.

namespace detail {
// C[M,N] += A[M,K] * B[K,N], all row-major.
inline void gemm_nn(int64_t M, int64_t N, int64_t K, const double* A, const double* B,
                    double* C) {
  for (int64_t m = 0; m < M; ++m) {
    double* crow = C + m * N;
    const double* arow = A + m * K;
    for (int64_t k = 0; k < K; ++k) {
      const double a = arow[k];
      if (a == 0.0) continue;
      const double* brow = B + k * N;
      for (int64_t n = 0; n < N; ++n) crow[n] += a * brow[n];
    }
  }
}

// C[M,N] += A[M,K] * B[N,K]^T
inline void gemm_nt(int64_t M, int64_t N, int64_t K, const double* A, const double* B,
                    double* C) {
  for (int64_t m = 0; m < M; ++m) {
    const double* arow = A + m * K;
    double* crow = C + m * N;
    for (int64_t n = 0; n < N; ++n) {
      const double* brow = B + n * K;
      double acc = 0.0;
      for (int64_t k = 0; k < K; ++k) acc += arow[k] * brow[k];
      crow[n] += acc;
    }
  }
}

// C[M,N] += A[K,M]^T * B[K,N]
inline void gemm_tn(int64_t M, int64_t N, int64_t K, const double* A, const double* B,
                    double* C) {
  for (int64_t k = 0; k < K; ++k) {
    const double* arow = A + k * M;
    const double* brow = B + k * N;
    for (int64_t m = 0; m < M; ++m) {
      const double a = arow[m];
      if (a == 0.0) continue;
      double* crow = C + m * N;
      for (int64_t n = 0; n < N; ++n) crow[n] += a * brow[n];
    }
  }
}
}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  check_shape(a.ndim() == 2 && b.ndim() == 2,
              "matmul: expected matrices, got " + shape_str(a.shape()) + " and " +
                  shape_str(b.shape()));
  check_shape(a.dim(1) == b.dim(0), "matmul: inner extents differ, " + shape_str(a.shape()) +
                                        " vs " + shape_str(b.shape()));
  const int64_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  std::vector<double> out(M * N, 0.0);
  detail::gemm_nn(M, N, K, a.data().data(), b.data().data(), out.data());
  return Tensor::make_op({static_cast<int>(M), static_cast<int>(N)}, std::move(out), {a, b},
                         [M, K, N](TensorNode& self) {
                           const auto& a = self.inputs[0];
                           const auto& b = self.inputs[1];
                           if (a.requires_grad())
                             detail::gemm_nt(M, K, N, self.grad.data(), b.data().data(),
                                             const_cast<Tensor&>(a).grad().data());
                           if (b.requires_grad())
                             detail::gemm_tn(K, N, M, a.data().data(), self.grad.data(),
                                             const_cast<Tensor&>(b).grad().data());
                         });
}

// ---------------------------------------------------------------------------
// Spatial ops (NCHW).

namespace detail {
struct ConvDims {
  int64_t n, ci, h, w, co, k, oh, ow, stride, pad;
};

inline ConvDims conv_dims(const Shape& in, const Shape& wt, int stride, int pad) {
  check_shape(in.size() == 4, "conv2d: input must be NCHW, got " + shape_str(in));
  check_shape(wt.size() == 4, "conv2d: weight must be OIKK, got " + shape_str(wt));
  check_shape(wt[2] == wt[3], "conv2d: kernel must be square, got " + shape_str(wt));
  check_shape(wt[2] % 2 == 1, "conv2d: kernel extent must be odd, got " + std::to_string(wt[2]));
  check_shape(in[1] == wt[1], "conv2d: input has " + std::to_string(in[1]) +
                                  " channels but weight expects " + std::to_string(wt[1]));
  check_shape(stride >= 1, "conv2d: stride must be positive");
  check_shape(pad >= 0, "conv2d: padding must be non-negative");
  ConvDims d;
  d.n = in[0];
  d.ci = in[1];
  d.h = in[2];
  d.w = in[3];
  d.co = wt[0];
  d.k = wt[2];
  d.stride = stride;
  d.pad = pad;
  d.oh = (d.h + 2 * pad - d.k) / stride + 1;
  d.ow = (d.w + 2 * pad - d.k) / stride + 1;
  check_shape(d.oh > 0 && d.ow > 0, "conv2d: kernel " + std::to_string(d.k) +
                                        " larger than padded input " + shape_str(in));
  return d;
}

// col has shape [ci*k*k, oh*ow].
inline void im2col(const double* x, const ConvDims& d, double* col) {
  const int64_t plane = d.h * d.w;
  for (int64_t c = 0; c < d.ci; ++c)
    for (int64_t ky = 0; ky < d.k; ++ky)
      for (int64_t kx = 0; kx < d.k; ++kx) {
        double* row = col + ((c * d.k + ky) * d.k + kx) * (d.oh * d.ow);
        for (int64_t oy = 0; oy < d.oh; ++oy) {
          const int64_t iy = oy * d.stride - d.pad + ky;
          double* dst = row + oy * d.ow;
          if (iy < 0 || iy >= d.h) {
            std::fill(dst, dst + d.ow, 0.0);
            continue;
          }
          const double* src = x + c * plane + iy * d.w;
          for (int64_t ox = 0; ox < d.ow; ++ox) {
            const int64_t ix = ox * d.stride - d.pad + kx;
            dst[ox] = (ix >= 0 && ix < d.w) ? src[ix] : 0.0;
          }
        }
      }
}

inline void col2im_add(const double* col, const ConvDims& d, double* xg) {
  const int64_t plane = d.h * d.w;
  for (int64_t c = 0; c < d.ci; ++c)
    for (int64_t ky = 0; ky < d.k; ++ky)
      for (int64_t kx = 0; kx < d.k; ++kx) {
        const double* row = col + ((c * d.k + ky) * d.k + kx) * (d.oh * d.ow);
        for (int64_t oy = 0; oy < d.oh; ++oy) {
          const int64_t iy = oy * d.stride - d.pad + ky;
          if (iy < 0 || iy >= d.h) continue;
          double* dst = xg + c * plane + iy * d.w;
          const double* src = row + oy * d.ow;
          for (int64_t ox = 0; ox < d.ow; ++ox) {
            const int64_t ix = ox * d.stride - d.pad + kx;
            if (ix >= 0 && ix < d.w) dst[ix] += src[ox];
          }
        }
      }
}
}  // namespace detail

// 2-D cross-correlation over NCHW input with OIKK weight. Differentiable in
// input, weight and bias.
inline Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias = {},
                     int stride = 1, int padding = 0) {
  const auto d = detail::conv_dims(input.shape(), weight.shape(), stride, padding);
  if (bias.defined())
    check_shape(bias.ndim() == 1 && bias.dim(0) == d.co,
                "conv2d: bias shape " + shape_str(bias.shape()) + " must be (" +
                    std::to_string(d.co) + ")");
  const int64_t ckk = d.ci * d.k * d.k;
  const int64_t opix = d.oh * d.ow;
  std::vector<double> col(ckk * opix);
  std::vector<double> out(d.n * d.co * opix, 0.0);
  const double* x = input.data().data();
  const double* w = weight.data().data();
  for (int64_t n = 0; n < d.n; ++n) {
    detail::im2col(x + n * d.ci * d.h * d.w, d, col.data());
    detail::gemm_nn(d.co, opix, ckk, w, col.data(), out.data() + n * d.co * opix);
  }
  if (bias.defined()) {
    const auto& bv = bias.data();
    for (int64_t n = 0; n < d.n; ++n)
      for (int64_t o = 0; o < d.co; ++o) {
        double* dst = out.data() + (n * d.co + o) * opix;
        const double b = bv[o];
        for (int64_t p = 0; p < opix; ++p) dst[p] += b;
      }
  }
  Shape os = {static_cast<int>(d.n), static_cast<int>(d.co), static_cast<int>(d.oh),
              static_cast<int>(d.ow)};
  std::vector<Tensor> inputs = {input, weight};
  if (bias.defined()) inputs.push_back(bias);
  const bool has_bias = bias.defined();
  return Tensor::make_op(std::move(os), std::move(out), std::move(inputs),
                         [d, has_bias](TensorNode& self) {
                           const auto& input = self.inputs[0];
                           const auto& weight = self.inputs[1];
                           const int64_t ckk = d.ci * d.k * d.k;
                           const int64_t opix = d.oh * d.ow;
                           const bool need_x = input.requires_grad();
                           const bool need_w = weight.requires_grad();
                           std::vector<double> col(need_w ? ckk * opix : 0);
                           std::vector<double> gcol(need_x ? ckk * opix : 0);
                           const double* x = input.data().data();
                           const double* w = weight.data().data();
                           for (int64_t n = 0; n < d.n; ++n) {
                             const double* go = self.grad.data() + n * d.co * opix;
                             if (need_w) {
                               detail::im2col(x + n * d.ci * d.h * d.w, d, col.data());
                               detail::gemm_nt(d.co, ckk, opix, go, col.data(),
                                               const_cast<Tensor&>(weight).grad().data());
                             }
                             if (need_x) {
                               std::fill(gcol.begin(), gcol.end(), 0.0);
                               detail::gemm_tn(ckk, opix, d.co, w, go, gcol.data());
                               detail::col2im_add(gcol.data(), d,
                                                  const_cast<Tensor&>(input).grad().data() +
                                                      n * d.ci * d.h * d.w);
                             }
                           }
                           if (has_bias && self.inputs[2].requires_grad()) {
                             auto& bg = self.inputs[2].grad();
                             for (int64_t n = 0; n < d.n; ++n)
                               for (int64_t o = 0; o < d.co; ++o) {
                                 const double* go = self.grad.data() + (n * d.co + o) * opix;
                                 double acc = 0.0;
                                 for (int64_t p = 0; p < opix; ++p) acc += go[p];
                                 bg[o] += acc;
                               }
                           }
                         });
}

inline Tensor global_avg_pool2d(const Tensor& a) {
  check_shape(a.ndim() == 4, "global_avg_pool2d: input must be NCHW, got " +
                                 shape_str(a.shape()));
  const int64_t n = a.dim(0), c = a.dim(1), plane = static_cast<int64_t>(a.dim(2)) * a.dim(3);
  std::vector<double> out(n * c);
  const auto& av = a.data();
  for (int64_t i = 0; i < n * c; ++i) {
    double acc = 0.0;
    const double* src = av.data() + i * plane;
    for (int64_t p = 0; p < plane; ++p) acc += src[p];
    out[i] = acc / static_cast<double>(plane);
  }
  return Tensor::make_op({a.dim(0), a.dim(1), 1, 1}, std::move(out), {a},
                         [n, c, plane](TensorNode& self) {
                           if (!self.inputs[0].requires_grad()) return;
                           auto& g = self.inputs[0].grad();
                           for (int64_t i = 0; i < n * c; ++i) {
                             const double go = self.grad[i] / static_cast<double>(plane);
                             double* dst = g.data() + i * plane;
                             for (int64_t p = 0; p < plane; ++p) dst[p] += go;
                           }
                         });
}

// (N, C*r*r, H, W) -> (N, C, H*r, W*r); inverse of space-to-depth.
inline Tensor pixel_shuffle(const Tensor& a, int r) {
  check_shape(a.ndim() == 4, "pixel_shuffle: input must be NCHW, got " + shape_str(a.shape()));
  check_shape(r >= 1, "pixel_shuffle: upscale factor must be positive");
  check_shape(a.dim(1) % (r * r) == 0, "pixel_shuffle: channels " + std::to_string(a.dim(1)) +
                                           " not divisible by r^2=" + std::to_string(r * r));
  const int64_t n = a.dim(0), ic = a.dim(1), h = a.dim(2), w = a.dim(3);
  const int64_t oc = ic / (r * r), oh = h * r, ow = w * r;
  std::vector<double> out(a.size());
  const auto& av = a.data();
  for (int64_t b = 0; b < n; ++b)
    for (int64_t c = 0; c < oc; ++c)
      for (int64_t dy = 0; dy < r; ++dy)
        for (int64_t dx = 0; dx < r; ++dx) {
          const int64_t src_c = c * r * r + dy * r + dx;
          for (int64_t y = 0; y < h; ++y) {
            const double* src = av.data() + ((b * ic + src_c) * h + y) * w;
            double* dst = out.data() + ((b * oc + c) * oh + y * r + dy) * ow + dx;
            for (int64_t x = 0; x < w; ++x) dst[x * r] = src[x];
          }
        }
  return Tensor::make_op(
      {a.dim(0), static_cast<int>(oc), static_cast<int>(oh), static_cast<int>(ow)},
      std::move(out), {a}, [n, ic, h, w, oc, oh, ow, r](TensorNode& self) {
        if (!self.inputs[0].requires_grad()) return;
        auto& g = self.inputs[0].grad();
        for (int64_t b = 0; b < n; ++b)
          for (int64_t c = 0; c < oc; ++c)
            for (int64_t dy = 0; dy < r; ++dy)
              for (int64_t dx = 0; dx < r; ++dx) {
                const int64_t src_c = c * r * r + dy * r + dx;
                for (int64_t y = 0; y < h; ++y) {
                  double* dst = g.data() + ((b * ic + src_c) * h + y) * w;
                  const double* src =
                      self.grad.data() + ((b * oc + c) * oh + y * r + dy) * ow + dx;
                  for (int64_t x = 0; x < w; ++x) dst[x] += src[x * r];
                }
              }
      });
}

// ---------------------------------------------------------------------------
// Stochastic leaves.

// Standard Gumbel noise; a leaf with no gradient path.
inline Tensor gumbel_noise(Rng& rng, const Shape& shape) {
  std::vector<double> data(numel(shape));
  for (auto& v : data) v = rng.gumbel();
  return Tensor::from_data(shape, std::move(data));
}

// Forward takes `hard`'s values verbatim, backward flows through `soft`
// unchanged (identity surrogate gradient).
inline Tensor straight_through(const Tensor& hard, const Tensor& soft) {
  check_shape(hard.shape() == soft.shape(), "straight_through: shape mismatch " +
                                                shape_str(hard.shape()) + " vs " +
                                                shape_str(soft.shape()));
  return Tensor::make_op(soft.shape(), hard.data(), {soft}, [](TensorNode& self) {
    if (!self.inputs[0].requires_grad()) return;
    auto& g = self.inputs[0].grad();
    for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

inline int64_t argmax(const std::vector<double>& v) {
  int64_t best = 0;
  for (size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = static_cast<int64_t>(i);
  return best;
}

}  // namespace sknas
