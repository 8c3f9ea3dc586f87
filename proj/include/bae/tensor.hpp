#pragma once

// Dense tensors over 64-bit floats with tape-free reverse-mode
// differentiation. Every op result keeps shared pointers to its inputs and a
// closure that pushes its gradient back into them; Tensor::backward() walks
// that DAG once in reverse topological order.

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "bae/errors.hpp"

namespace bae {

using Shape = std::vector<std::size_t>;

/// Added under the square root of every channel variance.
inline constexpr double kStatEpsilon = 1e-6;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  bool leaf = true;
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
};

inline std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false) {
    for (auto d : shape)
      if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
    if (shape.empty()) throw DimensionError("tensor shape must have at least one dimension");
    if (shape_numel(shape) != data.size())
      throw DimensionError("shape " + shape_str(shape) + " does not match " + std::to_string(data.size()) + " values");
    node_ = std::make_shared<detail::Node>();
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->id = detail::next_node_id();
    node_->requires_grad = requires_grad;
    if (requires_grad) node_->grad.assign(node_->data.size(), 0.0);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) { return full(std::move(shape), 0.0, requires_grad); }
  static Tensor ones(Shape shape, bool requires_grad = false) { return full(std::move(shape), 1.0, requires_grad); }
  static Tensor scalar(double value, bool requires_grad = false) { return Tensor({1}, {value}, requires_grad); }
  static Tensor vector(std::vector<double> values, bool requires_grad = false) {
    auto n = values.size();
    return Tensor({n}, std::move(values), requires_grad);
  }
  static Tensor eye(std::size_t n) {
    Tensor t = zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) t.node_->data[i * n + i] = 1.0;
    return t;
  }

  bool valid() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  std::uint64_t id() const { return node_->id; }

  std::span<const double> data() const { return node_->data; }
  /// Mutable view for in-place parameter updates; only meaningful on leaves.
  std::span<double> data_mut() { return node_->data; }
  const std::vector<double>& values() const { return node_->data; }
  double item() const {
    if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
    return node_->data[0];
  }
  double operator[](std::size_t i) const { return node_->data[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->leaf; }
  void set_requires_grad(bool on) {
    if (!node_->leaf) throw ContractError("requires_grad can only be toggled on leaf tensors");
    node_->requires_grad = on;
    if (on && node_->grad.empty()) node_->grad.assign(numel(), 0.0);
    if (!on) node_->grad.clear();
  }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  /// Copy of the values with no graph attached.
  Tensor detach() const { return Tensor(shape(), node_->data, false); }

  /// Back-propagates d(this)/d(leaf) into every grad-requiring leaf, adding to
  /// whatever the leaves already hold. Returns the number of graph nodes
  /// visited.
  std::size_t backward() const;

  detail::Node& node() const { return *node_; }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline Tensor make_result(Shape shape, std::vector<double> data, std::vector<std::shared_ptr<Node>> inputs,
                          std::function<void(Node&)> backward) {
  Tensor out(std::move(shape), std::move(data), false);
  bool needs = std::any_of(inputs.begin(), inputs.end(), [](const auto& p) { return p->requires_grad; });
  if (needs) {
    auto& n = out.node();
    n.requires_grad = true;
    n.leaf = false;
    n.parents = std::move(inputs);
    n.backward = std::move(backward);
  }
  return out;
}

inline std::vector<double>& grad_of(Node& n) {
  if (n.grad.size() != n.data.size()) n.grad.assign(n.data.size(), 0.0);
  return n.grad;
}

inline void require_finite(const std::vector<double>& v, const char* op) {
  for (double x : v)
    if (!std::isfinite(x)) throw DomainError(std::string(op) + " produced a non-finite value");
}

}  // namespace detail

inline std::size_t Tensor::backward() const {
  if (!valid() || numel() != 1)
    throw ContractError("backward() requires a scalar loss, got " + (valid() ? shape_str(shape()) : "null"));
  if (!node_->requires_grad) return 0;

  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
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
  for (auto* n : order) {
    if (!n->leaf)
      n->grad.assign(n->data.size(), 0.0);
    else if (n->grad.size() != n->data.size())
      n->grad.assign(n->data.size(), 0.0);
  }
  node_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward) (*it)->backward(**it);
  return order.size();
}

// ---------------------------------------------------------------------------
// Broadcasting elementwise binaries

namespace detail {

struct Broadcast {
  Shape out;
  std::vector<std::size_t> a_stride, b_stride;
  enum class Kind { same, a_scalar, b_scalar, general } kind = Kind::general;
};

inline std::vector<std::size_t> contiguous_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

inline Broadcast plan_broadcast(const Shape& a, const Shape& b) {
  Broadcast p;
  if (a == b) {
    p.out = a;
    p.kind = Broadcast::Kind::same;
    return p;
  }
  std::size_t r = std::max(a.size(), b.size());
  Shape pa(r, 1), pb(r, 1);
  std::copy(a.begin(), a.end(), pa.begin() + static_cast<std::ptrdiff_t>(r - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + static_cast<std::ptrdiff_t>(r - b.size()));
  p.out.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1)
      throw DimensionError("shapes " + shape_str(a) + " and " + shape_str(b) + " are not broadcast-compatible");
    p.out[i] = std::max(pa[i], pb[i]);
  }
  if (shape_numel(a) == 1) p.kind = Broadcast::Kind::a_scalar;
  else if (shape_numel(b) == 1) p.kind = Broadcast::Kind::b_scalar;
  auto sa = contiguous_strides(pa), sb = contiguous_strides(pb);
  for (std::size_t i = 0; i < r; ++i) {
    if (pa[i] == 1) sa[i] = 0;
    if (pb[i] == 1) sb[i] = 0;
  }
  p.a_stride = std::move(sa);
  p.b_stride = std::move(sb);
  return p;
}

// Calls f(out_index, a_offset, b_offset) for every output element.
template <class F>
void broadcast_each(const Broadcast& p, F&& f) {
  std::size_t n = shape_numel(p.out);
  switch (p.kind) {
    case Broadcast::Kind::same:
      for (std::size_t i = 0; i < n; ++i) f(i, i, i);
      return;
    case Broadcast::Kind::a_scalar:
      for (std::size_t i = 0; i < n; ++i) f(i, std::size_t{0}, i);
      return;
    case Broadcast::Kind::b_scalar:
      for (std::size_t i = 0; i < n; ++i) f(i, i, std::size_t{0});
      return;
    case Broadcast::Kind::general:
      break;
  }
  std::size_t r = p.out.size();
  std::vector<std::size_t> idx(r, 0);
  std::size_t ao = 0, bo = 0;
  for (std::size_t i = 0; i < n; ++i) {
    f(i, ao, bo);
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      ao += p.a_stride[d];
      bo += p.b_stride[d];
      if (idx[d] < p.out[d]) break;
      ao -= p.a_stride[d] * idx[d];
      bo -= p.b_stride[d] * idx[d];
      idx[d] = 0;
    }
  }
}

enum class BinaryOp { add, sub, mul, div };

inline Tensor binary(const Tensor& a, const Tensor& b, BinaryOp op) {
  auto plan = plan_broadcast(a.shape(), b.shape());
  std::vector<double> out(shape_numel(plan.out));
  const auto& av = a.values();
  const auto& bv = b.values();
  switch (op) {
    case BinaryOp::add:
      broadcast_each(plan, [&](std::size_t i, std::size_t x, std::size_t y) { out[i] = av[x] + bv[y]; });
      break;
    case BinaryOp::sub:
      broadcast_each(plan, [&](std::size_t i, std::size_t x, std::size_t y) { out[i] = av[x] - bv[y]; });
      break;
    case BinaryOp::mul:
      broadcast_each(plan, [&](std::size_t i, std::size_t x, std::size_t y) { out[i] = av[x] * bv[y]; });
      break;
    case BinaryOp::div:
      broadcast_each(plan, [&](std::size_t i, std::size_t x, std::size_t y) { out[i] = av[x] / bv[y]; });
      break;
  }
  auto pa = a.node_ptr(), pb = b.node_ptr();
  return make_result(plan.out, std::move(out), {pa, pb}, [pa, pb, plan, op](Node& self) {
    const auto& g = self.grad;
    bool ga_on = pa->requires_grad, gb_on = pb->requires_grad;
    auto* ga = ga_on ? &grad_of(*pa) : nullptr;
    auto* gb = gb_on ? &grad_of(*pb) : nullptr;
    const auto& av = pa->data;
    const auto& bv = pb->data;
    broadcast_each(plan, [&](std::size_t i, std::size_t x, std::size_t y) {
      switch (op) {
        case BinaryOp::add:
          if (ga) (*ga)[x] += g[i];
          if (gb) (*gb)[y] += g[i];
          break;
        case BinaryOp::sub:
          if (ga) (*ga)[x] += g[i];
          if (gb) (*gb)[y] -= g[i];
          break;
        case BinaryOp::mul:
          if (ga) (*ga)[x] += g[i] * bv[y];
          if (gb) (*gb)[y] += g[i] * av[x];
          break;
        case BinaryOp::div:
          if (ga) (*ga)[x] += g[i] / bv[y];
          if (gb) (*gb)[y] -= g[i] * av[x] / (bv[y] * bv[y]);
          break;
      }
    });
  });
}

// Elementwise unary op; `deriv(x, y)` is dy/dx given input and output.
template <class Fwd, class Deriv>
Tensor unary(const Tensor& a, Fwd fwd, Deriv deriv) {
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  auto pa = a.node_ptr();
  return make_result(a.shape(), std::move(out), {pa}, [pa, deriv](Node& self) {
    auto& ga = grad_of(*pa);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * deriv(pa->data[i], self.data[i]);
  });
}

inline double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::BinaryOp::add); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::BinaryOp::sub); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::BinaryOp::mul); }
inline Tensor div(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::BinaryOp::div); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double s) { return add(a, Tensor::scalar(s)); }
inline Tensor operator+(double s, const Tensor& a) { return add(Tensor::scalar(s), a); }
inline Tensor operator-(const Tensor& a, double s) { return sub(a, Tensor::scalar(s)); }
inline Tensor operator-(double s, const Tensor& a) { return sub(Tensor::scalar(s), a); }
inline Tensor operator*(const Tensor& a, double s) { return mul(a, Tensor::scalar(s)); }
inline Tensor operator*(double s, const Tensor& a) { return mul(Tensor::scalar(s), a); }
inline Tensor operator/(const Tensor& a, double s) { return div(a, Tensor::scalar(s)); }
inline Tensor operator-(const Tensor& a) {
  return detail::unary(a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

/// relu with subgradient 0 at exactly 0.
inline Tensor relu(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}
inline Tensor sigmoid(const Tensor& a) {
  return detail::unary(a, detail::stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}
inline Tensor exp(const Tensor& a) {
  auto out = detail::unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
  detail::require_finite(out.values(), "exp");
  return out;
}
inline Tensor log(const Tensor& a) {
  for (double x : a.values())
    if (!(x > 0)) throw DomainError("log of non-positive value " + std::to_string(x));
  return detail::unary(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}
inline Tensor square(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}
inline Tensor sqrt(const Tensor& a) {
  for (double x : a.values())
    if (!(x > 0)) throw DomainError("sqrt of non-positive value " + std::to_string(x));
  return detail::unary(
      a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}
inline Tensor tanh(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}
/// log(1 + e^x), evaluated without overflow.
inline Tensor softplus(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); },
      [](double x, double) { return detail::stable_sigmoid(x); });
}
inline Tensor log_sigmoid(const Tensor& a) { return -softplus(-a); }

/// min(hi, max(lo, x)); gradient 1 on [lo, hi] and 0 outside.
inline Tensor clip(const Tensor& a, double lo, double hi) {
  return detail::unary(
      a, [lo, hi](double x) { return std::min(hi, std::max(lo, x)); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}
inline Tensor clamp_min(const Tensor& a, double lo) {
  return detail::unary(
      a, [lo](double x) { return std::max(lo, x); }, [lo](double x, double) { return x >= lo ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Shape manipulation and reductions

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw DimensionError("cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  auto pa = a.node_ptr();
  return detail::make_result(std::move(shape), a.values(), {pa}, [pa](detail::Node& self) {
    auto& ga = detail::grad_of(*pa);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
  });
}

inline Tensor sum(const Tensor& a) {
  double s = 0;
  for (double x : a.values()) s += x;
  auto pa = a.node_ptr();
  return detail::make_result({1}, {s}, {pa}, [pa](detail::Node& self) {
    auto& ga = detail::grad_of(*pa);
    for (auto& g : ga) g += self.grad[0];
  });
}

inline Tensor mean(const Tensor& a) { return sum(a) * (1.0 / static_cast<double>(a.numel())); }

namespace detail {
struct AxisSplit {
  std::size_t outer, len, inner;
};
inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  AxisSplit r{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}
}  // namespace detail

/// Sum along one axis, keeping it with extent 1.
inline Tensor sum_axis(const Tensor& a, std::size_t axis) {
  auto sp = detail::split_axis(a.shape(), axis);
  Shape out_shape = a.shape();
  out_shape[axis] = 1;
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  const auto& av = a.values();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t k = 0; k < sp.len; ++k)
      for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += av[(o * sp.len + k) * sp.inner + i];
  auto pa = a.node_ptr();
  return detail::make_result(std::move(out_shape), std::move(out), {pa}, [pa, sp](detail::Node& self) {
    auto& ga = detail::grad_of(*pa);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t k = 0; k < sp.len; ++k)
        for (std::size_t i = 0; i < sp.inner; ++i) ga[(o * sp.len + k) * sp.inner + i] += self.grad[o * sp.inner + i];
  });
}

inline Tensor mean_axis(const Tensor& a, std::size_t axis) {
  return sum_axis(a, axis) * (1.0 / static_cast<double>(a.dim(axis)));
}

/// Sub-range [start, start+length) along one axis.
inline Tensor narrow(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
  auto sp = detail::split_axis(a.shape(), axis);
  if (length == 0 || start + length > sp.len)
    throw DimensionError("narrow range out of bounds for " + shape_str(a.shape()));
  Shape out_shape = a.shape();
  out_shape[axis] = length;
  std::vector<double> out(sp.outer * length * sp.inner);
  const auto& av = a.values();
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(av.begin() + static_cast<std::ptrdiff_t>((o * sp.len + start) * sp.inner), length * sp.inner,
                out.begin() + static_cast<std::ptrdiff_t>(o * length * sp.inner));
  auto pa = a.node_ptr();
  return detail::make_result(std::move(out_shape), std::move(out), {pa}, [pa, sp, start, length](detail::Node& self) {
    auto& ga = detail::grad_of(*pa);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t j = 0; j < length * sp.inner; ++j)
        ga[(o * sp.len + start) * sp.inner + j] += self.grad[o * length * sp.inner + j];
  });
}

/// Concatenation along one axis; all other extents must agree.
inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  Shape out_shape = parts[0].shape();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != out_shape.size()) throw DimensionError("concat rank mismatch");
    for (std::size_t d = 0; d < out_shape.size(); ++d)
      if (d != axis && p.dim(d) != out_shape[d]) throw DimensionError("concat extent mismatch");
    total += p.dim(axis);
  }
  out_shape[axis] = total;
  auto sp = detail::split_axis(out_shape, axis);
  std::vector<double> out(shape_numel(out_shape));
  std::vector<std::shared_ptr<detail::Node>> inputs;
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::size_t len = p.dim(axis);
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(p.values().begin() + static_cast<std::ptrdiff_t>(o * len * sp.inner), len * sp.inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * sp.len + off) * sp.inner));
    inputs.push_back(p.node_ptr());
    offsets.push_back(off);
    off += len;
  }
  auto captured = inputs;
  return detail::make_result(std::move(out_shape), std::move(out), std::move(inputs),
                             [captured, offsets, sp, axis](detail::Node& self) {
                               for (std::size_t k = 0; k < captured.size(); ++k) {
                                 auto& p = *captured[k];
                                 if (!p.requires_grad) continue;
                                 auto& gp = detail::grad_of(p);
                                 std::size_t len = p.shape[axis];
                                 for (std::size_t o = 0; o < sp.outer; ++o)
                                   for (std::size_t j = 0; j < len * sp.inner; ++j)
                                     gp[o * len * sp.inner + j] += self.grad[(o * sp.len + offsets[k]) * sp.inner + j];
                               }
                             });
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul of " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n);
  detail::MapR(out.data(), m, n).noalias() = detail::CMapR(a.values().data(), m, k) * detail::CMapR(b.values().data(), k, n);
  auto pa = a.node_ptr(), pb = b.node_ptr();
  return detail::make_result({m, n}, std::move(out), {pa, pb}, [pa, pb, m, k, n](detail::Node& self) {
    detail::CMapR g(self.grad.data(), m, n);
    if (pa->requires_grad)
      detail::MapR(detail::grad_of(*pa).data(), m, k).noalias() += g * detail::CMapR(pb->data.data(), k, n).transpose();
    if (pb->requires_grad)
      detail::MapR(detail::grad_of(*pb).data(), k, n).noalias() += detail::CMapR(pa->data.data(), m, k).transpose() * g;
  });
}

/// a * b^T without materialising the transpose; b is n x k.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
    throw DimensionError("matmul_nt of " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  std::vector<double> out(m * n);
  detail::MapR(out.data(), m, n).noalias() =
      detail::CMapR(a.values().data(), m, k) * detail::CMapR(b.values().data(), n, k).transpose();
  auto pa = a.node_ptr(), pb = b.node_ptr();
  return detail::make_result({m, n}, std::move(out), {pa, pb}, [pa, pb, m, k, n](detail::Node& self) {
    detail::CMapR g(self.grad.data(), m, n);
    if (pa->requires_grad)
      detail::MapR(detail::grad_of(*pa).data(), m, k).noalias() += g * detail::CMapR(pb->data.data(), n, k);
    if (pb->requires_grad)
      detail::MapR(detail::grad_of(*pb).data(), n, k).noalias() += g.transpose() * detail::CMapR(pa->data.data(), m, k);
  });
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw DimensionError("transpose expects a matrix, got " + shape_str(a.shape()));
  std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  detail::MapR(out.data(), n, m) = detail::CMapR(a.values().data(), m, n).transpose();
  auto pa = a.node_ptr();
  return detail::make_result({n, m}, std::move(out), {pa}, [pa, m, n](detail::Node& self) {
    detail::MapR(detail::grad_of(*pa).data(), m, n) += detail::CMapR(self.grad.data(), n, m).transpose();
  });
}

/// Euclidean norm of every row of a matrix, as a column. The gradient at a
/// zero row is taken to be zero.
inline Tensor row_norms(const Tensor& a) {
  if (a.rank() != 2) throw DimensionError("row_norms expects a matrix");
  std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < n; ++j) s += a[i * n + j] * a[i * n + j];
    out[i] = std::sqrt(s);
  }
  auto pa = a.node_ptr();
  return detail::make_result({m, 1}, std::move(out), {pa}, [pa, m, n](detail::Node& self) {
    auto& ga = detail::grad_of(*pa);
    for (std::size_t i = 0; i < m; ++i) {
      if (self.data[i] == 0) continue;
      double s = self.grad[i] / self.data[i];
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += s * pa->data[i * n + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Image ops on C x H x W tensors

namespace detail {

// cols is (C*k*k) x (H*W); zero padding of k/2 on each side.
inline void im2col(const double* x, std::size_t c, std::size_t h, std::size_t w, std::size_t k, double* cols) {
  std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
  std::size_t hw = h * w;
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        double* row = cols + ((ci * k + ky) * k + kx) * hw;
        for (std::size_t y = 0; y < h; ++y) {
          std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + ky) - pad;
          for (std::size_t xx = 0; xx < w; ++xx) {
            std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx + kx) - pad;
            bool inside = sy >= 0 && sy < static_cast<std::ptrdiff_t>(h) && sx >= 0 && sx < static_cast<std::ptrdiff_t>(w);
            row[y * w + xx] = inside ? x[(ci * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)] : 0.0;
          }
        }
      }
}

inline void col2im_add(const double* cols, std::size_t c, std::size_t h, std::size_t w, std::size_t k, double* x) {
  std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
  std::size_t hw = h * w;
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        const double* row = cols + ((ci * k + ky) * k + kx) * hw;
        for (std::size_t y = 0; y < h; ++y) {
          std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + ky) - pad;
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t xx = 0; xx < w; ++xx) {
            std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx + kx) - pad;
            if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(w)) continue;
            x[(ci * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)] += row[y * w + xx];
          }
        }
      }
}

}  // namespace detail

/// Same-padded, stride-1 cross-correlation of a C_in x H x W map with
/// C_out x C_in x k x k kernels (k odd).
inline Tensor conv2d(const Tensor& x, const Tensor& kernels) {
  if (x.rank() != 3 || kernels.rank() != 4)
    throw DimensionError("conv2d expects CxHxW input and OxIxkxk kernels, got " + shape_str(x.shape()) + " and " +
                         shape_str(kernels.shape()));
  std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  std::size_t co = kernels.dim(0), k = kernels.dim(2);
  if (kernels.dim(1) != c)
    throw DimensionError("conv2d channel mismatch: input has " + std::to_string(c) + ", kernels expect " +
                         std::to_string(kernels.dim(1)));
  if (kernels.dim(3) != k || k % 2 == 0) throw DimensionError("conv2d kernels must be square with odd size");
  std::size_t ckk = c * k * k, hw = h * w;
  std::vector<double> cols(ckk * hw);
  detail::im2col(x.values().data(), c, h, w, k, cols.data());
  std::vector<double> out(co * hw);
  detail::MapR(out.data(), co, hw).noalias() =
      detail::CMapR(kernels.values().data(), co, ckk) * detail::CMapR(cols.data(), ckk, hw);
  auto px = x.node_ptr(), pk = kernels.node_ptr();
  return detail::make_result({co, h, w}, std::move(out), {px, pk},
                             [px, pk, cols = std::move(cols), c, h, w, k, co, ckk, hw](detail::Node& self) {
                               detail::CMapR g(self.grad.data(), co, hw);
                               if (pk->requires_grad)
                                 detail::MapR(detail::grad_of(*pk).data(), co, ckk).noalias() +=
                                     g * detail::CMapR(cols.data(), ckk, hw).transpose();
                               if (px->requires_grad) {
                                 std::vector<double> gcols(ckk * hw);
                                 detail::MapR(gcols.data(), ckk, hw).noalias() =
                                     detail::CMapR(pk->data.data(), co, ckk).transpose() * g;
                                 detail::col2im_add(gcols.data(), c, h, w, k, detail::grad_of(*px).data());
                               }
                             });
}

/// Adds a per-channel bias of shape [C] to a C x H x W map.
inline Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  if (x.rank() != 3 || bias.rank() != 1 || bias.dim(0) != x.dim(0))
    throw DimensionError("channel bias " + shape_str(bias.shape()) + " does not fit " + shape_str(x.shape()));
  return x + reshape(bias, {bias.dim(0), 1, 1});
}

/// 2x2 average pooling with stride 2.
inline Tensor avg_pool2(const Tensor& x) {
  if (x.rank() != 3 || x.dim(1) % 2 || x.dim(2) % 2)
    throw DimensionError("avg_pool2 expects CxHxW with even H and W, got " + shape_str(x.shape()));
  std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2), oh = h / 2, ow = w / 2;
  std::vector<double> out(c * oh * ow);
  const auto& xv = x.values();
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx) {
        const double* base = &xv[(ci * h + 2 * y) * w + 2 * xx];
        out[(ci * oh + y) * ow + xx] = 0.25 * (base[0] + base[1] + base[w] + base[w + 1]);
      }
  auto px = x.node_ptr();
  return detail::make_result({c, oh, ow}, std::move(out), {px}, [px, c, h, w, oh, ow](detail::Node& self) {
    auto& gx = detail::grad_of(*px);
    for (std::size_t ci = 0; ci < c; ++ci)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx) {
          double g = 0.25 * self.grad[(ci * oh + y) * ow + xx];
          double* base = &gx[(ci * h + 2 * y) * w + 2 * xx];
          base[0] += g;
          base[1] += g;
          base[w] += g;
          base[w + 1] += g;
        }
  });
}

/// Nearest-neighbour 2x up-sampling.
inline Tensor upsample2(const Tensor& x) {
  if (x.rank() != 3) throw DimensionError("upsample2 expects CxHxW, got " + shape_str(x.shape()));
  std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2), oh = 2 * h, ow = 2 * w;
  std::vector<double> out(c * oh * ow);
  const auto& xv = x.values();
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx) out[(ci * oh + y) * ow + xx] = xv[(ci * h + y / 2) * w + xx / 2];
  auto px = x.node_ptr();
  return detail::make_result({c, oh, ow}, std::move(out), {px}, [px, c, h, w, oh, ow](detail::Node& self) {
    auto& gx = detail::grad_of(*px);
    for (std::size_t ci = 0; ci < c; ++ci)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx) gx[(ci * h + y / 2) * w + xx / 2] += self.grad[(ci * oh + y) * ow + xx];
  });
}

struct ChannelStats {
  Tensor mu;     // [C]
  Tensor sigma;  // [C]
};

/// Per-channel mean and sqrt(population variance + kStatEpsilon) over the
/// spatial positions of a C x H x W map.
inline ChannelStats channel_stats(const Tensor& x) {
  if (x.rank() != 3) throw DimensionError("channel_stats expects CxHxW, got " + shape_str(x.shape()));
  std::size_t c = x.dim(0), n = x.dim(1) * x.dim(2);
  Tensor flat = reshape(x, {c, n});
  Tensor mu = mean_axis(flat, 1);
  Tensor var = mean_axis(square(flat - mu), 1);
  Tensor sigma = sqrt(var + kStatEpsilon);
  return {reshape(mu, {c}), reshape(sigma, {c})};
}

/// (x - mu(x)) / sigma(x) per channel.
inline Tensor instance_normalize(const Tensor& x) {
  auto [mu, sigma] = channel_stats(x);
  std::size_t c = x.dim(0);
  return (x - reshape(mu, {c, 1, 1})) / reshape(sigma, {c, 1, 1});
}

inline bool all_finite(const Tensor& t) {
  return std::all_of(t.values().begin(), t.values().end(), [](double v) { return std::isfinite(v); });
}

}  // namespace bae
