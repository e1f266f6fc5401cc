#pragma once

// Dense N-dimensional arrays with reverse-mode differentiation.
//
// Tensor<S> is a cheap handle onto a graph node holding the value buffer and,
// when gradients are enabled, the backward closure linking it to its parents.
// Tensors are immutable once created; every operation returns a fresh node.
// backward() may be called on scalar results and populates grad buffers on
// every reachable node with requires_grad set.
//
// S is float for training, double for gradient checks.

#include <algorithm>
#include <array>
#include <cassert>
#include <cstring>
#include <functional>
#include <memory>
#include <unordered_set>

#include "vistr/common.hpp"

namespace vistr {

inline bool& grad_mode() {
  static thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev; }
};

template <typename S>
struct TensorNode {
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;  // allocated lazily during backward
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode<S>>> parents;
  // Reads this->grad and accumulates into parents' grads. Must not capture an
  // owning reference to this node.
  std::function<void(TensorNode<S>&)> backward;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), S(0));
  }
};

namespace detail {

// Strides of `src` right-aligned against `out`, with 0 where src broadcasts.
inline Shape bc_strides(const Shape& out, const Shape& src) {
  Shape st(out.size(), 0);
  Shape ss = strides_of(src);
  int off = static_cast<int>(out.size()) - static_cast<int>(src.size());
  for (size_t i = 0; i < src.size(); ++i) {
    if (src[i] != 1) st[off + i] = ss[i];
  }
  return st;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (size_t i = 0; i < r; ++i) {
    int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      throw std::invalid_argument("broadcast: incompatible shapes " + shape_str(a) +
                                  " vs " + shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Odometer walk over `shape`, calling f(out_index, offset_a, offset_b).
template <class F>
void walk2(const Shape& shape, const Shape& sa, const Shape& sb, F&& f) {
  int64_t total = numel_of(shape);
  int r = static_cast<int>(shape.size());
  if (r == 0) {
    f(0, 0, 0);
    return;
  }
  std::vector<int64_t> idx(r, 0);
  int64_t oa = 0, ob = 0;
  for (int64_t i = 0; i < total; ++i) {
    f(i, oa, ob);
    for (int d = r - 1; d >= 0; --d) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < shape[d]) break;
      idx[d] = 0;
      oa -= sa[d] * shape[d];
      ob -= sb[d] * shape[d];
    }
  }
}

template <class F>
void walk1(const Shape& shape, const Shape& sa, F&& f) {
  walk2(shape, sa, sa, [&](int64_t i, int64_t oa, int64_t) { f(i, oa); });
}

// Accumulate grad (laid out as gshape) into a buffer of shape tshape, summing
// over broadcast dimensions.
template <typename S>
void reduce_into(const S* g, const Shape& gshape, S* target, const Shape& tshape) {
  Shape st = bc_strides(gshape, tshape);
  walk1(gshape, st, [&](int64_t i, int64_t ot) { target[ot] += g[i]; });
}

}  // namespace detail

template <typename S>
class Tensor {
 public:
  using Node = TensorNode<S>;
  using NodePtr = std::shared_ptr<Node>;

  Tensor() = default;
  explicit Tensor(NodePtr n) : node_(std::move(n)) {}

  static Tensor from_data(Shape shape, std::vector<S> data, bool requires_grad = false) {
    if (numel_of(shape) != static_cast<int64_t>(data.size()))
      throw std::invalid_argument("from_data: shape " + shape_str(shape) +
                                  " does not match data length");
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<S> v(static_cast<size_t>(numel_of(shape)), S(0));
    return from_data(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor full(Shape shape, S value, bool requires_grad = false) {
    std::vector<S> v(static_cast<size_t>(numel_of(shape)), value);
    return from_data(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor ones(Shape shape) { return full(std::move(shape), S(1)); }

  static Tensor scalar(S value) { return from_data({1}, {value}); }

  static Tensor uniform(Shape shape, Rng& rng, S lo, S hi, bool requires_grad = false) {
    std::vector<S> v(static_cast<size_t>(numel_of(shape)));
    for (auto& x : v) x = static_cast<S>(rng.uniform(lo, hi));
    return from_data(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor normal(Shape shape, Rng& rng, S mean, S stddev, bool requires_grad = false) {
    std::vector<S> v(static_cast<size_t>(numel_of(shape)));
    for (auto& x : v) x = static_cast<S>(rng.normal(mean, stddev));
    return from_data(std::move(shape), std::move(v), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int64_t numel() const { return static_cast<int64_t>(node_->value.size()); }
  int64_t dim(int i) const {
    if (i < 0) i += rank();
    return node_->shape[i];
  }

  std::vector<S>& values() { return node_->value; }
  const std::vector<S>& values() const { return node_->value; }
  S* data() { return node_->value.data(); }
  const S* data() const { return node_->value.data(); }

  S item() const {
    if (numel() != 1) throw std::invalid_argument("item: tensor is not scalar");
    return node_->value[0];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  Tensor& set_requires_grad(bool rg = true) {
    node_->requires_grad = rg;
    return *this;
  }

  // Copy of the accumulated gradient (zeros if backward never reached it).
  Tensor grad() const {
    std::vector<S> g = node_->grad;
    if (g.empty()) g.assign(node_->value.size(), S(0));
    return from_data(node_->shape, std::move(g));
  }
  std::vector<S>& grad_buffer() { return node_->grad; }
  void zero_grad() { node_->grad.assign(node_->value.size(), S(0)); }

  Tensor detach() const { return from_data(node_->shape, node_->value); }

  // Reverse-mode sweep from a scalar. Children are guaranteed to run before
  // their parents; accumulation order is fixed, so results are deterministic.
  void backward() const {
    if (numel() != 1) throw std::invalid_argument("backward: output must be scalar");
    if (!node_->requires_grad) return;
    std::vector<Node*> order = topo_order();
    node_->ensure_grad();
    node_->grad[0] = S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* n = *it;
      if (n->backward && !n->grad.empty()) n->backward(*n);
    }
  }

  NodePtr node() const { return node_; }

 private:
  std::vector<Node*> topo_order() const {
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    // Iterative post-order DFS over requires_grad parents.
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    visited.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, i] = stack.back();
      if (i < n->parents.size()) {
        Node* p = n->parents[i++].get();
        if (p->requires_grad && !visited.count(p)) {
          visited.insert(p);
          stack.emplace_back(p, 0);
        }
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    return order;
  }

  NodePtr node_;
};

namespace detail {

// Create the output node of an op; record parents/backward only when grads
// are both enabled and needed.
template <typename S>
Tensor<S> make_op(Shape shape, std::vector<S> value,
                  std::initializer_list<Tensor<S>> inputs,
                  std::function<void(TensorNode<S>&)> backward) {
  auto out = Tensor<S>::from_data(std::move(shape), std::move(value));
  bool need = false;
  if (grad_mode()) {
    for (const auto& t : inputs) need = need || t.requires_grad();
  }
  if (need) {
    auto n = out.node();
    n->requires_grad = true;
    for (const auto& t : inputs) n->parents.push_back(t.node());
    n->backward = std::move(backward);
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise unary ops
// ---------------------------------------------------------------------------

template <typename S, class FwdF, class BwdF>
Tensor<S> unary_op(const Tensor<S>& x, FwdF f, BwdF df) {
  // df(x_i, y_i) -> dy/dx at coordinate i
  const auto& xv = x.values();
  std::vector<S> y(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) y[i] = f(xv[i]);
  auto xn = x.node();
  return detail::make_op<S>(
      x.shape(), std::move(y), {x}, [xn, df](TensorNode<S>& self) {
        xn->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
          xn->grad[i] += self.grad[i] * df(xn->value[i], self.value[i]);
      });
}

template <typename S>
Tensor<S> neg(const Tensor<S>& x) {
  return unary_op(x, [](S v) { return -v; }, [](S, S) { return S(-1); });
}

template <typename S>
Tensor<S> exp(const Tensor<S>& x) {
  return unary_op(x, [](S v) { return std::exp(v); }, [](S, S y) { return y; });
}

template <typename S>
Tensor<S> log(const Tensor<S>& x) {
  return unary_op(x, [](S v) { return std::log(v); }, [](S v, S) { return S(1) / v; });
}

template <typename S>
Tensor<S> sqrt(const Tensor<S>& x) {
  return unary_op(x, [](S v) { return std::sqrt(v); },
                  [](S, S y) { return S(0.5) / y; });
}

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
  return unary_op(x, [](S v) { return v > S(0) ? v : S(0); },
                  [](S v, S) { return v > S(0) ? S(1) : S(0); });
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  return unary_op(
      x,
      [](S v) {
        // stable in both tails
        if (v >= S(0)) return S(1) / (S(1) + std::exp(-v));
        S e = std::exp(v);
        return e / (S(1) + e);
      },
      [](S, S y) { return y * (S(1) - y); });
}

// log(1 + exp(x)) without overflow.
template <typename S>
Tensor<S> softplus(const Tensor<S>& x) {
  return unary_op(
      x,
      [](S v) {
        S m = v > S(0) ? v : S(0);
        return m + std::log1p(std::exp(-std::abs(v)));
      },
      [](S v, S) {
        if (v >= S(0)) return S(1) / (S(1) + std::exp(-v));
        S e = std::exp(v);
        return e / (S(1) + e);
      });
}

template <typename S>
Tensor<S> abs(const Tensor<S>& x) {
  return unary_op(x, [](S v) { return std::abs(v); },
                  [](S v, S) { return v >= S(0) ? S(1) : S(-1); });
}

template <typename S>
Tensor<S> pow_scalar(const Tensor<S>& x, S p) {
  return unary_op(
      x, [p](S v) { return std::pow(v, p); },
      [p](S v, S) { return p * std::pow(v, p - S(1)); });
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& x, S c) {
  return unary_op(x, [c](S v) { return v + c; }, [](S, S) { return S(1); });
}

template <typename S>
Tensor<S> mul_scalar(const Tensor<S>& x, S c) {
  return unary_op(x, [c](S v) { return v * c; }, [c](S, S) { return c; });
}

// ---------------------------------------------------------------------------
// Elementwise binary ops with broadcasting
// ---------------------------------------------------------------------------

namespace detail {

// dfa/dfb give local derivatives from (a_i, b_i, y_i).
template <typename S, class FwdF, class DaF, class DbF>
Tensor<S> binary_op(const Tensor<S>& a, const Tensor<S>& b, FwdF f, DaF dfa, DbF dfb) {
  Shape os = broadcast_shape(a.shape(), b.shape());
  int64_t total = numel_of(os);
  std::vector<S> y(static_cast<size_t>(total));
  const S* ap = a.data();
  const S* bp = b.data();
  if (a.shape() == b.shape()) {
    for (int64_t i = 0; i < total; ++i) y[i] = f(ap[i], bp[i]);
  } else {
    Shape sa = bc_strides(os, a.shape());
    Shape sb = bc_strides(os, b.shape());
    walk2(os, sa, sb, [&](int64_t i, int64_t oa, int64_t ob) { y[i] = f(ap[oa], bp[ob]); });
  }
  auto an = a.node();
  auto bn = b.node();
  Shape ash = a.shape(), bsh = b.shape();
  return make_op<S>(
      os, std::move(y), {a, b}, [an, bn, ash, bsh, os, dfa, dfb](TensorNode<S>& self) {
        bool need_a = an->requires_grad;
        bool need_b = bn->requires_grad;
        if (need_a) an->ensure_grad();
        if (need_b) bn->ensure_grad();
        if (ash == bsh) {
          int64_t total = static_cast<int64_t>(self.grad.size());
          for (int64_t i = 0; i < total; ++i) {
            S g = self.grad[i];
            if (need_a) an->grad[i] += g * dfa(an->value[i], bn->value[i], self.value[i]);
            if (need_b) bn->grad[i] += g * dfb(an->value[i], bn->value[i], self.value[i]);
          }
          return;
        }
        Shape sa = bc_strides(os, ash);
        Shape sb = bc_strides(os, bsh);
        walk2(os, sa, sb, [&](int64_t i, int64_t oa, int64_t ob) {
          S g = self.grad[i];
          if (need_a) an->grad[oa] += g * dfa(an->value[oa], bn->value[ob], self.value[i]);
          if (need_b) bn->grad[ob] += g * dfb(an->value[oa], bn->value[ob], self.value[i]);
        });
      });
}

}  // namespace detail

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op(
      a, b, [](S x, S y) { return x + y; }, [](S, S, S) { return S(1); },
      [](S, S, S) { return S(1); });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op(
      a, b, [](S x, S y) { return x - y; }, [](S, S, S) { return S(1); },
      [](S, S, S) { return S(-1); });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op(
      a, b, [](S x, S y) { return x * y; }, [](S, S y, S) { return y; },
      [](S x, S, S) { return x; });
}

template <typename S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op(
      a, b, [](S x, S y) { return x / y; }, [](S, S y, S) { return S(1) / y; },
      [](S x, S y, S) { return -x / (y * y); });
}

template <typename S>
Tensor<S> minimum(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op(
      a, b, [](S x, S y) { return x < y ? x : y; },
      [](S x, S y, S) { return x <= y ? S(1) : S(0); },
      [](S x, S y, S) { return x <= y ? S(0) : S(1); });
}

template <typename S>
Tensor<S> maximum(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op(
      a, b, [](S x, S y) { return x > y ? x : y; },
      [](S x, S y, S) { return x >= y ? S(1) : S(0); },
      [](S x, S y, S) { return x >= y ? S(0) : S(1); });
}

template <typename S>
Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) { return add(a, b); }
template <typename S>
Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) { return sub(a, b); }
template <typename S>
Tensor<S> operator*(const Tensor<S>& a, const Tensor<S>& b) { return mul(a, b); }
template <typename S>
Tensor<S> operator/(const Tensor<S>& a, const Tensor<S>& b) { return div(a, b); }
template <typename S>
Tensor<S> operator-(const Tensor<S>& a) { return neg(a); }
template <typename S>
Tensor<S> operator+(const Tensor<S>& a, S c) { return add_scalar(a, c); }
template <typename S>
Tensor<S> operator+(S c, const Tensor<S>& a) { return add_scalar(a, c); }
template <typename S>
Tensor<S> operator-(const Tensor<S>& a, S c) { return add_scalar(a, -c); }
template <typename S>
Tensor<S> operator-(S c, const Tensor<S>& a) { return add_scalar(neg(a), c); }
template <typename S>
Tensor<S> operator*(const Tensor<S>& a, S c) { return mul_scalar(a, c); }
template <typename S>
Tensor<S> operator*(S c, const Tensor<S>& a) { return mul_scalar(a, c); }
template <typename S>
Tensor<S> operator/(const Tensor<S>& a, S c) { return mul_scalar(a, S(1) / c); }

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
  S acc = 0;
  for (S v : x.values()) acc += v;
  auto xn = x.node();
  return detail::make_op<S>({1}, {acc}, {x}, [xn](TensorNode<S>& self) {
    xn->ensure_grad();
    S g = self.grad[0];
    for (auto& gv : xn->grad) gv += g;
  });
}

namespace detail {

inline Shape normalize_axes(const Shape& shape, std::vector<int> axes) {
  Shape out;
  for (int a : axes) {
    if (a < 0) a += static_cast<int>(shape.size());
    if (a < 0 || a >= static_cast<int>(shape.size()))
      throw std::invalid_argument("reduction: axis out of range");
    out.push_back(a);
  }
  std::sort(out.begin(), out.end());
  if (std::adjacent_find(out.begin(), out.end()) != out.end())
    throw std::invalid_argument("reduction: duplicate axis");
  return out;
}

}  // namespace detail

template <typename S>
Tensor<S> sum(const Tensor<S>& x, std::vector<int> axes_in, bool keepdim = false) {
  Shape axes = detail::normalize_axes(x.shape(), axes_in);
  Shape kshape = x.shape();
  for (int64_t a : axes) kshape[a] = 1;
  int64_t out_n = numel_of(kshape);
  std::vector<S> y(static_cast<size_t>(out_n), S(0));
  Shape st = detail::bc_strides(x.shape(), kshape);
  const S* xp = x.data();
  detail::walk1(x.shape(), st, [&](int64_t i, int64_t oo) { y[oo] += xp[i]; });
  Shape oshape = kshape;
  if (!keepdim) {
    oshape.clear();
    for (size_t d = 0; d < x.shape().size(); ++d)
      if (std::find(axes.begin(), axes.end(), static_cast<int64_t>(d)) == axes.end())
        oshape.push_back(x.shape()[d]);
    if (oshape.empty()) oshape.push_back(1);
  }
  auto xn = x.node();
  Shape xshape = x.shape();
  return detail::make_op<S>(
      oshape, std::move(y), {x}, [xn, xshape, kshape](TensorNode<S>& self) {
        xn->ensure_grad();
        Shape st = detail::bc_strides(xshape, kshape);
        detail::walk1(xshape, st,
                      [&](int64_t i, int64_t oo) { xn->grad[i] += self.grad[oo]; });
      });
}

template <typename S>
Tensor<S> mean(const Tensor<S>& x) {
  return sum(x) * (S(1) / static_cast<S>(x.numel()));
}

template <typename S>
Tensor<S> mean(const Tensor<S>& x, std::vector<int> axes, bool keepdim = false) {
  Shape norm = detail::normalize_axes(x.shape(), axes);
  int64_t cnt = 1;
  for (int64_t a : norm) cnt *= x.shape()[a];
  return sum(x, std::move(axes), keepdim) * (S(1) / static_cast<S>(cnt));
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  // one extent may be -1
  int64_t known = 1;
  int infer = -1;
  for (size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw std::invalid_argument("reshape: multiple -1 extents");
      infer = static_cast<int>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0) shape[infer] = x.numel() / known;
  if (numel_of(shape) != x.numel())
    throw std::invalid_argument("reshape: element count mismatch " + shape_str(x.shape()) +
                                " -> " + shape_str(shape));
  auto xn = x.node();
  return detail::make_op<S>(std::move(shape), x.values(), {x}, [xn](TensorNode<S>& self) {
    xn->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
  });
}

template <typename S>
Tensor<S> permute(const Tensor<S>& x, std::vector<int> perm) {
  int r = x.rank();
  if (static_cast<int>(perm.size()) != r)
    throw std::invalid_argument("permute: rank mismatch");
  std::vector<bool> seen(r, false);
  Shape oshape(r);
  for (int i = 0; i < r; ++i) {
    int p = perm[i] < 0 ? perm[i] + r : perm[i];
    if (p < 0 || p >= r || seen[p]) throw std::invalid_argument("permute: bad axes");
    seen[p] = true;
    perm[i] = p;
    oshape[i] = x.shape()[p];
  }
  Shape xstr = strides_of(x.shape());
  Shape src_strides(r);
  for (int i = 0; i < r; ++i) src_strides[i] = xstr[perm[i]];
  std::vector<S> y(static_cast<size_t>(x.numel()));
  const S* xp = x.data();
  detail::walk1(oshape, src_strides, [&](int64_t i, int64_t ox) { y[i] = xp[ox]; });
  auto xn = x.node();
  return detail::make_op<S>(
      oshape, std::move(y), {x}, [xn, oshape, src_strides](TensorNode<S>& self) {
        xn->ensure_grad();
        detail::walk1(oshape, src_strides,
                      [&](int64_t i, int64_t ox) { xn->grad[ox] += self.grad[i]; });
      });
}

// Half-open [start, stop) per axis; entries with stop=-1 mean "to the end".
template <typename S>
Tensor<S> slice(const Tensor<S>& x, std::vector<std::pair<int64_t, int64_t>> ranges) {
  int r = x.rank();
  if (static_cast<int>(ranges.size()) > r)
    throw std::invalid_argument("slice: too many ranges");
  ranges.resize(r, {0, -1});
  Shape oshape(r);
  Shape start(r);
  for (int i = 0; i < r; ++i) {
    int64_t s = ranges[i].first;
    int64_t e = ranges[i].second < 0 ? x.shape()[i] : ranges[i].second;
    if (s < 0 || e > x.shape()[i] || s > e)
      throw std::invalid_argument("slice: range out of bounds on axis " + std::to_string(i));
    start[i] = s;
    oshape[i] = e - s;
  }
  Shape xstr = strides_of(x.shape());
  int64_t base = 0;
  for (int i = 0; i < r; ++i) base += start[i] * xstr[i];
  std::vector<S> y(static_cast<size_t>(numel_of(oshape)));
  const S* xp = x.data();
  detail::walk1(oshape, xstr, [&](int64_t i, int64_t ox) { y[i] = xp[base + ox]; });
  auto xn = x.node();
  return detail::make_op<S>(
      oshape, std::move(y), {x}, [xn, oshape, xstr, base](TensorNode<S>& self) {
        xn->ensure_grad();
        detail::walk1(oshape, xstr,
                      [&](int64_t i, int64_t ox) { xn->grad[base + ox] += self.grad[i]; });
      });
}

template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& xs, int axis) {
  if (xs.empty()) throw std::invalid_argument("concat: no inputs");
  int r = xs[0].rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw std::invalid_argument("concat: bad axis");
  Shape oshape = xs[0].shape();
  int64_t total_axis = 0;
  for (const auto& t : xs) {
    if (t.rank() != r) throw std::invalid_argument("concat: rank mismatch");
    for (int i = 0; i < r; ++i)
      if (i != axis && t.shape()[i] != oshape[i])
        throw std::invalid_argument("concat: shape mismatch off-axis");
    total_axis += t.shape()[axis];
  }
  oshape[axis] = total_axis;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= oshape[i];
  for (int i = axis + 1; i < r; ++i) inner *= oshape[i];
  std::vector<S> y(static_cast<size_t>(numel_of(oshape)));
  int64_t off_axis = 0;
  for (const auto& t : xs) {
    int64_t ta = t.shape()[axis];
    const S* tp = t.data();
    for (int64_t o = 0; o < outer; ++o) {
      std::memcpy(y.data() + ((o * total_axis + off_axis) * inner),
                  tp + o * ta * inner, sizeof(S) * static_cast<size_t>(ta * inner));
    }
    off_axis += ta;
  }
  std::vector<typename Tensor<S>::NodePtr> nodes;
  for (const auto& t : xs) nodes.push_back(t.node());
  std::vector<int64_t> axis_sizes;
  for (const auto& t : xs) axis_sizes.push_back(t.shape()[axis]);
  auto out = Tensor<S>::from_data(oshape, std::move(y));
  bool need = false;
  if (grad_mode())
    for (const auto& t : xs) need = need || t.requires_grad();
  if (need) {
    auto n = out.node();
    n->requires_grad = true;
    for (auto& p : nodes) n->parents.push_back(p);
    n->backward = [nodes, axis_sizes, outer, inner, total_axis](TensorNode<S>& self) {
      int64_t off = 0;
      for (size_t k = 0; k < nodes.size(); ++k) {
        auto& p = nodes[k];
        int64_t ta = axis_sizes[k];
        if (p->requires_grad) {
          p->ensure_grad();
          for (int64_t o = 0; o < outer; ++o) {
            const S* g = self.grad.data() + (o * total_axis + off) * inner;
            S* pg = p->grad.data() + o * ta * inner;
            for (int64_t i = 0; i < ta * inner; ++i) pg[i] += g[i];
          }
        }
        off += ta;
      }
    };
  }
  return out;
}

}  // namespace vistr
