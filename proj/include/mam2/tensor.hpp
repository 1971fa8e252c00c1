#pragma once

// Reverse-mode autodiff over dense row-major tensors.
//
// A Tensor is a handle on a graph Node holding value, lazily sized grad,
// and a backprop closure wired to its parents. Each op either records a
// closure (some input requires grad) or leaves the node unlinked, so
// branches built from detached inputs cost nothing to track and their
// intermediates free as soon as the handles die. backward() records the
// reachable subgraph in topological order, then walks it in reverse,
// visiting every node exactly once. Dense kernels (matmul, linear, bmm)
// run through Eigen maps over the same buffers.

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mam2/common.hpp"

namespace mam2 {

template <class S>
using MatMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <class S>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <class S>
struct Node {
  Shape shape;
  std::shared_ptr<std::vector<S>> data;  // shared so reshape can alias
  std::vector<S> grad;                   // empty until backward needs it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;

  int64_t numel() const { return int64_t(data->size()); }
  S* val() { return data->data(); }
  const S* val() const { return data->data(); }
};

template <class S>
std::shared_ptr<Node<S>> make_node(Shape shape) {
  auto n = std::make_shared<Node<S>>();
  int64_t count = numel(shape);
  n->shape = std::move(shape);
  n->data = std::make_shared<std::vector<S>>(size_t(count));
  return n;
}

template <class S>
void ensure_grad(Node<S>& n) {
  if (int64_t(n.grad.size()) != n.numel()) n.grad.assign(size_t(n.numel()), S(0));
}

template <class S>
class Tensor {
 public:
  std::shared_ptr<Node<S>> node;

  Tensor() = default;
  explicit Tensor(Shape shape, S fill = S(0)) : node(make_node<S>(std::move(shape))) {
    if (fill != S(0)) std::fill(node->data->begin(), node->data->end(), fill);
  }
  Tensor(Shape shape, std::vector<S> data) {
    if (mam2::numel(shape) != int64_t(data.size()))
      throw ShapeError("tensor: shape " + shape_str(shape) + " wants " +
                       std::to_string(mam2::numel(shape)) + " values, got " +
                       std::to_string(data.size()));
    node = std::make_shared<Node<S>>();
    node->shape = std::move(shape);
    node->data = std::make_shared<std::vector<S>>(std::move(data));
  }

  static Tensor scalar(S v) { return Tensor({}, std::vector<S>{v}); }

  bool defined() const { return node != nullptr; }
  const Shape& shape() const { return node->shape; }
  int64_t rank() const { return int64_t(node->shape.size()); }
  int64_t dim(int64_t i) const { return node->shape.at(size_t(i)); }
  int64_t numel() const { return node->numel(); }

  std::vector<S>& values() { return *node->data; }
  const std::vector<S>& values() const { return *node->data; }
  const std::vector<S>& grad() const { return node->grad; }

  S item() const {
    if (numel() != 1) throw UsageError("item: tensor has " + std::to_string(numel()) + " values");
    return (*node->data)[0];
  }

  int64_t offset_of(std::initializer_list<int64_t> idx) const {
    const Shape& s = node->shape;
    if (idx.size() != s.size()) throw UsageError("offset_of: rank mismatch");
    int64_t off = 0;
    size_t k = 0;
    for (int64_t i : idx) {
      if (i < 0 || i >= s[k]) throw RangeError("offset_of: index " + std::to_string(i) +
                                               " outside extent " + std::to_string(s[k]));
      off = off * s[k] + i;
      ++k;
    }
    return off;
  }
  S& at(std::initializer_list<int64_t> idx) { return (*node->data)[size_t(offset_of(idx))]; }
  S at(std::initializer_list<int64_t> idx) const { return (*node->data)[size_t(offset_of(idx))]; }

  bool requires_grad() const { return node->requires_grad; }
  Tensor& set_requires_grad(bool b) {
    node->requires_grad = b;
    return *this;
  }

  void zero_grad() { ensure_grad(*node); std::fill(node->grad.begin(), node->grad.end(), S(0)); }

  // Leaf view on the same buffer: reads the live values, never tracked.
  Tensor detached() const {
    Tensor t;
    t.node = std::make_shared<Node<S>>();
    t.node->shape = node->shape;
    t.node->data = node->data;
    return t;
  }

  // Independent deep copy, tracked when requested.
  Tensor clone(bool track = false) const {
    Tensor t(node->shape, *node->data);
    t.node->requires_grad = track;
    return t;
  }
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

template <class S>
Tensor<S> param(Shape shape, std::vector<S> data) {
  Tensor<S> t(std::move(shape), std::move(data));
  t.set_requires_grad(true);
  return t;
}

namespace detail {

template <class S>
bool any_grad(std::initializer_list<const Tensor<S>*> ts) {
  for (auto* t : ts)
    if (t->node->requires_grad) return true;
  return false;
}

// rows() folds every axis but the last, the layout used by row-wise ops
template <class S>
int64_t fold_rows(const Tensor<S>& t) {
  if (t.rank() < 1) throw ShapeError("op needs rank >= 1, got scalar");
  return t.numel() / t.dim(t.rank() - 1);
}

}  // namespace detail

// ---- graph recording and the reverse walk ----

template <class S>
struct Graph {
  std::vector<Node<S>*> order;  // topological, leaves first
};

template <class S>
Graph<S> record_graph(Node<S>* root) {
  Graph<S> g;
  std::unordered_set<Node<S>*> seen;
  std::vector<std::pair<Node<S>*, size_t>> stack;
  seen.insert(root);
  stack.push_back({root, 0});
  while (!stack.empty()) {
    Node<S>* n = stack.back().first;
    size_t i = stack.back().second;
    if (i < n->parents.size()) {
      ++stack.back().second;
      Node<S>* p = n->parents[i].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      g.order.push_back(n);
      stack.pop_back();
    }
  }
  return g;
}

template <class S>
void backward(const Tensor<S>& loss) {
  if (!loss.defined()) throw UsageError("backward: empty tensor");
  Node<S>* root = loss.node.get();
  if (root->numel() != 1)
    throw UsageError("backward: needs a scalar, got shape " + shape_str(root->shape));
  if (!root->requires_grad) throw UsageError("backward: loss is not tracked");
  Graph<S> g = record_graph(root);
  ensure_grad(*root);
  root->grad[0] += S(1);
  for (auto it = g.order.rbegin(); it != g.order.rend(); ++it) {
    Node<S>* n = *it;
    if (!n->backprop) continue;
    for (auto& p : n->parents)
      if (p->requires_grad) ensure_grad(*p);
    n->backprop(*n);
  }
}

// ---- elementwise ----

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape(a.shape(), b.shape(), "add");
  Tensor<S> out;
  out.node = make_node<S>(a.shape());
  const S* pa = a.node->val();
  const S* pb = b.node->val();
  S* po = out.node->val();
  int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  if (detail::any_grad<S>({&a, &b})) {
    out.node->requires_grad = true;
    out.node->parents = {a.node, b.node};
    out.node->backprop = [](Node<S>& nd) {
      int64_t n = nd.numel();
      for (int k = 0; k < 2; ++k) {
        auto& p = nd.parents[size_t(k)];
        if (!p->requires_grad) continue;
        for (int64_t i = 0; i < n; ++i) p->grad[size_t(i)] += nd.grad[size_t(i)];
      }
    };
  }
  return out;
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape(a.shape(), b.shape(), "sub");
  Tensor<S> out;
  out.node = make_node<S>(a.shape());
  const S* pa = a.node->val();
  const S* pb = b.node->val();
  S* po = out.node->val();
  int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
  if (detail::any_grad<S>({&a, &b})) {
    out.node->requires_grad = true;
    out.node->parents = {a.node, b.node};
    out.node->backprop = [](Node<S>& nd) {
      int64_t n = nd.numel();
      auto& pa = nd.parents[0];
      auto& pb = nd.parents[1];
      if (pa->requires_grad)
        for (int64_t i = 0; i < n; ++i) pa->grad[size_t(i)] += nd.grad[size_t(i)];
      if (pb->requires_grad)
        for (int64_t i = 0; i < n; ++i) pb->grad[size_t(i)] -= nd.grad[size_t(i)];
    };
  }
  return out;
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape(a.shape(), b.shape(), "mul");
  Tensor<S> out;
  out.node = make_node<S>(a.shape());
  const S* pa = a.node->val();
  const S* pb = b.node->val();
  S* po = out.node->val();
  int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  if (detail::any_grad<S>({&a, &b})) {
    out.node->requires_grad = true;
    out.node->parents = {a.node, b.node};
    out.node->backprop = [](Node<S>& nd) {
      int64_t n = nd.numel();
      auto& pa = nd.parents[0];
      auto& pb = nd.parents[1];
      const S* va = pa->val();
      const S* vb = pb->val();
      if (pa->requires_grad)
        for (int64_t i = 0; i < n; ++i) pa->grad[size_t(i)] += nd.grad[size_t(i)] * vb[i];
      if (pb->requires_grad)
        for (int64_t i = 0; i < n; ++i) pb->grad[size_t(i)] += nd.grad[size_t(i)] * va[i];
    };
  }
  return out;
}

template <class S>
Tensor<S> scale(const Tensor<S>& a, double c) {
  Tensor<S> out;
  out.node = make_node<S>(a.shape());
  const S* pa = a.node->val();
  S* po = out.node->val();
  int64_t n = a.numel();
  S sc = S(c);
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * sc;
  if (a.requires_grad()) {
    out.node->requires_grad = true;
    out.node->parents = {a.node};
    out.node->backprop = [sc](Node<S>& nd) {
      int64_t n = nd.numel();
      auto& p = nd.parents[0];
      for (int64_t i = 0; i < n; ++i) p->grad[size_t(i)] += nd.grad[size_t(i)] * sc;
    };
  }
  return out;
}

template <class S>
Tensor<S> gelu(const Tensor<S>& x) {
  Tensor<S> out;
  out.node = make_node<S>(x.shape());
  const S* px = x.node->val();
  S* po = out.node->val();
  int64_t n = x.numel();
  const double inv_sqrt2 = 0.7071067811865475244;
  for (int64_t i = 0; i < n; ++i) {
    double v = double(px[i]);
    po[i] = S(0.5 * v * (1.0 + std::erf(v * inv_sqrt2)));
  }
  if (x.requires_grad()) {
    out.node->requires_grad = true;
    out.node->parents = {x.node};
    out.node->backprop = [](Node<S>& nd) {
      auto& p = nd.parents[0];
      const S* px = p->val();
      int64_t n = nd.numel();
      const double inv_sqrt2 = 0.7071067811865475244;
      const double inv_sqrt2pi = 0.3989422804014326779;
      for (int64_t i = 0; i < n; ++i) {
        double v = double(px[i]);
        double d = 0.5 * (1.0 + std::erf(v * inv_sqrt2)) +
                   v * inv_sqrt2pi * std::exp(-0.5 * v * v);
        p->grad[size_t(i)] += nd.grad[size_t(i)] * S(d);
      }
    };
  }
  return out;
}

// ---- shape moves ----

// Shares the value buffer; only the metadata changes.
template <class S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  if (numel(shape) != x.numel())
    throw ShapeError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape) +
                     " changes element count");
  Tensor<S> out;
  out.node = std::make_shared<Node<S>>();
  out.node->shape = std::move(shape);
  out.node->data = x.node->data;
  if (x.requires_grad()) {
    out.node->requires_grad = true;
    out.node->parents = {x.node};
    out.node->backprop = [](Node<S>& nd) {
      auto& p = nd.parents[0];
      int64_t n = nd.numel();
      for (int64_t i = 0; i < n; ++i) p->grad[size_t(i)] += nd.grad[size_t(i)];
    };
  }
  return out;
}

template <class S>
Tensor<S> transpose01(const Tensor<S>& x) {
  if (x.rank() < 2) throw ShapeError("transpose01: needs rank >= 2, got " + shape_str(x.shape()));
  int64_t A = x.dim(0), B = x.dim(1), R = x.numel() / (A * B);
  Shape out_shape = x.shape();
  std::swap(out_shape[0], out_shape[1]);
  Tensor<S> out;
  out.node = make_node<S>(std::move(out_shape));
  const S* px = x.node->val();
  S* po = out.node->val();
  for (int64_t a = 0; a < A; ++a)
    for (int64_t b = 0; b < B; ++b)
      std::copy(px + (a * B + b) * R, px + (a * B + b) * R + R, po + (b * A + a) * R);
  if (x.requires_grad()) {
    out.node->requires_grad = true;
    out.node->parents = {x.node};
    out.node->backprop = [A, B, R](Node<S>& nd) {
      auto& p = nd.parents[0];
      for (int64_t b = 0; b < B; ++b)
        for (int64_t a = 0; a < A; ++a) {
          const S* g = nd.grad.data() + (b * A + a) * R;
          S* dst = p->grad.data() + (a * B + b) * R;
          for (int64_t r = 0; r < R; ++r) dst[r] += g[r];
        }
    };
  }
  return out;
}

// [B,L,D] -> [B*H,L,D/H], head-major within each batch entry
template <class S>
Tensor<S> split_heads(const Tensor<S>& x, int64_t H) {
  if (x.rank() != 3) throw ShapeError("split_heads: needs rank 3, got " + shape_str(x.shape()));
  int64_t B = x.dim(0), L = x.dim(1), D = x.dim(2);
  if (H <= 0 || D % H != 0)
    throw ShapeError("split_heads: width " + std::to_string(D) + " not divisible by " +
                     std::to_string(H) + " heads");
  int64_t d = D / H;
  Tensor<S> out;
  out.node = make_node<S>({B * H, L, d});
  const S* px = x.node->val();
  S* po = out.node->val();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t h = 0; h < H; ++h)
      for (int64_t l = 0; l < L; ++l)
        std::copy(px + (b * L + l) * D + h * d, px + (b * L + l) * D + (h + 1) * d,
                  po + ((b * H + h) * L + l) * d);
  if (x.requires_grad()) {
    out.node->requires_grad = true;
    out.node->parents = {x.node};
    out.node->backprop = [B, L, D, H, d](Node<S>& nd) {
      auto& p = nd.parents[0];
      for (int64_t b = 0; b < B; ++b)
        for (int64_t h = 0; h < H; ++h)
          for (int64_t l = 0; l < L; ++l) {
            const S* g = nd.grad.data() + ((b * H + h) * L + l) * d;
            S* dst = p->grad.data() + (b * L + l) * D + h * d;
            for (int64_t k = 0; k < d; ++k) dst[k] += g[k];
          }
    };
  }
  return out;
}

// inverse of split_heads
template <class S>
Tensor<S> merge_heads(const Tensor<S>& x, int64_t H) {
  if (x.rank() != 3) throw ShapeError("merge_heads: needs rank 3, got " + shape_str(x.shape()));
  int64_t BH = x.dim(0), L = x.dim(1), d = x.dim(2);
  if (H <= 0 || BH % H != 0)
    throw ShapeError("merge_heads: leading extent " + std::to_string(BH) +
                     " not divisible by " + std::to_string(H) + " heads");
  int64_t B = BH / H, D = d * H;
  Tensor<S> out;
  out.node = make_node<S>({B, L, D});
  const S* px = x.node->val();
  S* po = out.node->val();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t h = 0; h < H; ++h)
      for (int64_t l = 0; l < L; ++l)
        std::copy(px + ((b * H + h) * L + l) * d, px + ((b * H + h) * L + l + 1) * d,
                  po + (b * L + l) * D + h * d);
  if (x.requires_grad()) {
    out.node->requires_grad = true;
    out.node->parents = {x.node};
    out.node->backprop = [B, L, D, H, d](Node<S>& nd) {
      auto& p = nd.parents[0];
      for (int64_t b = 0; b < B; ++b)
        for (int64_t h = 0; h < H; ++h)
          for (int64_t l = 0; l < L; ++l) {
            const S* g = nd.grad.data() + (b * L + l) * D + h * d;
            S* dst = p->grad.data() + ((b * H + h) * L + l) * d;
            for (int64_t k = 0; k < d; ++k) dst[k] += g[k];
          }
    };
  }
  return out;
}

template <class S>
Tensor<S> slice_axis0(const Tensor<S>& x, int64_t start, int64_t len) {
  if (x.rank() < 1) throw ShapeError("slice_axis0: needs rank >= 1");
  int64_t A = x.dim(0);
  if (start < 0 || len < 0 || start + len > A)
    throw RangeError("slice_axis0: [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") outside extent " + std::to_string(A));
  int64_t R = x.numel() / std::max<int64_t>(A, 1);
  Shape out_shape = x.shape();
  out_shape[0] = len;
  Tensor<S> out;
  out.node = make_node<S>(std::move(out_shape));
  std::copy(x.node->val() + start * R, x.node->val() + (start + len) * R, out.node->val());
  if (x.requires_grad()) {
    out.node->requires_grad = true;
    out.node->parents = {x.node};
    out.node->backprop = [start, R](Node<S>& nd) {
      auto& p = nd.parents[0];
      int64_t n = nd.numel();
      S* dst = p->grad.data() + start * R;
      for (int64_t i = 0; i < n; ++i) dst[i] += nd.grad[size_t(i)];
    };
  }
  return out;
}

template <class S>
Tensor<S> concat_axis0(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != b.rank() || a.rank() < 1)
    throw ShapeError("concat_axis0: ranks " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  for (int64_t i = 1; i < a.rank(); ++i)
    if (a.dim(i) != b.dim(i))
      throw ShapeError("concat_axis0: trailing extents differ, " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
  Shape out_shape = a.shape();
  out_shape[0] += b.dim(0);
  Tensor<S> out;
  out.node = make_node<S>(std::move(out_shape));
  std::copy(a.node->data->begin(), a.node->data->end(), out.node->data->begin());
  std::copy(b.node->data->begin(), b.node->data->end(),
            out.node->data->begin() + a.node->data->size());
  if (detail::any_grad<S>({&a, &b})) {
    int64_t na = a.numel();
    out.node->requires_grad = true;
    out.node->parents = {a.node, b.node};
    out.node->backprop = [na](Node<S>& nd) {
      auto& pa = nd.parents[0];
      auto& pb = nd.parents[1];
      if (pa->requires_grad)
        for (int64_t i = 0; i < na; ++i) pa->grad[size_t(i)] += nd.grad[size_t(i)];
      if (pb->requires_grad) {
        int64_t nb = nd.numel() - na;
        for (int64_t i = 0; i < nb; ++i) pb->grad[size_t(i)] += nd.grad[size_t(na + i)];
      }
    };
  }
  return out;
}

// out[i] = x[perm[i]] along axis 0
template <class S>
Tensor<S> permute_axis0(const Tensor<S>& x, const std::vector<int64_t>& perm) {
  if (x.rank() < 1) throw ShapeError("permute_axis0: needs rank >= 1");
  int64_t A = x.dim(0);
  if (int64_t(perm.size()) != A)
    throw UsageError("permute_axis0: got " + std::to_string(perm.size()) +
                     " indices for extent " + std::to_string(A));
  std::vector<char> hit(size_t(A), 0);
  for (int64_t v : perm) {
    if (v < 0 || v >= A) throw RangeError("permute_axis0: index " + std::to_string(v));
    if (hit[size_t(v)]++) throw UsageError("permute_axis0: repeated index " + std::to_string(v));
  }
  int64_t R = x.numel() / std::max<int64_t>(A, 1);
  Tensor<S> out;
  out.node = make_node<S>(x.shape());
  const S* px = x.node->val();
  S* po = out.node->val();
  for (int64_t i = 0; i < A; ++i)
    std::copy(px + perm[size_t(i)] * R, px + (perm[size_t(i)] + 1) * R, po + i * R);
  if (x.requires_grad()) {
    out.node->requires_grad = true;
    out.node->parents = {x.node};
    out.node->backprop = [perm, R](Node<S>& nd) {
      auto& p = nd.parents[0];
      int64_t A = int64_t(perm.size());
      for (int64_t i = 0; i < A; ++i) {
        const S* g = nd.grad.data() + i * R;
        S* dst = p->grad.data() + perm[size_t(i)] * R;
        for (int64_t r = 0; r < R; ++r) dst[r] += g[r];
      }
    };
  }
  return out;
}

template <class S>
Tensor<S> broadcast_rows(const Tensor<S>& v, int64_t rows) {
  if (v.rank() != 1) throw ShapeError("broadcast_rows: needs rank 1, got " + shape_str(v.shape()));
  if (rows < 0) throw ShapeError("broadcast_rows: negative row count");
  int64_t D = v.dim(0);
  Tensor<S> out;
  out.node = make_node<S>({rows, D});
  const S* pv = v.node->val();
  S* po = out.node->val();
  for (int64_t r = 0; r < rows; ++r) std::copy(pv, pv + D, po + r * D);
  if (v.requires_grad()) {
    out.node->requires_grad = true;
    out.node->parents = {v.node};
    out.node->backprop = [rows, D](Node<S>& nd) {
      auto& p = nd.parents[0];
      for (int64_t r = 0; r < rows; ++r) {
        const S* g = nd.grad.data() + r * D;
        for (int64_t k = 0; k < D; ++k) p->grad[size_t(k)] += g[k];
      }
    };
  }
  return out;
}

// out[t,a,:] = x[t,ids[a],:]; duplicate ids are legal, backward scatter-adds
template <class S>
Tensor<S> gather_spatial(const Tensor<S>& x, const std::vector<int64_t>& ids) {
  if (x.rank() != 3) throw ShapeError("gather_spatial: needs [T,N,D], got " + shape_str(x.shape()));
  int64_t T = x.dim(0), N = x.dim(1), D = x.dim(2);
  for (int64_t j : ids)
    if (j < 0 || j >= N)
      throw RangeError("gather_spatial: index " + std::to_string(j) + " outside extent " +
                       std::to_string(N));
  int64_t G = int64_t(ids.size());
  Tensor<S> out;
  out.node = make_node<S>({T, G, D});
  const S* px = x.node->val();
  S* po = out.node->val();
  for (int64_t t = 0; t < T; ++t)
    for (int64_t a = 0; a < G; ++a)
      std::copy(px + (t * N + ids[size_t(a)]) * D, px + (t * N + ids[size_t(a)] + 1) * D,
                po + (t * G + a) * D);
  if (x.requires_grad()) {
    out.node->requires_grad = true;
    out.node->parents = {x.node};
    out.node->backprop = [T, N, D, G, ids](Node<S>& nd) {
      auto& p = nd.parents[0];
      for (int64_t t = 0; t < T; ++t)
        for (int64_t a = 0; a < G; ++a) {
          const S* g = nd.grad.data() + (t * G + a) * D;
          S* dst = p->grad.data() + (t * N + ids[size_t(a)]) * D;
          for (int64_t k = 0; k < D; ++k) dst[k] += g[k];
        }
    };
  }
  return out;
}

// ---- dense kernels ----

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul: needs two rank-2 tensors, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  int64_t M = a.dim(0), K = a.dim(1), K2 = b.dim(0), N = b.dim(1);
  if (K != K2)
    throw ShapeError("matmul: inner extents " + std::to_string(K) + " vs " + std::to_string(K2));
  Tensor<S> out;
  out.node = make_node<S>({M, N});
  ConstMatMap<S> A(a.node->val(), M, K), B(b.node->val(), K, N);
  MatMap<S>(out.node->val(), M, N).noalias() = A * B;
  if (detail::any_grad<S>({&a, &b})) {
    out.node->requires_grad = true;
    out.node->parents = {a.node, b.node};
    out.node->backprop = [M, K, N](Node<S>& nd) {
      auto& pa = nd.parents[0];
      auto& pb = nd.parents[1];
      ConstMatMap<S> G(nd.grad.data(), M, N);
      if (pa->requires_grad) {
        ConstMatMap<S> B(pb->val(), K, N);
        MatMap<S>(pa->grad.data(), M, K).noalias() += G * B.transpose();
      }
      if (pb->requires_grad) {
        ConstMatMap<S> A(pa->val(), M, K);
        MatMap<S>(pb->grad.data(), K, N).noalias() += A.transpose() * G;
      }
    };
  }
  return out;
}

// y[..., out] = x[..., in] @ W[in, out] + b[out], applied over the last axis
template <class S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& W, const Tensor<S>& b) {
  if (x.rank() < 2) throw ShapeError("linear: input needs rank >= 2, got " + shape_str(x.shape()));
  if (W.rank() != 2) throw ShapeError("linear: weight needs rank 2, got " + shape_str(W.shape()));
  if (b.rank() != 1) throw ShapeError("linear: bias needs rank 1, got " + shape_str(b.shape()));
  int64_t In = x.dim(x.rank() - 1), Out = W.dim(1);
  if (W.dim(0) != In)
    throw ShapeError("linear: input width " + std::to_string(In) + " vs weight rows " +
                     std::to_string(W.dim(0)));
  if (b.dim(0) != Out)
    throw ShapeError("linear: bias length " + std::to_string(b.dim(0)) + " vs weight cols " +
                     std::to_string(Out));
  int64_t R = x.numel() / In;
  Shape out_shape = x.shape();
  out_shape.back() = Out;
  Tensor<S> out;
  out.node = make_node<S>(std::move(out_shape));
  ConstMatMap<S> X(x.node->val(), R, In), Wm(W.node->val(), In, Out);
  MatMap<S> Y(out.node->val(), R, Out);
  Y.noalias() = X * Wm;
  Y.rowwise() += Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(b.node->val(), Out);
  if (detail::any_grad<S>({&x, &W, &b})) {
    out.node->requires_grad = true;
    out.node->parents = {x.node, W.node, b.node};
    out.node->backprop = [R, In, Out](Node<S>& nd) {
      auto& px = nd.parents[0];
      auto& pw = nd.parents[1];
      auto& pb = nd.parents[2];
      ConstMatMap<S> G(nd.grad.data(), R, Out);
      if (px->requires_grad) {
        ConstMatMap<S> Wm(pw->val(), In, Out);
        MatMap<S>(px->grad.data(), R, In).noalias() += G * Wm.transpose();
      }
      if (pw->requires_grad) {
        ConstMatMap<S> X(px->val(), R, In);
        MatMap<S>(pw->grad.data(), In, Out).noalias() += X.transpose() * G;
      }
      if (pb->requires_grad)
        Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>>(pb->grad.data(), Out) +=
            G.colwise().sum();
    };
  }
  return out;
}

// [G,M,K] @ [G,K,N] -> [G,M,N]
template <class S>
Tensor<S> bmm(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 3 || b.rank() != 3)
    throw ShapeError("bmm: needs two rank-3 tensors, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  int64_t G = a.dim(0), M = a.dim(1), K = a.dim(2);
  if (b.dim(0) != G || b.dim(1) != K)
    throw ShapeError("bmm: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  int64_t N = b.dim(2);
  Tensor<S> out;
  out.node = make_node<S>({G, M, N});
  for (int64_t g = 0; g < G; ++g) {
    ConstMatMap<S> A(a.node->val() + g * M * K, M, K), B(b.node->val() + g * K * N, K, N);
    MatMap<S>(out.node->val() + g * M * N, M, N).noalias() = A * B;
  }
  if (detail::any_grad<S>({&a, &b})) {
    out.node->requires_grad = true;
    out.node->parents = {a.node, b.node};
    out.node->backprop = [G, M, K, N](Node<S>& nd) {
      auto& pa = nd.parents[0];
      auto& pb = nd.parents[1];
      for (int64_t g = 0; g < G; ++g) {
        ConstMatMap<S> Gm(nd.grad.data() + g * M * N, M, N);
        if (pa->requires_grad) {
          ConstMatMap<S> B(pb->val() + g * K * N, K, N);
          MatMap<S>(pa->grad.data() + g * M * K, M, K).noalias() += Gm * B.transpose();
        }
        if (pb->requires_grad) {
          ConstMatMap<S> A(pa->val() + g * M * K, M, K);
          MatMap<S>(pb->grad.data() + g * K * N, K, N).noalias() += A.transpose() * Gm;
        }
      }
    };
  }
  return out;
}

// [G,M,K] @ [G,N,K]^T -> [G,M,N]; the attention-score layout
template <class S>
Tensor<S> bmm_nt(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 3 || b.rank() != 3)
    throw ShapeError("bmm_nt: needs two rank-3 tensors, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  int64_t G = a.dim(0), M = a.dim(1), K = a.dim(2);
  if (b.dim(0) != G || b.dim(2) != K)
    throw ShapeError("bmm_nt: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  int64_t N = b.dim(1);
  Tensor<S> out;
  out.node = make_node<S>({G, M, N});
  for (int64_t g = 0; g < G; ++g) {
    ConstMatMap<S> A(a.node->val() + g * M * K, M, K), B(b.node->val() + g * N * K, N, K);
    MatMap<S>(out.node->val() + g * M * N, M, N).noalias() = A * B.transpose();
  }
  if (detail::any_grad<S>({&a, &b})) {
    out.node->requires_grad = true;
    out.node->parents = {a.node, b.node};
    out.node->backprop = [G, M, K, N](Node<S>& nd) {
      auto& pa = nd.parents[0];
      auto& pb = nd.parents[1];
      for (int64_t g = 0; g < G; ++g) {
        ConstMatMap<S> Gm(nd.grad.data() + g * M * N, M, N);
        if (pa->requires_grad) {
          ConstMatMap<S> B(pb->val() + g * N * K, N, K);
          MatMap<S>(pa->grad.data() + g * M * K, M, K).noalias() += Gm * B;
        }
        if (pb->requires_grad) {
          ConstMatMap<S> A(pa->val() + g * M * K, M, K);
          MatMap<S>(pb->grad.data() + g * N * K, N, K).noalias() += Gm.transpose() * A;
        }
      }
    };
  }
  return out;
}

// ---- row-wise nonlinear ----

template <class S>
Tensor<S> softmax_lastdim(const Tensor<S>& x) {
  int64_t R = detail::fold_rows(x);
  int64_t K = x.dim(x.rank() - 1);
  if (K < 1) throw ShapeError("softmax_lastdim: empty last axis");
  Tensor<S> out;
  out.node = make_node<S>(x.shape());
  const S* px = x.node->val();
  S* po = out.node->val();
  for (int64_t r = 0; r < R; ++r) {
    const S* row = px + r * K;
    S* orow = po + r * K;
    S mx = row[0];
    for (int64_t k = 1; k < K; ++k) mx = std::max(mx, row[k]);
    S sum = S(0);
    for (int64_t k = 0; k < K; ++k) {
      orow[k] = std::exp(row[k] - mx);
      sum += orow[k];
    }
    S inv = S(1) / sum;
    for (int64_t k = 0; k < K; ++k) orow[k] *= inv;
  }
  if (x.requires_grad()) {
    out.node->requires_grad = true;
    out.node->parents = {x.node};
    out.node->backprop = [R, K](Node<S>& nd) {
      auto& p = nd.parents[0];
      const S* y = nd.val();
      for (int64_t r = 0; r < R; ++r) {
        const S* yr = y + r * K;
        const S* gr = nd.grad.data() + r * K;
        S dot = S(0);
        for (int64_t k = 0; k < K; ++k) dot += gr[k] * yr[k];
        S* dst = p->grad.data() + r * K;
        for (int64_t k = 0; k < K; ++k) dst[k] += yr[k] * (gr[k] - dot);
      }
    };
  }
  return out;
}

// normalizes over the last axis with population variance
template <class S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                     double eps = 1e-5) {
  int64_t R = detail::fold_rows(x);
  int64_t D = x.dim(x.rank() - 1);
  if (gamma.rank() != 1 || gamma.dim(0) != D || beta.rank() != 1 || beta.dim(0) != D)
    throw ShapeError("layer_norm: scale/shift must be rank-1 length " + std::to_string(D) +
                     ", got " + shape_str(gamma.shape()) + " and " + shape_str(beta.shape()));
  Tensor<S> out;
  out.node = make_node<S>(x.shape());
  auto mean = std::vector<S>(size_t(R));
  auto rstd = std::vector<S>(size_t(R));
  const S* px = x.node->val();
  const S* pg = gamma.node->val();
  const S* pb = beta.node->val();
  S* po = out.node->val();
  for (int64_t r = 0; r < R; ++r) {
    const S* row = px + r * D;
    S mu = S(0);
    for (int64_t k = 0; k < D; ++k) mu += row[k];
    mu /= S(D);
    S var = S(0);
    for (int64_t k = 0; k < D; ++k) {
      S c = row[k] - mu;
      var += c * c;
    }
    var /= S(D);
    S rs = S(1) / std::sqrt(var + S(eps));
    mean[size_t(r)] = mu;
    rstd[size_t(r)] = rs;
    S* orow = po + r * D;
    for (int64_t k = 0; k < D; ++k) orow[k] = (row[k] - mu) * rs * pg[k] + pb[k];
  }
  if (detail::any_grad<S>({&x, &gamma, &beta})) {
    out.node->requires_grad = true;
    out.node->parents = {x.node, gamma.node, beta.node};
    out.node->backprop = [R, D, mean = std::move(mean), rstd = std::move(rstd)](Node<S>& nd) {
      auto& px = nd.parents[0];
      auto& pg = nd.parents[1];
      auto& pb = nd.parents[2];
      const S* xv = px->val();
      const S* gv = pg->val();
      auto h = std::vector<S>(size_t(D));
      for (int64_t r = 0; r < R; ++r) {
        const S* row = xv + r * D;
        const S* gr = nd.grad.data() + r * D;
        S mu = mean[size_t(r)], rs = rstd[size_t(r)];
        S h_mean = S(0), hx_mean = S(0);
        for (int64_t k = 0; k < D; ++k) {
          S xh = (row[k] - mu) * rs;
          h[size_t(k)] = gr[k] * gv[k];
          h_mean += h[size_t(k)];
          hx_mean += h[size_t(k)] * xh;
          if (pg->requires_grad) pg->grad[size_t(k)] += gr[k] * xh;
          if (pb->requires_grad) pb->grad[size_t(k)] += gr[k];
        }
        if (!px->requires_grad) continue;
        h_mean /= S(D);
        hx_mean /= S(D);
        S* dst = px->grad.data() + r * D;
        for (int64_t k = 0; k < D; ++k) {
          S xh = (row[k] - mu) * rs;
          dst[k] += rs * (h[size_t(k)] - h_mean - xh * hx_mean);
        }
      }
    };
  }
  return out;
}

// ---- reductions ----

template <class S>
Tensor<S> sum_all(const Tensor<S>& x) {
  Tensor<S> out;
  out.node = make_node<S>({});
  const S* px = x.node->val();
  S acc = S(0);
  int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) acc += px[i];
  out.node->val()[0] = acc;
  if (x.requires_grad()) {
    out.node->requires_grad = true;
    out.node->parents = {x.node};
    out.node->backprop = [](Node<S>& nd) {
      auto& p = nd.parents[0];
      S g = nd.grad[0];
      int64_t n = p->numel();
      for (int64_t i = 0; i < n; ++i) p->grad[size_t(i)] += g;
    };
  }
  return out;
}

// mean over rows of log-softmax picked at the target class
template <class S>
Tensor<S> cross_entropy_mean(const Tensor<S>& logits, const std::vector<int64_t>& targets) {
  if (logits.rank() != 2)
    throw ShapeError("cross_entropy_mean: needs [rows,classes], got " + shape_str(logits.shape()));
  int64_t R = logits.dim(0), K = logits.dim(1);
  if (int64_t(targets.size()) != R)
    throw ShapeError("cross_entropy_mean: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(R) + " rows");
  if (R == 0) throw UsageError("cross_entropy_mean: no rows");
  for (int64_t t : targets)
    if (t < 0 || t >= K)
      throw RangeError("cross_entropy_mean: class " + std::to_string(t) + " outside [0," +
                       std::to_string(K) + ")");
  const S* pz = logits.node->val();
  double acc = 0.0;
  for (int64_t r = 0; r < R; ++r) {
    const S* row = pz + r * K;
    S mx = row[0];
    for (int64_t k = 1; k < K; ++k) mx = std::max(mx, row[k]);
    double sum = 0.0;
    for (int64_t k = 0; k < K; ++k) sum += std::exp(double(row[k] - mx));
    acc += double(mx) + std::log(sum) - double(row[targets[size_t(r)]]);
  }
  Tensor<S> out;
  out.node = make_node<S>({});
  out.node->val()[0] = S(acc / double(R));
  if (!std::isfinite(double(out.node->val()[0])))
    throw NumericError("cross_entropy_mean: non-finite loss");
  if (logits.requires_grad()) {
    out.node->requires_grad = true;
    out.node->parents = {logits.node};
    out.node->backprop = [R, K, targets](Node<S>& nd) {
      auto& p = nd.parents[0];
      const S* pz = p->val();
      S g = nd.grad[0] / S(R);
      for (int64_t r = 0; r < R; ++r) {
        const S* row = pz + r * K;
        S* dst = p->grad.data() + r * K;
        S mx = row[0];
        for (int64_t k = 1; k < K; ++k) mx = std::max(mx, row[k]);
        double sum = 0.0;
        for (int64_t k = 0; k < K; ++k) sum += std::exp(double(row[k] - mx));
        double inv = 1.0 / sum;
        for (int64_t k = 0; k < K; ++k)
          dst[k] += g * S(std::exp(double(row[k] - mx)) * inv);
        dst[targets[size_t(r)]] -= g;
      }
    };
  }
  return out;
}

// ---- positional helpers ----

// x[t,a,:] += et[t,:] + es[cols[a],:]; cols defaults to the identity
template <class S>
Tensor<S> add_separable_pos(const Tensor<S>& x, const Tensor<S>& et, const Tensor<S>& es,
                            const std::vector<int64_t>* cols = nullptr) {
  if (x.rank() != 3) throw ShapeError("add_separable_pos: needs [T,A,D], got " + shape_str(x.shape()));
  int64_t T = x.dim(0), A = x.dim(1), D = x.dim(2);
  if (et.rank() != 2 || et.dim(0) != T || et.dim(1) != D)
    throw ShapeError("add_separable_pos: temporal table " + shape_str(et.shape()) + " for x " +
                     shape_str(x.shape()));
  if (es.rank() != 2 || es.dim(1) != D)
    throw ShapeError("add_separable_pos: spatial table " + shape_str(es.shape()) + " for x " +
                     shape_str(x.shape()));
  int64_t N = es.dim(0);
  std::vector<int64_t> ident;
  if (!cols) {
    if (N != A)
      throw ShapeError("add_separable_pos: spatial table rows " + std::to_string(N) +
                       " vs axis extent " + std::to_string(A));
    ident.resize(size_t(A));
    for (int64_t i = 0; i < A; ++i) ident[size_t(i)] = i;
    cols = &ident;
  }
  if (int64_t(cols->size()) != A)
    throw UsageError("add_separable_pos: " + std::to_string(cols->size()) +
                     " column ids for extent " + std::to_string(A));
  for (int64_t j : *cols)
    if (j < 0 || j >= N) throw RangeError("add_separable_pos: column " + std::to_string(j));
  Tensor<S> out;
  out.node = make_node<S>(x.shape());
  const S* px = x.node->val();
  const S* pt = et.node->val();
  const S* ps = es.node->val();
  S* po = out.node->val();
  for (int64_t t = 0; t < T; ++t)
    for (int64_t a = 0; a < A; ++a) {
      const S* xr = px + (t * A + a) * D;
      const S* tr = pt + t * D;
      const S* sr = ps + (*cols)[size_t(a)] * D;
      S* orow = po + (t * A + a) * D;
      for (int64_t k = 0; k < D; ++k) orow[k] = xr[k] + tr[k] + sr[k];
    }
  if (detail::any_grad<S>({&x, &et, &es})) {
    out.node->requires_grad = true;
    out.node->parents = {x.node, et.node, es.node};
    out.node->backprop = [T, A, D, cols = *cols](Node<S>& nd) {
      auto& px = nd.parents[0];
      auto& pt = nd.parents[1];
      auto& ps = nd.parents[2];
      for (int64_t t = 0; t < T; ++t)
        for (int64_t a = 0; a < A; ++a) {
          const S* g = nd.grad.data() + (t * A + a) * D;
          if (px->requires_grad) {
            S* dst = px->grad.data() + (t * A + a) * D;
            for (int64_t k = 0; k < D; ++k) dst[k] += g[k];
          }
          if (pt->requires_grad) {
            S* dst = pt->grad.data() + t * D;
            for (int64_t k = 0; k < D; ++k) dst[k] += g[k];
          }
          if (ps->requires_grad) {
            S* dst = ps->grad.data() + cols[size_t(a)] * D;
            for (int64_t k = 0; k < D; ++k) dst[k] += g[k];
          }
        }
    };
  }
  return out;
}

// out[p,:] = q + et[pos[p].first,:] + es[pos[p].second,:]
template <class S>
Tensor<S> mask_queries(const Tensor<S>& q, const Tensor<S>& et, const Tensor<S>& es,
                       const std::vector<std::pair<int64_t, int64_t>>& positions) {
  if (q.rank() != 1) throw ShapeError("mask_queries: query needs rank 1, got " + shape_str(q.shape()));
  int64_t D = q.dim(0);
  if (et.rank() != 2 || et.dim(1) != D || es.rank() != 2 || es.dim(1) != D)
    throw ShapeError("mask_queries: tables " + shape_str(et.shape()) + " and " +
                     shape_str(es.shape()) + " for width " + std::to_string(D));
  int64_t T = et.dim(0), N = es.dim(0);
  for (auto& [t, j] : positions) {
    if (t < 0 || t >= T) throw RangeError("mask_queries: frame " + std::to_string(t));
    if (j < 0 || j >= N) throw RangeError("mask_queries: site " + std::to_string(j));
  }
  int64_t M = int64_t(positions.size());
  Tensor<S> out;
  out.node = make_node<S>({M, D});
  const S* pq = q.node->val();
  const S* pt = et.node->val();
  const S* ps = es.node->val();
  S* po = out.node->val();
  for (int64_t p = 0; p < M; ++p) {
    const S* tr = pt + positions[size_t(p)].first * D;
    const S* sr = ps + positions[size_t(p)].second * D;
    S* orow = po + p * D;
    for (int64_t k = 0; k < D; ++k) orow[k] = pq[k] + tr[k] + sr[k];
  }
  if (detail::any_grad<S>({&q, &et, &es})) {
    out.node->requires_grad = true;
    out.node->parents = {q.node, et.node, es.node};
    out.node->backprop = [M, D, positions](Node<S>& nd) {
      auto& pq = nd.parents[0];
      auto& pt = nd.parents[1];
      auto& ps = nd.parents[2];
      for (int64_t p = 0; p < M; ++p) {
        const S* g = nd.grad.data() + p * D;
        if (pq->requires_grad)
          for (int64_t k = 0; k < D; ++k) pq->grad[size_t(k)] += g[k];
        if (pt->requires_grad) {
          S* dst = pt->grad.data() + positions[size_t(p)].first * D;
          for (int64_t k = 0; k < D; ++k) dst[k] += g[k];
        }
        if (ps->requires_grad) {
          S* dst = ps->grad.data() + positions[size_t(p)].second * D;
          for (int64_t k = 0; k < D; ++k) dst[k] += g[k];
        }
      }
    };
  }
  return out;
}

}  // namespace mam2
