#pragma once

// Central finite-difference oracle. Uses forward evaluation only, so it
// stays independent of the backward implementation it is judging:
// grad ~ (f(x+h) - f(x-h)) / 2h, checked in 64-bit mode.

#include <cmath>
#include <cstdio>
#include <functional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "mam2/rng.hpp"
#include "mam2/tensor.hpp"

namespace mam2 {

struct FdReport {
  double max_rel = 0.0;
  std::string worst;
  bool pass(double tol) const { return max_rel < tol; }
};

// loss_fn rebuilds the scalar loss from the leaves' live values each call.
inline FdReport fd_compare(const std::function<TensorD()>& loss_fn,
                           const std::vector<std::pair<std::string, TensorD>>& leaves,
                           double h = 1e-4) {
  for (auto& kv : leaves) const_cast<TensorD&>(kv.second).zero_grad();
  TensorD loss = loss_fn();
  backward(loss);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(leaves.size());
  for (auto& kv : leaves) analytic.push_back(kv.second.grad());

  // FD sweep runs forward-only
  std::vector<bool> flags;
  for (auto& kv : leaves) {
    flags.push_back(kv.second.requires_grad());
    const_cast<TensorD&>(kv.second).set_requires_grad(false);
  }
  FdReport rep;
  for (size_t li = 0; li < leaves.size(); ++li) {
    auto& data = const_cast<TensorD&>(leaves[li].second).values();
    for (size_t i = 0; i < data.size(); ++i) {
      double saved = data[i];
      data[i] = saved + h;
      double f1 = loss_fn().item();
      data[i] = saved - h;
      double f2 = loss_fn().item();
      data[i] = saved;
      double fd = (f1 - f2) / (2.0 * h);
      double a = analytic[li][i];
      double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1.0});
      if (rel >= rep.max_rel) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%s[%zu]: analytic %.12g vs fd %.12g",
                      leaves[li].first.c_str(), i, a, fd);
        rep.max_rel = rel;
        rep.worst = buf;
      }
    }
  }
  for (size_t li = 0; li < leaves.size(); ++li)
    const_cast<TensorD&>(leaves[li].second).set_requires_grad(flags[li]);
  return rep;
}

inline TensorD rand_leaf(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(size_t(numel(shape)));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return param<double>(std::move(shape), std::move(v));
}

inline TensorD rand_const(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(size_t(numel(shape)));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return TensorD(std::move(shape), std::move(v));
}

// scalarizes an op output with distinct weights so no gradient direction
// can hide behind a symmetric reduction
inline TensorD weighted_sum(const TensorD& y, const TensorD& w) { return sum_all(mul(y, w)); }

struct OpCheck {
  std::string name;
  std::function<FdReport()> run;
};

// One randomized FD case per differentiable op. Inputs in [-1,1], h = 1e-4.
inline std::vector<OpCheck> op_gradcheck_cases(uint64_t seed = 0x5eed) {
  std::vector<OpCheck> cases;
  auto add_case = [&](std::string name, std::function<FdReport()> fn) {
    cases.push_back({std::move(name), std::move(fn)});
  };

  add_case("add", [seed] {
    Rng rng(derive_seed(seed, {1}));
    auto a = rand_leaf(rng, {2, 3});
    auto b = rand_leaf(rng, {2, 3});
    auto w = rand_const(rng, {2, 3});
    return fd_compare([&] { return weighted_sum(add(a, b), w); }, {{"a", a}, {"b", b}});
  });
  add_case("sub", [seed] {
    Rng rng(derive_seed(seed, {2}));
    auto a = rand_leaf(rng, {2, 3});
    auto b = rand_leaf(rng, {2, 3});
    auto w = rand_const(rng, {2, 3});
    return fd_compare([&] { return weighted_sum(sub(a, b), w); }, {{"a", a}, {"b", b}});
  });
  add_case("mul", [seed] {
    Rng rng(derive_seed(seed, {3}));
    auto a = rand_leaf(rng, {2, 3});
    auto b = rand_leaf(rng, {2, 3});
    auto w = rand_const(rng, {2, 3});
    return fd_compare([&] { return weighted_sum(mul(a, b), w); }, {{"a", a}, {"b", b}});
  });
  add_case("scale", [seed] {
    Rng rng(derive_seed(seed, {4}));
    auto a = rand_leaf(rng, {3, 2});
    auto w = rand_const(rng, {3, 2});
    return fd_compare([&] { return weighted_sum(scale(a, -1.7), w); }, {{"a", a}});
  });
  add_case("gelu", [seed] {
    Rng rng(derive_seed(seed, {5}));
    auto a = rand_leaf(rng, {2, 5});
    auto w = rand_const(rng, {2, 5});
    return fd_compare([&] { return weighted_sum(gelu(a), w); }, {{"a", a}});
  });
  add_case("reshape", [seed] {
    Rng rng(derive_seed(seed, {6}));
    auto a = rand_leaf(rng, {2, 6});
    auto w = rand_const(rng, {3, 4});
    return fd_compare([&] { return weighted_sum(reshape(a, {3, 4}), w); }, {{"a", a}});
  });
  add_case("transpose01", [seed] {
    Rng rng(derive_seed(seed, {7}));
    auto a = rand_leaf(rng, {2, 3, 2});
    auto w = rand_const(rng, {3, 2, 2});
    return fd_compare([&] { return weighted_sum(transpose01(a), w); }, {{"a", a}});
  });
  add_case("split_heads", [seed] {
    Rng rng(derive_seed(seed, {8}));
    auto a = rand_leaf(rng, {2, 3, 4});
    auto w = rand_const(rng, {4, 3, 2});
    return fd_compare([&] { return weighted_sum(split_heads(a, 2), w); }, {{"a", a}});
  });
  add_case("merge_heads", [seed] {
    Rng rng(derive_seed(seed, {9}));
    auto a = rand_leaf(rng, {4, 3, 2});
    auto w = rand_const(rng, {2, 3, 4});
    return fd_compare([&] { return weighted_sum(merge_heads(a, 2), w); }, {{"a", a}});
  });
  add_case("slice_axis0", [seed] {
    Rng rng(derive_seed(seed, {10}));
    auto a = rand_leaf(rng, {5, 3});
    auto w = rand_const(rng, {3, 3});
    return fd_compare([&] { return weighted_sum(slice_axis0(a, 1, 3), w); }, {{"a", a}});
  });
  add_case("concat_axis0", [seed] {
    Rng rng(derive_seed(seed, {11}));
    auto a = rand_leaf(rng, {2, 3});
    auto b = rand_leaf(rng, {3, 3});
    auto w = rand_const(rng, {5, 3});
    return fd_compare([&] { return weighted_sum(concat_axis0(a, b), w); }, {{"a", a}, {"b", b}});
  });
  add_case("permute_axis0", [seed] {
    Rng rng(derive_seed(seed, {12}));
    auto a = rand_leaf(rng, {4, 3});
    auto w = rand_const(rng, {4, 3});
    std::vector<int64_t> perm{2, 0, 3, 1};
    return fd_compare([&, perm] { return weighted_sum(permute_axis0(a, perm), w); }, {{"a", a}});
  });
  add_case("broadcast_rows", [seed] {
    Rng rng(derive_seed(seed, {13}));
    auto a = rand_leaf(rng, {4});
    auto w = rand_const(rng, {3, 4});
    return fd_compare([&] { return weighted_sum(broadcast_rows(a, 3), w); }, {{"a", a}});
  });
  add_case("gather_spatial", [seed] {
    Rng rng(derive_seed(seed, {14}));
    auto a = rand_leaf(rng, {2, 5, 3});
    auto w = rand_const(rng, {2, 4, 3});
    std::vector<int64_t> ids{4, 0, 2, 2};  // duplicate on purpose
    return fd_compare([&, ids] { return weighted_sum(gather_spatial(a, ids), w); }, {{"a", a}});
  });
  add_case("matmul", [seed] {
    Rng rng(derive_seed(seed, {15}));
    auto a = rand_leaf(rng, {3, 4});
    auto b = rand_leaf(rng, {4, 2});
    auto w = rand_const(rng, {3, 2});
    return fd_compare([&] { return weighted_sum(matmul(a, b), w); }, {{"a", a}, {"b", b}});
  });
  add_case("linear", [seed] {
    Rng rng(derive_seed(seed, {16}));
    auto x = rand_leaf(rng, {2, 3, 4});
    auto W = rand_leaf(rng, {4, 5});
    auto b = rand_leaf(rng, {5});
    auto w = rand_const(rng, {2, 3, 5});
    return fd_compare([&] { return weighted_sum(linear(x, W, b), w); },
                      {{"x", x}, {"W", W}, {"b", b}});
  });
  add_case("bmm", [seed] {
    Rng rng(derive_seed(seed, {17}));
    auto a = rand_leaf(rng, {2, 3, 4});
    auto b = rand_leaf(rng, {2, 4, 2});
    auto w = rand_const(rng, {2, 3, 2});
    return fd_compare([&] { return weighted_sum(bmm(a, b), w); }, {{"a", a}, {"b", b}});
  });
  add_case("bmm_nt", [seed] {
    Rng rng(derive_seed(seed, {18}));
    auto a = rand_leaf(rng, {2, 3, 4});
    auto b = rand_leaf(rng, {2, 5, 4});
    auto w = rand_const(rng, {2, 3, 5});
    return fd_compare([&] { return weighted_sum(bmm_nt(a, b), w); }, {{"a", a}, {"b", b}});
  });
  add_case("softmax_lastdim", [seed] {
    Rng rng(derive_seed(seed, {19}));
    auto a = rand_leaf(rng, {3, 7});
    auto w = rand_const(rng, {3, 7});
    return fd_compare([&] { return weighted_sum(softmax_lastdim(a), w); }, {{"a", a}});
  });
  add_case("layer_norm", [seed] {
    Rng rng(derive_seed(seed, {20}));
    auto x = rand_leaf(rng, {4, 6});
    auto g = rand_leaf(rng, {6});
    auto b = rand_leaf(rng, {6});
    auto w = rand_const(rng, {4, 6});
    return fd_compare([&] { return weighted_sum(layer_norm(x, g, b), w); },
                      {{"x", x}, {"gamma", g}, {"beta", b}});
  });
  add_case("sum_all", [seed] {
    Rng rng(derive_seed(seed, {21}));
    auto a = rand_leaf(rng, {3, 3});
    return fd_compare([&] { return sum_all(a); }, {{"a", a}});
  });
  add_case("cross_entropy_mean", [seed] {
    Rng rng(derive_seed(seed, {22}));
    auto z = rand_leaf(rng, {4, 9});
    std::vector<int64_t> tg{3, 0, 8, 5};
    return fd_compare([&, tg] { return cross_entropy_mean(z, tg); }, {{"logits", z}});
  });
  add_case("add_separable_pos", [seed] {
    Rng rng(derive_seed(seed, {23}));
    auto x = rand_leaf(rng, {3, 4, 5});
    auto et = rand_leaf(rng, {3, 5});
    auto es = rand_leaf(rng, {4, 5});
    auto w = rand_const(rng, {3, 4, 5});
    return fd_compare([&] { return weighted_sum(add_separable_pos(x, et, es), w); },
                      {{"x", x}, {"et", et}, {"es", es}});
  });
  add_case("add_separable_pos_subset", [seed] {
    Rng rng(derive_seed(seed, {24}));
    auto x = rand_leaf(rng, {3, 2, 5});
    auto et = rand_leaf(rng, {3, 5});
    auto es = rand_leaf(rng, {4, 5});
    auto w = rand_const(rng, {3, 2, 5});
    std::vector<int64_t> cols{3, 1};
    return fd_compare([&, cols] { return weighted_sum(add_separable_pos(x, et, es, &cols), w); },
                      {{"x", x}, {"et", et}, {"es", es}});
  });
  add_case("mask_queries", [seed] {
    Rng rng(derive_seed(seed, {25}));
    auto q = rand_leaf(rng, {5});
    auto et = rand_leaf(rng, {3, 5});
    auto es = rand_leaf(rng, {4, 5});
    auto w = rand_const(rng, {3, 5});
    std::vector<std::pair<int64_t, int64_t>> pos{{0, 1}, {2, 3}, {1, 0}};
    return fd_compare([&, pos] { return weighted_sum(mask_queries(q, et, es, pos), w); },
                      {{"q", q}, {"et", et}, {"es", es}});
  });
  add_case("shared_subexpression", [seed] {
    Rng rng(derive_seed(seed, {26}));
    auto x = rand_leaf(rng, {2, 3});
    return fd_compare(
        [&] {
          auto u = mul(x, x);
          return sum_all(mul(u, u));  // one node feeding two consumers
        },
        {{"x", x}});
  });

  return cases;
}

// Runs every op case; prints one line per op when a stream is given.
inline bool run_op_gradchecks(std::ostream* os, double tol = 1e-5, uint64_t seed = 0x5eed) {
  bool all = true;
  for (auto& c : op_gradcheck_cases(seed)) {
    FdReport r = c.run();
    bool ok = r.pass(tol);
    all = all && ok;
    if (os)
      (*os) << (ok ? "pass" : "FAIL") << "  " << c.name << "  max_rel=" << r.max_rel
            << (ok ? "" : ("  worst " + r.worst)) << "\n";
  }
  return all;
}

}  // namespace mam2
