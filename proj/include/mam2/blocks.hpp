#pragma once

// Pre-norm transformer blocks: factorized space-time self-attention,
// joint self-attention over a flat sequence, and the cross-attention
// step that refines mask queries against visible context.

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mam2/common.hpp"
#include "mam2/rng.hpp"
#include "mam2/tensor.hpp"

namespace mam2 {

template <class S>
using NamedParams = std::vector<std::pair<std::string, Tensor<S>>>;

template <class S>
Tensor<S> normal_param(Rng& rng, Shape shape, double sigma = 0.02) {
  Tensor<S> t(std::move(shape));
  for (auto& v : t.values()) v = S(rng.normal(0.0, sigma));
  t.set_requires_grad(true);
  return t;
}

template <class S>
Tensor<S> const_param(Shape shape, S fill) {
  Tensor<S> t(std::move(shape), fill);
  t.set_requires_grad(true);
  return t;
}

template <class S>
struct NormParams {
  Tensor<S> gamma, beta;

  void collect(const std::string& prefix, NamedParams<S>& out) const {
    out.emplace_back(prefix + ".gamma", gamma);
    out.emplace_back(prefix + ".beta", beta);
  }
};

template <class S>
NormParams<S> init_norm(int64_t D) {
  NormParams<S> p;
  p.gamma = const_param<S>({D}, S(1));
  p.beta = const_param<S>({D}, S(0));
  return p;
}

template <class S>
struct AttnParams {
  Tensor<S> wq, bq, wk, bk, wv, bv, wo, bo;

  void collect(const std::string& prefix, NamedParams<S>& out) const {
    out.emplace_back(prefix + ".wq", wq);
    out.emplace_back(prefix + ".bq", bq);
    out.emplace_back(prefix + ".wk", wk);
    out.emplace_back(prefix + ".bk", bk);
    out.emplace_back(prefix + ".wv", wv);
    out.emplace_back(prefix + ".bv", bv);
    out.emplace_back(prefix + ".wo", wo);
    out.emplace_back(prefix + ".bo", bo);
  }
};

template <class S>
AttnParams<S> init_attn(Rng& rng, int64_t D, double sigma = 0.02) {
  AttnParams<S> p;
  p.wq = normal_param<S>(rng, {D, D}, sigma);
  p.bq = const_param<S>({D}, S(0));
  p.wk = normal_param<S>(rng, {D, D}, sigma);
  p.bk = const_param<S>({D}, S(0));
  p.wv = normal_param<S>(rng, {D, D}, sigma);
  p.bv = const_param<S>({D}, S(0));
  p.wo = normal_param<S>(rng, {D, D}, sigma);
  p.bo = const_param<S>({D}, S(0));
  return p;
}

template <class S>
struct MlpParams {
  Tensor<S> w1, b1, w2, b2;

  void collect(const std::string& prefix, NamedParams<S>& out) const {
    out.emplace_back(prefix + ".w1", w1);
    out.emplace_back(prefix + ".b1", b1);
    out.emplace_back(prefix + ".w2", w2);
    out.emplace_back(prefix + ".b2", b2);
  }
};

template <class S>
MlpParams<S> init_mlp(Rng& rng, int64_t D, int64_t hidden, double sigma = 0.02) {
  MlpParams<S> p;
  p.w1 = normal_param<S>(rng, {D, hidden}, sigma);
  p.b1 = const_param<S>({hidden}, S(0));
  p.w2 = normal_param<S>(rng, {hidden, D}, sigma);
  p.b2 = const_param<S>({D}, S(0));
  return p;
}

template <class S>
struct AttnTrace {
  Tensor<S> probs;  // [G*heads, Lq, Lk], detached
};

// scaled dot-product attention: q_in [G,Lq,D] reads from kv_in [G,Lk,D]
template <class S>
Tensor<S> attend(const Tensor<S>& q_in, const Tensor<S>& kv_in, const AttnParams<S>& p,
                 int64_t heads, AttnTrace<S>* trace = nullptr) {
  if (q_in.rank() != 3 || kv_in.rank() != 3)
    throw ShapeError("attend: needs rank-3 inputs, got " + shape_str(q_in.shape()) + " and " +
                     shape_str(kv_in.shape()));
  if (q_in.dim(0) != kv_in.dim(0) || q_in.dim(2) != kv_in.dim(2))
    throw ShapeError("attend: group/width mismatch: " + shape_str(q_in.shape()) + " vs " +
                     shape_str(kv_in.shape()));
  if (kv_in.dim(1) < 1) throw UsageError("attend: no keys to attend over");
  int64_t D = q_in.dim(2);
  auto q = split_heads(linear(q_in, p.wq, p.bq), heads);
  auto k = split_heads(linear(kv_in, p.wk, p.bk), heads);
  auto v = split_heads(linear(kv_in, p.wv, p.bv), heads);
  auto probs = softmax_lastdim(scale(bmm_nt(q, k), 1.0 / std::sqrt(double(D / heads))));
  if (trace) trace->probs = probs.detached();
  auto ctx = merge_heads(bmm(probs, v), heads);
  return linear(ctx, p.wo, p.bo);
}

// tokens of each frame attend among themselves: x is [T,A,D]
template <class S>
Tensor<S> mha_spatial(const Tensor<S>& x, const AttnParams<S>& p, int64_t heads,
                      AttnTrace<S>* trace = nullptr) {
  return attend(x, x, p, heads, trace);
}

// each spatial site attends across time: x is [T,A,D]
template <class S>
Tensor<S> mha_temporal(const Tensor<S>& x, const AttnParams<S>& p, int64_t heads,
                       AttnTrace<S>* trace = nullptr) {
  auto xt = transpose01(x);
  return transpose01(attend(xt, xt, p, heads, trace));
}

template <class S>
Tensor<S> mlp(const Tensor<S>& x, const MlpParams<S>& p) {
  return linear(gelu(linear(x, p.w1, p.b1)), p.w2, p.b2);
}

template <class S>
struct BlockParams {
  NormParams<S> norm_t, norm_s, norm_m;
  AttnParams<S> attn_t, attn_s;
  MlpParams<S> mlp;

  void collect(const std::string& prefix, NamedParams<S>& out) const {
    norm_t.collect(prefix + ".norm_t", out);
    attn_t.collect(prefix + ".attn_t", out);
    norm_s.collect(prefix + ".norm_s", out);
    attn_s.collect(prefix + ".attn_s", out);
    norm_m.collect(prefix + ".norm_m", out);
    mlp.collect(prefix + ".mlp", out);
  }
};

template <class S>
BlockParams<S> init_block(Rng& rng, int64_t D, int64_t hidden, double sigma = 0.02) {
  BlockParams<S> p;
  p.norm_t = init_norm<S>(D);
  p.attn_t = init_attn<S>(rng, D, sigma);
  p.norm_s = init_norm<S>(D);
  p.attn_s = init_attn<S>(rng, D, sigma);
  p.norm_m = init_norm<S>(D);
  p.mlp = init_mlp<S>(rng, D, hidden, sigma);
  return p;
}

// residual pre-norm: time attention, then space attention, then mlp
template <class S>
Tensor<S> factorized_block(const Tensor<S>& x, const BlockParams<S>& p, int64_t heads) {
  if (x.rank() != 3)
    throw ShapeError("factorized_block: needs [T,A,D], got " + shape_str(x.shape()));
  auto h = add(x, mha_temporal(layer_norm(x, p.norm_t.gamma, p.norm_t.beta), p.attn_t, heads));
  h = add(h, mha_spatial(layer_norm(h, p.norm_s.gamma, p.norm_s.beta), p.attn_s, heads));
  return add(h, mlp(layer_norm(h, p.norm_m.gamma, p.norm_m.beta), p.mlp));
}

template <class S>
struct JointBlockParams {
  NormParams<S> norm_a, norm_m;
  AttnParams<S> attn;
  MlpParams<S> mlp;

  void collect(const std::string& prefix, NamedParams<S>& out) const {
    norm_a.collect(prefix + ".norm_a", out);
    attn.collect(prefix + ".attn", out);
    norm_m.collect(prefix + ".norm_m", out);
    mlp.collect(prefix + ".mlp", out);
  }
};

template <class S>
JointBlockParams<S> init_joint_block(Rng& rng, int64_t D, int64_t hidden, double sigma = 0.02) {
  JointBlockParams<S> p;
  p.norm_a = init_norm<S>(D);
  p.attn = init_attn<S>(rng, D, sigma);
  p.norm_m = init_norm<S>(D);
  p.mlp = init_mlp<S>(rng, D, hidden, sigma);
  return p;
}

// self-attention over axis 1 of [G,L,D] with no space-time structure
template <class S>
Tensor<S> joint_block(const Tensor<S>& x, const JointBlockParams<S>& p, int64_t heads) {
  if (x.rank() != 3)
    throw ShapeError("joint_block: needs [G,L,D], got " + shape_str(x.shape()));
  auto xn = layer_norm(x, p.norm_a.gamma, p.norm_a.beta);
  auto h = add(x, attend(xn, xn, p.attn, heads));
  return add(h, mlp(layer_norm(h, p.norm_m.gamma, p.norm_m.beta), p.mlp));
}

template <class S>
struct CrossBlockParams {
  NormParams<S> norm_q, norm_kv, norm_m;
  AttnParams<S> attn;
  MlpParams<S> mlp;

  void collect(const std::string& prefix, NamedParams<S>& out) const {
    norm_q.collect(prefix + ".norm_q", out);
    norm_kv.collect(prefix + ".norm_kv", out);
    attn.collect(prefix + ".attn", out);
    norm_m.collect(prefix + ".norm_m", out);
    mlp.collect(prefix + ".mlp", out);
  }
};

template <class S>
CrossBlockParams<S> init_cross_block(Rng& rng, int64_t D, int64_t hidden, double sigma = 0.02) {
  CrossBlockParams<S> p;
  p.norm_q = init_norm<S>(D);
  p.norm_kv = init_norm<S>(D);
  p.attn = init_attn<S>(rng, D, sigma);
  p.norm_m = init_norm<S>(D);
  p.mlp = init_mlp<S>(rng, D, hidden, sigma);
  return p;
}

// queries pull from a separate context sequence, then run through the mlp;
// the context is normalized but otherwise left untouched
template <class S>
Tensor<S> cross_attn_block(const Tensor<S>& q, const Tensor<S>& kv, const CrossBlockParams<S>& p,
                           int64_t heads, AttnTrace<S>* trace = nullptr) {
  auto qn = layer_norm(q, p.norm_q.gamma, p.norm_q.beta);
  auto kn = layer_norm(kv, p.norm_kv.gamma, p.norm_kv.beta);
  auto h = add(q, attend(qn, kn, p.attn, heads, trace));
  return add(h, mlp(layer_norm(h, p.norm_m.gamma, p.norm_m.beta), p.mlp));
}

}  // namespace mam2
