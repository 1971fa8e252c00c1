#pragma once

// The full pre-training model: patch embedding, factorized space-time
// encoder over visible tokens, a cross-attention regressor that fills in
// one learned query per masked position, and two decoders that read
// appearance classes and motion values off the regressed latents.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mam2/blocks.hpp"
#include "mam2/common.hpp"
#include "mam2/masking.hpp"
#include "mam2/patches.hpp"
#include "mam2/rng.hpp"
#include "mam2/targets.hpp"
#include "mam2/tensor.hpp"

namespace mam2 {

enum class MotionKind { rgb_diff, flow, clip_order, none };

inline std::string motion_kind_name(MotionKind k) {
  switch (k) {
    case MotionKind::rgb_diff: return "rgb-diff";
    case MotionKind::flow: return "flow";
    case MotionKind::clip_order: return "clip-order";
    case MotionKind::none: return "none";
  }
  throw UsageError("motion_kind_name: bad enum value");
}

inline MotionKind motion_kind_from(const std::string& s) {
  if (s == "rgb-diff") return MotionKind::rgb_diff;
  if (s == "flow") return MotionKind::flow;
  if (s == "clip-order") return MotionKind::clip_order;
  if (s == "none") return MotionKind::none;
  throw UsageError("unknown motion target kind: " + s);
}

struct ModelConfig {
  int64_t frames = 16;
  int64_t image_size = 224;
  int64_t patch_size = 16;
  int64_t channels = 3;
  int64_t width = 768;
  int64_t heads = 12;
  int64_t mlp_ratio = 4;
  int64_t enc_depth = 12;
  int64_t reg_depth = 4;
  int64_t dec_app_depth = 4;
  int64_t dec_mot_depth = 2;
  int64_t vocab = 16384;
  int64_t reg_width = 0;       // 0 keeps the encoder width
  bool joint_decoder = false;  // decode the flat masked sequence instead of per-frame grids
  MotionKind motion = MotionKind::rgb_diff;

  int64_t grid_side() const { return image_size / patch_size; }
  int64_t sites() const { return grid_side() * grid_side(); }
  int64_t patch_dim() const { return channels * patch_size * patch_size; }
  int64_t rw() const { return reg_width > 0 ? reg_width : width; }
  int64_t motion_dim() const {
    switch (motion) {
      case MotionKind::rgb_diff: return patch_dim();
      case MotionKind::flow: return 2 * patch_size * patch_size;
      case MotionKind::clip_order: return 2;
      case MotionKind::none: return 0;
    }
    throw UsageError("motion_dim: bad enum value");
  }
};

inline void validate_config(const ModelConfig& c) {
  if (c.frames < 2) throw UsageError("config: need at least 2 frames");
  if (c.patch_size < 1 || c.image_size % c.patch_size != 0)
    throw UsageError("config: image size " + std::to_string(c.image_size) +
                     " not divisible by patch size " + std::to_string(c.patch_size));
  if (c.channels < 1) throw UsageError("config: channels must be positive");
  if (c.heads < 1 || c.width % c.heads != 0)
    throw UsageError("config: width " + std::to_string(c.width) + " not divisible by " +
                     std::to_string(c.heads) + " heads");
  if (c.rw() % c.heads != 0)
    throw UsageError("config: regressor width " + std::to_string(c.rw()) +
                     " not divisible by " + std::to_string(c.heads) + " heads");
  if (c.mlp_ratio < 1) throw UsageError("config: mlp ratio must be positive");
  if (c.enc_depth < 1 || c.reg_depth < 1 || c.dec_app_depth < 1)
    throw UsageError("config: encoder, regressor, and appearance decoder need depth >= 1");
  if (c.motion != MotionKind::none && c.dec_mot_depth < 1)
    throw UsageError("config: motion decoder needs depth >= 1");
  if (c.vocab < 2) throw UsageError("config: vocabulary must have at least 2 classes");
  if (c.motion == MotionKind::clip_order && c.joint_decoder)
    throw UsageError("config: clip-order decoding is defined on per-frame grids only");
}

inline ModelConfig model_preset(const std::string& name) {
  ModelConfig c;
  if (name == "vit-b") return c;
  if (name == "vit-l") {
    c.enc_depth = 24;
    c.width = 1024;
    c.heads = 16;
    return c;
  }
  throw UsageError("unknown model preset: " + name);
}

template <class S>
struct ModelParams {
  Tensor<S> patch_w, patch_b;
  PosEmbeds<S> pos_enc;
  std::vector<BlockParams<S>> encoder;
  NormParams<S> enc_norm;
  Tensor<S> bridge_w, bridge_b;  // encoder width -> regressor width, absent when equal
  PosEmbeds<S> pos_dec;
  Tensor<S> mask_query;
  std::vector<CrossBlockParams<S>> regressor;
  NormParams<S> reg_norm;
  std::vector<BlockParams<S>> dec_app;
  std::vector<JointBlockParams<S>> dec_app_joint;
  NormParams<S> dec_app_norm;
  Tensor<S> head_app_w, head_app_b;
  std::vector<BlockParams<S>> dec_mot;
  std::vector<JointBlockParams<S>> dec_mot_joint;
  NormParams<S> dec_mot_norm;
  Tensor<S> head_mot_w, head_mot_b;
  Tensor<S> cls_order;  // clip-order summary token
};

template <class S>
ModelParams<S> init_model_params(Rng& rng, const ModelConfig& c, double sigma = 0.02) {
  validate_config(c);
  int64_t D = c.width, R = c.rw(), T = c.frames, N = c.sites();
  ModelParams<S> p;
  p.patch_w = normal_param<S>(rng, {c.patch_dim(), D}, sigma);
  p.patch_b = const_param<S>({D}, S(0));
  p.pos_enc = init_pos_embeds<S>(rng, T, N, D, sigma);
  for (int64_t i = 0; i < c.enc_depth; ++i)
    p.encoder.push_back(init_block<S>(rng, D, c.mlp_ratio * D, sigma));
  p.enc_norm = init_norm<S>(D);
  if (R != D) {
    p.bridge_w = normal_param<S>(rng, {D, R}, sigma);
    p.bridge_b = const_param<S>({R}, S(0));
  }
  p.pos_dec = init_pos_embeds<S>(rng, T, N, R, sigma);
  p.mask_query = normal_param<S>(rng, {R}, sigma);
  for (int64_t i = 0; i < c.reg_depth; ++i)
    p.regressor.push_back(init_cross_block<S>(rng, R, c.mlp_ratio * R, sigma));
  p.reg_norm = init_norm<S>(R);
  for (int64_t i = 0; i < c.dec_app_depth; ++i) {
    if (c.joint_decoder)
      p.dec_app_joint.push_back(init_joint_block<S>(rng, R, c.mlp_ratio * R, sigma));
    else
      p.dec_app.push_back(init_block<S>(rng, R, c.mlp_ratio * R, sigma));
  }
  p.dec_app_norm = init_norm<S>(R);
  p.head_app_w = normal_param<S>(rng, {R, c.vocab}, sigma);
  p.head_app_b = const_param<S>({c.vocab}, S(0));
  if (c.motion != MotionKind::none) {
    for (int64_t i = 0; i < c.dec_mot_depth; ++i) {
      if (c.joint_decoder)
        p.dec_mot_joint.push_back(init_joint_block<S>(rng, R, c.mlp_ratio * R, sigma));
      else
        p.dec_mot.push_back(init_block<S>(rng, R, c.mlp_ratio * R, sigma));
    }
    p.dec_mot_norm = init_norm<S>(R);
    p.head_mot_w = normal_param<S>(rng, {R, c.motion_dim()}, sigma);
    p.head_mot_b = const_param<S>({c.motion_dim()}, S(0));
    if (c.motion == MotionKind::clip_order) p.cls_order = normal_param<S>(rng, {R}, sigma);
  }
  return p;
}

template <class S>
void collect_params(const ModelParams<S>& p, NamedParams<S>& out) {
  out.emplace_back("patch.w", p.patch_w);
  out.emplace_back("patch.b", p.patch_b);
  out.emplace_back("pos_enc.temporal", p.pos_enc.temporal);
  out.emplace_back("pos_enc.spatial", p.pos_enc.spatial);
  for (size_t i = 0; i < p.encoder.size(); ++i)
    p.encoder[i].collect("enc." + std::to_string(i), out);
  p.enc_norm.collect("enc_norm", out);
  if (p.bridge_w.defined()) {
    out.emplace_back("bridge.w", p.bridge_w);
    out.emplace_back("bridge.b", p.bridge_b);
  }
  out.emplace_back("pos_dec.temporal", p.pos_dec.temporal);
  out.emplace_back("pos_dec.spatial", p.pos_dec.spatial);
  out.emplace_back("mask_query", p.mask_query);
  for (size_t i = 0; i < p.regressor.size(); ++i)
    p.regressor[i].collect("reg." + std::to_string(i), out);
  p.reg_norm.collect("reg_norm", out);
  for (size_t i = 0; i < p.dec_app.size(); ++i)
    p.dec_app[i].collect("dec_app." + std::to_string(i), out);
  for (size_t i = 0; i < p.dec_app_joint.size(); ++i)
    p.dec_app_joint[i].collect("dec_app." + std::to_string(i), out);
  p.dec_app_norm.collect("dec_app_norm", out);
  out.emplace_back("head_app.w", p.head_app_w);
  out.emplace_back("head_app.b", p.head_app_b);
  for (size_t i = 0; i < p.dec_mot.size(); ++i)
    p.dec_mot[i].collect("dec_mot." + std::to_string(i), out);
  for (size_t i = 0; i < p.dec_mot_joint.size(); ++i)
    p.dec_mot_joint[i].collect("dec_mot." + std::to_string(i), out);
  if (p.dec_mot_norm.gamma.defined()) p.dec_mot_norm.collect("dec_mot_norm", out);
  if (p.head_mot_w.defined()) {
    out.emplace_back("head_mot.w", p.head_mot_w);
    out.emplace_back("head_mot.b", p.head_mot_b);
  }
  if (p.cls_order.defined()) out.emplace_back("cls_order", p.cls_order);
}

namespace detail {

template <class S>
Tensor<S> detach_if(const Tensor<S>& t) {
  return t.defined() ? t.detached() : Tensor<S>();
}

template <class S>
NormParams<S> detach(const NormParams<S>& p) {
  return {p.gamma.detached(), p.beta.detached()};
}

template <class S>
AttnParams<S> detach(const AttnParams<S>& p) {
  return {p.wq.detached(), p.bq.detached(), p.wk.detached(), p.bk.detached(),
          p.wv.detached(), p.bv.detached(), p.wo.detached(), p.bo.detached()};
}

template <class S>
MlpParams<S> detach(const MlpParams<S>& p) {
  return {p.w1.detached(), p.b1.detached(), p.w2.detached(), p.b2.detached()};
}

template <class S>
BlockParams<S> detach(const BlockParams<S>& p) {
  BlockParams<S> out;
  out.norm_t = detach(p.norm_t);
  out.norm_s = detach(p.norm_s);
  out.norm_m = detach(p.norm_m);
  out.attn_t = detach(p.attn_t);
  out.attn_s = detach(p.attn_s);
  out.mlp = detach(p.mlp);
  return out;
}

template <class S>
JointBlockParams<S> detach(const JointBlockParams<S>& p) {
  JointBlockParams<S> out;
  out.norm_a = detach(p.norm_a);
  out.norm_m = detach(p.norm_m);
  out.attn = detach(p.attn);
  out.mlp = detach(p.mlp);
  return out;
}

template <class S>
CrossBlockParams<S> detach(const CrossBlockParams<S>& p) {
  CrossBlockParams<S> out;
  out.norm_q = detach(p.norm_q);
  out.norm_kv = detach(p.norm_kv);
  out.norm_m = detach(p.norm_m);
  out.attn = detach(p.attn);
  out.mlp = detach(p.mlp);
  return out;
}

template <class S>
PosEmbeds<S> detach(const PosEmbeds<S>& p) {
  PosEmbeds<S> out;
  out.temporal = detach_if(p.temporal);
  out.spatial = detach_if(p.spatial);
  return out;
}

}  // namespace detail

// a view of the same buffers with every gradient connection severed
template <class S>
ModelParams<S> detached_params(const ModelParams<S>& p) {
  using detail::detach;
  using detail::detach_if;
  ModelParams<S> out;
  out.patch_w = detach_if(p.patch_w);
  out.patch_b = detach_if(p.patch_b);
  out.pos_enc = detach(p.pos_enc);
  for (auto& b : p.encoder) out.encoder.push_back(detach(b));
  out.enc_norm = detach(p.enc_norm);
  out.bridge_w = detach_if(p.bridge_w);
  out.bridge_b = detach_if(p.bridge_b);
  out.pos_dec = detach(p.pos_dec);
  out.mask_query = detach_if(p.mask_query);
  for (auto& b : p.regressor) out.regressor.push_back(detach(b));
  out.reg_norm = detach(p.reg_norm);
  for (auto& b : p.dec_app) out.dec_app.push_back(detach(b));
  for (auto& b : p.dec_app_joint) out.dec_app_joint.push_back(detach(b));
  out.dec_app_norm = detach(p.dec_app_norm);
  out.head_app_w = detach_if(p.head_app_w);
  out.head_app_b = detach_if(p.head_app_b);
  for (auto& b : p.dec_mot) out.dec_mot.push_back(detach(b));
  for (auto& b : p.dec_mot_joint) out.dec_mot_joint.push_back(detach(b));
  if (p.dec_mot_norm.gamma.defined()) out.dec_mot_norm = detach(p.dec_mot_norm);
  out.head_mot_w = detach_if(p.head_mot_w);
  out.head_mot_b = detach_if(p.head_mot_b);
  out.cls_order = detach_if(p.cls_order);
  return out;
}

template <class S>
void check_grid(const ModelConfig& c, const Tensor<S>& grid) {
  if (grid.rank() != 3 || grid.dim(0) != c.frames || grid.dim(1) != c.sites() ||
      grid.dim(2) != c.patch_dim())
    throw ShapeError("model: patch grid " + shape_str(grid.shape()) + " does not match [" +
                     std::to_string(c.frames) + "," + std::to_string(c.sites()) + "," +
                     std::to_string(c.patch_dim()) + "]");
}

// encoder over every patch: [T, N, width]
template <class S>
Tensor<S> encode_full(const ModelConfig& c, const ModelParams<S>& p, const Tensor<S>& grid) {
  check_grid(c, grid);
  auto x = linear(grid, p.patch_w, p.patch_b);
  x = add_separable_pos(x, p.pos_enc.temporal, p.pos_enc.spatial);
  for (auto& blk : p.encoder) x = factorized_block(x, blk, c.heads);
  return layer_norm(x, p.enc_norm.gamma, p.enc_norm.beta);
}

template <class S>
struct Encoded {
  Tensor<S> tokens;  // [T, N_v, width]
  std::vector<int64_t> visible_ids;
};

// encoder over visible patches only
template <class S>
Encoded<S> encode_visible(const ModelConfig& c, const ModelParams<S>& p, const Tensor<S>& grid,
                          const MaskSpec& mask) {
  check_grid(c, grid);
  auto part = partition(grid, mask);
  if (part.visible.dim(1) < 1)
    throw UsageError("encode_visible: mask leaves no visible patches");
  auto x = linear(part.visible, p.patch_w, p.patch_b);
  x = add_separable_pos(x, p.pos_enc.temporal, p.pos_enc.spatial, &part.visible_ids);
  for (auto& blk : p.encoder) x = factorized_block(x, blk, c.heads);
  return {layer_norm(x, p.enc_norm.gamma, p.enc_norm.beta), std::move(part.visible_ids)};
}

template <class S>
Tensor<S> to_regressor_width(const ModelParams<S>& p, const Tensor<S>& x) {
  return p.bridge_w.defined() ? linear(x, p.bridge_w, p.bridge_b) : x;
}

// e_t + e_s rows for a position list, differentiable into the tables
template <class S>
Tensor<S> pos_rows(const PosEmbeds<S>& pe,
                   const std::vector<std::pair<int64_t, int64_t>>& positions) {
  Tensor<S> zero({pe.temporal.dim(1)});
  return mask_queries(zero, pe.temporal, pe.spatial, positions);
}

// one learned query per masked position, refined against visible tokens: [1, M, rw]
template <class S>
Tensor<S> regress(const ModelConfig& c, const ModelParams<S>& p, const Tensor<S>& enc_tokens,
                  const MaskSpec& mask) {
  if (enc_tokens.rank() != 3)
    throw ShapeError("regress: tokens must be [T,N_v,width], got " + shape_str(enc_tokens.shape()));
  if (enc_tokens.dim(1) < 1) throw UsageError("regress: no visible tokens to read from");
  auto kv = to_regressor_width(p, enc_tokens);
  kv = reshape(kv, {1, kv.dim(0) * kv.dim(1), c.rw()});
  auto q = mask_queries(p.mask_query, p.pos_dec.temporal, p.pos_dec.spatial, mask.positions());
  auto x = reshape(q, {1, q.dim(0), c.rw()});
  for (auto& blk : p.regressor) x = cross_attn_block(x, kv, blk, c.heads);
  return layer_norm(x, p.reg_norm.gamma, p.reg_norm.beta);
}

// encoder run over the ground-truth masked patches as their own [T, m, D]
// stream, severed from the graph; needs a temporally constant mask so the
// masked set forms a regular grid for factorized attention
template <class S>
Tensor<S> alignment_targets(const ModelConfig& c, const ModelParams<S>& p, const Tensor<S>& grid,
                            const MaskSpec& mask) {
  check_grid(c, grid);
  const auto& ids = mask.masked_spatial();  // StructureError when frames differ
  if (ids.empty()) throw UsageError("alignment_targets: nothing masked");
  auto frozen = detached_params(p);
  auto x = linear(gather_spatial(grid, ids), frozen.patch_w, frozen.patch_b);
  x = add_separable_pos(x, frozen.pos_enc.temporal, frozen.pos_enc.spatial, &ids);
  for (auto& blk : frozen.encoder) x = factorized_block(x, blk, c.heads);
  x = layer_norm(x, frozen.enc_norm.gamma, frozen.enc_norm.beta);
  return reshape(to_regressor_width(frozen, x), {mask.masked_total(), c.rw()});
}

// class logits for every masked position: [M, vocab]
template <class S>
Tensor<S> decode_appearance(const ModelConfig& c, const ModelParams<S>& p, const Tensor<S>& r,
                            const MaskSpec& mask) {
  int64_t M = r.dim(1), D = r.dim(2);
  if (c.joint_decoder) {
    auto x = add(r, reshape(pos_rows(p.pos_dec, mask.positions()), {1, M, D}));
    for (auto& blk : p.dec_app_joint) x = joint_block(x, blk, c.heads);
    x = layer_norm(x, p.dec_app_norm.gamma, p.dec_app_norm.beta);
    return reshape(linear(x, p.head_app_w, p.head_app_b), {M, c.vocab});
  }
  if (mask.kind != MaskKind::tube)
    throw StructureError("decode_appearance: per-frame decoding needs a tube mask; "
                         "use the joint decoder for other mask kinds");
  int64_t m = mask.masked_per_frame();
  const auto& ids = mask.masked_spatial();
  auto x = reshape(r, {mask.T, m, D});
  x = add_separable_pos(x, p.pos_dec.temporal, p.pos_dec.spatial, &ids);
  for (auto& blk : p.dec_app) x = factorized_block(x, blk, c.heads);
  x = layer_norm(x, p.dec_app_norm.gamma, p.dec_app_norm.beta);
  return reshape(linear(x, p.head_app_w, p.head_app_b), {mask.T * m, c.vocab});
}

// motion rows for masked positions of all frames but the last:
// [T-1, m, motion_dim] per-frame, or [M', motion_dim] joint
template <class S>
Tensor<S> decode_motion(const ModelConfig& c, const ModelParams<S>& p, const Tensor<S>& r,
                        const MaskSpec& mask) {
  if (c.motion != MotionKind::rgb_diff && c.motion != MotionKind::flow)
    throw UsageError("decode_motion: run is configured for " + motion_kind_name(c.motion));
  int64_t M = r.dim(1), D = r.dim(2);
  auto prefix = mask.positions_except_last();
  int64_t Mp = int64_t(prefix.size());
  auto rp = slice_axis0(reshape(r, {M, D}), 0, Mp);
  if (c.joint_decoder) {
    auto x = reshape(add(rp, pos_rows(p.pos_dec, prefix)), {1, Mp, D});
    for (auto& blk : p.dec_mot_joint) x = joint_block(x, blk, c.heads);
    x = layer_norm(x, p.dec_mot_norm.gamma, p.dec_mot_norm.beta);
    return reshape(linear(x, p.head_mot_w, p.head_mot_b), {Mp, c.motion_dim()});
  }
  if (mask.kind != MaskKind::tube)
    throw StructureError("decode_motion: per-frame decoding needs a tube mask; "
                         "use the joint decoder for other mask kinds");
  int64_t m = mask.masked_per_frame();
  const auto& ids = mask.masked_spatial();
  auto x = reshape(rp, {mask.T - 1, m, D});
  auto et = slice_axis0(p.pos_dec.temporal, 0, mask.T - 1);
  x = add_separable_pos(x, et, p.pos_dec.spatial, &ids);
  for (auto& blk : p.dec_mot) x = factorized_block(x, blk, c.heads);
  x = layer_norm(x, p.dec_mot_norm.gamma, p.dec_mot_norm.beta);
  return linear(x, p.head_mot_w, p.head_mot_b);
}

// row average via a constant matmul, so gradients pass through
template <class S>
Tensor<S> mean_rows(const Tensor<S>& x) {
  if (x.rank() != 2) throw ShapeError("mean_rows: needs rank 2, got " + shape_str(x.shape()));
  if (x.dim(0) < 1) throw UsageError("mean_rows: no rows");
  Tensor<S> ones({1, x.dim(0)}, S(1));
  return scale(matmul(ones, x), 1.0 / double(x.dim(0)));
}

// two order logits from a summary row that rides the time axis: [1, 2]
template <class S>
Tensor<S> decode_clip_order(const ModelConfig& c, const ModelParams<S>& p, const Tensor<S>& r,
                            const MaskSpec& mask, const std::vector<int64_t>& half_order) {
  if (c.motion != MotionKind::clip_order)
    throw UsageError("decode_clip_order: run is configured for " + motion_kind_name(c.motion));
  if (mask.kind != MaskKind::tube)
    throw StructureError("decode_clip_order: needs a tube mask");
  int64_t M = r.dim(1), D = r.dim(2);
  int64_t m = mask.masked_per_frame();
  const auto& ids = mask.masked_spatial();
  auto x = reshape(r, {mask.T, m, D});
  // the latents are shuffled by temporal half; positions describe the new
  // slot order, so the only order cue left in content is what the latents
  // themselves carry
  x = permute_axis0(x, frame_permutation(half_order, mask.T));
  x = add_separable_pos(x, p.pos_dec.temporal, p.pos_dec.spatial, &ids);
  auto summary = reshape(broadcast_rows(p.cls_order, m), {1, m, D});
  x = concat_axis0(summary, x);  // [T+1, m, D]
  for (auto& blk : p.dec_mot) {
    auto h = add(x, mha_temporal(layer_norm(x, blk.norm_t.gamma, blk.norm_t.beta), blk.attn_t,
                                 c.heads));
    // spatial mixing runs over real frames only; the summary row passes through
    auto head_row = slice_axis0(h, 0, 1);
    auto rest = slice_axis0(h, 1, mask.T);
    rest = add(rest, mha_spatial(layer_norm(rest, blk.norm_s.gamma, blk.norm_s.beta), blk.attn_s,
                                 c.heads));
    auto joined = concat_axis0(head_row, rest);
    x = add(joined, mlp(layer_norm(joined, blk.norm_m.gamma, blk.norm_m.beta), blk.mlp));
  }
  x = layer_norm(x, p.dec_mot_norm.gamma, p.dec_mot_norm.beta);
  auto per_tube = reshape(slice_axis0(x, 0, 1), {m, D});
  return linear(per_tube, p.head_mot_w, p.head_mot_b);  // [m, 2]
}

template <class S>
struct ClipOrderOut {
  Tensor<S> logits;  // one 2-way prediction per masked tube
  int64_t label = 0;
};

// draws the half order from the seed, then classifies it from the latents
template <class S>
ClipOrderOut<S> decode_clip_order_seeded(const ModelConfig& c, const ModelParams<S>& p,
                                         const Tensor<S>& r, const MaskSpec& mask,
                                         uint64_t seed) {
  Rng rng(seed);
  auto half = draw_half_order(rng);
  return {decode_clip_order(c, p, r, mask, half), clip_order_label(half)};
}

// frozen-encoder clip feature for probing: per-frame token means, frames
// concatenated so the temporal trajectory survives the pooling
template <class S>
Tensor<S> clip_feature(const ModelConfig& c, const ModelParams<S>& p, const Tensor<S>& grid) {
  auto full = encode_full(c, p, grid);  // [T, N, width]
  Tensor<S> out({c.frames * c.width});
  const S* in = full.values().data();
  for (int64_t t = 0; t < c.frames; ++t)
    for (int64_t n = 0; n < c.sites(); ++n)
      for (int64_t d = 0; d < c.width; ++d)
        out.values()[size_t(t * c.width + d)] += in[(t * c.sites() + n) * c.width + d];
  for (auto& v : out.values()) v = S(double(v) / double(c.sites()));
  return out;
}

inline int64_t clip_feature_dim(const ModelConfig& c) { return c.frames * c.width; }

}  // namespace mam2
