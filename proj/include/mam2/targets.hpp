#pragma once

// Supervision signals: discrete appearance tokens, RGB-difference motion
// targets, clip-order labels, and precomputed-flow loading.

#include <algorithm>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "mam2/common.hpp"
#include "mam2/masking.hpp"
#include "mam2/patches.hpp"
#include "mam2/rng.hpp"
#include "mam2/tensor_io.hpp"
#include "mam2/video.hpp"

namespace mam2 {

// pure per-patch quantizer; patch rows arrive channel-major C x P x P
struct Tokenizer {
  virtual ~Tokenizer() = default;
  virtual int64_t vocab() const = 0;
  virtual std::string name() const = 0;
  virtual int64_t quantize(const float* patch, int64_t C, int64_t P) const = 0;
};

// 16384-way code: 2 bits of hue class, then 3 bits of luminance for each
// of the four 2x2 spatial quadrants.
//   token = hue*4096 + l0*512 + l1*64 + l2*8 + l3
//   l_i = min(7, floor(8 * mean luma of quadrant i)), luma = (r+g+b)/3
//   hue = argmax of patch-mean channel, or 3 when channels are near-equal
struct GridTokenizer16384 final : Tokenizer {
  int64_t vocab() const override { return 16384; }
  std::string name() const override { return "grid16384"; }

  int64_t quantize(const float* patch, int64_t C, int64_t P) const override {
    if (C != 3) throw UsageError("grid16384: needs 3-channel patches, got C=" + std::to_string(C));
    if (P < 2) throw UsageError("grid16384: patch side must be >= 2");
    int64_t hp = P / 2;
    auto luma = [&](int64_t y0, int64_t y1, int64_t x0, int64_t x1) {
      double acc = 0.0;
      for (int64_t c = 0; c < 3; ++c)
        for (int64_t y = y0; y < y1; ++y)
          for (int64_t x = x0; x < x1; ++x) acc += double(patch[(c * P + y) * P + x]);
      return acc / (3.0 * double((y1 - y0) * (x1 - x0)));
    };
    int64_t l[4];
    l[0] = std::min<int64_t>(7, int64_t(std::floor(8.0 * luma(0, hp, 0, hp))));
    l[1] = std::min<int64_t>(7, int64_t(std::floor(8.0 * luma(0, hp, hp, P))));
    l[2] = std::min<int64_t>(7, int64_t(std::floor(8.0 * luma(hp, P, 0, hp))));
    l[3] = std::min<int64_t>(7, int64_t(std::floor(8.0 * luma(hp, P, hp, P))));
    double mean[3];
    for (int64_t c = 0; c < 3; ++c) {
      double acc = 0.0;
      for (int64_t y = 0; y < P; ++y)
        for (int64_t x = 0; x < P; ++x) acc += double(patch[(c * P + y) * P + x]);
      mean[c] = acc / double(P * P);
    }
    double mx = std::max({mean[0], mean[1], mean[2]});
    double mn = std::min({mean[0], mean[1], mean[2]});
    int64_t hue = 3;
    if (mx - mn >= 0.05) {
      hue = 0;
      for (int64_t c = 1; c < 3; ++c)
        if (mean[c] > mean[hue]) hue = c;
    }
    return hue * 4096 + l[0] * 512 + l[1] * 64 + l[2] * 8 + l[3];
  }
};

inline std::unique_ptr<Tokenizer> tokenizer_by_name(const std::string& name) {
  if (name == "grid16384") return std::make_unique<GridTokenizer16384>();
  throw UsageError("unknown tokenizer: " + name);
}

struct TokenTargets {
  std::vector<int64_t> tokens;  // T*N grid, frame-major raster
  int64_t T = 0, N = 0, K = 0;

  int64_t at(int64_t t, int64_t j) const { return tokens[size_t(t * N + j)]; }
};

inline TokenTargets token_targets(const VideoClip& clip, int64_t P, const Tokenizer& tok) {
  TensorF patches = patchify(clip.frames, P);
  int64_t T = patches.dim(0), N = patches.dim(1);
  TokenTargets out;
  out.T = T;
  out.N = N;
  out.K = tok.vocab();
  out.tokens.resize(size_t(T * N));
  const float* rows = patches.node->val();
  int64_t L = patches.dim(2);
  for (int64_t i = 0; i < T * N; ++i) {
    int64_t id = tok.quantize(rows + i * L, 3, P);
    if (id < 0 || id >= out.K)
      throw RangeError("tokenizer emitted id " + std::to_string(id) + " outside [0," +
                       std::to_string(out.K) + ")");
    out.tokens[size_t(i)] = id;
  }
  return out;
}

// ids at masked positions in canonical M order; reduced mod K when the
// model vocabulary is smaller than the tokenizer's (toy configs)
inline std::vector<int64_t> tokens_at(const TokenTargets& grid,
                                      const std::vector<std::pair<int64_t, int64_t>>& positions,
                                      int64_t K) {
  std::vector<int64_t> out;
  out.reserve(positions.size());
  for (auto& [t, j] : positions) {
    if (t < 0 || t >= grid.T || j < 0 || j >= grid.N)
      throw RangeError("tokens_at: position outside grid");
    out.push_back(grid.at(t, j) % K);
  }
  return out;
}

template <class S>
struct MotionTarget {
  Tensor<S> diffs;  // (T-1) x masked-per-frame x (P*P*C)
};

// diff[t][j] = patchify(frames[t+1])[j] - patchify(frames[t])[j] at masked
// spatial ids, for t in [0, T-2]: the prediction for a masked token of
// frame t is the change from frame t to t+1, and frame T-1 predicts nothing.
template <class S>
MotionTarget<S> rgb_diff_target(const VideoClip& clip, const MaskSpec& mask, int64_t P) {
  if (clip.t() < 2) throw UsageError("rgb_diff_target: need at least 2 frames");
  if (!mask.temporally_constant())
    throw StructureError("rgb_diff_target: needs a tube-structured (temporally constant) mask");
  Tensor<S> patches = patchify(frames_as<S>(clip), P);
  int64_t T = patches.dim(0), N = patches.dim(1), L = patches.dim(2);
  if (T != mask.T || N != mask.N)
    throw ShapeError("rgb_diff_target: mask for T=" + std::to_string(mask.T) + " N=" +
                     std::to_string(mask.N) + " vs grid " + shape_str(patches.shape()));
  const auto& ids = mask.masked_spatial();
  int64_t m = int64_t(ids.size());
  MotionTarget<S> out;
  out.diffs = Tensor<S>({T - 1, m, L});
  const S* pp = patches.node->val();
  S* po = out.diffs.node->val();
  for (int64_t t = 0; t + 1 < T; ++t)
    for (int64_t a = 0; a < m; ++a) {
      const S* cur = pp + (t * N + ids[size_t(a)]) * L;
      const S* nxt = pp + ((t + 1) * N + ids[size_t(a)]) * L;
      S* row = po + (t * m + a) * L;
      for (int64_t k = 0; k < L; ++k) row[k] = nxt[k] - cur[k];
    }
  return out;
}

// ---- clip order ----

// half_order is a permutation of {0,1} naming which original half comes first
inline int64_t clip_order_label(const std::vector<int64_t>& half_order) {
  if (half_order == std::vector<int64_t>{0, 1}) return 0;
  if (half_order == std::vector<int64_t>{1, 0}) return 1;
  throw UsageError("clip_order_label: not a permutation of 2 halves");
}

inline std::vector<int64_t> draw_half_order(Rng& rng) {
  return rng.below(2) ? std::vector<int64_t>{1, 0} : std::vector<int64_t>{0, 1};
}

// frame-level permutation that moves the chosen half order onto T frames
inline std::vector<int64_t> frame_permutation(const std::vector<int64_t>& half_order, int64_t T) {
  if (T % 2 != 0) throw UsageError("frame_permutation: T must be even, got " + std::to_string(T));
  clip_order_label(half_order);  // validates
  std::vector<int64_t> perm;
  perm.reserve(size_t(T));
  int64_t half = T / 2;
  for (int64_t h : half_order)
    for (int64_t i = 0; i < half; ++i) perm.push_back(h * half + i);
  return perm;
}

// ---- precomputed optical flow ----

// file holds (T-1) x 2 x H x W flow; returns per-patch rows of size P*P*2
template <class S>
MotionTarget<S> load_flow_target(const std::string& path, const MaskSpec& mask, int64_t P) {
  TensorF flow = read_tensor<float>(path);
  if (flow.rank() != 4 || flow.dim(1) != 2)
    throw FormatError("flow file " + path + " must be [T-1,2,H,W], got " +
                      shape_str(flow.shape()));
  if (flow.dim(0) != mask.T - 1)
    throw FormatError("flow file " + path + " has " + std::to_string(flow.dim(0)) +
                      " frames, mask wants " + std::to_string(mask.T - 1));
  if (!mask.temporally_constant())
    throw StructureError("load_flow_target: needs a tube-structured (temporally constant) mask");
  int64_t H = flow.dim(2), W = flow.dim(3);
  if (P < 1 || H % P != 0 || W % P != 0)
    throw FormatError("flow file " + path + ": frame size not divisible by patch side");
  if ((H / P) * (W / P) != mask.N)
    throw FormatError("flow file " + path + " spatial grid does not match mask N=" +
                      std::to_string(mask.N));
  std::vector<S> as_s(flow.values().begin(), flow.values().end());
  Tensor<S> flow_s(flow.shape(), std::move(as_s));
  Tensor<S> patches = patchify(flow_s, P);  // [T-1, N, P*P*2]
  const auto& ids = mask.masked_spatial();
  int64_t m = int64_t(ids.size());
  int64_t L = patches.dim(2);
  MotionTarget<S> out;
  out.diffs = Tensor<S>({mask.T - 1, m, L});
  const S* pp = patches.node->val();
  S* po = out.diffs.node->val();
  for (int64_t t = 0; t < mask.T - 1; ++t)
    for (int64_t a = 0; a < m; ++a)
      std::copy(pp + (t * mask.N + ids[size_t(a)]) * L, pp + (t * mask.N + ids[size_t(a)] + 1) * L,
                po + (t * m + a) * L);
  return out;
}

}  // namespace mam2
