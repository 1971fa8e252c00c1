#pragma once

// Clip <-> patch-grid moves and the separable positional embeddings.
// A patch row is the channel-major flattening of one C x P x P cell, so
// row index j walks the spatial grid in raster order.

#include <cstdint>

#include "mam2/common.hpp"
#include "mam2/rng.hpp"
#include "mam2/tensor.hpp"

namespace mam2 {

template <class S>
Tensor<S> patchify(const Tensor<S>& frames, int64_t P) {
  if (frames.rank() != 4)
    throw ShapeError("patchify: frames must be [T,C,H,W], got " + shape_str(frames.shape()));
  if (frames.requires_grad()) throw UsageError("patchify: operates on plain values");
  int64_t T = frames.dim(0), C = frames.dim(1), H = frames.dim(2), W = frames.dim(3);
  if (P < 1 || H % P != 0 || W % P != 0)
    throw UsageError("patchify: " + std::to_string(H) + "x" + std::to_string(W) +
                     " not divisible by patch side " + std::to_string(P));
  int64_t gh = H / P, gw = W / P, N = gh * gw, L = C * P * P;
  Tensor<S> out({T, N, L});
  const S* in = frames.node->val();
  S* po = out.node->val();
  for (int64_t t = 0; t < T; ++t)
    for (int64_t gy = 0; gy < gh; ++gy)
      for (int64_t gx = 0; gx < gw; ++gx) {
        S* row = po + (t * N + gy * gw + gx) * L;
        for (int64_t c = 0; c < C; ++c)
          for (int64_t py = 0; py < P; ++py)
            for (int64_t px = 0; px < P; ++px)
              row[(c * P + py) * P + px] =
                  in[((t * C + c) * H + gy * P + py) * W + gx * P + px];
      }
  return out;
}

template <class S>
Tensor<S> unpatchify(const Tensor<S>& patches, int64_t P, int64_t C, int64_t H, int64_t W) {
  if (patches.rank() != 3)
    throw ShapeError("unpatchify: patches must be [T,N,L], got " + shape_str(patches.shape()));
  int64_t T = patches.dim(0), N = patches.dim(1), L = patches.dim(2);
  if (P < 1 || H % P != 0 || W % P != 0 || N != (H / P) * (W / P) || L != C * P * P)
    throw ShapeError("unpatchify: inconsistent geometry");
  int64_t gh = H / P, gw = W / P;
  Tensor<S> out({T, C, H, W});
  const S* in = patches.node->val();
  S* po = out.node->val();
  for (int64_t t = 0; t < T; ++t)
    for (int64_t gy = 0; gy < gh; ++gy)
      for (int64_t gx = 0; gx < gw; ++gx) {
        const S* row = in + (t * N + gy * gw + gx) * L;
        for (int64_t c = 0; c < C; ++c)
          for (int64_t py = 0; py < P; ++py)
            for (int64_t px = 0; px < P; ++px)
              po[((t * C + c) * H + gy * P + py) * W + gx * P + px] =
                  row[(c * P + py) * P + px];
      }
  return out;
}

template <class S>
struct PosEmbeds {
  Tensor<S> temporal;  // T x D
  Tensor<S> spatial;   // N x D
};

template <class S>
PosEmbeds<S> init_pos_embeds(Rng& rng, int64_t T, int64_t N, int64_t D, double sigma = 0.02) {
  PosEmbeds<S> pe;
  pe.temporal = Tensor<S>({T, D});
  pe.spatial = Tensor<S>({N, D});
  for (auto& v : pe.temporal.values()) v = S(rng.normal(0.0, sigma));
  for (auto& v : pe.spatial.values()) v = S(rng.normal(0.0, sigma));
  pe.temporal.set_requires_grad(true);
  pe.spatial.set_requires_grad(true);
  return pe;
}

// tokens[t][j] = patches[t][j] . W_embed + bias
template <class S>
Tensor<S> embed(const Tensor<S>& patches, const Tensor<S>& W_embed, const Tensor<S>& bias) {
  return linear(patches, W_embed, bias);
}

// out[i][j] = in[i][j] + e^t_i + e^s_j
template <class S>
Tensor<S> add_pos(const Tensor<S>& grid, const PosEmbeds<S>& pe) {
  return add_separable_pos(grid, pe.temporal, pe.spatial);
}

}  // namespace mam2
