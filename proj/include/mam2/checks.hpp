#pragma once
// Shared verification helpers: the canonical toy geometry and an
// end-to-end gradient check over the full objective, used by the CLI
// and the acceptance tool.

#include <cstdint>
#include <vector>

#include "mam2/gradcheck.hpp"
#include "mam2/losses.hpp"
#include "mam2/model.hpp"

namespace mam2 {

// smallest geometry that exercises every pathway: 4 frames of a 4x4 image
// in 2x2 patches (4 sites), width 8, two heads, every depth 1, 8 classes
inline ModelConfig toy_fd_config() {
  ModelConfig c;
  c.frames = 4;
  c.image_size = 4;
  c.patch_size = 2;
  c.width = 8;
  c.heads = 2;
  c.enc_depth = 1;
  c.reg_depth = 1;
  c.dec_app_depth = 1;
  c.dec_mot_depth = 1;
  c.vocab = 8;
  return c;
}

// Central-difference check of the complete pre-training objective in
// 64-bit at toy size: encode, regress, both decoders, all three losses,
// weighted total. Alignment targets are a frozen snapshot, matching how
// the stop-gradient branch behaves in training.
inline FdReport e2e_toy_gradcheck(uint64_t seed = 33) {
  ModelConfig c = toy_fd_config();
  Rng rng(seed);
  auto p = init_model_params<double>(rng, c);
  TensorD grid({c.frames, c.sites(), c.patch_dim()});
  for (auto& v : grid.values()) v = rng.uniform(-1, 1);
  MaskSpec mask = tube_mask(c.sites(), c.frames, 0.5, derive_seed(seed, {1}));
  int64_t M = mask.masked_total();

  std::vector<int64_t> ids;
  for (int64_t i = 0; i < M; ++i) ids.push_back(rng.below(c.vocab));
  TensorD mot_target =
      rand_const(rng, {c.frames - 1, mask.masked_per_frame(), c.motion_dim()});
  auto align_target = alignment_targets(c, p, grid, mask);  // frozen snapshot

  auto loss_fn = [&] {
    auto enc = encode_visible(c, p, grid, mask);
    auto r = regress(c, p, enc.tokens, mask);
    auto app = appearance_loss(decode_appearance(c, p, r, mask), ids);
    auto mot = motion_loss(decode_motion(c, p, r, mask), mot_target);
    auto ali = alignment_loss(reshape(r, {M, c.rw()}), align_target);
    return hybrid_loss(app, mot, ali, 2.0).total;
  };

  NamedParams<double> leaves;
  collect_params(p, leaves);
  // smaller step: layer-norm curvature at this width dominates the h^2 term
  return fd_compare(loss_fn, leaves, 2e-5);
}

}  // namespace mam2
