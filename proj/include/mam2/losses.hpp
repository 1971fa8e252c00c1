#pragma once

// The four training objectives and their weighted total. All four return
// rank-0 tensors wired into the graph.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mam2/common.hpp"
#include "mam2/tensor.hpp"

namespace mam2 {

enum class MseReduction { patch_mean, element_mean };

inline std::string mse_reduction_name(MseReduction r) {
  return r == MseReduction::patch_mean ? "patch-mean" : "element-mean";
}

inline MseReduction mse_reduction_from(const std::string& s) {
  if (s == "patch-mean") return MseReduction::patch_mean;
  if (s == "element-mean") return MseReduction::element_mean;
  throw UsageError("unknown mse reduction: " + s);
}

// mean over positions of the squared distance between latent rows
template <class S>
Tensor<S> alignment_loss(const Tensor<S>& pred, const Tensor<S>& target) {
  if (pred.rank() != 2 || target.rank() != 2)
    throw ShapeError("alignment_loss: needs [M,D] rows, got " + shape_str(pred.shape()) +
                     " and " + shape_str(target.shape()));
  check_same_shape(pred.shape(), target.shape(), "alignment_loss");
  if (pred.dim(0) < 1) throw UsageError("alignment_loss: no positions");
  auto d = sub(pred, target);
  return scale(sum_all(mul(d, d)), 1.0 / double(pred.dim(0)));
}

// class pick per masked position
template <class S>
Tensor<S> appearance_loss(const Tensor<S>& logits, const std::vector<int64_t>& token_ids) {
  return cross_entropy_mean(logits, token_ids);
}

// squared error against motion rows; patch-mean divides by the row count,
// element-mean by the full element count
template <class S>
Tensor<S> motion_loss(const Tensor<S>& pred, const Tensor<S>& target,
                      MseReduction red = MseReduction::patch_mean) {
  if (pred.rank() < 2)
    throw ShapeError("motion_loss: needs at least rank 2, got " + shape_str(pred.shape()));
  check_same_shape(pred.shape(), target.shape(), "motion_loss");
  int64_t rows = pred.numel() / pred.dim(pred.rank() - 1);
  if (rows < 1) throw UsageError("motion_loss: no rows");
  auto d = sub(pred, target);
  double denom = red == MseReduction::patch_mean ? double(rows) : double(pred.numel());
  return scale(sum_all(mul(d, d)), 1.0 / denom);
}

template <class S>
struct LossBundle {
  Tensor<S> appearance, motion, alignment, total;
};

// total = appearance + motion + alpha * alignment, in exactly this order
template <class S>
LossBundle<S> hybrid_loss(const Tensor<S>& appearance, const Tensor<S>& motion,
                          const Tensor<S>& alignment, double alpha = 2.0) {
  for (auto* t : {&appearance, &motion, &alignment})
    if (t->rank() != 0)
      throw ShapeError("hybrid_loss: parts must be scalars, got " + shape_str(t->shape()));
  auto total = add(add(appearance, motion), scale(alignment, alpha));
  if (!std::isfinite(double(total.item())))
    throw NumericError("hybrid_loss: total is not finite");
  return {appearance, motion, alignment, total};
}

}  // namespace mam2
