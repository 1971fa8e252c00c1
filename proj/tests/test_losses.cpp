// Frozen closed-form values for every objective, the weighted-total
// identity, and finite differences through the combined loss.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "mam2/gradcheck.hpp"
#include "mam2/losses.hpp"

using namespace mam2;

TEST_CASE("appearance loss on uniform logits is log vocab") {
  TensorD logits({3, 16384});
  auto loss = appearance_loss(logits, {5, 900, 16383});
  CHECK(loss.item() == Catch::Approx(std::log(16384.0)).epsilon(1e-12));

  TensorD two({4, 2});
  CHECK(appearance_loss(two, {0, 1, 0, 1}).item() ==
        Catch::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("appearance loss vanishes on confident correct logits") {
  TensorD logits({2, 16384});
  logits.at({0, 7}) = 30.0;
  logits.at({1, 4000}) = 30.0;
  CHECK(appearance_loss(logits, {7, 4000}).item() < 1e-6);
}

TEST_CASE("alignment loss closed forms") {
  TensorD pred({1, 2}, {1, 0});
  TensorD zero({1, 2});
  CHECK(alignment_loss(pred, zero).item() == 1.0);

  TensorD two({2, 3}, {1, 0, 0, 1, 1, 1});  // squared norms 1 and 3
  TensorD zero2({2, 3});
  CHECK(alignment_loss(two, zero2).item() == 2.0);

  CHECK(alignment_loss(zero2, zero2).item() == 0.0);
  CHECK_THROWS_AS(alignment_loss(pred, zero2), ShapeError);
  CHECK_THROWS_AS(alignment_loss(TensorD({3}), TensorD({3})), ShapeError);
}

TEST_CASE("alignment loss is invariant to duplicating every row") {
  Rng rng(40);
  TensorD pred = rand_const(rng, {5, 4});
  TensorD tgt = rand_const(rng, {5, 4});
  TensorD pred2({10, 4}), tgt2({10, 4});
  for (int64_t i = 0; i < 5; ++i)
    for (int64_t r = 0; r < 2; ++r)
      for (int64_t d = 0; d < 4; ++d) {
        pred2.at({2 * i + r, d}) = pred.at({i, d});
        tgt2.at({2 * i + r, d}) = tgt.at({i, d});
      }
  CHECK(alignment_loss(pred2, tgt2).item() ==
        Catch::Approx(alignment_loss(pred, tgt).item()).epsilon(1e-12));
}

TEST_CASE("motion loss reductions") {
  TensorD pred({3, 2, 4});
  TensorD tgt({3, 2, 4}, std::vector<double>(24, 0.5));
  // six patches, each contributing 4 * 0.25
  CHECK(motion_loss(pred, tgt).item() == 1.0);
  CHECK(motion_loss(pred, tgt, MseReduction::element_mean).item() == 0.25);

  TensorD one({5, 4});
  one.at({2, 1}) = 1.0;
  TensorD z({5, 4});
  CHECK(motion_loss(one, z).item() == 1.0 / 5.0);

  CHECK(motion_loss(z, z).item() == 0.0);
  CHECK_THROWS_AS(motion_loss(pred, TensorD({3, 2, 5})), ShapeError);
  CHECK_THROWS_AS(motion_loss(TensorD({4}), TensorD({4})), ShapeError);
}

TEST_CASE("mse reduction naming round trip") {
  CHECK(mse_reduction_from("patch-mean") == MseReduction::patch_mean);
  CHECK(mse_reduction_from("element-mean") == MseReduction::element_mean);
  CHECK(mse_reduction_name(MseReduction::patch_mean) == "patch-mean");
  CHECK_THROWS_AS(mse_reduction_from("mean"), UsageError);
}

TEST_CASE("hybrid total is the exact weighted sum") {
  auto app = TensorD::scalar(1.0);
  auto mot = TensorD::scalar(2.0);
  auto ali = TensorD::scalar(3.0);
  auto bundle = hybrid_loss(app, mot, ali, 2.0);
  CHECK(bundle.total.item() == 9.0);
  CHECK(bundle.appearance.item() == 1.0);
  CHECK(bundle.motion.item() == 2.0);
  CHECK(bundle.alignment.item() == 3.0);

  // same accumulation, reassembled by hand, is bit-identical
  Rng rng(41);
  auto a2 = TensorD::scalar(rng.uniform(0, 9));
  auto m2 = TensorD::scalar(rng.uniform(0, 9));
  auto l2 = TensorD::scalar(rng.uniform(0, 9));
  auto by_hand = add(add(a2, m2), scale(l2, 2.0));
  CHECK(hybrid_loss(a2, m2, l2, 2.0).total.item() == by_hand.item());

  CHECK_THROWS_AS(hybrid_loss(TensorD({2}), mot, ali, 2.0), ShapeError);
  auto bad = TensorD::scalar(std::nan(""));
  CHECK_THROWS_AS(hybrid_loss(bad, mot, ali, 2.0), NumericError);
}

TEST_CASE("combined loss gradients match finite differences") {
  Rng rng(42);
  auto logits = rand_leaf(rng, {4, 6});
  auto pred_align = rand_leaf(rng, {4, 5});
  auto tgt_align = rand_const(rng, {4, 5});
  auto pred_mot = rand_leaf(rng, {2, 3, 4});
  auto tgt_mot = rand_const(rng, {2, 3, 4});
  std::vector<int64_t> ids = {1, 0, 5, 3};

  auto loss_fn = [&] {
    auto app = appearance_loss(logits, ids);
    auto mot = motion_loss(pred_mot, tgt_mot);
    auto ali = alignment_loss(pred_align, tgt_align);
    return hybrid_loss(app, mot, ali, 2.0).total;
  };
  auto rep = fd_compare(loss_fn,
                        {{"logits", logits}, {"pred_align", pred_align}, {"pred_mot", pred_mot}});
  INFO(rep.worst << " max_rel=" << rep.max_rel);
  CHECK(rep.pass(1e-5));

  auto loss_fn_elem = [&] {
    return motion_loss(pred_mot, tgt_mot, MseReduction::element_mean);
  };
  auto rep2 = fd_compare(loss_fn_elem, {{"pred_mot", pred_mot}});
  CHECK(rep2.pass(1e-5));
}

TEST_CASE("gradients reach the loss inputs with expected sign") {
  TensorD pred({1, 3}, {2, 0, 0});
  pred.set_requires_grad(true);
  TensorD tgt({1, 3}, {1, 0, 0});
  auto loss = alignment_loss(pred, tgt);
  backward(loss);
  // d/dp (p - t)^2 / M = 2 (p - t)
  CHECK(pred.grad()[0] == 2.0);
  CHECK(pred.grad()[1] == 0.0);
}
