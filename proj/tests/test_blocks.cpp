// Attention blocks: shape contracts, mixing structure, closed forms on
// singleton sequences, and finite-difference checks of every parameter.

#include <catch2/catch_amalgamated.hpp>

#include "mam2/blocks.hpp"
#include "mam2/gradcheck.hpp"

using namespace mam2;

namespace {

TensorD rand_tensor(Rng& rng, Shape shape, bool track) {
  TensorD t(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(-1, 1);
  t.set_requires_grad(track);
  return t;
}

void zero_out(Tensor<double>& t) {
  for (auto& v : t.values()) v = 0.0;
}

}  // namespace

TEST_CASE("blocks preserve input shape") {
  Rng rng(1);
  auto x = rand_tensor(rng, {3, 5, 8}, false);
  auto blk = init_block<double>(rng, 8, 16);
  CHECK(factorized_block(x, blk, 2).shape() == Shape{3, 5, 8});

  auto jb = init_joint_block<double>(rng, 8, 16);
  CHECK(joint_block(x, jb, 2).shape() == Shape{3, 5, 8});

  auto q = rand_tensor(rng, {1, 4, 8}, false);
  auto kv = rand_tensor(rng, {1, 7, 8}, false);
  auto cb = init_cross_block<double>(rng, 8, 16);
  CHECK(cross_attn_block(q, kv, cb, 2).shape() == Shape{1, 4, 8});
}

TEST_CASE("singleton sequences reduce attention to the value path") {
  Rng rng(2);
  auto p = init_attn<double>(rng, 6);

  // one token per frame: spatial attention has nothing to mix
  auto xs = rand_tensor(rng, {4, 1, 6}, false);
  auto closed_s = linear(linear(xs, p.wv, p.bv), p.wo, p.bo);
  CHECK(mha_spatial(xs, p, 3).values() == closed_s.values());

  // one frame: temporal attention has nothing to mix
  auto xt = rand_tensor(rng, {1, 4, 6}, false);
  auto closed_t = linear(linear(xt, p.wv, p.bv), p.wo, p.bo);
  CHECK(mha_temporal(xt, p, 3).values() == closed_t.values());

  // one key: cross attention copies its value row to every query
  auto q = rand_tensor(rng, {2, 3, 6}, false);
  auto kv = rand_tensor(rng, {2, 1, 6}, false);
  auto got = attend(q, kv, p, 3);
  auto v_row = linear(linear(kv, p.wv, p.bv), p.wo, p.bo);
  for (int64_t g = 0; g < 2; ++g)
    for (int64_t m = 0; m < 3; ++m)
      for (int64_t d = 0; d < 6; ++d)
        CHECK(got.at({g, m, d}) == Catch::Approx(v_row.at({g, 0, d})).margin(1e-14));
}

TEST_CASE("zeroed output projections turn blocks into the identity") {
  Rng rng(3);
  auto blk = init_block<double>(rng, 8, 16);
  zero_out(blk.attn_t.wo);
  zero_out(blk.attn_t.bo);
  zero_out(blk.attn_s.wo);
  zero_out(blk.attn_s.bo);
  zero_out(blk.mlp.w2);
  zero_out(blk.mlp.b2);
  auto x = rand_tensor(rng, {2, 5, 8}, false);
  CHECK(factorized_block(x, blk, 4).values() == x.values());

  auto cb = init_cross_block<double>(rng, 8, 16);
  zero_out(cb.attn.wo);
  zero_out(cb.attn.bo);
  zero_out(cb.mlp.w2);
  zero_out(cb.mlp.b2);
  auto q = rand_tensor(rng, {1, 3, 8}, false);
  auto kv = rand_tensor(rng, {1, 6, 8}, false);
  CHECK(cross_attn_block(q, kv, cb, 4).values() == q.values());
}

TEST_CASE("spatial attention never mixes across frames") {
  Rng rng(4);
  auto p = init_attn<double>(rng, 6);
  auto x = rand_tensor(rng, {2, 3, 6}, false);
  auto y = mha_spatial(x, p, 2);

  auto x2 = x.clone();
  for (int64_t j = 0; j < 3; ++j)
    for (int64_t d = 0; d < 6; ++d) x2.at({1, j, d}) += 0.5;
  auto y2 = mha_spatial(x2, p, 2);
  for (int64_t j = 0; j < 3; ++j)
    for (int64_t d = 0; d < 6; ++d) {
      CHECK(y2.at({0, j, d}) == y.at({0, j, d}));
    }
  // and frame 1 did change
  CHECK(y2.at({1, 0, 0}) != y.at({1, 0, 0}));
}

TEST_CASE("temporal attention never mixes across spatial sites") {
  Rng rng(5);
  auto p = init_attn<double>(rng, 6);
  auto x = rand_tensor(rng, {3, 2, 6}, false);
  auto y = mha_temporal(x, p, 2);

  auto x2 = x.clone();
  for (int64_t t = 0; t < 3; ++t)
    for (int64_t d = 0; d < 6; ++d) x2.at({t, 1, d}) += 0.5;
  auto y2 = mha_temporal(x2, p, 2);
  for (int64_t t = 0; t < 3; ++t)
    for (int64_t d = 0; d < 6; ++d) {
      CHECK(y2.at({t, 0, d}) == y.at({t, 0, d}));
    }
  CHECK(y2.at({0, 1, 0}) != y.at({0, 1, 0}));
}

TEST_CASE("joint attention does mix across frames") {
  Rng rng(6);
  auto jb = init_joint_block<double>(rng, 6, 12);
  auto x = rand_tensor(rng, {1, 6, 6}, false);
  auto y = joint_block(x, jb, 2);
  auto x2 = x.clone();
  x2.at({0, 5, 0}) += 1.0;
  auto y2 = joint_block(x2, jb, 2);
  CHECK(y2.at({0, 0, 0}) != y.at({0, 0, 0}));
}

TEST_CASE("spatial attention is equivariant to site permutation") {
  Rng rng(7);
  auto p = init_attn<double>(rng, 6);
  auto x = rand_tensor(rng, {2, 4, 6}, false);
  std::vector<int64_t> perm = {2, 0, 3, 1};

  auto site_permute = [&](const TensorD& g) {
    return transpose01(permute_axis0(transpose01(g), perm));
  };
  auto y_of_permuted = mha_spatial(site_permute(x), p, 2);
  auto permuted_y = site_permute(mha_spatial(x, p, 2));
  for (int64_t t = 0; t < 2; ++t)
    for (int64_t j = 0; j < 4; ++j)
      for (int64_t d = 0; d < 6; ++d)
        CHECK(y_of_permuted.at({t, j, d}) ==
              Catch::Approx(permuted_y.at({t, j, d})).margin(1e-12));
}

TEST_CASE("attention probabilities are rows of a stochastic matrix") {
  Rng rng(8);
  auto p = init_attn<double>(rng, 8);
  auto q = rand_tensor(rng, {2, 3, 8}, false);
  auto kv = rand_tensor(rng, {2, 5, 8}, false);
  AttnTrace<double> trace;
  attend(q, kv, p, 4, &trace);
  REQUIRE(trace.probs.shape() == Shape{8, 3, 5});
  CHECK_FALSE(trace.probs.requires_grad());
  for (int64_t g = 0; g < 8; ++g)
    for (int64_t m = 0; m < 3; ++m) {
      double s = 0;
      for (int64_t k = 0; k < 5; ++k) {
        double w = trace.probs.at({g, m, k});
        CHECK(w >= 0.0);
        s += w;
      }
      CHECK(s == Catch::Approx(1.0).margin(1e-12));
    }
}

TEST_CASE("attend input validation") {
  Rng rng(9);
  auto p = init_attn<double>(rng, 6);
  auto q = rand_tensor(rng, {2, 3, 6}, false);
  CHECK_THROWS_AS(attend(q, rand_tensor(rng, {2, 0, 6}, false), p, 2), UsageError);
  CHECK_THROWS_AS(attend(q, rand_tensor(rng, {3, 4, 6}, false), p, 2), ShapeError);
  CHECK_THROWS_AS(attend(q, rand_tensor(rng, {2, 4, 8}, false), p, 2), ShapeError);
  CHECK_THROWS_AS(attend(q, q, p, 4), ShapeError);  // 6 % 4 != 0
  CHECK_THROWS_AS(factorized_block(rand_tensor(rng, {3, 6}, false),
                                   init_block<double>(rng, 6, 12), 2),
                  ShapeError);
}

TEST_CASE("init is deterministic and collect enumerates a stable order") {
  Rng a(42), b(42);
  auto blk1 = init_block<double>(a, 8, 16);
  auto blk2 = init_block<double>(b, 8, 16);
  NamedParams<double> p1, p2;
  blk1.collect("blk", p1);
  blk2.collect("blk", p2);
  REQUIRE(p1.size() == 26);
  REQUIRE(p2.size() == 26);
  for (size_t i = 0; i < p1.size(); ++i) {
    CHECK(p1[i].first == p2[i].first);
    CHECK(p1[i].second.values() == p2[i].second.values());
  }
  CHECK(p1[0].first == "blk.norm_t.gamma");
  CHECK(p1[2].first == "blk.attn_t.wq");
  CHECK(p1.back().first == "blk.mlp.b2");

  NamedParams<double> pc;
  init_cross_block<double>(a, 8, 16).collect("c", pc);
  CHECK(pc.size() == 18);
  NamedParams<double> pj;
  init_joint_block<double>(a, 8, 16).collect("j", pj);
  CHECK(pj.size() == 16);
}

TEST_CASE("factorized block gradients match finite differences") {
  Rng rng(10);
  auto blk = init_block<double>(rng, 6, 8);
  auto x = rand_tensor(rng, {2, 3, 6}, true);
  auto w = rand_const(rng, {2, 3, 6});
  NamedParams<double> leaves;
  blk.collect("blk", leaves);
  leaves.emplace_back("x", x);
  auto rep = fd_compare([&] { return weighted_sum(factorized_block(x, blk, 2), w); }, leaves);
  INFO(rep.worst << " max_rel=" << rep.max_rel);
  CHECK(rep.pass(1e-5));
}

TEST_CASE("cross attention block gradients match finite differences") {
  Rng rng(11);
  auto cb = init_cross_block<double>(rng, 6, 8);
  auto q = rand_tensor(rng, {1, 2, 6}, true);
  auto kv = rand_tensor(rng, {1, 4, 6}, true);
  auto w = rand_const(rng, {1, 2, 6});
  NamedParams<double> leaves;
  cb.collect("cb", leaves);
  leaves.emplace_back("q", q);
  leaves.emplace_back("kv", kv);
  auto rep = fd_compare([&] { return weighted_sum(cross_attn_block(q, kv, cb, 2), w); }, leaves);
  INFO(rep.worst << " max_rel=" << rep.max_rel);
  CHECK(rep.pass(1e-5));
}

TEST_CASE("joint block gradients match finite differences") {
  Rng rng(12);
  auto jb = init_joint_block<double>(rng, 6, 8);
  auto x = rand_tensor(rng, {2, 3, 6}, true);
  auto w = rand_const(rng, {2, 3, 6});
  NamedParams<double> leaves;
  jb.collect("jb", leaves);
  leaves.emplace_back("x", x);
  auto rep = fd_compare([&] { return weighted_sum(joint_block(x, jb, 2), w); }, leaves);
  INFO(rep.worst << " max_rel=" << rep.max_rel);
  CHECK(rep.pass(1e-5));
}
