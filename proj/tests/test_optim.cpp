// Closed-form single steps, the constant-gradient invariant, weight decay
// in isolation, schedule knots, and state restore round trips.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "mam2/optim.hpp"

using namespace mam2;

namespace {

NamedParams<double> one_param(double value) {
  TensorD p({1}, {value});
  p.set_requires_grad(true);
  return {{"p", p}};
}

void set_grad(Tensor<double>& p, double g) {
  p.zero_grad();
  backward(scale(p, g));
}

}  // namespace

TEST_CASE("first adamw step moves by roughly the learning rate") {
  auto params = one_param(5.0);
  AdamWConfig<double> cfg;
  cfg.weight_decay = 0.0;
  AdamW<double> opt(params, cfg);
  set_grad(params[0].second, 1.0);
  opt.step(0.1);
  // bias-corrected mhat and vhat are both exactly 1 on the first step
  CHECK(params[0].second.values()[0] == Catch::Approx(5.0 - 0.1).epsilon(1e-7));
}

TEST_CASE("constant gradient moves by lr every step") {
  auto params = one_param(0.0);
  AdamWConfig<double> cfg;
  cfg.weight_decay = 0.0;
  AdamW<double> opt(params, cfg);
  for (int i = 0; i < 4; ++i) {
    set_grad(params[0].second, 1.0);
    opt.step(0.01);
  }
  CHECK(params[0].second.values()[0] == Catch::Approx(-0.04).epsilon(1e-6));
  CHECK(opt.steps_done() == 4);
}

TEST_CASE("zero gradient leaves only decoupled weight decay") {
  auto params = one_param(2.0);
  AdamW<double> opt(params);  // wd 0.05
  opt.zero_grad();
  opt.step(0.1);
  CHECK(params[0].second.values()[0] == 2.0 * (1.0 - 0.1 * 0.05));
  opt.zero_grad();
  opt.step(0.1);
  CHECK(params[0].second.values()[0] == 2.0 * (1.0 - 0.1 * 0.05) * (1.0 - 0.1 * 0.05));
}

TEST_CASE("non-finite gradient raises") {
  auto params = one_param(1.0);
  AdamW<double> opt(params);
  params[0].second.zero_grad();
  backward(scale(params[0].second, std::numeric_limits<double>::infinity()));
  CHECK_THROWS_AS(opt.step(0.1), NumericError);
}

TEST_CASE("restore reproduces the exact trajectory") {
  auto run_two_then_save = [] {
    auto params = one_param(1.0);
    AdamW<double> opt(params);
    for (int i = 0; i < 2; ++i) {
      set_grad(params[0].second, 0.5 + i);
      opt.step(0.05);
    }
    return std::tuple{params[0].second.values()[0], opt.moments1(), opt.moments2(),
                      opt.steps_done()};
  };
  auto [val, m, v, t] = run_two_then_save();

  auto params = one_param(val);
  AdamW<double> opt(params);
  opt.restore(m, v, t);
  set_grad(params[0].second, 3.0);
  opt.step(0.05);

  // reference: the same three steps without interruption
  auto ref = one_param(1.0);
  AdamW<double> ref_opt(ref);
  double gs[] = {0.5, 1.5, 3.0};
  for (double g : gs) {
    set_grad(ref[0].second, g);
    ref_opt.step(0.05);
  }
  CHECK(params[0].second.values()[0] == ref[0].second.values()[0]);

  std::vector<std::vector<double>> bad = {{0.0, 0.0}};
  CHECK_THROWS_AS(opt.restore(bad, bad, 3), UsageError);
}

TEST_CASE("schedule ramps, peaks, and decays to zero") {
  const double base = 1.5e-4;
  CHECK(lr_at(0, 110, 10, base, 256) == 0.0);
  CHECK(lr_at(5, 110, 10, base, 256) == Catch::Approx(base / 2).epsilon(1e-12));
  CHECK(lr_at(10, 110, 10, base, 256) == Catch::Approx(base).epsilon(1e-12));
  CHECK(lr_at(60, 110, 10, base, 256) == Catch::Approx(base * 0.5).epsilon(1e-12));
  CHECK(lr_at(110, 110, 10, base, 256) == Catch::Approx(0.0).margin(1e-18));
  CHECK(lr_at(500, 110, 10, base, 256) == Catch::Approx(0.0).margin(1e-18));

  // peak scales linearly with batch size
  CHECK(lr_at(10, 110, 10, base, 512) == Catch::Approx(2 * base).epsilon(1e-12));
  CHECK(lr_at(10, 110, 10, base, 64) == Catch::Approx(base / 4).epsilon(1e-12));

  double prev = lr_at(10, 110, 10, base, 256);
  for (int64_t s = 11; s <= 110; ++s) {
    double cur = lr_at(s, 110, 10, base, 256);
    CHECK(cur <= prev);
    prev = cur;
  }

  CHECK_THROWS_AS(lr_at(0, 0, 0, base, 256), UsageError);
  CHECK_THROWS_AS(lr_at(0, 10, 20, base, 256), UsageError);
  CHECK_THROWS_AS(lr_at(-1, 10, 2, base, 256), UsageError);
  CHECK_THROWS_AS(lr_at(0, 10, 2, base, 0), UsageError);
}

TEST_CASE("optimizer runs a small model without drift between replicas") {
  auto make = [] {
    Rng rng(7);
    auto w = normal_param<float>(rng, {4, 4});
    auto b = const_param<float>({4}, 0.0f);
    return NamedParams<float>{{"w", w}, {"b", b}};
  };
  auto run = [&make] {
    auto params = make();
    AdamW<float> opt(params);
    Rng data_rng(9);
    for (int s = 0; s < 5; ++s) {
      opt.zero_grad();
      Tensor<float> x({2, 4});
      for (auto& e : x.values()) e = float(data_rng.uniform(-1, 1));
      auto y = linear(x, params[0].second, params[1].second);
      backward(sum_all(mul(y, y)));
      opt.step(float(lr_at(s + 1, 20, 2, 0.1, 256)));
    }
    return std::pair{params[0].second.values(), params[1].second.values()};
  };
  auto a = run();
  auto b = run();
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
  CHECK(a.first != make()[0].second.values());
}
