// Mask generators, partition, and the canonical masked-position order.

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <set>

#include "mam2/masking.hpp"

using namespace mam2;

TEST_CASE("tube mask: counts, broadcast, determinism") {
  MaskSpec m = tube_mask(196, 16, 0.75, 7);
  validate_mask(m);
  CHECK(m.masked_per_frame() == 147);
  CHECK(m.visible_spatial().size() == 49);
  for (int64_t t = 1; t < 16; ++t) CHECK(m.per_frame[size_t(t)] == m.per_frame[0]);
  CHECK(m.masked_total() == 16 * 147);
  CHECK(m.positions_except_last().size() == 15 * 147);

  MaskSpec m2 = tube_mask(196, 16, 0.75, 7);
  CHECK(m2.per_frame[0] == m.per_frame[0]);
  MaskSpec m3 = tube_mask(196, 16, 0.75, 8);
  CHECK(m3.per_frame[0] != m.per_frame[0]);
}

TEST_CASE("tube mask: count is round(rho*N)") {
  CHECK(tube_mask(10, 2, 0.25, 1).masked_per_frame() == 3);  // 2.5 rounds away from zero
  CHECK(tube_mask(10, 2, 0.24, 1).masked_per_frame() == 2);
  CHECK(tube_mask(196, 2, 0.9, 1).masked_per_frame() == 176);
}

TEST_CASE("tube mask: boundary ratios") {
  MaskSpec none = tube_mask(20, 4, 0.0, 3);
  CHECK(none.masked_total() == 0);
  CHECK(none.visible_spatial().size() == 20);
  CHECK(none.positions().empty());

  MaskSpec all = tube_mask(20, 4, 1.0, 3);
  CHECK(all.masked_per_frame() == 20);
  CHECK(all.positions_except_last().size() == size_t(3 * 20));
  CHECK(all.visible_spatial().empty());

  CHECK_THROWS_AS(tube_mask(20, 4, 1.5, 3), UsageError);
  CHECK_THROWS_AS(tube_mask(20, 4, -0.1, 3), UsageError);
}

TEST_CASE("masked positions are frame-major and M' is a prefix of M") {
  MaskSpec m = tube_mask(9, 3, 0.5, 11);  // llround(4.5) rounds up to 5 per frame
  auto M = m.positions();
  auto Mp = m.positions_except_last();
  REQUIRE(M.size() == size_t(3 * 5));
  REQUIRE(Mp.size() == size_t(2 * 5));
  for (size_t i = 0; i < Mp.size(); ++i) CHECK(Mp[i] == M[i]);
  for (size_t i = 1; i < M.size(); ++i) {
    bool ordered = M[i - 1].first < M[i].first ||
                   (M[i - 1].first == M[i].first && M[i - 1].second < M[i].second);
    CHECK(ordered);
  }
}

TEST_CASE("validate_mask rejects malformed specs") {
  MaskSpec m = tube_mask(10, 3, 0.5, 1);

  SECTION("per-frame sets differing") {
    m.per_frame[1] = {0, 1, 2, 4, 5};
    m.per_frame[1].resize(5);
    CHECK_THROWS_AS(validate_mask(m), StructureError);
    CHECK_THROWS_AS(m.masked_spatial(), StructureError);
    CHECK_THROWS_AS(m.masked_per_frame(), StructureError);
  }
  SECTION("unsorted ids") {
    std::swap(m.per_frame[0][0], m.per_frame[0][1]);
    std::swap(m.per_frame[1][0], m.per_frame[1][1]);
    std::swap(m.per_frame[2][0], m.per_frame[2][1]);
    CHECK_THROWS_AS(validate_mask(m), StructureError);
  }
  SECTION("id out of range") {
    for (auto& f : m.per_frame) f.back() = 10;
    CHECK_THROWS_AS(validate_mask(m), StructureError);
  }
  SECTION("tube count off") {
    for (auto& f : m.per_frame) f.pop_back();
    CHECK_THROWS_AS(validate_mask(m), StructureError);
  }
}

TEST_CASE("cube mask: whole-grid block at rho 1 masks everything") {
  MaskSpec m = cube_mask(6, 6, 4, 1.0, 6, 5);
  validate_mask(m);
  CHECK(m.masked_per_frame() == 36);
}

TEST_CASE("cube mask: greedy count lands in [rho*N, rho*N + block^2]") {
  for (uint64_t seed = 0; seed < 50; ++seed) {
    MaskSpec m = cube_mask(14, 14, 16, 0.4, 3, seed);
    validate_mask(m);
    int64_t c = m.masked_per_frame();
    CHECK(double(c) >= 0.4 * 196.0);
    CHECK(c <= int64_t(0.4 * 196.0) + 9);
    for (int64_t t = 1; t < 16; ++t) CHECK(m.per_frame[size_t(t)] == m.per_frame[0]);
  }
}

TEST_CASE("cube mask: determinism and block validation") {
  MaskSpec a = cube_mask(8, 8, 4, 0.5, 2, 9);
  MaskSpec b = cube_mask(8, 8, 4, 0.5, 2, 9);
  CHECK(a.per_frame[0] == b.per_frame[0]);
  CHECK_THROWS_AS(cube_mask(8, 8, 4, 0.5, 9, 1), UsageError);
  CHECK_THROWS_AS(cube_mask(8, 8, 4, 0.5, 0, 1), UsageError);
}

TEST_CASE("partition keeps order and pairs with reassemble") {
  const int64_t T = 4, N = 9, D = 5;
  Rng rng(21);
  TensorD grid({T, N, D});
  for (auto& v : grid.values()) v = rng.uniform(-1, 1);
  MaskSpec m = tube_mask(N, T, 0.5, 13);

  auto p = partition(grid, m);
  CHECK(p.visible.shape() == Shape{T, N - m.masked_per_frame(), D});
  CHECK(p.masked_positions == m.positions());

  // visible tokens preserve (frame, raster) order
  for (int64_t t = 0; t < T; ++t)
    for (size_t a = 0; a < p.visible_ids.size(); ++a)
      for (int64_t d = 0; d < D; ++d)
        CHECK(p.visible.at({t, int64_t(a), d}) == grid.at({t, p.visible_ids[a], d}));

  // ground-truth masked rows in M order
  TensorD masked_rows({int64_t(p.masked_positions.size()), D});
  for (size_t i = 0; i < p.masked_positions.size(); ++i)
    for (int64_t d = 0; d < D; ++d)
      masked_rows.at({int64_t(i), d}) =
          grid.at({p.masked_positions[i].first, p.masked_positions[i].second, d});
  TensorD back = reassemble(grid.shape(), p.visible_ids, p.visible, p.masked_positions, masked_rows);
  CHECK(back.values() == grid.values());
}

TEST_CASE("partition at rho 0 is the identity") {
  TensorD grid({2, 4, 3}, std::vector<double>(24, 1.5));
  MaskSpec m = tube_mask(4, 2, 0.0, 1);
  auto p = partition(grid, m);
  CHECK(p.visible.values() == grid.values());
  CHECK(p.masked_positions.empty());
}

TEST_CASE("partition rejects mismatched grids and varying masks") {
  TensorD grid({2, 4, 3});
  CHECK_THROWS_AS(partition(grid, tube_mask(5, 2, 0.5, 1)), ShapeError);
  CHECK_THROWS_AS(partition(grid, tube_mask(4, 3, 0.5, 1)), ShapeError);
  MaskSpec varying = tube_mask(4, 2, 0.5, 1);
  varying.per_frame[1] = varying.per_frame[1] == std::vector<int64_t>{0, 1}
                             ? std::vector<int64_t>{2, 3}
                             : std::vector<int64_t>{0, 1};
  CHECK_THROWS_AS(partition(grid, varying), StructureError);
}

TEST_CASE("mask image render") {
  MaskSpec m = tube_mask(196, 16, 0.75, 31);
  auto path = (std::filesystem::temp_directory_path() / "mam2_tests" / "mask.ppm").string();
  std::filesystem::create_directories(std::filesystem::path(path).parent_path());
  write_mask_ppm(m, 14, 14, path, 16);

  std::ifstream is(path, std::ios::binary);
  REQUIRE(is.good());
  std::string magic;
  int64_t w, h, maxv;
  is >> magic >> w >> h >> maxv;
  CHECK(magic == "P6");
  CHECK(w == 14 * 16);
  CHECK(h == 14 * 16);
  is.get();
  std::vector<unsigned char> px(size_t(w * h * 3));
  is.read(reinterpret_cast<char*>(px.data()), std::streamsize(px.size()));
  REQUIRE(is.gcount() == std::streamsize(px.size()));
  int64_t red = 0;
  for (size_t i = 0; i < px.size(); i += 3)
    if (px[i] == 200 && px[i + 1] == 32) ++red;
  CHECK(red == 147 * 15 * 15);  // cell interior is 15x15 after the 1px grid line

  CHECK_THROWS_AS(write_mask_ppm(m, 13, 14, path, 16), UsageError);
}
