#pragma once

// Tube and cube masks over a T-frame patch grid, and the visible/masked
// partition of embedded tokens.
//
// Masked positions are always enumerated frame-major, ascending spatial
// index within a frame. That order is the contract everything downstream
// leans on: regressor queries, decoder reshapes to [T, N_m, D], and the
// "all frames but the last" prefix that defines the motion target set.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "mam2/common.hpp"
#include "mam2/rng.hpp"
#include "mam2/tensor.hpp"

namespace mam2 {

enum class MaskKind { tube, cube };

inline std::string mask_kind_name(MaskKind k) { return k == MaskKind::tube ? "tube" : "cube"; }

inline MaskKind mask_kind_from(const std::string& s) {
  if (s == "tube") return MaskKind::tube;
  if (s == "cube") return MaskKind::cube;
  throw UsageError("unknown mask kind: " + s);
}

struct MaskSpec {
  double rho = 0.75;
  MaskKind kind = MaskKind::tube;
  int64_t T = 0;
  int64_t N = 0;
  int64_t block = 0;  // cube block side; 0 for tube
  std::vector<std::vector<int64_t>> per_frame;  // sorted masked spatial ids per frame

  bool temporally_constant() const {
    for (int64_t t = 1; t < T; ++t)
      if (per_frame[size_t(t)] != per_frame[0]) return false;
    return true;
  }

  int64_t masked_per_frame() const {
    if (!temporally_constant())
      throw StructureError("mask: per-frame masked sets differ, no single per-frame count");
    return int64_t(per_frame.empty() ? 0 : per_frame[0].size());
  }

  // the sorted spatial ids shared by all frames
  const std::vector<int64_t>& masked_spatial() const {
    if (!temporally_constant())
      throw StructureError("mask: per-frame masked sets differ, no shared spatial set");
    return per_frame[0];
  }

  std::vector<int64_t> visible_spatial() const {
    const auto& m = masked_spatial();
    std::vector<int64_t> vis;
    vis.reserve(size_t(N) - m.size());
    size_t k = 0;
    for (int64_t j = 0; j < N; ++j) {
      if (k < m.size() && m[k] == j) {
        ++k;
      } else {
        vis.push_back(j);
      }
    }
    return vis;
  }

  // M: every masked (frame, spatial) pair, frame-major
  std::vector<std::pair<int64_t, int64_t>> positions() const {
    std::vector<std::pair<int64_t, int64_t>> out;
    for (int64_t t = 0; t < T; ++t)
      for (int64_t j : per_frame[size_t(t)]) out.emplace_back(t, j);
    return out;
  }

  // M': M without the last frame's tokens — a prefix of positions()
  std::vector<std::pair<int64_t, int64_t>> positions_except_last() const {
    std::vector<std::pair<int64_t, int64_t>> out;
    for (int64_t t = 0; t + 1 < T; ++t)
      for (int64_t j : per_frame[size_t(t)]) out.emplace_back(t, j);
    return out;
  }

  int64_t masked_total() const {
    int64_t n = 0;
    for (auto& f : per_frame) n += int64_t(f.size());
    return n;
  }
};

// checks the structural invariants a generator promises
inline void validate_mask(const MaskSpec& m) {
  if (m.T < 1 || m.N < 1) throw StructureError("mask: empty grid");
  if (int64_t(m.per_frame.size()) != m.T)
    throw StructureError("mask: " + std::to_string(m.per_frame.size()) + " frame sets for T=" +
                         std::to_string(m.T));
  for (auto& f : m.per_frame) {
    for (size_t i = 0; i < f.size(); ++i) {
      if (f[i] < 0 || f[i] >= m.N)
        throw StructureError("mask: spatial id " + std::to_string(f[i]) + " outside [0," +
                             std::to_string(m.N) + ")");
      if (i > 0 && f[i] <= f[i - 1]) throw StructureError("mask: ids not strictly ascending");
    }
  }
  if (!m.temporally_constant())
    throw StructureError("mask: per-frame sets must be identical across time");
  int64_t count = int64_t(m.per_frame[0].size());
  if (m.kind == MaskKind::tube) {
    int64_t want = llround(m.rho * double(m.N));
    if (count != want)
      throw StructureError("mask: tube count " + std::to_string(count) + " != round(rho*N) = " +
                           std::to_string(want));
  } else {
    double lo = m.rho * double(m.N);
    if (double(count) + 1e-9 < lo || (m.rho < 1.0 && count > int64_t(lo) + m.block * m.block))
      throw StructureError("mask: cube count " + std::to_string(count) +
                           " outside [rho*N, rho*N + block^2]");
  }
}

inline MaskSpec tube_mask(int64_t N, int64_t T, double rho, uint64_t seed) {
  if (N < 1 || T < 1) throw UsageError("tube_mask: N and T must be positive");
  if (rho < 0.0 || rho > 1.0) throw UsageError("tube_mask: rho outside [0,1]");
  int64_t count = llround(rho * double(N));
  Rng rng(derive_seed(seed, {0x7475626dull}));
  std::vector<int64_t> ids = rng.sample_without_replacement(N, count);
  std::sort(ids.begin(), ids.end());
  MaskSpec m;
  m.rho = rho;
  m.kind = MaskKind::tube;
  m.T = T;
  m.N = N;
  m.per_frame.assign(size_t(T), ids);
  return m;
}

// Greedy block placement until the masked count reaches rho*N, then the
// same 2-D mask broadcast along time. Overshoot stays below block^2.
inline MaskSpec cube_mask(int64_t N_h, int64_t N_w, int64_t T, double rho, int64_t block_size,
                          uint64_t seed) {
  if (N_h < 1 || N_w < 1 || T < 1) throw UsageError("cube_mask: grid and T must be positive");
  if (rho < 0.0 || rho > 1.0) throw UsageError("cube_mask: rho outside [0,1]");
  if (block_size < 1 || block_size > N_h || block_size > N_w)
    throw UsageError("cube_mask: block size " + std::to_string(block_size) +
                     " does not fit a " + std::to_string(N_h) + "x" + std::to_string(N_w) +
                     " grid");
  int64_t N = N_h * N_w;
  double target = rho * double(N);
  std::vector<char> hit(size_t(N), 0);
  int64_t count = 0;
  Rng rng(derive_seed(seed, {0x63756265ull}));
  int64_t guard = 0;
  while (double(count) < target) {
    if (++guard > 1000000) {  // unreachable in practice; keeps termination unconditional
      for (int64_t j = 0; j < N && double(count) < target; ++j)
        if (!hit[size_t(j)]) {
          hit[size_t(j)] = 1;
          ++count;
        }
      break;
    }
    int64_t y = rng.below(N_h - block_size + 1);
    int64_t x = rng.below(N_w - block_size + 1);
    for (int64_t i = 0; i < block_size; ++i)
      for (int64_t j = 0; j < block_size; ++j) {
        char& c = hit[size_t((y + i) * N_w + (x + j))];
        if (!c) {
          c = 1;
          ++count;
        }
      }
  }
  std::vector<int64_t> ids;
  ids.reserve(size_t(count));
  for (int64_t j = 0; j < N; ++j)
    if (hit[size_t(j)]) ids.push_back(j);
  MaskSpec m;
  m.rho = rho;
  m.kind = MaskKind::cube;
  m.T = T;
  m.N = N;
  m.block = block_size;
  m.per_frame.assign(size_t(T), ids);
  return m;
}

template <class S>
struct Partition {
  Tensor<S> visible;  // [T, N_v, D], original (frame, raster) order
  std::vector<int64_t> visible_ids;
  std::vector<std::pair<int64_t, int64_t>> masked_positions;  // M, frame-major
};

template <class S>
Partition<S> partition(const Tensor<S>& grid, const MaskSpec& mask) {
  if (grid.rank() != 3)
    throw ShapeError("partition: grid must be [T,N,D], got " + shape_str(grid.shape()));
  if (grid.dim(0) != mask.T || grid.dim(1) != mask.N)
    throw ShapeError("partition: grid " + shape_str(grid.shape()) + " vs mask T=" +
                     std::to_string(mask.T) + " N=" + std::to_string(mask.N));
  Partition<S> p;
  p.visible_ids = mask.visible_spatial();  // throws StructureError if frames differ
  p.visible = gather_spatial(grid, p.visible_ids);
  p.masked_positions = mask.positions();
  return p;
}

// test-side inverse: scatter visible tokens and masked rows back to [T,N,D]
template <class S>
Tensor<S> reassemble(const Shape& grid_shape, const std::vector<int64_t>& visible_ids,
                     const Tensor<S>& visible, const std::vector<std::pair<int64_t, int64_t>>& pos,
                     const Tensor<S>& masked_rows) {
  if (grid_shape.size() != 3) throw ShapeError("reassemble: grid shape must be rank 3");
  int64_t T = grid_shape[0], N = grid_shape[1], D = grid_shape[2];
  Tensor<S> out(grid_shape);
  S* po = out.node->val();
  const S* pv = visible.node->val();
  int64_t Nv = int64_t(visible_ids.size());
  if (visible.shape() != Shape{T, Nv, D})
    throw ShapeError("reassemble: visible " + shape_str(visible.shape()));
  for (int64_t t = 0; t < T; ++t)
    for (int64_t a = 0; a < Nv; ++a)
      std::copy(pv + (t * Nv + a) * D, pv + (t * Nv + a + 1) * D,
                po + (t * N + visible_ids[size_t(a)]) * D);
  if (masked_rows.shape() != Shape{int64_t(pos.size()), D})
    throw ShapeError("reassemble: masked rows " + shape_str(masked_rows.shape()));
  const S* pm = masked_rows.node->val();
  for (size_t i = 0; i < pos.size(); ++i)
    std::copy(pm + int64_t(i) * D, pm + int64_t(i + 1) * D,
              po + (pos[i].first * N + pos[i].second) * D);
  return out;
}

// P6 image of the frame-0 mask: masked cells red, visible light gray
inline void write_mask_ppm(const MaskSpec& mask, int64_t N_h, int64_t N_w,
                           const std::string& path, int64_t cell_px = 16) {
  if (N_h * N_w != mask.N)
    throw UsageError("write_mask_ppm: grid " + std::to_string(N_h) + "x" + std::to_string(N_w) +
                     " does not cover N=" + std::to_string(mask.N));
  std::vector<char> hit(size_t(mask.N), 0);
  for (int64_t j : mask.per_frame.at(0)) hit[size_t(j)] = 1;
  int64_t Hpx = N_h * cell_px, Wpx = N_w * cell_px;
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open for writing: " + path);
  os << "P6\n" << Wpx << " " << Hpx << "\n255\n";
  std::vector<unsigned char> row(size_t(Wpx * 3));
  for (int64_t y = 0; y < Hpx; ++y) {
    for (int64_t x = 0; x < Wpx; ++x) {
      bool m = hit[size_t((y / cell_px) * N_w + (x / cell_px))] != 0;
      bool edge = (y % cell_px == 0) || (x % cell_px == 0);
      unsigned char r = m ? 200 : 230, g = m ? 32 : 230, b = m ? 32 : 230;
      if (edge) r = g = b = 64;
      row[size_t(x * 3 + 0)] = r;
      row[size_t(x * 3 + 1)] = g;
      row[size_t(x * 3 + 2)] = b;
    }
    os.write(reinterpret_cast<const char*>(row.data()), std::streamsize(row.size()));
  }
  if (!os) throw FormatError("write failed: " + path);
}

}  // namespace mam2
