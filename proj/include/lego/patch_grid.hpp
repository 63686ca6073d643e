// Copyright (c) 2026 The LEGO Bricks Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <vector>

#include "lego/errors.hpp"
#include "lego/rng.hpp"
#include "lego/tensor.hpp"

namespace lego {

/// H x W x 2 field of (row, col) pixel coordinates normalized to [-1, 1].
struct CoordGrid {
  Tensor<float> values;

  std::size_t height() const { return values.dim(0); }
  std::size_t width() const { return values.dim(1); }
};

inline double normalized_coord(std::size_t p, std::size_t extent) {
  return extent == 1 ? 0.0 : 2.0 * double(p) / double(extent - 1) - 1.0;
}

inline CoordGrid coord_grid(std::size_t H, std::size_t W) {
  if (H < 1 || W < 1) throw ParameterError(detail::concat("coord_grid: need H, W >= 1, got ", H, "x", W));
  CoordGrid g{Tensor<float>({H, W, 2})};
  for (std::size_t p = 0; p < H; ++p) {
    for (std::size_t q = 0; q < W; ++q) {
      g.values(p, q, 0) = static_cast<float>(normalized_coord(p, H));
      g.values(p, q, 1) = static_cast<float>(normalized_coord(q, W));
    }
  }
  return g;
}

/// 1-based patch coordinates, as exposed at the API boundary.
struct PatchIndex {
  int i = 1;
  int j = 1;
  friend bool operator==(const PatchIndex&, const PatchIndex&) = default;
};

/// Non-overlapping r x r tiling of an H x W canvas. Patch (i, j) covers rows
/// (i-1)r+1 .. ir and columns (j-1)r+1 .. jr in 1-based pixel indexing.
class PatchGrid {
 public:
  PatchGrid(std::size_t H, std::size_t W, std::size_t r) : H_(H), W_(W), r_(r) {
    if (r == 0 || H == 0 || W == 0 || H % r != 0 || W % r != 0) {
      throw ShapeError(detail::concat("patch grid: brick size r=", r, " must divide H=", H,
                                      " and W=", W));
    }
  }

  std::size_t height() const noexcept { return H_; }
  std::size_t width() const noexcept { return W_; }
  std::size_t r() const noexcept { return r_; }
  int rows() const noexcept { return static_cast<int>(H_ / r_); }
  int cols() const noexcept { return static_cast<int>(W_ / r_); }
  std::size_t count() const noexcept { return (H_ / r_) * (W_ / r_); }

  bool contains(PatchIndex p) const noexcept {
    return p.i >= 1 && p.i <= rows() && p.j >= 1 && p.j <= cols();
  }
  std::size_t linear(PatchIndex p) const {
    if (!contains(p)) {
      throw IndexError(detail::concat("patch (", p.i, ",", p.j, ") outside ", rows(), "x", cols(), " grid"));
    }
    return std::size_t(p.i - 1) * std::size_t(cols()) + std::size_t(p.j - 1);
  }
  PatchIndex at(std::size_t linear_index) const {
    return {static_cast<int>(linear_index / std::size_t(cols())) + 1,
            static_cast<int>(linear_index % std::size_t(cols())) + 1};
  }
  /// 0-based first pixel row / column of a patch.
  std::size_t row0(PatchIndex p) const { return std::size_t(p.i - 1) * r_; }
  std::size_t col0(PatchIndex p) const { return std::size_t(p.j - 1) * r_; }

 private:
  std::size_t H_, W_, r_;
};

/// Copies the r x r window of patch `p` (all channels) into `out`.
template <typename T>
void extract_patch(const Tensor<T>& x, const PatchGrid& grid, PatchIndex p, T* out) {
  const std::size_t C = x.dim(2), r = grid.r(), r0 = grid.row0(p), c0 = grid.col0(p);
  for (std::size_t y = 0; y < r; ++y) {
    std::memcpy(out + y * r * C, &x(r0 + y, c0, 0), sizeof(T) * r * C);
  }
}

template <typename T>
void write_patch(Tensor<T>& x, const PatchGrid& grid, PatchIndex p, const T* in) {
  const std::size_t C = x.dim(2), r = grid.r(), r0 = grid.row0(p), c0 = grid.col0(p);
  for (std::size_t y = 0; y < r; ++y) {
    std::memcpy(&x(r0 + y, c0, 0), in + y * r * C, sizeof(T) * r * C);
  }
}

template <typename T>
struct PatchSet {
  PatchGrid grid;
  std::size_t channels = 0;
  std::vector<Tensor<T>> patches;  // row-major over (i, j)

  const Tensor<T>& patch(PatchIndex p) const { return patches[grid.linear(p)]; }
};

template <typename T>
PatchSet<T> partition(const Tensor<T>& x, std::size_t r) {
  require_image(x.shape(), "partition");
  const std::size_t H = x.dim(0), W = x.dim(1), C = x.dim(2);
  if (r == 0 || H % r != 0 || W % r != 0) {
    throw ShapeError(detail::concat("partition: r=", r, " does not divide (H=", H, ", W=", W, ")"));
  }
  PatchSet<T> set{PatchGrid(H, W, r), C, {}};
  set.patches.reserve(set.grid.count());
  for (std::size_t n = 0; n < set.grid.count(); ++n) {
    Tensor<T> patch({r, r, C});
    extract_patch(x, set.grid, set.grid.at(n), patch.data());
    set.patches.push_back(std::move(patch));
  }
  return set;
}

template <typename T>
Tensor<T> assemble(const PatchSet<T>& set) {
  Tensor<T> x({set.grid.height(), set.grid.width(), set.channels});
  for (std::size_t n = 0; n < set.grid.count(); ++n) {
    write_patch(x, set.grid, set.grid.at(n), set.patches[n].data());
  }
  return x;
}

/// Uniform draw without replacement of max(1, round-half-up(fraction * count))
/// patches, returned in row-major order.
inline std::vector<PatchIndex> sample_patch_indices(const PatchGrid& grid, double fraction, Rng& rng) {
  if (!(fraction > 0.0) || fraction > 1.0) {
    throw ParameterError(detail::concat("sample_patch_indices: fraction must be in (0, 1], got ", fraction));
  }
  const std::size_t n = grid.count();
  const auto k = std::max<std::size_t>(1, std::min<std::size_t>(
                                              n, static_cast<std::size_t>(std::floor(fraction * double(n) + 0.5))));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (k < n) {
    // partial Fisher-Yates
    for (std::size_t a = 0; a < k; ++a) {
      const std::size_t b = a + std::uniform_int_distribution<std::size_t>(0, n - 1 - a)(rng);
      std::swap(order[a], order[b]);
    }
    order.resize(k);
    std::sort(order.begin(), order.end());
  }
  std::vector<PatchIndex> out;
  out.reserve(order.size());
  for (auto idx : order) out.push_back(grid.at(idx));
  return out;
}

/// Marks which patches of a grid carry a valid prediction.
struct PatchMask {
  PatchGrid grid;
  std::vector<char> present;

  explicit PatchMask(PatchGrid g, bool value = false)
      : grid(g), present(g.count(), value ? 1 : 0) {}

  void set(PatchIndex p, bool v = true) { present[grid.linear(p)] = v ? 1 : 0; }
  bool get(PatchIndex p) const { return present[grid.linear(p)] != 0; }
};

/// prev_pred where the mask is set, x0 elsewhere.
template <typename T>
Tensor<T> fill_missing(const Tensor<T>& prev_pred, const PatchMask& mask, const Tensor<T>& x0) {
  require_same_shape(prev_pred.shape(), x0.shape(), "fill_missing");
  require_image(x0.shape(), "fill_missing");
  if (mask.grid.height() != x0.dim(0) || mask.grid.width() != x0.dim(1)) {
    throw ShapeError(detail::concat("fill_missing: mask grid ", mask.grid.height(), "x",
                                    mask.grid.width(), " does not match image ",
                                    detail::shape_str(x0.shape())));
  }
  Tensor<T> out = x0;
  const std::size_t r = mask.grid.r(), C = x0.dim(2);
  std::vector<T> buf(r * r * C);
  for (std::size_t n = 0; n < mask.grid.count(); ++n) {
    if (!mask.present[n]) continue;
    const PatchIndex p = mask.grid.at(n);
    extract_patch(prev_pred, mask.grid, p, buf.data());
    write_patch(out, mask.grid, p, buf.data());
  }
  return out;
}

}  // namespace lego
