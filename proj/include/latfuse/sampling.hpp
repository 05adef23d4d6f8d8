#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "latfuse/autodiff.hpp"
#include "latfuse/calib.hpp"
#include "latfuse/tensor.hpp"

namespace latfuse {

/// One image feature grid (H x W x C) at a pyramid level. Level pixel (y, x)
/// corresponds to full-resolution pixel (y * stride, x * stride); pixel
/// centers sit at integer coordinates.
template <typename S>
struct FeatureMap {
  int level = 1;
  int stride = 1;
  Tensor<S> data;  // H x W x C

  std::size_t height() const { return data.shape[0]; }
  std::size_t width() const { return data.shape[1]; }
  std::size_t channels() const { return data.shape[2]; }
};

namespace detail {

// Clamp-to-border bilinear footprint of full-resolution pixels on a level
// grid. Neighbor cell indices are flattened as y * width + x.
template <typename S>
struct BilinearTaps {
  std::vector<std::array<std::size_t, 4>> cell;
  std::vector<std::array<S, 4>> weight;
  std::vector<std::uint8_t> valid;
};

template <typename S>
BilinearTaps<S> bilinear_taps(std::size_t height, std::size_t width, int stride,
                              const PixelCoords<S>& pixels) {
  if (stride < 1) throw ContractError("bilinear_sample: stride must be >= 1");
  BilinearTaps<S> taps;
  const std::size_t m = pixels.size();
  taps.cell.resize(m);
  taps.weight.resize(m);
  taps.valid.assign(pixels.valid.begin(), pixels.valid.end());
  const S max_x = static_cast<S>(width - 1);
  const S max_y = static_cast<S>(height - 1);
  for (std::size_t i = 0; i < m; ++i) {
    if (!taps.valid[i]) {
      taps.cell[i] = {0, 0, 0, 0};
      taps.weight[i] = {S(0), S(0), S(0), S(0)};
      continue;
    }
    S x = pixels.uv.at(i, 0) / static_cast<S>(stride);
    S y = pixels.uv.at(i, 1) / static_cast<S>(stride);
    x = std::min(std::max(x, S(0)), max_x);
    y = std::min(std::max(y, S(0)), max_y);
    const std::size_t x0 = static_cast<std::size_t>(x);
    const std::size_t y0 = static_cast<std::size_t>(y);
    const std::size_t x1 = std::min(x0 + 1, width - 1);
    const std::size_t y1 = std::min(y0 + 1, height - 1);
    const S fx = x - static_cast<S>(x0);
    const S fy = y - static_cast<S>(y0);
    taps.cell[i] = {y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1};
    taps.weight[i] = {(S(1) - fx) * (S(1) - fy), fx * (S(1) - fy), (S(1) - fx) * fy, fx * fy};
  }
  return taps;
}

}  // namespace detail

/// Samples a pyramid-level map at full-resolution pixel coordinates: the
/// level grid is read at (u / stride, v / stride) with bilinear weights and
/// border clamping. Invalid pixels produce zero rows.
template <typename S>
Tensor<S> bilinear_sample(const FeatureMap<S>& map, const PixelCoords<S>& pixels) {
  map.data.require_ndim(3);
  const auto taps = detail::bilinear_taps<S>(map.height(), map.width(), map.stride, pixels);
  const std::size_t c = map.channels();
  Tensor<S> out({pixels.size(), c});
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    if (!taps.valid[i]) continue;
    for (int t = 0; t < 4; ++t) {
      const S w = taps.weight[i][t];
      const S* src = &map.data.data[taps.cell[i][t] * c];
      S* dst = &out.data[i * c];
      for (std::size_t j = 0; j < c; ++j) dst[j] += w * src[j];
    }
  }
  flops::add(7ull * pixels.size() * c);
  return out;
}

/// Tape version, differentiable w.r.t. the map values. `map_values` must hold
/// the H x W x C tensor whose metadata `map` describes.
template <typename S>
Var bilinear_sample(Tape<S>& tape, Var map_values, const FeatureMap<S>& map,
                    const PixelCoords<S>& pixels) {
  const Tensor<S>& grid = tape.value(map_values);
  grid.require_ndim(3);
  if (grid.shape != map.data.shape)
    throw ShapeError("bilinear_sample: map var shape " + grid.shape_string() +
                     " does not match level metadata " + map.data.shape_string());
  const std::size_t height = grid.shape[0];
  const std::size_t width = grid.shape[1];
  const std::size_t c = grid.shape[2];
  auto taps = detail::bilinear_taps<S>(height, width, map.stride, pixels);

  Tensor<S> out({pixels.size(), c});
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    if (!taps.valid[i]) continue;
    for (int t = 0; t < 4; ++t) {
      const S w = taps.weight[i][t];
      const S* src = &grid.data[taps.cell[i][t] * c];
      S* dst = &out.data[i * c];
      for (std::size_t j = 0; j < c; ++j) dst[j] += w * src[j];
    }
  }
  flops::add(7ull * pixels.size() * c);

  if (!tape.requires_grad(map_values)) return tape.push(std::move(out), false, nullptr);
  return tape.push(std::move(out), true,
                   [map_values, taps = std::move(taps), c](Tape<S>& tt, Var self) {
                     const Tensor<S>& go = tt.grad_buffer(self);
                     Tensor<S>& gm = tt.grad_buffer(map_values);
                     for (std::size_t i = 0; i < taps.valid.size(); ++i) {
                       if (!taps.valid[i]) continue;
                       const S* src = &go.data[i * c];
                       for (int t = 0; t < 4; ++t) {
                         const S w = taps.weight[i][t];
                         S* dst = &gm.data[taps.cell[i][t] * c];
                         for (std::size_t j = 0; j < c; ++j) dst[j] += w * src[j];
                       }
                     }
                   });
}

/// Reference path: materialize the full-resolution upsampled map (value at
/// integer pixel p equals the level map bilinearly read at p / stride), to be
/// indexed afterwards. Quadratic in image area; test and verification use.
template <typename S>
FeatureMap<S> upsample_to_full_res(const FeatureMap<S>& map, int full_h, int full_w) {
  FeatureMap<S> out;
  out.level = map.level;
  out.stride = 1;
  out.data = Tensor<S>({static_cast<std::size_t>(full_h), static_cast<std::size_t>(full_w),
                        map.channels()});
  PixelCoords<S> grid;
  grid.uv = Tensor<S>({static_cast<std::size_t>(full_h) * full_w, 2});
  grid.valid.assign(static_cast<std::size_t>(full_h) * full_w, 1);
  for (int y = 0; y < full_h; ++y) {
    for (int x = 0; x < full_w; ++x) {
      grid.uv.at(static_cast<std::size_t>(y) * full_w + x, 0) = static_cast<S>(x);
      grid.uv.at(static_cast<std::size_t>(y) * full_w + x, 1) = static_cast<S>(y);
    }
  }
  Tensor<S> rows = bilinear_sample(map, grid);
  out.data.data = std::move(rows.data);
  return out;
}

}  // namespace latfuse
