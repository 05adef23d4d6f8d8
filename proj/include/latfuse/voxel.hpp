#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <unordered_map>
#include <vector>

#include "latfuse/autodiff.hpp"
#include "latfuse/layers.hpp"
#include "latfuse/tensor.hpp"

namespace latfuse {

/// Raw LiDAR returns: N points of (x, y, z, intensity) in meters.
template <typename S>
struct PointCloud {
  std::vector<std::array<S, 4>> points;

  std::size_t size() const { return points.size(); }
};

/// Voxel grid geometry. Defaults follow the KITTI-style setup: 0.05 x 0.05 x
/// 0.1 m voxels over x [0, 70.4], y [-40, 40], z [-3, 1], giving a base grid
/// of 1408 x 1600 x 40 cells. Intervals are half-open per axis: [lo, hi).
struct VoxelConfig {
  std::array<double, 3> voxel_size{0.05, 0.05, 0.1};
  std::array<double, 3> range_min{0.0, -40.0, -3.0};
  std::array<double, 3> range_max{70.4, 40.0, 1.0};

  std::array<int, 3> grid_dims() const {
    std::array<int, 3> dims{};
    for (int a = 0; a < 3; ++a) {
      const double extent = range_max[a] - range_min[a];
      if (!(extent > 0.0) || !(voxel_size[a] > 0.0))
        throw ContractError("voxel config: empty range or non-positive voxel size");
      const double cells = extent / voxel_size[a];
      const double rounded = std::round(cells);
      if (std::abs(cells - rounded) > 1e-9)
        throw ContractError("voxel config: range extent on axis " + std::to_string(a) +
                            " is not divisible by the voxel size");
      dims[a] = static_cast<int>(rounded);
    }
    return dims;
  }

  /// Grid dims at a coarser stride (ceil division).
  std::array<int, 3> dims_at(int stride) const {
    auto dims = grid_dims();
    for (auto& d : dims) d = (d + stride - 1) / stride;
    return dims;
  }
};

inline std::int64_t linear_voxel_index(const std::array<int, 3>& idx,
                                       const std::array<int, 3>& dims) {
  return (static_cast<std::int64_t>(idx[0]) * dims[1] + idx[1]) * dims[2] + idx[2];
}

/// Sparse set of occupied voxels at one backbone stage. Feature rows live on
/// the tape and stay index-aligned with `indices`/`centers`.
template <typename S>
struct VoxelSet {
  int stage = 1;
  int stride = 1;
  std::size_t channels = 0;
  std::vector<std::array<int, 3>> indices;  // N x 3 grid coords at this stride
  Tensor<S> centers;                        // N x 3 meters
  Var features;                             // N x channels

  std::size_t size() const { return indices.size(); }
};

template <typename S>
Tensor<S> voxel_centers(const std::vector<std::array<int, 3>>& indices, const VoxelConfig& cfg,
                        int stride) {
  Tensor<S> centers({indices.size(), 3});
  for (std::size_t i = 0; i < indices.size(); ++i)
    for (int a = 0; a < 3; ++a)
      centers.at(i, a) = static_cast<S>(cfg.range_min[a] + (indices[i][a] + 0.5) *
                                                               cfg.voxel_size[a] * stride);
  return centers;
}

/// Stage-1 voxel grid before the channel lift: sorted unique occupied cells
/// with per-voxel means of the raw point attributes.
template <typename S>
struct RawVoxels {
  std::vector<std::array<int, 3>> indices;
  Tensor<S> centers;        // N x 3
  Tensor<S> mean_features;  // N x 4: mean (x, y, z, intensity)
};

template <typename S>
RawVoxels<S> voxelize_points(const PointCloud<S>& cloud, const VoxelConfig& cfg) {
  const auto dims = cfg.grid_dims();
  struct Entry {
    std::int64_t lin;
    std::size_t point;
  };
  std::vector<Entry> entries;
  entries.reserve(cloud.size());
  std::vector<std::array<int, 3>> cell_of_point(cloud.size());
  for (std::size_t p = 0; p < cloud.size(); ++p) {
    const auto& pt = cloud.points[p];
    std::array<int, 3> idx{};
    bool inside = true;
    for (int a = 0; a < 3; ++a) {
      const double v = static_cast<double>(pt[a]);
      if (v < cfg.range_min[a] || v >= cfg.range_max[a]) {
        inside = false;
        break;
      }
      int cell = static_cast<int>(std::floor((v - cfg.range_min[a]) / cfg.voxel_size[a]));
      if (cell < 0 || cell >= dims[a]) {
        inside = false;
        break;
      }
      idx[a] = cell;
    }
    if (!inside) continue;
    cell_of_point[p] = idx;
    entries.push_back({linear_voxel_index(idx, dims), p});
  }
  if (entries.empty())
    throw ContractError("voxelize: no points inside the configured range (empty frame)");

  std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
    return a.lin != b.lin ? a.lin < b.lin : a.point < b.point;
  });

  RawVoxels<S> out;
  std::vector<std::size_t> counts;
  std::vector<std::array<double, 4>> sums;
  for (const auto& e : entries) {
    if (out.indices.empty() ||
        linear_voxel_index(out.indices.back(), dims) != e.lin) {
      out.indices.push_back(cell_of_point[e.point]);
      counts.push_back(0);
      sums.push_back({0.0, 0.0, 0.0, 0.0});
    }
    const auto& pt = cloud.points[e.point];
    for (int a = 0; a < 4; ++a) sums.back()[a] += static_cast<double>(pt[a]);
    ++counts.back();
  }
  out.centers = voxel_centers<S>(out.indices, cfg, 1);
  out.mean_features = Tensor<S>({out.indices.size(), 4});
  for (std::size_t i = 0; i < out.indices.size(); ++i)
    for (int a = 0; a < 4; ++a)
      out.mean_features.at(i, a) = static_cast<S>(sums[i][a] / static_cast<double>(counts[i]));
  return out;
}

/// Voxelize and lift the 4-channel point means to C1 channels with one
/// learned linear layer. Produces the stage-1 voxel set.
template <typename S>
VoxelSet<S> voxelize(Tape<S>& tape, const PointCloud<S>& cloud, const VoxelConfig& cfg,
                     const LinearParamsT<Var>& lift_params) {
  RawVoxels<S> raw = voxelize_points(cloud, cfg);
  VoxelSet<S> v;
  v.stage = 1;
  v.stride = 1;
  v.indices = std::move(raw.indices);
  v.centers = std::move(raw.centers);
  Var means = tape.constant(std::move(raw.mean_features));
  v.features = apply_linear(tape, means, lift_params);
  v.channels = tape.value(v.features).cols();
  return v;
}

/// Max over row groups: out[g, c] = max over rows r with group_of_row[r] == g.
/// Every group must be non-empty. Gradient routes to the arg-max row.
template <typename S>
Var group_max(Tape<S>& tape, Var x, const std::vector<std::size_t>& group_of_row,
              std::size_t n_groups) {
  const Tensor<S>& xin = tape.value(x);
  xin.require_ndim(2);
  if (group_of_row.size() != xin.rows())
    throw ShapeError("group_max: one group id per row required");
  const std::size_t c = xin.cols();
  Tensor<S> out({n_groups, c});
  std::vector<std::size_t> argmax(n_groups * c);
  std::vector<std::uint8_t> seen(n_groups, 0);
  for (std::size_t r = 0; r < xin.rows(); ++r) {
    const std::size_t g = group_of_row[r];
    if (g >= n_groups) throw IndexError("group_max: group id out of range");
    for (std::size_t j = 0; j < c; ++j) {
      const S v = xin.at(r, j);
      if (!seen[g] || v > out.at(g, j)) {
        out.at(g, j) = v;
        argmax[g * c + j] = r;
      }
    }
    seen[g] = 1;
  }
  for (std::size_t g = 0; g < n_groups; ++g)
    if (!seen[g]) throw ContractError("group_max: empty group " + std::to_string(g));
  flops::add(xin.numel());

  if (!tape.requires_grad(x)) return tape.push(std::move(out), false, nullptr);
  return tape.push(std::move(out), true,
                   [x, argmax = std::move(argmax), c](Tape<S>& tt, Var self) {
                     const Tensor<S>& go = tt.grad_buffer(self);
                     Tensor<S>& gx = tt.grad_buffer(x);
                     for (std::size_t g = 0; g < go.rows(); ++g)
                       for (std::size_t j = 0; j < c; ++j)
                         gx.at(argmax[g * c + j], j) += go.at(g, j);
                   });
}

/// Stride-2 downsampling surrogate: children sharing floor(index / 2) merge
/// into one parent voxel, features are max-pooled then mapped C_j -> C_{j+1}
/// by a learned linear layer.
template <typename S>
VoxelSet<S> downsample_stage(Tape<S>& tape, const VoxelSet<S>& v, const VoxelConfig& cfg,
                             const LinearParamsT<Var>& params) {
  if (v.stage >= 4) throw ContractError("downsample_stage: stage 4 is the last stage");
  const int out_stride = v.stride * 2;
  const auto out_dims = cfg.dims_at(out_stride);

  std::vector<std::array<int, 3>> parent_of_child(v.size());
  std::vector<std::int64_t> parent_lin(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    for (int a = 0; a < 3; ++a) parent_of_child[i][a] = v.indices[i][a] / 2;
    parent_lin[i] = linear_voxel_index(parent_of_child[i], out_dims);
  }
  std::vector<std::int64_t> unique_lin = parent_lin;
  std::sort(unique_lin.begin(), unique_lin.end());
  unique_lin.erase(std::unique(unique_lin.begin(), unique_lin.end()), unique_lin.end());

  std::vector<std::size_t> group_of_row(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const auto it = std::lower_bound(unique_lin.begin(), unique_lin.end(), parent_lin[i]);
    group_of_row[i] = static_cast<std::size_t>(it - unique_lin.begin());
  }

  VoxelSet<S> out;
  out.stage = v.stage + 1;
  out.stride = out_stride;
  out.indices.resize(unique_lin.size());
  for (std::size_t i = 0; i < v.size(); ++i) out.indices[group_of_row[i]] = parent_of_child[i];
  out.centers = voxel_centers<S>(out.indices, cfg, out_stride);
  Var pooled = group_max(tape, v.features, group_of_row, unique_lin.size());
  out.features = apply_linear(tape, pooled, params);
  out.channels = tape.value(out.features).cols();
  return out;
}

/// Bias-free channel map: the only parameters of an upsampling lateral, so a
/// zero coarse feature contributes exactly zero downstream.
template <typename T>
struct ChannelMapParamsT {
  T w;

  template <typename F>
  void visit(F&& f) const {
    f(w);
  }
  template <typename G>
  static ChannelMapParamsT make(G&& g) {
    ChannelMapParamsT p;
    p.w = g();
    return p;
  }
};

/// Inverse of the downsampling step: each fine voxel receives its parent's
/// coarse feature mapped back C_{j+1} -> C_j. Fine voxels without a parent in
/// `coarse` indicate pipeline misuse.
template <typename S>
Var upsample_scatter(Tape<S>& tape, const VoxelSet<S>& coarse, const VoxelSet<S>& fine,
                     const VoxelConfig& cfg, const ChannelMapParamsT<Var>& params) {
  if (coarse.stride != fine.stride * 2)
    throw ContractError("upsample_scatter: coarse stride must be twice the fine stride");
  const auto coarse_dims = cfg.dims_at(coarse.stride);
  std::unordered_map<std::int64_t, std::size_t> row_of_lin;
  row_of_lin.reserve(coarse.size());
  for (std::size_t i = 0; i < coarse.size(); ++i)
    row_of_lin.emplace(linear_voxel_index(coarse.indices[i], coarse_dims), i);

  std::vector<std::size_t> parent_row(fine.size());
  for (std::size_t i = 0; i < fine.size(); ++i) {
    std::array<int, 3> parent{};
    for (int a = 0; a < 3; ++a) parent[a] = fine.indices[i][a] / 2;
    const auto it = row_of_lin.find(linear_voxel_index(parent, coarse_dims));
    if (it == row_of_lin.end())
      throw ContractError("upsample_scatter: fine voxel " + std::to_string(i) +
                          " has no parent in the coarse set");
    parent_row[i] = it->second;
  }
  Var gathered = gather_rows(tape, coarse.features, std::move(parent_row));
  return matmul(tape, gathered, params.w);
}

/// Lateral channel maps of the top-down pyramid pass; lateral[j] maps stage
/// j+2 channels onto stage j+1 (zero-based: lateral[0] is C2 -> C1).
template <typename T>
struct PyramidParamsT {
  std::array<ChannelMapParamsT<T>, 3> lateral;

  template <typename F>
  void visit(F&& f) const {
    for (const auto& l : lateral) l.visit(f);
  }
  template <typename G>
  static PyramidParamsT make(G&& g) {
    PyramidParamsT p;
    for (auto& l : p.lateral) l = ChannelMapParamsT<T>::make(g);
    return p;
  }
};

template <typename S>
PyramidParamsT<Tensor<S>> init_pyramid_params(Rng& rng, const std::array<std::size_t, 4>& ch) {
  PyramidParamsT<Tensor<S>> p;
  for (int j = 0; j < 3; ++j) {
    const S k = static_cast<S>(1.0 / std::sqrt(static_cast<double>(ch[j + 1])));
    p.lateral[j].w = Tensor<S>::uniform({ch[j + 1], ch[j]}, rng, -k, k);
  }
  return p;
}

/// Weight-tied variant: lateral maps reuse the transposed downsample weights,
/// so the pyramid adds no independent upsampling weights.
template <typename S>
PyramidParamsT<Tensor<S>> tied_pyramid_params(const std::array<LinearParamsT<Tensor<S>>, 3>& down) {
  PyramidParamsT<Tensor<S>> p;
  for (int j = 0; j < 3; ++j) p.lateral[j].w = transpose(down[j].w);
  return p;
}

/// Top-down pyramid fusion: stage 4 passes through; each shallower stage adds
/// the upsampled deeper result through its lateral connection.
template <typename S>
std::array<VoxelSet<S>, 4> pyramid_fuse(Tape<S>& tape, const std::array<VoxelSet<S>, 4>& stages,
                                        const VoxelConfig& cfg,
                                        const PyramidParamsT<Var>& params) {
  for (int j = 0; j < 4; ++j)
    if (stages[j].stage != j + 1)
      throw ContractError("pyramid_fuse: stages must be ordered 1..4");
  std::array<VoxelSet<S>, 4> out = stages;
  for (int j = 2; j >= 0; --j) {
    Var up = upsample_scatter(tape, out[j + 1], stages[j], cfg, params.lateral[j]);
    out[j].features = add(tape, stages[j].features, up);
  }
  return out;
}

}  // namespace latfuse
