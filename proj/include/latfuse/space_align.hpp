#pragma once

#include <cstdint>
#include <vector>

#include "latfuse/autodiff.hpp"
#include "latfuse/calib.hpp"
#include "latfuse/layers.hpp"
#include "latfuse/sampling.hpp"
#include "latfuse/voxel.hpp"

namespace latfuse {

/// Depth-embedding MLP: fc1 (3 -> hidden), Tanh, fc2 (hidden -> C_j),
/// Sigmoid. Output width matches the image feature channels of the stage.
template <typename T>
using DepthMlpParamsT = MlpParamsT<T>;

template <typename S>
MlpParamsT<Tensor<S>> init_depth_mlp(Rng& rng, std::size_t hidden, std::size_t c_out) {
  return init_mlp<S>(rng, 3, hidden, c_out);
}

/// Sigmoid-bounded gate computed from voxel center coordinates; every entry
/// lies in (0, 1). Differentiable w.r.t. both the MLP parameters and the
/// centers.
template <typename S>
Var depth_embedding(Tape<S>& tape, Var centers, const DepthMlpParamsT<Var>& params) {
  const Tensor<S>& c = tape.value(centers);
  c.require_ndim(2);
  if (c.cols() != 3)
    throw ShapeError("depth_embedding: expected N x 3 centers, got " + c.shape_string());
  return apply_mlp_tanh_sigmoid(tape, centers, params);
}

/// Image features gathered at projected voxel centers, row-aligned 1:1 with
/// the voxel set. Invalid projections leave zero rows.
struct SparseImageFeatures {
  int stage = 1;
  Var values;                       // N x C on the tape
  std::vector<std::uint8_t> valid;  // from projection
};

/// The scale contract: stage-j voxels may only read the stride-matched
/// pyramid level j.
template <typename S>
void check_scale_contract(const VoxelSet<S>& voxels, const FeatureMap<S>& map) {
  if (map.level != voxels.stage)
    throw ContractError("scale contract: stage " + std::to_string(voxels.stage) +
                        " voxels paired with level " + std::to_string(map.level) + " map");
}

/// Projection + bilinear gather without the stage contract or gating; raw
/// geometry shared by the aligned and deliberately-misaligned paths.
template <typename S>
SparseImageFeatures sample_voxel_features(Tape<S>& tape, const VoxelSet<S>& voxels,
                                          const Calibration& calib, Var map_values,
                                          const FeatureMap<S>& map) {
  PixelCoords<S> pixels = project_points(voxels.centers, calib);
  SparseImageFeatures out;
  out.stage = voxels.stage;
  out.valid = pixels.valid;
  out.values = bilinear_sample(tape, map_values, map, pixels);
  return out;
}

/// Space-aligned sparse image features: level-j map sampled at projected
/// stage-j voxel centers, gated elementwise by the depth embedding of the
/// centers. Invalid projections stay zero (the gate multiplies a zero row).
template <typename S>
SparseImageFeatures align_image_features(Tape<S>& tape, const VoxelSet<S>& voxels,
                                         const Calibration& calib, Var map_values,
                                         const FeatureMap<S>& map,
                                         const DepthMlpParamsT<Var>& params) {
  check_scale_contract(voxels, map);
  SparseImageFeatures out = sample_voxel_features(tape, voxels, calib, map_values, map);
  Var centers = tape.constant(voxels.centers);
  Var gate = depth_embedding(tape, centers, params);
  if (tape.value(gate).cols() != tape.value(out.values).cols())
    throw ContractError("align_image_features: depth gate width does not match map channels");
  out.values = mul(tape, gate, out.values);
  return out;
}

}  // namespace latfuse
