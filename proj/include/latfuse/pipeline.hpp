#pragma once

#include <array>
#include <bit>
#include <chrono>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "latfuse/calib.hpp"
#include "latfuse/latent_fusion.hpp"
#include "latfuse/sampling.hpp"
#include "latfuse/space_align.hpp"
#include "latfuse/voxel.hpp"

namespace latfuse {

/// Ablation switches mirroring the three separable components: scale-aligned
/// multi-stage fusion, 3D-to-2D space alignment (depth gating), and the
/// latent cross-modal fusion block.
struct Toggles {
  bool saf = true;
  bool sam = true;
  bool lfm = true;
};

/// One configuration block for everything width- or size-like, so alternate
/// schedules can be swept without touching code.
struct PipelineConfig {
  VoxelConfig voxel;
  std::array<std::size_t, 4> channels{16, 32, 64, 64};
  std::array<int, 4> level_strides{4, 8, 16, 32};
  std::size_t latent_n = 8;
  bool share_value_projection = true;
  bool tie_decode_affinity = false;
  bool modality_gate_inputs = false;
  bool tie_pyramid_weights = false;

  // Synthetic scenes and procedural pyramid maps.
  int image_h = 370;
  int image_w = 1224;
  double focal = 640.0;
  std::size_t ground_points = 6000;
  std::size_t min_points = 3000;

  EcmiConfig ecmi_config(int stage) const {
    EcmiConfig cfg;
    cfg.channels = channels[static_cast<std::size_t>(stage - 1)];
    cfg.latent_n = latent_n;
    cfg.share_value_projection = share_value_projection;
    cfg.tie_decode_affinity = tie_decode_affinity;
    cfg.modality_gate_inputs = modality_gate_inputs;
    return cfg;
  }
};

/// One input frame: LiDAR returns, the projection chain, and the four
/// stride-matched pyramid feature maps.
template <typename S>
struct Frame {
  std::string name;
  PointCloud<S> cloud;
  Calibration calib;
  std::array<FeatureMap<S>, 4> fpn_maps;
};

template <typename S>
void validate_frame(const Frame<S>& frame, const PipelineConfig& cfg) {
  for (int j = 0; j < 4; ++j) {
    const auto& map = frame.fpn_maps[static_cast<std::size_t>(j)];
    if (map.level != j + 1)
      throw ContractError("frame: map " + std::to_string(j) + " carries level " +
                          std::to_string(map.level));
    if (map.stride != cfg.level_strides[static_cast<std::size_t>(j)])
      throw ContractError("frame: level " + std::to_string(j + 1) + " stride " +
                          std::to_string(map.stride) + " does not match the configuration");
    if (map.channels() != cfg.channels[static_cast<std::size_t>(j)])
      throw ContractError("frame: level " + std::to_string(j + 1) + " channels " +
                          std::to_string(map.channels()) + " do not match stage channels");
  }
}

// ---------------------------------------------------------------------------
// Parameters.
// ---------------------------------------------------------------------------

template <typename T>
struct PipelineParamsT {
  LinearParamsT<T> lift;                    // 4 -> C1 voxel feature lift
  std::array<LinearParamsT<T>, 3> down;     // C_j -> C_{j+1}
  PyramidParamsT<T> pyramid;                // top-down lateral channel maps
  std::array<MlpParamsT<T>, 4> depth;       // depth embeddings, 3 -> C_j
  std::array<EcmiParamsT<T>, 4> fusion;     // one latent-fusion stage each
  LinearParamsT<T> early_adapter;           // C4 -> C1 for the early-fusion path
  MlpParamsT<T> early_depth;                // 3 -> C4 gate for the early-fusion path

  template <typename F>
  void visit(F&& f) const {
    lift.visit(f);
    for (const auto& d : down) d.visit(f);
    pyramid.visit(f);
    for (const auto& d : depth) d.visit(f);
    for (const auto& e : fusion) e.visit(f);
    early_adapter.visit(f);
    early_depth.visit(f);
  }
  template <typename G>
  static PipelineParamsT make(G&& g) {
    PipelineParamsT p;
    p.lift = LinearParamsT<T>::make(g);
    for (auto& d : p.down) d = LinearParamsT<T>::make(g);
    p.pyramid = PyramidParamsT<T>::make(g);
    for (auto& d : p.depth) d = MlpParamsT<T>::make(g);
    for (auto& e : p.fusion) e = EcmiParamsT<T>::make(g);
    p.early_adapter = LinearParamsT<T>::make(g);
    p.early_depth = MlpParamsT<T>::make(g);
    return p;
  }
};

template <typename S>
PipelineParamsT<Tensor<S>> init_pipeline_params(Rng& rng, const PipelineConfig& cfg) {
  PipelineParamsT<Tensor<S>> p;
  p.lift = init_linear<S>(rng, 4, cfg.channels[0]);
  for (int j = 0; j < 3; ++j)
    p.down[j] = init_linear<S>(rng, cfg.channels[j], cfg.channels[j + 1]);
  p.pyramid = init_pyramid_params<S>(rng, cfg.channels);
  if (cfg.tie_pyramid_weights) p.pyramid = tied_pyramid_params<S>(p.down);
  for (int j = 0; j < 4; ++j) {
    p.depth[j] = init_depth_mlp<S>(rng, cfg.channels[j], cfg.channels[j]);
    p.fusion[j] = init_ecmi_params<S>(rng, cfg.ecmi_config(j + 1));
  }
  p.early_adapter = init_linear<S>(rng, cfg.channels[3], cfg.channels[0]);
  p.early_depth = init_depth_mlp<S>(rng, cfg.channels[3], cfg.channels[3]);
  return p;
}

// ---------------------------------------------------------------------------
// Outputs.
// ---------------------------------------------------------------------------

inline std::uint64_t fnv1a64(const void* data, std::size_t bytes) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::size_t i = 0; i < bytes; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

struct StageStats {
  int stage = 0;
  int stride = 0;
  std::size_t num_voxels = 0;
  double valid_fraction = 0.0;  // share of voxel centers projecting into the image
  int level_used = 0;           // pyramid level sampled for this stage, 0 = none
  double feature_sum = 0.0;
  double feature_min = 0.0;
  double feature_max = 0.0;
  std::uint64_t feature_hash = 0;
};

template <typename S>
struct OutputStage {
  int stage = 0;
  int stride = 0;
  std::vector<std::array<int, 3>> indices;
  Tensor<S> centers;
  Tensor<S> features;
};

struct PhaseTiming {
  std::string phase;
  double seconds = 0.0;
};

template <typename S>
struct PipelineOutput {
  std::array<OutputStage<S>, 4> stages;
  std::vector<StageStats> stats;
  std::vector<std::pair<int, int>> level_access;  // (stage, level) sampling log
  std::vector<PhaseTiming> timings;
  std::size_t num_points = 0;
};

// ---------------------------------------------------------------------------
// The staged pipeline.
// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
StageStats make_stage_stats(Tape<S>& tape, const VoxelSet<S>& v, double valid_fraction,
                            int level_used) {
  const Tensor<S>& f = tape.value(v.features);
  StageStats st;
  st.stage = v.stage;
  st.stride = v.stride;
  st.num_voxels = v.size();
  st.valid_fraction = valid_fraction;
  st.level_used = level_used;
  st.feature_min = static_cast<double>(f.data[0]);
  st.feature_max = static_cast<double>(f.data[0]);
  for (S x : f.data) {
    st.feature_sum += static_cast<double>(x);
    st.feature_min = std::min(st.feature_min, static_cast<double>(x));
    st.feature_max = std::max(st.feature_max, static_cast<double>(x));
  }
  st.feature_hash = fnv1a64(f.data.data(), f.data.size() * sizeof(S));
  return st;
}

template <typename S>
double fraction_valid(const std::vector<std::uint8_t>& valid) {
  if (valid.empty()) return 0.0;
  std::size_t n = 0;
  for (auto v : valid) n += v;
  return static_cast<double>(n) / static_cast<double>(valid.size());
}

class PhaseClock {
 public:
  explicit PhaseClock(std::vector<PhaseTiming>& sink) : sink_(sink) {}

  template <typename Fn>
  auto timed(const char* phase, Fn&& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    if constexpr (std::is_void_v<decltype(fn())>) {
      fn();
      record(phase, t0);
    } else {
      auto result = fn();
      record(phase, t0);
      return result;
    }
  }

 private:
  void record(const char* phase, std::chrono::steady_clock::time_point t0) {
    const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    for (auto& t : sink_)
      if (t.phase == phase) {
        t.seconds += dt;
        return;
      }
    sink_.push_back({phase, dt});
  }

  std::vector<PhaseTiming>& sink_;
};

}  // namespace detail

/// Result of the tape-level pipeline: the four fused voxel sets still live on
/// the tape (their features are Vars), alongside the extracted summary.
template <typename S>
struct PipelineRun {
  std::array<VoxelSet<S>, 4> fused;
  PipelineOutput<S> output;
};

/// Core pipeline over an existing tape with pre-lifted parameters and map
/// values; gradient checks drive this entry point directly.
///
/// With all toggles on: voxelize, then per stage j fuse the stride-matched
/// level-j image features into the voxel features (space-aligned and gated)
/// and downsample the fused result into stage j+1; finish with the top-down
/// pyramid pass. SAF off degenerates to early fusion: only stage 1 fuses,
/// reading the deepest (level 4) map through a channel adapter. SAM off skips
/// the depth gate. LFM off replaces the latent fusion block with an
/// elementwise sum.
template <typename S>
PipelineRun<S> run_pipeline_on_tape(Tape<S>& tape, const Frame<S>& frame,
                                    const PipelineParamsT<Var>& params,
                                    const std::array<Var, 4>& map_values,
                                    const Toggles& toggles, const PipelineConfig& cfg) {
  validate_frame(frame, cfg);
  PipelineRun<S> run;
  PipelineOutput<S>& out = run.output;
  out.num_points = frame.cloud.size();
  detail::PhaseClock clock(out.timings);

  std::array<VoxelSet<S>, 4> stages;
  stages[0] = clock.timed("voxelize",
                          [&] { return voxelize(tape, frame.cloud, cfg.voxel, params.lift); });

  std::array<double, 4> valid_fraction{};
  std::array<int, 4> level_used{};

  if (toggles.saf) {
    for (int j = 0; j < 4; ++j) {
      const FeatureMap<S>& map = frame.fpn_maps[static_cast<std::size_t>(j)];
      out.level_access.emplace_back(stages[j].stage, map.level);
      level_used[j] = map.level;
      SparseImageFeatures image_feats = clock.timed("space_align", [&] {
        if (toggles.sam)
          return align_image_features(tape, stages[j], frame.calib, map_values[j], map,
                                      params.depth[j]);
        check_scale_contract(stages[j], map);
        return sample_voxel_features(tape, stages[j], frame.calib, map_values[j], map);
      });
      valid_fraction[j] = detail::fraction_valid<S>(image_feats.valid);
      stages[j].features = clock.timed("latent_fusion", [&] {
        if (toggles.lfm)
          return fuse_stage(tape, image_feats.values, stages[j].features, params.fusion[j],
                            cfg.ecmi_config(j + 1));
        return add(tape, image_feats.values, stages[j].features);
      });
      if (j < 3)
        stages[j + 1] = clock.timed("downsample", [&] {
          return downsample_stage(tape, stages[j], cfg.voxel, params.down[j]);
        });
    }
  } else {
    // Early-fusion strawman: stage 1 voxels read the deepest pyramid level.
    const FeatureMap<S>& deep = frame.fpn_maps[3];
    out.level_access.emplace_back(stages[0].stage, deep.level);
    level_used[0] = deep.level;
    SparseImageFeatures raw = clock.timed("space_align", [&] {
      return sample_voxel_features(tape, stages[0], frame.calib, map_values[3], deep);
    });
    valid_fraction[0] = detail::fraction_valid<S>(raw.valid);
    Var image_feats = raw.values;
    if (toggles.sam) {
      image_feats = clock.timed("space_align", [&] {
        Var centers = tape.constant(stages[0].centers);
        Var gate = depth_embedding(tape, centers, params.early_depth);
        return mul(tape, gate, image_feats);
      });
    }
    image_feats = apply_linear(tape, image_feats, params.early_adapter);
    stages[0].features = clock.timed("latent_fusion", [&] {
      if (toggles.lfm)
        return fuse_stage(tape, image_feats, stages[0].features, params.fusion[0],
                          cfg.ecmi_config(1));
      return add(tape, image_feats, stages[0].features);
    });
    for (int j = 0; j < 3; ++j)
      stages[j + 1] = clock.timed("downsample", [&] {
        return downsample_stage(tape, stages[j], cfg.voxel, params.down[j]);
      });
  }

  run.fused = clock.timed(
      "pyramid", [&] { return pyramid_fuse(tape, stages, cfg.voxel, params.pyramid); });

  for (int j = 0; j < 4; ++j) {
    const VoxelSet<S>& f = run.fused[j];
    out.stats.push_back(detail::make_stage_stats(tape, f, valid_fraction[j], level_used[j]));
    out.stages[j].stage = f.stage;
    out.stages[j].stride = f.stride;
    out.stages[j].indices = f.indices;
    out.stages[j].centers = f.centers;
    out.stages[j].features = tape.value(f.features);
  }
  return run;
}

/// Convenience wrapper: fresh tape, parameters lifted as constants.
template <typename S>
PipelineOutput<S> run_pipeline(const Frame<S>& frame, const PipelineParamsT<Tensor<S>>& params,
                               const Toggles& toggles, const PipelineConfig& cfg) {
  Tape<S> tape;
  PipelineParamsT<Var> pv = lift(tape, params, false);
  std::array<Var, 4> maps;
  for (int j = 0; j < 4; ++j) maps[j] = tape.constant(frame.fpn_maps[j].data);
  return run_pipeline_on_tape(tape, frame, pv, maps, toggles, cfg).output;
}

/// Scalar probe for gradient checking: sum of squares over every fused
/// stage's features.
template <typename S>
Var pipeline_loss(Tape<S>& tape, const PipelineRun<S>& run) {
  Var loss{-1};
  for (int j = 0; j < 4; ++j) {
    Var term = sum(tape, mul(tape, run.fused[j].features, run.fused[j].features));
    loss = loss.valid() ? add(tape, loss, term) : term;
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Synthetic scenes.
// ---------------------------------------------------------------------------

/// Points-per-object density rule: solid angle shrinks with the square of
/// range, as a spinning scanner would see it.
inline std::size_t points_for_range(double range_m) {
  const double base = 1600.0;
  const double n = base * (10.0 * 10.0) / std::max(1.0, range_m * range_m);
  return static_cast<std::size_t>(std::clamp(n, 30.0, 2400.0));
}

/// Uniform samples over the surface of an axis-aligned box.
template <typename S>
PointCloud<S> box_surface_points(Rng& rng, const std::array<double, 3>& center,
                                 const std::array<double, 3>& dims, std::size_t n_points) {
  PointCloud<S> cloud;
  cloud.points.reserve(n_points);
  const double ax = dims[1] * dims[2], ay = dims[0] * dims[2], az = dims[0] * dims[1];
  const double total = 2.0 * (ax + ay + az);
  for (std::size_t i = 0; i < n_points; ++i) {
    double pick = rng.uniform(0.0, total);
    int axis = 0;
    if (pick < 2.0 * ax) {
      axis = 0;
    } else if (pick < 2.0 * (ax + ay)) {
      axis = 1;
      pick -= 2.0 * ax;
    } else {
      axis = 2;
      pick -= 2.0 * (ax + ay);
    }
    std::array<double, 3> p{};
    for (int a = 0; a < 3; ++a) p[a] = rng.uniform(-0.5, 0.5) * dims[a];
    p[axis] = (pick < (axis == 0 ? ax : axis == 1 ? ay : az) ? 0.5 : -0.5) * dims[axis];
    cloud.points.push_back({static_cast<S>(center[0] + p[0]), static_cast<S>(center[1] + p[1]),
                            static_cast<S>(center[2] + p[2]),
                            static_cast<S>(rng.uniform(0.05, 0.95))});
  }
  return cloud;
}

/// A single box-shaped object at the given range along x, with the scanner
/// density rule applied. Test hook for the distance/voxel-count relation.
template <typename S>
PointCloud<S> synthetic_object_cloud(std::uint64_t seed, double range_m, double lateral_y = 0.0) {
  Rng rng(seed);
  const std::array<double, 3> dims{4.2, 1.8, 1.6};
  const std::array<double, 3> center{range_m, lateral_y, -1.73 + dims[2] / 2.0};
  return box_surface_points<S>(rng, center, dims, points_for_range(range_m));
}

namespace detail {

template <typename S>
FeatureMap<S> procedural_map(Rng& rng, int level, int stride, int image_h, int image_w,
                             std::size_t channels) {
  FeatureMap<S> m;
  m.level = level;
  m.stride = stride;
  const std::size_t h = static_cast<std::size_t>((image_h + stride - 1) / stride);
  const std::size_t w = static_cast<std::size_t>((image_w + stride - 1) / stride);
  m.data = Tensor<S>({h, w, channels});
  // Smooth low-frequency field per channel so interpolation behaves well.
  std::vector<std::array<double, 6>> coef(channels);
  for (auto& c : coef)
    c = {rng.uniform(0.3, 1.0),       rng.uniform(1.0, 3.0),  rng.uniform(1.0, 3.0),
         rng.uniform(0.0, 6.283185), rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)};
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < channels; ++c) {
        const double u = static_cast<double>(x * stride) / image_w;
        const double v = static_cast<double>(y * stride) / image_h;
        const auto& k = coef[c];
        m.data.at(y, x, c) = static_cast<S>(
            k[0] * std::sin(6.283185307 * (k[1] * u + k[2] * v) + k[3]) + k[4] * u + k[5] * v);
      }
  return m;
}

inline Calibration synthetic_calibration(double focal, int image_h, int image_w) {
  Calibration c;
  c.cam_projection = {{{focal, 0.0, image_w / 2.0, 0.0},
                       {0.0, focal, image_h / 2.0, 0.0},
                       {0.0, 0.0, 1.0, 0.0}}};
  c.rect = mat44_identity();
  Mat44 axes{};
  axes[0][1] = -1.0;  // cam x = -lidar y
  axes[1][2] = -1.0;  // cam y = -lidar z
  axes[2][0] = 1.0;   // cam z =  lidar x
  axes[3][3] = 1.0;
  axes[1][3] = -0.08;
  axes[2][3] = -0.27;
  c.lidar_to_cam = axes;
  c.image_h = image_h;
  c.image_w = image_w;
  return c;
}

}  // namespace detail

/// Deterministic synthetic frame: a ground plane plus box-shaped objects at
/// varied ranges, smooth procedural pyramid maps, and a forward-looking
/// pinhole calibration. Identical seeds produce identical frames bit for bit.
template <typename S>
Frame<S> generate_synthetic_scene(std::uint64_t seed, std::size_t n_objects,
                                  const PipelineConfig& cfg = {}) {
  Rng rng(seed);
  Frame<S> frame;
  frame.name = "synthetic-" + std::to_string(seed) + "-" + std::to_string(n_objects);
  frame.calib = detail::synthetic_calibration(cfg.focal, cfg.image_h, cfg.image_w);

  const auto& vc = cfg.voxel;
  for (std::size_t i = 0; i < cfg.ground_points; ++i) {
    const double x = rng.uniform(vc.range_min[0] + 1.0, vc.range_max[0] - 0.5);
    const double y = rng.uniform(vc.range_min[1] + 1.0, vc.range_max[1] - 1.0);
    const double z = -1.73 + 0.04 * rng.normal();
    frame.cloud.points.push_back(
        {static_cast<S>(x), static_cast<S>(y), static_cast<S>(z),
         static_cast<S>(rng.uniform(0.05, 0.6))});
  }
  for (std::size_t k = 0; k < n_objects; ++k) {
    const double range = rng.uniform(8.0, 62.0);
    const double lateral = rng.uniform(-14.0, 14.0);
    std::array<double, 3> dims{4.2 * rng.uniform(0.8, 1.2), 1.8 * rng.uniform(0.8, 1.2),
                               1.6 * rng.uniform(0.8, 1.2)};
    std::array<double, 3> center{range, lateral, -1.73 + dims[2] / 2.0};
    PointCloud<S> object =
        box_surface_points<S>(rng, center, dims, points_for_range(range));
    frame.cloud.points.insert(frame.cloud.points.end(), object.points.begin(),
                              object.points.end());
  }
  while (frame.cloud.size() < cfg.min_points) {
    const double x = rng.uniform(vc.range_min[0] + 1.0, vc.range_max[0] - 0.5);
    const double y = rng.uniform(vc.range_min[1] + 1.0, vc.range_max[1] - 1.0);
    frame.cloud.points.push_back({static_cast<S>(x), static_cast<S>(y),
                                  static_cast<S>(-1.73 + 0.04 * rng.normal()),
                                  static_cast<S>(rng.uniform(0.05, 0.6))});
  }
  for (int j = 0; j < 4; ++j)
    frame.fpn_maps[j] = detail::procedural_map<S>(rng, j + 1, cfg.level_strides[j], cfg.image_h,
                                                  cfg.image_w, cfg.channels[j]);
  return frame;
}

// ---------------------------------------------------------------------------
// KITTI frame ingestion.
// ---------------------------------------------------------------------------

template <typename S>
PointCloud<S> load_kitti_cloud(const std::string& path) {
  static_assert(std::endian::native == std::endian::little,
                "KITTI cloud parsing assumes a little-endian host");
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in.good()) throw ParseError("cloud: cannot open '" + path + "'");
  const std::streamsize bytes = in.tellg();
  if (bytes % 16 != 0)
    throw ParseError("cloud: '" + path + "' has " + std::to_string(bytes) +
                     " bytes, not a multiple of 16 (4 little-endian f32 per point)");
  in.seekg(0);
  std::vector<float> raw(static_cast<std::size_t>(bytes) / 4);
  in.read(reinterpret_cast<char*>(raw.data()), bytes);
  if (!in.good()) throw ParseError("cloud: short read from '" + path + "'");
  PointCloud<S> cloud;
  cloud.points.resize(raw.size() / 4);
  for (std::size_t i = 0; i < cloud.points.size(); ++i)
    for (int a = 0; a < 4; ++a)
      cloud.points[i][a] = static_cast<S>(raw[i * 4 + static_cast<std::size_t>(a)]);
  return cloud;
}

template <typename S>
void save_kitti_cloud(const std::string& path, const PointCloud<S>& cloud) {
  static_assert(std::endian::native == std::endian::little,
                "KITTI cloud writing assumes a little-endian host");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out.good()) throw ParseError("cloud: cannot open '" + path + "' for writing");
  std::vector<float> raw(cloud.points.size() * 4);
  for (std::size_t i = 0; i < cloud.points.size(); ++i)
    for (int a = 0; a < 4; ++a)
      raw[i * 4 + static_cast<std::size_t>(a)] = static_cast<float>(cloud.points[i][a]);
  out.write(reinterpret_cast<const char*>(raw.data()),
            static_cast<std::streamsize>(raw.size() * sizeof(float)));
}

/// Loads one KITTI frame (binary cloud + calibration text). The image
/// backbone is out of scope here, so the pyramid maps are procedural
/// stand-ins sized from the configured image dimensions; they are
/// deterministic per path-independent fixed seed.
template <typename S>
Frame<S> load_kitti_frame(const std::string& cloud_path, const std::string& calib_path,
                          const PipelineConfig& cfg = {}) {
  Frame<S> frame;
  frame.name = cloud_path;
  frame.cloud = load_kitti_cloud<S>(cloud_path);
  std::ifstream in(calib_path);
  if (!in.good()) throw ParseError("calib: cannot open '" + calib_path + "'");
  std::ostringstream text;
  text << in.rdbuf();
  try {
    frame.calib = parse_kitti_calib(text.str(), cfg.image_h, cfg.image_w);
  } catch (const Error& e) {
    throw ParseError(std::string(e.what()) + " (file '" + calib_path + "')");
  }
  Rng map_rng(0x1a7f05e5u);
  for (int j = 0; j < 4; ++j)
    frame.fpn_maps[j] = detail::procedural_map<S>(map_rng, j + 1, cfg.level_strides[j],
                                                  cfg.image_h, cfg.image_w, cfg.channels[j]);
  return frame;
}

// ---------------------------------------------------------------------------
// Report serialization.
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json toggles_json(const Toggles& t) {
  return {{"saf", t.saf}, {"sam", t.sam}, {"lfm", t.lfm}};
}

template <typename S>
nlohmann::ordered_json pipeline_output_json(const PipelineOutput<S>& out,
                                            bool include_timings = false) {
  nlohmann::ordered_json j;
  j["num_points"] = out.num_points;
  j["stages"] = nlohmann::ordered_json::array();
  for (const auto& st : out.stats) {
    nlohmann::ordered_json s;
    s["stage"] = st.stage;
    s["stride"] = st.stride;
    s["num_voxels"] = st.num_voxels;
    s["valid_fraction"] = st.valid_fraction;
    s["level_used"] = st.level_used;
    s["feature_sum"] = st.feature_sum;
    s["feature_min"] = st.feature_min;
    s["feature_max"] = st.feature_max;
    char hex[17];
    std::snprintf(hex, sizeof(hex), "%016llx",
                  static_cast<unsigned long long>(st.feature_hash));
    s["feature_hash"] = hex;
    j["stages"].push_back(std::move(s));
  }
  j["level_access"] = nlohmann::ordered_json::array();
  for (const auto& [stage, level] : out.level_access)
    j["level_access"].push_back({{"stage", stage}, {"level", level}});
  if (include_timings) {
    nlohmann::ordered_json t = nlohmann::ordered_json::array();
    for (const auto& ph : out.timings)
      t.push_back({{"phase", ph.phase}, {"seconds", ph.seconds}});
    j["timings"] = std::move(t);
  }
  return j;
}

}  // namespace latfuse
