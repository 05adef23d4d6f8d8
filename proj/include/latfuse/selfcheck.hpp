#pragma once

#include <chrono>
#include <cstdio>
#include <string>
#include <vector>

#include "latfuse/bench.hpp"
#include "latfuse/pipeline.hpp"

namespace latfuse {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

namespace selfcheck {

inline std::string fmt(const char* pattern, double a, double b) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), pattern, a, b);
  return buf;
}

inline CheckResult bounded(const std::string& name, double measured, double tol) {
  return {name, measured < tol, fmt("measured %.3e (tolerance %.0e)", measured, tol)};
}

inline CheckResult exact(const std::string& name, bool ok) {
  return {name, ok, ok ? "exact" : "mismatch"};
}

// --- Oracle equivalence: latent interaction against its dense reference. ---

inline std::vector<CheckResult> oracle_equivalence_checks() {
  std::vector<CheckResult> out;
  auto run_grid = [&](std::size_t n_rows, std::size_t channels, std::size_t latent_n,
                      std::uint64_t seed_base) {
    double worst = 0.0;
    for (std::uint64_t s = 0; s < 20; ++s) {
      Rng rng(seed_base + s);
      EcmiConfig cfg;
      cfg.channels = channels;
      cfg.latent_n = latent_n;
      EcmiParamsT<Tensord> params = init_ecmi_params<double>(rng, cfg);
      Tensord f = Tensord::uniform({n_rows, channels}, rng, -1.0, 1.0);
      Tensord v = Tensord::uniform({n_rows, channels}, rng, -1.0, 1.0);
      Tape<double> tape;
      EcmiParamsT<Var> pv = lift(tape, params, false);
      auto [ft, vt] = ecmi(tape, tape.constant(f), tape.constant(v), pv, cfg);
      auto [fo, vo] = dense_oracle_ecmi(f, v, params, cfg);
      worst = std::max({worst, static_cast<double>(max_rel_diff(tape.value(ft), fo)),
                        static_cast<double>(max_rel_diff(tape.value(vt), vo))});
    }
    char name[96];
    std::snprintf(name, sizeof(name), "ecmi == dense oracle, 20 seeds, N=%zu C=%zu n=%zu",
                  n_rows, channels, latent_n);
    out.push_back(bounded(name, worst, 1e-6));
  };
  run_grid(64, 16, 4, 300);
  run_grid(256, 32, 8, 400);
  return out;
}

// --- Gradient integrity: every differentiable op plus the staged pipeline. --

inline std::vector<CheckResult> gradient_checks() {
  std::vector<CheckResult> out;
  const double eps = 1e-5;
  const double tol = 1e-4;
  Rng rng(500);

  auto rnd = [&](std::vector<std::size_t> shape, double lo = -1.0, double hi = 1.0) {
    return Tensord::uniform(std::move(shape), rng, lo, hi);
  };
  auto sq = [](Tape<double>& t, Var v) { return sum(t, mul(t, v, v)); };
  auto fd = [&](const char* name, auto&& fn, std::vector<Tensord> inputs) {
    out.push_back(bounded(std::string("grad: ") + name,
                          finite_diff_check<double>(fn, std::move(inputs), eps), tol));
  };

  fd("matmul", [&](Tape<double>& t, const std::vector<Var>& v) {
    return sq(t, matmul(t, v[0], v[1]));
  }, {rnd({3, 4}), rnd({4, 2})});
  fd("transpose", [&](Tape<double>& t, const std::vector<Var>& v) {
    return sq(t, transpose(t, v[0]));
  }, {rnd({3, 4})});
  fd("add", [&](Tape<double>& t, const std::vector<Var>& v) {
    return sq(t, add(t, v[0], v[1]));
  }, {rnd({3, 3}), rnd({3, 3})});
  fd("mul", [&](Tape<double>& t, const std::vector<Var>& v) {
    return sq(t, mul(t, v[0], v[1]));
  }, {rnd({3, 3}), rnd({3, 3})});
  fd("scale", [&](Tape<double>& t, const std::vector<Var>& v) {
    return sq(t, scale(t, v[0], -1.7));
  }, {rnd({3, 3})});
  fd("linear", [&](Tape<double>& t, const std::vector<Var>& v) {
    return sq(t, linear(t, v[0], v[1], v[2]));
  }, {rnd({4, 3}), rnd({3, 5}), rnd({5})});
  fd("sigmoid", [&](Tape<double>& t, const std::vector<Var>& v) {
    return sq(t, sigmoid(t, v[0]));
  }, {rnd({4, 4})});
  fd("tanh", [&](Tape<double>& t, const std::vector<Var>& v) {
    return sq(t, latfuse::tanh(t, v[0]));
  }, {rnd({4, 4})});
  fd("relu", [&](Tape<double>& t, const std::vector<Var>& v) {
    return sq(t, relu(t, v[0]));
  }, {rnd({4, 4}, 0.2, 1.0)});
  fd("softmax", [&](Tape<double>& t, const std::vector<Var>& v) {
    return sq(t, softmax(t, v[0], 1));
  }, {rnd({4, 5})});
  fd("row_norm", [&](Tape<double>& t, const std::vector<Var>& v) {
    return sq(t, row_norm(t, v[0], 1e-3));
  }, {rnd({4, 6})});
  std::vector<std::size_t> idx{2, 0, 1, 0};
  fd("gather_rows", [&](Tape<double>& t, const std::vector<Var>& v) {
    return sq(t, gather_rows(t, v[0], idx));
  }, {rnd({3, 4})});
  fd("scatter_add_rows", [&](Tape<double>& t, const std::vector<Var>& v) {
    return sq(t, scatter_add_rows(t, v[0], idx, 3));
  }, {rnd({4, 4})});
  fd("concat_rows", [&](Tape<double>& t, const std::vector<Var>& v) {
    return sq(t, concat_rows(t, v[0], v[1]));
  }, {rnd({2, 3}), rnd({3, 3})});
  std::vector<std::size_t> groups{0, 1, 0, 1, 2, 2};
  fd("group_max", [&](Tape<double>& t, const std::vector<Var>& v) {
    return sq(t, group_max(t, v[0], groups, 3));
  }, {rnd({6, 3})});

  {
    FeatureMap<double> meta;
    meta.level = 1;
    meta.stride = 2;
    meta.data = rnd({5, 6, 3});
    PixelCoords<double> px;
    px.uv = Tensord({4, 2}, std::vector<double>{1.2, 3.3, 7.9, 0.4, 4.0, 6.5, 9.7, 7.7});
    px.valid.assign(4, 1);
    fd("bilinear_sample", [&](Tape<double>& t, const std::vector<Var>& v) {
      return sq(t, bilinear_sample(t, v[0], meta, px));
    }, {meta.data});
  }
  {
    MlpParamsT<Tensord> dp = init_depth_mlp<double>(rng, 4, 4);
    std::vector<Tensord> inputs = collect(dp);
    inputs.push_back(rnd({5, 3}, -3.0, 3.0));
    fd("depth_embedding", [&](Tape<double>& t, const std::vector<Var>& v) {
      std::size_t cur = 0;
      MlpParamsT<Var> p = pack_vars<MlpParamsT>(v, cur);
      return sq(t, depth_embedding(t, v[cur], p));
    }, std::move(inputs));
  }
  fd("affinity", [&](Tape<double>& t, const std::vector<Var>& v) {
    return sq(t, affinity(t, v[0], v[1]));
  }, {rnd({6, 4}), rnd({2, 4})});
  fd("encode_to_latent", [&](Tape<double>& t, const std::vector<Var>& v) {
    return sq(t, encode_to_latent(t, v[0], v[1], v[2]));
  }, {rnd({6, 4}), rnd({2, 4}), rnd({4, 4})});
  fd("latent_graph_propagate", [&](Tape<double>& t, const std::vector<Var>& v) {
    return sq(t, latent_graph_propagate(t, v[0], v[1]));
  }, {rnd({4, 4}), rnd({4, 4})});
  fd("decode_from_latent", [&](Tape<double>& t, const std::vector<Var>& v) {
    return sq(t, decode_from_latent(t, v[0], v[1], v[2]));
  }, {rnd({6, 4}), rnd({2, 4}), rnd({2, 4})});
  {
    EcmiConfig cfg;
    cfg.channels = 4;
    cfg.latent_n = 2;
    EcmiParamsT<Tensord> ep = init_ecmi_params<double>(rng, cfg);
    std::vector<Tensord> inputs = collect(ep);
    inputs.push_back(rnd({10, 4}));
    inputs.push_back(rnd({10, 4}));
    fd("ecmi + fuse_head", [&](Tape<double>& t, const std::vector<Var>& v) {
      std::size_t cur = 0;
      EcmiParamsT<Var> p = pack_vars<EcmiParamsT>(v, cur);
      return sq(t, fuse_stage(t, v[cur], v[cur + 1], p, cfg));
    }, std::move(inputs));
  }
  {
    QkvParamsT<Tensord> qp = init_qkv_params<double>(rng, 4);
    std::vector<Tensord> inputs = collect(qp);
    inputs.push_back(rnd({6, 4}));
    inputs.push_back(rnd({6, 4}));
    fd("qkv_cross_attention", [&](Tape<double>& t, const std::vector<Var>& v) {
      std::size_t cur = 0;
      QkvParamsT<Var> p = pack_vars<QkvParamsT>(v, cur);
      return sq(t, qkv_cross_attention(t, v[cur], v[cur + 1], p));
    }, std::move(inputs));
  }
  return out;
}

/// Central-difference sweep over every pipeline parameter and all four map
/// tensors on a small synthetic frame.
inline CheckResult full_pipeline_gradient_check() {
  PipelineConfig cfg;
  cfg.channels = {4, 4, 4, 4};
  cfg.latent_n = 2;
  cfg.image_h = 64;
  cfg.image_w = 96;
  cfg.focal = 48.0;
  cfg.ground_points = 60;
  cfg.min_points = 50;
  Frame<double> frame = generate_synthetic_scene<double>(21, 1, cfg);
  Rng rng(600);
  PipelineParamsT<Tensord> params = init_pipeline_params<double>(rng, cfg);

  std::vector<Tensord> inputs = collect(params);
  const std::size_t n_params = inputs.size();
  for (int j = 0; j < 4; ++j) inputs.push_back(frame.fpn_maps[j].data);

  auto fn = [&](Tape<double>& t, const std::vector<Var>& leaves) {
    std::size_t cursor = 0;
    PipelineParamsT<Var> pv = pack_vars<PipelineParamsT>(leaves, cursor);
    std::array<Var, 4> maps;
    for (int j = 0; j < 4; ++j) maps[j] = leaves[n_params + static_cast<std::size_t>(j)];
    PipelineRun<double> run = run_pipeline_on_tape(t, frame, pv, maps, Toggles{}, cfg);
    return pipeline_loss(t, run);
  };
  const double err = finite_diff_check<double>(fn, std::move(inputs), 1e-5);
  return bounded("grad: full stage pipeline (all params + maps)", err, 1e-4);
}

// --- Exact residual / identity invariants. ---

inline std::vector<CheckResult> identity_checks() {
  std::vector<CheckResult> out;
  Rng rng(700);
  {
    EcmiConfig cfg;
    cfg.channels = 8;
    cfg.latent_n = 2;
    EcmiParamsT<Tensord> params = init_ecmi_params<double>(rng, cfg);
    params.w_value = Tensord::zeros({8, 8});
    params.w_value_voxel = Tensord::zeros({8, 8});
    Tensord f = Tensord::uniform({24, 8}, rng, -1.0, 1.0);
    Tensord v = Tensord::uniform({24, 8}, rng, -1.0, 1.0);
    Tape<double> t;
    EcmiParamsT<Var> pv = lift(t, params, false);
    auto [ft, vt] = ecmi(t, t.constant(f), t.constant(v), pv, cfg);
    out.push_back(exact("zero-latent decode: ecmi is the identity",
                        t.value(ft).data == f.data && t.value(vt).data == v.data));
  }
  {
    VoxelConfig vc;
    vc.voxel_size = {1.0, 1.0, 1.0};
    vc.range_min = {0.0, 0.0, 0.0};
    vc.range_max = {8.0, 8.0, 8.0};
    Tape<double> t;
    PointCloud<double> cloud;
    for (int i = 0; i < 120; ++i)
      cloud.points.push_back({rng.uniform(0.0, 8.0), rng.uniform(0.0, 8.0),
                              rng.uniform(0.0, 8.0), rng.uniform(0.0, 1.0)});
    LinearParamsT<Var> ident{t.constant(Tensord::identity(4)), t.constant(Tensord::zeros({4}))};
    std::array<VoxelSet<double>, 4> stages;
    stages[0] = voxelize(t, cloud, vc, ident);
    for (int j = 0; j < 3; ++j) stages[j + 1] = downsample_stage(t, stages[j], vc, ident);
    PyramidParamsT<Var> zero;
    for (int j = 0; j < 3; ++j) zero.lateral[j].w = t.constant(Tensord::zeros({4, 4}));
    auto fused = pyramid_fuse(t, stages, vc, zero);
    bool ok = true;
    for (int j = 0; j < 4; ++j)
      ok = ok && t.value(fused[j].features).data == t.value(stages[j].features).data;
    out.push_back(exact("zeroed laterals: pyramid_fuse is the identity", ok));
  }
  {
    PipelineConfig cfg;
    cfg.channels = {4, 4, 4, 4};
    cfg.latent_n = 2;
    cfg.image_h = 64;
    cfg.image_w = 96;
    cfg.focal = 48.0;
    cfg.ground_points = 250;
    cfg.min_points = 200;
    Frame<double> frame = generate_synthetic_scene<double>(22, 1, cfg);
    Tape<double> t;
    Rng prng(701);
    VoxelSet<double> v =
        voxelize(t, frame.cloud, cfg.voxel, lift(t, init_linear<double>(prng, 4, 4), false));
    MlpParamsT<Tensord> sat;
    sat.w1 = Tensord::zeros({3, 4});
    sat.b1 = Tensord::zeros({4});
    sat.w2 = Tensord::zeros({4, 4});
    sat.b2 = Tensord::full({4}, 40.0);
    Var mv = t.constant(frame.fpn_maps[0].data);
    SparseImageFeatures gated = align_image_features(t, v, frame.calib, mv,
                                                     frame.fpn_maps[0], lift(t, sat, false));
    SparseImageFeatures raw =
        sample_voxel_features(t, v, frame.calib, mv, frame.fpn_maps[0]);
    out.push_back(exact("saturated depth gate: alignment equals raw sampling",
                        t.value(gated.values).data == t.value(raw.values).data));
  }
  return out;
}

// --- Geometry oracles. ---

inline std::vector<CheckResult> geometry_checks() {
  std::vector<CheckResult> out;
  Rng rng(800);
  {
    // Projection against an explicit homogeneous multiply-then-divide.
    Calibration c;
    const double f = 720.0;
    c.cam_projection = {{{f, 0.0, 610.0, 45.0}, {0.0, f, 173.0, 0.2}, {0.0, 0.0, 1.0, 0.003}}};
    c.rect = mat44_identity();
    Mat44 axes{};
    axes[0][1] = -1.0;
    axes[1][2] = -1.0;
    axes[2][0] = 1.0;
    axes[3][3] = 1.0;
    axes[0][3] = 0.02;
    axes[1][3] = -0.08;
    axes[2][3] = -0.27;
    c.lidar_to_cam = axes;
    Tensord pts({100, 3});
    for (std::size_t i = 0; i < 100; ++i) {
      pts.at(i, 0) = rng.uniform(1.0, 70.0);
      pts.at(i, 1) = rng.uniform(-30.0, 30.0);
      pts.at(i, 2) = rng.uniform(-3.0, 1.0);
    }
    PixelCoords<double> px = project_points(pts, c);
    const Mat34 cm = c.composed();
    double worst = 0.0;
    for (std::size_t i = 0; i < 100; ++i) {
      const double x = pts.at(i, 0), y = pts.at(i, 1), z = pts.at(i, 2);
      const double hu = cm[0][0] * x + cm[0][1] * y + cm[0][2] * z + cm[0][3];
      const double hv = cm[1][0] * x + cm[1][1] * y + cm[1][2] * z + cm[1][3];
      const double hw = cm[2][0] * x + cm[2][1] * y + cm[2][2] * z + cm[2][3];
      if (hw <= 0.0) continue;
      worst = std::max({worst, std::abs(px.uv.at(i, 0) - hu / hw),
                        std::abs(px.uv.at(i, 1) - hv / hw)});
    }
    out.push_back(bounded("projection vs homogeneous oracle (px)", worst, 1e-9));
  }
  {
    FeatureMap<double> m;
    m.level = 1;
    m.stride = 4;
    m.data = Tensord::uniform({7, 9, 4}, rng, -1.0, 1.0);
    double worst = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
      const double u = rng.uniform(0.0, 32.0), v = rng.uniform(0.0, 24.0);
      PixelCoords<double> px;
      px.uv = Tensord({1, 2}, std::vector<double>{u, v});
      px.valid = {1};
      Tensord got = bilinear_sample(m, px);
      const double x = u / 4.0, y = v / 4.0;
      const std::size_t x0 = static_cast<std::size_t>(x), y0 = static_cast<std::size_t>(y);
      const std::size_t x1 = std::min<std::size_t>(x0 + 1, 8), y1 = std::min<std::size_t>(y0 + 1, 6);
      const double fx = x - static_cast<double>(x0), fy = y - static_cast<double>(y0);
      for (std::size_t ch = 0; ch < 4; ++ch) {
        const double want = (1 - fx) * (1 - fy) * m.data.at(y0, x0, ch) +
                            fx * (1 - fy) * m.data.at(y0, x1, ch) +
                            (1 - fx) * fy * m.data.at(y1, x0, ch) +
                            fx * fy * m.data.at(y1, x1, ch);
        worst = std::max(worst, std::abs(got.at(0, ch) - want));
      }
    }
    out.push_back(bounded("bilinear vs 4-neighbor oracle", worst, 1e-12));
  }
  {
    // Reference upsample-then-index path against direct level sampling.
    FeatureMap<double> m;
    m.level = 1;
    m.stride = 4;
    m.data = Tensord::uniform({6, 8, 3}, rng, -1.0, 1.0);
    FeatureMap<double> up = upsample_to_full_res(m, 24, 32);
    double worst = 0.0;
    for (int trial = 0; trial < 60; ++trial) {
      PixelCoords<double> px;
      px.uv = Tensord({1, 2}, std::vector<double>{static_cast<double>(rng.next_below(32)),
                                                  static_cast<double>(rng.next_below(24))});
      px.valid = {1};
      Tensord direct = bilinear_sample(m, px);
      const std::size_t x = static_cast<std::size_t>(px.uv.at(0, 0));
      const std::size_t y = static_cast<std::size_t>(px.uv.at(0, 1));
      for (std::size_t ch = 0; ch < 3; ++ch)
        worst = std::max(worst, std::abs(direct.at(0, ch) - up.data.at(y, x, ch)));
    }
    // Fractional coordinates on an affine ramp, where both routes are exact.
    FeatureMap<double> ramp;
    ramp.level = 1;
    ramp.stride = 4;
    ramp.data = Tensord({6, 8, 2});
    for (std::size_t y = 0; y < 6; ++y)
      for (std::size_t x = 0; x < 8; ++x) {
        ramp.data.at(y, x, 0) = 0.25 + 0.0125 * (x * 4.0) - 0.05 * (y * 4.0);
        ramp.data.at(y, x, 1) = -0.75 + 0.03 * (x * 4.0) + 0.01 * (y * 4.0);
      }
    FeatureMap<double> ramp_up = upsample_to_full_res(ramp, 24, 32);
    for (int trial = 0; trial < 60; ++trial) {
      PixelCoords<double> px;
      px.uv = Tensord({1, 2}, std::vector<double>{rng.uniform(0.0, 28.0), rng.uniform(0.0, 20.0)});
      px.valid = {1};
      Tensord direct = bilinear_sample(ramp, px);
      Tensord reference = bilinear_sample(ramp_up, px);
      worst = std::max(worst, static_cast<double>(max_abs_diff(direct, reference)));
    }
    out.push_back(bounded("upsample-then-index reference vs direct sampling", worst, 1e-6));
  }
  return out;
}

}  // namespace selfcheck

/// Oracle-equivalence, gradient, identity, and geometry suites; the CLI
/// selftest subcommand prints one line per entry.
inline std::vector<CheckResult> run_selfchecks() {
  std::vector<CheckResult> all;
  auto append = [&](std::vector<CheckResult> v) {
    for (auto& c : v) all.push_back(std::move(c));
  };
  append(selfcheck::oracle_equivalence_checks());
  append(selfcheck::gradient_checks());
  all.push_back(selfcheck::full_pipeline_gradient_check());
  append(selfcheck::identity_checks());
  append(selfcheck::geometry_checks());
  return all;
}

}  // namespace latfuse
