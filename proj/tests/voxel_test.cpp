#include "latfuse/voxel.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <map>

#include "latfuse/random.hpp"

using namespace latfuse;

namespace {

PointCloud<double> cloud_from(std::initializer_list<std::array<double, 4>> pts) {
  PointCloud<double> c;
  c.points.assign(pts);
  return c;
}

// Small test grid: 8 x 8 x 8 m at 1 m voxels, so indices are easy to reason
// about by hand.
VoxelConfig test_config() {
  VoxelConfig cfg;
  cfg.voxel_size = {1.0, 1.0, 1.0};
  cfg.range_min = {0.0, 0.0, 0.0};
  cfg.range_max = {8.0, 8.0, 8.0};
  return cfg;
}

LinearParamsT<Var> identity_lift(Tape<double>& t, std::size_t c) {
  LinearParamsT<Var> p;
  p.w = t.constant(Tensord::identity(c));
  p.b = t.constant(Tensord::zeros({c}));
  return p;
}

VoxelSet<double> make_stage(Tape<double>& t, int stage, int stride,
                            std::vector<std::array<int, 3>> indices, const VoxelConfig& cfg,
                            const Tensord& features) {
  VoxelSet<double> v;
  v.stage = stage;
  v.stride = stride;
  v.indices = std::move(indices);
  v.centers = voxel_centers<double>(v.indices, cfg, stride);
  v.features = t.constant(features);
  v.channels = features.cols();
  return v;
}

}  // namespace

TEST(VoxelConfig, DefaultGridDims) {
  VoxelConfig cfg;
  auto dims = cfg.grid_dims();
  EXPECT_EQ(dims[0], 1408);
  EXPECT_EQ(dims[1], 1600);
  EXPECT_EQ(dims[2], 40);
  auto d8 = cfg.dims_at(8);
  EXPECT_EQ(d8[0], 176);
  EXPECT_EQ(d8[1], 200);
  EXPECT_EQ(d8[2], 5);
}

TEST(VoxelConfig, RejectsNonDivisibleRange) {
  VoxelConfig cfg;
  cfg.range_max[0] = 70.41;
  EXPECT_THROW(cfg.grid_dims(), ContractError);
}

TEST(Voxelize, MeanOfPointsInOneVoxel) {
  auto cfg = test_config();
  auto cloud = cloud_from({{1.2, 1.3, 1.4, 0.2}, {1.8, 1.6, 1.1, 0.4}});
  RawVoxels<double> raw = voxelize_points(cloud, cfg);
  ASSERT_EQ(raw.indices.size(), 1u);
  EXPECT_EQ(raw.indices[0], (std::array<int, 3>{1, 1, 1}));
  EXPECT_NEAR(raw.mean_features.at(0, 3), 0.3, 1e-15);
  EXPECT_NEAR(raw.mean_features.at(0, 0), 1.5, 1e-15);
  EXPECT_DOUBLE_EQ(raw.centers.at(0, 0), 1.5);
}

TEST(Voxelize, HalfOpenIntervalDropsRangeMax) {
  auto cfg = test_config();
  auto cloud = cloud_from({{8.0, 4.0, 4.0, 0.5}, {4.0, 4.0, 4.0, 0.5}});
  RawVoxels<double> raw = voxelize_points(cloud, cfg);
  ASSERT_EQ(raw.indices.size(), 1u);
  EXPECT_EQ(raw.indices[0], (std::array<int, 3>{4, 4, 4}));
  // Range min is inside.
  auto at_min = cloud_from({{0.0, 0.0, 0.0, 1.0}});
  EXPECT_EQ(voxelize_points(at_min, cfg).indices.size(), 1u);
}

TEST(Voxelize, HandComputedFivePointCloud) {
  auto cfg = test_config();
  // Three voxels: (0,0,0) x2, (2,3,1) x2, (7,7,7) x1.
  auto cloud = cloud_from({{0.2, 0.8, 0.1, 0.0},
                           {0.9, 0.05, 0.3, 1.0},
                           {2.5, 3.5, 1.5, 0.5},
                           {2.01, 3.99, 1.01, 0.7},
                           {7.5, 7.5, 7.5, 0.9}});
  RawVoxels<double> raw = voxelize_points(cloud, cfg);
  ASSERT_EQ(raw.indices.size(), 3u);
  EXPECT_EQ(raw.indices[0], (std::array<int, 3>{0, 0, 0}));
  EXPECT_EQ(raw.indices[1], (std::array<int, 3>{2, 3, 1}));
  EXPECT_EQ(raw.indices[2], (std::array<int, 3>{7, 7, 7}));
  EXPECT_NEAR(raw.mean_features.at(0, 0), 0.55, 1e-15);
  EXPECT_NEAR(raw.mean_features.at(0, 3), 0.5, 1e-15);
  EXPECT_NEAR(raw.mean_features.at(1, 1), 3.745, 1e-12);
  EXPECT_DOUBLE_EQ(raw.centers.at(1, 0), 2.5);
  EXPECT_DOUBLE_EQ(raw.centers.at(1, 1), 3.5);
  EXPECT_DOUBLE_EQ(raw.centers.at(1, 2), 1.5);
}

TEST(Voxelize, EmptyFrameThrows) {
  auto cfg = test_config();
  auto cloud = cloud_from({{-1.0, 0.0, 0.0, 0.0}, {9.0, 9.0, 9.0, 0.0}});
  EXPECT_THROW(voxelize_points(cloud, cfg), ContractError);
  PointCloud<double> empty;
  EXPECT_THROW(voxelize_points(empty, cfg), ContractError);
}

TEST(Voxelize, PermutationInvariant) {
  auto cfg = test_config();
  Rng rng(50);
  PointCloud<double> cloud;
  for (int i = 0; i < 200; ++i)
    cloud.points.push_back({rng.uniform(0.0, 8.0), rng.uniform(0.0, 8.0), rng.uniform(0.0, 8.0),
                            rng.uniform(0.0, 1.0)});
  RawVoxels<double> a = voxelize_points(cloud, cfg);
  PointCloud<double> shuffled = cloud;
  for (std::size_t i = shuffled.points.size(); i > 1; --i)
    std::swap(shuffled.points[i - 1], shuffled.points[rng.next_below(i)]);
  RawVoxels<double> b = voxelize_points(shuffled, cfg);
  EXPECT_EQ(a.indices, b.indices);
  EXPECT_LT(max_abs_diff(a.mean_features, b.mean_features), 1e-12);
}

TEST(Voxelize, CentersMatchIndexFormulaAtEveryStage) {
  VoxelConfig cfg;  // default KITTI-style grid
  Rng rng(51);
  Tape<double> t;
  PointCloud<double> cloud;
  for (int i = 0; i < 500; ++i)
    cloud.points.push_back({rng.uniform(0.0, 70.0), rng.uniform(-39.0, 39.0),
                            rng.uniform(-2.9, 0.9), rng.uniform(0.0, 1.0)});
  VoxelSet<double> v = voxelize(t, cloud, cfg, identity_lift(t, 4));
  auto down_params = identity_lift(t, 4);
  for (int stage = 1; stage <= 4; ++stage) {
    Tensord expect = voxel_centers<double>(v.indices, cfg, v.stride);
    ASSERT_EQ(v.centers.numel(), expect.numel()) << "stage " << stage;
    for (std::size_t i = 0; i < expect.numel(); ++i)
      ASSERT_EQ(v.centers.data[i], expect.data[i])
          << "stage " << stage << " flat index " << i << " voxel index "
          << v.indices[i / 3][i % 3];
    if (stage < 4) v = downsample_stage(t, v, cfg, down_params);
  }
}

TEST(GroupMax, MaxOfEqualsAndGradient) {
  Tape<double> t;
  Tensord x({4, 2}, std::vector<double>{3.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0});
  Var out = group_max(t, t.constant(x), {0, 0, 0, 0}, 1);
  EXPECT_EQ(t.value(out).at(0, 0), 3.0);
  EXPECT_EQ(t.value(out).at(0, 1), 3.0);

  // Gradient routes to the arg max rows only.
  Rng rng(52);
  Tensord y = Tensord::uniform({6, 3}, rng, -1.0, 1.0);
  std::vector<std::size_t> groups{0, 1, 0, 1, 2, 2};
  std::vector<Tensord> in{y};
  auto fn = [&](Tape<double>& tt, const std::vector<Var>& v) {
    Var g = group_max(tt, v[0], groups, 3);
    return sum(tt, mul(tt, g, g));
  };
  EXPECT_LT(finite_diff_check<double>(fn, in, 1e-6), 1e-7);
}

TEST(GroupMax, EmptyGroupThrows) {
  Tape<double> t;
  Var x = t.constant(Tensord::full({2, 2}, 1.0));
  EXPECT_THROW(group_max(t, x, {0, 0}, 2), ContractError);
}

TEST(Downsample, EightChildrenMaxPool) {
  auto cfg = test_config();
  Tape<double> t;
  std::vector<std::array<int, 3>> idx;
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b)
      for (int c = 0; c < 2; ++c) idx.push_back({4 + a, 2 + b, 6 + c});
  VoxelSet<double> fine = make_stage(t, 1, 1, idx, cfg, Tensord::full({8, 3}, 2.25));
  VoxelSet<double> coarse = downsample_stage(t, fine, cfg, identity_lift(t, 3));
  ASSERT_EQ(coarse.size(), 1u);
  EXPECT_EQ(coarse.stage, 2);
  EXPECT_EQ(coarse.stride, 2);
  EXPECT_EQ(coarse.indices[0], (std::array<int, 3>{2, 1, 3}));
  for (std::size_t c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(t.value(coarse.features).at(0, c), 2.25);
}

TEST(Downsample, SingleVoxelHalvesIndex) {
  auto cfg = test_config();
  Tape<double> t;
  VoxelSet<double> fine = make_stage(t, 1, 1, {{5, 3, 7}}, cfg, Tensord::full({1, 2}, 1.0));
  VoxelSet<double> coarse = downsample_stage(t, fine, cfg, identity_lift(t, 2));
  ASSERT_EQ(coarse.size(), 1u);
  EXPECT_EQ(coarse.indices[0], (std::array<int, 3>{2, 1, 3}));
}

TEST(Downsample, MatchesGroupByParentOracle) {
  auto cfg = test_config();
  Rng rng(53);
  Tape<double> t;
  std::vector<std::array<int, 3>> idx;
  while (idx.size() < 50) {
    std::array<int, 3> cand{static_cast<int>(rng.next_below(8)),
                            static_cast<int>(rng.next_below(8)),
                            static_cast<int>(rng.next_below(8))};
    if (std::find(idx.begin(), idx.end(), cand) == idx.end()) idx.push_back(cand);
  }
  std::sort(idx.begin(), idx.end(), [&](const auto& a, const auto& b) {
    return linear_voxel_index(a, cfg.grid_dims()) < linear_voxel_index(b, cfg.grid_dims());
  });
  Tensord feats = Tensord::uniform({50, 3}, rng, -2.0, 2.0);
  VoxelSet<double> fine = make_stage(t, 1, 1, idx, cfg, feats);
  VoxelSet<double> coarse = downsample_stage(t, fine, cfg, identity_lift(t, 3));

  // Brute-force group-by-parent with per-channel max.
  std::map<std::array<int, 3>, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < idx.size(); ++i)
    groups[{idx[i][0] / 2, idx[i][1] / 2, idx[i][2] / 2}].push_back(i);
  ASSERT_EQ(coarse.size(), groups.size());
  EXPECT_LE(coarse.size(), fine.size());
  for (std::size_t g = 0; g < coarse.size(); ++g) {
    const auto it = groups.find(coarse.indices[g]);
    ASSERT_NE(it, groups.end());
    for (std::size_t c = 0; c < 3; ++c) {
      double want = -1e300;
      for (std::size_t row : it->second) want = std::max(want, feats.at(row, c));
      EXPECT_DOUBLE_EQ(t.value(coarse.features).at(g, c), want);
    }
  }
}

TEST(Upsample, ZeroCoarseGivesZeroContributions) {
  auto cfg = test_config();
  Rng rng(54);
  Tape<double> t;
  VoxelSet<double> fine =
      make_stage(t, 1, 1, {{0, 0, 0}, {1, 1, 1}, {3, 3, 3}}, cfg,
                 Tensord::uniform({3, 2}, rng, -1.0, 1.0));
  VoxelSet<double> coarse = make_stage(t, 2, 2, {{0, 0, 0}, {1, 1, 1}}, cfg,
                                       Tensord::zeros({2, 4}));
  ChannelMapParamsT<Var> up{t.constant(Tensord::uniform({4, 2}, rng, -1.0, 1.0))};
  Var out = upsample_scatter(t, coarse, fine, cfg, up);
  for (double v : t.value(out).data) EXPECT_EQ(v, 0.0);
}

TEST(Upsample, OneParentBroadcastsToAllChildren) {
  auto cfg = test_config();
  Rng rng(55);
  Tape<double> t;
  std::vector<std::array<int, 3>> idx;
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b)
      for (int c = 0; c < 2; ++c) idx.push_back({a, b, c});
  VoxelSet<double> fine = make_stage(t, 1, 1, idx, cfg, Tensord::uniform({8, 2}, rng, -1, 1));
  VoxelSet<double> coarse =
      make_stage(t, 2, 2, {{0, 0, 0}}, cfg, Tensord::uniform({1, 4}, rng, -1, 1));
  ChannelMapParamsT<Var> up{t.constant(Tensord::uniform({4, 2}, rng, -1.0, 1.0))};
  Var out = upsample_scatter(t, coarse, fine, cfg, up);
  for (std::size_t i = 1; i < 8; ++i)
    for (std::size_t c = 0; c < 2; ++c)
      EXPECT_EQ(t.value(out).at(i, c), t.value(out).at(0, c));
}

TEST(Upsample, MatchesParentLookupOracle) {
  auto cfg = test_config();
  Rng rng(56);
  Tape<double> t;
  // Build a two-stage hierarchy through downsample_stage, then check against
  // an explicit parent lookup.
  std::vector<std::array<int, 3>> idx;
  while (idx.size() < 30) {
    std::array<int, 3> cand{static_cast<int>(rng.next_below(8)),
                            static_cast<int>(rng.next_below(8)),
                            static_cast<int>(rng.next_below(8))};
    if (std::find(idx.begin(), idx.end(), cand) == idx.end()) idx.push_back(cand);
  }
  std::sort(idx.begin(), idx.end(), [&](const auto& a, const auto& b) {
    return linear_voxel_index(a, cfg.grid_dims()) < linear_voxel_index(b, cfg.grid_dims());
  });
  VoxelSet<double> fine = make_stage(t, 1, 1, idx, cfg, Tensord::uniform({30, 3}, rng, -1, 1));
  VoxelSet<double> coarse = downsample_stage(t, fine, cfg, identity_lift(t, 3));
  Tensord w = Tensord::uniform({3, 3}, rng, -1.0, 1.0);
  ChannelMapParamsT<Var> up{t.constant(w)};
  Var out = upsample_scatter(t, coarse, fine, cfg, up);
  for (std::size_t i = 0; i < fine.size(); ++i) {
    std::array<int, 3> parent{fine.indices[i][0] / 2, fine.indices[i][1] / 2,
                              fine.indices[i][2] / 2};
    std::size_t prow = coarse.size();
    for (std::size_t j = 0; j < coarse.size(); ++j)
      if (coarse.indices[j] == parent) prow = j;
    ASSERT_LT(prow, coarse.size());
    for (std::size_t c = 0; c < 3; ++c) {
      double want = 0.0;
      for (std::size_t k = 0; k < 3; ++k)
        want += t.value(coarse.features).at(prow, k) * w.at(k, c);
      EXPECT_NEAR(t.value(out).at(i, c), want, 1e-12);
    }
  }
}

TEST(Upsample, OrphanFineVoxelThrows) {
  auto cfg = test_config();
  Tape<double> t;
  VoxelSet<double> fine =
      make_stage(t, 1, 1, {{0, 0, 0}, {6, 6, 6}}, cfg, Tensord::full({2, 2}, 1.0));
  VoxelSet<double> coarse = make_stage(t, 2, 2, {{0, 0, 0}}, cfg, Tensord::full({1, 2}, 1.0));
  ChannelMapParamsT<Var> up{t.constant(Tensord::identity(2))};
  EXPECT_THROW(upsample_scatter(t, coarse, fine, cfg, up), ContractError);
}

namespace {

// Four-stage chain over random voxels with random features; shared by the
// pyramid tests.
struct Chain {
  Tape<double> tape;
  VoxelConfig cfg = test_config();
  std::array<VoxelSet<double>, 4> stages;

  explicit Chain(std::uint64_t seed, std::size_t channels = 3) {
    Rng rng(seed);
    std::vector<std::array<int, 3>> idx;
    while (idx.size() < 40) {
      std::array<int, 3> cand{static_cast<int>(rng.next_below(8)),
                              static_cast<int>(rng.next_below(8)),
                              static_cast<int>(rng.next_below(8))};
      if (std::find(idx.begin(), idx.end(), cand) == idx.end()) idx.push_back(cand);
    }
    std::sort(idx.begin(), idx.end(), [&](const auto& a, const auto& b) {
      return linear_voxel_index(a, cfg.grid_dims()) < linear_voxel_index(b, cfg.grid_dims());
    });
    Tensord feats = Tensord::uniform({40, channels}, rng, -1.0, 1.0);
    stages[0].stage = 1;
    stages[0].stride = 1;
    stages[0].indices = idx;
    stages[0].centers = voxel_centers<double>(idx, cfg, 1);
    stages[0].features = tape.constant(feats);
    stages[0].channels = channels;
    LinearParamsT<Var> down{tape.constant(Tensord::identity(channels)),
                            tape.constant(Tensord::zeros({channels}))};
    for (int j = 0; j < 3; ++j) stages[j + 1] = downsample_stage(tape, stages[j], cfg, down);
  }
};

}  // namespace

TEST(Pyramid, ZeroDeeperFeaturesIsAdditiveIdentity) {
  Chain chain(57);
  auto& t = chain.tape;
  // Zero out stages 2..4.
  for (int j = 1; j < 4; ++j)
    chain.stages[j].features =
        t.constant(Tensord::zeros(t.value(chain.stages[j].features).shape));
  Rng rng(58);
  PyramidParamsT<Tensord> pp = init_pyramid_params<double>(rng, {3, 3, 3, 3});
  PyramidParamsT<Var> ppv = lift(t, pp, false);
  auto out = pyramid_fuse(t, chain.stages, chain.cfg, ppv);
  EXPECT_EQ(t.value(out[0].features).data, t.value(chain.stages[0].features).data);
  for (int j = 0; j < 4; ++j) EXPECT_EQ(out[j].size(), chain.stages[j].size());
}

TEST(Pyramid, ZeroLateralsIsExactIdentity) {
  Chain chain(59);
  auto& t = chain.tape;
  PyramidParamsT<Var> ppv;
  for (int j = 0; j < 3; ++j) ppv.lateral[j].w = t.constant(Tensord::zeros({3, 3}));
  auto out = pyramid_fuse(t, chain.stages, chain.cfg, ppv);
  for (int j = 0; j < 4; ++j)
    EXPECT_EQ(t.value(out[j].features).data, t.value(chain.stages[j].features).data);
}

TEST(Pyramid, StructurePreserved) {
  Chain chain(60);
  auto& t = chain.tape;
  Rng rng(61);
  PyramidParamsT<Var> ppv = lift(t, init_pyramid_params<double>(rng, {3, 3, 3, 3}), false);
  auto out = pyramid_fuse(t, chain.stages, chain.cfg, ppv);
  for (int j = 0; j < 4; ++j) {
    EXPECT_EQ(out[j].stage, j + 1);
    EXPECT_EQ(out[j].size(), chain.stages[j].size());
    EXPECT_EQ(out[j].indices, chain.stages[j].indices);
  }
  // Stage 4 passes through untouched.
  EXPECT_EQ(t.value(out[3].features).data, t.value(chain.stages[3].features).data);
}

TEST(Pyramid, TwoStageToyMatchesHandUnrolledAdd) {
  auto cfg = test_config();
  Tape<double> t;
  Rng rng(62);
  // Two children under one parent plus a lone voxel elsewhere.
  VoxelSet<double> s1 = make_stage(t, 1, 1, {{0, 0, 0}, {1, 1, 1}, {4, 4, 4}}, cfg,
                                   Tensord::uniform({3, 2}, rng, -1, 1));
  LinearParamsT<Var> down{t.constant(Tensord::identity(2)), t.constant(Tensord::zeros({2}))};
  VoxelSet<double> s2 = downsample_stage(t, s1, cfg, down);
  Tensord w = Tensord::uniform({2, 2}, rng, -1.0, 1.0);
  ChannelMapParamsT<Var> lat{t.constant(w)};
  Var up = upsample_scatter(t, s2, s1, cfg, lat);
  Var fused = add(t, s1.features, up);
  for (std::size_t i = 0; i < 3; ++i) {
    std::array<int, 3> parent{s1.indices[i][0] / 2, s1.indices[i][1] / 2, s1.indices[i][2] / 2};
    std::size_t prow = 0;
    for (std::size_t j = 0; j < s2.size(); ++j)
      if (s2.indices[j] == parent) prow = j;
    for (std::size_t c = 0; c < 2; ++c) {
      double lateral = 0.0;
      for (std::size_t k = 0; k < 2; ++k)
        lateral += t.value(s2.features).at(prow, k) * w.at(k, c);
      EXPECT_NEAR(t.value(fused).at(i, c), t.value(s1.features).at(i, c) + lateral, 1e-12);
    }
  }
}

TEST(Pyramid, ParameterCountIsOnlyTheChannelMaps) {
  Rng rng(63);
  std::array<std::size_t, 4> ch{16, 32, 64, 64};
  PyramidParamsT<Tensord> pp = init_pyramid_params<double>(rng, ch);
  std::size_t want = 0;
  for (int j = 0; j < 3; ++j) want += ch[j + 1] * ch[j];
  EXPECT_EQ(parameter_count(pp), want);
}

TEST(Pyramid, TiedParamsAreTransposedDownsampleWeights) {
  Rng rng(64);
  std::array<LinearParamsT<Tensord>, 3> down;
  std::array<std::size_t, 4> ch{4, 8, 16, 16};
  for (int j = 0; j < 3; ++j) down[j] = init_linear<double>(rng, ch[j], ch[j + 1]);
  PyramidParamsT<Tensord> tied = tied_pyramid_params<double>(down);
  for (int j = 0; j < 3; ++j) {
    EXPECT_EQ(tied.lateral[j].w.shape, (std::vector<std::size_t>{ch[j + 1], ch[j]}));
    EXPECT_EQ(tied.lateral[j].w.data, transpose(down[j].w).data);
  }
}

TEST(Downsample, GradientFlowsThroughPoolAndLinear) {
  auto cfg = test_config();
  Rng rng(65);
  std::vector<std::array<int, 3>> idx{{0, 0, 0}, {1, 0, 0}, {4, 4, 4}, {5, 5, 5}};
  Tensord feats = Tensord::uniform({4, 3}, rng, -1.0, 1.0);
  LinearParamsT<Tensord> lin = init_linear<double>(rng, 3, 2);
  std::vector<Tensord> in{feats, lin.w, lin.b};
  auto fn = [&](Tape<double>& t, const std::vector<Var>& v) {
    VoxelSet<double> fine;
    fine.stage = 1;
    fine.stride = 1;
    fine.indices = idx;
    fine.centers = voxel_centers<double>(idx, cfg, 1);
    fine.features = v[0];
    fine.channels = 3;
    LinearParamsT<Var> p{v[1], v[2]};
    VoxelSet<double> coarse = downsample_stage(t, fine, cfg, p);
    return sum(t, mul(t, coarse.features, coarse.features));
  };
  EXPECT_LT(finite_diff_check<double>(fn, in, 1e-6), 1e-7);
}
