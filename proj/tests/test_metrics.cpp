#include <gtest/gtest.h>

#include <random>

#include "support.hpp"

using namespace occfuse;

namespace {

const Taxonomy& tax() {
  static const Taxonomy t = Taxonomy::occ3d_nuscenes();
  return t;
}

constexpr ClassId kCar = 4, kDrive = 11, kManmade = 15, kVeg = 16;

OccupancyGrid empty(int n = 10) { return OccupancyGrid(testkit::cube_spec(n), tax().free_id()); }

void put(OccupancyGrid& g, int i, int j, int k, ClassId c, InstanceId id = 0) {
  const std::size_t v = g.spec.linear(i, j, k);
  g.sem[v] = c;
  g.inst[v] = id;
}

RayHit hit(ClassId c, InstanceId id, double depth) { return RayHit{true, {}, c, id, depth}; }

}  // namespace

TEST(CastRay, EmptyGridMisses) {
  const auto g = empty();
  EXPECT_FALSE(cast_ray(g, tax(), Vec3(2, 2, 2), Vec3(1, 0, 0)).hit);
  EXPECT_FALSE(cast_ray(g, tax(), Vec3(-5, 2, 2), Vec3(-1, 0, 0)).hit);
}

TEST(CastRay, DepthIsEntryDistance) {
  auto g = empty();
  put(g, 9, 0, 0, kManmade);  // spans x in [3.6, 4.0)
  put(g, 0, 5, 0, kCar, 3);
  const auto h = cast_ray(g, tax(), Vec3(0.0, 0.2, 0.2), Vec3(1, 0, 0));
  ASSERT_TRUE(h.hit);
  EXPECT_EQ(h.voxel, (VoxelIndex{9, 0, 0}));
  EXPECT_EQ(h.class_id, kManmade);
  EXPECT_NEAR(h.depth, 3.6, 1e-12);

  const auto c = cast_ray(g, tax(), Vec3(0.2, 0.1, 0.2), Vec3(0, 1, 0));
  ASSERT_TRUE(c.hit);
  EXPECT_EQ(c.instance_id, 3u);
  EXPECT_NEAR(c.depth, 1.9, 1e-12);
}

TEST(CastRay, OriginVoxelIsSkipped) {
  auto g = empty();
  put(g, 0, 0, 0, kManmade);
  put(g, 2, 0, 0, kVeg);
  const auto h = cast_ray(g, tax(), Vec3(0.2, 0.2, 0.2), Vec3(1, 0, 0));
  ASSERT_TRUE(h.hit);
  EXPECT_EQ(h.class_id, kVeg);
  EXPECT_NEAR(h.depth, 0.6, 1e-12);
}

TEST(CastRay, OutsideOriginStartsAtEntry) {
  auto g = empty();
  put(g, 0, 1, 1, kManmade);
  const auto h = cast_ray(g, tax(), Vec3(-2.0, 0.6, 0.6), Vec3(1, 0, 0));
  ASSERT_TRUE(h.hit);
  EXPECT_NEAR(h.depth, 2.0, 1e-12);
}

TEST(CastRay, IgnoreVoxelsBlockRays) {
  auto g = empty();
  put(g, 3, 0, 0, tax().ignore_id());
  const auto h = cast_ray(g, tax(), Vec3(0.2, 0.2, 0.2), Vec3(1, 0, 0));
  ASSERT_TRUE(h.hit);
  EXPECT_EQ(h.class_id, tax().ignore_id());
}

TEST(CastRay, MatchesMarchingOracle) {
  std::mt19937 rng(77);
  std::uniform_real_distribution<double> u(0.0, 4.0), n(-1.0, 1.0);
  for (int grid = 0; grid < 3; ++grid) {
    auto g = empty();
    for (std::size_t v = 0; v < g.size(); ++v)
      if (rng() % 12 == 0) g.sem[v] = static_cast<ClassId>(rng() % 17);
    for (int r = 0; r < 40; ++r) {
      const Vec3 o(u(rng), u(rng), u(rng));
      Vec3 d(n(rng), n(rng), n(rng));
      d.normalize();
      const auto h = cast_ray(g, tax(), o, d);
      const auto m = testkit::march_ray(g, tax(), o, d, 8.0);
      ASSERT_EQ(h.hit, m.hit);
      if (!h.hit) continue;
      EXPECT_EQ((std::array<int, 3>{h.voxel.i, h.voxel.j, h.voxel.k}), m.cell);
      EXPECT_NEAR(h.depth, m.depth, 1e-6);
    }
  }
}

TEST(SphericalRays, Layout) {
  const auto rs = spherical_ray_set(Vec3(0, 0, 1), 10.0, 4);
  EXPECT_EQ(rs.directions.size(), 36u * 4u);
  for (const auto& d : rs.directions) EXPECT_NEAR(d.norm(), 1.0, 1e-12);
  EXPECT_NEAR(rs.directions.front().z(), std::sin(-30.0 * std::numbers::pi / 180.0), 1e-12);
}

TEST(MIoU, IdentityAndAllFree) {
  std::mt19937 rng(5);
  auto gt = empty(8);
  for (std::size_t v = 0; v < gt.size(); ++v)
    if (rng() % 3 == 0) gt.sem[v] = static_cast<ClassId>(rng() % 17);
  const auto same = miou(gt, gt, tax());
  EXPECT_DOUBLE_EQ(same.mean, 1.0);
  EXPECT_DOUBLE_EQ(iou_occ(gt, gt, tax()), 1.0);

  const auto none = miou(empty(8), gt, tax());
  EXPECT_DOUBLE_EQ(none.mean, 0.0);
  EXPECT_DOUBLE_EQ(iou_occ(empty(8), gt, tax()), 0.0);
}

TEST(MIoU, HandCounts) {
  auto gt = empty(4), pred = empty(4);
  put(gt, 0, 0, 0, kCar);
  put(gt, 1, 0, 0, kCar);
  put(pred, 1, 0, 0, kCar);
  put(pred, 2, 0, 0, kCar);
  put(gt, 3, 3, 3, kVeg);
  put(pred, 3, 3, 3, kVeg);
  const auto r = miou(pred, gt, tax());
  EXPECT_DOUBLE_EQ(*r.per_class[kCar], 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(*r.per_class[kVeg], 1.0);
  EXPECT_FALSE(r.per_class[kDrive]);
  EXPECT_DOUBLE_EQ(r.mean, (1.0 / 3.0 + 1.0) / 2.0);
  EXPECT_DOUBLE_EQ(iou_occ(pred, gt, tax()), 2.0 / 4.0);

  // Disjoint occupancy.
  auto a = empty(4), b = empty(4);
  put(a, 0, 0, 0, kCar);
  put(b, 1, 0, 0, kCar);
  EXPECT_DOUBLE_EQ(iou_occ(a, b, tax()), 0.0);
}

TEST(MIoU, MatchesCountingOracle) {
  std::mt19937 rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    auto gt = empty(6), pred = empty(6);
    for (std::size_t v = 0; v < gt.size(); ++v) {
      if (rng() % 2) gt.sem[v] = static_cast<ClassId>(rng() % 5 + 11);
      if (rng() % 2) pred.sem[v] = static_cast<ClassId>(rng() % 5 + 11);
      if (rng() % 20 == 0) pred.sem[v] = tax().ignore_id();
    }
    std::map<ClassId, std::pair<int, int>> c;  // class -> (intersection, union)
    for (std::size_t v = 0; v < gt.size(); ++v) {
      for (ClassId k = 0; k < 17; ++k) {
        const bool p = pred.sem[v] == k, t = gt.sem[v] == k;
        if (p && t) ++c[k].first;
        if (p || t) ++c[k].second;
      }
    }
    double sum = 0;
    int n = 0;
    for (const auto& [k, iu] : c) {
      if (tax().is_excluded(k) || iu.second == 0) continue;
      sum += static_cast<double>(iu.first) / iu.second;
      ++n;
    }
    EXPECT_NEAR(miou(pred, gt, tax()).mean, sum / n, 1e-12);
  }
}

TEST(MIoU, MaskRestrictsEvaluation) {
  auto gt = empty(4), pred = empty(4);
  put(gt, 0, 0, 0, kCar);
  put(pred, 1, 0, 0, kCar);
  put(gt, 2, 0, 0, kCar);
  put(pred, 2, 0, 0, kCar);
  std::vector<std::uint8_t> mask(gt.size(), 0);
  mask[gt.spec.linear(2, 0, 0)] = 1;
  EXPECT_DOUBLE_EQ(miou(pred, gt, tax(), &mask).mean, 1.0);
}

TEST(Metrics, SpecMismatchIsAnError) {
  EXPECT_THROW(miou(empty(4), empty(5), tax()), ValidationError);
  EXPECT_THROW(rayiou(empty(4), empty(5), tax(), spherical_ray_set()), ValidationError);
}

TEST(RayIoU, DisplacedWallMatchesOnlyLooseThresholds) {
  // Wall at x voxel 7 in GT and 3 in the prediction: 1.6 m depth error.
  auto gt = empty(), pred = empty();
  for (int j = 0; j < 10; ++j)
    for (int k = 0; k < 10; ++k) {
      put(gt, 7, j, k, kManmade);
      put(pred, 3, j, k, kManmade);
    }
  RaySet rs{Vec3(0.2, 2.0, 2.0), {}};
  for (int a = -20; a <= 20; a += 5)
    rs.directions.push_back(Vec3(std::cos(a * std::numbers::pi / 180), std::sin(a * std::numbers::pi / 180), 0));
  const auto r = rayiou(pred, gt, tax(), rs);
  ASSERT_EQ(r.per_threshold.size(), 3u);
  EXPECT_DOUBLE_EQ(r.per_threshold[0], 0.0);
  EXPECT_DOUBLE_EQ(r.per_threshold[1], 1.0);
  EXPECT_DOUBLE_EQ(r.per_threshold[2], 1.0);
  EXPECT_DOUBLE_EQ(r.mean, 2.0 / 3.0);
}

TEST(RayIoU, HandCounts) {
  const ClassId excluded = *tax().eval_excluded().begin();
  RayIoUCounts c(default_depth_thresholds(), tax().classes().size());
  // gt/pred pairs: match, depth miss at 1 m, class mismatch, pred-only hit, gt-only hit,
  // and a ray with an excluded GT class that is dropped.
  c.add({hit(kCar, 0, 5.0), hit(kCar, 0, 6.5), hit(kVeg, 0, 3.0), hit(kCar, 0, 2.0), RayHit{}, hit(kCar, 0, 1.0)},
        {hit(kCar, 0, 5.0), hit(kCar, 0, 5.0), hit(kCar, 0, 3.0), RayHit{}, hit(kCar, 0, 4.0), hit(excluded, 0, 1.0)},
        tax());
  const auto r = rayiou_from_counts(c, tax());
  // car at 1 m: tp 1, gt 4, pred 3 -> 1/6; veg: tp 0, pred 1 -> 0.
  EXPECT_DOUBLE_EQ(*r.per_class[0][kCar], 1.0 / 6.0);
  EXPECT_DOUBLE_EQ(*r.per_class[1][kCar], 2.0 / 5.0);
  EXPECT_DOUBLE_EQ(*r.per_class[0][kVeg], 0.0);
  EXPECT_FALSE(r.per_class[0][excluded]);
  EXPECT_DOUBLE_EQ(r.per_threshold[0], (1.0 / 6.0) / 2.0);
}

TEST(RayPQ, IdentityIsPerfect) {
  auto g = empty();
  for (int j = 0; j < 10; ++j)
    for (int k = 0; k < 10; ++k) put(g, 8, j, k, kManmade);
  for (int j = 3; j < 6; ++j) put(g, 5, j, 2, kCar, 1);
  const auto rs = spherical_ray_set(Vec3(0.2, 2.0, 1.0), 2.0, 8, -20, 20);
  const auto r = raypq(g, g, tax(), rs);
  for (double v : r.per_threshold) EXPECT_DOUBLE_EQ(v, 1.0);
  EXPECT_DOUBLE_EQ(*r.per_class[0][kCar], 1.0);
}

TEST(RayPQ, EqualSplitIsNotAMatch) {
  RayPQCounts c({1.0}, tax().classes().size());
  std::vector<RayHit> gt(4, hit(kCar, 1, 5.0));
  std::vector<RayHit> pred{hit(kCar, 1, 5.0), hit(kCar, 1, 5.0), hit(kCar, 2, 5.0), hit(kCar, 2, 5.0)};
  c.add(pred, gt, tax());
  EXPECT_EQ(c.tp[0][kCar], 0u);
  EXPECT_EQ(c.fp[0][kCar], 2u);
  EXPECT_EQ(c.fn[0][kCar], 1u);
  EXPECT_DOUBLE_EQ(*raypq_from_counts(c, tax()).per_class[0][kCar], 0.0);

  // Three of four rays: IoU 0.75 matches; the remaining one-ray segment is a false positive.
  RayPQCounts d({1.0}, tax().classes().size());
  pred[1] = hit(kCar, 2, 5.0);
  pred[0] = hit(kCar, 7, 5.0);
  d.add(pred, gt, tax());
  EXPECT_EQ(d.tp[0][kCar], 1u);
  EXPECT_EQ(d.fp[0][kCar], 1u);
  EXPECT_EQ(d.fn[0][kCar], 0u);
  EXPECT_DOUBLE_EQ(*raypq_from_counts(d, tax()).per_class[0][kCar], 0.75 / 1.5);
}

TEST(RayPQ, StuffSegmentsIgnoreInstanceIds) {
  RayPQCounts c({1.0}, tax().classes().size());
  c.add({hit(kDrive, stuff_instance_id(kDrive), 3.0), hit(kDrive, 99, 3.0)},
        {hit(kDrive, stuff_instance_id(kDrive), 3.0), hit(kDrive, stuff_instance_id(kDrive), 3.0)}, tax());
  EXPECT_EQ(c.tp[0][kDrive], 1u);
  EXPECT_EQ(c.fp[0][kDrive], 0u);
}

TEST(MetricSuite, AccumulatesAcrossSamples) {
  auto a = empty(4), b = empty(4);
  put(a, 0, 0, 0, kCar);
  put(b, 1, 0, 0, kCar);
  const RaySet rs = spherical_ray_set(Vec3(0.8, 0.8, 0.8), 30.0, 3);
  MetricSuite m(tax());
  m.add(a, a, tax(), rs);
  m.add(b, a, tax(), rs);
  const auto s = summarize(m, tax());
  // Car: intersection 1, union 1 + 2.
  EXPECT_DOUBLE_EQ(*s.miou.per_class[kCar], 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(s.iou_occ, 1.0 / 3.0);
}
