#include <gtest/gtest.h>

#include <random>

#include "support.hpp"

using namespace occfuse;

namespace {

const Taxonomy& tax() {
  static const Taxonomy t = Taxonomy::occ3d_nuscenes();
  return t;
}

constexpr ClassId kCar = 4, kDrive = 11, kSidewalk = 13, kTerrain = 14, kManmade = 15, kVeg = 16;

// 7^3 grid of free voxels; the fixture voxel is the center (3, 3, 3).
struct Fixture {
  OccupancyGrid g{testkit::cube_spec(7), tax().free_id()};
  Lattice L = g.spec.lattice();

  std::size_t at(int di, int dj, int dk) const { return L.linear(3 + di, 3 + dj, 3 + dk); }

  void set(int di, int dj, int dk, ClassId c, InstanceId id = 0, float conf = 0.5f, float p_occ = 0.3f) {
    const std::size_t v = at(di, dj, dk);
    g.sem[v] = c;
    g.inst[v] = id;
    g.conf[v] = conf;
    g.p_occ[v] = p_occ;
  }

  // Assigns classes to the listed offsets in order, `counts[i]` voxels of `classes[i]`.
  void fill(const std::vector<std::array<int, 3>>& offsets, const std::vector<std::pair<ClassId, int>>& counts) {
    std::size_t o = 0;
    for (const auto& [c, n] : counts)
      for (int i = 0; i < n; ++i, ++o) set(offsets.at(o)[0], offsets.at(o)[1], offsets.at(o)[2], c);
    ASSERT_EQ(o, offsets.size());
  }

  ClassId center() const { return g.sem[at(0, 0, 0)]; }
};

std::vector<std::array<int, 3>> all_neighbors() {
  std::vector<std::array<int, 3>> out;
  for (int a = -1; a <= 1; ++a)
    for (int b = -1; b <= 1; ++b)
      for (int c = -1; c <= 1; ++c)
        if (a || b || c) out.push_back({a, b, c});
  return out;
}

// Neighbors on one side only, so closing never reaches the center.
std::vector<std::array<int, 3>> one_sided(int n) {
  std::vector<std::array<int, 3>> out;
  for (int a = -1; a <= 1; ++a)
    for (int b = -1; b <= 1; ++b) out.push_back({a, b, -1});
  out.push_back({-1, 0, 0});
  out.push_back({-1, -1, 0});
  out.push_back({-1, 1, 0});
  out.resize(static_cast<std::size_t>(n));
  return out;
}

RefineConfig only(int stage) {
  RefineConfig c;
  c.fill = stage == 1;
  c.warmup = stage == 2;
  c.coherence = stage == 3;
  c.cleanup = stage == 4;
  return c;
}

}  // namespace

TEST(Neighborhood, Examples) {
  Fixture f;
  for (const auto& o : all_neighbors()) f.set(o[0], o[1], o[2], kCar);
  auto s = neighborhood_stats(f.g, tax(), 3, 3, 3);
  EXPECT_EQ(s.modal, kCar);
  EXPECT_EQ(s.modal_support, 26);
  EXPECT_EQ(s.n_occ, 26);

  Fixture empty;
  s = neighborhood_stats(empty.g, tax(), 3, 3, 3);
  EXPECT_FALSE(s.modal);
  EXPECT_EQ(s.n_occ, 0);

  Fixture tie;
  tie.fill(all_neighbors(), {{kSidewalk, 13}, {kDrive, 13}});
  s = neighborhood_stats(tie.g, tax(), 3, 3, 3);
  EXPECT_EQ(s.modal, kDrive);
  EXPECT_EQ(s.modal_support, 13);

  // Corner voxel: truncated neighborhood of 7 cells, ignore does not count.
  Fixture corner;
  corner.g.sem[corner.L.linear(1, 0, 0)] = kVeg;
  corner.g.sem[corner.L.linear(0, 1, 0)] = tax().ignore_id();
  s = neighborhood_stats(corner.g, tax(), 0, 0, 0);
  EXPECT_EQ(s.n_occ, 1);
}

TEST(Neighborhood, TieBreakMatchesBruteForce) {
  std::mt19937 rng(42);
  for (int trial = 0; trial < 200; ++trial) {
    Fixture f;
    std::map<ClassId, int> count;
    for (const auto& o : all_neighbors()) {
      if (rng() % 3 == 0) continue;
      const ClassId c = static_cast<ClassId>(rng() % 4 + 11);
      f.set(o[0], o[1], o[2], c);
      ++count[c];
    }
    std::optional<ClassId> best;
    int best_n = 0, total = 0;
    for (const auto& [c, n] : count) {
      total += n;
      if (n > best_n) {
        best_n = n;
        best = c;
      }
    }
    const auto s = neighborhood_stats(f.g, tax(), 3, 3, 3);
    EXPECT_EQ(s.modal, best);
    EXPECT_EQ(s.modal_support, best_n);
    EXPECT_EQ(s.n_occ, total);
  }
}

TEST(Fill, EnclosedPinholeFilled) {
  Fixture f;
  for (const auto& o : all_neighbors()) f.set(o[0], o[1], o[2], kDrive);
  const auto out = fill_pinholes_and_cavities(f.g, tax());
  EXPECT_EQ(out.sem[f.at(0, 0, 0)], kDrive);
  EXPECT_EQ(out.inst[f.at(0, 0, 0)], stuff_instance_id(kDrive));
}

TEST(Fill, PinholeSupportEdge) {
  Fixture four;
  four.fill(all_neighbors(), {{1, 4}, {2, 3}, {3, 3}, {5, 3}, {6, 3}, {8, 3}, {9, 3}, {10, 2}, {12, 2}});
  EXPECT_TRUE(close_occupied_mask(four.g, tax())[four.at(0, 0, 0)]);
  EXPECT_EQ(fill_pinholes_and_cavities(four.g, tax()).sem[four.at(0, 0, 0)], 1);

  Fixture three;
  three.fill(all_neighbors(), {{1, 3}, {2, 3}, {3, 3}, {5, 3}, {6, 3}, {8, 3}, {9, 3}, {10, 3}, {12, 2}});
  EXPECT_EQ(fill_pinholes_and_cavities(three.g, tax()).sem[three.at(0, 0, 0)], tax().free_id());
}

TEST(Fill, IsolatedVoxelWithThreeNeighborsUnchanged) {
  Fixture f;
  f.set(1, 0, 0, kManmade);
  f.set(-1, 0, 0, kManmade);
  f.set(0, 1, 0, kManmade);
  EXPECT_EQ(fill_pinholes_and_cavities(f.g, tax()).sem[f.at(0, 0, 0)], tax().free_id());
}

TEST(Fill, CavityEdges) {
  auto run = [](int n_occ, int support) {
    Fixture f;
    const auto offs = one_sided(n_occ);
    const int rest = n_occ - support;
    f.fill(offs, {{kManmade, support}, {kSidewalk, (rest + 1) / 2}, {kTerrain, rest / 2}});
    EXPECT_FALSE(close_occupied_mask(f.g, tax())[f.at(0, 0, 0)]);
    const auto s = neighborhood_stats(f.g, tax(), 3, 3, 3);
    EXPECT_EQ(s.n_occ, n_occ);
    EXPECT_EQ(s.modal_support, support);
    return fill_pinholes_and_cavities(f.g, tax()).sem[f.at(0, 0, 0)];
  };
  EXPECT_EQ(run(10, 5), kManmade);
  EXPECT_EQ(run(9, 5), tax().free_id());
  EXPECT_EQ(run(10, 4), tax().free_id());
}

TEST(Fill, TwoVoxelCavityInWall) {
  // Solid 5x3x5 manmade wall with two adjacent free voxels inside.
  Fixture f;
  for (int a = -2; a <= 2; ++a)
    for (int b = -1; b <= 1; ++b)
      for (int c = -2; c <= 2; ++c) f.set(a, b, c, kManmade);
  f.set(0, 0, 0, tax().free_id());
  f.set(1, 0, 0, tax().free_id());
  EXPECT_EQ(neighborhood_stats(f.g, tax(), 3, 3, 3).modal_support, 25);
  const auto out = fill_pinholes_and_cavities(f.g, tax());
  EXPECT_EQ(out.sem[f.at(0, 0, 0)], kManmade);
  EXPECT_EQ(out.sem[f.at(1, 0, 0)], kManmade);
}

TEST(Warmup, Examples) {
  GridSpec spec;
  spec.min = {-40, -2, -2};
  spec.max = {40, 2, 2};
  OccupancyGrid g(spec, tax().free_id());
  const Lattice L = spec.lattice();
  const int k = ground_layer(spec);
  ASSERT_EQ(k, 5);
  const auto vi = [&](double x, double y) { return voxel_index(spec, Vec3(x, y, spec.z0 + 0.1)).value(); };
  const auto lin = [&](VoxelIndex v) { return L.linear(v.i, v.j, v.k); };

  // Driveable strip near the ego and at 30 m.
  for (double x : {0.2, 0.6, 30.2, 30.6}) g.sem[lin(vi(x, 0.2))] = kDrive;
  // A car voxel one layer up, next to a second unknown voxel.
  const auto car = vi(-1.8, 0.2);
  g.sem[L.linear(car.i, car.j, car.k + 1)] = kCar;
  g.sem[lin(vi(-1.4, 0.2))] = kDrive;

  const auto out = warmup_ego_completion(g, tax());
  EXPECT_EQ(out.sem[lin(vi(1.0, 0.2))], kDrive);     // next to driveable, nothing nearby
  EXPECT_EQ(out.sem[lin(vi(1.0, 1.0))], kDrive);     // within the planar radius of 2
  EXPECT_EQ(out.sem[lin(vi(1.8, 0.2))], tax().free_id());   // 3 voxels from driveable
  EXPECT_EQ(out.sem[lin(vi(-1.8, 0.2))], tax().free_id());  // adjacent to the car voxel
  EXPECT_EQ(out.sem[lin(vi(31.0, 0.2))], tax().free_id());  // beyond the ego radius
  EXPECT_FLOAT_EQ(out.conf[lin(vi(1.0, 0.2))], 1.0f / 17.0f);
  // Layers outside the near-ground band are untouched.
  const auto up = vi(1.0, 0.2);
  EXPECT_EQ(out.sem[L.linear(up.i, up.j, up.k + 3)], tax().free_id());
}

TEST(Coherence, Edges) {
  auto run = [](int support, int others, float conf, float p_occ, ClassId center = kTerrain) {
    Fixture f;
    f.set(0, 0, 0, center, 0, conf, p_occ);
    std::vector<std::array<int, 3>> offs = all_neighbors();
    offs.resize(static_cast<std::size_t>(support + others));
    std::vector<std::pair<ClassId, int>> counts = {{kSidewalk, support}};
    const ClassId pool[] = {kManmade, kVeg, kDrive, 0, 1, 2, 3, 5, 6};
    for (int i = 0; i < others; ++i) counts.push_back({pool[i % 9], 1});
    f.fill(offs, counts);
    return coherence_pass(f.g, tax()).sem[f.at(0, 0, 0)];
  };
  EXPECT_EQ(run(5, 3, 0.5f, 0.3f), kSidewalk);        // 5 >= 0.6 * 8
  EXPECT_EQ(run(10, 2, 0.5f, 0.3f), kSidewalk);       // 10 of 12
  EXPECT_EQ(run(4, 0, 0.5f, 0.3f), kTerrain);         // support below 5
  EXPECT_EQ(run(5, 4, 0.5f, 0.3f), kTerrain);         // 5 < 0.6 * 9
  EXPECT_EQ(run(10, 2, 0.75f, 0.3f), kTerrain);       // frozen by confidence
  EXPECT_EQ(run(10, 2, 0.7499f, 0.3f), kSidewalk);
  EXPECT_EQ(run(10, 2, 0.5f, 0.85f), kTerrain);       // frozen by support
  EXPECT_EQ(run(10, 2, 0.5f, 0.8499f), kSidewalk);
  EXPECT_EQ(run(10, 2, 0.5f, 0.3f, kCar), kCar);      // thing classes are protected
  EXPECT_EQ(run(26, 0, 0.9f, 0.3f), kTerrain);
}

TEST(Cleanup, IgnoreVoxels) {
  Fixture two;
  two.set(0, 0, 0, tax().ignore_id());
  two.set(1, 0, 0, kVeg);
  two.set(0, 1, 0, kVeg);
  auto out = cleanup_and_instance_dilation(two.g, tax());
  EXPECT_EQ(out.sem[two.at(0, 0, 0)], kVeg);
  EXPECT_EQ(out.inst[two.at(0, 0, 0)], stuff_instance_id(kVeg));

  Fixture one;
  one.set(0, 0, 0, tax().ignore_id());
  one.set(1, 0, 0, kVeg);
  out = cleanup_and_instance_dilation(one.g, tax());
  EXPECT_EQ(out.sem[one.at(0, 0, 0)], tax().free_id());
}

TEST(Cleanup, InstanceDilationRadius) {
  auto run = [](std::array<int, 3> src, InstanceId id) {
    Fixture f;
    f.set(0, 0, 0, kCar, 0);
    f.set(src[0], src[1], src[2], kCar, id);
    return cleanup_and_instance_dilation(f.g, tax()).inst[f.at(0, 0, 0)];
  };
  EXPECT_EQ(run({1, 0, 0}, 7), 7u);
  EXPECT_EQ(run({0, 0, 2}, 7), 7u);
  EXPECT_EQ(run({0, 0, 3}, 7), 0u);
  EXPECT_EQ(run({0, 1, 2}, 7), 0u);  // sqrt(5) > 2

  // Equidistant candidates resolve to the smaller id; other classes never donate.
  Fixture f;
  f.set(0, 0, 0, kCar, 0);
  f.set(1, 0, 0, kCar, 9);
  f.set(-1, 0, 0, kCar, 4);
  f.set(0, 1, 0, 10, 1);
  EXPECT_EQ(cleanup_and_instance_dilation(f.g, tax()).inst[f.at(0, 0, 0)], 4u);
}

TEST(RefineAll, DisabledStagesAreIdentity) {
  std::mt19937 rng(3);
  OccupancyGrid g(testkit::cube_spec(8), tax().free_id());
  for (std::size_t v = 0; v < g.size(); ++v) {
    const auto r = rng() % 20;
    g.sem[v] = r < 17 ? static_cast<ClassId>(r) : r == 17 ? tax().ignore_id() : tax().free_id();
  }
  RefineConfig off = only(0);
  EXPECT_EQ(refine_all(g, tax(), off), g);

  OccupancyGrid empty(testkit::cube_spec(8), tax().free_id());
  RefineConfig all;
  all.warmup = true;
  EXPECT_EQ(refine_all(empty, tax(), all), empty);
}

TEST(RefineAll, DeterministicAcrossWorkers) {
  std::mt19937 rng(9);
  OccupancyGrid g(testkit::cube_spec(16), tax().free_id());
  for (std::size_t v = 0; v < g.size(); ++v) {
    const auto r = rng() % 30;
    g.sem[v] = r < 17 ? static_cast<ClassId>(r) : r < 20 ? tax().ignore_id() : tax().free_id();
    g.inst[v] = tax().is_thing(g.sem[v]) && rng() % 2 ? rng() % 5 : 0;
    g.conf[v] = static_cast<float>(rng() % 100) / 100.0f;
    g.p_occ[v] = static_cast<float>(rng() % 100) / 100.0f;
  }
  RefineConfig a;
  a.warmup = true;
  a.driveable_class = kDrive;
  a.workers = 1;
  RefineConfig b = a;
  b.workers = 5;
  std::vector<OccupancyGrid> sa, sb;
  const auto ra = refine_all(g, tax(), a, [&](int, const OccupancyGrid& x) { sa.push_back(x); });
  const auto rb = refine_all(g, tax(), b, [&](int, const OccupancyGrid& x) { sb.push_back(x); });
  EXPECT_EQ(ra, rb);
  EXPECT_EQ(sa.size(), 4u);
  EXPECT_EQ(sa, sb);
}

TEST(RefineConfig, Validation) {
  RefineConfig c;
  EXPECT_NO_THROW(c.validate());
  c.pinhole_support = 27;
  EXPECT_THROW(c.validate(), ValidationError);
  c = {};
  c.freeze_conf = 1.5;
  EXPECT_THROW(c.validate(), ValidationError);
}
