#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <random>
#include <set>
#include <cstring>
#include <functional>

#include "support.hpp"

using namespace occfuse;
using occfuse::testkit::TempDir;

namespace {

const TaxonomyConfig& cfg() {
  static const TaxonomyConfig c = TaxonomyConfig::occ3d_default();
  return c;
}

std::uint32_t prompt(const char* p) { return static_cast<std::uint32_t>(*cfg().rules.find(p)); }
ClassId cls(const char* name) { return *cfg().taxonomy.find(name); }

MaskCandidate rect(std::uint32_t prompt_id, std::uint32_t cand, double score, int w, int h, int x0, int x1) {
  MaskCandidate c{prompt_id, cand, score, Raster<std::uint8_t>(w, h)};
  for (int y = 0; y < h; ++y)
    for (int x = x0; x < x1; ++x) c.mask.at(x, y) = 1;
  return c;
}

std::string message_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    return e.what();
  }
  return {};
}

ViewRecord random_view(CameraIndex cam, int w, int h, std::mt19937& rng, bool with_candidates) {
  std::uniform_real_distribution<float> u(0.5f, 60.0f);
  ViewRecord v;
  v.camera = RigCamera{cam, w, h, 70.0, Vec3(0.1 * cam, 0, 1.6), 30.0 * cam, -5.0}.view();
  v.geometry = {Raster<float>(w, h, 3), Raster<float>(w, h), Raster<float>(w, h)};
  for (auto& x : v.geometry.points.data()) x = u(rng);
  for (auto& x : v.geometry.depth.data()) x = u(rng);
  for (auto& x : v.geometry.conf.data()) x = u(rng);
  v.geometry.depth[3] = std::numeric_limits<float>::quiet_NaN();
  v.priors = {Raster<std::uint16_t>(w, h), Raster<std::uint16_t>(w, h), Raster<float>(w, h)};
  for (auto& x : v.priors.sem.data()) x = static_cast<std::uint16_t>(rng() % 17);
  for (auto& x : v.priors.inst.data()) x = static_cast<std::uint16_t>(rng() % 5);
  if (with_candidates) {
    for (std::uint32_t k = 0; k < 4; ++k) {
      MaskCandidate c{static_cast<std::uint32_t>(rng() % cfg().rules.size()), k,
                      std::uniform_real_distribution<double>(0, 1)(rng), Raster<std::uint8_t>(w, h)};
      for (auto& m : c.mask.data()) m = rng() % 3 == 0;
      v.candidates.push_back(std::move(c));
    }
  }
  return v;
}

}  // namespace

TEST(FuseMasks, HigherScoreWinsOverlap) {
  const int w = 6, h = 2;
  std::vector<MaskCandidate> c = {rect(prompt("car"), 0, 0.9, w, h, 0, 4), rect(prompt("truck"), 0, 0.4, w, h, 2, 6)};
  const auto p = fuse_masks(c, cfg().rules, cfg().taxonomy, w, h);
  EXPECT_EQ(p.sem.at(0, 0), cls("car"));
  EXPECT_EQ(p.sem.at(3, 1), cls("car"));
  EXPECT_EQ(p.sem.at(5, 0), cls("truck"));
  EXPECT_FLOAT_EQ(p.score.at(3, 0), 0.9f);
  EXPECT_NE(p.inst.at(0, 0), p.inst.at(5, 0));
}

TEST(FuseMasks, PrecedenceOverridesScore) {
  const int w = 4, h = 1;
  std::vector<MaskCandidate> c = {rect(prompt("road"), 0, 0.95, w, h, 0, 4),
                                  rect(prompt("lane marking"), 0, 0.6, w, h, 1, 3)};
  const auto p = fuse_masks(c, cfg().rules, cfg().taxonomy, w, h);
  EXPECT_FLOAT_EQ(p.score.at(0, 0), 0.95f);
  EXPECT_FLOAT_EQ(p.score.at(1, 0), 0.6f);
  EXPECT_FLOAT_EQ(p.score.at(2, 0), 0.6f);
  EXPECT_NE(p.inst.at(0, 0), p.inst.at(1, 0));
}

TEST(FuseMasks, EmptyCandidatesGiveIgnore) {
  const auto p = fuse_masks({}, cfg().rules, cfg().taxonomy, 3, 2);
  for (std::size_t i = 0; i < p.sem.pixel_count(); ++i) {
    EXPECT_EQ(p.sem[i], cfg().taxonomy.ignore_id());
    EXPECT_EQ(p.inst[i], 0);
  }
}

TEST(FuseMasks, UncoveredPixelsAreIgnore) {
  std::vector<MaskCandidate> c = {rect(prompt("car"), 0, 0.5, 4, 1, 0, 2)};
  const auto p = fuse_masks(c, cfg().rules, cfg().taxonomy, 4, 1);
  EXPECT_EQ(p.sem.at(3, 0), cfg().taxonomy.ignore_id());
  EXPECT_EQ(p.inst.at(3, 0), 0);
}

TEST(FuseMasks, DimensionMismatchIsError) {
  std::vector<MaskCandidate> c = {rect(prompt("car"), 0, 0.5, 4, 2, 0, 2)};
  EXPECT_THROW(fuse_masks(c, cfg().rules, cfg().taxonomy, 5, 2), ValidationError);
  c[0] = rect(prompt("car"), 0, std::numeric_limits<double>::infinity(), 5, 2, 0, 2);
  EXPECT_THROW(fuse_masks(c, cfg().rules, cfg().taxonomy, 5, 2), ValidationError);
}

TEST(FuseMasks, ScoreTiesGoToLowerPromptThenCandidate) {
  std::vector<MaskCandidate> c = {rect(prompt("truck"), 0, 0.5, 2, 1, 0, 2), rect(prompt("car"), 1, 0.5, 2, 1, 0, 2),
                                  rect(prompt("car"), 0, 0.5, 2, 1, 1, 2)};
  const auto p = fuse_masks(c, cfg().rules, cfg().taxonomy, 2, 1);
  EXPECT_EQ(p.sem.at(0, 0), cls("car"));
  EXPECT_EQ(p.sem.at(1, 0), cls("car"));
  // Local ids follow (prompt, candidate) order: car/0 = 1, car/1 = 2.
  EXPECT_EQ(p.inst.at(0, 0), 2);
  EXPECT_EQ(p.inst.at(1, 0), 1);
}

TEST(FuseMasks, PermutationInvariant) {
  std::mt19937 rng(11);
  const int w = 12, h = 9;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<MaskCandidate> c;
    for (std::uint32_t k = 0; k < 8; ++k) {
      MaskCandidate m{static_cast<std::uint32_t>(rng() % cfg().rules.size()), k,
                      static_cast<double>(rng() % 4) / 4.0, Raster<std::uint8_t>(w, h)};
      for (auto& b : m.mask.data()) b = rng() % 2;
      c.push_back(std::move(m));
    }
    const auto ref = fuse_masks(c, cfg().rules, cfg().taxonomy, w, h);
    std::shuffle(c.begin(), c.end(), rng);
    const auto got = fuse_masks(c, cfg().rules, cfg().taxonomy, w, h);
    EXPECT_EQ(got.sem, ref.sem);
    EXPECT_EQ(got.inst, ref.inst);
    EXPECT_EQ(got.score, ref.score);
  }
}

TEST(FuseMasks, NamespacingIsInjective) {
  std::set<InstanceId> seen;
  for (FrameIndex t = 0; t < 4; ++t)
    for (CameraIndex c = 0; c < 6; ++c)
      for (std::uint32_t l = 1; l < 20; ++l) EXPECT_TRUE(seen.insert(namespace_instance(t, c, l)).second);
  EXPECT_EQ(namespace_instance(3, 2, 0), 0u);
  EXPECT_THROW(namespace_instance(0, 64, 1), ValidationError);
}

TEST(Dataset, RoundTripIsBitExact) {
  TempDir dir("ingest_rt");
  std::mt19937 rng(5);
  const int w = 7, h = 5;
  Manifest m{{0, 1}, {{0, w, h}, {1, w, h}}};
  write_manifest(dir.path(), m);
  std::vector<std::vector<ViewRecord>> frames;
  for (FrameIndex t = 0; t < 2; ++t) {
    std::vector<ViewRecord> views = {random_view(0, w, h, rng, false), random_view(1, w, h, rng, false)};
    EgoPose ego{t, make_pose(rot_z(0.3 * t), Vec3(t, -2.0 * t, 0.25))};
    write_sample(dir.path(), ego, views, true, false);
    frames.push_back(std::move(views));
  }
  const Dataset ds(dir.path());
  for (FrameIndex t = 0; t < 2; ++t) {
    const Sample s = ds.load_sample(t, cfg());
    ASSERT_EQ(s.views.size(), 2u);
    EXPECT_TRUE(s.ego.ego_to_world.isApprox(make_pose(rot_z(0.3 * t), Vec3(t, -2.0 * t, 0.25)), 0.0));
    for (std::size_t c = 0; c < 2; ++c) {
      const auto& a = s.views[c];
      const auto& b = frames[t][c];
      EXPECT_EQ(a.camera.intrinsics, b.camera.intrinsics);
      EXPECT_EQ(a.camera.cam_to_ego, b.camera.cam_to_ego);
      EXPECT_EQ(0, std::memcmp(a.geometry.depth.data().data(), b.geometry.depth.data().data(),
                               b.geometry.depth.data().size() * sizeof(float)));
      EXPECT_EQ(0, std::memcmp(a.geometry.points.data().data(), b.geometry.points.data().data(),
                               b.geometry.points.data().size() * sizeof(float)));
      EXPECT_EQ(0, std::memcmp(a.geometry.conf.data().data(), b.geometry.conf.data().data(),
                               b.geometry.conf.data().size() * sizeof(float)));
      EXPECT_EQ(a.priors.sem, b.priors.sem);
      EXPECT_EQ(a.priors.inst, b.priors.inst);
    }
  }
}

TEST(Dataset, RawCandidatesMatchOfflineFusion) {
  TempDir dir("ingest_cand");
  std::mt19937 rng(9);
  const int w = 10, h = 6;
  write_manifest(dir.path(), Manifest{{0}, {{0, w, h}}});
  std::vector<ViewRecord> views = {random_view(0, w, h, rng, true)};
  write_sample(dir.path(), EgoPose{0, Mat4::Identity()}, views, false, true);
  const Sample s = Dataset(dir.path()).load_sample(0, cfg());
  ASSERT_TRUE(s.views[0].fused_from_candidates);
  const auto ref = fuse_masks(views[0].candidates, cfg().rules, cfg().taxonomy, w, h);
  EXPECT_EQ(s.views[0].priors.sem, ref.sem);
  EXPECT_EQ(s.views[0].priors.inst, ref.inst);
  EXPECT_EQ(s.views[0].priors.score, ref.score);
}

TEST(Dataset, SixCameraSampleLoadsSixViews) {
  TempDir dir("ingest_six");
  std::mt19937 rng(1);
  Manifest m{{0}, {}};
  std::vector<ViewRecord> views;
  for (CameraIndex c = 0; c < 6; ++c) {
    m.cameras.push_back({c, 4, 3});
    views.push_back(random_view(c, 4, 3, rng, false));
  }
  write_manifest(dir.path(), m);
  write_sample(dir.path(), EgoPose{0, Mat4::Identity()}, views, true, false);
  EXPECT_EQ(Dataset(dir.path()).load_sample(0, cfg()).views.size(), 6u);
}

TEST(Dataset, ErrorsNameTheOffendingFiles) {
  TempDir dir("ingest_err");
  std::mt19937 rng(2);
  const int w = 4, h = 3;
  write_manifest(dir.path(), Manifest{{0}, {{0, w, h}}});
  write_sample(dir.path(), EgoPose{0, Mat4::Identity()}, {random_view(0, w, h, rng, false)}, true, false);
  const auto cam_dir = dir.path() / "0" / "0";

  // Label raster one row short of the depth raster.
  write_raster(cam_dir / "sem.u16", Raster<std::uint16_t>(w, h - 1));
  std::string msg = message_of([&] { Dataset(dir.path()).load_sample(0, cfg()); });
  EXPECT_NE(msg.find("depth.f32"), std::string::npos) << msg;
  EXPECT_NE(msg.find("sem.u16"), std::string::npos) << msg;
  write_raster(cam_dir / "sem.u16", Raster<std::uint16_t>(w, h));

  std::filesystem::remove(cam_dir / "conf.f32");
  msg = message_of([&] { Dataset(dir.path()).load_sample(0, cfg()); });
  EXPECT_NE(msg.find("conf.f32"), std::string::npos) << msg;
  write_raster(cam_dir / "conf.f32", Raster<float>(w, h));

  std::ofstream(cam_dir / "camera.txt") << "1 0 2 0 1 2 0 0 1 oops";
  EXPECT_THROW(Dataset(dir.path()).load_sample(0, cfg()), LoadError);
  msg = message_of([&] { Dataset(dir.path()).load_sample(0, cfg()); });
  EXPECT_NE(msg.find("camera.txt"), std::string::npos) << msg;

  EXPECT_THROW(Dataset(dir.path()).load_sample(7, cfg()), LoadError);
  EXPECT_THROW(Dataset(dir.path() / "nowhere"), LoadError);
}

TEST(Dataset, UnknownLabelsCountedAndIgnored) {
  TempDir dir("ingest_unknown");
  std::mt19937 rng(3);
  const int w = 4, h = 2;
  write_manifest(dir.path(), Manifest{{0}, {{0, w, h}}});
  auto v = random_view(0, w, h, rng, false);
  v.priors.sem[0] = 99;
  v.priors.inst[0] = 3;
  write_sample(dir.path(), EgoPose{0, Mat4::Identity()}, {v}, true, false);
  const Sample s = Dataset(dir.path()).load_sample(0, cfg());
  EXPECT_EQ(s.unknown_labels, 1u);
  EXPECT_EQ(s.views[0].priors.sem[0], cfg().taxonomy.ignore_id());
  EXPECT_EQ(s.views[0].priors.inst[0], 0);
}

TEST(CameraView, RejectsNonRigidExtrinsics) {
  CameraView v = RigCamera{}.view();
  EXPECT_NO_THROW(v.validate());
  v.cam_to_ego(0, 0) += 1e-3;
  EXPECT_THROW(v.validate(), ValidationError);
  v = RigCamera{}.view();
  v.intrinsics(0, 0) = 0;
  EXPECT_THROW(v.validate(), ValidationError);
}
