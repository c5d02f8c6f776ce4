#pragma once

// Synthetic scenes: a ground plane split into driveable/sidewalk/terrain strips,
// yawed boxes and spheres. Produces ground-truth grids, rendered camera views in
// the ingest format, and observation masks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "occfuse/common.hpp"
#include "occfuse/geometry.hpp"
#include "occfuse/ingest.hpp"
#include "occfuse/lift.hpp"
#include "occfuse/metrics.hpp"
#include "occfuse/raster.hpp"
#include "occfuse/taxonomy.hpp"
#include "occfuse/voxelize.hpp"

namespace occfuse {

// ---------------------------------------------------------------------------
// Counter-based randomness. Draw number `counter` of stream `stream` is
// splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ counter); uniforms take the
// top 53 bits, normals use Box-Muller on draws 2c and 2c+1.

inline std::uint64_t splitmix64(std::uint64_t z) {
  z += 0x9E3779B97F4A7C15ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline std::uint64_t counter_hash(std::uint64_t seed, std::uint64_t stream, std::uint64_t counter) {
  return splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ counter);
}

inline double counter_uniform(std::uint64_t seed, std::uint64_t stream, std::uint64_t counter) {
  return static_cast<double>(counter_hash(seed, stream, counter) >> 11) * 0x1.0p-53;
}

inline double counter_normal(std::uint64_t seed, std::uint64_t stream, std::uint64_t counter) {
  const double u1 = 1.0 - counter_uniform(seed, stream, 2 * counter);
  const double u2 = counter_uniform(seed, stream, 2 * counter + 1);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

enum class NoiseStream : std::uint64_t { kDepth = 1, kFlip, kFlipClass, kDropout, kPose };

// Stream id for one (frame, camera, purpose) triple.
inline std::uint64_t noise_stream(FrameIndex t, CameraIndex cam, NoiseStream s) {
  return (static_cast<std::uint64_t>(t) << 32) | (static_cast<std::uint64_t>(cam) << 8) |
         static_cast<std::uint64_t>(s);
}

// ---------------------------------------------------------------------------
// Scene description

enum class ShapeKind { kBox, kSphere };

struct SceneObject {
  ClassId class_id = 0;
  ShapeKind shape = ShapeKind::kBox;
  Vec3 center = Vec3::Zero();  // world frame; boxes: footprint center and base height in z
  Vec3 size = Vec3::Ones();    // boxes: length, width, height; spheres: radius in x
  double yaw = 0.0;            // radians
  InstanceId instance_id = 0;  // assigned by SceneSpec::finalize for thing classes

  double radius() const { return size.x(); }
};

struct GroundSpec {
  double z = -0.4;                     // world height of the ground plane
  double driveable_half_width = 6.0;   // |y| below this is driveable
  double sidewalk_half_width = 9.2;    // then sidewalk up to here, terrain beyond
};

struct NoiseSpec {
  double depth_sigma = 0.0;  // meters
  double label_flip = 0.0;   // probability
  double dropout = 0.0;      // probability
  double pose_sigma = 0.0;   // meters, per axis, applied to written ego poses
};

struct RigCamera {
  CameraIndex camera_id = 0;
  int width = 160;
  int height = 90;
  double hfov_deg = 70.0;
  Vec3 position = Vec3(0.0, 0.0, 1.6);  // ego frame
  double yaw_deg = 0.0;
  double pitch_deg = -5.0;

  CameraView view() const {
    CameraView v;
    v.camera_id = camera_id;
    v.width = width;
    v.height = height;
    const double f = (width / 2.0) / std::tan(hfov_deg * std::numbers::pi / 360.0);
    v.intrinsics << f, 0, width / 2.0, 0, f, height / 2.0, 0, 0, 1;
    const double y = yaw_deg * std::numbers::pi / 180.0, p = pitch_deg * std::numbers::pi / 180.0;
    // Optical axes: x right, y down, z forward.
    const Vec3 fwd(std::cos(p) * std::cos(y), std::cos(p) * std::sin(y), std::sin(p));
    const Vec3 right(std::sin(y), -std::cos(y), 0.0);
    const Vec3 down = fwd.cross(right);
    Mat3 R;
    R.col(0) = right;
    R.col(1) = down;
    R.col(2) = fwd;
    v.cam_to_ego = make_pose(R, position);
    return v;
  }
};

struct TrajectoryPose {
  FrameIndex t = 0;
  double x = 0.0, y = 0.0, yaw_deg = 0.0;

  Mat4 ego_to_world() const { return make_pose(rot_z(yaw_deg * std::numbers::pi / 180.0), Vec3(x, y, 0.0)); }
};

struct SceneSpec {
  std::uint64_t seed = 0;
  std::array<double, 4> extents{-60.0, 60.0, -30.0, 30.0};  // world x min/max, y min/max
  GridSpec grid;
  GroundSpec ground;
  std::vector<SceneObject> objects;
  NoiseSpec noise;
  std::vector<RigCamera> rig;
  std::vector<TrajectoryPose> trajectory;
  bool write_priors = true;
  bool write_candidates = true;

  // Checks ranges against the taxonomy and numbers thing objects 1..n.
  void finalize(const Taxonomy& tax) {
    grid.validate();
    auto prob = [](double v, const char* name) {
      if (!(v >= 0.0 && v <= 1.0)) throw ValidationError(std::string("noise.") + name + " must lie in [0, 1]");
    };
    prob(noise.label_flip, "label_flip");
    prob(noise.dropout, "dropout");
    if (!(noise.depth_sigma >= 0.0) || !(noise.pose_sigma >= 0.0)) {
      throw ValidationError("noise sigmas must be non-negative");
    }
    if (!(extents[1] > extents[0] && extents[3] > extents[2])) throw ValidationError("scene extents are empty");
    if (rig.empty()) throw ValidationError("scene rig has no cameras");
    if (trajectory.empty()) throw ValidationError("scene trajectory is empty");
    for (std::size_t i = 1; i < trajectory.size(); ++i) {
      if (trajectory[i].t <= trajectory[i - 1].t) throw ValidationError("trajectory frames must be increasing");
    }
    for (const auto& c : rig) {
      if (c.width <= 0 || c.height <= 0 || !(c.hfov_deg > 0.0 && c.hfov_deg < 180.0)) {
        throw ValidationError("camera " + std::to_string(c.camera_id) + " has an invalid image size or fov");
      }
    }
    InstanceId next = 1;
    for (std::size_t i = 0; i < objects.size(); ++i) {
      auto& o = objects[i];
      if (!tax.is_semantic(o.class_id)) throw ValidationError("scene object " + std::to_string(i) + ": unknown class");
      if (!(o.size.minCoeff() > 0.0)) throw ValidationError("scene object " + std::to_string(i) + ": size must be positive");
      double rx, ry;
      if (o.shape == ShapeKind::kBox) {
        const double c = std::abs(std::cos(o.yaw)), s = std::abs(std::sin(o.yaw));
        rx = (c * o.size.x() + s * o.size.y()) / 2;
        ry = (s * o.size.x() + c * o.size.y()) / 2;
      } else {
        rx = ry = o.radius();
      }
      if (o.center.x() - rx < extents[0] || o.center.x() + rx > extents[1] || o.center.y() - ry < extents[2] ||
          o.center.y() + ry > extents[3]) {
        throw ValidationError("scene object " + std::to_string(i) + " (" + tax.info(o.class_id).name +
                              ") lies outside the scene extents");
      }
      o.instance_id = tax.is_thing(o.class_id) ? next++ : 0;
    }
  }

  static std::vector<RigCamera> default_rig() {
    std::vector<RigCamera> rig;
    const double yaws[] = {0.0, -55.0, 55.0, 180.0, -125.0, 125.0};
    for (CameraIndex i = 0; i < 6; ++i) {
      RigCamera c;
      c.camera_id = i;
      c.yaw_deg = yaws[i];
      c.position = Vec3(0.0, 0.0, 1.6);
      rig.push_back(c);
    }
    return rig;
  }

  // Street scene with walls, trees and a handful of objects; ego drives along +x.
  static SceneSpec default_scene(const Taxonomy& tax) {
    SceneSpec s;
    s.seed = 7;
    s.rig = default_rig();
    for (FrameIndex t = 0; t < 5; ++t) s.trajectory.push_back({t, 1.2 * t, 0.0, 0.0});
    auto id = [&](const char* n) { return *tax.find(n); };
    auto box = [&](const char* cls, double x, double y, double yaw_deg, double l, double w, double h) {
      SceneObject o;
      o.class_id = id(cls);
      o.center = Vec3(x, y, -0.17);
      o.size = Vec3(l, w, h);
      o.yaw = yaw_deg * std::numbers::pi / 180.0;
      s.objects.push_back(o);
    };
    auto sphere = [&](const char* cls, double x, double y, double z, double r) {
      SceneObject o;
      o.class_id = id(cls);
      o.shape = ShapeKind::kSphere;
      o.center = Vec3(x, y, z);
      o.size = Vec3(r, r, r);
      s.objects.push_back(o);
    };
    box("car", 9.13, -3.07, 0.0, 4.3, 1.85, 1.55);
    box("car", 17.27, 2.93, 12.0, 4.5, 1.9, 1.62);
    box("car", -8.71, 3.11, 180.0, 4.1, 1.8, 1.49);
    box("truck", 26.31, -3.23, 0.0, 8.3, 2.5, 3.13);
    box("pedestrian", 6.07, 7.13, 0.0, 0.62, 0.58, 1.77);
    box("pedestrian", 13.93, -7.61, 30.0, 0.66, 0.61, 1.71);
    box("traffic_cone", 4.17, -5.29, 0.0, 0.41, 0.39, 0.71);
    box("barrier", -4.13, -5.41, 0.0, 2.13, 0.47, 1.03);
    box("manmade", 5.03, 12.67, 0.0, 40.1, 1.13, 4.07);
    box("manmade", 5.03, -12.77, 0.0, 40.1, 1.13, 5.11);
    sphere("vegetation", 24.11, 10.27, 1.67, 1.83);
    sphere("vegetation", -12.13, -10.37, 1.47, 1.63);
    s.finalize(tax);
    return s;
  }

  nlohmann::json to_json(const Taxonomy& tax) const;
  static SceneSpec from_json(const nlohmann::json& j, const Taxonomy& tax);
  static SceneSpec load(const std::filesystem::path& path, const Taxonomy& tax) {
    try {
      return from_json(detail::read_json_file(path), tax);
    } catch (const nlohmann::json::exception& e) {
      throw LoadError(path.string() + ": " + e.what());
    } catch (const LoadError&) {
      throw;
    } catch (const ValidationError& e) {
      throw ValidationError(path.string() + ": " + e.what());
    }
  }
};

// ---------------------------------------------------------------------------
// Scene queries (world frame)

// Ground class for a world-frame y coordinate.
inline ClassId ground_class(const GroundSpec& g, double y, const Taxonomy& tax) {
  const double a = std::abs(y);
  if (a < g.driveable_half_width) return *tax.find("driveable_surface");
  if (a < g.sidewalk_half_width) return *tax.find("sidewalk");
  return *tax.find("terrain");
}

struct SurfaceHit {
  double t = std::numeric_limits<double>::infinity();
  ClassId class_id = 0;
  InstanceId instance_id = 0;
  int object = -1;  // roster index, -1 for the ground
};

namespace detail {

inline std::optional<double> ray_box(const SceneObject& o, const Vec3& p, const Vec3& d) {
  const double c = std::cos(o.yaw), s = std::sin(o.yaw);
  const Vec3 q = p - o.center;
  const Vec3 lp(c * q.x() + s * q.y(), -s * q.x() + c * q.y(), q.z());
  const Vec3 ld(c * d.x() + s * d.y(), -s * d.x() + c * d.y(), d.z());
  const double lo[3] = {-o.size.x() / 2, -o.size.y() / 2, 0.0};
  const double hi[3] = {o.size.x() / 2, o.size.y() / 2, o.size.z()};
  double t0 = 0.0, t1 = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    if (ld[a] == 0.0) {
      if (lp[a] < lo[a] || lp[a] > hi[a]) return std::nullopt;
      continue;
    }
    double ta = (lo[a] - lp[a]) / ld[a], tb = (hi[a] - lp[a]) / ld[a];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  if (t0 > t1 || t0 <= 0.0) return std::nullopt;
  return t0;
}

inline std::optional<double> ray_sphere(const SceneObject& o, const Vec3& p, const Vec3& d) {
  const Vec3 q = p - o.center;
  const double b = q.dot(d), c = q.squaredNorm() - o.radius() * o.radius();
  const double disc = b * b - c;
  if (disc < 0.0) return std::nullopt;
  const double t = -b - std::sqrt(disc);
  if (t <= 0.0) return std::nullopt;
  return t;
}

}  // namespace detail

// Nearest surface along a unit world-frame ray.
inline std::optional<SurfaceHit> trace_scene(const SceneSpec& scene, const Vec3& p, const Vec3& d,
                                             const Taxonomy& tax) {
  SurfaceHit best;
  if (d.z() < 0.0 && p.z() > scene.ground.z) {
    const double t = (scene.ground.z - p.z()) / d.z();
    best.t = t;
    best.class_id = ground_class(scene.ground, p.y() + t * d.y(), tax);
    best.instance_id = 0;
    best.object = -1;
  }
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    const auto& o = scene.objects[i];
    const auto t = o.shape == ShapeKind::kBox ? detail::ray_box(o, p, d) : detail::ray_sphere(o, p, d);
    if (t && *t < best.t) best = {*t, o.class_id, o.instance_id, static_cast<int>(i)};
  }
  if (!std::isfinite(best.t)) return std::nullopt;
  return best;
}

// ---------------------------------------------------------------------------
// Ground truth

namespace detail {

// Positive-volume overlap of an axis-aligned cell (ego frame) with a world object.
inline bool cell_overlaps(const SceneObject& o, const Mat4& world_to_ego, const Vec3& lo, const Vec3& hi) {
  const Vec3 c = transform_point(world_to_ego, o.center);
  if (o.shape == ShapeKind::kSphere) {
    double d2 = 0.0;
    for (int a = 0; a < 3; ++a) {
      const double v = std::clamp(c[a], lo[a], hi[a]) - c[a];
      d2 += v * v;
    }
    return d2 < o.radius() * o.radius();
  }
  if (!(c.z() + o.size.z() > lo.z() && c.z() < hi.z())) return false;
  const double ego_yaw = std::atan2(world_to_ego(1, 0), world_to_ego(0, 0));
  const double yaw = o.yaw + ego_yaw;
  const Eigen::Vector2d u(std::cos(yaw), std::sin(yaw)), v(-std::sin(yaw), std::cos(yaw));
  const Eigen::Vector2d cc(c.x(), c.y());
  const Eigen::Vector2d corners[4] = {{lo.x(), lo.y()}, {hi.x(), lo.y()}, {hi.x(), hi.y()}, {lo.x(), hi.y()}};
  const double hl = o.size.x() / 2, hw = o.size.y() / 2;
  // Separating axes: cell axes, then box axes. Touching counts as separated.
  const double bx = std::abs(u.x()) * hl + std::abs(v.x()) * hw;
  const double by = std::abs(u.y()) * hl + std::abs(v.y()) * hw;
  if (cc.x() + bx <= lo.x() || cc.x() - bx >= hi.x()) return false;
  if (cc.y() + by <= lo.y() || cc.y() - by >= hi.y()) return false;
  for (const auto& [axis, half] : {std::pair{u, hl}, std::pair{v, hw}}) {
    double mn = std::numeric_limits<double>::infinity(), mx = -mn;
    for (const auto& q : corners) {
      const double s = axis.dot(q - cc);
      mn = std::min(mn, s);
      mx = std::max(mx, s);
    }
    if (mx <= -half || mn >= half) return false;
  }
  return true;
}

}  // namespace detail

// Ground-truth grid in the ego frame of `pose`: every cell overlapping an object
// (positive volume) takes the first such object in roster order; otherwise the
// layer holding the ground plane takes the ground class at the cell center.
// Stuff cells carry the canonical stuff id.
inline OccupancyGrid generate_ground_truth(const SceneSpec& scene, const Mat4& ego_to_world, const Taxonomy& tax) {
  const auto& spec = scene.grid;
  OccupancyGrid g(spec, tax.free_id());
  const Lattice L = spec.lattice();
  const Mat4 world_to_ego = rigid_inverse(ego_to_world);
  const double s = spec.voxel_size;
  std::fill(g.conf.begin(), g.conf.end(), 1.0f);

  const double gz_ego = scene.ground.z - ego_to_world(2, 3);
  const auto gk = voxel_index(spec, Vec3(spec.min[0], spec.min[1], gz_ego));
  if (gk) {
    for (int i = 0; i < L.nx; ++i)
      for (int j = 0; j < L.ny; ++j) {
        const Vec3 cw = transform_point(ego_to_world, spec.center({i, j, gk->k}));
        const ClassId c = ground_class(scene.ground, cw.y(), tax);
        const std::size_t v = L.linear(i, j, gk->k);
        g.sem[v] = c;
        g.inst[v] = stuff_instance_id(c);
      }
  }
  for (auto it = scene.objects.rbegin(); it != scene.objects.rend(); ++it) {
    const auto& o = *it;
    const Vec3 c = transform_point(world_to_ego, o.center);
    const double r = o.shape == ShapeKind::kSphere ? o.radius() : 0.5 * std::hypot(o.size.x(), o.size.y());
    const double zlo = o.shape == ShapeKind::kSphere ? c.z() - r : c.z();
    const double zhi = o.shape == ShapeKind::kSphere ? c.z() + r : c.z() + o.size.z();
    auto range = [&](double lo, double hi, int axis, int n) {
      const double off = axis == 2 ? spec.min[2] + spec.z0 : spec.min[axis];
      const int a = std::max(0, static_cast<int>(std::floor((lo - off) / s)) - 1);
      const int b = std::min(n - 1, static_cast<int>(std::floor((hi - off) / s)) + 1);
      return std::pair{a, b};
    };
    const auto [i0, i1] = range(c.x() - r, c.x() + r, 0, L.nx);
    const auto [j0, j1] = range(c.y() - r, c.y() + r, 1, L.ny);
    const auto [k0, k1] = range(zlo, zhi, 2, L.nz);
    for (int i = i0; i <= i1; ++i)
      for (int j = j0; j <= j1; ++j)
        for (int k = k0; k <= k1; ++k) {
          const Vec3 lo = spec.lower_corner({i, j, k});
          if (!detail::cell_overlaps(o, world_to_ego, lo, lo + Vec3::Constant(s))) continue;
          const std::size_t v = L.linear(i, j, k);
          g.sem[v] = o.class_id;
          g.inst[v] = tax.is_thing(o.class_id) ? o.instance_id : stuff_instance_id(o.class_id);
        }
  }
  return g;
}

inline const TrajectoryPose& trajectory_pose(const SceneSpec& scene, FrameIndex t) {
  for (const auto& p : scene.trajectory)
    if (p.t == t) return p;
  throw ValidationError("frame " + std::to_string(t) + " is not in the scene trajectory");
}

inline OccupancyGrid generate_ground_truth(const SceneSpec& scene, FrameIndex t, const Taxonomy& tax) {
  return generate_ground_truth(scene, trajectory_pose(scene, t).ego_to_world(), tax);
}

// ---------------------------------------------------------------------------
// Rendering

struct RenderedView {
  CameraView camera;
  GeometryMaps geometry;
  ViewPriors priors;          // noisy labels, view-local instance ids
  Raster<std::uint16_t> gt_sem;  // noiseless hit class, ignore where nothing is hit
  Raster<std::uint32_t> gt_inst;
  std::vector<MaskCandidate> candidates;
};

namespace detail {

inline Vec3 pixel_ray(const CameraView& cam, int x, int y) {
  const Mat3& K = cam.intrinsics;
  return Vec3((x + 0.5 - K(0, 2)) / K(0, 0), (y + 0.5 - K(1, 2)) / K(1, 1), 1.0);
}

inline std::optional<std::size_t> first_prompt_for(const RuleSet& rules, ClassId c) {
  for (std::size_t k = 0; k < rules.size(); ++k)
    if (rules.resolve_prompt(k) == c) return k;
  return std::nullopt;
}

}  // namespace detail

// Noise model per pixel: depth += sigma * n with n ~ N(0, 1) (n = 0 without depth
// noise); raw confidence C = 10^(2 - |n|), so the stabilized value is 3 - |n|. Dropout pixels get NaN
// depth and points with C = 1e-9. Flipped labels take a uniformly drawn other
// semantic class and no instance.
inline RenderedView render_view(const SceneSpec& scene, const RigCamera& rc, FrameIndex t, const Taxonomy& tax,
                                const RuleSet* rules = nullptr) {
  RenderedView rv;
  rv.camera = rc.view();
  const int w = rc.width, h = rc.height;
  const Mat4 cam_to_world = trajectory_pose(scene, t).ego_to_world() * rv.camera.cam_to_ego;
  const Mat3 R = cam_to_world.topLeftCorner<3, 3>();
  const Vec3 origin = cam_to_world.topRightCorner<3, 1>();
  const float nan = std::numeric_limits<float>::quiet_NaN();
  rv.geometry.points = Raster<float>(w, h, 3, nan);
  rv.geometry.depth = Raster<float>(w, h, 1, nan);
  rv.geometry.conf = Raster<float>(w, h, 1, 1e-9f);
  rv.priors.sem = Raster<std::uint16_t>(w, h, 1, tax.ignore_id());
  rv.priors.inst = Raster<std::uint16_t>(w, h, 1, 0);
  rv.priors.score = Raster<float>(w, h, 1, 0.0f);
  rv.gt_sem = Raster<std::uint16_t>(w, h, 1, tax.ignore_id());
  rv.gt_inst = Raster<std::uint32_t>(w, h, 1, 0);

  // View-local instance ids: rank of the object among visible thing objects.
  std::vector<int> hit_object(static_cast<std::size_t>(w) * h, -1);
  const auto sd = noise_stream(t, rc.camera_id, NoiseStream::kDepth);
  const auto sdrop = noise_stream(t, rc.camera_id, NoiseStream::kDropout);
  const auto sflip = noise_stream(t, rc.camera_id, NoiseStream::kFlip);
  const auto sfc = noise_stream(t, rc.camera_id, NoiseStream::kFlipClass);
  const std::size_t nsem = tax.classes().size();

  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t p = static_cast<std::size_t>(y) * w + x;
      const Vec3 dc = detail::pixel_ray(rv.camera, x, y);
      const Vec3 dw = (R * dc).normalized();
      const auto hit = trace_scene(scene, origin, dw, tax);
      if (!hit) continue;
      const double depth = hit->t / dc.norm();  // camera-frame z
      rv.gt_sem[p] = hit->class_id;
      rv.gt_inst[p] = hit->instance_id;
      hit_object[p] = hit->object;
      if (scene.noise.dropout > 0.0 && counter_uniform(scene.seed, sdrop, p) < scene.noise.dropout) continue;
      const double nd = scene.noise.depth_sigma > 0.0 ? counter_normal(scene.seed, sd, p) : 0.0;
      const double dn = depth + scene.noise.depth_sigma * nd;
      rv.geometry.depth[p] = static_cast<float>(dn);
      const Vec3 pc = dc * dn;
      for (int c = 0; c < 3; ++c) rv.geometry.points.channel(p, c) = static_cast<float>(pc[c]);
      rv.geometry.conf[p] = static_cast<float>(std::pow(10.0, 2.0 - std::abs(nd)));
    }
  }

  std::vector<int> visible;
  for (int o : hit_object)
    if (o >= 0 && tax.is_thing(scene.objects[o].class_id)) visible.push_back(o);
  std::sort(visible.begin(), visible.end());
  visible.erase(std::unique(visible.begin(), visible.end()), visible.end());
  for (std::size_t p = 0; p < hit_object.size(); ++p) {
    if (rv.gt_sem[p] == tax.ignore_id()) continue;
    ClassId c = rv.gt_sem[p];
    std::uint16_t local = 0;
    if (hit_object[p] >= 0 && tax.is_thing(c)) {
      local = static_cast<std::uint16_t>(std::lower_bound(visible.begin(), visible.end(), hit_object[p]) -
                                         visible.begin() + 1);
    }
    if (scene.noise.label_flip > 0.0 && counter_uniform(scene.seed, sflip, p) < scene.noise.label_flip) {
      const auto r = static_cast<std::size_t>(counter_uniform(scene.seed, sfc, p) * static_cast<double>(nsem - 1));
      c = static_cast<ClassId>(r >= c ? r + 1 : r);
      local = 0;
    }
    rv.priors.sem[p] = c;
    rv.priors.inst[p] = local;
    rv.priors.score[p] = 1.0f;
  }

  if (rules) {
    // Per labeled segment (class, local id): a full-mask candidate; thing
    // segments add a second candidate covering their upper rows at a lower score.
    std::map<std::pair<ClassId, std::uint16_t>, std::vector<std::size_t>> segments;
    for (std::size_t p = 0; p < hit_object.size(); ++p) {
      if (rv.priors.sem[p] == tax.ignore_id()) continue;
      segments[{rv.priors.sem[p], rv.priors.inst[p]}].push_back(p);
    }
    std::uint32_t cid = 0;
    for (const auto& [key, pix] : segments) {
      const auto prompt = detail::first_prompt_for(*rules, key.first);
      if (!prompt) continue;
      MaskCandidate full;
      full.prompt_id = static_cast<std::uint32_t>(*prompt);
      full.candidate_id = cid++;
      full.score = tax.is_thing(key.first) ? 0.9 : 0.7;
      full.mask = Raster<std::uint8_t>(w, h, 1, 0);
      for (auto p : pix) full.mask[p] = 1;
      rv.candidates.push_back(full);
      if (tax.is_thing(key.first) && key.second != 0) {
        const std::size_t row_split = pix[pix.size() / 2] / static_cast<std::size_t>(w);
        MaskCandidate part = full;
        part.candidate_id = cid++;
        part.score = 0.6;
        for (auto p : pix)
          if (p / static_cast<std::size_t>(w) > row_split) part.mask[p] = 0;
        rv.candidates.push_back(part);
      }
    }
  }
  return rv;
}

// Ego pose as written to the dataset: the true pose with Gaussian translation noise.
inline Mat4 noisy_ego_pose(const SceneSpec& scene, FrameIndex t) {
  Mat4 T = trajectory_pose(scene, t).ego_to_world();
  if (scene.noise.pose_sigma > 0.0) {
    const auto s = noise_stream(t, 0, NoiseStream::kPose);
    for (int a = 0; a < 3; ++a) T(a, 3) += scene.noise.pose_sigma * counter_normal(scene.seed, s, a);
  }
  return T;
}

// Cells of the ego grid at `target` observed from the listed frames: cells
// holding a noiseless hit within [d_min, d_max], plus free ground-truth cells the
// camera rays cross before reaching such a hit.
inline std::vector<std::uint8_t> observation_mask(const SceneSpec& scene, FrameIndex target,
                                                  const std::vector<FrameIndex>& frames, const Taxonomy& tax,
                                                  const ReliabilityParams& rel = {}) {
  const auto& spec = scene.grid;
  const Lattice L = spec.lattice();
  const OccupancyGrid gt = generate_ground_truth(scene, target, tax);
  std::vector<std::uint8_t> mask(gt.size(), 0);
  const Mat4 world_to_target = rigid_inverse(trajectory_pose(scene, target).ego_to_world());
  for (FrameIndex f : frames) {
    const Mat4 ego_f = trajectory_pose(scene, f).ego_to_world();
    for (const auto& rc : scene.rig) {
      const CameraView cam = rc.view();
      const Mat4 cam_to_target = world_to_target * ego_f * cam.cam_to_ego;
      const Mat4 cam_to_world = ego_f * cam.cam_to_ego;
      const Mat3 Rw = cam_to_world.topLeftCorner<3, 3>();
      const Vec3 ow = cam_to_world.topRightCorner<3, 1>();
      const Mat3 Rt = cam_to_target.topLeftCorner<3, 3>();
      const Vec3 ot = cam_to_target.topRightCorner<3, 1>();
      for (int y = 0; y < rc.height; ++y)
        for (int x = 0; x < rc.width; ++x) {
          const Vec3 dc = detail::pixel_ray(cam, x, y);
          const auto hit = trace_scene(scene, ow, (Rw * dc).normalized(), tax);
          if (!hit) continue;
          const double depth = hit->t / dc.norm();
          if (depth < rel.d_min || depth > rel.d_max) continue;
          const Vec3 dir = (Rt * dc).normalized();
          if (const auto v = voxel_index(spec, ot + hit->t * dir)) mask[L.linear(v->i, v->j, v->k)] = 1;
          traverse_voxels(spec, ot, dir, hit->t, [&](const VoxelIndex& v, double, bool) {
            const std::size_t u = L.linear(v.i, v.j, v.k);
            if (tax.is_free(gt.sem[u])) mask[u] = 1;
            return true;
          });
        }
    }
  }
  return mask;
}

// Writes the dataset (manifest and frames) plus gt/<t>.grid and
// gt/<t>.observed (one byte per cell, causal window up to t).
inline void write_scene_dataset(const SceneSpec& scene, const TaxonomyConfig& cfg, const std::filesystem::path& root,
                                unsigned workers = 1) {
  namespace fs = std::filesystem;
  Manifest m;
  for (const auto& c : scene.rig) m.cameras.push_back({c.camera_id, c.width, c.height});
  for (const auto& p : scene.trajectory) m.frames.push_back(p.t);
  write_manifest(root, m);
  fs::create_directories(root / "gt");
  std::vector<FrameIndex> seen;
  for (const auto& pose : scene.trajectory) {
    std::vector<ViewRecord> views(scene.rig.size());
    parallel_for(scene.rig.size(), workers, [&](std::size_t b, std::size_t e) {
      for (std::size_t i = b; i < e; ++i) {
        auto rv = render_view(scene, scene.rig[i], pose.t, cfg.taxonomy, scene.write_candidates ? &cfg.rules : nullptr);
        views[i] = {rv.camera, std::move(rv.geometry), std::move(rv.priors), std::move(rv.candidates)};
      }
    });
    write_sample(root, EgoPose{pose.t, noisy_ego_pose(scene, pose.t)}, views, scene.write_priors,
                 scene.write_candidates);
    seen.push_back(pose.t);
    write_grid(root / "gt" / (std::to_string(pose.t) + ".grid"), generate_ground_truth(scene, pose.t, cfg.taxonomy));
    const auto mask = observation_mask(scene, pose.t, seen, cfg.taxonomy);
    std::ofstream out(root / "gt" / (std::to_string(pose.t) + ".observed"), std::ios::binary);
    if (!out) throw LoadError("cannot write observation mask for frame " + std::to_string(pose.t));
    out.write(reinterpret_cast<const char*>(mask.data()), static_cast<std::streamsize>(mask.size()));
  }
}

inline std::vector<std::uint8_t> read_observation_mask(const std::filesystem::path& path, std::size_t cells) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw LoadError("cannot open " + path.string());
  if (static_cast<std::size_t>(in.tellg()) != cells) {
    throw LoadError(path.string() + ": expected " + std::to_string(cells) + " bytes");
  }
  in.seekg(0);
  std::vector<std::uint8_t> m(cells);
  in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(cells));
  return m;
}

// ---------------------------------------------------------------------------
// JSON

namespace detail {

inline Vec3 vec3_from(const nlohmann::json& j, const char* what) {
  if (!j.is_array() || j.size() != 3) throw ValidationError(std::string(what) + " must be a 3-element array");
  return Vec3(j[0].get<double>(), j[1].get<double>(), j[2].get<double>());
}

inline nlohmann::json grid_to_json(const GridSpec& g) {
  return {{"min", g.min}, {"max", g.max}, {"voxel_size", g.voxel_size}, {"z0", g.z0}};
}

inline GridSpec grid_from_json(const nlohmann::json& j) {
  reject_unknown_keys(j, {"min", "max", "voxel_size", "z0"}, "grid");
  GridSpec g;
  if (j.contains("min")) g.min = j.at("min").get<std::array<double, 3>>();
  if (j.contains("max")) g.max = j.at("max").get<std::array<double, 3>>();
  if (j.contains("voxel_size")) g.voxel_size = j.at("voxel_size").get<double>();
  if (j.contains("z0")) g.z0 = j.at("z0").get<double>();
  g.validate();
  return g;
}

}  // namespace detail

inline nlohmann::json SceneSpec::to_json(const Taxonomy& tax) const {
  nlohmann::json objs = nlohmann::json::array();
  for (const auto& o : objects) {
    nlohmann::json jo = {{"class", tax.info(o.class_id).name},
                         {"shape", o.shape == ShapeKind::kBox ? "box" : "sphere"},
                         {"center", {o.center.x(), o.center.y(), o.center.z()}}};
    if (o.shape == ShapeKind::kBox) {
      jo["size"] = {o.size.x(), o.size.y(), o.size.z()};
      jo["yaw_deg"] = o.yaw * 180.0 / std::numbers::pi;
    } else {
      jo["radius"] = o.radius();
    }
    objs.push_back(jo);
  }
  nlohmann::json rig_j = nlohmann::json::array();
  for (const auto& c : rig) {
    rig_j.push_back({{"camera_id", c.camera_id},
                     {"width", c.width},
                     {"height", c.height},
                     {"hfov_deg", c.hfov_deg},
                     {"position", {c.position.x(), c.position.y(), c.position.z()}},
                     {"yaw_deg", c.yaw_deg},
                     {"pitch_deg", c.pitch_deg}});
  }
  nlohmann::json traj = nlohmann::json::array();
  for (const auto& p : trajectory) traj.push_back({{"t", p.t}, {"x", p.x}, {"y", p.y}, {"yaw_deg", p.yaw_deg}});
  return {{"seed", seed},
          {"extents", extents},
          {"grid", detail::grid_to_json(grid)},
          {"ground",
           {{"z", ground.z},
            {"driveable_half_width", ground.driveable_half_width},
            {"sidewalk_half_width", ground.sidewalk_half_width}}},
          {"objects", objs},
          {"noise",
           {{"depth_sigma", noise.depth_sigma},
            {"label_flip", noise.label_flip},
            {"dropout", noise.dropout},
            {"pose_sigma", noise.pose_sigma}}},
          {"rig", rig_j},
          {"trajectory", traj},
          {"write_priors", write_priors},
          {"write_candidates", write_candidates}};
}

inline SceneSpec SceneSpec::from_json(const nlohmann::json& j, const Taxonomy& tax) {
  using detail::reject_unknown_keys;
  reject_unknown_keys(j,
                      {"seed", "extents", "grid", "ground", "objects", "noise", "rig", "trajectory", "write_priors",
                       "write_candidates"},
                      "scene");
  SceneSpec s;
  s.seed = j.value("seed", std::uint64_t{0});
  if (j.contains("extents")) s.extents = j.at("extents").get<std::array<double, 4>>();
  if (j.contains("grid")) s.grid = detail::grid_from_json(j.at("grid"));
  if (j.contains("ground")) {
    const auto& g = j.at("ground");
    reject_unknown_keys(g, {"z", "driveable_half_width", "sidewalk_half_width"}, "ground");
    s.ground.z = g.value("z", s.ground.z);
    s.ground.driveable_half_width = g.value("driveable_half_width", s.ground.driveable_half_width);
    s.ground.sidewalk_half_width = g.value("sidewalk_half_width", s.ground.sidewalk_half_width);
  }
  for (const auto& jo : j.value("objects", nlohmann::json::array())) {
    reject_unknown_keys(jo, {"class", "shape", "center", "size", "yaw_deg", "radius"}, "object");
    SceneObject o;
    const auto name = jo.at("class").get<std::string>();
    const auto cls = tax.find(name);
    if (!cls) throw ValidationError("scene object has unknown class '" + name + "'");
    o.class_id = *cls;
    const auto shape = jo.value("shape", std::string("box"));
    o.center = detail::vec3_from(jo.at("center"), "object center");
    if (shape == "box") {
      o.size = detail::vec3_from(jo.at("size"), "object size");
      o.yaw = jo.value("yaw_deg", 0.0) * std::numbers::pi / 180.0;
    } else if (shape == "sphere") {
      o.shape = ShapeKind::kSphere;
      const double r = jo.at("radius").get<double>();
      o.size = Vec3(r, r, r);
    } else {
      throw ValidationError("scene object shape must be box or sphere, got '" + shape + "'");
    }
    s.objects.push_back(o);
  }
  if (j.contains("noise")) {
    const auto& n = j.at("noise");
    reject_unknown_keys(n, {"depth_sigma", "label_flip", "dropout", "pose_sigma"}, "noise");
    s.noise.depth_sigma = n.value("depth_sigma", 0.0);
    s.noise.label_flip = n.value("label_flip", 0.0);
    s.noise.dropout = n.value("dropout", 0.0);
    s.noise.pose_sigma = n.value("pose_sigma", 0.0);
  }
  if (j.contains("rig")) {
    for (const auto& jc : j.at("rig")) {
      reject_unknown_keys(jc, {"camera_id", "width", "height", "hfov_deg", "position", "yaw_deg", "pitch_deg"},
                          "camera");
      RigCamera c;
      c.camera_id = jc.at("camera_id").get<CameraIndex>();
      c.width = jc.value("width", c.width);
      c.height = jc.value("height", c.height);
      c.hfov_deg = jc.value("hfov_deg", c.hfov_deg);
      if (jc.contains("position")) c.position = detail::vec3_from(jc.at("position"), "camera position");
      c.yaw_deg = jc.value("yaw_deg", c.yaw_deg);
      c.pitch_deg = jc.value("pitch_deg", c.pitch_deg);
      s.rig.push_back(c);
    }
  } else {
    s.rig = default_rig();
  }
  for (const auto& jp : j.value("trajectory", nlohmann::json::array())) {
    reject_unknown_keys(jp, {"t", "x", "y", "yaw_deg"}, "trajectory pose");
    s.trajectory.push_back({jp.at("t").get<FrameIndex>(), jp.value("x", 0.0), jp.value("y", 0.0),
                            jp.value("yaw_deg", 0.0)});
  }
  s.write_priors = j.value("write_priors", true);
  s.write_candidates = j.value("write_candidates", true);
  s.finalize(tax);
  return s;
}

}  // namespace occfuse
