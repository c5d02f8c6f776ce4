#pragma once

// Thing-instance recovery from current-sample instance priors: yaw-box fitting,
// robust outlier filtering, conservative IoSV merging and point re-assignment.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "occfuse/common.hpp"
#include "occfuse/geometry.hpp"
#include "occfuse/lift.hpp"
#include "occfuse/taxonomy.hpp"

namespace occfuse {

inline constexpr double kMinExtent = 1e-3;

struct YawBox {
  Vec3 center = Vec3::Zero();
  double yaw = 0.0;                  // [-pi/2, pi/2), direction of the length axis
  Vec3 extents = Vec3::Constant(kMinExtent);  // length, width, height
  ClassId class_id = 0;
  InstanceId instance_id = 0;
  std::size_t support = 0;

  double volume() const { return extents.x() * extents.y() * extents.z(); }

  // Box-frame coordinates of a point (length axis = x).
  Vec3 to_local(const Vec3& p) const {
    const double c = std::cos(yaw), s = std::sin(yaw);
    const Vec3 d = p - center;
    return Vec3(c * d.x() + s * d.y(), -s * d.x() + c * d.y(), d.z());
  }

  bool contains(const Vec3& p, double tol = 1e-6) const {
    const Vec3 l = to_local(p);
    return std::abs(l.x()) <= extents.x() / 2 + tol && std::abs(l.y()) <= extents.y() / 2 + tol &&
           std::abs(l.z()) <= extents.z() / 2 + tol;
  }

  // Euclidean distance to the solid box; zero inside.
  double distance(const Vec3& p) const {
    const Vec3 l = to_local(p);
    const Vec3 excess = (l.cwiseAbs() - extents / 2).cwiseMax(0.0);
    return excess.norm();
  }

  // Ground-plane corners, counter-clockwise.
  std::array<Eigen::Vector2d, 4> footprint() const {
    const double c = std::cos(yaw), s = std::sin(yaw);
    const Eigen::Vector2d ax(c, s), ay(-s, c);
    const Eigen::Vector2d ctr(center.x(), center.y());
    const double hl = extents.x() / 2, hw = extents.y() / 2;
    return {ctr - hl * ax - hw * ay, ctr + hl * ax - hw * ay, ctr + hl * ax + hw * ay, ctr - hl * ax + hw * ay};
  }
};

namespace detail {

inline double cross2(const Eigen::Vector2d& o, const Eigen::Vector2d& a, const Eigen::Vector2d& b) {
  return (a.x() - o.x()) * (b.y() - o.y()) - (a.y() - o.y()) * (b.x() - o.x());
}

// Andrew's monotone chain; counter-clockwise hull without collinear points.
inline std::vector<Eigen::Vector2d> convex_hull(std::vector<Eigen::Vector2d> pts) {
  std::sort(pts.begin(), pts.end(), [](const auto& a, const auto& b) {
    return a.x() < b.x() || (a.x() == b.x() && a.y() < b.y());
  });
  pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
  if (pts.size() < 3) return pts;
  std::vector<Eigen::Vector2d> hull(2 * pts.size());
  std::size_t k = 0;
  for (const auto& p : pts) {
    while (k >= 2 && cross2(hull[k - 2], hull[k - 1], p) <= 0) --k;
    hull[k++] = p;
  }
  for (std::size_t i = pts.size() - 1, t = k + 1; i-- > 0;) {
    while (k >= t && cross2(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
    hull[k++] = pts[i];
  }
  hull.resize(k - 1);
  return hull;
}

// Orientation of the minimum-area enclosing rectangle, with the longer side
// along the returned angle. Used when the horizontal covariance is isotropic.
inline double min_area_rectangle_yaw(std::span<const Vec3> points) {
  std::vector<Eigen::Vector2d> xy;
  xy.reserve(points.size());
  for (const auto& p : points) xy.emplace_back(p.x(), p.y());
  const auto hull = convex_hull(std::move(xy));
  if (hull.size() < 3) return 0.0;
  double best_area = std::numeric_limits<double>::infinity();
  double best_yaw = 0.0, best_l = 0.0, best_w = 0.0;
  for (std::size_t e = 0; e < hull.size(); ++e) {
    const Eigen::Vector2d d = hull[(e + 1) % hull.size()] - hull[e];
    const double ang = std::atan2(d.y(), d.x());
    const double c = std::cos(ang), s = std::sin(ang);
    double umin = std::numeric_limits<double>::infinity(), umax = -umin, vmin = umin, vmax = -umin;
    for (const auto& p : hull) {
      const double u = c * p.x() + s * p.y(), v = -s * p.x() + c * p.y();
      umin = std::min(umin, u);
      umax = std::max(umax, u);
      vmin = std::min(vmin, v);
      vmax = std::max(vmax, v);
    }
    const double area = (umax - umin) * (vmax - vmin);
    if (area < best_area * (1.0 - 1e-12)) {
      best_area = area;
      best_yaw = ang;
      best_l = umax - umin;
      best_w = vmax - vmin;
    }
  }
  if (best_w > best_l * (1.0 + 1e-9)) best_yaw += std::numbers::pi / 2;
  double yaw = normalize_yaw(best_yaw);
  // Square footprint: orientation is only defined modulo a quarter turn.
  if (std::abs(best_l - best_w) <= 1e-9 * std::max(best_l, best_w)) {
    constexpr double q = std::numbers::pi / 4;
    if (yaw >= q) yaw -= 2 * q;
    if (yaw < -q) yaw += 2 * q;
  }
  return yaw;
}

}  // namespace detail

// Ground-plane yaw from the principal axis of the horizontal covariance.
// Coincident points give yaw 0; an isotropic covariance falls back to the
// minimum-area rectangle.
inline double principal_yaw(std::span<const Vec3> points) {
  if (points.empty()) return 0.0;
  double mx = 0, my = 0;
  for (const auto& p : points) {
    mx += p.x();
    my += p.y();
  }
  mx /= static_cast<double>(points.size());
  my /= static_cast<double>(points.size());
  double sxx = 0, syy = 0, sxy = 0;
  for (const auto& p : points) {
    const double dx = p.x() - mx, dy = p.y() - my;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  const double trace = sxx + syy;
  if (!(trace > 1e-18)) return 0.0;
  const double gap = std::hypot(sxx - syy, 2 * sxy);
  if (gap <= 1e-9 * trace) return detail::min_area_rectangle_yaw(points);
  return normalize_yaw(0.5 * std::atan2(2 * sxy, sxx - syy));
}

// Tight box at a given yaw.
inline YawBox fit_box_at_yaw(std::span<const Vec3> points, double yaw) {
  YawBox b;
  b.yaw = normalize_yaw(yaw);
  b.support = points.size();
  if (points.empty()) return b;
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  double umin = std::numeric_limits<double>::infinity(), umax = -umin;
  double vmin = umin, vmax = -umin, zmin = umin, zmax = -umin;
  for (const auto& p : points) {
    const double u = c * p.x() + s * p.y(), v = -s * p.x() + c * p.y();
    umin = std::min(umin, u);
    umax = std::max(umax, u);
    vmin = std::min(vmin, v);
    vmax = std::max(vmax, v);
    zmin = std::min(zmin, p.z());
    zmax = std::max(zmax, p.z());
  }
  const double uc = (umin + umax) / 2, vc = (vmin + vmax) / 2;
  b.center = Vec3(c * uc - s * vc, s * uc + c * vc, (zmin + zmax) / 2);
  b.extents = Vec3(std::max(umax - umin, kMinExtent), std::max(vmax - vmin, kMinExtent),
                   std::max(zmax - zmin, kMinExtent));
  return b;
}

inline YawBox fit_yaw_box(std::span<const Vec3> points) {
  if (points.empty()) throw ValidationError("fit_yaw_box needs at least one point");
  return fit_box_at_yaw(points, principal_yaw(points));
}

// Intersection volume over the smaller box volume.
inline double iosv(const YawBox& a, const YawBox& b) {
  const double va = a.volume(), vb = b.volume();
  if (!(va > 0.0) || !(vb > 0.0)) return 0.0;
  const double zlo = std::max(a.center.z() - a.extents.z() / 2, b.center.z() - b.extents.z() / 2);
  const double zhi = std::min(a.center.z() + a.extents.z() / 2, b.center.z() + b.extents.z() / 2);
  if (zhi <= zlo) return 0.0;

  // Sutherland-Hodgman: clip a's footprint by each edge of b's (both convex, CCW).
  const auto fa = a.footprint();
  const auto fb = b.footprint();
  std::vector<Eigen::Vector2d> poly(fa.begin(), fa.end());
  for (int e = 0; e < 4 && !poly.empty(); ++e) {
    const Eigen::Vector2d& p0 = fb[e];
    const Eigen::Vector2d& p1 = fb[(e + 1) % 4];
    std::vector<Eigen::Vector2d> next;
    for (std::size_t i = 0; i < poly.size(); ++i) {
      const auto& cur = poly[i];
      const auto& prev = poly[(i + poly.size() - 1) % poly.size()];
      const double dc = detail::cross2(p0, p1, cur);
      const double dp = detail::cross2(p0, p1, prev);
      if (dc >= 0) {
        if (dp < 0) next.push_back(prev + (cur - prev) * (dp / (dp - dc)));
        next.push_back(cur);
      } else if (dp >= 0) {
        next.push_back(prev + (cur - prev) * (dp / (dp - dc)));
      }
    }
    poly = std::move(next);
  }
  double area = 0.0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const auto& p = poly[i];
    const auto& q = poly[(i + 1) % poly.size()];
    area += p.x() * q.y() - q.x() * p.y();
  }
  area = std::abs(area) / 2;
  return std::clamp(area * (zhi - zlo) / std::min(va, vb), 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// Robust statistics

namespace detail {

// Linear-interpolated quantile of unsorted values.
inline double quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

inline double median(std::vector<double> v) { return quantile(std::move(v), 0.5); }

}  // namespace detail

struct SizeInterval {
  ClassId class_id = 0;
  Vec3 min = Vec3::Constant(kMinExtent);  // length, width, height
  Vec3 max = Vec3::Constant(kMinExtent);

  // Horizontal extents are compared longest-to-length.
  bool admits(const Vec3& extents) const {
    const double l = std::max(extents.x(), extents.y());
    const double w = std::min(extents.x(), extents.y());
    return l >= min.x() && l <= max.x() && w >= min.y() && w <= max.y() && extents.z() >= min.z() &&
           extents.z() <= max.z();
  }

  void validate() const {
    if (!(min.array() > 0.0).all() || !(min.array() <= max.array()).all()) {
      throw ValidationError("size interval for class " + std::to_string(class_id) +
                            " must satisfy 0 < min <= max componentwise");
    }
  }
};

// Default maximum sizes (length, width, height in meters) for the Occ3D thing
// classes. These are configuration defaults, not measured values.
inline std::map<ClassId, SizeInterval> default_size_intervals(const Taxonomy& tax) {
  const std::vector<std::pair<const char*, Vec3>> table = {
      {"car", {6.0, 2.5, 2.5}},         {"truck", {14.0, 3.2, 4.5}},     {"bus", {15.0, 3.2, 4.5}},
      {"trailer", {18.0, 3.5, 4.5}},    {"construction_vehicle", {12.0, 4.0, 5.0}},
      {"motorcycle", {3.0, 1.2, 2.0}},  {"bicycle", {3.0, 1.2, 2.0}},    {"pedestrian", {1.2, 1.2, 2.2}},
      {"traffic_cone", {0.8, 0.8, 1.2}}, {"barrier", {20.0, 1.0, 2.0}},
  };
  std::map<ClassId, SizeInterval> out;
  for (const auto& [name, mx] : table) {
    if (auto id = tax.find(name)) out[*id] = SizeInterval{*id, Vec3::Constant(kMinExtent), mx};
  }
  return out;
}

struct InstanceParams {
  double iqr_factor = 1.5;
  double deviation_k = 3.0;
  double tighten = 0.8;
  int max_passes = 4;
  std::size_t min_points = 5;
  double merge_iosv = 0.45;
  double reassign_distance = 2.0;
  std::map<ClassId, SizeInterval> intervals;

  void validate(const Taxonomy& tax) const {
    if (!(iqr_factor > 0.0)) throw ValidationError("iqr_factor must be positive");
    if (!(deviation_k > 0.0)) throw ValidationError("deviation_k must be positive");
    if (!(tighten > 0.0 && tighten <= 1.0)) throw ValidationError("tighten must be in (0, 1]");
    if (max_passes < 1) throw ValidationError("max_passes must be at least 1");
    if (!(merge_iosv >= 0.0 && merge_iosv <= 1.0)) throw ValidationError("merge_iosv (tau_ov) must be in [0, 1]");
    if (!(reassign_distance >= 0.0)) throw ValidationError("reassign_distance must be non-negative");
    for (ClassId c : tax.thing_classes()) {
      auto it = intervals.find(c);
      if (it == intervals.end()) {
        throw ValidationError("thing class '" + tax.info(c).name + "' has no size interval");
      }
      it->second.validate();
    }
  }
};

struct RefinedCandidate {
  std::vector<LabeledPoint> points;
  YawBox box;
};

namespace detail {

inline std::vector<Vec3> positions(const std::vector<LabeledPoint>& pts) {
  std::vector<Vec3> out;
  out.reserve(pts.size());
  for (const auto& p : pts) out.push_back(p.xyz);
  return out;
}

// Drops points whose depth lies outside [Q1 - f*IQR, Q3 + f*IQR] of their camera.
inline std::vector<LabeledPoint> iqr_depth_filter(const std::vector<LabeledPoint>& pts, double f) {
  std::map<CameraIndex, std::pair<double, double>> bounds;
  std::map<CameraIndex, std::vector<double>> depths;
  for (const auto& p : pts) depths[p.cam].push_back(p.depth);
  for (auto& [cam, d] : depths) {
    const double q1 = quantile(d, 0.25), q3 = quantile(d, 0.75);
    const double iqr = q3 - q1;
    bounds[cam] = {q1 - f * iqr, q3 + f * iqr};
  }
  std::vector<LabeledPoint> out;
  out.reserve(pts.size());
  for (const auto& p : pts) {
    const auto [lo, hi] = bounds[p.cam];
    if (p.depth >= lo && p.depth <= hi) out.push_back(p);
  }
  return out;
}

// Drops points farther than k robust sigmas (1.4826 * MAD) from the median along
// any axis of the horizontal principal frame or z.
inline std::vector<LabeledPoint> deviation_prune(const std::vector<LabeledPoint>& pts, double k) {
  if (pts.empty()) return pts;
  const auto xyz = positions(pts);
  const double yaw = principal_yaw(xyz);
  const double c = std::cos(yaw), s = std::sin(yaw);
  std::array<std::vector<double>, 3> axes;
  for (const auto& p : xyz) {
    axes[0].push_back(c * p.x() + s * p.y());
    axes[1].push_back(-s * p.x() + c * p.y());
    axes[2].push_back(p.z());
  }
  std::array<double, 3> med{}, sigma{};
  for (int a = 0; a < 3; ++a) {
    med[a] = median(axes[a]);
    std::vector<double> dev;
    dev.reserve(axes[a].size());
    for (double v : axes[a]) dev.push_back(std::abs(v - med[a]));
    sigma[a] = 1.4826 * median(std::move(dev));
  }
  std::vector<LabeledPoint> out;
  out.reserve(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    bool keep = true;
    for (int a = 0; a < 3 && keep; ++a) {
      if (sigma[a] > 0.0 && std::abs(axes[a][i] - med[a]) > k * sigma[a]) keep = false;
    }
    if (keep) out.push_back(pts[i]);
  }
  return out;
}

}  // namespace detail

// Filters one instance prior and fits its box. Each pass applies the per-camera
// IQR depth filter and the principal-frame deviation prune to the points that
// survived the previous pass; while the box exceeds the class interval both
// thresholds shrink by `tighten`. Returns nullopt when the candidate is rejected.
inline std::optional<RefinedCandidate> refine_candidate(const std::vector<LabeledPoint>& points, ClassId class_id,
                                                        const InstanceParams& params) {
  auto it = params.intervals.find(class_id);
  if (it == params.intervals.end()) return std::nullopt;
  const SizeInterval& interval = it->second;

  std::vector<LabeledPoint> kept = points;
  double f = params.iqr_factor, k = params.deviation_k;
  std::optional<YawBox> prev;
  for (int pass = 0; pass < params.max_passes; ++pass) {
    kept = detail::iqr_depth_filter(kept, f);
    kept = detail::deviation_prune(kept, k);
    if (kept.size() < params.min_points || kept.empty()) return std::nullopt;
    const auto xyz = detail::positions(kept);
    YawBox box = fit_yaw_box(xyz);
    // Kept points only shrink, so refitting at the previous yaw can never grow.
    if (prev && box.volume() > prev->volume()) box = fit_box_at_yaw(xyz, prev->yaw);
    box.class_id = class_id;
    box.support = kept.size();
    if (interval.admits(box.extents)) return RefinedCandidate{std::move(kept), box};
    prev = box;
    f *= params.tighten;
    k *= params.tighten;
  }
  return std::nullopt;
}

struct InstanceCandidate {
  std::vector<LabeledPoint> points;
  YawBox box;
};

// Greedy same-class agglomeration: merge the pair with the highest IoSV at or
// above tau_ov (ties: larger combined support, then lower indices), refit the
// union, repeat. If the union is rejected the smaller-support box is dropped as
// a duplicate. Surviving boxes get ids 1..N in list order.
inline std::vector<InstanceCandidate> merge_boxes(std::vector<InstanceCandidate> cands, const InstanceParams& params) {
  while (true) {
    std::optional<std::pair<std::size_t, std::size_t>> best;
    double best_iosv = -1.0;
    std::size_t best_support = 0;
    for (std::size_t i = 0; i < cands.size(); ++i) {
      for (std::size_t j = i + 1; j < cands.size(); ++j) {
        if (cands[i].box.class_id != cands[j].box.class_id) continue;
        const double o = iosv(cands[i].box, cands[j].box);
        if (o < params.merge_iosv) continue;
        const std::size_t support = cands[i].box.support + cands[j].box.support;
        if (o > best_iosv || (o == best_iosv && support > best_support)) {
          best_iosv = o;
          best_support = support;
          best = {i, j};
        }
      }
    }
    if (!best) break;
    auto [i, j] = *best;
    std::vector<LabeledPoint> uni = cands[i].points;
    uni.insert(uni.end(), cands[j].points.begin(), cands[j].points.end());
    if (auto merged = refine_candidate(uni, cands[i].box.class_id, params)) {
      cands[i] = InstanceCandidate{std::move(merged->points), merged->box};
      cands.erase(cands.begin() + static_cast<std::ptrdiff_t>(j));
    } else {
      const std::size_t drop = cands[j].box.support > cands[i].box.support ? i : j;
      cands.erase(cands.begin() + static_cast<std::ptrdiff_t>(drop));
    }
  }
  for (std::size_t i = 0; i < cands.size(); ++i) cands[i].box.instance_id = static_cast<InstanceId>(i + 1);
  return cands;
}

struct ReassignStats {
  std::size_t contained = 0;
  std::size_t nearest = 0;
  std::size_t ignored = 0;
};

// Thing points: containing box (ties: nearest center, then smaller id) or the
// nearest same-class box closer than d_nn, else ignore. Stuff points take their
// class-level id.
inline LabeledPointCloud reassign_points(LabeledPointCloud cloud, const std::vector<YawBox>& boxes,
                                         const Taxonomy& taxonomy, double d_nn, ReassignStats* stats = nullptr) {
  for (auto& p : cloud) {
    if (!taxonomy.is_semantic(p.sem)) {
      p.inst = 0;
      continue;
    }
    if (!taxonomy.is_thing(p.sem)) {
      p.inst = stuff_instance_id(p.sem);
      continue;
    }
    const YawBox* container = nullptr;
    double container_d = 0.0;
    for (const auto& b : boxes) {
      if (!b.contains(p.xyz)) continue;
      const double d = (b.center - p.xyz).norm();
      if (!container || d < container_d || (d == container_d && b.instance_id < container->instance_id)) {
        container = &b;
        container_d = d;
      }
    }
    if (container) {
      p.inst = container->instance_id;
      p.sem = container->class_id;
      if (stats) ++stats->contained;
      continue;
    }
    const YawBox* near = nullptr;
    double near_d = 0.0;
    for (const auto& b : boxes) {
      if (b.class_id != p.sem) continue;
      const double d = b.distance(p.xyz);
      if (d >= d_nn) continue;
      if (!near || d < near_d || (d == near_d && b.instance_id < near->instance_id)) {
        near = &b;
        near_d = d;
      }
    }
    if (near) {
      p.inst = near->instance_id;
      if (stats) ++stats->nearest;
    } else {
      p.sem = taxonomy.ignore_id();
      p.inst = 0;
      if (stats) ++stats->ignored;
    }
  }
  return cloud;
}

struct InstanceResult {
  LabeledPointCloud cloud;
  std::vector<YawBox> boxes;
  std::size_t candidates = 0;
  std::size_t rejected = 0;
  ReassignStats reassign;
};

// Full instance stage on a fused cloud. Candidates come only from frame
// current_t; reassignment covers the whole cloud.
inline InstanceResult identify_instances(const LabeledPointCloud& cloud, FrameIndex current_t,
                                         const Taxonomy& taxonomy, const InstanceParams& params,
                                         unsigned workers = 1) {
  std::map<InstanceId, std::vector<LabeledPoint>> groups;
  for (const auto& p : cloud) {
    if (p.t == current_t && p.inst != 0 && taxonomy.is_thing(p.sem)) groups[p.inst].push_back(p);
  }
  std::vector<std::pair<ClassId, std::vector<LabeledPoint>>> priors;
  priors.reserve(groups.size());
  for (auto& [id, pts] : groups) {
    std::map<ClassId, std::size_t> hist;
    for (const auto& p : pts) ++hist[p.sem];
    ClassId cls = hist.begin()->first;
    std::size_t best = 0;
    for (const auto& [c, n] : hist) {
      if (n > best) {
        best = n;
        cls = c;
      }
    }
    std::erase_if(pts, [cls](const LabeledPoint& p) { return p.sem != cls; });
    priors.emplace_back(cls, std::move(pts));
  }

  std::vector<std::optional<RefinedCandidate>> refined(priors.size());
  parallel_for(priors.size(), workers, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) refined[i] = refine_candidate(priors[i].second, priors[i].first, params);
  });

  InstanceResult res;
  res.candidates = priors.size();
  std::vector<InstanceCandidate> cands;
  for (auto& r : refined) {
    if (!r) {
      ++res.rejected;
      continue;
    }
    cands.push_back({std::move(r->points), r->box});
  }
  auto merged = merge_boxes(std::move(cands), params);
  for (const auto& m : merged) res.boxes.push_back(m.box);
  res.cloud = reassign_points(cloud, res.boxes, taxonomy, params.reassign_distance, &res.reassign);
  return res;
}

// Debug table: id class cx cy cz yaw l w h support
inline void write_box_table(const std::filesystem::path& path, const std::vector<YawBox>& boxes,
                            const Taxonomy& taxonomy) {
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write " + path.string());
  out << "# id class cx cy cz yaw l w h support\n";
  char line[256];
  for (const auto& b : boxes) {
    std::snprintf(line, sizeof line, "%u %s %.4f %.4f %.4f %.6f %.4f %.4f %.4f %zu\n", b.instance_id,
                  taxonomy.info(b.class_id).name.c_str(), b.center.x(), b.center.y(), b.center.z(), b.yaw,
                  b.extents.x(), b.extents.y(), b.extents.z(), b.support);
    out << line;
  }
}

}  // namespace occfuse
