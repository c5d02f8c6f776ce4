#pragma once

// Voxel metrics (mIoU, IoU_occ) and ray metrics (RayIoU, RayPQ) over a shared
// ray set cast through predicted and ground-truth grids.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <tuple>
#include <vector>

#include "occfuse/common.hpp"
#include "occfuse/geometry.hpp"
#include "occfuse/taxonomy.hpp"
#include "occfuse/voxelize.hpp"

namespace occfuse {

struct RaySet {
  Vec3 origin = Vec3::Zero();  // ego frame
  std::vector<Vec3> directions;
};

// LiDAR-like scan: one ray per azimuth step for each of `rows` elevations
// spread evenly over [el_min, el_max] (degrees).
inline RaySet spherical_ray_set(const Vec3& origin = Vec3::Zero(), double azimuth_step_deg = 1.0, int rows = 32,
                                double el_min_deg = -30.0, double el_max_deg = 10.0) {
  RaySet rs{origin, {}};
  const double deg = std::numbers::pi / 180.0;
  const int n_az = static_cast<int>(std::lround(360.0 / azimuth_step_deg));
  for (int r = 0; r < rows; ++r) {
    const double el = rows == 1 ? el_min_deg : el_min_deg + (el_max_deg - el_min_deg) * r / (rows - 1);
    for (int a = 0; a < n_az; ++a) {
      const double az = a * azimuth_step_deg;
      const double ce = std::cos(el * deg);
      rs.directions.emplace_back(ce * std::cos(az * deg), ce * std::sin(az * deg), std::sin(el * deg));
    }
  }
  return rs;
}

struct RayHit {
  bool hit = false;
  VoxelIndex voxel;
  ClassId class_id = 0;
  InstanceId instance_id = 0;
  double depth = 0.0;  // distance from the origin to where the ray enters the voxel
};

// Front-to-back voxel walk (Amanatides-Woo) from origin along unit dir, clipped
// to the grid and to [0, t_max]. visit(index, entry_distance, contains_origin)
// returns false to stop.
template <typename Visit>
void traverse_voxels(const GridSpec& spec, const Vec3& origin, const Vec3& dir, double t_max, Visit&& visit) {
  const Lattice L = spec.lattice();
  const std::array<int, 3> n{L.nx, L.ny, L.nz};
  const double s = spec.voxel_size;
  // Lattice frame: voxel (i,j,k) spans [i*s, (i+1)*s) on each axis.
  const std::array<double, 3> o{origin.x() - spec.min[0], origin.y() - spec.min[1],
                                origin.z() - spec.z0 - spec.min[2]};
  const std::array<double, 3> d{dir.x(), dir.y(), dir.z()};

  double t_enter = 0.0, t_exit = t_max;
  for (int a = 0; a < 3; ++a) {
    const double hi = n[a] * s;
    if (d[a] == 0.0) {
      if (o[a] < 0.0 || o[a] >= hi) return;
      continue;
    }
    double t0 = (0.0 - o[a]) / d[a], t1 = (hi - o[a]) / d[a];
    if (t0 > t1) std::swap(t0, t1);
    t_enter = std::max(t_enter, t0);
    t_exit = std::min(t_exit, t1);
  }
  if (!(t_exit > t_enter)) return;
  const bool inside = t_enter == 0.0;

  std::array<int, 3> idx{}, step{};
  std::array<double, 3> t_next{}, t_delta{};
  for (int a = 0; a < 3; ++a) {
    const double p = o[a] + t_enter * d[a];
    idx[a] = std::clamp(static_cast<int>(std::floor(p / s)), 0, n[a] - 1);
    if (d[a] > 0) {
      step[a] = 1;
      t_next[a] = ((idx[a] + 1) * s - o[a]) / d[a];
      t_delta[a] = s / d[a];
    } else if (d[a] < 0) {
      step[a] = -1;
      t_next[a] = (idx[a] * s - o[a]) / d[a];
      t_delta[a] = -s / d[a];
    } else {
      step[a] = 0;
      t_next[a] = std::numeric_limits<double>::infinity();
      t_delta[a] = std::numeric_limits<double>::infinity();
    }
  }

  double t_cell = t_enter;
  bool first = true;
  while (true) {
    if (!visit(VoxelIndex{idx[0], idx[1], idx[2]}, t_cell, first && inside)) return;
    first = false;
    int a = 0;
    if (t_next[1] < t_next[a]) a = 1;
    if (t_next[2] < t_next[a]) a = 2;
    t_cell = t_next[a];
    if (t_cell >= t_exit) return;
    idx[a] += step[a];
    if (idx[a] < 0 || idx[a] >= n[a]) return;
    t_next[a] += t_delta[a];
  }
}

// First non-free voxel along the ray; depth is the distance at which the ray
// enters it. The voxel containing the origin is never reported; origins outside
// the grid start at the ray's entry point.
inline RayHit cast_ray(const OccupancyGrid& g, const Taxonomy& tax, const Vec3& origin, const Vec3& dir) {
  const Lattice L = g.spec.lattice();
  RayHit hit;
  traverse_voxels(g.spec, origin, dir, std::numeric_limits<double>::infinity(),
                  [&](const VoxelIndex& v, double t, bool at_origin) {
                    if (at_origin) return true;
                    const std::size_t u = L.linear(v.i, v.j, v.k);
                    if (tax.is_free(g.sem[u])) return true;
                    hit = {true, v, g.sem[u], g.inst[u], t};
                    return false;
                  });
  return hit;
}

inline std::vector<RayHit> cast_rays(const OccupancyGrid& g, const Taxonomy& tax, const RaySet& rays,
                                     unsigned workers = 1) {
  std::vector<RayHit> hits(rays.directions.size());
  parallel_for(hits.size(), workers, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) hits[i] = cast_ray(g, tax, rays.origin, rays.directions[i]);
  });
  return hits;
}

inline void require_same_spec(const OccupancyGrid& a, const OccupancyGrid& b) {
  if (!(a.spec == b.spec)) throw ValidationError("prediction and ground truth grids have different grid specs");
}

// ---------------------------------------------------------------------------
// Voxel metrics

// Per-class intersection/union counts; add() accumulates over samples.
struct VoxelIoUCounts {
  std::vector<std::uint64_t> intersection;
  std::vector<std::uint64_t> uni;
  std::uint64_t occ_intersection = 0;
  std::uint64_t occ_union = 0;

  explicit VoxelIoUCounts(std::size_t classes = 0) : intersection(classes, 0), uni(classes, 0) {}

  // mask (optional) restricts evaluation to voxels with a nonzero entry.
  void add(const OccupancyGrid& pred, const OccupancyGrid& gt, const Taxonomy& tax,
           const std::vector<std::uint8_t>* mask = nullptr) {
    require_same_spec(pred, gt);
    if (mask && mask->size() != gt.size()) throw ValidationError("evaluation mask size does not match the grid");
    const std::size_t nc = tax.classes().size();
    if (intersection.size() != nc) {
      intersection.assign(nc, 0);
      uni.assign(nc, 0);
    }
    for (std::size_t v = 0; v < gt.size(); ++v) {
      if (mask && !(*mask)[v]) continue;
      const ClassId p = pred.sem[v], t = gt.sem[v];
      const bool po = !tax.is_free(p), to = !tax.is_free(t);
      if (po && to) ++occ_intersection;
      if (po || to) ++occ_union;
      const bool ps = tax.is_semantic(p), ts = tax.is_semantic(t);
      if (ps && ts && p == t) {
        ++intersection[p];
        ++uni[p];
        continue;
      }
      if (ps) ++uni[p];
      if (ts) ++uni[t];
    }
  }
};

struct MIoUResult {
  std::vector<std::optional<double>> per_class;  // nullopt: class absent from both grids
  double mean = 0.0;
  std::size_t classes_in_mean = 0;
};

inline MIoUResult miou_from_counts(const VoxelIoUCounts& c, const Taxonomy& tax) {
  MIoUResult r;
  r.per_class.resize(c.uni.size());
  double sum = 0.0;
  for (std::size_t k = 0; k < c.uni.size(); ++k) {
    if (c.uni[k] == 0) continue;
    const double iou = static_cast<double>(c.intersection[k]) / static_cast<double>(c.uni[k]);
    r.per_class[k] = iou;
    if (!tax.is_excluded(static_cast<ClassId>(k))) {
      sum += iou;
      ++r.classes_in_mean;
    }
  }
  r.mean = r.classes_in_mean ? sum / static_cast<double>(r.classes_in_mean) : 0.0;
  return r;
}

inline MIoUResult miou(const OccupancyGrid& pred, const OccupancyGrid& gt, const Taxonomy& tax,
                       const std::vector<std::uint8_t>* mask = nullptr) {
  VoxelIoUCounts c(tax.classes().size());
  c.add(pred, gt, tax, mask);
  return miou_from_counts(c, tax);
}

inline double iou_occ_from_counts(const VoxelIoUCounts& c) {
  if (c.occ_union == 0) return 1.0;
  return static_cast<double>(c.occ_intersection) / static_cast<double>(c.occ_union);
}

inline double iou_occ(const OccupancyGrid& pred, const OccupancyGrid& gt, const Taxonomy& tax,
                      const std::vector<std::uint8_t>* mask = nullptr) {
  VoxelIoUCounts c(tax.classes().size());
  c.add(pred, gt, tax, mask);
  return iou_occ_from_counts(c);
}

// ---------------------------------------------------------------------------
// Ray metrics

inline const std::vector<double>& default_depth_thresholds() {
  static const std::vector<double> t{1.0, 2.0, 4.0};
  return t;
}

// Rays whose ground-truth first hit is an excluded class are dropped.
inline bool ray_counts(const RayHit& gt, const Taxonomy& tax) {
  return !(gt.hit && tax.is_semantic(gt.class_id) && tax.is_excluded(gt.class_id));
}

struct RayIoUCounts {
  std::vector<double> thresholds;
  // [threshold][class]
  std::vector<std::vector<std::uint64_t>> tp, pred_count, gt_count;

  RayIoUCounts(std::vector<double> thr, std::size_t classes)
      : thresholds(std::move(thr)),
        tp(thresholds.size(), std::vector<std::uint64_t>(classes, 0)),
        pred_count(thresholds.size(), std::vector<std::uint64_t>(classes, 0)),
        gt_count(thresholds.size(), std::vector<std::uint64_t>(classes, 0)) {}

  void add(const std::vector<RayHit>& pred, const std::vector<RayHit>& gt, const Taxonomy& tax) {
    if (pred.size() != gt.size()) throw ValidationError("ray hit lists differ in length");
    for (std::size_t r = 0; r < gt.size(); ++r) {
      if (!ray_counts(gt[r], tax)) continue;
      const bool ps = pred[r].hit && tax.is_semantic(pred[r].class_id);
      const bool gs = gt[r].hit && tax.is_semantic(gt[r].class_id);
      for (std::size_t t = 0; t < thresholds.size(); ++t) {
        if (ps) ++pred_count[t][pred[r].class_id];
        if (gs) ++gt_count[t][gt[r].class_id];
        if (ps && gs && pred[r].class_id == gt[r].class_id &&
            std::abs(pred[r].depth - gt[r].depth) <= thresholds[t]) {
          ++tp[t][gt[r].class_id];
        }
      }
    }
  }
};

struct RayMetricResult {
  std::vector<double> thresholds;
  std::vector<std::vector<std::optional<double>>> per_class;  // [threshold][class]
  std::vector<double> per_threshold;                          // mean over classes
  double mean = 0.0;                                          // mean over thresholds
};

inline RayMetricResult rayiou_from_counts(const RayIoUCounts& c, const Taxonomy& tax) {
  RayMetricResult r;
  r.thresholds = c.thresholds;
  for (std::size_t t = 0; t < c.thresholds.size(); ++t) {
    std::vector<std::optional<double>> pc(c.tp[t].size());
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t k = 0; k < pc.size(); ++k) {
      const double denom = static_cast<double>(c.gt_count[t][k] + c.pred_count[t][k] - c.tp[t][k]);
      if (denom <= 0.0) continue;
      pc[k] = static_cast<double>(c.tp[t][k]) / denom;
      if (!tax.is_excluded(static_cast<ClassId>(k))) {
        sum += *pc[k];
        ++n;
      }
    }
    r.per_class.push_back(std::move(pc));
    r.per_threshold.push_back(n ? sum / static_cast<double>(n) : 0.0);
  }
  double s = 0.0;
  for (double v : r.per_threshold) s += v;
  r.mean = r.per_threshold.empty() ? 0.0 : s / static_cast<double>(r.per_threshold.size());
  return r;
}

// TP/FP/FN tallies and matched-IoU sums per class; accumulates over samples.
struct RayPQCounts {
  std::vector<double> thresholds;
  std::vector<std::vector<double>> iou_sum;  // [threshold][class]
  std::vector<std::vector<std::uint64_t>> tp, fp, fn;

  RayPQCounts(std::vector<double> thr, std::size_t classes)
      : thresholds(std::move(thr)),
        iou_sum(thresholds.size(), std::vector<double>(classes, 0.0)),
        tp(thresholds.size(), std::vector<std::uint64_t>(classes, 0)),
        fp(thresholds.size(), std::vector<std::uint64_t>(classes, 0)),
        fn(thresholds.size(), std::vector<std::uint64_t>(classes, 0)) {}

  // Segments: thing classes by (class, instance id), other classes by class
  // alone. A predicted and a ground-truth segment match when they share the
  // class and their ray-set IoU is strictly above 0.5; a ray counts toward the
  // intersection only if its depths agree within the threshold.
  void add(const std::vector<RayHit>& pred, const std::vector<RayHit>& gt, const Taxonomy& tax) {
    if (pred.size() != gt.size()) throw ValidationError("ray hit lists differ in length");
    using Key = std::pair<ClassId, InstanceId>;
    auto key = [&](const RayHit& h) -> std::optional<Key> {
      if (!h.hit || !tax.is_semantic(h.class_id)) return std::nullopt;
      return Key{h.class_id, tax.is_thing(h.class_id) ? h.instance_id : 0};
    };
    std::map<Key, std::uint64_t> gt_size, pred_size;
    std::vector<std::optional<Key>> gk(gt.size()), pk(gt.size());
    for (std::size_t r = 0; r < gt.size(); ++r) {
      if (!ray_counts(gt[r], tax)) continue;
      gk[r] = key(gt[r]);
      pk[r] = key(pred[r]);
      if (gk[r]) ++gt_size[*gk[r]];
      if (pk[r]) ++pred_size[*pk[r]];
    }
    for (std::size_t t = 0; t < thresholds.size(); ++t) {
      std::map<std::pair<Key, Key>, std::uint64_t> inter;
      for (std::size_t r = 0; r < gt.size(); ++r) {
        if (!gk[r] || !pk[r] || gk[r]->first != pk[r]->first) continue;
        if (std::abs(pred[r].depth - gt[r].depth) <= thresholds[t]) ++inter[{*gk[r], *pk[r]}];
      }
      std::map<Key, bool> gt_matched, pred_matched;
      for (const auto& [pair, n] : inter) {
        const auto& [g, p] = pair;
        const double iou = static_cast<double>(n) / static_cast<double>(gt_size[g] + pred_size[p] - n);
        if (iou > 0.5) {
          gt_matched[g] = true;
          pred_matched[p] = true;
          ++tp[t][g.first];
          iou_sum[t][g.first] += iou;
        }
      }
      for (const auto& [g, _] : gt_size)
        if (!gt_matched.count(g)) ++fn[t][g.first];
      for (const auto& [p, _] : pred_size)
        if (!pred_matched.count(p)) ++fp[t][p.first];
    }
  }
};

inline RayMetricResult raypq_from_counts(const RayPQCounts& c, const Taxonomy& tax) {
  RayMetricResult r;
  r.thresholds = c.thresholds;
  for (std::size_t t = 0; t < c.thresholds.size(); ++t) {
    std::vector<std::optional<double>> pc(c.tp[t].size());
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t k = 0; k < pc.size(); ++k) {
      const double denom = static_cast<double>(c.tp[t][k]) + 0.5 * static_cast<double>(c.fp[t][k]) +
                           0.5 * static_cast<double>(c.fn[t][k]);
      if (denom <= 0.0) continue;
      pc[k] = c.iou_sum[t][k] / denom;
      if (!tax.is_excluded(static_cast<ClassId>(k))) {
        sum += *pc[k];
        ++n;
      }
    }
    r.per_class.push_back(std::move(pc));
    r.per_threshold.push_back(n ? sum / static_cast<double>(n) : 0.0);
  }
  double s = 0.0;
  for (double v : r.per_threshold) s += v;
  r.mean = r.per_threshold.empty() ? 0.0 : s / static_cast<double>(r.per_threshold.size());
  return r;
}

inline RayMetricResult rayiou(const OccupancyGrid& pred, const OccupancyGrid& gt, const Taxonomy& tax,
                              const RaySet& rays, const std::vector<double>& thresholds = default_depth_thresholds(),
                              unsigned workers = 1) {
  require_same_spec(pred, gt);
  RayIoUCounts c(thresholds, tax.classes().size());
  c.add(cast_rays(pred, tax, rays, workers), cast_rays(gt, tax, rays, workers), tax);
  return rayiou_from_counts(c, tax);
}

inline RayMetricResult raypq(const OccupancyGrid& pred, const OccupancyGrid& gt, const Taxonomy& tax,
                             const RaySet& rays, const std::vector<double>& thresholds = default_depth_thresholds(),
                             unsigned workers = 1) {
  require_same_spec(pred, gt);
  RayPQCounts c(thresholds, tax.classes().size());
  c.add(cast_rays(pred, tax, rays, workers), cast_rays(gt, tax, rays, workers), tax);
  return raypq_from_counts(c, tax);
}

// All metrics of one or more samples, accumulated with add().
struct MetricSuite {
  VoxelIoUCounts voxel;
  RayIoUCounts ray_iou;
  RayPQCounts ray_pq;

  MetricSuite(const Taxonomy& tax, const std::vector<double>& thresholds = default_depth_thresholds())
      : voxel(tax.classes().size()),
        ray_iou(thresholds, tax.classes().size()),
        ray_pq(thresholds, tax.classes().size()) {}

  void add(const OccupancyGrid& pred, const OccupancyGrid& gt, const Taxonomy& tax, const RaySet& rays,
           unsigned workers = 1, const std::vector<std::uint8_t>* mask = nullptr) {
    voxel.add(pred, gt, tax, mask);
    const auto ph = cast_rays(pred, tax, rays, workers);
    const auto gh = cast_rays(gt, tax, rays, workers);
    ray_iou.add(ph, gh, tax);
    ray_pq.add(ph, gh, tax);
  }
};

struct MetricSummary {
  MIoUResult miou;
  double iou_occ = 0.0;
  RayMetricResult ray_iou;
  RayMetricResult ray_pq;
};

inline MetricSummary summarize(const MetricSuite& m, const Taxonomy& tax) {
  return {miou_from_counts(m.voxel, tax), iou_occ_from_counts(m.voxel), rayiou_from_counts(m.ray_iou, tax),
          raypq_from_counts(m.ray_pq, tax)};
}

}  // namespace occfuse
