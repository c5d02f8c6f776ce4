#pragma once

// Confidence stabilization, reliability filtering, lifting to world-frame
// labeled points, and temporal window fusion.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "occfuse/common.hpp"
#include "occfuse/geometry.hpp"
#include "occfuse/ingest.hpp"
#include "occfuse/raster.hpp"
#include "occfuse/taxonomy.hpp"

namespace occfuse {

struct LabeledPoint {
  Vec3 xyz = Vec3::Zero();
  ClassId sem = 0;
  InstanceId inst = 0;
  float conf = 0.0f;
  FrameIndex t = 0;
  CameraIndex cam = 0;
  float depth = 0.0f;

  friend bool operator==(const LabeledPoint&, const LabeledPoint&) = default;
};

using LabeledPointCloud = std::vector<LabeledPoint>;

struct ReliabilityParams {
  double tau_c = 1e-5;
  double d_min = 1.0;
  double d_max = 50.0;
};

// log10(C) + 1 for finite positive C, 1 otherwise.
inline double stabilize_confidence(double c) {
  if (std::isfinite(c) && c > 0.0) return std::log10(c) + 1.0;
  return 1.0;
}

inline Raster<double> stabilize_confidence(const Raster<float>& raw) {
  Raster<double> out(raw.width(), raw.height());
  for (std::size_t p = 0; p < raw.pixel_count(); ++p) out[p] = stabilize_confidence(static_cast<double>(raw[p]));
  return out;
}

inline bool is_reliable(double depth, double stabilized_conf, const ReliabilityParams& params) {
  return stabilized_conf >= params.tau_c && params.d_min <= depth && depth <= params.d_max;
}

// Pixel indices (scan order) that pass the confidence and depth-range test.
inline std::vector<std::size_t> reliability_filter(const Raster<float>& depth, const Raster<double>& stabilized,
                                                   const ReliabilityParams& params) {
  if (!depth.same_shape(stabilized.width(), stabilized.height())) {
    throw ValidationError("reliability_filter: depth and confidence rasters differ in size");
  }
  std::vector<std::size_t> omega;
  for (std::size_t p = 0; p < depth.pixel_count(); ++p) {
    if (is_reliable(depth[p], stabilized[p], params)) omega.push_back(p);
  }
  return omega;
}

struct LiftDiagnostics {
  std::size_t non_finite_points = 0;
};

// One labeled world-frame point per pixel of omega. Ignore-labeled pixels are
// kept as geometry evidence without an instance prior.
inline LabeledPointCloud lift_view(const CameraView& view, const ViewPriors& priors, const GeometryMaps& geom,
                                   const EgoPose& ego, const std::vector<std::size_t>& omega,
                                   const Raster<double>& stabilized, const Taxonomy& taxonomy,
                                   LiftDiagnostics* diag = nullptr) {
  const int w = view.width, h = view.height;
  if (!priors.sem.same_shape(w, h) || !priors.inst.same_shape(w, h) || !geom.points.same_shape(w, h) ||
      !geom.depth.same_shape(w, h) || !stabilized.same_shape(w, h)) {
    throw ValidationError("lift_view: raster sizes do not match camera " + std::to_string(view.camera_id));
  }
  const Mat4 cam_to_world = ego.ego_to_world * view.cam_to_ego;
  LabeledPointCloud out;
  out.reserve(omega.size());
  for (std::size_t p : omega) {
    if (p >= priors.sem.pixel_count()) throw ValidationError("lift_view: pixel index outside the image");
    const Vec3 pc(geom.points.channel(p, 0), geom.points.channel(p, 1), geom.points.channel(p, 2));
    if (!pc.allFinite()) {
      if (diag) ++diag->non_finite_points;
      continue;
    }
    LabeledPoint lp;
    lp.xyz = transform_point(cam_to_world, pc);
    ClassId sem = priors.sem[p];
    if (!taxonomy.is_semantic(sem)) sem = taxonomy.ignore_id();
    lp.sem = sem;
    lp.inst = taxonomy.is_ignore(sem) ? 0 : namespace_instance(ego.t, view.camera_id, priors.inst[p]);
    lp.conf = static_cast<float>(stabilized[p]);
    lp.t = ego.t;
    lp.cam = view.camera_id;
    lp.depth = geom.depth[p];
    out.push_back(lp);
  }
  return out;
}

// Lifts every view of a loaded sample.
inline LabeledPointCloud lift_sample(const Sample& sample, const Taxonomy& taxonomy, const ReliabilityParams& params,
                                     LiftDiagnostics* diag = nullptr) {
  LabeledPointCloud out;
  for (const auto& v : sample.views) {
    const auto stab = stabilize_confidence(v.geometry.conf);
    const auto omega = reliability_filter(v.geometry.depth, stab, params);
    auto pts = lift_view(v.camera, v.priors, v.geometry, sample.ego, omega, stab, taxonomy, diag);
    out.insert(out.end(), pts.begin(), pts.end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Temporal windows

enum class WindowMode { kCausal, kNonCausal };

struct WindowSpec {
  WindowMode mode = WindowMode::kCausal;
  std::vector<FrameIndex> indices;  // sorted, unique
};

// Causal: every listed frame up to and including t. Non-causal: all frames.
inline WindowSpec make_window(WindowMode mode, const std::vector<FrameIndex>& frames, FrameIndex t) {
  WindowSpec w{mode, {}};
  for (FrameIndex f : frames) {
    if (mode == WindowMode::kNonCausal || f <= t) w.indices.push_back(f);
  }
  std::sort(w.indices.begin(), w.indices.end());
  w.indices.erase(std::unique(w.indices.begin(), w.indices.end()), w.indices.end());
  return w;
}

inline void validate_window(const WindowSpec& spec, FrameIndex target_t) {
  if (spec.mode == WindowMode::kCausal) {
    for (FrameIndex f : spec.indices) {
      if (f > target_t) {
        throw ValidationError("causal window for frame " + std::to_string(target_t) + " contains future frame " +
                              std::to_string(f));
      }
    }
  }
}

// Concatenates the window's frames in frame order; within a frame the lifted
// order (camera, pixel scan) is kept.
inline LabeledPointCloud fuse_window(const std::map<FrameIndex, LabeledPointCloud>& frames, const WindowSpec& spec,
                                     FrameIndex target_t) {
  validate_window(spec, target_t);
  std::vector<FrameIndex> idx = spec.indices;
  std::sort(idx.begin(), idx.end());
  idx.erase(std::unique(idx.begin(), idx.end()), idx.end());
  std::size_t total = 0;
  for (FrameIndex f : idx) {
    auto it = frames.find(f);
    if (it == frames.end()) throw ValidationError("fuse_window: frame " + std::to_string(f) + " is not loaded");
    total += it->second.size();
  }
  LabeledPointCloud out;
  out.reserve(total);
  for (FrameIndex f : idx) {
    const auto& pts = frames.at(f);
    out.insert(out.end(), pts.begin(), pts.end());
  }
  return out;
}

inline LabeledPointCloud transform_cloud(LabeledPointCloud cloud, const Mat4& T) {
  for (auto& p : cloud) p.xyz = transform_point(T, p.xyz);
  return cloud;
}

// ---------------------------------------------------------------------------
// Flat binary export: per point 3xf32 xyz, u16 sem, u32 inst, f32 conf,
// u16 t, u8 cam, f32 depth (29 bytes, little-endian, no padding).

inline constexpr std::size_t kPointRecordBytes = 29;

inline void write_point_table(const std::filesystem::path& path, const LabeledPointCloud& cloud) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw LoadError("cannot write " + path.string());
  for (const auto& p : cloud) {
    write_le(out, static_cast<float>(p.xyz.x()));
    write_le(out, static_cast<float>(p.xyz.y()));
    write_le(out, static_cast<float>(p.xyz.z()));
    write_le<std::uint16_t>(out, p.sem);
    write_le<std::uint32_t>(out, p.inst);
    write_le(out, p.conf);
    if (p.t > 0xFFFFu || p.cam > 0xFFu) throw ValidationError("point table: frame or camera index out of range");
    write_le(out, static_cast<std::uint16_t>(p.t));
    write_le(out, static_cast<std::uint8_t>(p.cam));
    write_le(out, p.depth);
  }
}

inline LabeledPointCloud read_point_table(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw LoadError("cannot open " + path.string());
  const auto size = static_cast<std::size_t>(in.tellg());
  if (size % kPointRecordBytes != 0) throw LoadError(path.string() + ": size is not a multiple of the record size");
  in.seekg(0);
  LabeledPointCloud cloud(size / kPointRecordBytes);
  for (auto& p : cloud) {
    const float x = read_le<float>(in), y = read_le<float>(in), z = read_le<float>(in);
    p.xyz = Vec3(x, y, z);
    p.sem = read_le<std::uint16_t>(in);
    p.inst = read_le<std::uint32_t>(in);
    p.conf = read_le<float>(in);
    p.t = read_le<std::uint16_t>(in);
    p.cam = read_le<std::uint8_t>(in);
    p.depth = read_le<float>(in);
  }
  return cloud;
}

}  // namespace occfuse
