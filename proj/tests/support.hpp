#pragma once

// Shared fixtures and independent oracles for the unit and acceptance tests.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <tuple>
#include <unistd.h>
#include <vector>

#include "occfuse/occfuse.hpp"

namespace occfuse::testkit {

// Directory removed on scope exit.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("occfuse_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

inline LabeledPoint make_point(const Vec3& xyz, ClassId sem, InstanceId inst = 0, CameraIndex cam = 0,
                               float depth = 10.0f, FrameIndex t = 0) {
  LabeledPoint p;
  p.xyz = xyz;
  p.sem = sem;
  p.inst = inst;
  p.conf = 1.0f;
  p.t = t;
  p.cam = cam;
  p.depth = depth;
  return p;
}

// Points filling an axis-aligned solid box; depth measured from `cam_pos`.
inline std::vector<LabeledPoint> solid_box(std::mt19937& rng, const Vec3& lo, const Vec3& hi, ClassId c,
                                           InstanceId id, CameraIndex cam, int n, const Vec3& cam_pos = Vec3(0, 0, 1.6)) {
  std::vector<LabeledPoint> out;
  std::uniform_real_distribution<double> u(0, 1);
  for (int i = 0; i < n; ++i) {
    const Vec3 p(lo.x() + u(rng) * (hi.x() - lo.x()), lo.y() + u(rng) * (hi.y() - lo.y()),
                 lo.z() + u(rng) * (hi.z() - lo.z()));
    out.push_back(make_point(p, c, id, cam, static_cast<float>((p - cam_pos).norm())));
  }
  return out;
}

// Small cubic grid anchored at the origin with z0 = 0.
inline GridSpec cube_spec(int n, double s = 0.4) {
  GridSpec g;
  g.min = {0.0, 0.0, 0.0};
  g.max = {n * s, n * s, n * s};
  g.voxel_size = s;
  g.z0 = 0.0;
  return g;
}

// ---------------------------------------------------------------------------
// Voxelization oracle: a per-voxel histogram built with std::map.

// Cell index with the documented boundary snap: values within 1e-9 of an
// integer round to it, everything else floors.
inline std::optional<std::array<int, 3>> oracle_cell(const GridSpec& g, const Vec3& p) {
  const double c[3] = {p.x(), p.y(), p.z() - g.z0};
  const auto d = g.dims();
  std::array<int, 3> out{};
  for (int a = 0; a < 3; ++a) {
    if (!std::isfinite(c[a]) || c[a] < g.min[a] || c[a] >= g.max[a]) return std::nullopt;
    const double q = (c[a] - g.min[a]) / g.voxel_size;
    const double r = std::round(q);
    const long n = std::abs(q - r) <= 1e-9 ? static_cast<long>(r) : static_cast<long>(std::floor(q));
    if (n < 0 || n >= d[a]) return std::nullopt;
    out[a] = static_cast<int>(n);
  }
  return out;
}

struct OracleVoxel {
  ClassId sem;
  InstanceId inst;
  std::uint32_t n;
  double conf;
  double p_occ;
};

inline std::map<std::array<int, 3>, OracleVoxel> oracle_voxelize(const LabeledPointCloud& cloud, const GridSpec& g,
                                                                   const Taxonomy& tax, const VoxelizeParams& prm) {
  std::map<std::array<int, 3>, std::map<ClassId, std::map<InstanceId, std::uint32_t>>> hist;
  std::map<std::array<int, 3>, std::uint32_t> total;
  for (const auto& p : cloud) {
    const auto c = oracle_cell(g, p.xyz);
    if (!c) continue;
    ++total[*c];
    ++hist[*c][p.sem][p.inst];
  }
  std::map<std::array<int, 3>, OracleVoxel> out;
  const double K = static_cast<double>(tax.num_classes());
  for (const auto& [cell, n] : total) {
    ClassId best = tax.free_id();
    std::uint32_t best_n = 0, valid = 0;
    InstanceId best_inst = 0;
    for (const auto& [cls, insts] : hist[cell]) {
      if (!tax.is_semantic(cls)) continue;
      std::uint32_t cn = 0;
      for (const auto& [_, k] : insts) cn += k;
      valid += cn;
      if (cn > best_n) {  // ascending class order: ties keep the smaller id
        best_n = cn;
        best = cls;
        std::uint32_t in = 0;
        for (const auto& [id, k] : insts)
          if (k > in) {
            in = k;
            best_inst = id;
          }
      }
    }
    OracleVoxel v;
    v.n = n;
    v.p_occ = 1.0 - std::exp(-prm.lambda * n);
    v.conf = (best_n + prm.alpha) / (valid + prm.alpha * K);
    v.sem = valid >= prm.n_min && valid > 0 ? best : tax.free_id();
    v.inst = v.sem == tax.free_id() ? 0 : best_inst;
    out[cell] = v;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ray oracle: 1 mm marching with bisection wherever a step changes cell, so
// cells clipped by less than a step are still visited in order.

struct MarchHit {
  bool hit = false;
  std::array<int, 3> cell{};
  double depth = 0.0;
};

inline MarchHit march_ray(const OccupancyGrid& g, const Taxonomy& tax, const Vec3& o, const Vec3& d,
                          double t_far, double step = 1e-3) {
  const auto& s = g.spec;
  const auto dims = s.dims();
  auto cell_at = [&](double t) -> std::optional<std::array<int, 3>> {
    const Vec3 p = o + t * d;
    const double c[3] = {p.x() - s.min[0], p.y() - s.min[1], p.z() - s.z0 - s.min[2]};
    std::array<int, 3> out{};
    for (int a = 0; a < 3; ++a) {
      const double q = std::floor(c[a] / s.voxel_size);
      if (q < 0 || q >= dims[a]) return std::nullopt;
      out[a] = static_cast<int>(q);
    }
    return out;
  };
  const auto origin_cell = cell_at(0.0);
  MarchHit res;
  bool done = false;
  // Reports a cell first seen at parameter t (entry refined by bisection).
  auto visit = [&](const std::array<int, 3>& c, double t) {
    if (origin_cell && c == *origin_cell) return;
    const std::size_t v = s.linear(c[0], c[1], c[2]);
    if (tax.is_free(g.sem[v])) return;
    res = {true, c, t};
    done = true;
  };
  // Visits every cell along (a, b] in order; a and b are sample parameters.
  std::function<void(double, std::optional<std::array<int, 3>>, double, std::optional<std::array<int, 3>>)> refine =
      [&](double a, std::optional<std::array<int, 3>> ca, double b, std::optional<std::array<int, 3>> cb) {
        if (done || ca == cb) return;
        if (b - a < 1e-10) {
          if (cb) visit(*cb, b);
          return;
        }
        const double m = 0.5 * (a + b);
        const auto cm = cell_at(m);
        refine(a, ca, m, cm);
        refine(m, cm, b, cb);
      };
  double t = 0.0;
  auto c = cell_at(0.0);
  if (c) visit(*c, 0.0);
  while (!done && t < t_far) {
    const double t2 = std::min(t + step, t_far);
    const auto c2 = cell_at(t2);
    refine(t, c, t2, c2);
    t = t2;
    c = c2;
  }
  return res;
}

}  // namespace occfuse::testkit
