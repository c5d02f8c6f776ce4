#pragma once

// Dense voxel lattice, vote-based voxelization, and the grid file format.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "occfuse/common.hpp"
#include "occfuse/geometry.hpp"
#include "occfuse/lift.hpp"
#include "occfuse/taxonomy.hpp"

namespace occfuse {

struct VoxelIndex {
  int i = 0, j = 0, k = 0;
  friend bool operator==(const VoxelIndex&, const VoxelIndex&) = default;
};

// Index arithmetic for fixed dims; cheap to copy into hot loops.
struct Lattice {
  int nx = 0, ny = 0, nz = 0;

  std::size_t linear(int i, int j, int k) const { return (static_cast<std::size_t>(i) * ny + j) * nz + k; }
  bool contains(int i, int j, int k) const {
    return i >= 0 && j >= 0 && k >= 0 && i < nx && j < ny && k < nz;
  }
};

// Axis-aligned lattice in the ego frame. Heights are shifted by z0 before
// binning: a point at ego height z0 lies at lattice height 0.
struct GridSpec {
  std::array<double, 3> min{-40.0, -40.0, -10.0};
  std::array<double, 3> max{40.0, 40.0, 10.0};
  double voxel_size = 0.4;
  double z0 = -1.0;

  std::array<int, 3> dims() const {
    std::array<int, 3> d{};
    for (int a = 0; a < 3; ++a) d[a] = static_cast<int>(std::lround((max[a] - min[a]) / voxel_size));
    return d;
  }

  std::size_t voxel_count() const {
    const auto d = dims();
    return static_cast<std::size_t>(d[0]) * d[1] * d[2];
  }

  void validate() const {
    if (!(voxel_size > 0.0) || !std::isfinite(voxel_size)) throw ValidationError("voxel size must be positive");
    for (int a = 0; a < 3; ++a) {
      if (!(max[a] > min[a])) throw ValidationError("grid bounds must satisfy min < max on every axis");
    }
    if (!std::isfinite(z0)) throw ValidationError("z0 must be finite");
    for (int d : dims()) {
      if (d <= 0) throw ValidationError("grid dimensions must be positive");
    }
  }

  Lattice lattice() const {
    const auto d = dims();
    return {d[0], d[1], d[2]};
  }

  // x-major linear index.
  std::size_t linear(int i, int j, int k) const {
    const auto d = dims();
    return (static_cast<std::size_t>(i) * d[1] + j) * d[2] + k;
  }
  std::size_t linear(const VoxelIndex& v) const { return linear(v.i, v.j, v.k); }

  VoxelIndex unlinear(std::size_t idx) const {
    const auto d = dims();
    VoxelIndex v;
    v.k = static_cast<int>(idx % d[2]);
    idx /= d[2];
    v.j = static_cast<int>(idx % d[1]);
    v.i = static_cast<int>(idx / d[1]);
    return v;
  }

  bool contains(int i, int j, int k) const {
    const auto d = dims();
    return i >= 0 && j >= 0 && k >= 0 && i < d[0] && j < d[1] && k < d[2];
  }

  // Ego-frame center of a voxel.
  Vec3 center(const VoxelIndex& v) const {
    return Vec3(min[0] + (v.i + 0.5) * voxel_size, min[1] + (v.j + 0.5) * voxel_size,
                min[2] + (v.k + 0.5) * voxel_size + z0);
  }

  // Ego-frame lower corner of a voxel.
  Vec3 lower_corner(const VoxelIndex& v) const {
    return Vec3(min[0] + v.i * voxel_size, min[1] + v.j * voxel_size, min[2] + v.k * voxel_size + z0);
  }

  friend bool operator==(const GridSpec&, const GridSpec&) = default;
};

// Fractional cell coordinates within 1e-9 of the next boundary snap onto it, so
// coordinates built as min + n * voxel_size land in cell n.
inline constexpr double kBoundarySnap = 1e-9;

// floor((coord - min) / s) per axis after shifting z by z0; half-open bounds.
inline std::optional<VoxelIndex> voxel_index(const GridSpec& spec, const Vec3& xyz) {
  if (!xyz.allFinite()) return std::nullopt;
  const std::array<double, 3> c{xyz.x(), xyz.y(), xyz.z() - spec.z0};
  const auto d = spec.dims();
  std::array<int, 3> idx{};
  for (int a = 0; a < 3; ++a) {
    if (c[a] < spec.min[a] || c[a] >= spec.max[a]) return std::nullopt;
    const double q = std::floor((c[a] - spec.min[a]) / spec.voxel_size + kBoundarySnap);
    if (q < 0.0 || q >= d[a]) return std::nullopt;
    idx[a] = static_cast<int>(q);
  }
  return VoxelIndex{idx[0], idx[1], idx[2]};
}

struct OccupancyGrid {
  GridSpec spec;
  std::vector<ClassId> sem;
  std::vector<InstanceId> inst;
  std::vector<std::uint32_t> n;
  std::vector<float> conf;
  std::vector<float> p_occ;

  OccupancyGrid() = default;
  OccupancyGrid(const GridSpec& s, ClassId free_id, float empty_conf = 1.0f) : spec(s) {
    spec.validate();
    const std::size_t count = s.voxel_count();
    sem.assign(count, free_id);
    inst.assign(count, 0);
    n.assign(count, 0);
    conf.assign(count, empty_conf);
    p_occ.assign(count, 0.0f);
  }

  std::size_t size() const { return sem.size(); }
  std::array<int, 3> dims() const { return spec.dims(); }

  friend bool operator==(const OccupancyGrid&, const OccupancyGrid&) = default;
};

struct VoxelizeParams {
  double alpha = 0.5;
  double lambda = 0.35;
  std::uint32_t n_min = 1;
};

// Smoothed vote confidence of the winning class.
inline double vote_confidence(double winning_votes, double votes, double alpha, std::size_t num_classes) {
  return (winning_votes + alpha) / (votes + alpha * static_cast<double>(num_classes));
}

// Saturating reliability from point support.
inline double occupancy_reliability(double support, double lambda) { return 1.0 - std::exp(-lambda * support); }

// Majority vote per voxel over non-ignore labels. n counts every point that
// lands in the voxel (ignore included); conf uses non-ignore votes only. Ties go
// to the smaller class id, instance ties to the smaller id.
inline OccupancyGrid voxelize(const LabeledPointCloud& cloud, const GridSpec& spec, const Taxonomy& taxonomy,
                              const VoxelizeParams& params = {}, unsigned workers = 1) {
  const std::size_t K = taxonomy.num_classes();
  OccupancyGrid grid(spec, taxonomy.free_id(), static_cast<float>(vote_confidence(0, 0, params.alpha, K)));

  struct Vote {
    std::uint64_t voxel;
    ClassId sem;
    InstanceId inst;
    bool operator<(const Vote& o) const { return std::tie(voxel, sem, inst) < std::tie(o.voxel, o.sem, o.inst); }
  };
  constexpr std::uint64_t kOutside = ~std::uint64_t{0};
  std::vector<Vote> votes(cloud.size());
  parallel_for(cloud.size(), workers, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) {
      const auto& p = cloud[i];
      const auto v = voxel_index(spec, p.xyz);
      votes[i] = {v ? spec.linear(*v) : kOutside, p.sem, p.inst};
    }
  });
  std::erase_if(votes, [](const Vote& v) { return v.voxel == kOutside; });
  std::sort(votes.begin(), votes.end());

  std::size_t a = 0;
  while (a < votes.size()) {
    std::size_t b = a;
    while (b < votes.size() && votes[b].voxel == votes[a].voxel) ++b;
    const std::size_t vox = votes[a].voxel;
    std::uint32_t total = static_cast<std::uint32_t>(b - a);
    std::uint32_t valid = 0;
    ClassId best = taxonomy.free_id();
    std::uint32_t best_count = 0;
    std::size_t best_begin = a, best_end = a;
    // Votes are sorted by class within the voxel, so classes form runs.
    for (std::size_t r = a; r < b;) {
      std::size_t s = r;
      while (s < b && votes[s].sem == votes[r].sem) ++s;
      const ClassId c = votes[r].sem;
      if (taxonomy.is_semantic(c)) {
        const auto cnt = static_cast<std::uint32_t>(s - r);
        valid += cnt;
        if (cnt > best_count) {
          best_count = cnt;
          best = c;
          best_begin = r;
          best_end = s;
        }
      }
      r = s;
    }
    grid.n[vox] = total;
    grid.p_occ[vox] = static_cast<float>(occupancy_reliability(total, params.lambda));
    grid.conf[vox] = static_cast<float>(vote_confidence(best_count, valid, params.alpha, K));
    if (valid > 0 && valid >= params.n_min) {
      grid.sem[vox] = best;
      // Instance ids are sorted within the winning class run.
      InstanceId best_inst = 0;
      std::size_t best_inst_count = 0;
      for (std::size_t r = best_begin; r < best_end;) {
        std::size_t s = r;
        while (s < best_end && votes[s].inst == votes[r].inst) ++s;
        if (s - r > best_inst_count) {
          best_inst_count = s - r;
          best_inst = votes[r].inst;
        }
        r = s;
      }
      grid.inst[vox] = best_inst;
    }
    a = b;
  }
  return grid;
}

// ---------------------------------------------------------------------------
// Grid file: "OCCG", u32 version, 6 f64 bounds (xmin,xmax,ymin,ymax,zmin,zmax),
// f64 voxel size, f64 z0, 3 u32 dims, then sem u16, inst u32, n u32, conf f32,
// p_occ f32 arrays in x-major order. Little-endian throughout.

inline constexpr std::uint32_t kGridFormatVersion = 1;

inline void write_grid(std::ostream& out, const OccupancyGrid& g) {
  out.write("OCCG", 4);
  write_le(out, kGridFormatVersion);
  for (int a = 0; a < 3; ++a) {
    write_le(out, g.spec.min[a]);
    write_le(out, g.spec.max[a]);
  }
  write_le(out, g.spec.voxel_size);
  write_le(out, g.spec.z0);
  for (int d : g.spec.dims()) write_le(out, static_cast<std::uint32_t>(d));
  write_le_array(out, g.sem);
  write_le_array(out, g.inst);
  write_le_array(out, g.n);
  write_le_array(out, g.conf);
  write_le_array(out, g.p_occ);
}

inline void write_grid(const std::filesystem::path& path, const OccupancyGrid& g) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw LoadError("cannot write " + path.string());
  write_grid(out, g);
  if (!out) throw LoadError("write failed for " + path.string());
}

inline OccupancyGrid read_grid(std::istream& in, const std::string& name) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != "OCCG") throw LoadError(name + ": not a grid file");
  try {
    const auto version = read_le<std::uint32_t>(in);
    if (version != kGridFormatVersion) throw LoadError(name + ": unsupported grid version " + std::to_string(version));
    GridSpec spec;
    for (int a = 0; a < 3; ++a) {
      spec.min[a] = read_le<double>(in);
      spec.max[a] = read_le<double>(in);
    }
    spec.voxel_size = read_le<double>(in);
    spec.z0 = read_le<double>(in);
    std::array<int, 3> dims{};
    for (auto& d : dims) d = static_cast<int>(read_le<std::uint32_t>(in));
    spec.validate();
    if (dims != spec.dims()) throw LoadError(name + ": header dims disagree with bounds and voxel size");
    OccupancyGrid g;
    g.spec = spec;
    const std::size_t count = spec.voxel_count();
    g.sem.resize(count);
    g.inst.resize(count);
    g.n.resize(count);
    g.conf.resize(count);
    g.p_occ.resize(count);
    read_le_array(in, g.sem);
    read_le_array(in, g.inst);
    read_le_array(in, g.n);
    read_le_array(in, g.conf);
    read_le_array(in, g.p_occ);
    return g;
  } catch (const LoadError& e) {
    if (std::string(e.what()).rfind(name, 0) == 0) throw;
    throw LoadError(name + ": " + e.what());
  } catch (const ValidationError& e) {
    throw LoadError(name + ": " + e.what());
  }
}

inline OccupancyGrid read_grid(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open " + path.string());
  return read_grid(in, path.string());
}

}  // namespace occfuse
