#pragma once

// Deterministic four-stage grid refinement. Every stage reads a snapshot of the
// grid and writes a fresh one, so results do not depend on iteration order or
// worker count.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <optional>
#include <set>
#include <vector>

#include "occfuse/common.hpp"
#include "occfuse/taxonomy.hpp"
#include "occfuse/voxelize.hpp"

namespace occfuse {

struct NeighborhoodStats {
  std::optional<ClassId> modal;  // most frequent class over N26, ties to the smaller id
  int modal_support = 0;
  int n_occ = 0;  // neighbors that are neither free nor ignore

  friend bool operator==(const NeighborhoodStats&, const NeighborhoodStats&) = default;
};

struct RefineConfig {
  bool fill = true;
  bool warmup = false;
  bool coherence = true;
  bool cleanup = true;

  // (1) pinhole and cavity filling
  int pinhole_support = 4;
  int cavity_n_occ = 10;
  int cavity_support = 5;

  // (2) warmup ego completion
  double ego_radius = 10.0;
  int ground_layers = 3;
  int planar_radius = 2;
  int object_radius = 1;
  ClassId driveable_class = 11;

  // (3) coherence
  double freeze_conf = 0.75;
  double freeze_p_occ = 0.85;
  int coherence_support = 5;
  double coherence_ratio = 0.6;
  std::set<ClassId> protected_classes;  // empty: all thing classes

  // (4) cleanup and instance dilation
  int cleanup_support = 2;
  int dilation_radius = 2;

  unsigned workers = 1;

  void validate() const {
    auto in = [](int v, int lo, int hi) { return v >= lo && v <= hi; };
    if (!in(pinhole_support, 0, 26) || !in(cavity_n_occ, 0, 26) || !in(cavity_support, 0, 26) ||
        !in(coherence_support, 0, 26) || !in(cleanup_support, 0, 26)) {
      throw ValidationError("refinement neighbor thresholds must be in [0, 26]");
    }
    if (!(ego_radius >= 0.0)) throw ValidationError("ego_radius must be non-negative");
    if (ground_layers < 0 || planar_radius < 0 || object_radius < 0 || dilation_radius < 0) {
      throw ValidationError("refinement radii must be non-negative");
    }
    if (!(freeze_conf >= 0.0 && freeze_conf <= 1.0) || !(freeze_p_occ >= 0.0 && freeze_p_occ <= 1.0) ||
        !(coherence_ratio >= 0.0 && coherence_ratio <= 1.0)) {
      throw ValidationError("refinement ratios must be in [0, 1]");
    }
  }
};

namespace detail {

inline bool is_unknown(const Taxonomy& tax, ClassId c) { return !tax.is_semantic(c); }

template <typename Fn>
void for_each_voxel(const GridSpec& spec, unsigned workers, Fn&& fn) {
  const auto d = spec.dims();
  parallel_for(static_cast<std::size_t>(d[0]), workers, [&](std::size_t b, std::size_t e) {
    for (int i = static_cast<int>(b); i < static_cast<int>(e); ++i)
      for (int j = 0; j < d[1]; ++j)
        for (int k = 0; k < d[2]; ++k) fn(i, j, k);
  });
}

inline InstanceId default_instance(const Taxonomy& tax, ClassId c) {
  return tax.is_semantic(c) && !tax.is_thing(c) ? stuff_instance_id(c) : 0;
}

}  // namespace detail

// Modal class and occupancy over the 26-neighborhood, truncated at the border.
inline NeighborhoodStats neighborhood_stats(const OccupancyGrid& g, const Taxonomy& tax, int i, int j, int k) {
  const Lattice L = g.spec.lattice();
  std::array<ClassId, 26> cls{};
  std::array<int, 26> cnt{};
  int distinct = 0;
  NeighborhoodStats s;
  for (int di = -1; di <= 1; ++di)
    for (int dj = -1; dj <= 1; ++dj)
      for (int dk = -1; dk <= 1; ++dk) {
        if (di == 0 && dj == 0 && dk == 0) continue;
        const int a = i + di, b = j + dj, c = k + dk;
        if (!L.contains(a, b, c)) continue;
        const ClassId label = g.sem[L.linear(a, b, c)];
        if (!tax.is_semantic(label)) continue;
        ++s.n_occ;
        int slot = 0;
        while (slot < distinct && cls[slot] != label) ++slot;
        if (slot == distinct) {
          cls[distinct] = label;
          cnt[distinct++] = 0;
        }
        ++cnt[slot];
      }
  for (int q = 0; q < distinct; ++q) {
    if (cnt[q] > s.modal_support || (cnt[q] == s.modal_support && cls[q] < *s.modal)) {
      s.modal_support = cnt[q];
      s.modal = cls[q];
    }
  }
  return s;
}

// Morphological closing (3x3x3 dilation, then erosion) of the occupied mask.
// Out-of-grid voxels count as set during erosion so the border is not eroded.
inline std::vector<std::uint8_t> close_occupied_mask(const OccupancyGrid& g, const Taxonomy& tax,
                                                     unsigned workers = 1) {
  const auto& spec = g.spec;
  const Lattice L = spec.lattice();
  std::vector<std::uint8_t> occ(g.size()), dil(g.size()), closed(g.size());
  for (std::size_t v = 0; v < g.size(); ++v) occ[v] = tax.is_semantic(g.sem[v]) ? 1 : 0;
  detail::for_each_voxel(spec, workers, [&](int i, int j, int k) {
    std::uint8_t any = 0;
    for (int di = -1; di <= 1 && !any; ++di)
      for (int dj = -1; dj <= 1 && !any; ++dj)
        for (int dk = -1; dk <= 1 && !any; ++dk)
          if (L.contains(i + di, j + dj, k + dk) && occ[L.linear(i + di, j + dj, k + dk)]) any = 1;
    dil[L.linear(i, j, k)] = any;
  });
  detail::for_each_voxel(spec, workers, [&](int i, int j, int k) {
    std::uint8_t all = 1;
    for (int di = -1; di <= 1 && all; ++di)
      for (int dj = -1; dj <= 1 && all; ++dj)
        for (int dk = -1; dk <= 1 && all; ++dk)
          if (L.contains(i + di, j + dj, k + dk) && !dil[L.linear(i + di, j + dj, k + dk)]) all = 0;
    closed[L.linear(i, j, k)] = all;
  });
  return closed;
}

namespace detail {

inline void fill_voxel(OccupancyGrid& out, std::size_t v, const Taxonomy& tax, const NeighborhoodStats& s) {
  out.sem[v] = *s.modal;
  out.inst[v] = default_instance(tax, *s.modal);
  out.conf[v] = static_cast<float>(static_cast<double>(s.modal_support) / s.n_occ);
  out.n[v] = 0;
  out.p_occ[v] = 0.0f;
}

}  // namespace detail

// Stage 1. (a) Free/ignore voxels newly set by closing take the modal class when
// modal support reaches pinhole_support. (b) Remaining free/ignore voxels with
// n_occ >= cavity_n_occ and modal support >= cavity_support take the modal class.
inline OccupancyGrid fill_pinholes_and_cavities(const OccupancyGrid& g, const Taxonomy& tax,
                                                const RefineConfig& cfg = {}) {
  const auto closed = close_occupied_mask(g, tax, cfg.workers);
  const Lattice L = g.spec.lattice();
  OccupancyGrid a = g;
  detail::for_each_voxel(g.spec, cfg.workers, [&](int i, int j, int k) {
    const std::size_t v = L.linear(i, j, k);
    if (!detail::is_unknown(tax, g.sem[v]) || !closed[v]) return;
    const auto s = neighborhood_stats(g, tax, i, j, k);
    if (s.modal && s.modal_support >= cfg.pinhole_support) detail::fill_voxel(a, v, tax, s);
  });
  OccupancyGrid b = a;
  detail::for_each_voxel(a.spec, cfg.workers, [&](int i, int j, int k) {
    const std::size_t v = L.linear(i, j, k);
    if (!detail::is_unknown(tax, a.sem[v])) return;
    const auto s = neighborhood_stats(a, tax, i, j, k);
    if (s.modal && s.n_occ >= cfg.cavity_n_occ && s.modal_support >= cfg.cavity_support) {
      detail::fill_voxel(b, v, tax, s);
    }
  });
  return b;
}

// Lattice layer containing ego height z0 (lattice height 0), clamped to the grid.
inline int ground_layer(const GridSpec& spec) {
  const int k = static_cast<int>(std::floor(-spec.min[2] / spec.voxel_size + kBoundarySnap));
  return std::clamp(k, 0, spec.dims()[2] - 1);
}

// Stage 2. Unknown voxels in the near-ground band within ego_radius become
// driveable when a driveable voxel lies within planar_radius in the same layer
// and no thing voxel lies within object_radius in 3D (Chebyshev radii).
inline OccupancyGrid warmup_ego_completion(const OccupancyGrid& g, const Taxonomy& tax, const RefineConfig& cfg = {}) {
  OccupancyGrid out = g;
  const auto& spec = g.spec;
  const Lattice L = spec.lattice();
  const int k0 = ground_layer(spec);
  const int k1 = std::min(spec.dims()[2], k0 + cfg.ground_layers);
  const float conf = static_cast<float>(1.0 / static_cast<double>(tax.num_classes()));
  detail::for_each_voxel(spec, cfg.workers, [&](int i, int j, int k) {
    if (k < k0 || k >= k1) return;
    const std::size_t v = L.linear(i, j, k);
    if (!detail::is_unknown(tax, g.sem[v])) return;
    const Vec3 c = spec.center({i, j, k});
    if (std::hypot(c.x(), c.y()) > cfg.ego_radius) return;
    bool near_drive = false;
    for (int di = -cfg.planar_radius; di <= cfg.planar_radius && !near_drive; ++di)
      for (int dj = -cfg.planar_radius; dj <= cfg.planar_radius && !near_drive; ++dj)
        if (L.contains(i + di, j + dj, k) && g.sem[L.linear(i + di, j + dj, k)] == cfg.driveable_class)
          near_drive = true;
    if (!near_drive) return;
    const int r = cfg.object_radius;
    for (int di = -r; di <= r; ++di)
      for (int dj = -r; dj <= r; ++dj)
        for (int dk = -r; dk <= r; ++dk)
          if (L.contains(i + di, j + dj, k + dk) && tax.is_thing(g.sem[L.linear(i + di, j + dj, k + dk)]))
            return;
    out.sem[v] = cfg.driveable_class;
    out.inst[v] = detail::default_instance(tax, cfg.driveable_class);
    out.conf[v] = conf;
    out.n[v] = 0;
    out.p_occ[v] = 0.0f;
  });
  return out;
}

inline bool is_frozen(const OccupancyGrid& g, std::size_t v, const Taxonomy& tax, const RefineConfig& cfg) {
  const ClassId c = g.sem[v];
  const bool protected_class = cfg.protected_classes.empty() ? tax.is_thing(c) : cfg.protected_classes.count(c) != 0;
  return protected_class || g.conf[v] >= cfg.freeze_conf || g.p_occ[v] >= cfg.freeze_p_occ;
}

// Stage 3. A single pass: unfrozen occupied voxels switch to the modal class when
// modal support >= coherence_support and >= coherence_ratio * n_occ.
inline OccupancyGrid coherence_pass(const OccupancyGrid& g, const Taxonomy& tax, const RefineConfig& cfg = {}) {
  OccupancyGrid out = g;
  const Lattice L = g.spec.lattice();
  detail::for_each_voxel(g.spec, cfg.workers, [&](int i, int j, int k) {
    const std::size_t v = L.linear(i, j, k);
    if (!tax.is_semantic(g.sem[v]) || is_frozen(g, v, tax, cfg)) return;
    const auto s = neighborhood_stats(g, tax, i, j, k);
    if (!s.modal || *s.modal == g.sem[v]) return;
    if (s.modal_support >= cfg.coherence_support &&
        static_cast<double>(s.modal_support) >= cfg.coherence_ratio * static_cast<double>(s.n_occ)) {
      out.sem[v] = *s.modal;
      out.inst[v] = detail::default_instance(tax, *s.modal);
    }
  });
  return out;
}

// Stage 4. (a) Ignore voxels take the modal class with support >= cleanup_support,
// the rest become free. (b) Thing voxels without an instance inherit the id of
// the nearest same-class voxel carrying one within dilation_radius (Euclidean,
// in voxels); equidistant candidates resolve to the smaller id.
inline OccupancyGrid cleanup_and_instance_dilation(const OccupancyGrid& g, const Taxonomy& tax,
                                                   const RefineConfig& cfg = {}) {
  OccupancyGrid a = g;
  const Lattice L = g.spec.lattice();
  detail::for_each_voxel(g.spec, cfg.workers, [&](int i, int j, int k) {
    const std::size_t v = L.linear(i, j, k);
    if (!tax.is_ignore(g.sem[v])) return;
    const auto s = neighborhood_stats(g, tax, i, j, k);
    if (s.modal && s.modal_support >= cfg.cleanup_support) {
      a.sem[v] = *s.modal;
      a.inst[v] = detail::default_instance(tax, *s.modal);
    } else {
      a.sem[v] = tax.free_id();
      a.inst[v] = 0;
    }
  });

  struct Offset {
    int di, dj, dk, d2;
  };
  std::vector<Offset> offsets;
  const int r = cfg.dilation_radius;
  for (int di = -r; di <= r; ++di)
    for (int dj = -r; dj <= r; ++dj)
      for (int dk = -r; dk <= r; ++dk) {
        const int d2 = di * di + dj * dj + dk * dk;
        if (d2 > 0 && d2 <= r * r) offsets.push_back({di, dj, dk, d2});
      }
  std::stable_sort(offsets.begin(), offsets.end(), [](const Offset& x, const Offset& y) { return x.d2 < y.d2; });

  OccupancyGrid b = a;
  detail::for_each_voxel(a.spec, cfg.workers, [&](int i, int j, int k) {
    const std::size_t v = L.linear(i, j, k);
    const ClassId c = a.sem[v];
    if (!tax.is_thing(c) || a.inst[v] != 0) return;
    InstanceId best = 0;
    int best_d2 = -1;
    for (const auto& o : offsets) {
      if (best_d2 >= 0 && o.d2 > best_d2) break;
      if (!L.contains(i + o.di, j + o.dj, k + o.dk)) continue;
      const std::size_t u = L.linear(i + o.di, j + o.dj, k + o.dk);
      if (a.sem[u] != c || a.inst[u] == 0) continue;
      if (best_d2 < 0 || a.inst[u] < best) best = a.inst[u];
      best_d2 = o.d2;
    }
    if (best != 0) b.inst[v] = best;
  });
  return b;
}

// Called after each enabled stage with its number (1-4).
using StageHook = std::function<void(int, const OccupancyGrid&)>;

inline OccupancyGrid refine_all(const OccupancyGrid& g, const Taxonomy& tax, const RefineConfig& cfg,
                                const StageHook& hook = {}) {
  OccupancyGrid cur = g;
  if (cfg.fill) {
    cur = fill_pinholes_and_cavities(cur, tax, cfg);
    if (hook) hook(1, cur);
  }
  if (cfg.warmup) {
    cur = warmup_ego_completion(cur, tax, cfg);
    if (hook) hook(2, cur);
  }
  if (cfg.coherence) {
    cur = coherence_pass(cur, tax, cfg);
    if (hook) hook(3, cur);
  }
  if (cfg.cleanup) {
    cur = cleanup_and_instance_dilation(cur, tax, cfg);
    if (hook) hook(4, cur);
  }
  return cur;
}

}  // namespace occfuse
