#pragma once

// End-to-end runner: per target frame, lift the window, identify instances in
// the current ego frame, voxelize, refine and write grids. Also the evaluation
// driver that aggregates metrics over a directory of grids.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "occfuse/common.hpp"
#include "occfuse/ingest.hpp"
#include "occfuse/instances.hpp"
#include "occfuse/lift.hpp"
#include "occfuse/metrics.hpp"
#include "occfuse/refine.hpp"
#include "occfuse/synth.hpp"
#include "occfuse/taxonomy.hpp"
#include "occfuse/voxelize.hpp"

namespace occfuse {

struct EvaluationConfig {
  Vec3 ray_origin = Vec3::Zero();
  double azimuth_step_deg = 1.0;
  int elevation_rows = 32;
  double elevation_min_deg = -30.0;
  double elevation_max_deg = 10.0;
  std::vector<double> thresholds = default_depth_thresholds();
  bool use_observation_masks = false;  // restrict voxel metrics to gt/<t>.observed

  RaySet rays() const {
    return spherical_ray_set(ray_origin, azimuth_step_deg, elevation_rows, elevation_min_deg, elevation_max_deg);
  }

  void validate() const {
    if (!(azimuth_step_deg > 0.0 && azimuth_step_deg <= 360.0)) throw ValidationError("azimuth_step_deg out of (0, 360]");
    if (elevation_rows < 1) throw ValidationError("elevation_rows must be at least 1");
    if (!(elevation_min_deg >= -90.0 && elevation_max_deg <= 90.0 && elevation_min_deg <= elevation_max_deg)) {
      throw ValidationError("elevation range must lie in [-90, 90] with min <= max");
    }
    if (thresholds.empty()) throw ValidationError("at least one depth threshold is required");
    for (double t : thresholds)
      if (!(t > 0.0)) throw ValidationError("depth thresholds must be positive");
  }
};

struct PipelineConfig {
  TaxonomyConfig taxonomy = TaxonomyConfig::occ3d_default();
  std::string taxonomy_path;  // empty: built-in default
  WindowMode window = WindowMode::kCausal;
  std::size_t warmup_frames = 5;  // warmup runs while |W_t| is below this (causal only)
  ReliabilityParams reliability;
  InstanceParams instances;
  GridSpec grid;
  VoxelizeParams voxelize;
  RefineConfig refine;
  EvaluationConfig evaluation;
  unsigned workers = 0;  // 0: OCCFUSE_WORKERS or hardware concurrency

  PipelineConfig() {
    instances.intervals = default_size_intervals(taxonomy.taxonomy);
    refine.warmup = true;
    refine.driveable_class = *taxonomy.taxonomy.find("driveable_surface");
  }

  unsigned resolved_workers() const { return workers ? workers : default_worker_count(); }

  void validate() const {
    const auto& tax = taxonomy.taxonomy;
    if (!std::isfinite(reliability.tau_c)) throw ValidationError("tau_c must be finite");
    if (!(reliability.d_min >= 0.0 && reliability.d_max > reliability.d_min)) {
      throw ValidationError("depth range must satisfy 0 <= d_min < d_max");
    }
    instances.validate(tax);
    grid.validate();
    if (!(voxelize.alpha > 0.0)) throw ValidationError("alpha must be positive");
    if (!(voxelize.lambda > 0.0)) throw ValidationError("lambda must be positive");
    if (voxelize.n_min < 1) throw ValidationError("n_min must be at least 1");
    refine.validate();
    if (!tax.is_semantic(refine.driveable_class)) throw ValidationError("refine.driveable_class is not a semantic class");
    evaluation.validate();
  }

  nlohmann::json to_json() const;
  static PipelineConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
  static PipelineConfig load(const std::filesystem::path& path) {
    try {
      return from_json(detail::read_json_file(path), path.parent_path());
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(path.string() + ": " + e.what());
    } catch (const LoadError&) {
      throw;
    } catch (const ValidationError& e) {
      throw ValidationError(path.string() + ": " + e.what());
    }
  }
};

// ---------------------------------------------------------------------------
// JSON

inline const char* to_string(WindowMode m) { return m == WindowMode::kCausal ? "causal" : "non_causal"; }

inline WindowMode parse_window_mode(const std::string& s) {
  if (s == "causal") return WindowMode::kCausal;
  if (s == "non_causal" || s == "non-causal") return WindowMode::kNonCausal;
  throw ValidationError("window mode must be causal or non_causal, got '" + s + "'");
}

inline nlohmann::json PipelineConfig::to_json() const {
  const auto& tax = taxonomy.taxonomy;
  nlohmann::json intervals = nlohmann::json::object();
  for (const auto& [c, iv] : instances.intervals) {
    intervals[tax.info(c).name] = {{"min", {iv.min.x(), iv.min.y(), iv.min.z()}},
                                   {"max", {iv.max.x(), iv.max.y(), iv.max.z()}}};
  }
  nlohmann::json prot = nlohmann::json::array();
  for (ClassId c : refine.protected_classes) prot.push_back(tax.info(c).name);
  nlohmann::json j = {
      {"window", {{"mode", to_string(window)}, {"warmup_frames", warmup_frames}}},
      {"reliability", {{"tau_c", reliability.tau_c}, {"d_min", reliability.d_min}, {"d_max", reliability.d_max}}},
      {"instances",
       {{"iqr_factor", instances.iqr_factor},
        {"deviation_k", instances.deviation_k},
        {"tighten", instances.tighten},
        {"max_passes", instances.max_passes},
        {"min_points", instances.min_points},
        {"tau_ov", instances.merge_iosv},
        {"d_nn", instances.reassign_distance},
        {"size_intervals", intervals}}},
      {"grid", detail::grid_to_json(grid)},
      {"voxelize", {{"alpha", voxelize.alpha}, {"lambda", voxelize.lambda}, {"n_min", voxelize.n_min}}},
      {"refine",
       {{"fill", refine.fill},
        {"warmup", refine.warmup},
        {"coherence", refine.coherence},
        {"cleanup", refine.cleanup},
        {"pinhole_support", refine.pinhole_support},
        {"cavity_n_occ", refine.cavity_n_occ},
        {"cavity_support", refine.cavity_support},
        {"ego_radius", refine.ego_radius},
        {"ground_layers", refine.ground_layers},
        {"planar_radius", refine.planar_radius},
        {"object_radius", refine.object_radius},
        {"driveable_class", tax.info(refine.driveable_class).name},
        {"freeze_conf", refine.freeze_conf},
        {"freeze_p_occ", refine.freeze_p_occ},
        {"coherence_support", refine.coherence_support},
        {"coherence_ratio", refine.coherence_ratio},
        {"protected_classes", prot},
        {"cleanup_support", refine.cleanup_support},
        {"delta", refine.dilation_radius}}},
      {"evaluation",
       {{"ray_origin", {evaluation.ray_origin.x(), evaluation.ray_origin.y(), evaluation.ray_origin.z()}},
        {"azimuth_step_deg", evaluation.azimuth_step_deg},
        {"elevation_rows", evaluation.elevation_rows},
        {"elevation_min_deg", evaluation.elevation_min_deg},
        {"elevation_max_deg", evaluation.elevation_max_deg},
        {"thresholds", evaluation.thresholds},
        {"use_observation_masks", evaluation.use_observation_masks}}},
      {"workers", workers},
  };
  if (!taxonomy_path.empty()) j["taxonomy"] = taxonomy_path;
  return j;
}

inline PipelineConfig PipelineConfig::from_json(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  using detail::reject_unknown_keys;
  reject_unknown_keys(j,
                      {"taxonomy", "window", "reliability", "instances", "grid", "voxelize", "refine", "evaluation",
                       "workers"},
                      "config");
  PipelineConfig c;
  if (j.contains("taxonomy")) {
    c.taxonomy_path = j.at("taxonomy").get<std::string>();
    std::filesystem::path p = c.taxonomy_path;
    if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
    c.taxonomy = TaxonomyConfig::load(p);
    c.instances.intervals = default_size_intervals(c.taxonomy.taxonomy);
    c.refine.driveable_class = c.taxonomy.taxonomy.find("driveable_surface").value_or(0);
  }
  const auto& tax = c.taxonomy.taxonomy;
  auto class_by_name = [&](const std::string& n) {
    const auto id = tax.find(n);
    if (!id) throw ValidationError("unknown class name '" + n + "'");
    return *id;
  };

  if (j.contains("window")) {
    const auto& w = j.at("window");
    reject_unknown_keys(w, {"mode", "warmup_frames"}, "window");
    if (w.contains("mode")) c.window = parse_window_mode(w.at("mode").get<std::string>());
    c.warmup_frames = w.value("warmup_frames", c.warmup_frames);
  }
  if (j.contains("reliability")) {
    const auto& r = j.at("reliability");
    reject_unknown_keys(r, {"tau_c", "d_min", "d_max"}, "reliability");
    c.reliability.tau_c = r.value("tau_c", c.reliability.tau_c);
    c.reliability.d_min = r.value("d_min", c.reliability.d_min);
    c.reliability.d_max = r.value("d_max", c.reliability.d_max);
  }
  if (j.contains("instances")) {
    const auto& r = j.at("instances");
    reject_unknown_keys(r,
                        {"iqr_factor", "deviation_k", "tighten", "max_passes", "min_points", "tau_ov", "d_nn",
                         "size_intervals"},
                        "instances");
    auto& p = c.instances;
    p.iqr_factor = r.value("iqr_factor", p.iqr_factor);
    p.deviation_k = r.value("deviation_k", p.deviation_k);
    p.tighten = r.value("tighten", p.tighten);
    p.max_passes = r.value("max_passes", p.max_passes);
    p.min_points = r.value("min_points", p.min_points);
    p.merge_iosv = r.value("tau_ov", p.merge_iosv);
    p.reassign_distance = r.value("d_nn", p.reassign_distance);
    if (r.contains("size_intervals")) {
      for (const auto& [name, iv] : r.at("size_intervals").items()) {
        reject_unknown_keys(iv, {"min", "max"}, "size_intervals." + name);
        const ClassId id = class_by_name(name);
        SizeInterval s{id, Vec3::Constant(kMinExtent), Vec3::Constant(kMinExtent)};
        if (auto it = p.intervals.find(id); it != p.intervals.end()) s = it->second;
        if (iv.contains("min")) s.min = detail::vec3_from(iv.at("min"), "size interval min");
        if (iv.contains("max")) s.max = detail::vec3_from(iv.at("max"), "size interval max");
        p.intervals[id] = s;
      }
    }
  }
  if (j.contains("grid")) c.grid = detail::grid_from_json(j.at("grid"));
  if (j.contains("voxelize")) {
    const auto& v = j.at("voxelize");
    reject_unknown_keys(v, {"alpha", "lambda", "n_min"}, "voxelize");
    c.voxelize.alpha = v.value("alpha", c.voxelize.alpha);
    c.voxelize.lambda = v.value("lambda", c.voxelize.lambda);
    c.voxelize.n_min = v.value("n_min", c.voxelize.n_min);
  }
  if (j.contains("refine")) {
    const auto& r = j.at("refine");
    reject_unknown_keys(r,
                        {"fill", "warmup", "coherence", "cleanup", "pinhole_support", "cavity_n_occ",
                         "cavity_support", "ego_radius", "ground_layers", "planar_radius", "object_radius",
                         "driveable_class", "freeze_conf", "freeze_p_occ", "coherence_support", "coherence_ratio",
                         "protected_classes", "cleanup_support", "delta"},
                        "refine");
    auto& f = c.refine;
    f.fill = r.value("fill", f.fill);
    f.warmup = r.value("warmup", f.warmup);
    f.coherence = r.value("coherence", f.coherence);
    f.cleanup = r.value("cleanup", f.cleanup);
    f.pinhole_support = r.value("pinhole_support", f.pinhole_support);
    f.cavity_n_occ = r.value("cavity_n_occ", f.cavity_n_occ);
    f.cavity_support = r.value("cavity_support", f.cavity_support);
    f.ego_radius = r.value("ego_radius", f.ego_radius);
    f.ground_layers = r.value("ground_layers", f.ground_layers);
    f.planar_radius = r.value("planar_radius", f.planar_radius);
    f.object_radius = r.value("object_radius", f.object_radius);
    if (r.contains("driveable_class")) f.driveable_class = class_by_name(r.at("driveable_class").get<std::string>());
    f.freeze_conf = r.value("freeze_conf", f.freeze_conf);
    f.freeze_p_occ = r.value("freeze_p_occ", f.freeze_p_occ);
    f.coherence_support = r.value("coherence_support", f.coherence_support);
    f.coherence_ratio = r.value("coherence_ratio", f.coherence_ratio);
    if (r.contains("protected_classes")) {
      f.protected_classes.clear();
      for (const auto& n : r.at("protected_classes")) f.protected_classes.insert(class_by_name(n.get<std::string>()));
    }
    f.cleanup_support = r.value("cleanup_support", f.cleanup_support);
    f.dilation_radius = r.value("delta", f.dilation_radius);
  }
  if (j.contains("evaluation")) {
    const auto& e = j.at("evaluation");
    reject_unknown_keys(e,
                        {"ray_origin", "azimuth_step_deg", "elevation_rows", "elevation_min_deg",
                         "elevation_max_deg", "thresholds", "use_observation_masks"},
                        "evaluation");
    auto& ev = c.evaluation;
    if (e.contains("ray_origin")) ev.ray_origin = detail::vec3_from(e.at("ray_origin"), "ray_origin");
    ev.azimuth_step_deg = e.value("azimuth_step_deg", ev.azimuth_step_deg);
    ev.elevation_rows = e.value("elevation_rows", ev.elevation_rows);
    ev.elevation_min_deg = e.value("elevation_min_deg", ev.elevation_min_deg);
    ev.elevation_max_deg = e.value("elevation_max_deg", ev.elevation_max_deg);
    if (e.contains("thresholds")) ev.thresholds = e.at("thresholds").get<std::vector<double>>();
    ev.use_observation_masks = e.value("use_observation_masks", ev.use_observation_masks);
  }
  if (j.contains("workers")) {
    const long w = j.at("workers").get<long>();
    if (w < 0) throw ValidationError("workers must be non-negative");
    c.workers = static_cast<unsigned>(w);
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Running

// Failure of one pipeline stage for one sample.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, FrameIndex t, const std::string& what, bool validation)
      : std::runtime_error("frame " + std::to_string(t) + ", stage " + stage + ": " + what),
        stage_(std::move(stage)),
        t_(t),
        validation_(validation) {}
  const std::string& stage() const { return stage_; }
  FrameIndex frame() const { return t_; }
  bool is_validation() const { return validation_; }

 private:
  std::string stage_;
  FrameIndex t_;
  bool validation_;
};

struct SampleReport {
  FrameIndex t = 0;
  std::size_t window_frames = 0;
  std::size_t points = 0;
  std::size_t non_finite_points = 0;
  std::size_t unknown_labels = 0;
  std::size_t instance_candidates = 0;
  std::size_t instances_rejected = 0;
  std::size_t instances = 0;
  std::size_t occupied_voxels = 0;
  bool warmup = false;
  double seconds = 0.0;
};

struct RunOptions {
  std::optional<FrameIndex> only_frame;  // process a single target frame
  int dump_stage = 0;                    // 1-4: also write <out>/stages/<t>.stage<N>.grid
  bool write_boxes = false;              // <out>/<t>.boxes.txt
  Dataset::AccessHook access_hook;
  std::ostream* log = nullptr;
};

struct RunResult {
  std::vector<SampleReport> samples;
  std::vector<StageError> failures;
};

// Runs every target frame in manifest order. Frames are lifted on first use and
// kept, so a causal run never touches files of frames after its target.
inline RunResult run_pipeline(const std::filesystem::path& dataset_root, const PipelineConfig& cfg,
                              const std::filesystem::path& out_dir, const RunOptions& opt = {}) {
  namespace fs = std::filesystem;
  using Clock = std::chrono::steady_clock;
  cfg.validate();
  const auto& tax = cfg.taxonomy.taxonomy;
  const unsigned workers = cfg.resolved_workers();
  Dataset ds(dataset_root, opt.access_hook);
  fs::create_directories(out_dir);
  if (opt.dump_stage) fs::create_directories(out_dir / "stages");

  std::vector<FrameIndex> frames = ds.manifest().frames;
  std::sort(frames.begin(), frames.end());
  if (opt.only_frame && !ds.has_frame(*opt.only_frame)) {
    throw ValidationError("frame " + std::to_string(*opt.only_frame) + " is not listed in the manifest");
  }

  struct Lifted {
    Mat4 ego_to_world;
    LabeledPointCloud cloud;
    std::size_t non_finite = 0, unknown = 0;
  };
  std::map<FrameIndex, Lifted> cache;
  auto lift = [&](FrameIndex f) -> const Lifted& {
    auto it = cache.find(f);
    if (it != cache.end()) return it->second;
    Lifted l;
    const Sample s = ds.load_sample(f, cfg.taxonomy);
    LiftDiagnostics diag;
    l.cloud = lift_sample(s, tax, cfg.reliability, &diag);
    l.ego_to_world = s.ego.ego_to_world;
    l.non_finite = diag.non_finite_points;
    l.unknown = s.unknown_labels;
    return cache.emplace(f, std::move(l)).first->second;
  };

  RunResult result;
  for (FrameIndex t : frames) {
    if (opt.only_frame && t != *opt.only_frame) continue;
    const auto t0 = Clock::now();
    SampleReport rep;
    rep.t = t;
    std::string stage = "window";
    try {
      const WindowSpec win = make_window(cfg.window, frames, t);
      validate_window(win, t);
      rep.window_frames = win.indices.size();

      stage = "lift";
      std::map<FrameIndex, LabeledPointCloud> world;
      for (FrameIndex f : win.indices) {
        const auto& l = lift(f);
        world.emplace(f, l.cloud);
        rep.non_finite_points += l.non_finite;
        rep.unknown_labels += l.unknown;
      }

      stage = "fuse_window";
      const Mat4 world_to_ego = rigid_inverse(cache.at(t).ego_to_world);
      const LabeledPointCloud ego_cloud = transform_cloud(fuse_window(world, win, t), world_to_ego);
      world.clear();
      rep.points = ego_cloud.size();

      stage = "instances";
      InstanceResult inst = identify_instances(ego_cloud, t, tax, cfg.instances, workers);
      rep.instance_candidates = inst.candidates;
      rep.instances_rejected = inst.rejected;
      rep.instances = inst.boxes.size();

      stage = "voxelize";
      const OccupancyGrid raw = voxelize(inst.cloud, cfg.grid, tax, cfg.voxelize, workers);

      stage = "refine";
      RefineConfig rc = cfg.refine;
      rc.workers = workers;
      rc.warmup = cfg.refine.warmup && cfg.window == WindowMode::kCausal && win.indices.size() < cfg.warmup_frames;
      rep.warmup = rc.warmup;
      StageHook hook;
      if (opt.dump_stage) {
        hook = [&](int n, const OccupancyGrid& g) {
          if (n == opt.dump_stage) {
            write_grid(out_dir / "stages" / (std::to_string(t) + ".stage" + std::to_string(n) + ".grid"), g);
          }
        };
      }
      const OccupancyGrid refined = refine_all(raw, tax, rc, hook);
      for (ClassId c : refined.sem) rep.occupied_voxels += tax.is_semantic(c) ? 1 : 0;

      stage = "write";
      write_grid(out_dir / (std::to_string(t) + ".grid"), refined);
      if (opt.write_boxes) write_box_table(out_dir / (std::to_string(t) + ".boxes.txt"), inst.boxes, tax);
    } catch (const ValidationError& e) {
      result.failures.emplace_back(stage, t, e.what(), true);
      if (opt.log) *opt.log << "error: " << result.failures.back().what() << "\n";
      continue;
    } catch (const std::exception& e) {
      result.failures.emplace_back(stage, t, e.what(), false);
      if (opt.log) *opt.log << "error: " << result.failures.back().what() << "\n";
      continue;
    }
    rep.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    if (opt.log) {
      char line[256];
      std::snprintf(line, sizeof line,
                    "frame %u: window=%zu points=%zu instances=%zu (candidates %zu, rejected %zu) occupied=%zu "
                    "warmup=%s %.2fs\n",
                    static_cast<unsigned>(t), rep.window_frames, rep.points, rep.instances, rep.instance_candidates,
                    rep.instances_rejected, rep.occupied_voxels, rep.warmup ? "on" : "off", rep.seconds);
      *opt.log << line;
    }
    result.samples.push_back(rep);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvaluationResult {
  MetricSummary metrics;
  std::vector<std::string> evaluated;  // sample names
  std::vector<std::string> missing;    // gt samples without a prediction
};

inline std::vector<std::string> list_grid_samples(const std::filesystem::path& dir) {
  std::vector<std::string> names;
  if (!std::filesystem::is_directory(dir)) throw LoadError(dir.string() + " is not a directory");
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".grid") names.push_back(e.path().stem().string());
  }
  std::sort(names.begin(), names.end(), [](const std::string& a, const std::string& b) {
    return a.size() != b.size() ? a.size() < b.size() : a < b;
  });
  return names;
}

inline EvaluationResult evaluate_directories(const std::filesystem::path& pred_dir,
                                             const std::filesystem::path& gt_dir, const PipelineConfig& cfg) {
  const auto& tax = cfg.taxonomy.taxonomy;
  const unsigned workers = cfg.resolved_workers();
  const RaySet rays = cfg.evaluation.rays();
  MetricSuite suite(tax, cfg.evaluation.thresholds);
  EvaluationResult res;
  for (const auto& name : list_grid_samples(gt_dir)) {
    const auto pred_path = pred_dir / (name + ".grid");
    if (!std::filesystem::exists(pred_path)) {
      res.missing.push_back(name);
      continue;
    }
    const OccupancyGrid gt = read_grid(gt_dir / (name + ".grid"));
    const OccupancyGrid pred = read_grid(pred_path);
    std::optional<std::vector<std::uint8_t>> mask;
    if (cfg.evaluation.use_observation_masks) {
      mask = read_observation_mask(gt_dir / (name + ".observed"), gt.size());
    }
    suite.add(pred, gt, tax, rays, workers, mask ? &*mask : nullptr);
    res.evaluated.push_back(name);
  }
  res.metrics = summarize(suite, tax);
  return res;
}

namespace detail {

inline std::string fmt_score(const std::optional<double>& v) {
  if (!v) return "     -";
  char b[16];
  std::snprintf(b, sizeof b, "%6.4f", *v);
  return b;
}

inline std::string fmt_score(double v) { return fmt_score(std::optional<double>(v)); }

inline void write_ray_table(std::ostream& os, const char* title, const RayMetricResult& r, const Taxonomy& tax) {
  os << title << "\n";
  char line[128];
  std::snprintf(line, sizeof line, "  %-22s", "class");
  os << line;
  for (double t : r.thresholds) {
    std::snprintf(line, sizeof line, "  %5.2gm", t);
    os << line;
  }
  os << "\n";
  for (const auto& ci : tax.classes()) {
    if (tax.is_excluded(ci.id)) continue;
    std::snprintf(line, sizeof line, "  %-22s", ci.name.c_str());
    os << line;
    for (std::size_t k = 0; k < r.thresholds.size(); ++k) os << "  " << fmt_score(r.per_class[k][ci.id]);
    os << "\n";
  }
  std::snprintf(line, sizeof line, "  %-22s", "mean");
  os << line;
  for (double v : r.per_threshold) os << "  " << fmt_score(v);
  os << "\n  overall " << fmt_score(r.mean) << "\n\n";
}

inline nlohmann::json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

inline nlohmann::json ray_json(const RayMetricResult& r, const Taxonomy& tax) {
  nlohmann::json per = nlohmann::json::object();
  for (std::size_t k = 0; k < r.thresholds.size(); ++k) {
    nlohmann::json cls = nlohmann::json::object();
    for (const auto& ci : tax.classes()) cls[ci.name] = optional_json(r.per_class[k][ci.id]);
    char key[32];
    std::snprintf(key, sizeof key, "%gm", r.thresholds[k]);
    per[key] = {{"mean", r.per_threshold[k]}, {"per_class", cls}};
  }
  return {{"mean", r.mean}, {"thresholds", per}};
}

}  // namespace detail

inline void write_text_report(std::ostream& os, const EvaluationResult& r, const Taxonomy& tax) {
  const auto& m = r.metrics;
  os << "samples evaluated: " << r.evaluated.size() << "\n";
  if (!r.missing.empty()) {
    os << "missing predictions:";
    for (const auto& n : r.missing) os << " " << n;
    os << "\n";
  }
  os << "\nvoxel IoU\n";
  char line[128];
  for (const auto& ci : tax.classes()) {
    std::snprintf(line, sizeof line, "  %-22s %s%s\n", ci.name.c_str(), detail::fmt_score(m.miou.per_class[ci.id]).c_str(),
                  tax.is_excluded(ci.id) ? "  (excluded)" : "");
    os << line;
  }
  os << "  mIoU    " << detail::fmt_score(m.miou.mean) << "\n";
  os << "  IoU_occ " << detail::fmt_score(m.iou_occ) << "\n\n";
  detail::write_ray_table(os, "RayIoU", m.ray_iou, tax);
  detail::write_ray_table(os, "RayPQ", m.ray_pq, tax);
}

inline nlohmann::json summary_json(const EvaluationResult& r, const Taxonomy& tax) {
  nlohmann::json per = nlohmann::json::object();
  for (const auto& ci : tax.classes()) per[ci.name] = detail::optional_json(r.metrics.miou.per_class[ci.id]);
  return {{"samples", r.evaluated},
          {"missing", r.missing},
          {"miou", r.metrics.miou.mean},
          {"iou_per_class", per},
          {"iou_occ", r.metrics.iou_occ},
          {"rayiou", detail::ray_json(r.metrics.ray_iou, tax)},
          {"raypq", detail::ray_json(r.metrics.ray_pq, tax)}};
}

// Writes report.txt and summary.json into out_dir.
inline void write_evaluation_reports(const std::filesystem::path& out_dir, const EvaluationResult& r,
                                     const Taxonomy& tax) {
  std::filesystem::create_directories(out_dir);
  std::ofstream txt(out_dir / "report.txt");
  if (!txt) throw LoadError("cannot write " + (out_dir / "report.txt").string());
  write_text_report(txt, r, tax);
  std::ofstream js(out_dir / "summary.json");
  if (!js) throw LoadError("cannot write " + (out_dir / "summary.json").string());
  js << summary_json(r, tax).dump(2) << "\n";
}

}  // namespace occfuse
