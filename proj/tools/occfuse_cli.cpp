// occfuse command-line tool: run, evaluate, synth, export, inspect.
// Exit codes: 0 ok, 1 validation error, 2 runtime error.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include <unistd.h>

#include <CLI11.hpp>

#include "occfuse/occfuse.hpp"

namespace fs = std::filesystem;
using namespace occfuse;

namespace {

constexpr int kOk = 0;
constexpr int kValidation = 1;
constexpr int kRuntime = 2;

PipelineConfig load_config(const std::string& path) {
  return path.empty() ? PipelineConfig{} : PipelineConfig::load(path);
}

void print_histogram(std::ostream& os, const OccupancyGrid& g, const Taxonomy& tax) {
  std::map<ClassId, std::size_t> hist;
  std::size_t instances_set = 0;
  for (std::size_t v = 0; v < g.size(); ++v) {
    ++hist[g.sem[v]];
    if (tax.is_thing(g.sem[v]) && g.inst[v] != 0) ++instances_set;
  }
  char line[128];
  for (const auto& [c, n] : hist) {
    const std::string name = tax.is_semantic(c) ? tax.info(c).name : tax.is_free(c) ? "free" : "ignore";
    std::snprintf(line, sizeof line, "  %-22s %10zu\n", name.c_str(), n);
    os << line;
  }
  os << "  thing voxels with instance id: " << instances_set << "\n";
}

int cmd_run(const std::string& dataset, const std::string& config, const std::string& out,
            const std::string& window, int dump_stage, std::optional<long> sample, bool boxes, unsigned workers) {
  PipelineConfig cfg = load_config(config);
  if (!window.empty()) cfg.window = parse_window_mode(window);
  if (workers) cfg.workers = workers;
  if (dump_stage < 0 || dump_stage > 4) throw ValidationError("--dump-stage must be between 1 and 4");
  RunOptions opt;
  opt.dump_stage = dump_stage;
  opt.write_boxes = boxes;
  opt.log = &std::cerr;
  if (sample) opt.only_frame = static_cast<FrameIndex>(*sample);
  const RunResult r = run_pipeline(dataset, cfg, out, opt);
  if (r.failures.empty()) return kOk;
  bool all_validation = true;
  for (const auto& f : r.failures) all_validation = all_validation && f.is_validation();
  std::cerr << r.failures.size() << " sample(s) failed\n";
  return all_validation ? kValidation : kRuntime;
}

int cmd_evaluate(const std::string& pred, const std::string& gt, const std::string& config, const std::string& out,
                 bool observed) {
  PipelineConfig cfg = load_config(config);
  if (observed) cfg.evaluation.use_observation_masks = true;
  const EvaluationResult r = evaluate_directories(pred, gt, cfg);
  write_evaluation_reports(out, r, cfg.taxonomy.taxonomy);
  write_text_report(std::cout, r, cfg.taxonomy.taxonomy);
  if (!r.missing.empty()) {
    std::cerr << r.missing.size() << " prediction file(s) missing\n";
    return kValidation;
  }
  return kOk;
}

int cmd_synth(const std::string& scene_path, const std::string& taxonomy, const std::string& out, double pose_sigma,
              unsigned workers) {
  const TaxonomyConfig tc = taxonomy.empty() ? TaxonomyConfig::occ3d_default() : TaxonomyConfig::load(taxonomy);
  SceneSpec scene = scene_path.empty() ? SceneSpec::default_scene(tc.taxonomy) : SceneSpec::load(scene_path, tc.taxonomy);
  if (pose_sigma >= 0.0) {
    scene.noise.pose_sigma = pose_sigma;
    scene.finalize(tc.taxonomy);
  }
  write_scene_dataset(scene, tc, out, workers ? workers : default_worker_count());
  std::cerr << "wrote " << scene.trajectory.size() << " frames to " << out << "\n";
  return kOk;
}

int cmd_export(const std::string& grid_path, const std::string& config, const std::string& out) {
  const PipelineConfig cfg = load_config(config);
  const auto& tax = cfg.taxonomy.taxonomy;
  const OccupancyGrid g = read_grid(grid_path);
  std::ofstream os(out);
  if (!os) throw LoadError("cannot write " + out);
  os << "# x y z class instance\n";
  char line[160];
  for (std::size_t v = 0; v < g.size(); ++v) {
    if (!tax.is_semantic(g.sem[v])) continue;
    const Vec3 c = g.spec.center(g.spec.unlinear(v));
    std::snprintf(line, sizeof line, "%.3f %.3f %.3f %s %u\n", c.x(), c.y(), c.z(), tax.info(g.sem[v]).name.c_str(),
                  g.inst[v]);
    os << line;
  }
  return kOk;
}

int cmd_inspect(const std::string& grid_path, const std::string& dataset, const std::string& config,
                std::optional<long> sample) {
  const PipelineConfig cfg = load_config(config);
  const auto& tax = cfg.taxonomy.taxonomy;
  if (!grid_path.empty()) {
    const OccupancyGrid g = read_grid(grid_path);
    const auto d = g.dims();
    std::cout << grid_path << ": " << d[0] << "x" << d[1] << "x" << d[2] << " voxels of " << g.spec.voxel_size
              << " m\n";
    print_histogram(std::cout, g, tax);
    return kOk;
  }
  if (dataset.empty() || !sample) throw ValidationError("inspect needs --grid, or --dataset with --sample");
  const FrameIndex t = static_cast<FrameIndex>(*sample);
  const fs::path tmp = fs::temp_directory_path() / ("occfuse_inspect_" + std::to_string(::getpid()));
  for (int stage = 1; stage <= 4; ++stage) {
    RunOptions opt;
    opt.only_frame = t;
    opt.dump_stage = stage;
    opt.log = stage == 1 ? &std::cout : nullptr;
    const RunResult r = run_pipeline(dataset, cfg, tmp, opt);
    if (!r.failures.empty()) throw r.failures.front();
    const fs::path p = tmp / "stages" / (std::to_string(t) + ".stage" + std::to_string(stage) + ".grid");
    if (!fs::exists(p)) {
      std::cout << "stage " << stage << ": disabled\n";
      continue;
    }
    std::cout << "stage " << stage << ":\n";
    print_histogram(std::cout, read_grid(p), tax);
  }
  fs::remove_all(tmp);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Training-free panoptic occupancy from multi-view priors"};
  app.require_subcommand(1);

  std::string dataset, config, out, window, pred, gt, scene, taxonomy, grid;
  int dump_stage = 0;
  long sample = -1;
  bool boxes = false, observed = false;
  unsigned workers = 0;
  double pose_sigma = -1.0;

  auto* run = app.add_subcommand("run", "Run the pipeline over a dataset");
  run->add_option("--dataset", dataset, "Dataset root")->required();
  run->add_option("--config", config, "Pipeline config (JSON)");
  run->add_option("--out", out, "Output directory for <t>.grid files")->required();
  run->add_option("--window", window, "causal or non-causal");
  run->add_option("--dump-stage", dump_stage, "Also write the grid after refinement stage N (1-4)");
  run->add_option("--sample", sample, "Process only this frame");
  run->add_flag("--boxes", boxes, "Write fitted instance boxes");
  run->add_option("--workers", workers, "Worker threads (overrides config and OCCFUSE_WORKERS)");

  auto* eval = app.add_subcommand("evaluate", "Compare predicted grids with ground truth");
  eval->add_option("--pred", pred, "Directory of predicted <t>.grid files")->required();
  eval->add_option("--gt", gt, "Directory of ground-truth <t>.grid files")->required();
  eval->add_option("--config", config, "Pipeline config (JSON)");
  eval->add_option("--out", out, "Directory for report.txt and summary.json")->required();
  eval->add_flag("--observed", observed, "Restrict voxel metrics to <t>.observed masks");

  auto* syn = app.add_subcommand("synth", "Generate a synthetic dataset with ground truth");
  syn->add_option("--scene", scene, "Scene spec (JSON); built-in street scene if omitted");
  syn->add_option("--taxonomy", taxonomy, "Taxonomy config (JSON)");
  syn->add_option("--out", out, "Dataset root to write")->required();
  syn->add_option("--pose-sigma", pose_sigma, "Override ego translation noise (m)");
  syn->add_option("--workers", workers, "Worker threads");

  auto* exp = app.add_subcommand("export", "Write occupied voxel centers as text");
  exp->add_option("--grid", grid, "Grid file")->required();
  exp->add_option("--config", config, "Pipeline config (JSON)");
  exp->add_option("--out", out, "Output text file")->required();

  auto* ins = app.add_subcommand("inspect", "Print grid statistics or per-stage statistics for one sample");
  ins->add_option("--grid", grid, "Grid file");
  ins->add_option("--dataset", dataset, "Dataset root");
  ins->add_option("--config", config, "Pipeline config (JSON)");
  ins->add_option("--sample", sample, "Frame to inspect");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kValidation;
  }

  const std::optional<long> frame = sample >= 0 ? std::optional<long>(sample) : std::nullopt;
  try {
    if (*run) return cmd_run(dataset, config, out, window, dump_stage, frame, boxes, workers);
    if (*eval) return cmd_evaluate(pred, gt, config, out, observed);
    if (*syn) return cmd_synth(scene, taxonomy, out, pose_sigma, workers);
    if (*exp) return cmd_export(grid, config, out);
    if (*ins) return cmd_inspect(grid, dataset, config, frame);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kOk;
}
