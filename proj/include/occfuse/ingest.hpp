#pragma once

// On-disk sample format and per-view mask fusion.
//
// Layout of a dataset root:
//   <root>/manifest                 JSON: frames, cameras (camera_id, width, height)
//   <root>/<t>/ego.txt              16 floats, ego-to-world, row-major
//   <root>/<t>/<c>/camera.txt       9 floats K, then 16 floats camera-to-ego
//   <root>/<t>/<c>/depth.f32        H*W float32
//   <root>/<t>/<c>/conf.f32         H*W float32 (raw confidence)
//   <root>/<t>/<c>/points.f32       H*W*3 float32, camera frame
//   <root>/<t>/<c>/sem.u16          H*W uint16 (pre-fused priors), or
//   <root>/<t>/<c>/inst.u16         H*W uint16
//   <root>/<t>/<c>/candidates/<i>/{mask.u8, meta.txt}   raw mask candidates

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "occfuse/common.hpp"
#include "occfuse/geometry.hpp"
#include "occfuse/raster.hpp"
#include "occfuse/taxonomy.hpp"

namespace occfuse {

using FrameIndex = std::uint32_t;
using CameraIndex = std::uint32_t;

struct CameraView {
  CameraIndex camera_id = 0;
  int width = 0;
  int height = 0;
  Mat3 intrinsics = Mat3::Identity();
  Mat4 cam_to_ego = Mat4::Identity();

  void validate() const {
    if (width <= 0 || height <= 0) throw ValidationError("camera " + std::to_string(camera_id) + ": bad image size");
    if (!(intrinsics(0, 0) > 0.0) || !(intrinsics(1, 1) > 0.0)) {
      throw ValidationError("camera " + std::to_string(camera_id) + ": focal lengths must be positive");
    }
    require_rigid(cam_to_ego, "camera " + std::to_string(camera_id) + " extrinsics");
  }
};

struct EgoPose {
  FrameIndex t = 0;
  Mat4 ego_to_world = Mat4::Identity();
};

struct MaskCandidate {
  std::uint32_t prompt_id = 0;
  std::uint32_t candidate_id = 0;
  double score = 0.0;
  Raster<std::uint8_t> mask;
};

// Per-view semantic and instance priors. inst holds view-local ids (0 = none);
// they are namespaced with (t, camera) when lifted.
struct ViewPriors {
  Raster<std::uint16_t> sem;
  Raster<std::uint16_t> inst;
  Raster<float> score;
};

struct GeometryMaps {
  Raster<float> points;  // 3 channels, camera frame
  Raster<float> depth;
  Raster<float> conf;
};

// Packs (t, camera, view-local id) into one id that is unique across a dataset.
// Bits: 16 frame | 6 camera | 10 local id.
inline InstanceId namespace_instance(FrameIndex t, CameraIndex c, std::uint32_t local_id) {
  if (local_id == 0) return 0;
  if (t > 0xFFFFu || c > 0x3Fu || local_id > 0x3FFu) {
    throw ValidationError("instance prior (t=" + std::to_string(t) + ", cam=" + std::to_string(c) +
                          ", id=" + std::to_string(local_id) + ") exceeds the packable range");
  }
  return (static_cast<InstanceId>(t) << 16) | (static_cast<InstanceId>(c) << 10) | local_id;
}

// Fuses raw candidates into priors: each pixel keeps the highest-scoring covering
// candidate unless a precedence rule overrides it. Score ties go to the lower
// prompt id, then the lower candidate id. The view-local instance id of a
// candidate is its 1-based rank in (prompt_id, candidate_id) order.
inline ViewPriors fuse_masks(const std::vector<MaskCandidate>& candidates, const RuleSet& rules,
                             const Taxonomy& taxonomy, int width, int height) {
  ViewPriors out{Raster<std::uint16_t>(width, height, 1, taxonomy.ignore_id()),
                 Raster<std::uint16_t>(width, height, 1, 0), Raster<float>(width, height, 1, 0.0f)};
  if (candidates.empty()) return out;

  const std::size_t m = candidates.size();
  for (const auto& c : candidates) {
    if (!c.mask.same_shape(width, height)) {
      throw ValidationError("mask candidate (prompt " + std::to_string(c.prompt_id) + ", candidate " +
                            std::to_string(c.candidate_id) + ") has dimensions " + std::to_string(c.mask.width()) +
                            "x" + std::to_string(c.mask.height()) + ", view is " + std::to_string(width) + "x" +
                            std::to_string(height));
    }
    if (!std::isfinite(c.score)) throw ValidationError("mask candidate score must be finite");
    if (c.prompt_id >= rules.size()) {
      throw ValidationError("mask candidate references unknown prompt id " + std::to_string(c.prompt_id));
    }
  }

  std::vector<std::size_t> by_id(m);
  std::iota(by_id.begin(), by_id.end(), 0);
  std::sort(by_id.begin(), by_id.end(), [&](std::size_t a, std::size_t b) {
    const auto& x = candidates[a];
    const auto& y = candidates[b];
    return std::tie(x.prompt_id, x.candidate_id) < std::tie(y.prompt_id, y.candidate_id);
  });
  if (m > std::numeric_limits<std::uint16_t>::max()) throw ValidationError("too many mask candidates in one view");
  std::vector<std::uint16_t> local_id(m);
  for (std::size_t r = 0; r < m; ++r) {
    if (r > 0) {
      const auto& prev = candidates[by_id[r - 1]];
      const auto& cur = candidates[by_id[r]];
      if (prev.prompt_id == cur.prompt_id && prev.candidate_id == cur.candidate_id) {
        throw ValidationError("duplicate mask candidate (prompt " + std::to_string(cur.prompt_id) + ", candidate " +
                              std::to_string(cur.candidate_id) + ")");
      }
    }
    local_id[by_id[r]] = static_cast<std::uint16_t>(r + 1);
  }

  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& x = candidates[a];
    const auto& y = candidates[b];
    if (x.score != y.score) return x.score > y.score;
    return std::tie(x.prompt_id, x.candidate_id) < std::tie(y.prompt_id, y.candidate_id);
  });

  std::vector<std::size_t> covering;
  covering.reserve(m);
  const std::size_t pixels = out.sem.pixel_count();
  for (std::size_t p = 0; p < pixels; ++p) {
    covering.clear();
    for (std::size_t idx : order) {
      if (candidates[idx].mask[p] != 0) {
        covering.push_back(idx);
        if (!rules.has_precedence()) break;
      }
    }
    if (covering.empty()) continue;
    // First candidate in score order that no other covering prompt outranks.
    // Acyclic precedence guarantees such a candidate exists.
    std::size_t winner = covering.front();
    if (covering.size() > 1) {
      for (std::size_t c : covering) {
        const bool dominated = std::any_of(covering.begin(), covering.end(), [&](std::size_t d) {
          return rules.beats(candidates[d].prompt_id, candidates[c].prompt_id);
        });
        if (!dominated) {
          winner = c;
          break;
        }
      }
    }
    const ClassId cls = rules.resolve_prompt(candidates[winner].prompt_id);
    out.sem[p] = cls;
    out.inst[p] = taxonomy.is_ignore(cls) ? 0 : local_id[winner];
    out.score[p] = static_cast<float>(candidates[winner].score);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset IO

struct ManifestCamera {
  CameraIndex camera_id = 0;
  int width = 0;
  int height = 0;
};

struct Manifest {
  std::vector<FrameIndex> frames;
  std::vector<ManifestCamera> cameras;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["frames"] = frames;
    j["cameras"] = nlohmann::json::array();
    for (const auto& c : cameras) {
      j["cameras"].push_back({{"camera_id", c.camera_id}, {"width", c.width}, {"height", c.height}});
    }
    return j;
  }

  static Manifest from_json(const nlohmann::json& j) {
    detail::reject_unknown_keys(j, {"frames", "cameras"}, "manifest");
    Manifest m;
    m.frames = detail::require(j, "frames", "manifest").get<std::vector<FrameIndex>>();
    for (const auto& cj : detail::require(j, "cameras", "manifest")) {
      detail::reject_unknown_keys(cj, {"camera_id", "width", "height"}, "manifest.cameras");
      m.cameras.push_back({cj.at("camera_id").get<CameraIndex>(), cj.at("width").get<int>(),
                           cj.at("height").get<int>()});
    }
    if (!std::is_sorted(m.frames.begin(), m.frames.end()) ||
        std::adjacent_find(m.frames.begin(), m.frames.end()) != m.frames.end()) {
      throw ValidationError("manifest: frames must be strictly increasing");
    }
    return m;
  }
};

struct SampleView {
  CameraView camera;
  ViewPriors priors;
  GeometryMaps geometry;
  bool fused_from_candidates = false;
};

struct Sample {
  EgoPose ego;
  std::vector<SampleView> views;
  std::size_t unknown_labels = 0;  // raster labels outside the taxonomy, mapped to ignore
};

namespace detail {

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::vector<double> read_numbers(const std::filesystem::path& path, std::size_t expected) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open " + path.string());
  std::vector<double> v;
  std::string tok;
  while (in >> tok) {
    char* end = nullptr;
    const double x = std::strtod(tok.c_str(), &end);
    if (end == tok.c_str() || *end != '\0') throw LoadError(path.string() + ": malformed number '" + tok + "'");
    v.push_back(x);
  }
  if (v.size() != expected) {
    throw LoadError(path.string() + ": expected " + std::to_string(expected) + " numbers, found " +
                    std::to_string(v.size()));
  }
  return v;
}

inline Mat4 mat4_from(const std::vector<double>& v, std::size_t offset) {
  Mat4 m;
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) m(r, c) = v[offset + r * 4 + c];
  return m;
}

inline void write_matrix(std::ostream& os, const Eigen::MatrixXd& m) {
  for (int r = 0; r < m.rows(); ++r) {
    for (int c = 0; c < m.cols(); ++c) os << (c ? " " : "") << format_double(m(r, c));
    os << "\n";
  }
}

inline void write_text(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write " + path.string());
  out << content;
}

}  // namespace detail

// Read-side access to a dataset. Every file open is reported to the optional
// access hook, which lets tests verify causal reads.
class Dataset {
 public:
  using AccessHook = std::function<void(const std::filesystem::path&)>;

  explicit Dataset(std::filesystem::path root, AccessHook hook = {}) : root_(std::move(root)), hook_(std::move(hook)) {
    const auto mpath = root_ / "manifest";
    touch(mpath);
    try {
      manifest_ = Manifest::from_json(detail::read_json_file(mpath));
    } catch (const nlohmann::json::exception& e) {
      throw LoadError(mpath.string() + ": " + e.what());
    }
  }

  const std::filesystem::path& root() const { return root_; }
  const Manifest& manifest() const { return manifest_; }

  bool has_frame(FrameIndex t) const {
    return std::binary_search(manifest_.frames.begin(), manifest_.frames.end(), t);
  }

  Sample load_sample(FrameIndex t, const TaxonomyConfig& tax) const {
    if (!has_frame(t)) throw LoadError("frame " + std::to_string(t) + " is not listed in the manifest");
    const auto fdir = root_ / std::to_string(t);
    Sample s;
    s.ego.t = t;
    const auto ego_path = fdir / "ego.txt";
    touch(ego_path);
    s.ego.ego_to_world = detail::mat4_from(detail::read_numbers(ego_path, 16), 0);
    if (!is_rigid(s.ego.ego_to_world)) throw LoadError(ego_path.string() + ": ego pose is not a rigid transform");
    for (const auto& mc : manifest_.cameras) {
      s.views.push_back(load_view(fdir / std::to_string(mc.camera_id), mc, tax, s.unknown_labels));
    }
    return s;
  }

 private:
  void touch(const std::filesystem::path& p) const {
    if (hook_) hook_(p);
  }

  template <typename T>
  Raster<T> read(const std::filesystem::path& p, int w, int h, int ch = 1) const {
    touch(p);
    return read_raster<T>(p, w, h, ch);
  }

  SampleView load_view(const std::filesystem::path& dir, const ManifestCamera& mc, const TaxonomyConfig& tax,
                       std::size_t& unknown) const {
    namespace fs = std::filesystem;
    SampleView v;
    const auto cam_path = dir / "camera.txt";
    touch(cam_path);
    const auto nums = detail::read_numbers(cam_path, 25);
    v.camera.camera_id = mc.camera_id;
    v.camera.width = mc.width;
    v.camera.height = mc.height;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) v.camera.intrinsics(r, c) = nums[r * 3 + c];
    v.camera.cam_to_ego = detail::mat4_from(nums, 9);
    try {
      v.camera.validate();
    } catch (const ValidationError& e) {
      throw LoadError(cam_path.string() + ": " + e.what());
    }

    const int w = mc.width, h = mc.height;
    const auto sem_path = dir / "sem.u16";
    const auto depth_path = dir / "depth.f32";
    const bool have_priors = fs::exists(sem_path);
    if (have_priors) check_matching_sizes(depth_path, sizeof(float), sem_path, sizeof(std::uint16_t));

    v.geometry.depth = read<float>(depth_path, w, h);
    v.geometry.conf = read<float>(dir / "conf.f32", w, h);
    v.geometry.points = read<float>(dir / "points.f32", w, h, 3);

    if (have_priors) {
      v.priors.sem = read<std::uint16_t>(sem_path, w, h);
      v.priors.inst = read<std::uint16_t>(dir / "inst.u16", w, h);
      v.priors.score = Raster<float>(w, h, 1, 0.0f);
      auto& sem = v.priors.sem.data();
      auto& inst = v.priors.inst.data();
      for (std::size_t p = 0; p < sem.size(); ++p) {
        const ClassId c = tax.taxonomy.sanitize(sem[p]);
        if (c != sem[p]) ++unknown;
        sem[p] = c;
        if (tax.taxonomy.is_ignore(c)) inst[p] = 0;
      }
    } else {
      const auto cdir = dir / "candidates";
      if (!fs::is_directory(cdir)) {
        throw LoadError(dir.string() + ": neither sem.u16 nor candidates/ is present");
      }
      std::vector<fs::path> entries;
      for (const auto& e : fs::directory_iterator(cdir)) entries.push_back(e.path());
      std::sort(entries.begin(), entries.end());
      std::vector<MaskCandidate> cands;
      for (const auto& e : entries) cands.push_back(load_candidate(e, w, h));
      try {
        v.priors = fuse_masks(cands, tax.rules, tax.taxonomy, w, h);
      } catch (const ValidationError& err) {
        throw LoadError(cdir.string() + ": " + err.what());
      }
      v.fused_from_candidates = true;
    }
    return v;
  }

  MaskCandidate load_candidate(const std::filesystem::path& dir, int w, int h) const {
    MaskCandidate c;
    const auto meta = dir / "meta.txt";
    touch(meta);
    std::ifstream in(meta);
    if (!in) throw LoadError("cannot open " + meta.string());
    bool seen_prompt = false, seen_cand = false, seen_score = false;
    std::string key, value;
    while (in >> key >> value) {
      char* end = nullptr;
      if (key == "prompt_id") {
        c.prompt_id = static_cast<std::uint32_t>(std::strtoul(value.c_str(), &end, 10));
        seen_prompt = true;
      } else if (key == "candidate_id") {
        c.candidate_id = static_cast<std::uint32_t>(std::strtoul(value.c_str(), &end, 10));
        seen_cand = true;
      } else if (key == "score") {
        c.score = std::strtod(value.c_str(), &end);
        seen_score = true;
      } else {
        throw LoadError(meta.string() + ": unknown key '" + key + "'");
      }
      if (end == value.c_str() || *end != '\0') throw LoadError(meta.string() + ": malformed value for " + key);
    }
    if (!seen_prompt || !seen_cand || !seen_score) {
      throw LoadError(meta.string() + ": requires prompt_id, candidate_id and score");
    }
    c.mask = read<std::uint8_t>(dir / "mask.u8", w, h);
    return c;
  }

  static void check_matching_sizes(const std::filesystem::path& a, std::size_t a_elem, const std::filesystem::path& b,
                                   std::size_t b_elem) {
    std::error_code ea, eb;
    const auto sa = std::filesystem::file_size(a, ea);
    const auto sb = std::filesystem::file_size(b, eb);
    if (ea) throw LoadError("cannot open " + a.string());
    if (eb) throw LoadError("cannot open " + b.string());
    if (sa % a_elem != 0 || sb % b_elem != 0 || sa / a_elem != sb / b_elem) {
      throw LoadError("raster dimension mismatch between " + a.string() + " (" + std::to_string(sa / a_elem) +
                      " px) and " + b.string() + " (" + std::to_string(sb / b_elem) + " px)");
    }
  }

  std::filesystem::path root_;
  AccessHook hook_;
  Manifest manifest_;
};

// Writes one frame of a dataset. With write_priors=false the view's candidates
// are written instead of sem/inst rasters.
struct ViewRecord {
  CameraView camera;
  GeometryMaps geometry;
  ViewPriors priors;
  std::vector<MaskCandidate> candidates;
};

inline void write_manifest(const std::filesystem::path& root, const Manifest& m) {
  std::filesystem::create_directories(root);
  detail::write_text(root / "manifest", m.to_json().dump(2) + "\n");
}

inline void write_sample(const std::filesystem::path& root, const EgoPose& ego, const std::vector<ViewRecord>& views,
                         bool write_priors, bool write_candidates) {
  namespace fs = std::filesystem;
  const auto fdir = root / std::to_string(ego.t);
  fs::create_directories(fdir);
  {
    std::ostringstream os;
    detail::write_matrix(os, ego.ego_to_world);
    detail::write_text(fdir / "ego.txt", os.str());
  }
  for (const auto& v : views) {
    const auto dir = fdir / std::to_string(v.camera.camera_id);
    fs::create_directories(dir);
    std::ostringstream os;
    detail::write_matrix(os, v.camera.intrinsics);
    detail::write_matrix(os, v.camera.cam_to_ego);
    detail::write_text(dir / "camera.txt", os.str());
    write_raster(dir / "depth.f32", v.geometry.depth);
    write_raster(dir / "conf.f32", v.geometry.conf);
    write_raster(dir / "points.f32", v.geometry.points);
    if (write_priors) {
      write_raster(dir / "sem.u16", v.priors.sem);
      write_raster(dir / "inst.u16", v.priors.inst);
    }
    if (write_candidates) {
      const auto cdir = dir / "candidates";
      fs::create_directories(cdir);
      for (std::size_t i = 0; i < v.candidates.size(); ++i) {
        char name[16];
        std::snprintf(name, sizeof name, "%04zu", i);
        const auto cd = cdir / name;
        fs::create_directories(cd);
        const auto& c = v.candidates[i];
        detail::write_text(cd / "meta.txt", "prompt_id " + std::to_string(c.prompt_id) + "\ncandidate_id " +
                                                std::to_string(c.candidate_id) + "\nscore " +
                                                detail::format_double(c.score) + "\n");
        write_raster(cd / "mask.u8", c.mask);
      }
    }
  }
}

}  // namespace occfuse
