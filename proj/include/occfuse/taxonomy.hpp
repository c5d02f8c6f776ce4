#pragma once

// Semantic label space and prompt-to-class rules.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "occfuse/common.hpp"

namespace occfuse {

enum class ClassKind { kThing, kStuff, kFlat };

inline std::string_view to_string(ClassKind k) {
  switch (k) {
    case ClassKind::kThing: return "thing";
    case ClassKind::kStuff: return "stuff";
    case ClassKind::kFlat: return "flat";
  }
  return "stuff";
}

inline ClassKind parse_class_kind(const std::string& s) {
  if (s == "thing") return ClassKind::kThing;
  if (s == "stuff") return ClassKind::kStuff;
  if (s == "flat") return ClassKind::kFlat;
  throw ValidationError("unknown class kind '" + s + "'");
}

struct ClassInfo {
  ClassId id = 0;
  std::string name;
  ClassKind kind = ClassKind::kStuff;
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& obj, std::initializer_list<std::string_view> allowed,
                                const std::string& where) {
  if (!obj.is_object()) throw ValidationError(where + ": expected an object");
  for (const auto& [key, _] : obj.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw ValidationError(where + ": unknown key '" + key + "'");
    }
  }
}

inline const nlohmann::json& require(const nlohmann::json& obj, const char* key, const std::string& where) {
  auto it = obj.find(key);
  if (it == obj.end()) throw ValidationError(where + ": missing key '" + key + "'");
  return *it;
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

}  // namespace detail

class Taxonomy {
 public:
  Taxonomy() = default;

  Taxonomy(std::vector<ClassInfo> classes, ClassId free_id, ClassId ignore_id, std::set<ClassId> eval_excluded,
           std::size_t num_classes)
      : classes_(std::move(classes)),
        free_id_(free_id),
        ignore_id_(ignore_id),
        eval_excluded_(std::move(eval_excluded)),
        num_classes_(num_classes) {
    validate();
  }

  // The 17 Occ3D-nuScenes semantic classes plus free (17) and ignore (255).
  static Taxonomy occ3d_nuscenes() {
    using K = ClassKind;
    std::vector<ClassInfo> c = {
        {0, "others", K::kStuff},          {1, "barrier", K::kThing},
        {2, "bicycle", K::kThing},         {3, "bus", K::kThing},
        {4, "car", K::kThing},             {5, "construction_vehicle", K::kThing},
        {6, "motorcycle", K::kThing},      {7, "pedestrian", K::kThing},
        {8, "traffic_cone", K::kThing},    {9, "trailer", K::kThing},
        {10, "truck", K::kThing},          {11, "driveable_surface", K::kFlat},
        {12, "other_flat", K::kFlat},      {13, "sidewalk", K::kFlat},
        {14, "terrain", K::kFlat},         {15, "manmade", K::kStuff},
        {16, "vegetation", K::kStuff},
    };
    return Taxonomy(std::move(c), 17, 255, {0, 12}, 17);
  }

  const std::vector<ClassInfo>& classes() const { return classes_; }
  ClassId free_id() const { return free_id_; }
  ClassId ignore_id() const { return ignore_id_; }
  const std::set<ClassId>& eval_excluded() const { return eval_excluded_; }
  // K in the vote-confidence smoothing.
  std::size_t num_classes() const { return num_classes_; }

  bool is_semantic(ClassId c) const { return c < classes_.size(); }
  bool is_free(ClassId c) const { return c == free_id_; }
  bool is_ignore(ClassId c) const { return c == ignore_id_; }
  // Occupied = carries a semantic class (neither free nor ignore).
  bool is_occupied(ClassId c) const { return is_semantic(c); }
  bool is_thing(ClassId c) const { return is_semantic(c) && classes_[c].kind == ClassKind::kThing; }
  bool is_excluded(ClassId c) const { return eval_excluded_.count(c) != 0; }

  const ClassInfo& info(ClassId c) const {
    if (!is_semantic(c)) throw ValidationError("class id " + std::to_string(c) + " is not a semantic class");
    return classes_[c];
  }

  std::optional<ClassId> find(std::string_view name) const {
    for (const auto& ci : classes_) {
      if (ci.name == name) return ci.id;
    }
    return std::nullopt;
  }

  std::vector<ClassId> thing_classes() const {
    std::vector<ClassId> out;
    for (const auto& ci : classes_) {
      if (ci.kind == ClassKind::kThing) out.push_back(ci.id);
    }
    return out;
  }

  // Maps a raw label from an input raster into the label space; unknown values
  // become ignore.
  ClassId sanitize(std::uint16_t raw) const {
    if (raw == ignore_id_ || raw == free_id_ || is_semantic(raw)) return raw;
    return ignore_id_;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["classes"] = nlohmann::json::array();
    for (const auto& ci : classes_) {
      j["classes"].push_back({{"class_id", ci.id}, {"name", ci.name}, {"kind", std::string(to_string(ci.kind))}});
    }
    j["free_id"] = free_id_;
    j["ignore_id"] = ignore_id_;
    j["eval_excluded"] = std::vector<ClassId>(eval_excluded_.begin(), eval_excluded_.end());
    j["num_classes"] = num_classes_;
    return j;
  }

  static Taxonomy from_json(const nlohmann::json& j) {
    using detail::require;
    const std::string where = "taxonomy";
    detail::reject_unknown_keys(j, {"classes", "free_id", "ignore_id", "eval_excluded", "num_classes"}, where);
    std::vector<ClassInfo> classes;
    for (const auto& cj : require(j, "classes", where)) {
      detail::reject_unknown_keys(cj, {"class_id", "name", "kind"}, where + ".classes");
      classes.push_back({require(cj, "class_id", where).get<ClassId>(), require(cj, "name", where).get<std::string>(),
                         parse_class_kind(require(cj, "kind", where).get<std::string>())});
    }
    std::set<ClassId> excluded;
    for (const auto& e : require(j, "eval_excluded", where)) excluded.insert(e.get<ClassId>());
    return Taxonomy(std::move(classes), require(j, "free_id", where).get<ClassId>(),
                    require(j, "ignore_id", where).get<ClassId>(), std::move(excluded),
                    require(j, "num_classes", where).get<std::size_t>());
  }

 private:
  void validate() const {
    if (classes_.empty()) throw ValidationError("taxonomy has no classes");
    std::set<std::string> names;
    for (std::size_t i = 0; i < classes_.size(); ++i) {
      if (classes_[i].id != i) {
        throw ValidationError("class ids must be dense and ordered; got " + std::to_string(classes_[i].id) +
                              " at position " + std::to_string(i));
      }
      if (!names.insert(classes_[i].name).second) {
        throw ValidationError("duplicate class name '" + classes_[i].name + "'");
      }
    }
    if (free_id_ == ignore_id_) throw ValidationError("free_id and ignore_id must differ");
    if (is_semantic(free_id_) || is_semantic(ignore_id_)) {
      throw ValidationError("free_id and ignore_id must lie outside the semantic class range");
    }
    for (ClassId e : eval_excluded_) {
      if (!is_semantic(e)) throw ValidationError("eval_excluded contains non-class id " + std::to_string(e));
    }
    if (num_classes_ == 0 || num_classes_ > classes_.size()) {
      throw ValidationError("num_classes must be in [1, number of classes]");
    }
  }

  std::vector<ClassInfo> classes_;
  ClassId free_id_ = 0;
  ClassId ignore_id_ = 0;
  std::set<ClassId> eval_excluded_;
  std::size_t num_classes_ = 0;
};

// ---------------------------------------------------------------------------
// Prompt rules

enum class Relation { kOver, kUnder };

struct PrecedenceEntry {
  Relation relation = Relation::kOver;
  std::string other_prompt;
};

struct PromptRule {
  std::string prompt;
  ClassId target = 0;
  std::vector<PrecedenceEntry> precedence;
};

enum class ConflictWinner { kA, kB, kScore };

// Prompt ids are positions in the rule list. Immutable after construction.
class RuleSet {
 public:
  RuleSet() = default;

  RuleSet(std::vector<PromptRule> rules, const Taxonomy& taxonomy) : rules_(std::move(rules)) {
    const std::size_t n = rules_.size();
    for (std::size_t i = 0; i < n; ++i) {
      const auto& r = rules_[i];
      if (!index_.emplace(r.prompt, i).second) throw ValidationError("duplicate prompt '" + r.prompt + "'");
      if (!taxonomy.is_semantic(r.target) && !taxonomy.is_ignore(r.target)) {
        throw ValidationError("prompt '" + r.prompt + "' targets unknown class " + std::to_string(r.target));
      }
    }
    // beats_[a*n+b]: prompt a wins over prompt b (direct relations, closed below).
    beats_.assign(n * n, false);
    for (std::size_t a = 0; a < n; ++a) {
      for (const auto& p : rules_[a].precedence) {
        auto it = index_.find(p.other_prompt);
        if (it == index_.end()) {
          throw ValidationError("prompt '" + rules_[a].prompt + "' references unknown prompt '" + p.other_prompt +
                                "'");
        }
        const std::size_t b = it->second;
        if (a == b) throw ValidationError("prompt '" + rules_[a].prompt + "' has a precedence relation with itself");
        if (p.relation == Relation::kOver) {
          beats_[a * n + b] = true;
        } else {
          beats_[b * n + a] = true;
        }
      }
    }
    // Warshall transitive closure; a cycle shows up as a prompt beating itself.
    for (std::size_t k = 0; k < n; ++k) {
      for (std::size_t i = 0; i < n; ++i) {
        if (!beats_[i * n + k]) continue;
        for (std::size_t j = 0; j < n; ++j) {
          if (beats_[k * n + j]) beats_[i * n + j] = true;
        }
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (beats_[i * n + i]) {
        throw ValidationError("precedence relations form a cycle through prompt '" + rules_[i].prompt + "'");
      }
      for (std::size_t j = 0; j < n; ++j) {
        if (beats_[i * n + j]) has_precedence_ = true;
      }
    }
  }

  // Rule set for the default taxonomy. The prompt strings are a plausible default
  // (synonyms for vague class names), not a tuned prompt set.
  static RuleSet occ3d_default(const Taxonomy& tax) {
    auto id = [&](std::string_view name) { return *tax.find(name); };
    std::vector<PromptRule> r = {
        {"barrier", id("barrier"), {}},
        {"bicycle", id("bicycle"), {}},
        {"bus", id("bus"), {}},
        {"car", id("car"), {}},
        {"construction vehicle", id("construction_vehicle"), {}},
        {"motorcycle", id("motorcycle"), {}},
        {"person", id("pedestrian"), {}},
        {"traffic cone", id("traffic_cone"), {}},
        {"trailer", id("trailer"), {}},
        {"truck", id("truck"), {}},
        {"road", id("driveable_surface"), {}},
        {"lane marking", id("driveable_surface"), {{Relation::kOver, "road"}}},
        {"parking lot", id("driveable_surface"), {}},
        {"sidewalk", id("sidewalk"), {}},
        {"curb", id("sidewalk"), {}},
        {"grass", id("terrain"), {}},
        {"dirt", id("terrain"), {}},
        {"building", id("manmade"), {}},
        {"wall", id("manmade"), {}},
        {"fence", id("manmade"), {}},
        {"pole", id("manmade"), {}},
        {"traffic sign", id("manmade"), {}},
        {"tree", id("vegetation"), {}},
        {"bush", id("vegetation"), {}},
        {"hedge", id("vegetation"), {}},
    };
    return RuleSet(std::move(r), tax);
  }

  std::size_t size() const { return rules_.size(); }
  const std::vector<PromptRule>& rules() const { return rules_; }
  bool has_precedence() const { return has_precedence_; }

  std::optional<std::size_t> find(std::string_view prompt) const {
    auto it = index_.find(std::string(prompt));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  // r(k): target class of prompt k.
  ClassId resolve_prompt(std::size_t prompt_id) const {
    if (prompt_id >= rules_.size()) {
      throw ValidationError("prompt id " + std::to_string(prompt_id) + " is not in the rule set");
    }
    return rules_[prompt_id].target;
  }

  // Whether prompt a (transitively) takes precedence over prompt b.
  bool beats(std::size_t a, std::size_t b) const { return beats_[a * rules_.size() + b]; }

  ConflictWinner precedence_wins(std::size_t a, std::size_t b) const {
    check(a);
    check(b);
    if (beats(a, b)) return ConflictWinner::kA;
    if (beats(b, a)) return ConflictWinner::kB;
    return ConflictWinner::kScore;
  }

  nlohmann::json to_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& r : rules_) {
      nlohmann::json rj{{"prompt", r.prompt}, {"target", r.target}};
      if (!r.precedence.empty()) {
        rj["precedence"] = nlohmann::json::array();
        for (const auto& p : r.precedence) {
          rj["precedence"].push_back(
              {{"relation", p.relation == Relation::kOver ? "over" : "under"}, {"other_prompt", p.other_prompt}});
        }
      }
      arr.push_back(std::move(rj));
    }
    return arr;
  }

  static RuleSet from_json(const nlohmann::json& arr, const Taxonomy& tax) {
    using detail::require;
    if (!arr.is_array()) throw ValidationError("rules: expected a list");
    std::vector<PromptRule> rules;
    for (const auto& rj : arr) {
      detail::reject_unknown_keys(rj, {"prompt", "target", "precedence"}, "rules");
      PromptRule r;
      r.prompt = require(rj, "prompt", "rules").get<std::string>();
      r.target = require(rj, "target", "rules").get<ClassId>();
      if (auto it = rj.find("precedence"); it != rj.end()) {
        for (const auto& pj : *it) {
          detail::reject_unknown_keys(pj, {"relation", "other_prompt"}, "rules.precedence");
          const auto rel = require(pj, "relation", "rules.precedence").get<std::string>();
          if (rel != "over" && rel != "under") throw ValidationError("relation must be 'over' or 'under'");
          r.precedence.push_back({rel == "over" ? Relation::kOver : Relation::kUnder,
                                  require(pj, "other_prompt", "rules.precedence").get<std::string>()});
        }
      }
      rules.push_back(std::move(r));
    }
    return RuleSet(std::move(rules), tax);
  }

 private:
  void check(std::size_t k) const {
    if (k >= rules_.size()) throw ValidationError("prompt id " + std::to_string(k) + " is not in the rule set");
  }

  std::vector<PromptRule> rules_;
  std::map<std::string, std::size_t> index_;
  std::vector<bool> beats_;
  bool has_precedence_ = false;
};

// One taxonomy file: the label space plus its prompt rules.
struct TaxonomyConfig {
  Taxonomy taxonomy;
  RuleSet rules;

  static TaxonomyConfig occ3d_default() {
    auto tax = Taxonomy::occ3d_nuscenes();
    auto rules = RuleSet::occ3d_default(tax);
    return {std::move(tax), std::move(rules)};
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["taxonomy"] = taxonomy.to_json();
    j["rules"] = rules.to_json();
    return j;
  }

  static TaxonomyConfig from_json(const nlohmann::json& j) {
    detail::reject_unknown_keys(j, {"taxonomy", "rules"}, "taxonomy file");
    auto tax = Taxonomy::from_json(detail::require(j, "taxonomy", "taxonomy file"));
    auto rules = RuleSet::from_json(detail::require(j, "rules", "taxonomy file"), tax);
    return {std::move(tax), std::move(rules)};
  }

  static TaxonomyConfig load(const std::filesystem::path& path) {
    try {
      return from_json(detail::read_json_file(path));
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(path.string() + ": " + e.what());
    } catch (const LoadError&) {
      throw;
    } catch (const ValidationError& e) {
      throw ValidationError(path.string() + ": " + e.what());
    }
  }
};

}  // namespace occfuse
