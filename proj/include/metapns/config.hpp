#pragma once

// Experiment configuration: one JSON document describing mesh, simulator,
// dataset, model, training, evaluation and baselines. Every section is
// optional; absent keys keep their defaults, unknown keys are rejected.
//
// Seeds: a single root seed. Each stage draws its own with
// derive_seed(root, "<stage>") for the stage names used in stage_seed().

#include "metapns/baselines.hpp"
#include "metapns/epsim.hpp"
#include "metapns/metainfer.hpp"
#include "metapns/training.hpp"

#include <nlohmann/json.hpp>

#include <set>

namespace metapns::config {

using nlohmann::json;

[[noreturn]] inline void config_error(const std::string& what) { throw Error(ErrorKind::Config, what); }

struct MeshSpec {
  std::string kind = "grid";  // grid | icosphere | file
  int nx = 14, ny = 14;
  double spacing = 1.0;
  int subdivisions = 2;
  double radius = 10.0;
  std::string path;
};

struct HierarchySpec {
  int levels = 4;
  double ratio = 0.5;
};

/// Node selection: explicit list, or `count` farthest-point nodes from `start`.
struct NodeSelection {
  std::vector<int> nodes;
  int count = 0;
  int start = 0;
};

struct DatasetSpec {
  std::vector<epsim::ScarConfig> subjects;
  NodeSelection origins{{}, 25, 0};
  NodeSelection sensors{{}, 48, 7};
  double noise_std = 0.01;
  double stim_duration = 1.0;
  double stim_amplitude = 1.0;
};

struct EvalSpec {
  int nu = 5;
  std::vector<int> sweep{5, 4, 3, 2, 1};
  bool keep_predictions = true;
};

struct BaselineSpec {
  bool pns = true;
  bool bo = true;
  int bo_budget = 100;
  int bo_segments = 7;
  int bo_initial = 10;
  double bo_lo = 0.05, bo_hi = 0.6;
  std::vector<std::string> bo_subjects;  // empty = all
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  int workers = 1;
  std::string out = "runs/desk";
  MeshSpec mesh;
  HierarchySpec hierarchy;
  epsim::ApParams simulator;
  DatasetSpec dataset;
  metainfer::ModelConfig model;  // meta.frames and init_seed are derived
  training::TrainConfig train;   // seed and mode are derived
  EvalSpec eval;
  BaselineSpec baselines;
};

inline std::uint64_t stage_seed(const ExperimentConfig& c, std::string_view stage) { return derive_seed(c.seed, stage); }

/// The 14x14 sheet with one healthy and three scarred subjects.
inline ExperimentConfig desk_defaults() {
  ExperimentConfig c;
  c.simulator.record_every = 8;
  c.dataset.subjects = {{"healthy", {}},
                        {"scar_a", {{9 * 14 + 9, 3.0, 0.5}}},
                        {"scar_b", {{4 * 14 + 9, 2.5, 0.3}}},
                        {"scar_c", {{7 * 14 + 3, 3.0, 0.5}}}};
  c.model.sur = {8, 16, 16, 2};
  c.model.meta.hidden = 8;
  c.train.samples_per_subject = 2;
  c.train.steps_per_episode = 10;
  return c;
}

// ---------------------------------------------------------------------------
// Reading with unknown-key rejection.

class Section {
 public:
  Section(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) config_error(cat(label(), " must be an object"));
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception& e) {
      config_error(cat(label(), ".", key, ": ", e.what()));
    }
  }

  bool has(const char* key) {
    seen_.insert(key);
    return j_.contains(key);
  }
  const json& at(const char* key) const { return j_.at(key); }
  std::string path(const char* key) const { return where_.empty() ? key : where_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.contains(it.key())) config_error(cat("unknown key '", path(it.key().c_str()), "'"));
  }

 private:
  std::string label() const { return where_.empty() ? "config" : where_; }
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

inline json to_json(const NodeSelection& s) {
  if (!s.nodes.empty()) return {{"nodes", s.nodes}};
  return {{"count", s.count}, {"start", s.start}};
}

inline NodeSelection node_selection_from(const json& j, const std::string& where) {
  NodeSelection s;
  Section r(j, where);
  r.get("nodes", s.nodes);
  r.get("count", s.count);
  r.get("start", s.start);
  r.finish();
  if (!s.nodes.empty() && j.contains("count")) config_error(where + ": give either nodes or count");
  if (!s.nodes.empty()) s.count = 0;
  return s;
}

inline json to_json(const ExperimentConfig& c) {
  json subjects = json::array();
  for (const auto& s : c.dataset.subjects) {
    json scars = json::array();
    for (const auto& sc : s.scars) scars.push_back({{"center", sc.center}, {"radius", sc.radius}, {"excitability", sc.excitability}});
    subjects.push_back({{"name", s.name}, {"scars", scars}});
  }
  json model = metainfer::to_json(c.model);
  model.erase("frames");
  model.erase("init_seed");
  json train = training::to_json(c.train);
  train.erase("seed");
  train.erase("mode");
  return {{"seed", c.seed},
          {"workers", c.workers},
          {"out", c.out},
          {"mesh",
           {{"kind", c.mesh.kind}, {"nx", c.mesh.nx}, {"ny", c.mesh.ny}, {"spacing", c.mesh.spacing},
            {"subdivisions", c.mesh.subdivisions}, {"radius", c.mesh.radius}, {"path", c.mesh.path}}},
          {"hierarchy", {{"levels", c.hierarchy.levels}, {"ratio", c.hierarchy.ratio}}},
          {"simulator", epsim::to_json(c.simulator)},
          {"dataset",
           {{"subjects", subjects},
            {"origins", to_json(c.dataset.origins)},
            {"sensors", to_json(c.dataset.sensors)},
            {"noise_std", c.dataset.noise_std},
            {"stim_duration", c.dataset.stim_duration},
            {"stim_amplitude", c.dataset.stim_amplitude}}},
          {"model", model},
          {"train", train},
          {"eval", {{"nu", c.eval.nu}, {"sweep", c.eval.sweep}, {"keep_predictions", c.eval.keep_predictions}}},
          {"baselines",
           {{"pns", c.baselines.pns},
            {"bo", c.baselines.bo},
            {"bo_budget", c.baselines.bo_budget},
            {"bo_segments", c.baselines.bo_segments},
            {"bo_initial", c.baselines.bo_initial},
            {"bo_bounds", {c.baselines.bo_lo, c.baselines.bo_hi}},
            {"bo_subjects", c.baselines.bo_subjects}}}};
}

inline void validate(const ExperimentConfig& c) {
  auto check = [](bool ok, const std::string& what) {
    if (!ok) config_error(what);
  };
  check(c.workers >= 1, "workers must be >= 1");
  check(c.mesh.kind == "grid" || c.mesh.kind == "icosphere" || c.mesh.kind == "file",
        cat("mesh.kind must be grid, icosphere or file, got '", c.mesh.kind, "'"));
  if (c.mesh.kind == "grid") check(c.mesh.nx >= 2 && c.mesh.ny >= 2 && c.mesh.spacing > 0, "mesh: grid needs nx, ny >= 2 and spacing > 0");
  if (c.mesh.kind == "icosphere") check(c.mesh.subdivisions >= 0 && c.mesh.radius > 0, "mesh: bad icosphere size");
  if (c.mesh.kind == "file") check(!c.mesh.path.empty(), "mesh.path required for kind 'file'");
  check(c.hierarchy.levels >= 1 && c.hierarchy.ratio > 0 && c.hierarchy.ratio < 1, "hierarchy: levels >= 1, ratio in (0,1)");
  check(c.simulator.dt > 0 && c.simulator.steps >= 2 && c.simulator.record_every >= 1 && c.simulator.frames() >= 2,
        "simulator: need dt > 0 and at least 2 stored frames");
  check(!c.dataset.subjects.empty(), "dataset.subjects must not be empty");
  std::set<std::string> names;
  for (const auto& s : c.dataset.subjects) check(names.insert(s.name).second, cat("duplicate subject '", s.name, "'"));
  check(c.dataset.origins.count >= 2 || c.dataset.origins.nodes.size() >= 2, "dataset.origins: need at least 2");
  check(c.dataset.sensors.count >= 1 || !c.dataset.sensors.nodes.empty(), "dataset.sensors: need at least 1");
  check(c.dataset.noise_std >= 0, "dataset.noise_std must be >= 0");
  try {
    c.train.validate();
  } catch (const Error& e) {
    config_error(e.what());
  }
  check(c.model.sur.hidden > 0 && c.model.sur.d_z > 0 && c.model.sur.d_c > 0 && c.model.sur.kernel_size >= 1 &&
            c.model.meta.hidden > 0,
        "model: sizes must be positive");
  check(c.eval.nu >= 1 && c.eval.nu <= c.train.nu_max, cat("eval.nu must be in [1, ", c.train.nu_max, "]"));
  for (int v : c.eval.sweep) check(v >= 1, "eval.sweep sizes must be >= 1");
  check(c.baselines.bo_budget >= 1 && c.baselines.bo_segments >= 1 && c.baselines.bo_initial >= 1, "baselines: bo sizes must be positive");
  check(c.baselines.bo_hi > c.baselines.bo_lo, "baselines.bo_bounds: empty interval");
  for (const auto& k : c.baselines.bo_subjects) check(names.contains(k), cat("baselines.bo_subjects: unknown subject '", k, "'"));
}

/// Parses over `base` (desk defaults unless given).
inline ExperimentConfig from_json(const json& j, ExperimentConfig c = desk_defaults()) {
  Section top(j, "");
  top.get("seed", c.seed);
  top.get("workers", c.workers);
  top.get("out", c.out);
  if (top.has("mesh")) {
    Section r(j.at("mesh"), "mesh");
    r.get("kind", c.mesh.kind);
    r.get("nx", c.mesh.nx);
    r.get("ny", c.mesh.ny);
    r.get("spacing", c.mesh.spacing);
    r.get("subdivisions", c.mesh.subdivisions);
    r.get("radius", c.mesh.radius);
    r.get("path", c.mesh.path);
    r.finish();
  }
  if (top.has("hierarchy")) {
    Section r(j.at("hierarchy"), "hierarchy");
    r.get("levels", c.hierarchy.levels);
    r.get("ratio", c.hierarchy.ratio);
    r.finish();
  }
  if (top.has("simulator")) {
    Section r(j.at("simulator"), "simulator");
    auto& p = c.simulator;
    r.get("k", p.k);
    r.get("a_healthy", p.a_healthy);
    r.get("eps0", p.eps0);
    r.get("mu1", p.mu1);
    r.get("mu2", p.mu2);
    r.get("diffusion", p.diffusion);
    r.get("dt", p.dt);
    r.get("steps", p.steps);
    r.get("record_every", p.record_every);
    r.get("stability_limit", p.stability_limit);
    r.finish();
  }
  if (top.has("dataset")) {
    const json& d = j.at("dataset");
    Section r(d, "dataset");
    if (r.has("subjects")) {
      if (!d.at("subjects").is_array()) config_error("dataset.subjects must be an array");
      c.dataset.subjects.clear();
      for (std::size_t i = 0; i < d.at("subjects").size(); ++i) {
        const std::string where = cat("dataset.subjects[", i, "]");
        Section s(d.at("subjects")[i], where);
        epsim::ScarConfig sc;
        s.get("name", sc.name);
        if (sc.name.empty()) config_error(where + ".name is required");
        if (s.has("scars")) {
          const json& arr = d.at("subjects")[i].at("scars");
          if (!arr.is_array()) config_error(where + ".scars must be an array");
          for (std::size_t k = 0; k < arr.size(); ++k) {
            Section q(arr[k], cat(where, ".scars[", k, "]"));
            epsim::ScarSpec spec;
            q.get("center", spec.center);
            q.get("radius", spec.radius);
            q.get("excitability", spec.excitability);
            q.finish();
            sc.scars.push_back(spec);
          }
        }
        s.finish();
        c.dataset.subjects.push_back(std::move(sc));
      }
    }
    if (r.has("origins")) c.dataset.origins = node_selection_from(d.at("origins"), "dataset.origins");
    if (r.has("sensors")) c.dataset.sensors = node_selection_from(d.at("sensors"), "dataset.sensors");
    r.get("noise_std", c.dataset.noise_std);
    r.get("stim_duration", c.dataset.stim_duration);
    r.get("stim_amplitude", c.dataset.stim_amplitude);
    r.finish();
  }
  if (top.has("model")) {
    Section r(j.at("model"), "model");
    r.get("hidden", c.model.sur.hidden);
    r.get("d_z", c.model.sur.d_z);
    r.get("d_c", c.model.sur.d_c);
    r.get("kernel_size", c.model.sur.kernel_size);
    r.get("gate_bias", c.model.sur.gate_bias);
    r.get("meta_hidden", c.model.meta.hidden);
    r.get("sigma_floor", c.model.meta.sigma_floor);
    r.finish();
  }
  if (top.has("train")) {
    Section r(j.at("train"), "train");
    auto& t = c.train;
    r.get("lr0", t.lr0);
    r.get("decay", t.decay);
    r.get("decay_every", t.decay_every);
    r.get("lambda1", t.lambda1);
    r.get("lambda2", t.lambda2);
    r.get("episodes", t.episodes);
    r.get("nu_max", t.nu_max);
    r.get("origins_per_episode", t.origins_per_episode);
    r.get("samples_per_subject", t.samples_per_subject);
    r.get("steps_per_episode", t.steps_per_episode);
    r.get("checkpoint_every", t.checkpoint_every);
    r.finish();
  }
  if (top.has("eval")) {
    Section r(j.at("eval"), "eval");
    r.get("nu", c.eval.nu);
    r.get("sweep", c.eval.sweep);
    r.get("keep_predictions", c.eval.keep_predictions);
    r.finish();
  }
  if (top.has("baselines")) {
    Section r(j.at("baselines"), "baselines");
    r.get("pns", c.baselines.pns);
    r.get("bo", c.baselines.bo);
    r.get("bo_budget", c.baselines.bo_budget);
    r.get("bo_segments", c.baselines.bo_segments);
    r.get("bo_initial", c.baselines.bo_initial);
    std::vector<double> bounds{c.baselines.bo_lo, c.baselines.bo_hi};
    r.get("bo_bounds", bounds);
    if (bounds.size() != 2) config_error("baselines.bo_bounds must be [lo, hi]");
    c.baselines.bo_lo = bounds[0];
    c.baselines.bo_hi = bounds[1];
    r.get("bo_subjects", c.baselines.bo_subjects);
    r.finish();
  }
  top.finish();
  validate(c);
  return c;
}

inline ExperimentConfig load(const io::fs::path& path) {
  if (!io::fs::exists(path)) throw Error(ErrorKind::MissingArtifact, cat("config file not found: ", path.string()));
  json j;
  try {
    j = json::parse(io::read_text(path));
  } catch (const json::parse_error& e) {
    config_error(cat(path.string(), ": ", e.what()));
  }
  return from_json(j);
}

/// FNV-1a of the canonical (sorted-key, compact) serialization.
inline std::string hash_of(const json& j) { return hex64(fnv1a(j.dump())); }

// ---------------------------------------------------------------------------
// Resolution into concrete objects.

inline geometry::MeshGeometry build_mesh(const ExperimentConfig& c) {
  if (c.mesh.kind == "grid") return geometry::grid_sheet(c.mesh.nx, c.mesh.ny, c.mesh.spacing, cat("grid", c.mesh.nx, "x", c.mesh.ny));
  if (c.mesh.kind == "icosphere") return geometry::icosphere(c.mesh.subdivisions, c.mesh.radius);
  return io::read_mesh(c.mesh.path);
}

inline geometry::GraphHierarchy build_hierarchy(const ExperimentConfig& c, const geometry::MeshGeometry& mesh) {
  return geometry::build_hierarchy(mesh, c.hierarchy.levels, c.hierarchy.ratio, stage_seed(c, "hierarchy"));
}

inline std::vector<int> select_nodes(const NodeSelection& s, const geometry::GraphLevel& g, const char* what) {
  if (!s.nodes.empty()) {
    for (int n : s.nodes)
      if (n < 0 || n >= g.node_count) config_error(cat("dataset.", what, ": node ", n, " out of range"));
    return s.nodes;
  }
  if (s.count > g.node_count) config_error(cat("dataset.", what, ": count ", s.count, " exceeds ", g.node_count, " nodes"));
  return epsim::farthest_point_nodes(g, s.count, s.start);
}

inline epsim::BankSpec bank_spec(const ExperimentConfig& c, const geometry::GraphLevel& g) {
  epsim::BankSpec b;
  b.scar_configs = c.dataset.subjects;
  for (const auto& s : b.scar_configs)
    for (const auto& sc : s.scars)
      if (sc.center < 0 || sc.center >= g.node_count)
        config_error(cat("subject '", s.name, "': scar center ", sc.center, " out of range"));
  b.origins = select_nodes(c.dataset.origins, g, "origins");
  b.sensors = select_nodes(c.dataset.sensors, g, "sensors");
  b.params = c.simulator;
  b.noise_std = c.dataset.noise_std;
  b.stim_duration = c.dataset.stim_duration;
  b.stim_amplitude = c.dataset.stim_amplitude;
  b.seed = stage_seed(c, "dataset");
  return b;
}

inline metainfer::ModelConfig model_config(const ExperimentConfig& c, std::string_view role = "model") {
  metainfer::ModelConfig m = c.model;
  m.meta.frames = c.simulator.frames();
  m.init_seed = stage_seed(c, role);
  return m;
}

inline training::TrainConfig train_config(const ExperimentConfig& c, training::Mode mode) {
  training::TrainConfig t = c.train;
  t.mode = mode;
  t.seed = stage_seed(c, mode == training::Mode::Meta ? "train" : "pns-train");
  return t;
}

}  // namespace metapns::config
