#pragma once

// Experiment pipeline over one output directory:
//
//   <out>/config.json            resolved configuration
//   <out>/manifest.json          RunManifest, rewritten atomically after each stage
//   <out>/dataset/               mesh.mesh + subject bank
//   <out>/train/                 model.ckpt, loss_log.csv, checkpoints/
//   <out>/eval/                  metrics.csv, dc_tissue.csv, contexts.json, speed.json, predictions/
//   <out>/sweep/                 sweep.csv
//   <out>/baselines/             pns.ckpt, pns_loss_log.csv, metrics.csv, dc_tissue.csv, bo_fits.json
//   <out>/report/                panel_<subject>.svg, sweep.svg, summary.md
//
// A stage is complete when <out>/<stage>/stamp.json exists; the stamp holds
// a hash of everything the stage's output depends on.

#include "metapns/baselines.hpp"
#include "metapns/config.hpp"
#include "metapns/personalize.hpp"
#include "metapns/report.hpp"
#include "metapns/training.hpp"

#include <functional>
#include <iostream>

#ifndef METAPNS_VERSION
#define METAPNS_VERSION "unversioned"
#endif

namespace metapns::pipeline {

namespace fs = std::filesystem;
using config::ExperimentConfig;
using nlohmann::json;

inline const std::vector<std::string>& all_stages() {
  static const std::vector<std::string> s{"dataset", "train", "eval", "sweep", "baselines", "plots"};
  return s;
}

inline std::vector<std::string> upstream_of(const std::string& stage) {
  if (stage == "dataset") return {};
  if (stage == "train" || stage == "baselines") return {"dataset"};
  if (stage == "eval" || stage == "sweep") return {"dataset", "train"};
  if (stage == "plots") return {"dataset", "eval", "sweep"};
  fail(cat("unknown stage '", stage, "'"));
}

struct StageRecord {
  std::string name;
  std::string status;  // ran | skipped
  std::string hash;
  double seconds = 0.0;
  std::vector<std::string> artifacts;
};

struct RunManifest {
  std::string config_hash;
  std::string code_version = METAPNS_VERSION;
  std::uint64_t seed = 0;
  std::map<std::string, std::string> seeds;
  std::vector<StageRecord> stages;

  const StageRecord* find(const std::string& name) const {
    for (const auto& s : stages)
      if (s.name == name) return &s;
    return nullptr;
  }
};

inline json to_json(const RunManifest& m) {
  json stages = json::array();
  for (const auto& s : m.stages)
    stages.push_back({{"name", s.name}, {"status", s.status}, {"hash", s.hash}, {"seconds", s.seconds}, {"artifacts", s.artifacts}});
  return {{"config_hash", m.config_hash}, {"code_version", m.code_version}, {"seed", m.seed}, {"seeds", m.seeds}, {"stages", stages}};
}

/// The part of the configuration that determines results; workers and the
/// output directory do not.
inline json identity(const ExperimentConfig& c) {
  json j = config::to_json(c);
  j.erase("workers");
  j.erase("out");
  return j;
}

inline std::string stage_hash(const ExperimentConfig& c, const std::string& stage) {
  const json id = identity(c);
  auto pick = [&](std::initializer_list<const char*> keys) {
    json j = {{"stage", stage}, {"seed", c.seed}};
    for (const char* k : keys) j[k] = id.at(k);
    return j;
  };
  json j;
  if (stage == "dataset") j = pick({"mesh", "simulator", "dataset"});
  else if (stage == "train") j = pick({"hierarchy", "model", "train"});
  else if (stage == "eval" || stage == "sweep") j = pick({"eval"});
  else if (stage == "baselines") j = pick({"hierarchy", "model", "train", "eval", "baselines"});
  else if (stage == "plots") j = pick({});
  else fail(cat("unknown stage '", stage, "'"));
  for (const auto& up : upstream_of(stage)) j["upstream"][up] = stage_hash(c, up);
  return config::hash_of(j);
}

inline fs::path stamp_path(const fs::path& out, const std::string& stage) { return out / stage / "stamp.json"; }

inline std::optional<json> read_stamp(const fs::path& out, const std::string& stage) {
  const fs::path p = stamp_path(out, stage);
  if (!fs::exists(p)) return std::nullopt;
  return json::parse(io::read_text(p));
}

// ---------------------------------------------------------------------------
// Shared loaders.

struct Workspace {
  const ExperimentConfig& cfg;
  fs::path out;
  std::ostream& log;

  fs::path dir(const std::string& stage) const { return out / stage; }

  geometry::MeshGeometry mesh() const { return io::read_mesh(dir("dataset") / "mesh.mesh"); }
  epsim::SubjectBank bank() const { return epsim::load_bank(dir("dataset")); }
  eval::ContextSets contexts(const epsim::SubjectBank& bank, int nu) const {
    return eval::draw_contexts(bank, nu, config::stage_seed(cfg, "contexts"));
  }
};

inline void write_rows(const fs::path& dir, const std::string& stem, const std::vector<eval::MetricsRow>& rows) {
  io::write_text_atomic(dir / (stem + ".csv"), eval::to_csv(rows));
  io::write_text_atomic(dir / ("dc_tissue" + (stem == "metrics" ? std::string() : "_" + stem) + ".csv"), eval::dc_tissue_csv(rows));
}

inline json contexts_json(const eval::ContextSets& c) {
  json j = json::object();
  for (const auto& [k, ids] : c) j[k] = ids;
  return j;
}

/// Trains a model and writes <stem>.ckpt and <stem>_loss_log.csv (or
/// loss_log.csv for the main model).
inline training::Checkpoint train_model(const Workspace& ws, training::Mode mode, const fs::path& dir,
                                        const std::string& stem) {
  const auto mesh = ws.mesh();
  const auto bank = ws.bank();
  const auto mcfg = config::model_config(ws.cfg, mode == training::Mode::Meta ? "model" : "pns-model");
  auto model = metainfer::make_model(mcfg, config::build_hierarchy(ws.cfg, mesh));
  const auto tcfg = config::train_config(ws.cfg, mode);
  auto state = training::TrainState::fresh(tcfg);
  training::TrainHooks hooks;
  const int every = std::max(1, tcfg.episodes / 10);
  hooks.on_episode = [&](const training::LossLogRow& r) {
    if (r.episode % every == 0 || r.episode + 1 == tcfg.episodes)
      ws.log << "  [" << stem << "] episode " << r.episode << " loss " << r.loss.total << " lr " << r.lr << std::endl;
  };
  hooks.on_checkpoint = [&](const training::Checkpoint& ck) {
    training::save_checkpoint(dir / "checkpoints" / cat(stem, "_ep", ck.state.episode, ".ckpt"), ck);
  };
  const auto logrows = training::train(bank, model, tcfg, state, ws.cfg.workers, hooks);
  std::ostringstream csv;
  csv << training::loss_log_header();
  for (const auto& r : logrows) csv << training::to_csv(r);
  io::write_text_atomic(dir / (stem == "model" ? "loss_log.csv" : stem + "_loss_log.csv"), csv.str());
  training::Checkpoint ck{std::move(model), tcfg, state};
  training::save_checkpoint(dir / (stem + ".ckpt"), ck);
  return ck;
}

/// Median wall time of `reps` calls.
inline double median_seconds(int reps, const std::function<void()>& f) {
  std::vector<double> t;
  for (int i = 0; i < reps; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    f();
    t.push_back(eval::seconds_since(t0));
  }
  std::sort(t.begin(), t.end());
  return t[t.size() / 2];
}

// ---------------------------------------------------------------------------
// Stages. Each returns its artifact paths relative to the output directory.

inline std::vector<std::string> run_dataset(const Workspace& ws) {
  const auto mesh = config::build_mesh(ws.cfg);
  const auto g = geometry::build_graph(mesh);
  const auto spec = config::bank_spec(ws.cfg, g);
  const auto bank = epsim::make_subject_bank(g, mesh.name.empty() ? ws.cfg.mesh.kind : mesh.name, spec, ws.cfg.workers);
  io::write_mesh(ws.dir("dataset") / "mesh.mesh", mesh);
  epsim::save_bank(ws.dir("dataset"), bank, {{"origins", spec.origins}});
  ws.log << "  dataset: " << bank.subjects.size() << " subjects, " << bank.record_count() << " records, "
         << spec.sensors.size() << " sensors" << std::endl;
  return {"dataset/mesh.mesh", "dataset/manifest.json"};
}

inline std::vector<std::string> run_train(const Workspace& ws) {
  train_model(ws, training::Mode::Meta, ws.dir("train"), "model");
  return {"train/model.ckpt", "train/loss_log.csv"};
}

inline std::vector<std::string> run_eval(const Workspace& ws) {
  const auto bank = ws.bank();
  const auto ck = training::load_checkpoint(ws.dir("train") / "model.ckpt");
  const auto ctx = ws.contexts(bank, ws.cfg.eval.nu);
  const fs::path dir = ws.dir("eval");
  const auto out = eval::evaluate("metaPNS", personalize::meta(ck.model), bank, ctx, ws.cfg.eval.keep_predictions);
  write_rows(dir, "metrics", out.rows);
  io::write_text_atomic(dir / "contexts.json", contexts_json(ctx).dump(2));
  for (const auto& [subject, preds] : out.predictions)
    for (const auto& [id, x] : preds) io::write_array(dir / "predictions" / cat(subject, "_", id, ".arr"), x);

  // Surrogate versus simulator on the same mesh and horizon.
  const auto mesh = ws.mesh();
  const auto g = geometry::build_graph(mesh);
  const auto& subj = bank.subjects.front();
  const auto& rec = subj.records.front();
  const int T = static_cast<int>(rec.x.rows());
  const double sim_s = median_seconds(5, [&] { epsim::simulate(g, subj.tissue, rec.stimulus, bank.params); });
  const RowVec c = metainfer::posterior(ck.model, {&subj.observations.front()}).mu;
  const auto enc = surrogate::StimulusEncoding::from(rec.stimulus, ck.model.nodes());
  const double roll_s = median_seconds(5, [&] { metainfer::rollout_value(ck.model, enc, c, T); });
  std::vector<const epsim::Observation*> cobs;
  for (int id : ctx.at(subj.key)) cobs.push_back(&subj.observations[static_cast<std::size_t>(id)]);
  const double embed_s = median_seconds(5, [&] { metainfer::posterior(ck.model, cobs); });
  const json speed = {{"nodes", g.node_count},
                      {"frames", T},
                      {"simulator_steps", bank.params.frames() * bank.params.record_every},
                      {"simulate_seconds", sim_s},
                      {"rollout_seconds", roll_s},
                      {"speedup", sim_s / roll_s},
                      {"context_embedding_seconds", embed_s},
                      {"context_size", cobs.size()}};
  io::write_text_atomic(dir / "speed.json", speed.dump(2));
  const auto& t = eval::find_row(out.rows, "target");
  ws.log << "  eval: target CC " << t.cc.mean << " DC " << t.dc.mean << ", speedup " << sim_s / roll_s << "x" << std::endl;
  return {"eval/metrics.csv", "eval/dc_tissue.csv", "eval/contexts.json", "eval/speed.json"};
}

inline std::vector<std::string> run_sweep(const Workspace& ws) {
  const auto bank = ws.bank();
  const auto ck = training::load_checkpoint(ws.dir("train") / "model.ckpt");
  auto sizes = ws.cfg.eval.sweep;
  std::sort(sizes.rbegin(), sizes.rend());
  require(!sizes.empty(), "sweep: no sizes configured");
  const auto ctx = ws.contexts(bank, sizes.front());
  const auto rows = eval::context_sweep("metaPNS", personalize::meta(ck.model), bank, ctx, sizes);
  io::write_text_atomic(ws.dir("sweep") / "sweep.csv", eval::to_csv(rows));
  for (const auto& r : rows)
    if (r.subject == "all") ws.log << "  sweep: nu " << r.nu << " target CC " << r.cc.mean << std::endl;
  return {"sweep/sweep.csv"};
}

inline std::vector<std::string> run_baselines(const Workspace& ws) {
  const fs::path dir = ws.dir("baselines");
  const auto bank = ws.bank();
  const auto ctx = ws.contexts(bank, ws.cfg.eval.nu);
  const auto& b = ws.cfg.baselines;
  std::vector<eval::MetricsRow> rows;
  std::vector<std::string> artifacts;
  if (b.pns) {
    const auto ck = train_model(ws, training::Mode::Pns, dir, "pns");
    const auto out = eval::evaluate("PNS", personalize::pns(ck.model), bank, ctx);
    rows.insert(rows.end(), out.rows.begin(), out.rows.end());
    artifacts.insert(artifacts.end(), {"baselines/pns.ckpt", "baselines/pns_loss_log.csv"});
  }
  if (b.bo) {
    const auto mesh = ws.mesh();
    const auto g = geometry::build_graph(mesh);
    const baselines::SimulatorHandle sim(g, bank.params);
    const auto part = baselines::segment_partition(g, b.bo_segments, config::stage_seed(ws.cfg, "segments"));
    baselines::BoSettings s;
    s.budget = b.bo_budget;
    s.initial = b.bo_initial;
    s.seed = config::stage_seed(ws.cfg, "bo");
    s.workers = ws.cfg.workers;
    epsim::SubjectBank sub = bank;
    if (!b.bo_subjects.empty()) {
      sub.subjects.clear();
      for (const auto& k : b.bo_subjects)
        for (const auto& s2 : bank.subjects)
          if (s2.key == k) sub.subjects.push_back(s2);
    }
    json fits = json::object();
    fits["segments"] = part.segment;
    fits["note"] = "segments are k-means clusters of node coordinates, not anatomical";
    const auto out = eval::evaluate(
        "FS-BO", baselines::fs_bo(sim, part, baselines::uniform_bounds(b.bo_segments, b.bo_lo, b.bo_hi), s,
                                  [&](const std::string& key, const baselines::BoResult& r) {
                                    fits["subjects"][key] = {{"theta", std::vector<double>(r.theta.data(), r.theta.data() + r.theta.size())},
                                                             {"objective", r.objective},
                                                             {"simulator_calls", r.state.calls}};
                                    ws.log << "  fs-bo " << key << ": objective " << r.objective << " after "
                                           << r.state.calls << " simulator calls" << std::endl;
                                  }),
        sub, ctx);
    rows.insert(rows.end(), out.rows.begin(), out.rows.end());
    io::write_text_atomic(dir / "bo_fits.json", fits.dump(2));
    artifacts.push_back("baselines/bo_fits.json");
  }
  write_rows(dir, "metrics", rows);
  artifacts.insert(artifacts.end(), {"baselines/metrics.csv", "baselines/dc_tissue.csv"});
  return artifacts;
}

inline std::vector<std::string> run_plots(const Workspace& ws) {
  const fs::path dir = ws.dir("report");
  const auto mesh = ws.mesh();
  const auto g = geometry::build_graph(mesh);
  const auto bank = ws.bank();
  std::vector<std::string> artifacts;
  const fs::path pred_dir = ws.dir("eval") / "predictions";
  if (!fs::exists(pred_dir)) throw Error(ErrorKind::MissingArtifact, "plots: eval stage kept no prediction arrays");
  for (const auto& s : bank.subjects) {
    // The lowest-numbered target record with a stored prediction.
    int pick = -1;
    for (std::size_t r = 0; r < s.records.size() && pick < 0; ++r)
      if (fs::exists(pred_dir / cat(s.key, "_", r, ".arr"))) pick = static_cast<int>(r);
    if (pick < 0) throw Error(ErrorKind::MissingArtifact, cat("plots: no prediction array for subject '", s.key, "'"));
    report::Panel p{cat(s.key, ", record ", pick, ", metaPNS"), s.records[static_cast<std::size_t>(pick)].x,
                    io::read_array(pred_dir / cat(s.key, "_", pick, ".arr")), g.node_coords};
    io::write_text_atomic(dir / cat("panel_", s.key, ".svg"), report::render_panel(p));
    artifacts.push_back(cat("report/panel_", s.key, ".svg"));
  }
  auto sweep = eval::parse_metrics_csv(io::read_text(ws.dir("sweep") / "sweep.csv"));
  io::write_text_atomic(dir / "sweep.svg", report::render_sweep(sweep));
  auto rows = eval::parse_metrics_csv(io::read_text(ws.dir("eval") / "metrics.csv"));
  const fs::path base = ws.dir("baselines") / "metrics.csv";
  if (fs::exists(base)) {
    const auto more = eval::parse_metrics_csv(io::read_text(base));
    rows.insert(rows.end(), more.begin(), more.end());
  }
  std::ostringstream md;
  md << "# Results\n\n## Context and target sets\n\n" << report::summary_table(rows) << "\n## Context-size sweep (target set)\n\n"
     << report::summary_table(sweep);
  const fs::path speed = ws.dir("eval") / "speed.json";
  if (fs::exists(speed)) {
    const auto j = json::parse(io::read_text(speed));
    md << "\n## Timing\n\nsimulate " << j.at("simulate_seconds").get<double>() << " s, rollout "
       << j.at("rollout_seconds").get<double>() << " s, speedup " << j.at("speedup").get<double>()
       << "x, context embedding " << j.at("context_embedding_seconds").get<double>() << " s\n";
  }
  if (fs::exists(base)) md << "\nFS-BO segments are coordinate clusters, not anatomical segments.\n";
  io::write_text_atomic(dir / "summary.md", md.str());
  artifacts.insert(artifacts.end(), {"report/sweep.svg", "report/summary.md"});
  return artifacts;
}

// ---------------------------------------------------------------------------

inline std::vector<std::string> parse_stages(const std::string& list) {
  std::vector<std::string> out;
  if (list.empty() || list == "none") return out;
  if (list == "all") return all_stages();
  std::stringstream ss(list);
  for (std::string s; std::getline(ss, s, ',');) {
    if (std::find(all_stages().begin(), all_stages().end(), s) == all_stages().end())
      throw Error(ErrorKind::Config, cat("unknown stage '", s, "'"));
    out.push_back(s);
  }
  return out;
}

inline void write_manifest(const fs::path& out, const RunManifest& m) {
  io::write_text_atomic(out / "manifest.json", to_json(m).dump(2));
}

/// Runs the requested stages in canonical order, skipping completed ones.
inline RunManifest run_pipeline(const ExperimentConfig& cfg, const std::vector<std::string>& stages,
                                std::ostream& log = std::cerr) {
  const fs::path out = cfg.out;
  fs::create_directories(out);
  const json id = identity(cfg);
  const fs::path cfg_path = out / "config.json";
  if (fs::exists(cfg_path)) {
    const json prev = json::parse(io::read_text(cfg_path));
    if (identity(config::from_json(prev)) != id)
      throw Error(ErrorKind::Config, cat("stale artifact: ", out.string(), " was produced by a different configuration; use a new --out"));
  } else {
    io::write_text_atomic(cfg_path, config::to_json(cfg).dump(2));
  }

  RunManifest m;
  m.config_hash = config::hash_of(id);
  m.seed = cfg.seed;
  for (const char* s : {"hierarchy", "dataset", "model", "train", "pns-model", "pns-train", "contexts", "segments", "bo"})
    m.seeds[s] = hex64(config::stage_seed(cfg, s));
  if (fs::exists(out / "manifest.json")) {
    // Keep earlier stage records so a partial run does not forget them.
    const auto prev = json::parse(io::read_text(out / "manifest.json"));
    for (const auto& s : prev.at("stages"))
      m.stages.push_back({s.at("name"), s.at("status"), s.at("hash"), s.at("seconds"), s.at("artifacts")});
  }
  auto upsert = [&](StageRecord r) {
    for (auto& s : m.stages)
      if (s.name == r.name) {
        s = std::move(r);
        return;
      }
    m.stages.push_back(std::move(r));
  };

  const Workspace ws{cfg, out, log};
  for (const std::string& stage : all_stages()) {
    if (std::find(stages.begin(), stages.end(), stage) == stages.end()) continue;
    const std::string h = stage_hash(cfg, stage);
    if (const auto st = read_stamp(out, stage)) {
      if (st->at("hash") != h) throw Error(ErrorKind::Config, cat("stale artifact: stage '", stage, "' in ", out.string(), " has hash ", st->at("hash").get<std::string>(), ", config gives ", h));
      log << "[" << stage << "] up to date, skipped" << std::endl;
      upsert({stage, "skipped", h, st->at("seconds"), st->at("artifacts")});
      write_manifest(out, m);
      continue;
    }
    for (const auto& up : upstream_of(stage)) {
      const auto st = read_stamp(out, up);
      if (!st) throw Error(ErrorKind::MissingArtifact, cat("stage '", stage, "' needs the output of stage '", up, "' in ", out.string()));
      if (st->at("hash") != stage_hash(cfg, up)) throw Error(ErrorKind::Config, cat("stale artifact: upstream stage '", up, "' was built from a different configuration"));
    }
    log << "[" << stage << "] running" << std::endl;
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::string> artifacts;
    if (stage == "dataset") artifacts = run_dataset(ws);
    else if (stage == "train") artifacts = run_train(ws);
    else if (stage == "eval") artifacts = run_eval(ws);
    else if (stage == "sweep") artifacts = run_sweep(ws);
    else if (stage == "baselines") artifacts = run_baselines(ws);
    else artifacts = run_plots(ws);
    const double secs = eval::seconds_since(t0);
    io::write_text_atomic(stamp_path(out, stage), json{{"stage", stage}, {"hash", h}, {"seconds", secs}, {"artifacts", artifacts}}.dump(2));
    upsert({stage, "ran", h, secs, artifacts});
    write_manifest(out, m);
    log << "[" << stage << "] done in " << secs << " s" << std::endl;
  }
  write_manifest(out, m);
  return m;
}

}  // namespace metapns::pipeline
