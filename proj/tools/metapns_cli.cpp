// metapns command line. Run `metapns --help` or `metapns <command> --help`.

#include "metapns/pipeline.hpp"

#include <CLI11.hpp>

#include <iostream>

using namespace metapns;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<int> workers;
};

config::ExperimentConfig resolve(const Globals& g) {
  auto c = g.config.empty() ? config::desk_defaults() : config::load(g.config);
  if (g.seed) c.seed = *g.seed;
  if (!g.out.empty()) c.out = g.out;
  if (g.workers) c.workers = *g.workers;
  config::validate(c);
  return c;
}

// Outputs are never replaced silently.
void refuse_existing(const fs::path& p) {
  if (fs::exists(p) && !(fs::is_directory(p) && fs::is_empty(p)))
    throw Error(ErrorKind::Config, cat("output ", p.string(), " already exists; choose a new path"));
}

fs::path need_out(const Globals& g) {
  if (g.out.empty()) throw Error(ErrorKind::Config, "--out is required");
  return g.out;
}

void need(const fs::path& p) {
  if (!fs::exists(p)) throw Error(ErrorKind::MissingArtifact, cat("missing ", p.string()));
}

std::vector<int> parse_ints(const std::string& s) {
  std::vector<int> v;
  std::stringstream ss(s);
  for (std::string tok; std::getline(ss, tok, ',');) {
    try {
      std::size_t used = 0;
      v.push_back(std::stoi(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw Error(ErrorKind::Config, cat("not an integer list: '", s, "'"));
    }
  }
  return v;
}

epsim::ScarSpec parse_scar(const std::string& s) {
  epsim::ScarSpec sc;
  char c1 = 0, c2 = 0;
  std::istringstream is(s);
  if (!(is >> sc.center >> c1 >> sc.radius >> c2 >> sc.excitability) || c1 != ':' || c2 != ':')
    throw Error(ErrorKind::Config, cat("scar must be center:radius:excitability, got '", s, "'"));
  return sc;
}

struct DataDir {
  geometry::MeshGeometry mesh;
  geometry::GraphLevel graph;
  epsim::SubjectBank bank;

  explicit DataDir(const fs::path& dir) {
    need(dir / "mesh.mesh");
    mesh = io::read_mesh(dir / "mesh.mesh");
    graph = geometry::build_graph(mesh);
    bank = epsim::load_bank(dir);
  }

  const epsim::Subject& subject(const std::string& key) const {
    for (const auto& s : bank.subjects)
      if (s.key == key) return s;
    throw Error(ErrorKind::Config, cat("no subject '", key, "' in the dataset"));
  }
};

eval::ContextSets load_contexts(const std::string& spec, const epsim::SubjectBank& bank, std::uint64_t seed) {
  if (fs::exists(spec)) {
    eval::ContextSets c;
    for (const auto& [k, v] : json::parse(io::read_text(spec)).items()) c[k] = v.get<std::vector<int>>();
    return c;
  }
  int nu = 0;
  try {
    nu = std::stoi(spec);
  } catch (const std::exception&) {
    throw Error(ErrorKind::Config, cat("--contexts must be a context size or a JSON file, got '", spec, "'"));
  }
  return eval::draw_contexts(bank, nu, seed);
}

void write_metrics(const fs::path& dir, const std::vector<eval::MetricsRow>& rows) {
  io::write_text_atomic(dir / "metrics.csv", eval::to_csv(rows));
  io::write_text_atomic(dir / "dc_tissue.csv", eval::dc_tissue_csv(rows));
  for (const auto& r : rows)
    if (r.subject == "all")
      std::cout << r.model << ' ' << r.split << " nu=" << r.nu << ": CC " << r.cc.mean << " DC " << r.dc.mean << " MSE "
                << r.mse.mean << '\n';
}

// Training shared by `train` and `baseline pns-train`.
void train_cmd(const Globals& g, const std::string& data, const std::string& resume, training::Mode mode) {
  auto cfg = resolve(g);
  const fs::path out = need_out(g);
  const DataDir d(data);
  const std::string stem = mode == training::Mode::Meta ? "model" : "pns";
  training::Checkpoint ck;
  if (resume.empty()) {
    refuse_existing(out);
    auto mcfg = config::model_config(cfg, mode == training::Mode::Meta ? "model" : "pns-model");
    mcfg.meta.frames = d.bank.params.frames();
    ck.model = metainfer::make_model(mcfg, config::build_hierarchy(cfg, d.mesh));
    ck.train = config::train_config(cfg, mode);
    ck.state = training::TrainState::fresh(ck.train);
  } else {
    ck = training::load_checkpoint(resume);
    // A resumed run continues the stored schedule; only the episode count may grow.
    ck.train.episodes = std::max(ck.train.episodes, cfg.train.episodes);
  }
  if (ck.model.nodes() != d.graph.node_count)
    throw Error(ErrorKind::Config, cat("model has ", ck.model.nodes(), " nodes, dataset mesh has ", d.graph.node_count));
  fs::create_directories(out / "checkpoints");
  const fs::path log_path = out / (stem == "model" ? "loss_log.csv" : "pns_loss_log.csv");
  std::string kept = training::loss_log_header();
  if (!resume.empty() && fs::exists(log_path)) {
    // Keep the rows before the resume point.
    std::istringstream is(io::read_text(log_path));
    std::string line;
    std::getline(is, line);
    while (std::getline(is, line))
      if (!line.empty() && std::stoi(line) < ck.state.episode) kept += line + '\n';
  }
  training::TrainHooks hooks;
  hooks.on_episode = [&](const training::LossLogRow& r) {
    std::cerr << "episode " << r.episode << " loss " << r.loss.total << " lr " << r.lr << '\n';
  };
  hooks.on_checkpoint = [&](const training::Checkpoint& c) {
    training::save_checkpoint(out / "checkpoints" / cat(stem, "_ep", c.state.episode, ".ckpt"), c);
  };
  const auto rows = training::train(d.bank, ck.model, ck.train, ck.state, cfg.workers, hooks);
  for (const auto& r : rows) kept += training::to_csv(r);
  io::write_text_atomic(log_path, kept);
  training::save_checkpoint(out / (stem + ".ckpt"), ck);
  std::cout << "wrote " << (out / (stem + ".ckpt")).string() << '\n';
}

void eval_cmd(const Globals& g, const std::string& ckpt, const std::string& data, const std::string& contexts,
              const std::string& model_name, bool pns, const std::vector<int>& sweep) {
  const auto cfg = resolve(g);
  const fs::path out = need_out(g);
  refuse_existing(out);
  const auto ck = training::load_checkpoint(ckpt);
  const DataDir d(data);
  const auto personalizer = pns ? personalize::pns(ck.model) : personalize::meta(ck.model);
  if (sweep.empty()) {
    const auto ctx = load_contexts(contexts, d.bank, config::stage_seed(cfg, "contexts"));
    const auto res = eval::evaluate(model_name, personalizer, d.bank, ctx, true);
    fs::create_directories(out);
    write_metrics(out, res.rows);
    json cj = json::object();
    for (const auto& [k, v] : ctx) cj[k] = v;
    io::write_text_atomic(out / "contexts.json", cj.dump(2));
    for (const auto& [subject, preds] : res.predictions)
      for (const auto& [id, x] : preds) io::write_array(out / "predictions" / cat(subject, "_", id, ".arr"), x);
  } else {
    auto sizes = sweep;
    std::sort(sizes.rbegin(), sizes.rend());
    const auto ctx = eval::draw_contexts(d.bank, sizes.front(), config::stage_seed(cfg, "contexts"));
    const auto rows = eval::context_sweep(model_name, personalizer, d.bank, ctx, sizes);
    fs::create_directories(out);
    io::write_text_atomic(out / "sweep.csv", eval::to_csv(rows));
    for (const auto& r : rows)
      if (r.subject == "all") std::cout << "nu=" << r.nu << " target CC " << r.cc.mean << '\n';
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"metaPNS: few-shot personalized cardiac simulation surrogates"};
  app.set_version_flag("--version", std::string(METAPNS_VERSION));
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "experiment config (JSON)");
  app.add_option("--seed", g.seed, "root seed");
  app.add_option("--out", g.out, "output path");
  app.add_option("--workers", g.workers, "worker threads")->check(CLI::PositiveNumber);

  std::function<void()> action;
  auto bind = [&](CLI::App* sub, std::function<void()> f) { sub->callback([&action, f] { action = f; }); };

  // mesh
  auto* mesh = app.add_subcommand("mesh", "mesh files and graph hierarchies");
  mesh->require_subcommand(1);
  std::string mesh_file;
  int levels = 4, nx = 14, ny = 14, subdiv = 2;
  double ratio = 0.5, spacing = 1.0, radius = 10.0;
  auto* mesh_info = mesh->add_subcommand("info", "print mesh statistics");
  mesh_info->add_option("file", mesh_file)->required();
  bind(mesh_info, [&] {
    const auto m = io::read_mesh(mesh_file);
    const auto gl = geometry::build_graph(m);
    std::cout << "name " << m.name << "\nvertices " << m.vertices.rows() << "\nfaces " << m.faces.rows() << "\nedges "
              << gl.edges.size() << "\nmax degree " << epsim::max_degree(gl) << "\nbounding box "
              << m.vertices.colwise().minCoeff() << " .. " << m.vertices.colwise().maxCoeff() << '\n';
  });
  auto* mesh_hier = mesh->add_subcommand("hierarchy", "coarsen a mesh and write the hierarchy as JSON");
  mesh_hier->add_option("file", mesh_file)->required();
  mesh_hier->add_option("--levels", levels)->check(CLI::PositiveNumber);
  mesh_hier->add_option("--ratio", ratio)->check(CLI::Range(0.01, 0.99));
  bind(mesh_hier, [&] {
    const fs::path out = need_out(g);
    refuse_existing(out);
    const std::uint64_t seed = derive_seed(g.seed.value_or(1), "hierarchy");
    const auto h = geometry::build_hierarchy(io::read_mesh(mesh_file), levels, ratio, seed);
    json j = {{"levels", json::array()}, {"assign", h.assign}};
    for (const auto& lv : h.levels) {
      json edges = json::array();
      for (const auto& e : lv.edges) edges.push_back({e.first, e.second});
      j["levels"].push_back({{"nodes", lv.node_count}, {"edges", edges}});
      std::cout << "level " << j["levels"].size() - 1 << ": " << lv.node_count << " nodes, " << lv.edges.size() << " edges\n";
    }
    io::write_text_atomic(out, j.dump());
  });
  auto* mesh_grid = mesh->add_subcommand("grid", "write a triangulated flat sheet");
  mesh_grid->add_option("--nx", nx);
  mesh_grid->add_option("--ny", ny);
  mesh_grid->add_option("--spacing", spacing);
  bind(mesh_grid, [&] {
    const fs::path out = need_out(g);
    refuse_existing(out);
    io::write_mesh(out, geometry::grid_sheet(nx, ny, spacing, cat("grid", nx, "x", ny)));
  });
  auto* mesh_ico = mesh->add_subcommand("icosphere", "write a subdivided icosahedron surface");
  mesh_ico->add_option("--subdivisions", subdiv);
  mesh_ico->add_option("--radius", radius);
  bind(mesh_ico, [&] {
    const fs::path out = need_out(g);
    refuse_existing(out);
    io::write_mesh(out, geometry::icosphere(subdiv, radius));
  });

  // sim
  auto* sim = app.add_subcommand("sim", "Aliev-Panfilov simulation and datasets");
  sim->require_subcommand(1);
  std::string origins = "0";
  std::vector<std::string> scars;
  std::string data_dir;
  auto* sim_run = sim->add_subcommand("run", "simulate one record and write its T x N array");
  sim_run->add_option("--mesh", mesh_file, "mesh file (default: the config mesh)");
  sim_run->add_option("--origins", origins, "comma-separated stimulated nodes");
  sim_run->add_option("--scar", scars, "center:radius:excitability, repeatable");
  bind(sim_run, [&] {
    const auto cfg = resolve(g);
    const fs::path out = need_out(g);
    refuse_existing(out);
    const auto m = mesh_file.empty() ? config::build_mesh(cfg) : io::read_mesh(mesh_file);
    const auto gl = geometry::build_graph(m);
    epsim::ScarConfig sc{"cli", {}};
    for (const auto& s : scars) sc.scars.push_back(parse_scar(s));
    const auto tissue = epsim::make_tissue(gl, sc, cfg.simulator.a_healthy);
    const epsim::Stimulus stim{parse_ints(origins), 0.0, cfg.dataset.stim_duration, cfg.dataset.stim_amplitude};
    const auto t0 = std::chrono::steady_clock::now();
    const auto rec = epsim::simulate(gl, tissue, stim, cfg.simulator);
    std::cout << rec.x.rows() << " frames x " << rec.x.cols() << " nodes in " << eval::seconds_since(t0) << " s\n";
    io::write_array(out, rec.x);
  });
  auto* sim_dataset = sim->add_subcommand("dataset", "generate the subject bank of a config");
  bind(sim_dataset, [&] {
    const auto cfg = resolve(g);
    const fs::path out = need_out(g);
    refuse_existing(out);
    const auto m = config::build_mesh(cfg);
    const auto gl = geometry::build_graph(m);
    const auto spec = config::bank_spec(cfg, gl);
    const auto bank = epsim::make_subject_bank(gl, m.name, spec, cfg.workers);
    io::write_mesh(out / "mesh.mesh", m);
    epsim::save_bank(out, bank, {{"origins", spec.origins}, {"config", config::to_json(cfg)}});
    std::cout << bank.subjects.size() << " subjects, " << bank.record_count() << " records\n";
  });
  auto* sim_inspect = sim->add_subcommand("inspect", "summarize a dataset directory");
  sim_inspect->add_option("dir", data_dir)->required();
  bind(sim_inspect, [&] {
    const DataDir d(data_dir);
    const auto& p = d.bank.params;
    std::cout << "mesh " << d.bank.mesh_id << " (" << d.graph.node_count << " nodes)\n"
              << "dt " << p.dt << ", " << p.frames() << " frames every " << p.frame_dt() << "\n"
              << d.bank.sensor_nodes.size() << " sensors, noise std " << d.bank.noise_std << '\n';
    for (const auto& s : d.bank.subjects) {
      int scar = 0;
      for (bool b : s.tissue.scar_mask) scar += b;
      double lo = std::numeric_limits<double>::infinity(), hi = -lo;
      for (const auto& r : s.records) {
        lo = std::min(lo, r.x.minCoeff());
        hi = std::max(hi, r.x.maxCoeff());
      }
      std::cout << "  " << s.key << ": " << s.records.size() << " records, " << scar << " scar nodes, x in [" << lo
                << ", " << hi << "]\n";
    }
  });

  // train
  std::string resume;
  auto* train = app.add_subcommand("train", "meta-train the model");
  train->add_option("--data", data_dir)->required();
  train->add_option("--resume", resume, "checkpoint to continue from");
  bind(train, [&] { train_cmd(g, data_dir, resume, training::Mode::Meta); });

  // model
  auto* model = app.add_subcommand("model", "use a trained model");
  model->require_subcommand(1);
  std::string ckpt, subject, context_ids, stim_spec;
  int T = 0, samples = 1;
  auto* rollout = model->add_subcommand("rollout", "generate potentials for a stimulus given context observations");
  rollout->add_option("--ckpt", ckpt)->required();
  rollout->add_option("--data", data_dir, "dataset holding the context observations")->required();
  rollout->add_option("--subject", subject)->required();
  rollout->add_option("--context", context_ids, "comma-separated record ids")->required();
  rollout->add_option("--stim", stim_spec, "comma-separated origin nodes")->required();
  rollout->add_option("-T", T, "frames (default: model frames)");
  rollout->add_option("--samples", samples)->check(CLI::PositiveNumber);
  bind(rollout, [&] {
    const fs::path out = need_out(g);
    refuse_existing(out);
    const auto ck = training::load_checkpoint(ckpt);
    const DataDir d(data_dir);
    const auto& s = d.subject(subject);
    std::vector<const epsim::Observation*> ctx;
    for (int id : parse_ints(context_ids)) {
      if (id < 0 || static_cast<std::size_t>(id) >= s.observations.size())
        throw Error(ErrorKind::Config, cat("context id ", id, " out of range"));
      ctx.push_back(&s.observations[static_cast<std::size_t>(id)]);
    }
    const epsim::Stimulus stim{parse_ints(stim_spec), 0.0, 1.0, 1.0};
    const auto pred = metainfer::predict(ck.model, stim, ctx, samples, T > 0 ? T : ck.model.frames(),
                                         derive_seed(g.seed.value_or(1), "rollout"));
    io::write_array(out, pred.mean);
    if (samples > 1) {
      Mat var = Mat::Zero(pred.mean.rows(), pred.mean.cols());
      for (const auto& x : pred.samples) var += (x - pred.mean).cwiseAbs2();
      io::write_array(out.string() + ".std", (var / (samples - 1)).cwiseSqrt());
    }
    std::cout << "wrote " << out.string() << '\n';
  });

  // eval
  auto* ev = app.add_subcommand("eval", "score a model on context and target sets");
  ev->require_subcommand(1);
  std::string contexts = "5";
  std::string sizes = "5,4,3,2,1";
  auto* ev_run = ev->add_subcommand("run", "metrics.csv for one context size");
  ev_run->add_option("--ckpt", ckpt)->required();
  ev_run->add_option("--data", data_dir)->required();
  ev_run->add_option("--contexts", contexts, "context size, or JSON file subject -> record ids");
  bind(ev_run, [&] { eval_cmd(g, ckpt, data_dir, contexts, "metaPNS", false, {}); });
  auto* ev_sweep = ev->add_subcommand("sweep", "target metrics against context size");
  ev_sweep->add_option("--ckpt", ckpt)->required();
  ev_sweep->add_option("--data", data_dir)->required();
  ev_sweep->add_option("--sizes", sizes);
  bind(ev_sweep, [&] { eval_cmd(g, ckpt, data_dir, "", "metaPNS", false, parse_ints(sizes)); });

  // baseline
  auto* base = app.add_subcommand("baseline", "PNS and FS-BO baselines");
  base->require_subcommand(1);
  int budget = 100, segments = 7;
  auto* bo = base->add_subcommand("bo", "fit segment excitabilities of one subject by Bayesian optimization");
  bo->add_option("--data", data_dir)->required();
  bo->add_option("--subject", subject)->required();
  bo->add_option("--context", context_ids, "comma-separated record ids")->required();
  bo->add_option("--budget", budget, "simulator calls")->check(CLI::PositiveNumber);
  bo->add_option("--segments", segments)->check(CLI::PositiveNumber);
  bind(bo, [&] {
    const auto cfg = resolve(g);
    const fs::path out = need_out(g);
    refuse_existing(out);
    const DataDir d(data_dir);
    const auto& s = d.subject(subject);
    const baselines::SimulatorHandle simh(d.graph, d.bank.params);
    const auto part = baselines::segment_partition(d.graph, segments, config::stage_seed(cfg, "segments"));
    std::vector<const epsim::Observation*> obs;
    std::vector<epsim::Stimulus> stims;
    for (int id : parse_ints(context_ids)) {
      obs.push_back(&s.observations.at(static_cast<std::size_t>(id)));
      stims.push_back(s.records.at(static_cast<std::size_t>(id)).stimulus);
    }
    baselines::BoSettings bs;
    bs.budget = budget;
    bs.initial = cfg.baselines.bo_initial;
    bs.seed = derive_seed(config::stage_seed(cfg, "bo"), s.key);
    bs.workers = cfg.workers;
    const auto r = baselines::bo_fit(simh, part, obs, stims,
                                     baselines::uniform_bounds(segments, cfg.baselines.bo_lo, cfg.baselines.bo_hi), bs);
    const auto truth = baselines::segment_tissue(r.theta, part, d.bank.params.a_healthy);
    int agree = 0;
    for (std::size_t i = 0; i < truth.scar_mask.size(); ++i) agree += truth.scar_mask[i] == s.tissue.scar_mask[i];
    fs::create_directories(out);
    const json j = {{"subject", s.key},
                    {"theta", std::vector<double>(r.theta.data(), r.theta.data() + r.theta.size())},
                    {"objective", r.objective},
                    {"simulator_calls", r.state.calls},
                    {"segments", part.segment},
                    {"scar_mask_agreement", static_cast<double>(agree) / static_cast<double>(truth.scar_mask.size())}};
    io::write_text_atomic(out / "bo_fit.json", j.dump(2));
    std::cout << "objective " << r.objective << " after " << r.state.calls << " simulator calls\n";
  });
  auto* pns_train = base->add_subcommand("pns-train", "train the PNS baseline (one observation per embedding)");
  pns_train->add_option("--data", data_dir)->required();
  pns_train->add_option("--resume", resume);
  bind(pns_train, [&] { train_cmd(g, data_dir, resume, training::Mode::Pns); });
  auto* pns_eval = base->add_subcommand("pns-eval", "score a PNS checkpoint");
  pns_eval->add_option("--ckpt", ckpt)->required();
  pns_eval->add_option("--data", data_dir)->required();
  pns_eval->add_option("--contexts", contexts);
  bind(pns_eval, [&] { eval_cmd(g, ckpt, data_dir, contexts, "PNS", true, {}); });

  // pipeline and report
  std::string stages = "all";
  auto* pipe = app.add_subcommand("pipeline", "run experiment stages into --out, skipping finished ones");
  pipe->add_option("--stages", stages, "comma-separated subset of dataset,train,eval,sweep,baselines,plots, or all");
  bind(pipe, [&] {
    const auto cfg = resolve(g);
    const auto m = pipeline::run_pipeline(cfg, pipeline::parse_stages(stages));
    for (const auto& s : m.stages) std::cout << s.name << ": " << s.status << " (" << s.seconds << " s)\n";
  });
  std::string run_dir;
  auto* rep = app.add_subcommand("report", "render figures and tables of a pipeline run");
  rep->add_option("run", run_dir, "pipeline output directory")->required();
  bind(rep, [&] {
    need(fs::path(run_dir) / "config.json");
    auto cfg = config::load(fs::path(run_dir) / "config.json");
    cfg.out = run_dir;
    pipeline::run_pipeline(cfg, {"plots"});
    std::cout << "report in " << (fs::path(run_dir) / "report").string() << '\n';
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : exit_code(ErrorKind::Config);
  }
  try {
    if (action) action();
    return 0;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
