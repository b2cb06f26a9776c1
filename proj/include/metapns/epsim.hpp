#pragma once

// Ground-truth physics: Aliev-Panfilov excitation on a graph, the sparse
// measurement operator, and multi-subject dataset generation.

#include "metapns/common.hpp"
#include "metapns/geometry.hpp"
#include "metapns/io.hpp"
#include "metapns/parallel.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <limits>
#include <queue>
#include <set>
#include <vector>

namespace metapns::epsim {

using geometry::GraphLevel;

struct ApParams {
  double k = 8.0;
  double a_healthy = 0.15;
  double eps0 = 0.002;
  double mu1 = 0.2;
  double mu2 = 0.3;
  double diffusion = 0.5;
  double dt = 0.1;
  int steps = 200;
  int record_every = 4;
  double stability_limit = 0.5;  // bound on dt * D * max_degree

  int frames() const { return steps / record_every; }
  double frame_dt() const { return dt * record_every; }
};

struct TissueField {
  Vec excitability;
  std::vector<bool> scar_mask;
};

struct Stimulus {
  std::vector<int> origins;
  double onset = 0.0;
  double duration = 1.0;
  double amplitude = 1.0;
};

struct SimulationRecord {
  Mat x;  // T x N
  double dt = 0.0;        // integration step
  double frame_dt = 0.0;  // time between stored frames
  Stimulus stimulus;
  std::string tissue_id;
  std::string mesh_id;
};

struct Observation {
  Mat y;  // T x M
  std::vector<int> sensor_nodes;
  double noise_std = 0.0;
};

/// Geodesic ball of elevated excitability.
struct ScarSpec {
  int center = 0;
  double radius = 0.0;  // mm, measured along mesh edges
  double excitability = 0.5;
};

struct ScarConfig {
  std::string name;
  std::vector<ScarSpec> scars;  // empty = healthy
};

// ---------------------------------------------------------------------------

inline void validate(const TissueField& t, double healthy) {
  require(static_cast<std::size_t>(t.excitability.size()) == t.scar_mask.size(), "tissue: mask length mismatch");
  for (Index i = 0; i < t.excitability.size(); ++i) {
    const double a = t.excitability[i];
    if (!(a > 0.0 && a < 1.0)) fail(cat("tissue: excitability ", a, " at node ", i, " outside (0,1)"));
    if (t.scar_mask[static_cast<std::size_t>(i)] != (a > healthy))
      fail(cat("tissue: scar mask inconsistent at node ", i));
  }
}

inline TissueField uniform_tissue(Index n, double a) {
  TissueField t;
  t.excitability = Vec::Constant(n, a);
  t.scar_mask.assign(static_cast<std::size_t>(n), false);
  return t;
}

/// Shortest-path distances along edges with Euclidean edge lengths.
inline std::vector<double> geodesic_distance(const GraphLevel& g, int source) {
  std::vector<std::vector<std::pair<int, double>>> adj(static_cast<std::size_t>(g.node_count));
  for (const auto& [i, j] : g.edges) {
    const double w = (g.node_coords.row(i) - g.node_coords.row(j)).norm();
    adj[static_cast<std::size_t>(i)].emplace_back(j, w);
    adj[static_cast<std::size_t>(j)].emplace_back(i, w);
  }
  std::vector<double> dist(static_cast<std::size_t>(g.node_count), std::numeric_limits<double>::infinity());
  using Item = std::pair<double, int>;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
  dist[static_cast<std::size_t>(source)] = 0.0;
  pq.emplace(0.0, source);
  while (!pq.empty()) {
    auto [d, u] = pq.top();
    pq.pop();
    if (d > dist[static_cast<std::size_t>(u)]) continue;
    for (auto [v, w] : adj[static_cast<std::size_t>(u)]) {
      if (d + w < dist[static_cast<std::size_t>(v)]) {
        dist[static_cast<std::size_t>(v)] = d + w;
        pq.emplace(d + w, v);
      }
    }
  }
  return dist;
}

inline TissueField make_tissue(const GraphLevel& g, const ScarConfig& cfg, double healthy) {
  TissueField t = uniform_tissue(g.node_count, healthy);
  for (const ScarSpec& s : cfg.scars) {
    require(s.center >= 0 && s.center < g.node_count, cat("scar center ", s.center, " out of range"));
    require(s.excitability > healthy && s.excitability < 1.0, "scar excitability must be in (healthy, 1)");
    const auto dist = geodesic_distance(g, s.center);
    for (Index i = 0; i < g.node_count; ++i)
      if (dist[static_cast<std::size_t>(i)] <= s.radius + 1e-9)
        t.excitability[i] = std::max(t.excitability[i], s.excitability);
  }
  for (Index i = 0; i < g.node_count; ++i) t.scar_mask[static_cast<std::size_t>(i)] = t.excitability[i] > healthy;
  return t;
}

/// (L u)_i = sum over neighbours j of (u_j - u_i), uniform edge weights.
inline SpMat graph_laplacian(const GraphLevel& g) {
  std::vector<Eigen::Triplet<double>> trip;
  Vec deg = Vec::Zero(g.node_count);
  for (const auto& [i, j] : g.edges) {
    trip.emplace_back(i, j, 1.0);
    trip.emplace_back(j, i, 1.0);
    deg[i] += 1.0;
    deg[j] += 1.0;
  }
  for (Index i = 0; i < g.node_count; ++i) trip.emplace_back(i, i, -deg[i]);
  SpMat L(g.node_count, g.node_count);
  L.setFromTriplets(trip.begin(), trip.end());
  return L;
}

inline int max_degree(const GraphLevel& g) {
  std::vector<int> deg(static_cast<std::size_t>(g.node_count), 0);
  for (const auto& [i, j] : g.edges) {
    ++deg[static_cast<std::size_t>(i)];
    ++deg[static_cast<std::size_t>(j)];
  }
  return deg.empty() ? 0 : *std::max_element(deg.begin(), deg.end());
}

struct ApDerivative {
  Vec du;
  Vec dv;
};

/// du/dt = D L u + k u (1-u)(u-a) - u v + I_stim
/// dv/dt = (eps0 + mu1 v / (u + mu2)) (-v - k u (u - a - 1))
inline ApDerivative ap_rhs(const Vec& u, const Vec& v, const TissueField& tissue, const SpMat& laplacian,
                           const Vec& i_stim, const ApParams& p) {
  const Index n = u.size();
  if (v.size() != n || i_stim.size() != n || tissue.excitability.size() != n || laplacian.rows() != n)
    fail(cat("ap_rhs: shape mismatch (u ", n, ", v ", v.size(), ", stim ", i_stim.size(), ", tissue ",
             tissue.excitability.size(), ", L ", laplacian.rows(), ")"));
  const auto a = tissue.excitability.array();
  const auto ua = u.array();
  const auto va = v.array();
  ApDerivative d;
  d.du = p.diffusion * (laplacian * u);
  d.du.array() += p.k * ua * (1.0 - ua) * (ua - a) - ua * va + i_stim.array();
  d.dv = ((p.eps0 + p.mu1 * va / (ua + p.mu2)) * (-va - p.k * ua * (ua - a - 1.0))).matrix();
  return d;
}

inline void validate(const Stimulus& s, Index n) {
  require(!s.origins.empty(), "stimulus: empty origin set");
  require(s.onset >= 0.0, "stimulus: negative onset");
  require(s.duration > 0.0, "stimulus: duration must be positive");
  for (int o : s.origins) require(o >= 0 && o < n, cat("stimulus: origin ", o, " out of range"));
}

/// Forward-Euler integration; frame f holds u after (f+1)*record_every steps.
inline SimulationRecord simulate(const GraphLevel& g, const TissueField& tissue, const Stimulus& stim,
                                 const ApParams& p, const std::string& tissue_id = "", const std::string& mesh_id = "") {
  const Index n = g.node_count;
  validate(stim, n);
  require(p.steps >= 2 && p.record_every >= 1 && p.frames() >= 2, "simulate: need at least 2 stored frames");
  require(tissue.excitability.size() == n, "simulate: tissue size mismatch");
  const double stab = p.dt * p.diffusion * max_degree(g);
  if (stab > p.stability_limit)
    fail(cat("simulate: dt*D*max_degree = ", stab, " exceeds stability limit ", p.stability_limit));

  const SpMat L = graph_laplacian(g);
  Vec u = Vec::Zero(n), v = Vec::Zero(n);
  Vec stim_on = Vec::Zero(n);
  for (int o : stim.origins) stim_on[o] = stim.amplitude;
  const Vec stim_off = Vec::Zero(n);

  SimulationRecord rec;
  rec.x.resize(p.frames(), n);
  rec.dt = p.dt;
  rec.frame_dt = p.frame_dt();
  rec.stimulus = stim;
  rec.tissue_id = tissue_id;
  rec.mesh_id = mesh_id;
  const double eps = 1e-9 * p.dt;
  for (int s = 0; s < p.frames() * p.record_every; ++s) {
    const double t = s * p.dt;
    const bool active = t + eps >= stim.onset && t + eps < stim.onset + stim.duration;
    const ApDerivative d = ap_rhs(u, v, tissue, L, active ? stim_on : stim_off, p);
    u += p.dt * d.du;
    v += p.dt * d.dv;
    if (!u.allFinite() || u.cwiseAbs().maxCoeff() > 2.0) fail_numeric("integration unstable, reduce dt");
    if ((s + 1) % p.record_every == 0) {
      if (u.minCoeff() < -0.05 || u.maxCoeff() > 1.05)
        fail_numeric(cat("integration unstable, reduce dt (u left [-0.05, 1.05] at step ", s + 1, ")"));
      rec.x.row((s + 1) / p.record_every - 1) = u.transpose();
    }
  }
  return rec;
}

inline Observation observe(const SimulationRecord& rec, const std::vector<int>& sensors, double noise_std,
                           std::uint64_t seed) {
  const Index n = rec.x.cols();
  require(!sensors.empty(), "observe: no sensors");
  require(noise_std >= 0.0, "observe: negative noise");
  std::set<int> seen;
  for (int s : sensors) {
    require(s >= 0 && s < n, cat("observe: sensor ", s, " out of range"));
    if (!seen.insert(s).second) fail(cat("observe: duplicate sensor ", s));
  }
  Observation obs;
  obs.sensor_nodes = sensors;
  obs.noise_std = noise_std;
  obs.y.resize(rec.x.rows(), static_cast<Index>(sensors.size()));
  for (std::size_t m = 0; m < sensors.size(); ++m) obs.y.col(static_cast<Index>(m)) = rec.x.col(sensors[m]);
  if (noise_std > 0.0) {
    Rng rng(seed);
    std::normal_distribution<double> nd(0.0, noise_std);
    for (Index t = 0; t < obs.y.rows(); ++t)
      for (Index m = 0; m < obs.y.cols(); ++m) obs.y(t, m) += nd(rng);
  }
  return obs;
}

/// Every node is a sensor, no noise.
inline Observation full_observation(const SimulationRecord& rec) {
  Observation obs;
  obs.y = rec.x;
  obs.sensor_nodes.resize(static_cast<std::size_t>(rec.x.cols()));
  std::iota(obs.sensor_nodes.begin(), obs.sensor_nodes.end(), 0);
  return obs;
}

/// Greedy farthest-point selection by hop distance, starting from `start`.
inline std::vector<int> farthest_point_nodes(const GraphLevel& g, int count, int start = 0) {
  require(count >= 1 && count <= g.node_count, "farthest_point_nodes: bad count");
  std::vector<int> chosen{start};
  std::vector<int> best = geometry::hop_distance(g, {start});
  while (static_cast<int>(chosen.size()) < count) {
    int arg = -1;
    for (Index i = 0; i < g.node_count; ++i) {
      if (arg < 0 || best[static_cast<std::size_t>(i)] > best[static_cast<std::size_t>(arg)]) arg = static_cast<int>(i);
    }
    chosen.push_back(arg);
    const auto d = geometry::hop_distance(g, {arg});
    for (std::size_t i = 0; i < best.size(); ++i) best[i] = std::min(best[i], d[i]);
  }
  return chosen;
}

// ---------------------------------------------------------------------------

struct Subject {
  std::string key;
  TissueField tissue;
  std::vector<SimulationRecord> records;
  std::vector<Observation> observations;  // one per record, same order
};

struct SubjectBank {
  std::string mesh_id;
  ApParams params;
  std::vector<int> sensor_nodes;
  double noise_std = 0.0;
  std::vector<Subject> subjects;

  std::size_t record_count() const {
    std::size_t n = 0;
    for (const auto& s : subjects) n += s.records.size();
    return n;
  }
};

struct BankSpec {
  std::vector<ScarConfig> scar_configs;
  std::vector<int> origins;
  ApParams params;
  std::vector<int> sensors;
  double noise_std = 0.0;
  double stim_duration = 1.0;
  double stim_amplitude = 1.0;
  std::uint64_t seed = 0;
};

inline SubjectBank make_subject_bank(const GraphLevel& g, const std::string& mesh_id, const BankSpec& spec,
                                     int workers = 1) {
  require(!spec.scar_configs.empty(), "subject bank: need at least one scar config");
  require(spec.origins.size() >= 2, "subject bank: need at least two stimulation origins");
  SubjectBank bank;
  bank.mesh_id = mesh_id;
  bank.params = spec.params;
  bank.sensor_nodes = spec.sensors;
  bank.noise_std = spec.noise_std;
  const std::size_t n_origins = spec.origins.size();
  for (const ScarConfig& cfg : spec.scar_configs) {
    Subject s;
    s.key = cfg.name;
    s.tissue = make_tissue(g, cfg, spec.params.a_healthy);
    s.records.resize(n_origins);
    s.observations.resize(n_origins);
    bank.subjects.push_back(std::move(s));
  }
  const std::size_t total = bank.subjects.size() * n_origins;
  parallel_for(total, workers, [&](std::size_t idx) {
    const std::size_t k = idx / n_origins, o = idx % n_origins;
    Subject& s = bank.subjects[k];
    Stimulus stim{{spec.origins[o]}, 0.0, spec.stim_duration, spec.stim_amplitude};
    try {
      s.records[o] = simulate(g, s.tissue, stim, spec.params, s.key, mesh_id);
    } catch (const Error& e) {
      throw Error(e.kind(), cat("subject '", s.key, "' origin ", spec.origins[o], ": ", e.what()));
    }
    s.observations[o] = observe(s.records[o], spec.sensors, spec.noise_std, derive_seed(spec.seed, k, o));
  });
  return bank;
}

// ---------------------------------------------------------------------------
// Dataset container: <dir>/manifest.json plus float32 array files.

inline nlohmann::json to_json(const ApParams& p) {
  return {{"k", p.k},       {"a_healthy", p.a_healthy}, {"eps0", p.eps0},   {"mu1", p.mu1},
          {"mu2", p.mu2},   {"diffusion", p.diffusion}, {"dt", p.dt},       {"steps", p.steps},
          {"record_every", p.record_every}, {"stability_limit", p.stability_limit}};
}

inline ApParams ap_params_from_json(const nlohmann::json& j) {
  ApParams p;
  p.k = j.at("k");
  p.a_healthy = j.at("a_healthy");
  p.eps0 = j.at("eps0");
  p.mu1 = j.at("mu1");
  p.mu2 = j.at("mu2");
  p.diffusion = j.at("diffusion");
  p.dt = j.at("dt");
  p.steps = j.at("steps");
  p.record_every = j.at("record_every");
  p.stability_limit = j.at("stability_limit");
  return p;
}

inline nlohmann::json to_json(const Stimulus& s) {
  return {{"origins", s.origins}, {"onset", s.onset}, {"duration", s.duration}, {"amplitude", s.amplitude}};
}

inline Stimulus stimulus_from_json(const nlohmann::json& j) {
  Stimulus s;
  s.origins = j.at("origins").get<std::vector<int>>();
  s.onset = j.at("onset");
  s.duration = j.at("duration");
  s.amplitude = j.at("amplitude");
  return s;
}

inline void save_bank(const io::fs::path& dir, const SubjectBank& bank, const nlohmann::json& extra = {}) {
  namespace fs = io::fs;
  fs::create_directories(dir / "arrays");
  nlohmann::json subjects = nlohmann::json::array();
  for (std::size_t k = 0; k < bank.subjects.size(); ++k) {
    const Subject& s = bank.subjects[k];
    const std::string tfile = cat("arrays/tissue_", k, ".arr");
    Mat tissue(s.tissue.excitability.size(), 2);
    for (Index i = 0; i < tissue.rows(); ++i) {
      tissue(i, 0) = s.tissue.excitability[i];
      tissue(i, 1) = s.tissue.scar_mask[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
    }
    io::write_array(dir / tfile, tissue, io::DType::F64);
    nlohmann::json recs = nlohmann::json::array();
    for (std::size_t r = 0; r < s.records.size(); ++r) {
      const std::string xf = cat("arrays/x_", k, "_", r, ".arr");
      const std::string yf = cat("arrays/y_", k, "_", r, ".arr");
      io::write_array(dir / xf, s.records[r].x);
      io::write_array(dir / yf, s.observations[r].y);
      recs.push_back({{"id", r}, {"stimulus", to_json(s.records[r].stimulus)}, {"x", xf}, {"y", yf}});
    }
    subjects.push_back({{"key", s.key}, {"tissue", tfile}, {"records", recs}});
  }
  nlohmann::json m = {{"format", "metapns-dataset"},
                      {"version", 1},
                      {"mesh_id", bank.mesh_id},
                      {"dt", bank.params.dt},
                      {"frame_dt", bank.params.frame_dt()},
                      {"ap_params", to_json(bank.params)},
                      {"sensor_nodes", bank.sensor_nodes},
                      {"noise_std", bank.noise_std},
                      {"subjects", subjects}};
  for (auto it = extra.begin(); it != extra.end(); ++it) m[it.key()] = it.value();
  io::write_text_atomic(dir / "manifest.json", m.dump(2));
}

inline nlohmann::json read_manifest(const io::fs::path& dir) {
  const auto path = dir / "manifest.json";
  if (!io::fs::exists(path)) throw Error(ErrorKind::MissingArtifact, cat("dataset manifest missing: ", path.string()));
  auto m = nlohmann::json::parse(io::read_text(path));
  if (m.value("format", "") != "metapns-dataset") throw Error(ErrorKind::Io, cat(path.string(), ": not a dataset"));
  return m;
}

inline SubjectBank load_bank(const io::fs::path& dir) {
  const auto m = read_manifest(dir);
  SubjectBank bank;
  bank.mesh_id = m.at("mesh_id");
  bank.params = ap_params_from_json(m.at("ap_params"));
  bank.sensor_nodes = m.at("sensor_nodes").get<std::vector<int>>();
  bank.noise_std = m.at("noise_std");
  for (const auto& sj : m.at("subjects")) {
    Subject s;
    s.key = sj.at("key");
    const Mat tissue = io::read_array(dir / sj.at("tissue").get<std::string>());
    s.tissue.excitability = tissue.col(0);
    s.tissue.scar_mask.resize(static_cast<std::size_t>(tissue.rows()));
    for (Index i = 0; i < tissue.rows(); ++i) s.tissue.scar_mask[static_cast<std::size_t>(i)] = tissue(i, 1) > 0.5;
    for (const auto& rj : sj.at("records")) {
      SimulationRecord rec;
      rec.x = io::read_array(dir / rj.at("x").get<std::string>());
      rec.dt = bank.params.dt;
      rec.frame_dt = bank.params.frame_dt();
      rec.stimulus = stimulus_from_json(rj.at("stimulus"));
      rec.tissue_id = s.key;
      rec.mesh_id = bank.mesh_id;
      Observation obs;
      obs.y = io::read_array(dir / rj.at("y").get<std::string>());
      obs.sensor_nodes = bank.sensor_nodes;
      obs.noise_std = bank.noise_std;
      s.records.push_back(std::move(rec));
      s.observations.push_back(std::move(obs));
    }
    bank.subjects.push_back(std::move(s));
  }
  return bank;
}

/// First crossing time (frame index) of u > level per node; `frames` if never.
inline Vec activation_frames(const Mat& x, double level = 0.5) {
  Vec act = Vec::Constant(x.cols(), static_cast<double>(x.rows()));
  for (Index i = 0; i < x.cols(); ++i) {
    for (Index t = 0; t < x.rows(); ++t) {
      if (x(t, i) > level) {
        act[i] = static_cast<double>(t);
        break;
      }
    }
  }
  return act;
}

}  // namespace metapns::epsim
