#pragma once

// Episodic meta-training, the learning-rate schedule and checkpoints.
//
// Checkpoint file (".ckpt"):
//   8 bytes  magic "MPNSCKPT"
//   u32      format version (1)
//   u64      header length, then a JSON header (configs, episode, optimizer
//            step, serialized rng state, array index)
//   u32      array count, then per array:
//            u32 name length, name bytes, i64 rows, i64 cols, f64 row-major payload
// Parameters and optimizer moments are stored as float64 so a reload
// reproduces forward passes bit for bit.

#include "metapns/epsim.hpp"
#include "metapns/io.hpp"
#include "metapns/metainfer.hpp"
#include "metapns/parallel.hpp"

#include <functional>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace metapns::training {

using metainfer::Model;

enum class Mode { Meta, Pns };

struct TrainConfig {
  double lr0 = 1e-3;
  double decay = 0.5;
  int decay_every = 50;
  double lambda1 = 1e-4;
  double lambda2 = 0.1;
  int episodes = 200;
  int nu_max = 5;
  int origins_per_episode = 25;
  int samples_per_subject = 0;  // generation samples scored per subject and step; 0 = all of D_x
  int steps_per_episode = 1;    // optimizer steps per episode, each on a fresh minibatch of D_x
  int checkpoint_every = 0;     // 0 = only at the end
  std::uint64_t seed = 0;
  Mode mode = Mode::Meta;

  void validate() const {
    require(lr0 > 0 && decay > 0 && decay < 1 && decay_every > 0, "train: lr0 > 0, decay in (0,1), decay_every > 0");
    require(lambda1 >= 0 && lambda2 >= 0, "train: lambdas must be nonnegative");
    require(episodes >= 0 && nu_max >= 1 && origins_per_episode >= 2 && samples_per_subject >= 0 &&
                steps_per_episode >= 1 && checkpoint_every >= 0,
            "train: invalid episode counts");
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"lr0", c.lr0},
          {"decay", c.decay},
          {"decay_every", c.decay_every},
          {"lambda1", c.lambda1},
          {"lambda2", c.lambda2},
          {"episodes", c.episodes},
          {"nu_max", c.nu_max},
          {"origins_per_episode", c.origins_per_episode},
          {"samples_per_subject", c.samples_per_subject},
          {"steps_per_episode", c.steps_per_episode},
          {"checkpoint_every", c.checkpoint_every},
          {"seed", c.seed},
          {"mode", c.mode == Mode::Meta ? "meta" : "pns"}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.lr0 = j.at("lr0");
  c.decay = j.at("decay");
  c.decay_every = j.at("decay_every");
  c.lambda1 = j.at("lambda1");
  c.lambda2 = j.at("lambda2");
  c.episodes = j.at("episodes");
  c.nu_max = j.at("nu_max");
  c.origins_per_episode = j.at("origins_per_episode");
  c.samples_per_subject = j.at("samples_per_subject");
  c.steps_per_episode = j.at("steps_per_episode");
  c.checkpoint_every = j.at("checkpoint_every");
  c.seed = j.at("seed");
  const std::string mode = j.at("mode");
  if (mode != "meta" && mode != "pns") throw Error(ErrorKind::Config, cat("train.mode must be meta or pns, got ", mode));
  c.mode = mode == "meta" ? Mode::Meta : Mode::Pns;
  return c;
}

inline double lr_at(int episode, const TrainConfig& c) {
  require(episode >= 0, "lr_at: episode must be >= 0");
  return c.lr0 * std::pow(c.decay, episode / c.decay_every);
}

/// One subject's context/target split. Ids index the subject's records.
struct Episode {
  std::size_t subject = 0;
  std::string key;
  std::vector<int> context;
  std::vector<int> targets;

  std::vector<int> generation() const {
    std::vector<int> g = context;
    g.insert(g.end(), targets.begin(), targets.end());
    return g;
  }
};

inline Episode sample_episode(const epsim::SubjectBank& bank, std::size_t subject, const TrainConfig& c, Rng& rng) {
  require(subject < bank.subjects.size(), "sample_episode: subject index out of range");
  const auto& s = bank.subjects[subject];
  const int n = static_cast<int>(s.records.size());
  if (n < 2) fail(cat("sample_episode: subject '", s.key, "' has ", n, " records, need >= 2"));
  std::vector<int> ids(static_cast<std::size_t>(n));
  std::iota(ids.begin(), ids.end(), 0);
  const int take = std::min(c.origins_per_episode, n);
  // Partial Fisher-Yates: the first `take` entries are a uniform draw without replacement.
  for (int i = 0; i < take; ++i) {
    std::uniform_int_distribution<int> pick(i, n - 1);
    std::swap(ids[static_cast<std::size_t>(i)], ids[static_cast<std::size_t>(pick(rng))]);
  }
  std::uniform_int_distribution<int> nu_dist(1, std::min(c.nu_max, take - 1));
  const int nu = nu_dist(rng);
  Episode e;
  e.subject = subject;
  e.key = s.key;
  e.context.assign(ids.begin(), ids.begin() + nu);
  e.targets.assign(ids.begin() + nu, ids.begin() + take);
  return e;
}

/// Loss groups for one episode. Meta mode: one group sharing the context.
/// Pns mode: every generation sample is its own singleton context.
inline std::vector<metainfer::LossGroup> episode_groups(const epsim::Subject& s, const Episode& e,
                                                        const TrainConfig& c, double subject_weight, Rng& rng) {
  std::vector<int> gen = e.generation();
  if (c.samples_per_subject > 0 && c.samples_per_subject < static_cast<int>(gen.size())) {
    for (int i = 0; i < c.samples_per_subject; ++i) {
      std::uniform_int_distribution<int> pick(i, static_cast<int>(gen.size()) - 1);
      std::swap(gen[static_cast<std::size_t>(i)], gen[static_cast<std::size_t>(pick(rng))]);
    }
    gen.resize(static_cast<std::size_t>(c.samples_per_subject));
  }
  const double w = subject_weight / static_cast<double>(gen.size());
  std::vector<metainfer::LossGroup> out;
  if (c.mode == Mode::Meta) {
    metainfer::LossGroup g;
    for (int id : e.context) g.context.push_back(&s.observations[static_cast<std::size_t>(id)]);
    for (int id : gen) g.items.push_back(&s.records[static_cast<std::size_t>(id)]);
    g.item_weight = w;
    out.push_back(std::move(g));
  } else {
    for (int id : gen)
      out.push_back({{&s.observations[static_cast<std::size_t>(id)]}, {&s.records[static_cast<std::size_t>(id)]}, w});
  }
  return out;
}

struct LossLogRow {
  int episode = 0;
  metainfer::LossBreakdown loss;
  double lr = 0.0;
};

inline std::string loss_log_header() { return "episode,recon,kl_context_target,kl_prior,total,lr\n"; }

inline std::string to_csv(const LossLogRow& r) {
  std::ostringstream os;
  os << std::setprecision(17) << r.episode << ',' << r.loss.recon << ',' << r.loss.kl_context_target << ','
     << r.loss.kl_prior << ',' << r.loss.total << ',' << r.lr << '\n';
  return os.str();
}

/// Optimizer position. The rng drives episode sampling; it is serialized in
/// its standard text form.
struct TrainState {
  int episode = 0;
  nn::Adam adam;
  Rng rng;

  static TrainState fresh(const TrainConfig& c) {
    TrainState s;
    s.rng.seed(derive_seed(c.seed, "episodes"));
    return s;
  }
};

struct Checkpoint {
  Model model;
  TrainConfig train;
  TrainState state;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_array(std::ostream& os, const std::string& name, const Mat& m) {
  io::detail::put(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  io::detail::put(os, static_cast<std::int64_t>(m.rows()));
  io::detail::put(os, static_cast<std::int64_t>(m.cols()));
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) io::detail::put(os, m(i, j));
}

inline std::pair<std::string, Mat> get_array(std::istream& is, const std::filesystem::path& path) {
  const auto len = io::detail::get<std::uint32_t>(is, path);
  if (len > (1u << 16)) throw Error(ErrorKind::Io, cat(path.string(), ": corrupt array name"));
  std::string name(len, '\0');
  is.read(name.data(), len);
  const auto rows = io::detail::get<std::int64_t>(is, path);
  const auto cols = io::detail::get<std::int64_t>(is, path);
  if (rows < 0 || cols < 0 || rows * cols > (std::int64_t{1} << 32))
    throw Error(ErrorKind::Io, cat(path.string(), ": corrupt array shape for ", name));
  Mat m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = io::detail::get<double>(is, path);
  return {std::move(name), std::move(m)};
}

inline Mat edges_mat(const std::vector<geometry::Edge>& edges) {
  Mat m(static_cast<Index>(edges.size()), 2);
  for (std::size_t e = 0; e < edges.size(); ++e) {
    m(static_cast<Index>(e), 0) = edges[e].first;
    m(static_cast<Index>(e), 1) = edges[e].second;
  }
  return m;
}

inline Mat ints_mat(const std::vector<int>& v) {
  Mat m(static_cast<Index>(v.size()), 1);
  for (std::size_t i = 0; i < v.size(); ++i) m(static_cast<Index>(i), 0) = v[i];
  return m;
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  std::vector<std::pair<std::string, const Mat*>> arrays;
  for (const auto& [name, m] : ck.model.params.values) arrays.emplace_back("param/" + name, &m);
  for (const auto& [name, m] : ck.state.adam.m) arrays.emplace_back("adam_m/" + name, &m);
  for (const auto& [name, m] : ck.state.adam.v) arrays.emplace_back("adam_v/" + name, &m);
  std::vector<Mat> hier;
  const auto& h = ck.model.hierarchy;
  for (std::size_t l = 0; l < h.levels.size(); ++l) {
    hier.push_back(h.levels[l].node_coords);
    hier.push_back(detail::edges_mat(h.levels[l].edges));
  }
  for (const auto& a : h.assign) hier.push_back(detail::ints_mat(a));
  for (std::size_t l = 0; l < h.levels.size(); ++l) {
    arrays.emplace_back(cat("hier/coords/", l), &hier[2 * l]);
    arrays.emplace_back(cat("hier/edges/", l), &hier[2 * l + 1]);
  }
  for (std::size_t l = 0; l < h.assign.size(); ++l) arrays.emplace_back(cat("hier/assign/", l), &hier[2 * h.levels.size() + l]);

  std::ostringstream rng;
  rng << ck.state.rng;
  const nlohmann::json header = {{"format_version", kCheckpointVersion},
                                 {"model", metainfer::to_json(ck.model.config)},
                                 {"train", to_json(ck.train)},
                                 {"episode", ck.state.episode},
                                 {"adam_step", ck.state.adam.step},
                                 {"adam", {{"beta1", ck.state.adam.beta1}, {"beta2", ck.state.adam.beta2}, {"eps", ck.state.adam.eps}}},
                                 {"rng_state", rng.str()},
                                 {"levels", h.levels.size()},
                                 {"mesh", h.levels[0].node_count}};
  const std::string text = header.dump();
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    auto os = io::detail::open_out(tmp);
    os.write("MPNSCKPT", 8);
    io::detail::put(os, kCheckpointVersion);
    io::detail::put(os, static_cast<std::uint64_t>(text.size()));
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    io::detail::put(os, static_cast<std::uint32_t>(arrays.size()));
    for (const auto& [name, m] : arrays) detail::put_array(os, name, *m);
    if (!os) throw Error(ErrorKind::Io, cat("write failed: ", tmp.string()));
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  auto is = io::detail::open_in(path);
  io::detail::check_magic(is, "MPNSCKPT", path);
  const auto version = io::detail::get<std::uint32_t>(is, path);
  if (version != kCheckpointVersion)
    throw Error(ErrorKind::Io, cat(path.string(), ": checkpoint version ", version, ", expected ", kCheckpointVersion));
  const auto hlen = io::detail::get<std::uint64_t>(is, path);
  if (hlen > (1u << 24)) throw Error(ErrorKind::Io, cat(path.string(), ": corrupt header"));
  std::string text(hlen, '\0');
  is.read(text.data(), static_cast<std::streamsize>(hlen));
  const auto header = nlohmann::json::parse(text);
  std::map<std::string, Mat> arrays;
  const auto count = io::detail::get<std::uint32_t>(is, path);
  for (std::uint32_t i = 0; i < count; ++i) arrays.insert(detail::get_array(is, path));
  auto take = [&](const std::string& name) -> Mat& {
    auto it = arrays.find(name);
    if (it == arrays.end()) throw Error(ErrorKind::Io, cat(path.string(), ": missing array ", name));
    return it->second;
  };

  geometry::GraphHierarchy h;
  const std::size_t levels = header.at("levels");
  for (std::size_t l = 0; l < levels; ++l) {
    const Mat& e = take(cat("hier/edges/", l));
    std::vector<geometry::Edge> edges;
    for (Index k = 0; k < e.rows(); ++k) edges.emplace_back(static_cast<int>(e(k, 0)), static_cast<int>(e(k, 1)));
    h.levels.push_back(geometry::make_level(take(cat("hier/coords/", l)), std::move(edges)));
  }
  for (std::size_t l = 0; l + 1 < levels; ++l) {
    const Mat& a = take(cat("hier/assign/", l));
    std::vector<int> v(static_cast<std::size_t>(a.rows()));
    for (Index k = 0; k < a.rows(); ++k) v[static_cast<std::size_t>(k)] = static_cast<int>(a(k, 0));
    h.assign.push_back(std::move(v));
  }

  Checkpoint ck{metainfer::make_model(metainfer::model_config_from_json(header.at("model")), std::move(h)),
                train_config_from_json(header.at("train")), {}};
  for (auto& [name, m] : ck.model.params.values) {
    const Mat& stored = take("param/" + name);
    if (stored.rows() != m.rows() || stored.cols() != m.cols())
      throw Error(ErrorKind::Io, cat(path.string(), ": parameter ", name, " has the wrong shape"));
    m = stored;
  }
  for (auto& [name, m] : arrays) {
    if (name.rfind("adam_m/", 0) == 0) ck.state.adam.m.emplace(name.substr(7), m);
    if (name.rfind("adam_v/", 0) == 0) ck.state.adam.v.emplace(name.substr(7), m);
  }
  ck.state.episode = header.at("episode");
  ck.state.adam.step = header.at("adam_step");
  ck.state.adam.beta1 = header.at("adam").at("beta1");
  ck.state.adam.beta2 = header.at("adam").at("beta2");
  ck.state.adam.eps = header.at("adam").at("eps");
  std::istringstream rng(header.at("rng_state").get<std::string>());
  rng >> ck.state.rng;
  if (!rng) throw Error(ErrorKind::Io, cat(path.string(), ": bad rng state"));
  return ck;
}

struct TrainHooks {
  std::function<void(const LossLogRow&)> on_episode;
  std::function<void(const Checkpoint&)> on_checkpoint;
};

inline bool all_finite(const nn::ParamMap& g) {
  for (const auto& [_, m] : g)
    if (!m.allFinite()) return false;
  return true;
}

/// Runs episodes [state.episode, cfg.episodes). Each optimizer step uses the
/// mean of all subjects' episode losses. Subjects are evaluated in
/// parallel; their gradients are summed in subject order, so the result does
/// not depend on `workers`.
inline std::vector<LossLogRow> train(const epsim::SubjectBank& bank, Model& model, const TrainConfig& cfg,
                                     TrainState& state, int workers = 1, const TrainHooks& hooks = {}) {
  cfg.validate();
  require(!bank.subjects.empty(), "train: bank has no subjects");
  std::vector<LossLogRow> log;
  const metainfer::LossWeights w{cfg.lambda1, cfg.lambda2};
  const double subject_weight = 1.0 / static_cast<double>(bank.subjects.size());
  auto checkpoint = [&] {
    if (hooks.on_checkpoint) hooks.on_checkpoint({model, cfg, state});
  };
  while (state.episode < cfg.episodes) {
    const int ep = state.episode;
    std::vector<Episode> episodes;
    for (std::size_t k = 0; k < bank.subjects.size(); ++k) episodes.push_back(sample_episode(bank, k, cfg, state.rng));
    const double lr = lr_at(ep, cfg);
    metainfer::LossBreakdown sum;
    for (int step = 0; step < cfg.steps_per_episode; ++step) {
      std::vector<std::vector<metainfer::LossGroup>> groups;
      for (std::size_t k = 0; k < bank.subjects.size(); ++k)
        groups.push_back(episode_groups(bank.subjects[k], episodes[k], cfg, subject_weight, state.rng));
      std::vector<nn::ParamMap> grads(groups.size());
      std::vector<metainfer::LossBreakdown> parts(groups.size());
      const std::uint64_t eps_seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(ep), static_cast<std::uint64_t>(step));
      try {
        parallel_for(groups.size(), workers, [&](std::size_t k) {
          grads[k] = nn::zeros_like(model.params);
          parts[k] = metainfer::evaluate_loss(model, groups[k], w,
                                              metainfer::seeded_epsilon(derive_seed(eps_seed, k)), &grads[k]);
        });
      } catch (const Error& e) {
        throw Error(e.kind(), cat("train: episode ", ep, ": ", e.what()));
      }
      nn::ParamMap total = std::move(grads[0]);
      for (std::size_t k = 1; k < groups.size(); ++k) nn::add_into(total, grads[k]);
      for (const auto& part : parts) {
        sum.recon += part.recon / cfg.steps_per_episode;
        sum.kl_context_target += part.kl_context_target / cfg.steps_per_episode;
        sum.kl_prior += part.kl_prior / cfg.steps_per_episode;
        sum.total += part.total / cfg.steps_per_episode;
      }
      if (!all_finite(total)) fail_numeric(cat("train: non-finite gradient at episode ", ep));
      state.adam.apply(model.params, total, lr);
    }
    ++state.episode;
    LossLogRow row{ep, sum, lr};
    log.push_back(row);
    if (hooks.on_episode) hooks.on_episode(row);
    if (cfg.checkpoint_every > 0 && state.episode % cfg.checkpoint_every == 0 && state.episode < cfg.episodes)
      checkpoint();
  }
  checkpoint();
  return log;
}

}  // namespace metapns::training
