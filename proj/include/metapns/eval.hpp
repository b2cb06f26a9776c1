#pragma once

// Prediction metrics, abnormal-region masks and the evaluation harness shared
// by the neural models and the simulator-based baseline.

#include "metapns/epsim.hpp"

#include <array>
#include <chrono>
#include <functional>
#include <iomanip>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

namespace metapns::eval {

inline void check_same_shape(const Mat& a, const Mat& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    fail(cat(what, ": shape mismatch ", a.rows(), "x", a.cols(), " vs ", b.rows(), "x", b.cols()));
}

inline double mse(const Mat& pred, const Mat& truth) {
  check_same_shape(pred, truth, "mse");
  require(truth.size() > 0, "mse: empty input");
  return (pred - truth).squaredNorm() / static_cast<double>(truth.size());
}

/// Pearson correlation across nodes per frame, averaged over frames whose
/// truth is not constant. A constant predicted frame scores 0.
inline double cc(const Mat& pred, const Mat& truth) {
  check_same_shape(pred, truth, "cc");
  double acc = 0.0;
  int used = 0;
  for (Index t = 0; t < truth.rows(); ++t) {
    const RowVec a = truth.row(t).array() - truth.row(t).mean();
    const double na = a.norm();
    if (na <= 1e-12 * std::max(1.0, truth.row(t).cwiseAbs().maxCoeff())) continue;
    const RowVec b = pred.row(t).array() - pred.row(t).mean();
    const double nb = b.norm();
    ++used;
    if (nb <= 1e-12 * std::max(1.0, pred.row(t).cwiseAbs().maxCoeff())) continue;
    acc += std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
  }
  if (used == 0) fail("undefined correlation");
  return acc / used;
}

/// Histogram Otsu threshold: 256 bins over [min, max], class statistics from
/// bin centres, split after bin t maximizing the between-class variance (the
/// lowest t wins ties). Returns the split value min + (t+1) * width and the
/// split bin so callers can classify by bin index.
struct OtsuResult {
  double threshold = 0.0;
  int split_bin = 0;
  double lo = 0.0;
  double width = 0.0;

  int bin_of(double v) const { return std::clamp(static_cast<int>((v - lo) / width), 0, 255); }
  bool above(double v) const { return bin_of(v) > split_bin; }
};

inline OtsuResult otsu(const Eigen::Ref<const Vec>& values) {
  constexpr int kBins = 256;
  require(values.size() >= 2, "otsu_threshold: need at least 2 values");
  const double lo = values.minCoeff(), hi = values.maxCoeff();
  if (!(hi > lo)) fail("otsu_threshold: constant input");
  OtsuResult r;
  r.lo = lo;
  r.width = (hi - lo) / kBins;
  std::array<double, kBins> count{};
  for (Index i = 0; i < values.size(); ++i) count[static_cast<std::size_t>(r.bin_of(values[i]))] += 1.0;
  const double n = static_cast<double>(values.size());
  double total_mass = 0.0;
  for (int b = 0; b < kBins; ++b) total_mass += count[static_cast<std::size_t>(b)] * (lo + (b + 0.5) * r.width);
  double w0 = 0.0, m0 = 0.0, best = -1.0;
  for (int t = 0; t < kBins - 1; ++t) {
    w0 += count[static_cast<std::size_t>(t)];
    m0 += count[static_cast<std::size_t>(t)] * (lo + (t + 0.5) * r.width);
    const double w1 = n - w0;
    if (w0 == 0.0 || w1 == 0.0) continue;
    const double mu0 = m0 / w0, mu1 = (total_mass - m0) / w1;
    const double between = (w0 / n) * (w1 / n) * (mu0 - mu1) * (mu0 - mu1);
    if (between > best * (1.0 + 1e-12)) {
      best = between;
      r.split_bin = t;
    }
  }
  r.threshold = lo + (r.split_bin + 1) * r.width;
  return r;
}

inline double otsu_threshold(const Eigen::Ref<const Vec>& values) { return otsu(values).threshold; }

struct AbnormalMask {
  std::vector<bool> mask;
  double threshold = 0.0;  // on the min-max normalized deficit; NaN when no split was made
  std::string provenance;

  std::size_t count() const { return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true)); }
};

/// Below this deficit spread (fraction of the signal range) the tissue counts
/// as uniformly healthy and no split is made.
inline constexpr double kMinDeficitContrast = 0.1;

/// How far each node's peak falls short of the best-depolarized node, as a
/// fraction of the record's overall signal range.
inline Vec depolarization_deficit(const Mat& x) {
  require(x.size() > 0, "depolarization_deficit: empty record");
  const double lo = x.minCoeff(), hi = x.maxCoeff();
  if (!(hi > lo)) fail("abnormal_mask: constant signal");
  const Vec peak = x.colwise().maxCoeff().transpose();
  return (peak.maxCoeff() - peak.array()) / (hi - lo);
}

/// Weak or absent depolarization marks abnormal tissue: Otsu on the
/// normalized deficit.
inline AbnormalMask abnormal_mask(const Mat& x, std::string provenance = "truth") {
  const Vec deficit = depolarization_deficit(x);
  const std::size_t n = static_cast<std::size_t>(x.cols());
  const double hi = deficit.maxCoeff();
  if (hi < kMinDeficitContrast) return {std::vector<bool>(n, false), std::nan(""), std::move(provenance)};
  const Vec feat = deficit / hi;
  const OtsuResult o = otsu(feat);
  AbnormalMask m{std::vector<bool>(n), o.threshold, std::move(provenance)};
  for (Index i = 0; i < feat.size(); ++i) m.mask[static_cast<std::size_t>(i)] = o.above(feat[i]);
  return m;
}

inline double dice(const std::vector<bool>& a, const std::vector<bool>& b) {
  require(a.size() == b.size(), cat("dice: length mismatch ", a.size(), " vs ", b.size()));
  std::size_t inter = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    na += a[i];
    nb += b[i];
    inter += a[i] && b[i];
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

inline double dice(const AbnormalMask& a, const AbnormalMask& b) { return dice(a.mask, b.mask); }

/// Mask of a prediction; a flat prediction has no abnormal nodes.
inline AbnormalMask predicted_mask(const Mat& x) {
  if (!(x.maxCoeff() > x.minCoeff())) return {std::vector<bool>(static_cast<std::size_t>(x.cols()), false), std::nan(""), "prediction"};
  return abnormal_mask(x, "prediction");
}

// ---------------------------------------------------------------------------
// Harness.

/// A predictor personalized to one subject's context set.
struct Personalized {
  std::function<Mat(std::size_t record_id)> generate;
  double embed_seconds = 0.0;
};

/// Builds a personalized predictor from a subject and its context record ids.
using Personalizer = std::function<Personalized(const epsim::Subject&, const std::vector<int>& context)>;

struct Stat {
  double mean = 0.0;
  double std = 0.0;

  static Stat of(const std::vector<double>& v) {
    Stat s;
    if (v.empty()) return {std::nan(""), std::nan("")};
    for (double x : v) s.mean += x;
    s.mean /= static_cast<double>(v.size());
    if (v.size() > 1) {
      for (double x : v) s.std += (x - s.mean) * (x - s.mean);
      s.std = std::sqrt(s.std / static_cast<double>(v.size() - 1));
    }
    return s;
  }
};

struct MetricsRow {
  std::string model;
  std::string split;  // context | target
  std::string subject;
  int nu = 0;
  Stat mse, cc, dc, dc_tissue;
  std::size_t n = 0;
  double embed_seconds = 0.0;
  double rollout_seconds = 0.0;
};

struct SampleScore {
  double mse = 0.0, cc = 0.0, dc = 0.0, dc_tissue = 0.0;
  bool has_cc = false, has_dc = false;
};

inline SampleScore score(const Mat& pred, const Mat& truth, const std::vector<bool>& scar) {
  SampleScore s;
  s.mse = mse(pred, truth);
  try {
    s.cc = cc(pred, truth);
    s.has_cc = true;
  } catch (const Error&) {
  }
  const AbnormalMask pm = predicted_mask(pred);
  s.dc_tissue = dice(pm.mask, scar);
  try {
    s.dc = dice(pm, abnormal_mask(truth));
    s.has_dc = true;
  } catch (const Error&) {
  }
  return s;
}

struct SplitAccumulator {
  std::vector<double> mse, cc, dc, dc_tissue;
  double rollout_seconds = 0.0;

  void add(const SampleScore& s, double seconds) {
    mse.push_back(s.mse);
    if (s.has_cc) cc.push_back(s.cc);
    if (s.has_dc) dc.push_back(s.dc);
    dc_tissue.push_back(s.dc_tissue);
    rollout_seconds += seconds;
  }
  void merge(const SplitAccumulator& o) {
    mse.insert(mse.end(), o.mse.begin(), o.mse.end());
    cc.insert(cc.end(), o.cc.begin(), o.cc.end());
    dc.insert(dc.end(), o.dc.begin(), o.dc.end());
    dc_tissue.insert(dc_tissue.end(), o.dc_tissue.begin(), o.dc_tissue.end());
    rollout_seconds += o.rollout_seconds;
  }
  MetricsRow row(const std::string& model, const std::string& split, const std::string& subject, int nu,
                 double embed_seconds) const {
    MetricsRow r{model, split, subject, nu, Stat::of(mse), Stat::of(cc), Stat::of(dc), Stat::of(dc_tissue),
                 mse.size(), embed_seconds, mse.empty() ? 0.0 : rollout_seconds / static_cast<double>(mse.size())};
    return r;
  }
};

/// Context record ids per subject, keyed by subject key.
using ContextSets = std::map<std::string, std::vector<int>>;

struct EvalOutput {
  std::vector<MetricsRow> rows;
  // Per subject and record: the prediction, for reports.
  std::map<std::string, std::map<int, Mat>> predictions;
};

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// Generates every context and target record of each subject from its
/// stimulus and scores it. Targets are the records outside the context set,
/// or `targets` when given (same for every subject).
inline EvalOutput evaluate(const std::string& model, const Personalizer& personalize, const epsim::SubjectBank& bank,
                           const ContextSets& contexts, bool keep_predictions = false,
                           const ContextSets* targets = nullptr) {
  require(!bank.subjects.empty(), "evaluate: bank has no subjects");
  EvalOutput out;
  SplitAccumulator all_ctx, all_tgt;
  double embed_total = 0.0;
  int nu_all = -1;
  for (const auto& s : bank.subjects) {
    auto it = contexts.find(s.key);
    if (it == contexts.end()) fail(cat("evaluate: no context set for subject '", s.key, "'"));
    const std::vector<int>& ctx = it->second;
    if (ctx.empty()) fail("context required");
    const std::set<int> in_ctx(ctx.begin(), ctx.end());
    require(in_ctx.size() == ctx.size(), "evaluate: duplicate context id");
    for (int id : ctx)
      require(id >= 0 && id < static_cast<int>(s.records.size()), cat("evaluate: context id ", id, " out of range"));
    std::vector<int> tgt;
    if (targets != nullptr) tgt = targets->at(s.key);
    else
      for (int id = 0; id < static_cast<int>(s.records.size()); ++id)
        if (!in_ctx.contains(id)) tgt.push_back(id);
    for (int id : tgt) require(!in_ctx.contains(id), "evaluate: target overlaps context");

    const auto t0 = std::chrono::steady_clock::now();
    Personalized p = personalize(s, ctx);
    if (p.embed_seconds == 0.0) p.embed_seconds = seconds_since(t0);
    embed_total += p.embed_seconds;
    const int nu = static_cast<int>(ctx.size());
    nu_all = nu_all == -1 || nu_all == nu ? nu : 0;

    auto run = [&](const std::vector<int>& ids, SplitAccumulator& acc) {
      for (int id : ids) {
        const auto t1 = std::chrono::steady_clock::now();
        Mat pred = p.generate(static_cast<std::size_t>(id));
        const double dt = seconds_since(t1);
        const auto& rec = s.records[static_cast<std::size_t>(id)];
        acc.add(score(pred, rec.x, s.tissue.scar_mask), dt);
        if (keep_predictions) out.predictions[s.key][id] = std::move(pred);
      }
    };
    SplitAccumulator c, t;
    run(ctx, c);
    run(tgt, t);
    out.rows.push_back(c.row(model, "context", s.key, nu, p.embed_seconds));
    if (!tgt.empty()) out.rows.push_back(t.row(model, "target", s.key, nu, p.embed_seconds));
    all_ctx.merge(c);
    all_tgt.merge(t);
  }
  const double embed_mean = embed_total / static_cast<double>(bank.subjects.size());
  out.rows.push_back(all_ctx.row(model, "context", "all", nu_all, embed_mean));
  if (!all_tgt.mse.empty()) out.rows.push_back(all_tgt.row(model, "target", "all", nu_all, embed_mean));
  return out;
}

/// Fixed targets (records outside the largest context), nested contexts made of
/// the first nu ids of each subject's list, nu = sizes.
inline std::vector<MetricsRow> context_sweep(const std::string& model, const Personalizer& personalize,
                                             const epsim::SubjectBank& bank, const ContextSets& full_contexts,
                                             const std::vector<int>& sizes) {
  ContextSets targets;
  for (const auto& s : bank.subjects) {
    const auto& ctx = full_contexts.at(s.key);
    const std::set<int> in(ctx.begin(), ctx.end());
    for (int id = 0; id < static_cast<int>(s.records.size()); ++id)
      if (!in.contains(id)) targets[s.key].push_back(id);
  }
  std::vector<MetricsRow> rows;
  for (int nu : sizes) {
    ContextSets sub;
    for (const auto& [key, ctx] : full_contexts) {
      require(nu >= 1 && nu <= static_cast<int>(ctx.size()), cat("context_sweep: size ", nu, " exceeds context"));
      sub[key].assign(ctx.begin(), ctx.begin() + nu);
    }
    for (auto& r : evaluate(model, personalize, bank, sub, false, &targets).rows)
      if (r.split == "target") rows.push_back(std::move(r));
  }
  return rows;
}

/// Deterministic context sets: `nu` ids per subject drawn from `seed`.
inline ContextSets draw_contexts(const epsim::SubjectBank& bank, int nu, std::uint64_t seed) {
  ContextSets out;
  for (const auto& s : bank.subjects) {
    const int n = static_cast<int>(s.records.size());
    require(nu >= 1 && nu < n, cat("draw_contexts: need 1 <= nu < ", n));
    std::vector<int> ids(static_cast<std::size_t>(n));
    std::iota(ids.begin(), ids.end(), 0);
    Rng rng(derive_seed(seed, s.key));
    for (int i = 0; i < nu; ++i) {
      std::uniform_int_distribution<int> pick(i, n - 1);
      std::swap(ids[static_cast<std::size_t>(i)], ids[static_cast<std::size_t>(pick(rng))]);
    }
    out[s.key].assign(ids.begin(), ids.begin() + nu);
  }
  return out;
}

inline std::string metrics_header() {
  return "model,split,subject,nu,mse_mean,mse_std,cc_mean,cc_std,dc_mean,dc_std,n,embed_seconds,rollout_seconds\n";
}

inline std::string to_csv(const std::vector<MetricsRow>& rows) {
  std::ostringstream os;
  os << metrics_header() << std::setprecision(10);
  for (const auto& r : rows)
    os << r.model << ',' << r.split << ',' << r.subject << ',' << r.nu << ',' << r.mse.mean << ',' << r.mse.std << ','
       << r.cc.mean << ',' << r.cc.std << ',' << r.dc.mean << ',' << r.dc.std << ',' << r.n << ',' << r.embed_seconds
       << ',' << r.rollout_seconds << '\n';
  return os.str();
}

/// Dice against the tissue scar mask, kept apart from metrics.csv.
inline std::string dc_tissue_csv(const std::vector<MetricsRow>& rows) {
  std::ostringstream os;
  os << "model,split,subject,nu,dc_tissue_mean,dc_tissue_std,n\n" << std::setprecision(10);
  for (const auto& r : rows)
    os << r.model << ',' << r.split << ',' << r.subject << ',' << r.nu << ',' << r.dc_tissue.mean << ','
       << r.dc_tissue.std << ',' << r.n << '\n';
  return os.str();
}

/// Reads rows written by to_csv; dc_tissue is left empty.
inline std::vector<MetricsRow> parse_metrics_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line + "\n" != metrics_header()) fail("metrics csv: unexpected header");
  std::vector<MetricsRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
    if (f.size() != 13) fail(cat("metrics csv: expected 13 fields, got ", f.size(), " in '", line, "'"));
    MetricsRow r;
    r.model = f[0];
    r.split = f[1];
    r.subject = f[2];
    r.nu = std::stoi(f[3]);
    r.mse = {std::stod(f[4]), std::stod(f[5])};
    r.cc = {std::stod(f[6]), std::stod(f[7])};
    r.dc = {std::stod(f[8]), std::stod(f[9])};
    r.n = static_cast<std::size_t>(std::stoull(f[10]));
    r.embed_seconds = std::stod(f[11]);
    r.rollout_seconds = std::stod(f[12]);
    rows.push_back(std::move(r));
  }
  return rows;
}

inline const MetricsRow& find_row(const std::vector<MetricsRow>& rows, const std::string& split,
                                  const std::string& subject = "all", const std::string& model = "") {
  for (const auto& r : rows)
    if (r.split == split && r.subject == subject && (model.empty() || r.model == model)) return r;
  fail(cat("no metrics row for model '", model, "' split ", split, " subject ", subject));
}

}  // namespace metapns::eval
