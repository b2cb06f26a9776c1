#pragma once

// Static reports: SVG potential-map panels (truth, prediction, difference at
// four frames), the context-size sweep chart and a markdown summary table.
// Output depends only on the inputs; numbers are printed at fixed precision.

#include "metapns/eval.hpp"
#include "metapns/io.hpp"

#include <array>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

namespace metapns::report {

/// Four evenly spaced frames, first and last included.
inline std::array<Index, 4> snapshot_frames(Index T) {
  require(T >= 1, "snapshot_frames: empty record");
  std::array<Index, 4> f{};
  for (int k = 0; k < 4; ++k) f[static_cast<std::size_t>(k)] = T == 1 ? 0 : std::lround(k * (T - 1) / 3.0);
  return f;
}

/// Node positions in the plane: x/y for flat meshes, longitude/latitude for
/// closed surfaces (z extent comparable to x/y).
inline Mat layout_2d(const Mat& coords) {
  const Eigen::RowVector3d lo = coords.colwise().minCoeff(), hi = coords.colwise().maxCoeff();
  const Eigen::RowVector3d ext = hi - lo;
  Mat p(coords.rows(), 2);
  if (ext[2] <= 1e-9 * std::max(ext[0], ext[1])) {
    p = coords.leftCols(2);
  } else {
    const Eigen::RowVector3d c = coords.colwise().mean();
    for (Index i = 0; i < coords.rows(); ++i) {
      const Eigen::RowVector3d d = coords.row(i) - c;
      p(i, 0) = std::atan2(d[1], d[0]);
      p(i, 1) = std::atan2(d[2], std::hypot(d[0], d[1]));
    }
  }
  return p;
}

/// Piecewise-linear blue-white-red colour for v in [lo, hi].
inline std::string colour(double v, double lo, double hi) {
  double t = hi > lo ? (v - lo) / (hi - lo) : 0.5;
  t = std::clamp(t, 0.0, 1.0);
  double r, g, b;
  if (t < 0.5) {
    const double s = t / 0.5;
    r = 0.23 + s * (1.0 - 0.23);
    g = 0.30 + s * (1.0 - 0.30);
    b = 0.75 + s * (1.0 - 0.75);
  } else {
    const double s = (t - 0.5) / 0.5;
    r = 1.0 - s * (1.0 - 0.71);
    g = 1.0 - s * (1.0 - 0.02);
    b = 1.0 - s * (1.0 - 0.15);
  }
  std::ostringstream os;
  os << '#' << std::hex << std::setfill('0');
  for (double ch : {r, g, b}) os << std::setw(2) << static_cast<int>(std::lround(ch * 255.0));
  return os.str();
}

struct Panel {
  std::string title;
  Mat truth, prediction;  // T x N
  Mat coords;             // N x 3
};

inline Mat difference(const Panel& p) {
  eval::check_same_shape(p.prediction, p.truth, "report panel");
  return p.prediction - p.truth;
}

namespace detail {
inline std::string num(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << v;
  return os.str();
}
}  // namespace detail

/// Rows truth / prediction / difference, columns the snapshot frames.
inline std::string render_panel(const Panel& p) {
  const Mat diff = difference(p);
  require(p.coords.rows() == p.truth.cols(), "render_panel: coordinates do not match the record");
  const Mat xy = layout_2d(p.coords);
  const Eigen::RowVector2d lo = xy.colwise().minCoeff(), hi = xy.colwise().maxCoeff();
  const double cell = 160.0, pad = 10.0, label = 90.0, top = 40.0;
  const double span = std::max({hi[0] - lo[0], hi[1] - lo[1], 1e-12});
  const double radius = std::max(1.5, 0.5 * (cell - 2 * pad) / std::sqrt(static_cast<double>(xy.rows())));
  const auto frames = snapshot_frames(p.truth.rows());
  const double vlo = std::min(p.truth.minCoeff(), p.prediction.minCoeff());
  const double vhi = std::max(p.truth.maxCoeff(), p.prediction.maxCoeff());
  const double dmax = std::max(diff.cwiseAbs().maxCoeff(), 1e-12);

  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  const double W = label + 4 * cell, H = top + 3 * cell + 20;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << pad << "\" y=\"20\" font-size=\"14\">" << p.title << "</text>\n";
  const char* rows[3] = {"truth", "prediction", "difference"};
  for (int r = 0; r < 3; ++r) {
    os << "<text x=\"" << pad << "\" y=\"" << top + r * cell + cell / 2 << "\">" << rows[r] << "</text>\n";
    for (int k = 0; k < 4; ++k) {
      const Index t = frames[static_cast<std::size_t>(k)];
      const double ox = label + k * cell + pad, oy = top + r * cell + pad;
      if (r == 0) os << "<text x=\"" << ox << "\" y=\"" << top - 5 << "\">frame " << t + 1 << "</text>\n";
      for (Index i = 0; i < xy.rows(); ++i) {
        const double x = ox + (xy(i, 0) - lo[0]) / span * (cell - 2 * pad);
        const double y = oy + (hi[1] - xy(i, 1)) / span * (cell - 2 * pad);
        const std::string c = r == 0   ? colour(p.truth(t, i), vlo, vhi)
                              : r == 1 ? colour(p.prediction(t, i), vlo, vhi)
                                       : colour(diff(t, i), -dmax, dmax);
        os << "<circle cx=\"" << x << "\" cy=\"" << y << "\" r=\"" << radius << "\" fill=\"" << c << "\"/>\n";
      }
    }
  }
  os << "<text x=\"" << pad << "\" y=\"" << H - 5 << "\">potential range [" << detail::num(vlo) << ", "
     << detail::num(vhi) << "], difference range +-" << detail::num(dmax) << "</text>\n";
  os << "</svg>\n";
  return os.str();
}

/// Target-set CC against context size, one line per model, one point per size.
inline std::string render_sweep(const std::vector<eval::MetricsRow>& rows) {
  std::map<std::string, std::map<int, double>> series;
  std::set<int> sizes;
  for (const auto& r : rows)
    if (r.split == "target" && r.subject == "all") {
      series[r.model][r.nu] = r.cc.mean;
      sizes.insert(r.nu);
    }
  require(!sizes.empty(), "render_sweep: no pooled target rows");
  const double W = 420, H = 300, L = 50, R = 110, T = 20, B = 40;
  const int nmin = *sizes.begin(), nmax = *sizes.rbegin();
  auto px = [&](int nu) { return nmax == nmin ? L + (W - L - R) / 2 : L + (nu - nmin) * (W - L - R) / (nmax - nmin); };
  auto py = [&](double cc) { return T + (1.0 - std::clamp(cc, -1.0, 1.0)) / 2.0 * (H - T - B); };
  const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};

  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (double v : {-1.0, -0.5, 0.0, 0.5, 1.0})
    os << "<text x=\"" << L - 35 << "\" y=\"" << py(v) + 4 << "\">" << detail::num(v) << "</text>\n";
  for (int nu : sizes) os << "<text x=\"" << px(nu) - 3 << "\" y=\"" << H - B + 15 << "\">" << nu << "</text>\n";
  os << "<text x=\"" << (W - R) / 2 << "\" y=\"" << H - 5 << "\">context size</text>\n";
  os << "<text x=\"5\" y=\"12\">target CC</text>\n";
  int k = 0;
  for (const auto& [model, pts] : series) {
    const char* col = palette[k % 5];
    os << "<polyline fill=\"none\" stroke=\"" << col << "\" points=\"";
    bool first = true;
    for (const auto& [nu, cc] : pts) {
      os << (first ? "" : " ") << px(nu) << ',' << py(cc);
      first = false;
    }
    os << "\"/>\n";
    for (const auto& [nu, cc] : pts)
      os << "<circle cx=\"" << px(nu) << "\" cy=\"" << py(cc) << "\" r=\"3\" fill=\"" << col << "\"/>\n";
    os << "<text x=\"" << W - R + 10 << "\" y=\"" << T + 15 * (k + 1) << "\" fill=\"" << col << "\">" << model << "</text>\n";
    ++k;
  }
  os << "</svg>\n";
  return os.str();
}

/// Markdown table of the pooled rows per model and split.
inline std::string summary_table(const std::vector<eval::MetricsRow>& rows) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(3);
  os << "| model | split | nu | MSE | CC | DC | n | embed s | rollout s |\n";
  os << "|---|---|---|---|---|---|---|---|---|\n";
  for (const auto& r : rows)
    if (r.subject == "all")
      os << "| " << r.model << " | " << r.split << " | " << r.nu << " | " << r.mse.mean << " ± " << r.mse.std << " | "
         << r.cc.mean << " ± " << r.cc.std << " | " << r.dc.mean << " ± " << r.dc.std << " | " << r.n << " | "
         << std::setprecision(4) << r.embed_seconds << " | " << r.rollout_seconds << std::setprecision(3) << " |\n";
  return os.str();
}

}  // namespace metapns::report
