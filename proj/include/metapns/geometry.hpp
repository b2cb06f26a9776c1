#pragma once

// Cardiac meshes as attributed graphs, and the multi-resolution hierarchy the
// graph encoder/decoder pool and unpool through.

#include "metapns/common.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <vector>

namespace metapns::geometry {

using FaceMat = Eigen::Matrix<std::int64_t, Eigen::Dynamic, 3, Eigen::RowMajor>;
using Edge = std::pair<int, int>;

struct MeshGeometry {
  Mat vertices;  // N x 3, mm
  FaceMat faces;  // M x 3
  std::string name;

  Index vertex_count() const { return vertices.rows(); }
  Index face_count() const { return faces.rows(); }
};

struct GraphLevel {
  Index node_count = 0;
  std::vector<Edge> edges;  // undirected, i < j, stored once
  Mat edge_attr;            // |edges| x 3, each component in [0,1]
  Mat node_coords;          // node_count x 3
  Eigen::Vector3d attr_scale = Eigen::Vector3d::Zero();  // per-component max |dx| used for normalization
};

struct GraphHierarchy {
  std::vector<GraphLevel> levels;          // 0 = finest
  std::vector<std::vector<int>> assign;    // assign[l][fine node of level l] = coarse node of level l+1

  std::size_t depth() const { return levels.size(); }
  const GraphLevel& finest() const { return levels.front(); }
  const GraphLevel& coarsest() const { return levels.back(); }
};

// ---------------------------------------------------------------------------

/// Normalized Cartesian edge attribute: dx / (2 * scale) + 0.5 per component,
/// so the reverse direction maps to 1 - attr and zero offsets sit at 0.5.
inline Eigen::RowVector3d edge_attribute(const Eigen::RowVector3d& delta, const Eigen::Vector3d& scale) {
  Eigen::RowVector3d a;
  for (int c = 0; c < 3; ++c) a[c] = scale[c] > 0.0 ? delta[c] / (2.0 * scale[c]) + 0.5 : 0.5;
  return a;
}

/// Builds a level from coordinates and an undirected edge set; computes the
/// normalization scale over this level's edges.
inline GraphLevel make_level(Mat coords, std::vector<Edge> edges) {
  GraphLevel lv;
  lv.node_count = coords.rows();
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  lv.edges = std::move(edges);
  lv.node_coords = std::move(coords);
  for (const auto& [i, j] : lv.edges) {
    const Eigen::RowVector3d d = lv.node_coords.row(j) - lv.node_coords.row(i);
    lv.attr_scale = lv.attr_scale.cwiseMax(d.cwiseAbs().transpose());
  }
  lv.edge_attr.resize(static_cast<Index>(lv.edges.size()), 3);
  for (std::size_t e = 0; e < lv.edges.size(); ++e) {
    const auto& [i, j] = lv.edges[e];
    lv.edge_attr.row(static_cast<Index>(e)) =
        edge_attribute(lv.node_coords.row(j) - lv.node_coords.row(i), lv.attr_scale);
  }
  return lv;
}

inline void validate(const MeshGeometry& mesh) {
  if (mesh.vertex_count() == 0 || mesh.face_count() == 0) fail("empty geometry");
  const Index n = mesh.vertex_count();
  std::vector<int> incident(static_cast<std::size_t>(n), 0);
  for (Index f = 0; f < mesh.face_count(); ++f) {
    for (int c = 0; c < 3; ++c) {
      const auto v = mesh.faces(f, c);
      if (v < 0 || v >= n) fail(cat("face ", f, " references vertex ", v, " outside [0, ", n, ")"));
      ++incident[static_cast<std::size_t>(v)];
    }
    if (mesh.faces(f, 0) == mesh.faces(f, 1) || mesh.faces(f, 1) == mesh.faces(f, 2) ||
        mesh.faces(f, 0) == mesh.faces(f, 2))
      fail(cat("degenerate face ", f, " (repeated vertex index)"));
  }
  for (Index v = 0; v < n; ++v)
    if (incident[static_cast<std::size_t>(v)] == 0) fail(cat("vertex ", v, " has no incident edge"));
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](Index a, Index b) {
    return mesh.vertices(a, 0) < mesh.vertices(b, 0);
  });
  // Sweep along x; only vertices within 1e-9 in x can be duplicates.
  for (std::size_t a = 0; a < order.size(); ++a) {
    for (std::size_t b = a + 1; b < order.size(); ++b) {
      if (mesh.vertices(order[b], 0) - mesh.vertices(order[a], 0) > 1e-9) break;
      if ((mesh.vertices.row(order[a]) - mesh.vertices.row(order[b])).norm() <= 1e-9)
        fail(cat("duplicate vertices ", order[a], " and ", order[b]));
    }
  }
}

inline GraphLevel build_graph(const MeshGeometry& mesh) {
  validate(mesh);
  std::vector<Edge> edges;
  edges.reserve(static_cast<std::size_t>(mesh.face_count()) * 3);
  for (Index f = 0; f < mesh.face_count(); ++f) {
    for (int c = 0; c < 3; ++c) {
      int a = static_cast<int>(mesh.faces(f, c));
      int b = static_cast<int>(mesh.faces(f, (c + 1) % 3));
      edges.emplace_back(std::min(a, b), std::max(a, b));
    }
  }
  return make_level(mesh.vertices, std::move(edges));
}

// ---------------------------------------------------------------------------
// Coarsening: greedy heaviest-edge matching (Graclus-style), clusters of at
// most two per pass, repeated until the target node count is reached.

struct Coarsened {
  GraphLevel level;
  std::vector<int> assign;  // fine node -> coarse node
};

inline Coarsened coarsen(const GraphLevel& level, double target_ratio, std::uint64_t seed = 0) {
  if (!(target_ratio > 0.0 && target_ratio < 1.0)) fail(cat("coarsen: ratio ", target_ratio, " not in (0,1)"));
  if (level.node_count < 4) fail(cat("coarsen: need >= 4 nodes, got ", level.node_count));
  const auto n_fine = static_cast<int>(level.node_count);
  const int target = static_cast<int>(std::ceil(target_ratio * n_fine - 1e-12));
  if (target < 2) fail(cat("coarsen: ratio ", target_ratio, " leaves ", target, " coarse nodes (< 2)"));

  // cluster[v] = current cluster id of fine node v; clusters are relabeled each pass.
  std::vector<int> cluster(static_cast<std::size_t>(n_fine));
  std::iota(cluster.begin(), cluster.end(), 0);
  int count = n_fine;
  std::vector<int> size(static_cast<std::size_t>(n_fine), 1);
  std::vector<Edge> cedges = level.edges;
  Rng rng(mix_seed(seed));

  while (count > target) {
    std::vector<int> degree(static_cast<std::size_t>(count), 0);
    for (const auto& [a, b] : cedges) {
      ++degree[static_cast<std::size_t>(a)];
      ++degree[static_cast<std::size_t>(b)];
    }
    struct Cand {
      double weight;
      std::uint64_t tie;
      int a, b;
    };
    std::vector<Cand> cands;
    cands.reserve(cedges.size());
    for (const auto& [a, b] : cedges) {
      const double w = (1.0 / degree[static_cast<std::size_t>(a)] + 1.0 / degree[static_cast<std::size_t>(b)]) /
                       (size[static_cast<std::size_t>(a)] + size[static_cast<std::size_t>(b)]);
      cands.push_back({w, rng(), a, b});
    }
    std::sort(cands.begin(), cands.end(), [](const Cand& x, const Cand& y) {
      if (x.weight != y.weight) return x.weight > y.weight;
      return x.tie < y.tie;
    });
    std::vector<int> mate(static_cast<std::size_t>(count), -1);
    int merges = 0;
    for (const Cand& c : cands) {
      if (count - merges <= target) break;
      if (mate[static_cast<std::size_t>(c.a)] >= 0 || mate[static_cast<std::size_t>(c.b)] >= 0) continue;
      mate[static_cast<std::size_t>(c.a)] = c.b;
      mate[static_cast<std::size_t>(c.b)] = c.a;
      ++merges;
    }
    if (merges == 0) break;
    // New ids ordered by the smaller old id of each merged pair.
    std::vector<int> relabel(static_cast<std::size_t>(count), -1);
    int next = 0;
    std::vector<int> new_size;
    for (int v = 0; v < count; ++v) {
      if (relabel[static_cast<std::size_t>(v)] >= 0) continue;
      relabel[static_cast<std::size_t>(v)] = next;
      int s = size[static_cast<std::size_t>(v)];
      const int m = mate[static_cast<std::size_t>(v)];
      if (m >= 0) {
        relabel[static_cast<std::size_t>(m)] = next;
        s += size[static_cast<std::size_t>(m)];
      }
      new_size.push_back(s);
      ++next;
    }
    for (int& c : cluster) c = relabel[static_cast<std::size_t>(c)];
    std::set<Edge> contracted;
    for (const auto& [a, b] : cedges) {
      const int ra = relabel[static_cast<std::size_t>(a)];
      const int rb = relabel[static_cast<std::size_t>(b)];
      if (ra != rb) contracted.emplace(std::min(ra, rb), std::max(ra, rb));
    }
    cedges.assign(contracted.begin(), contracted.end());
    size = std::move(new_size);
    count = next;
  }
  if (count > target + 1)
    fail(cat("coarsen: stalled at ", count, " nodes, target ", target, " (graph too disconnected)"));

  Mat coords = Mat::Zero(count, 3);
  std::vector<int> members(static_cast<std::size_t>(count), 0);
  for (int v = 0; v < n_fine; ++v) {
    coords.row(cluster[static_cast<std::size_t>(v)]) += level.node_coords.row(v);
    ++members[static_cast<std::size_t>(cluster[static_cast<std::size_t>(v)])];
  }
  for (int c = 0; c < count; ++c) coords.row(c) /= members[static_cast<std::size_t>(c)];
  std::vector<Edge> coarse_edges;
  for (const auto& [i, j] : level.edges) {
    const int a = cluster[static_cast<std::size_t>(i)];
    const int b = cluster[static_cast<std::size_t>(j)];
    if (a != b) coarse_edges.emplace_back(std::min(a, b), std::max(a, b));
  }
  return {make_level(std::move(coords), std::move(coarse_edges)), std::move(cluster)};
}

inline void check_hierarchy(const GraphHierarchy& h) {
  require(h.levels.size() >= 2, "hierarchy needs >= 2 levels");
  require(h.assign.size() + 1 == h.levels.size(), "hierarchy assignment count mismatch");
  for (std::size_t l = 0; l + 1 < h.levels.size(); ++l) {
    const auto& fine = h.levels[l];
    const auto& coarse = h.levels[l + 1];
    require(coarse.node_count < fine.node_count, "node counts must strictly decrease");
    require(static_cast<Index>(h.assign[l].size()) == fine.node_count, "assignment size mismatch");
    std::vector<int> hits(static_cast<std::size_t>(coarse.node_count), 0);
    for (int c : h.assign[l]) {
      require(c >= 0 && c < coarse.node_count, "assignment out of range");
      ++hits[static_cast<std::size_t>(c)];
    }
    for (int x : hits) require(x > 0, "coarse node without preimage");
  }
}

inline GraphHierarchy build_hierarchy(const GraphLevel& finest, int num_levels, double ratio, std::uint64_t seed = 0) {
  if (num_levels < 2) fail("need >=2 levels");
  GraphHierarchy h;
  h.levels.push_back(finest);
  for (int l = 1; l < num_levels; ++l) {
    Coarsened c = coarsen(h.levels.back(), ratio, derive_seed(seed, static_cast<std::uint64_t>(l)));
    h.levels.push_back(std::move(c.level));
    h.assign.push_back(std::move(c.assign));
  }
  check_hierarchy(h);
  return h;
}

inline GraphHierarchy build_hierarchy(const MeshGeometry& mesh, int num_levels, double ratio, std::uint64_t seed = 0) {
  if (num_levels < 2) fail("need >=2 levels");
  return build_hierarchy(build_graph(mesh), num_levels, ratio, seed);
}

/// Preimage-mean pooling from level l to l+1 for one frame.
inline Mat pool_mean(const GraphHierarchy& h, std::size_t l, const Mat& fine) {
  const auto& a = h.assign.at(l);
  const Index nc = h.levels.at(l + 1).node_count;
  Mat out = Mat::Zero(nc, fine.cols());
  Vec count = Vec::Zero(nc);
  for (std::size_t v = 0; v < a.size(); ++v) {
    out.row(a[v]) += fine.row(static_cast<Index>(v));
    count[a[v]] += 1.0;
  }
  return out.array().colwise() / count.array();
}

/// Copy-to-preimage unpooling from level l+1 to l.
inline Mat unpool_copy(const GraphHierarchy& h, std::size_t l, const Mat& coarse) {
  const auto& a = h.assign.at(l);
  Mat out(static_cast<Index>(a.size()), coarse.cols());
  for (std::size_t v = 0; v < a.size(); ++v) out.row(static_cast<Index>(v)) = coarse.row(a[v]);
  return out;
}

/// Breadth-first hop distances from a source set.
inline std::vector<int> hop_distance(const GraphLevel& g, const std::vector<int>& sources) {
  std::vector<std::vector<int>> adj(static_cast<std::size_t>(g.node_count));
  for (const auto& [i, j] : g.edges) {
    adj[static_cast<std::size_t>(i)].push_back(j);
    adj[static_cast<std::size_t>(j)].push_back(i);
  }
  std::vector<int> dist(static_cast<std::size_t>(g.node_count), -1);
  std::vector<int> queue;
  for (int s : sources) {
    dist[static_cast<std::size_t>(s)] = 0;
    queue.push_back(s);
  }
  for (std::size_t q = 0; q < queue.size(); ++q) {
    const int u = queue[q];
    for (int v : adj[static_cast<std::size_t>(u)]) {
      if (dist[static_cast<std::size_t>(v)] >= 0) continue;
      dist[static_cast<std::size_t>(v)] = dist[static_cast<std::size_t>(u)] + 1;
      queue.push_back(v);
    }
  }
  return dist;
}

/// Permutes node ids of the finest level: new id of old node v is perm[v].
/// Coarse levels are kept; the level-0 assignment is permuted consistently.
inline GraphHierarchy relabel_finest(const GraphHierarchy& h, const std::vector<int>& perm) {
  GraphHierarchy out = h;
  const GraphLevel& f = h.levels[0];
  require(static_cast<Index>(perm.size()) == f.node_count, "permutation size mismatch");
  Mat coords(f.node_count, 3);
  for (Index v = 0; v < f.node_count; ++v) coords.row(perm[static_cast<std::size_t>(v)]) = f.node_coords.row(v);
  std::vector<Edge> edges;
  for (const auto& [i, j] : f.edges) {
    const int a = perm[static_cast<std::size_t>(i)];
    const int b = perm[static_cast<std::size_t>(j)];
    edges.emplace_back(std::min(a, b), std::max(a, b));
  }
  out.levels[0] = make_level(std::move(coords), std::move(edges));
  if (!h.assign.empty()) {
    std::vector<int> a(h.assign[0].size());
    for (std::size_t v = 0; v < a.size(); ++v) a[static_cast<std::size_t>(perm[v])] = h.assign[0][v];
    out.assign[0] = std::move(a);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic test geometries.

/// nx x ny vertex sheet in the z=0 plane, each quad split along its main diagonal.
inline MeshGeometry grid_sheet(int nx, int ny, double spacing = 1.0, std::string name = "") {
  require(nx >= 2 && ny >= 2, "grid_sheet needs at least 2x2 vertices");
  MeshGeometry m;
  m.name = name.empty() ? cat("sheet", nx, "x", ny) : std::move(name);
  m.vertices.resize(static_cast<Index>(nx) * ny, 3);
  for (int i = 0; i < nx; ++i)
    for (int j = 0; j < ny; ++j) m.vertices.row(i * ny + j) << i * spacing, j * spacing, 0.0;
  m.faces.resize(static_cast<Index>(2 * (nx - 1) * (ny - 1)), 3);
  Index f = 0;
  for (int i = 0; i + 1 < nx; ++i) {
    for (int j = 0; j + 1 < ny; ++j) {
      const std::int64_t a = i * ny + j, b = (i + 1) * ny + j, c = i * ny + j + 1, d = (i + 1) * ny + j + 1;
      m.faces.row(f++) << a, b, d;
      m.faces.row(f++) << a, d, c;
    }
  }
  return m;
}

/// Icosahedron refined `subdivisions` times and projected to a sphere.
inline MeshGeometry icosphere(int subdivisions, double radius = 10.0) {
  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  std::vector<Eigen::Vector3d> v = {{-1, t, 0}, {1, t, 0}, {-1, -t, 0}, {1, -t, 0}, {0, -1, t}, {0, 1, t},
                                    {0, -1, -t}, {0, 1, -t}, {t, 0, -1}, {t, 0, 1}, {-t, 0, -1}, {-t, 0, 1}};
  std::vector<std::array<int, 3>> f = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11},
                                       {1, 5, 9},  {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
                                       {3, 9, 4},  {3, 4, 2},  {3, 2, 6},   {3, 6, 8},  {3, 8, 9},
                                       {4, 9, 5},  {2, 4, 11}, {6, 2, 10},  {8, 6, 7},  {9, 8, 1}};
  for (auto& p : v) p.normalize();
  for (int s = 0; s < subdivisions; ++s) {
    std::map<Edge, int> mid;
    auto midpoint = [&](int a, int b) {
      Edge key{std::min(a, b), std::max(a, b)};
      auto it = mid.find(key);
      if (it != mid.end()) return it->second;
      v.push_back((v[static_cast<std::size_t>(a)] + v[static_cast<std::size_t>(b)]).normalized());
      const int id = static_cast<int>(v.size()) - 1;
      mid.emplace(key, id);
      return id;
    };
    std::vector<std::array<int, 3>> next;
    for (const auto& tri : f) {
      const int a = midpoint(tri[0], tri[1]), b = midpoint(tri[1], tri[2]), c = midpoint(tri[2], tri[0]);
      next.push_back({tri[0], a, c});
      next.push_back({tri[1], b, a});
      next.push_back({tri[2], c, b});
      next.push_back({a, b, c});
    }
    f = std::move(next);
  }
  MeshGeometry m;
  m.name = cat("icosphere", subdivisions);
  m.vertices.resize(static_cast<Index>(v.size()), 3);
  for (std::size_t i = 0; i < v.size(); ++i) m.vertices.row(static_cast<Index>(i)) = radius * v[i].transpose();
  m.faces.resize(static_cast<Index>(f.size()), 3);
  for (std::size_t i = 0; i < f.size(); ++i) m.faces.row(static_cast<Index>(i)) << f[i][0], f[i][1], f[i][2];
  return m;
}

}  // namespace metapns::geometry
