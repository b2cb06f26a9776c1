#include "metapns/geometry.hpp"
#include "metapns/io.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <set>

using namespace metapns;
using namespace metapns::geometry;

namespace {

MeshGeometry triangle() {
  MeshGeometry m;
  m.name = "tri";
  m.vertices.resize(3, 3);
  m.vertices << 0, 0, 0, 1, 0, 0, 0, 1, 0;
  m.faces.resize(1, 3);
  m.faces << 0, 1, 2;
  return m;
}

GraphLevel path_graph(int n) {
  Mat coords = Mat::Zero(n, 3);
  std::vector<Edge> edges;
  for (int i = 0; i < n; ++i) coords(i, 0) = i;
  for (int i = 0; i + 1 < n; ++i) edges.emplace_back(i, i + 1);
  return make_level(coords, edges);
}

// Unique undirected edges by direct enumeration of face sides.
std::set<Edge> brute_force_edges(const MeshGeometry& m) {
  std::set<Edge> out;
  for (Index f = 0; f < m.face_count(); ++f)
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b) {
        const int u = static_cast<int>(m.faces(f, a)), v = static_cast<int>(m.faces(f, b));
        if (u < v) out.emplace(u, v);
      }
  return out;
}

}  // namespace

TEST(BuildGraph, TriangleHasThreeEdges) {
  const GraphLevel g = build_graph(triangle());
  EXPECT_EQ(g.node_count, 3);
  EXPECT_EQ(g.edges.size(), 3u);
  EXPECT_EQ(g.edge_attr.rows(), 3);
}

TEST(BuildGraph, SegmentAttributeExtremesAndMidpoints) {
  Mat coords(2, 3);
  coords << 0, 0, 0, 1, 0, 0;
  const GraphLevel g = make_level(coords, {{0, 1}});
  EXPECT_DOUBLE_EQ(g.edge_attr(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(g.edge_attr(0, 1), 0.5);
  EXPECT_DOUBLE_EQ(g.edge_attr(0, 2), 0.5);
}

TEST(BuildGraph, GridEdgesMatchBruteForce) {
  const MeshGeometry m = grid_sheet(10, 10);
  const GraphLevel g = build_graph(m);
  const auto expect = brute_force_edges(m);
  EXPECT_EQ(g.edges.size(), expect.size());
  EXPECT_EQ(std::set<Edge>(g.edges.begin(), g.edges.end()), expect);
  // 2*10*9 axis-aligned edges plus one diagonal per quad.
  EXPECT_EQ(g.edges.size(), 2u * 10 * 9 + 81);
  EXPECT_GE(g.edge_attr.minCoeff(), 0.0);
  EXPECT_LE(g.edge_attr.maxCoeff(), 1.0);
}

TEST(BuildGraph, Errors) {
  MeshGeometry empty;
  try {
    build_graph(empty);
    FAIL();
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "empty geometry");
  }
  MeshGeometry bad = grid_sheet(3, 3);
  bad.faces(2, 1) = bad.faces(2, 0);
  try {
    build_graph(bad);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("degenerate face 2"), std::string::npos);
  }
  MeshGeometry dup = triangle();
  dup.vertices.row(2) = dup.vertices.row(1);
  EXPECT_THROW(build_graph(dup), Error);
}

TEST(BuildGraph, TranslationLeavesAttributesUnchanged) {
  MeshGeometry m = icosphere(1);
  const GraphLevel a = build_graph(m);
  m.vertices.rowwise() += Eigen::RowVector3d(3.5, -7.0, 100.0);
  const GraphLevel b = build_graph(m);
  EXPECT_TRUE(a.edge_attr.isApprox(b.edge_attr, 1e-12));
}

TEST(Coarsen, PathOfFourPairsNeighbours) {
  const auto c = coarsen(path_graph(4), 0.5);
  EXPECT_EQ(c.level.node_count, 2);
  EXPECT_EQ(c.level.edges.size(), 1u);
  // Exhaustive check: the only balanced contiguous pairing is {0,1},{2,3}.
  EXPECT_EQ(c.assign[0], c.assign[1]);
  EXPECT_EQ(c.assign[2], c.assign[3]);
  EXPECT_NE(c.assign[0], c.assign[2]);
  EXPECT_DOUBLE_EQ(c.level.node_coords(c.assign[0], 0), 0.5);
  EXPECT_DOUBLE_EQ(c.level.node_coords(c.assign[2], 0), 2.5);
}

TEST(Coarsen, RatioNearOneIsABijection) {
  const GraphLevel g = build_graph(grid_sheet(10, 10));
  const auto c = coarsen(g, 0.999);
  EXPECT_EQ(c.level.node_count, 100);
  std::set<int> images(c.assign.begin(), c.assign.end());
  EXPECT_EQ(images.size(), 100u);
}

TEST(Coarsen, ContractCountsAndSurjectivity) {
  for (double ratio : {0.3, 0.5, 0.7}) {
    const GraphLevel g = build_graph(icosphere(2));
    const auto c = coarsen(g, ratio, 3);
    const int target = static_cast<int>(std::ceil(ratio * g.node_count));
    EXPECT_LE(std::abs(c.level.node_count - target), 1) << ratio;
    std::vector<int> hits(static_cast<std::size_t>(c.level.node_count), 0);
    for (int a : c.assign) ++hits[static_cast<std::size_t>(a)];
    for (int h : hits) EXPECT_GT(h, 0);
    // Coarse coordinates are preimage centroids.
    Mat centroid = Mat::Zero(c.level.node_count, 3);
    for (std::size_t v = 0; v < c.assign.size(); ++v) centroid.row(c.assign[v]) += g.node_coords.row(static_cast<Index>(v));
    for (Index k = 0; k < centroid.rows(); ++k) centroid.row(k) /= hits[static_cast<std::size_t>(k)];
    EXPECT_TRUE(centroid.isApprox(c.level.node_coords, 1e-12));
    // Coarse edges are exactly the contracted fine edges.
    std::set<Edge> contracted;
    for (const auto& [i, j] : g.edges) {
      const int a = c.assign[static_cast<std::size_t>(i)], b = c.assign[static_cast<std::size_t>(j)];
      if (a != b) contracted.emplace(std::min(a, b), std::max(a, b));
    }
    EXPECT_EQ(std::set<Edge>(c.level.edges.begin(), c.level.edges.end()), contracted);
  }
}

TEST(Coarsen, DeterministicGivenSeed) {
  const GraphLevel g = build_graph(grid_sheet(12, 9));
  EXPECT_EQ(coarsen(g, 0.5, 11).assign, coarsen(g, 0.5, 11).assign);
}

TEST(Coarsen, Errors) {
  EXPECT_THROW(coarsen(path_graph(3), 0.5), Error);
  EXPECT_THROW(coarsen(path_graph(8), 0.1), Error);
  EXPECT_THROW(coarsen(path_graph(8), 1.0), Error);
}

TEST(Hierarchy, NeedsTwoLevels) {
  try {
    build_hierarchy(grid_sheet(4, 4), 1, 0.5);
    FAIL();
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "need >=2 levels");
  }
}

TEST(Hierarchy, GridCountsHalve) {
  const GraphHierarchy h = build_hierarchy(grid_sheet(10, 10), 3, 0.5);
  ASSERT_EQ(h.depth(), 3u);
  const int expected[] = {100, 50, 25};
  for (std::size_t l = 0; l < 3; ++l) EXPECT_LE(std::abs(h.levels[l].node_count - expected[l]), 1);
  check_hierarchy(h);
}

TEST(Hierarchy, PoolUnpoolRoundTrip) {
  const GraphHierarchy h = build_hierarchy(icosphere(2), 4, 0.5, 5);
  for (std::size_t l = 0; l + 1 < h.depth(); ++l) {
    const Mat constant = Mat::Constant(h.levels[l].node_count, 2, 0.37);
    EXPECT_TRUE(pool_mean(h, l, constant).isApproxToConstant(0.37, 1e-14));
    Rng rng(l);
    Mat coarse = Mat::Random(h.levels[l + 1].node_count, 3);
    EXPECT_TRUE(pool_mean(h, l, unpool_copy(h, l, coarse)).isApprox(coarse, 1e-14));
  }
}

TEST(MeshFile, RoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "metapns_geometry_test";
  const MeshGeometry m = icosphere(1);
  io::write_mesh(dir / "a.mesh", m);
  const MeshGeometry r = io::read_mesh(dir / "a.mesh");
  EXPECT_EQ(r.name, m.name);
  EXPECT_EQ(r.vertices, m.vertices);
  EXPECT_EQ(r.faces, m.faces);
  std::filesystem::remove_all(dir);
}
