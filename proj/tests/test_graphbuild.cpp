#include "naronet/graphbuild.hpp"
#include "support.hpp"

#include <doctest.h>

#include <map>

using namespace naronet;
using namespace naronet::graph;

namespace {

pcl::EmbeddedImage grid(int rows, int cols, int dim = 3, const std::string& id = "img") {
    pcl::EmbeddedImage e;
    e.image_id = id;
    e.rows = rows;
    e.cols = cols;
    e.patch_side = 10;
    Rng rng(static_cast<std::uint64_t>(rows * 100 + cols));
    e.embeddings = test::random_mat(rows * cols, dim, rng);
    return e;
}

int zero_rows(const Mat& z) {
    int n = 0;
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
        n += z.row(r).isZero() ? 1 : 0;
    }
    return n;
}

} // namespace

TEST_CASE("grid adjacency edge counts") {
    CHECK(build_patch_graph(grid(1, 1), "p", 0).num_edges() == 0);
    CHECK(build_patch_graph(grid(2, 2), "p", 0).num_edges() == 8);
    CHECK(build_patch_graph(grid(3, 3), "p", 0).num_edges() == 24);
    const PatchGraph g = build_patch_graph(grid(20, 20), "p", 1);
    CHECK(g.num_nodes() == 400);
    CHECK(g.num_edges() == 1520);
    CHECK(g.label == 1);
    CHECK(edges_well_formed(g));
}

TEST_CASE("grid degrees lie in {2, 3, 4} and neighbors are 4-adjacent") {
    const PatchGraph g = build_patch_graph(grid(5, 7), "p", 0);
    std::vector<int> degree(g.num_nodes(), 0);
    for (const auto& [s, d] : g.edges) {
        ++degree[s];
        const auto& a = g.coords[s];
        const auto& b = g.coords[d];
        CHECK(std::abs(a.row - b.row) + std::abs(a.col - b.col) == 1);
    }
    for (int d : degree) {
        CHECK(d >= 2);
        CHECK(d <= 4);
    }
    CHECK(g.coords[8].row == 1);
    CHECK(g.coords[8].col == 1);
}

TEST_CASE("merging patient graphs is a disjoint union") {
    const PatchGraph a = build_patch_graph(grid(20, 20, 3, "a"), "p", 0);
    const PatchGraph b = build_patch_graph(grid(20, 20, 3, "b"), "p", 0);
    CHECK(merge_patient_graphs({a}).edges == a.edges);

    const PatchGraph m = merge_patient_graphs({a, b});
    CHECK(m.num_nodes() == 800);
    CHECK(m.num_edges() == 3040);
    CHECK(m.images.size() == 2);
    CHECK(connected_components(m) == connected_components(a) + connected_components(b));
    for (const auto& [s, d] : m.edges) {
        CHECK(m.coords[s].image == m.coords[d].image);
    }
    CHECK(m.coords[400].image == 1);
    CHECK(m.Z.row(400) == b.Z.row(0));

    const PatchGraph other = build_patch_graph(grid(2, 2), "q", 0);
    CHECK_THROWS_AS(merge_patient_graphs({a, other}), ConfigError);
    const PatchGraph wide = build_patch_graph(grid(2, 2, 5), "p", 0);
    CHECK_THROWS_AS(merge_patient_graphs({a, wide}), ConfigError);
}

TEST_CASE("augmentation counts") {
    const PatchGraph g = build_patch_graph(grid(20, 20), "p", 0);

    SUBCASE("rho 0 is the identity") {
        const PatchGraph a = augment_graph(g, 0.0, kDropEdge | kAddEdge | kMaskNode, 1);
        CHECK(a.edges == g.edges);
        CHECK(a.Z == g.Z);
    }
    SUBCASE("drop edge removes floor(rho L) undirected edges") {
        const PatchGraph a = augment_graph(g, 0.1, kDropEdge, 2);
        CHECK(a.num_edges() == g.num_edges() - 2 * 40);
        CHECK(edges_well_formed(a));
        CHECK(augment_graph(g, 1.0, kDropEdge, 2).num_edges() == g.num_edges() - 2 * 400);
    }
    SUBCASE("add edge inserts new pairs only") {
        const PatchGraph a = augment_graph(g, 0.1, kAddEdge, 3);
        CHECK(a.num_edges() == g.num_edges() + 2 * 40);
        CHECK(edges_well_formed(a));
    }
    SUBCASE("mask node zeroes floor(rho L) rows") {
        const PatchGraph a = augment_graph(g, 0.1, kMaskNode, 4);
        CHECK(zero_rows(a.Z) == 40);
        CHECK(a.edges == g.edges);
    }
    SUBCASE("fresh randomness per seed, fixed per seed") {
        const PatchGraph a = augment_graph(g, 0.2, kDropEdge | kMaskNode, 5);
        const PatchGraph b = augment_graph(g, 0.2, kDropEdge | kMaskNode, 5);
        const PatchGraph c = augment_graph(g, 0.2, kDropEdge | kMaskNode, 6);
        CHECK(a.edges == b.edges);
        CHECK(a.Z == b.Z);
        CHECK(a.edges != c.edges);
    }
    SUBCASE("rho out of range") {
        CHECK_THROWS_AS(augment_graph(g, 1.5, kDropEdge, 1), ConfigError);
        CHECK_THROWS_AS(augment_graph(g, -0.1, kDropEdge, 1), ConfigError);
    }
}

TEST_CASE("augmentation never creates self-loops or duplicates") {
    Rng rng(7);
    for (int t = 0; t < 30; ++t) {
        const PatchGraph g = test::random_graph(5 + static_cast<int>(uniform_index(rng, 30)), 2, 0.2, rng);
        const double rho = uniform01(rng);
        const PatchGraph a = augment_graph(g, rho, kDropEdge | kAddEdge | kMaskNode, 100 + t);
        CHECK(edges_well_formed(a));
    }
}

TEST_CASE("edge validation catches malformed lists") {
    PatchGraph g = build_patch_graph(grid(2, 2), "p", 0);
    CHECK(edges_well_formed(g));
    PatchGraph loop = g;
    loop.edges.emplace_back(1, 1);
    CHECK_FALSE(edges_well_formed(loop));
    PatchGraph one_way = g;
    one_way.edges.emplace_back(0, 3);
    CHECK_FALSE(edges_well_formed(one_way));
    PatchGraph dup = g;
    dup.edges.push_back(dup.edges.front());
    CHECK_FALSE(edges_well_formed(dup));
    PatchGraph range = g;
    range.edges.emplace_back(0, 9);
    range.edges.emplace_back(9, 0);
    CHECK_FALSE(edges_well_formed(range));
}

TEST_CASE("augment mode strings") {
    CHECK(parse_augment_modes("drop_edge,mask_node") == (kDropEdge | kMaskNode));
    CHECK(parse_augment_modes("") == 0u);
    CHECK(parse_augment_modes(format_augment_modes(kDropEdge | kAddEdge)) == (kDropEdge | kAddEdge));
    CHECK_THROWS_AS(parse_augment_modes("shuffle"), ConfigError);
}

TEST_CASE("edge list storage is linear in L") {
    const PatchGraph g = build_patch_graph(grid(100, 100, 1), "p", 0);
    const double dense = 1e4 * 1e4;
    CHECK(g.num_edges() < 4 * 10000);
    CHECK(dense / (2.0 * g.num_edges()) > 1e3);
}

TEST_CASE("graph file round trip") {
    const auto dir = test::scratch_dir("graph_io");
    const PatchGraph g = merge_patient_graphs({build_patch_graph(grid(3, 4, 3, "a"), "p7", 2),
                                               build_patch_graph(grid(2, 2, 3, "b"), "p7", 2)});
    write_graph(dir / "p7.graph", g);
    const PatchGraph back = read_graph(dir / "p7.graph");
    CHECK(back.patient_id == "p7");
    CHECK(back.label == 2);
    CHECK(back.edges == g.edges);
    CHECK(back.images.size() == 2);
    CHECK(back.images[1].image_id == "b");
    CHECK(back.coords[13].image == 1);
    CHECK((back.Z - g.Z).cwiseAbs().maxCoeff() < 1e-6);
}
