#pragma once

#include "naronet/common.hpp"
#include "naronet/io.hpp"
#include "naronet/pcl.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace naronet::graph {

using Edge = std::pair<std::uint32_t, std::uint32_t>;

struct GridInfo {
    std::string image_id;
    int rows = 0;
    int cols = 0;
    int patch_side = 0;
};

struct NodeCoord {
    int image = 0;
    int row = 0;
    int col = 0;
};

/// Per-patient patch graph. Edges are directed and stored in both directions.
struct PatchGraph {
    std::string patient_id;
    int label = 0;
    Mat Z;
    std::vector<Edge> edges;
    std::vector<NodeCoord> coords;
    std::vector<GridInfo> images;

    int num_nodes() const { return static_cast<int>(Z.rows()); }
    int num_edges() const { return static_cast<int>(edges.size()); }
    int dim() const { return static_cast<int>(Z.cols()); }
};

/// 4-adjacency over the embedding grid.
PatchGraph build_patch_graph(const pcl::EmbeddedImage& embedded, const std::string& patient_id, int label);

/// Disjoint union; throws ConfigError on mixed patient ids or embedding sizes.
PatchGraph merge_patient_graphs(const std::vector<PatchGraph>& graphs);

enum AugmentMode : unsigned { kDropEdge = 1u, kAddEdge = 2u, kMaskNode = 4u };
unsigned parse_augment_modes(const std::string& s);
std::string format_augment_modes(unsigned modes);

/// Applies drop_edge, add_edge, mask_node (in that order) with floor(rho * L) items each.
PatchGraph augment_graph(const PatchGraph& g, double rho, unsigned modes, std::uint64_t seed);

int connected_components(const PatchGraph& g);
/// Checks endpoint range, self-loops, duplicates and direction symmetry.
bool edges_well_formed(const PatchGraph& g);

void write_graph(const std::filesystem::path& path, const PatchGraph& g, const io::json& extra = io::json::object());
PatchGraph read_graph(const std::filesystem::path& path);

} // namespace naronet::graph
