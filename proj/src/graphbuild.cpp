#include "naronet/graphbuild.hpp"

#include "naronet/rng.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_set>

namespace naronet::graph {

namespace {

constexpr char kMagic[8] = {'N', 'A', 'R', 'O', 'G', 'R', 'F', '1'};

std::uint64_t key(std::uint32_t a, std::uint32_t b) {
    if (a > b) {
        std::swap(a, b);
    }
    return (static_cast<std::uint64_t>(a) << 32) | b;
}

template <typename T>
void put(std::ostream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    return v;
}

} // namespace

PatchGraph build_patch_graph(const pcl::EmbeddedImage& embedded, const std::string& patient_id, int label) {
    PatchGraph g;
    g.patient_id = patient_id;
    g.label = label;
    g.Z = embedded.embeddings;
    g.images.push_back({embedded.image_id, embedded.rows, embedded.cols, embedded.patch_side});
    const int R = embedded.rows, C = embedded.cols;
    for (int r = 0; r < R; ++r) {
        for (int c = 0; c < C; ++c) {
            g.coords.push_back({0, r, c});
            const auto here = static_cast<std::uint32_t>(r * C + c);
            if (r > 0) {
                g.edges.emplace_back(here, here - C);
            }
            if (r + 1 < R) {
                g.edges.emplace_back(here, here + C);
            }
            if (c > 0) {
                g.edges.emplace_back(here, here - 1);
            }
            if (c + 1 < C) {
                g.edges.emplace_back(here, here + 1);
            }
        }
    }
    return g;
}

PatchGraph merge_patient_graphs(const std::vector<PatchGraph>& graphs) {
    if (graphs.empty()) {
        throw ConfigError("merge_patient_graphs: no graphs");
    }
    if (graphs.size() == 1) {
        return graphs.front();
    }
    PatchGraph out;
    out.patient_id = graphs.front().patient_id;
    out.label = graphs.front().label;
    const int g = graphs.front().dim();
    int total = 0;
    for (const auto& gr : graphs) {
        if (gr.patient_id != out.patient_id) {
            throw ConfigError("merge_patient_graphs: mixed patient ids '" + out.patient_id + "' and '" +
                              gr.patient_id + "'");
        }
        if (gr.dim() != g) {
            throw ConfigError("merge_patient_graphs: embedding sizes differ");
        }
        total += gr.num_nodes();
    }
    out.Z.resize(total, g);
    std::uint32_t offset = 0;
    for (const auto& gr : graphs) {
        out.Z.middleRows(offset, gr.num_nodes()) = gr.Z;
        const int image_offset = static_cast<int>(out.images.size());
        out.images.insert(out.images.end(), gr.images.begin(), gr.images.end());
        for (auto c : gr.coords) {
            c.image += image_offset;
            out.coords.push_back(c);
        }
        for (const auto& [a, b] : gr.edges) {
            out.edges.emplace_back(a + offset, b + offset);
        }
        offset += static_cast<std::uint32_t>(gr.num_nodes());
    }
    return out;
}

unsigned parse_augment_modes(const std::string& s) {
    unsigned modes = 0;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item == "drop_edge") {
            modes |= kDropEdge;
        } else if (item == "add_edge") {
            modes |= kAddEdge;
        } else if (item == "mask_node") {
            modes |= kMaskNode;
        } else if (!item.empty() && item != "none") {
            throw ConfigError("unknown augmentation mode '" + item + "' (drop_edge, add_edge, mask_node)");
        }
    }
    return modes;
}

std::string format_augment_modes(unsigned modes) {
    std::string out;
    auto append = [&](const char* s) { out += (out.empty() ? "" : ",") + std::string(s); };
    if (modes & kDropEdge) {
        append("drop_edge");
    }
    if (modes & kAddEdge) {
        append("add_edge");
    }
    if (modes & kMaskNode) {
        append("mask_node");
    }
    return out.empty() ? "none" : out;
}

PatchGraph augment_graph(const PatchGraph& g, double rho, unsigned modes, std::uint64_t seed) {
    if (!(rho >= 0.0 && rho <= 1.0)) {
        throw ConfigError("augmentation rho must lie in [0, 1]");
    }
    const int L = g.num_nodes();
    const auto count = static_cast<std::size_t>(std::floor(rho * L));
    if (count == 0 || modes == 0) {
        return g;
    }
    Rng rng(seed);
    PatchGraph out = g;

    if (modes & kDropEdge) {
        std::vector<std::uint64_t> undirected;
        for (const auto& [a, b] : out.edges) {
            if (a < b) {
                undirected.push_back(key(a, b));
            }
        }
        std::shuffle(undirected.begin(), undirected.end(), rng);
        std::unordered_set<std::uint64_t> dropped(undirected.begin(),
                                                  undirected.begin() + std::min(count, undirected.size()));
        std::erase_if(out.edges, [&](const Edge& e) { return dropped.count(key(e.first, e.second)) > 0; });
    }

    if ((modes & kAddEdge) && L >= 2) {
        std::unordered_set<std::uint64_t> present;
        for (const auto& [a, b] : out.edges) {
            present.insert(key(a, b));
        }
        const std::uint64_t capacity = static_cast<std::uint64_t>(L) * (L - 1) / 2;
        std::size_t added = 0;
        while (added < count && present.size() < capacity) {
            const auto a = static_cast<std::uint32_t>(uniform_index(rng, L));
            const auto b = static_cast<std::uint32_t>(uniform_index(rng, L));
            if (a == b || !present.insert(key(a, b)).second) {
                continue;
            }
            out.edges.emplace_back(a, b);
            out.edges.emplace_back(b, a);
            ++added;
        }
    }

    if (modes & kMaskNode) {
        std::vector<int> nodes(L);
        std::iota(nodes.begin(), nodes.end(), 0);
        std::shuffle(nodes.begin(), nodes.end(), rng);
        for (std::size_t i = 0; i < std::min<std::size_t>(count, nodes.size()); ++i) {
            out.Z.row(nodes[i]).setZero();
        }
    }
    return out;
}

int connected_components(const PatchGraph& g) {
    std::vector<int> parent(g.num_nodes());
    std::iota(parent.begin(), parent.end(), 0);
    auto find = [&](int x) {
        while (parent[x] != x) {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        return x;
    };
    int components = g.num_nodes();
    for (const auto& [a, b] : g.edges) {
        const int ra = find(static_cast<int>(a)), rb = find(static_cast<int>(b));
        if (ra != rb) {
            parent[ra] = rb;
            --components;
        }
    }
    return components;
}

bool edges_well_formed(const PatchGraph& g) {
    std::set<Edge> seen;
    for (const auto& e : g.edges) {
        if (e.first >= static_cast<std::uint32_t>(g.num_nodes()) || e.second >= static_cast<std::uint32_t>(g.num_nodes()) ||
            e.first == e.second || !seen.insert(e).second) {
            return false;
        }
    }
    return std::all_of(seen.begin(), seen.end(), [&](const Edge& e) { return seen.count({e.second, e.first}) > 0; });
}

void write_graph(const std::filesystem::path& path, const PatchGraph& g, const io::json& extra) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw RuntimeError("cannot write graph " + path.string());
    }
    out.write(kMagic, sizeof(kMagic));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(g.num_nodes()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(g.dim()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(g.num_edges()));
    for (Eigen::Index i = 0; i < g.Z.size(); ++i) {
        put<float>(out, static_cast<float>(g.Z.data()[i]));
    }
    for (const auto& [a, b] : g.edges) {
        put(out, a);
        put(out, b);
    }
    for (const auto& c : g.coords) {
        put<std::int32_t>(out, c.image);
        put<std::int32_t>(out, c.row);
        put<std::int32_t>(out, c.col);
    }
    if (!out) {
        throw RuntimeError("short write on graph " + path.string());
    }
    io::json meta = extra;
    meta["patient_id"] = g.patient_id;
    meta["label"] = g.label;
    meta["g"] = g.dim();
    meta["L"] = g.num_nodes();
    meta["E"] = g.num_edges();
    meta["images"] = io::json::array();
    for (const auto& im : g.images) {
        meta["images"].push_back(
            {{"image_id", im.image_id}, {"rows", im.rows}, {"cols", im.cols}, {"patch_side", im.patch_side}});
    }
    io::write_json(io::sidecar_path(path), meta);
}

PatchGraph read_graph(const std::filesystem::path& path) {
    std::filesystem::path bin = path;
    if (bin.extension() == ".json") {
        bin.replace_extension(".graph");
    }
    std::ifstream in(bin, std::ios::binary);
    if (!in) {
        throw ConfigError("cannot open graph " + bin.string());
    }
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw ConfigError(bin.string() + " is not a patch-graph file");
    }
    PatchGraph g;
    const auto L = get<std::uint32_t>(in), dim = get<std::uint32_t>(in), E = get<std::uint32_t>(in);
    g.Z.resize(L, dim);
    for (Eigen::Index i = 0; i < g.Z.size(); ++i) {
        g.Z.data()[i] = get<float>(in);
    }
    g.edges.resize(E);
    for (auto& e : g.edges) {
        e.first = get<std::uint32_t>(in);
        e.second = get<std::uint32_t>(in);
    }
    g.coords.resize(L);
    for (auto& c : g.coords) {
        c.image = get<std::int32_t>(in);
        c.row = get<std::int32_t>(in);
        c.col = get<std::int32_t>(in);
    }
    if (!in) {
        throw ConfigError("truncated graph file " + bin.string());
    }
    const io::json meta = io::read_json(io::sidecar_path(bin));
    g.patient_id = meta.at("patient_id").get<std::string>();
    g.label = meta.at("label").get<int>();
    for (const auto& im : meta.at("images")) {
        g.images.push_back({im.at("image_id").get<std::string>(), im.at("rows").get<int>(), im.at("cols").get<int>(),
                            im.at("patch_side").get<int>()});
    }
    if (!edges_well_formed(g)) {
        throw ConfigError("graph " + bin.string() + " has malformed edges");
    }
    return g;
}

} // namespace naronet::graph
