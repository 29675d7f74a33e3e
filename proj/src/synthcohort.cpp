#include "naronet/synthcohort.hpp"

#include "naronet/parallel.hpp"
#include "naronet/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <queue>
#include <random>
#include <sstream>

namespace naronet::synth {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr std::uint8_t kUnclaimed = 255;
// Minimum centre distance between two cells, as a fraction of their summed radii.
constexpr double kHardcoreFactor = 0.9;
constexpr double kInhibitionFactor = 3.0;
constexpr int kMaxPlacementTries = 2000;
constexpr int kMaxAttractionTries = 100;

std::string phenotype_id(int i) { return "Ph" + std::to_string(i + 1); }
std::string neighborhood_id(int i) { return "Nb" + std::to_string(i + 1); }

int parse_indexed_id(const std::string& s, const std::string& prefix, int count) {
    if (s.rfind(prefix, 0) == 0) {
        try {
            const int v = std::stoi(s.substr(prefix.size())) - 1;
            if (v >= 0 && v < count) {
                return v;
            }
        } catch (const std::exception&) {
        }
    }
    throw ConfigError("expected " + prefix + "1.." + prefix + std::to_string(count) + ", got '" + s + "'");
}

TissueParams base_tissue(Scale scale) {
    TissueParams p;
    const std::vector<std::vector<double>> means = {
        {0.8, 0.1, 0.1, 0.1, 0.1, 0.0},   // Ph1
        {0.1, 0.8, 0.1, 0.1, 0.1, 0.0},   // Ph2
        {0.1, 0.1, 0.8, 0.1, 0.1, 0.0},   // Ph3
        {0.1, 0.1, 0.1, 0.9, 0.1, 0.0},   // Ph4
        {0.1, 0.1, 0.1, 0.1, 0.9, 0.0},   // Ph5
        {0.5, 0.1, 0.1, 0.1, 0.1, 0.75},  // Ph6
        {0.5, 0.5, 0.1, 0.1, 0.1, 0.0},   // Ph7
        {0.1, 0.5, 0.5, 0.1, 0.1, 0.0},   // Ph8
    };
    const std::vector<double> radius = {2.5, 2.5, 2.5, 3.0, 3.0, 2.5, 2.5, 2.5};
    const std::vector<double> ecc = {0.3, 0.5, 0.3, 0.2, 0.2, 0.4, 0.6, 0.6};
    for (int i = 0; i < kPhenotypes; ++i) {
        p.phenotypes.push_back({phenotype_id(i), means[i], 0.05, radius[i], ecc[i]});
    }
    const std::vector<std::vector<double>> abundance = {
        {0.55, 0.20, 0.00, 0.00, 0.00, 0.00, 0.25, 0.00},  // Nb1
        {0.20, 0.00, 0.50, 0.05, 0.05, 0.00, 0.00, 0.20},  // Nb2
        {0.00, 0.45, 0.00, 0.00, 0.00, 0.15, 0.00, 0.40},  // Nb3
        {0.00, 0.00, 0.30, 0.00, 0.00, 0.00, 0.40, 0.30},  // Nb4
    };
    const std::vector<double> prevalence = {0.30, 0.30, 0.25, 0.15};
    for (int n = 0; n < kNeighborhoods; ++n) {
        p.neighborhoods.push_back(
            {neighborhood_id(n), abundance[n], Mat::Zero(kPhenotypes, kPhenotypes), prevalence[n]});
    }
    p.neighborhood_interaction = Mat::Zero(kNeighborhoods, kNeighborhoods);
    p.height = p.width = scale == Scale::paper ? 800 : 200;
    return p;
}

GroupOverride named_group(int index) {
    static const char* names[] = {"I", "II", "III"};
    GroupOverride g;
    g.name = names[index];
    g.source_index = index;
    return g;
}

} // namespace

void TissueParams::validate() const {
    if (static_cast<int>(phenotypes.size()) != kPhenotypes || static_cast<int>(neighborhoods.size()) != kNeighborhoods) {
        throw ConfigError("tissue needs 8 phenotypes and 4 neighborhoods");
    }
    if (height <= 0 || width <= 0 || cell_density < 0.0 || background_sigma < 0.0 || region_scale_px <= 0.0) {
        throw ConfigError("invalid tissue geometry or density");
    }
    for (const auto& ph : phenotypes) {
        if (static_cast<int>(ph.marker_means.size()) != kMarkers) {
            throw ConfigError(ph.id + ": marker_means must have one entry per marker");
        }
        if (ph.radius_px <= 0.0 || ph.marker_stddev < 0.0 || ph.eccentricity < 0.0 || ph.eccentricity >= 1.0) {
            throw ConfigError(ph.id + ": invalid radius, stddev or eccentricity");
        }
    }
    double total_prevalence = 0.0;
    for (const auto& nb : neighborhoods) {
        if (static_cast<int>(nb.phenotype_abundance.size()) != kPhenotypes) {
            throw ConfigError(nb.id + ": abundance must have one entry per phenotype");
        }
        const double s = std::accumulate(nb.phenotype_abundance.begin(), nb.phenotype_abundance.end(), 0.0);
        if (std::abs(s - 1.0) > 1e-9) {
            throw ConfigError(nb.id + ": phenotype abundance must sum to 1");
        }
        if (nb.pairwise_interaction.rows() != kPhenotypes || nb.pairwise_interaction.cols() != kPhenotypes ||
            !nb.pairwise_interaction.isApprox(nb.pairwise_interaction.transpose()) ||
            nb.pairwise_interaction.cwiseAbs().maxCoeff() > 1.0) {
            throw ConfigError(nb.id + ": pairwise interaction must be symmetric 8x8 in [-1, 1]");
        }
        if (nb.prevalence < 0.0 || nb.prevalence > 1.0) {
            throw ConfigError(nb.id + ": prevalence outside [0, 1]");
        }
        total_prevalence += nb.prevalence;
    }
    if (total_prevalence <= 0.0) {
        throw ConfigError("neighborhood prevalences sum to zero");
    }
}

void set_abundance(NeighborhoodSpec& nb, int phenotype, double value) {
    if (value < 0.0 || value > 1.0) {
        throw ConfigError("abundance outside [0, 1]");
    }
    auto& a = nb.phenotype_abundance;
    double others = 0.0;
    for (int i = 0; i < static_cast<int>(a.size()); ++i) {
        if (i != phenotype) {
            others += a[i];
        }
    }
    for (int i = 0; i < static_cast<int>(a.size()); ++i) {
        if (i != phenotype && others > 0.0) {
            a[i] *= (1.0 - value) / others;
        }
    }
    a[phenotype] = value;
}

void set_prevalence(std::vector<NeighborhoodSpec>& nbs, int neighborhood, double value) {
    double others = 0.0;
    for (int i = 0; i < static_cast<int>(nbs.size()); ++i) {
        if (i != neighborhood) {
            others += nbs[i].prevalence;
        }
    }
    for (int i = 0; i < static_cast<int>(nbs.size()); ++i) {
        if (i != neighborhood && others > 0.0) {
            nbs[i].prevalence *= (1.0 - value) / others;
        }
    }
    nbs[neighborhood].prevalence = value;
}

Scale parse_scale(std::string_view s) {
    if (s == "paper") {
        return Scale::paper;
    }
    if (s == "desk") {
        return Scale::desk;
    }
    throw ConfigError("unknown scale '" + std::string(s) + "' (expected paper or desk)");
}

std::string to_string(Scale s) { return s == Scale::paper ? "paper" : "desk"; }

TissueParams ParadigmSpec::resolve(int group) const {
    if (group < 0 || group >= num_groups()) {
        throw ConfigError("group index " + std::to_string(group) + " outside [0, " + std::to_string(num_groups()) + ")");
    }
    TissueParams p = base;
    const GroupOverride& g = groups[group];
    for (const auto& o : g.prevalences) {
        set_prevalence(p.neighborhoods, o.neighborhood, o.value);
    }
    for (const auto& o : g.abundances) {
        set_abundance(p.neighborhoods[o.neighborhood], o.phenotype, o.value);
    }
    for (const auto& o : g.markers) {
        p.phenotypes[o.phenotype].marker_means[o.marker] = o.value;
    }
    for (const auto& o : g.cell_interactions) {
        auto& m = p.neighborhoods[o.neighborhood].pairwise_interaction;
        m(o.phenotype_a, o.phenotype_b) = o.value;
        m(o.phenotype_b, o.phenotype_a) = o.value;
    }
    for (const auto& o : g.neighborhood_interactions) {
        p.neighborhood_interaction(o.neighborhood_a, o.neighborhood_b) = o.value;
        p.neighborhood_interaction(o.neighborhood_b, o.neighborhood_a) = o.value;
    }
    return p;
}

io::json ParadigmSpec::to_json() const {
    io::json j;
    j["name"] = name;
    j["scale"] = to_string(scale);
    j["per_group"] = per_group;
    j["varied_parameter"] = varied_parameter;
    j["image_size"] = {base.height, base.width};
    j["cell_density"] = base.cell_density;
    j["background_sigma"] = base.background_sigma;
    j["region_scale_px"] = base.region_scale_px;
    for (int n : relevant_neighborhoods) {
        j["relevant_neighborhoods"].push_back(neighborhood_id(n));
    }
    for (const auto& ph : base.phenotypes) {
        j["phenotypes"].push_back({{"id", ph.id},
                                   {"marker_means", ph.marker_means},
                                   {"marker_stddev", ph.marker_stddev},
                                   {"radius_px", ph.radius_px},
                                   {"eccentricity", ph.eccentricity}});
    }
    for (const auto& nb : base.neighborhoods) {
        j["neighborhoods"].push_back(
            {{"id", nb.id}, {"phenotype_abundance", nb.phenotype_abundance}, {"prevalence", nb.prevalence}});
    }
    for (const auto& g : groups) {
        io::json gj{{"name", g.name}};
        for (const auto& o : g.markers) {
            gj["markers"].push_back({{"phenotype", phenotype_id(o.phenotype)},
                                     {"marker", "Mk" + std::to_string(o.marker + 1)},
                                     {"value", o.value}});
        }
        for (const auto& o : g.abundances) {
            gj["abundances"].push_back({{"neighborhood", neighborhood_id(o.neighborhood)},
                                        {"phenotype", phenotype_id(o.phenotype)},
                                        {"value", o.value}});
        }
        for (const auto& o : g.cell_interactions) {
            gj["cell_interactions"].push_back({{"neighborhood", neighborhood_id(o.neighborhood)},
                                               {"a", phenotype_id(o.phenotype_a)},
                                               {"b", phenotype_id(o.phenotype_b)},
                                               {"value", o.value}});
        }
        for (const auto& o : g.neighborhood_interactions) {
            gj["neighborhood_interactions"].push_back({{"a", neighborhood_id(o.neighborhood_a)},
                                                       {"b", neighborhood_id(o.neighborhood_b)},
                                                       {"value", o.value}});
        }
        for (const auto& o : g.prevalences) {
            gj["prevalences"].push_back({{"neighborhood", neighborhood_id(o.neighborhood)}, {"value", o.value}});
        }
        j["groups"].push_back(gj);
    }
    return j;
}

const std::vector<std::string>& paradigm_names() {
    static const std::vector<std::string> names = {"PMI1", "PMI2", "PF1", "PF2", "CCI1", "CCI2", "NNI1"};
    return names;
}

ParadigmSpec build_paradigm(std::string_view name, Scale scale) {
    constexpr int ph4 = 3, ph5 = 4, ph6 = 5, mk6 = 5, nb2 = 1, nb3 = 2;
    ParadigmSpec spec;
    spec.name = std::string(name);
    spec.scale = scale;
    spec.base = base_tissue(scale);
    spec.per_group = scale == Scale::paper ? 40 : 20;
    for (int g = 0; g < 3; ++g) {
        spec.groups.push_back(named_group(g));
    }

    if (name == "PMI1" || name == "PMI2") {
        set_abundance(spec.base.neighborhoods[nb3], ph6, name == "PMI1" ? 0.15 : 0.0025);
        const double levels[] = {0.25, 0.50, 0.75};
        for (int g = 0; g < 3; ++g) {
            spec.groups[g].markers.push_back({ph6, mk6, levels[g]});
        }
        spec.relevant_neighborhoods = {nb3};
        spec.varied_parameter = "Mk6 expression in Ph6";
    } else if (name == "PF1" || name == "PF2") {
        const double pf1[] = {0.0, 0.30, 0.60};
        const double pf2[] = {0.0, 0.0012, 0.0025};
        for (int g = 0; g < 3; ++g) {
            spec.groups[g].abundances.push_back({nb3, ph6, name == "PF1" ? pf1[g] : pf2[g]});
        }
        spec.relevant_neighborhoods = {nb3};
        spec.varied_parameter = "Ph6 abundance in Nb3";
    } else if (name == "CCI1" || name == "CCI2") {
        const double a = name == "CCI1" ? 0.05 : 0.01;
        set_abundance(spec.base.neighborhoods[nb2], ph4, a);
        set_abundance(spec.base.neighborhoods[nb2], ph5, a);
        const double levels[] = {-1.0, 0.0, 1.0};
        for (int g = 0; g < 3; ++g) {
            spec.groups[g].cell_interactions.push_back({nb2, ph4, ph5, levels[g]});
        }
        spec.relevant_neighborhoods = {nb2};
        spec.varied_parameter = "Ph4-Ph5 interaction in Nb2";
    } else if (name == "NNI1") {
        // Nb1 and Nb4 share the remaining 70% in their original 2:1 ratio.
        const double prevalence[] = {0.70 * 2.0 / 3.0, 0.15, 0.15, 0.70 / 3.0};
        for (int n = 0; n < kNeighborhoods; ++n) {
            spec.base.neighborhoods[n].prevalence = prevalence[n];
        }
        const double levels[] = {-1.0, 0.0, 1.0};
        for (int g = 0; g < 3; ++g) {
            spec.groups[g].neighborhood_interactions.push_back({nb2, nb3, levels[g]});
        }
        spec.relevant_neighborhoods = {nb2, nb3};
        spec.varied_parameter = "Nb2-Nb3 interaction";
    } else {
        std::string valid;
        for (const auto& n : paradigm_names()) {
            valid += (valid.empty() ? "" : ", ") + n;
        }
        throw ConfigError("unknown paradigm '" + std::string(name) + "'; valid presets: " + valid);
    }
    spec.base.validate();
    return spec;
}

ParadigmSpec restrict_groups(const ParadigmSpec& spec, const std::vector<int>& groups) {
    if (groups.size() < 2) {
        throw ConfigError("a cohort needs at least two groups");
    }
    ParadigmSpec out = spec;
    out.groups.clear();
    for (int g : groups) {
        if (g < 0 || g >= spec.num_groups()) {
            throw ConfigError("group index out of range");
        }
        for (const auto& kept : out.groups) {
            if (kept.source_index == spec.groups[g].source_index) {
                throw ConfigError("duplicate group in restriction");
            }
        }
        out.groups.push_back(spec.groups[g]);
    }
    return out;
}

std::vector<int> parse_group_list(std::string_view s) {
    std::vector<int> out;
    std::stringstream ss{std::string(s)};
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item == "I" || item == "1") {
            out.push_back(0);
        } else if (item == "II" || item == "2") {
            out.push_back(1);
        } else if (item == "III" || item == "3") {
            out.push_back(2);
        } else {
            throw ConfigError("unknown group '" + item + "' (expected I, II or III)");
        }
    }
    return out;
}

std::size_t GroundTruthMask::area() const {
    return static_cast<std::size_t>(std::count(pixels.begin(), pixels.end(), std::uint8_t{1}));
}

namespace {

std::vector<std::size_t> quotas_for(const TissueParams& p) {
    const std::size_t total = static_cast<std::size_t>(p.height) * p.width;
    double psum = 0.0;
    for (const auto& nb : p.neighborhoods) {
        psum += nb.prevalence;
    }
    std::vector<std::size_t> q(p.neighborhoods.size());
    std::vector<std::pair<double, std::size_t>> remainders;
    std::size_t assigned = 0;
    for (std::size_t n = 0; n < q.size(); ++n) {
        const double exact = p.neighborhoods[n].prevalence / psum * static_cast<double>(total);
        q[n] = static_cast<std::size_t>(std::floor(exact));
        assigned += q[n];
        remainders.emplace_back(exact - std::floor(exact), n);
    }
    std::stable_sort(remainders.begin(), remainders.end(), [](auto a, auto b) { return a.first > b.first; });
    for (std::size_t i = 0; assigned < total; ++i, ++assigned) {
        ++q[remainders[i % remainders.size()].second];
    }
    return q;
}

/// Multi-source randomized region growth with per-neighborhood pixel quotas.
std::vector<std::uint8_t> grow_regions(const TissueParams& p, Rng& rng) {
    const int H = p.height, W = p.width;
    const std::size_t total = static_cast<std::size_t>(H) * W;
    const int nn = static_cast<int>(p.neighborhoods.size());
    const auto quota = quotas_for(p);
    const double blob_area = p.region_scale_px * p.region_scale_px;
    const Mat& inter = p.neighborhood_interaction;

    struct Seed {
        double x, y;
    };
    std::vector<std::vector<Seed>> seeds(nn);
    for (int n = 0; n < nn; ++n) {
        if (quota[n] == 0) {
            continue;
        }
        const int count = std::max(1, static_cast<int>(std::lround(static_cast<double>(quota[n]) / blob_area)));
        for (int s = 0; s < count; ++s) {
            Seed pos{uniform01(rng) * W, uniform01(rng) * H};
            for (int a = 0; a < n; ++a) {
                const double v = inter(a, n);
                if (v > 0.0 && !seeds[a].empty() && uniform01(rng) < v) {
                    const Seed& anchor = seeds[a][uniform_index(rng, seeds[a].size())];
                    const double ang = 2.0 * kPi * uniform01(rng);
                    const double d = p.region_scale_px * (0.5 + 0.5 * uniform01(rng));
                    pos = {std::clamp(anchor.x + d * std::cos(ang), 0.0, W - 1e-6),
                           std::clamp(anchor.y + d * std::sin(ang), 0.0, H - 1e-6)};
                } else if (v < 0.0 && !seeds[a].empty() && uniform01(rng) < -v) {
                    const double min_d = 1.5 * p.region_scale_px;
                    for (int tries = 0; tries < 50; ++tries) {
                        bool clear = true;
                        for (const auto& other : seeds[a]) {
                            if (std::hypot(other.x - pos.x, other.y - pos.y) < min_d) {
                                clear = false;
                                break;
                            }
                        }
                        if (clear) {
                            break;
                        }
                        pos = {uniform01(rng) * W, uniform01(rng) * H};
                    }
                }
            }
            seeds[n].push_back(pos);
        }
    }

    std::vector<std::uint8_t> label(total, kUnclaimed);
    std::vector<std::size_t> count(nn, 0);

    struct Entry {
        double priority;
        std::size_t pixel;
        int nb;
        bool forced;
        bool operator>(const Entry& o) const {
            if (priority != o.priority) {
                return priority > o.priority;
            }
            return pixel > o.pixel;
        }
    };
    std::priority_queue<Entry, std::vector<Entry>, std::greater<>> pq;
    for (int n = 0; n < nn; ++n) {
        for (const auto& s : seeds[n]) {
            const std::size_t px = static_cast<std::size_t>(s.y) * W + static_cast<std::size_t>(s.x);
            pq.push({0.0, px, n, false});
        }
    }

    // A pixel may not join nb when it touches a neighborhood that nb repels.
    auto forbidden = [&](std::size_t px, int nb) {
        const int y = static_cast<int>(px / W), x = static_cast<int>(px % W);
        const int dy[] = {-1, 1, 0, 0}, dx[] = {0, 0, -1, 1};
        for (int k = 0; k < 4; ++k) {
            const int yy = y + dy[k], xx = x + dx[k];
            if (yy < 0 || yy >= H || xx < 0 || xx >= W) {
                continue;
            }
            const std::uint8_t m = label[static_cast<std::size_t>(yy) * W + xx];
            if (m != kUnclaimed && m != nb && inter(nb, m) <= -1.0) {
                return true;
            }
        }
        return false;
    };

    std::vector<std::size_t> order(total);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    std::size_t scan = 0;
    std::size_t claimed = 0;

    while (claimed < total) {
        while (!pq.empty()) {
            const Entry e = pq.top();
            pq.pop();
            if (label[e.pixel] != kUnclaimed || count[e.nb] >= quota[e.nb]) {
                continue;
            }
            if (!e.forced && forbidden(e.pixel, e.nb)) {
                continue;
            }
            label[e.pixel] = static_cast<std::uint8_t>(e.nb);
            ++count[e.nb];
            ++claimed;
            const int y = static_cast<int>(e.pixel / W), x = static_cast<int>(e.pixel % W);
            const int dy[] = {-1, 1, 0, 0}, dx[] = {0, 0, -1, 1};
            for (int k = 0; k < 4; ++k) {
                const int yy = y + dy[k], xx = x + dx[k];
                if (yy >= 0 && yy < H && xx >= 0 && xx < W) {
                    const std::size_t q = static_cast<std::size_t>(yy) * W + xx;
                    if (label[q] == kUnclaimed) {
                        pq.push({e.priority + 1.0 + 2.0 * uniform01(rng), q, e.nb, false});
                    }
                }
            }
        }
        if (claimed == total) {
            break;
        }
        // Growth is blocked: re-seed the neighborhood furthest from its quota.
        int best = -1;
        std::size_t best_left = 0;
        for (int n = 0; n < nn; ++n) {
            const std::size_t left = quota[n] - count[n];
            if (left > best_left) {
                best_left = left;
                best = n;
            }
        }
        if (best < 0) {
            throw std::logic_error("region growth: quotas exhausted with unclaimed pixels");
        }
        std::size_t candidate = total;
        bool forced = true;
        for (int tries = 0; tries < 20; ++tries) {
            while (label[order[scan]] != kUnclaimed) {
                ++scan;
            }
            // Sample among the unclaimed tail so repeated re-seeds spread out.
            const std::size_t pick = scan + uniform_index(rng, total - scan);
            const std::size_t px = label[order[pick]] == kUnclaimed ? order[pick] : order[scan];
            if (!forbidden(px, best)) {
                candidate = px;
                forced = false;
                break;
            }
            candidate = px;
        }
        pq.push({0.0, candidate, best, forced});
    }
    return label;
}

class SpatialIndex {
public:
    SpatialIndex(int height, int width, double cell) : cell_(cell) {
        cols_ = static_cast<int>(std::ceil(width / cell)) + 1;
        rows_ = static_cast<int>(std::ceil(height / cell)) + 1;
        buckets_.resize(static_cast<std::size_t>(cols_) * rows_);
    }

    void add(int id, double x, double y) { buckets_[bucket(x, y)].push_back(id); }

    template <typename Fn>
    bool any_within(double x, double y, double r, Fn&& pred) const {
        const int c0 = std::max(0, static_cast<int>((x - r) / cell_));
        const int c1 = std::min(cols_ - 1, static_cast<int>((x + r) / cell_));
        const int r0 = std::max(0, static_cast<int>((y - r) / cell_));
        const int r1 = std::min(rows_ - 1, static_cast<int>((y + r) / cell_));
        for (int rr = r0; rr <= r1; ++rr) {
            for (int cc = c0; cc <= c1; ++cc) {
                for (int id : buckets_[static_cast<std::size_t>(rr) * cols_ + cc]) {
                    if (pred(id)) {
                        return true;
                    }
                }
            }
        }
        return false;
    }

private:
    std::size_t bucket(double x, double y) const {
        const int c = std::clamp(static_cast<int>(x / cell_), 0, cols_ - 1);
        const int r = std::clamp(static_cast<int>(y / cell_), 0, rows_ - 1);
        return static_cast<std::size_t>(r) * cols_ + c;
    }

    double cell_;
    int cols_ = 0, rows_ = 0;
    std::vector<std::vector<int>> buckets_;
};

/// Expected count floor(a*n) plus a Bernoulli draw of the fractional part; the most
/// abundant phenotype absorbs the slack so counts sum to n.
std::vector<int> phenotype_counts(const std::vector<double>& abundance, int n, Rng& rng) {
    std::vector<int> counts(abundance.size(), 0);
    int total = 0;
    for (std::size_t k = 0; k < abundance.size(); ++k) {
        const double e = abundance[k] * n;
        counts[k] = static_cast<int>(std::floor(e));
        if (uniform01(rng) < e - std::floor(e)) {
            ++counts[k];
        }
        total += counts[k];
    }
    const auto dominant =
        static_cast<std::size_t>(std::max_element(abundance.begin(), abundance.end()) - abundance.begin());
    counts[dominant] += n - total;
    if (counts[dominant] < 0) {
        // Only reachable when rounding pushes many rare phenotypes up; trim them instead.
        int excess = -counts[dominant];
        counts[dominant] = 0;
        for (std::size_t k = 0; k < counts.size() && excess > 0; ++k) {
            const int take = std::min(counts[k], excess);
            counts[k] -= take;
            excess -= take;
        }
    }
    return counts;
}

void place_cells(const TissueParams& p, const std::vector<std::uint8_t>& region, Rng& rng, std::vector<Cell>& cells) {
    const int H = p.height, W = p.width;
    const int nn = static_cast<int>(p.neighborhoods.size());
    std::vector<std::vector<std::size_t>> pixels(nn);
    for (std::size_t i = 0; i < region.size(); ++i) {
        pixels[region[i]].push_back(i);
    }
    double max_r = 0.0;
    for (const auto& ph : p.phenotypes) {
        max_r = std::max(max_r, ph.radius_px * 1.15);
    }
    SpatialIndex index(H, W, std::max(4.0, 2.0 * max_r));
    std::size_t requested = 0;

    for (int n = 0; n < nn; ++n) {
        const auto& nb = p.neighborhoods[n];
        const int n_cells =
            static_cast<int>(std::lround(p.cell_density * static_cast<double>(pixels[n].size()) / 1000.0));
        if (n_cells == 0) {
            continue;
        }
        requested += static_cast<std::size_t>(n_cells);
        const auto counts = phenotype_counts(nb.phenotype_abundance, n_cells, rng);
        const Mat& inter = nb.pairwise_interaction;

        // Followers interact with a lower-index phenotype. Anchors go first, then followers,
        // then everything else fills the remaining space.
        std::vector<int> anchors, followers, free_cells;
        for (int k = 0; k < kPhenotypes; ++k) {
            bool follower = false, anchor = false;
            for (int a = 0; a < kPhenotypes; ++a) {
                follower = follower || (a < k && inter(a, k) != 0.0);
                anchor = anchor || (a > k && inter(k, a) != 0.0);
            }
            for (int c = 0; c < counts[k]; ++c) {
                (follower ? followers : anchor ? anchors : free_cells).push_back(k);
            }
        }
        std::shuffle(anchors.begin(), anchors.end(), rng);
        std::shuffle(free_cells.begin(), free_cells.end(), rng);
        std::vector<int> sequence = anchors;
        sequence.insert(sequence.end(), followers.begin(), followers.end());
        sequence.insert(sequence.end(), free_cells.begin(), free_cells.end());
        const std::size_t first_in_neighborhood = cells.size();

        std::vector<std::vector<int>> by_phenotype(kPhenotypes);
        for (int k : sequence) {
            const auto& ph = p.phenotypes[k];
            const double r = ph.radius_px * (0.85 + 0.3 * uniform01(rng));

            int attract_to = -1;
            std::vector<int> repel_from;
            for (int a = 0; a < k; ++a) {
                const double v = inter(a, k);
                if (v > 0.0 && !by_phenotype[a].empty() && uniform01(rng) < v) {
                    attract_to = a;
                } else if (v < 0.0 && uniform01(rng) < -v) {
                    repel_from.push_back(a);
                }
            }

            auto acceptable = [&](double x, double y) {
                if (x < 0.0 || y < 0.0 || x >= W || y >= H) {
                    return false;
                }
                if (region[static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x)] != n) {
                    return false;
                }
                const bool overlaps = index.any_within(x, y, kHardcoreFactor * (r + max_r), [&](int id) {
                    const Cell& o = cells[id];
                    const double ro = (o.semi_major + o.semi_minor) / 2.0;
                    return std::hypot(o.x - x, o.y - y) < kHardcoreFactor * (r + ro);
                });
                if (overlaps) {
                    return false;
                }
                for (int a : repel_from) {
                    const double inhibit = kInhibitionFactor * std::max(p.phenotypes[a].radius_px, ph.radius_px);
                    const bool near = index.any_within(x, y, inhibit, [&](int id) {
                        return cells[id].phenotype == a && std::hypot(cells[id].x - x, cells[id].y - y) < inhibit;
                    });
                    if (near) {
                        return false;
                    }
                }
                return true;
            };

            bool placed = false;
            double x = 0.0, y = 0.0;
            if (attract_to >= 0) {
                const auto& anchors = by_phenotype[attract_to];
                for (int t = 0; t < kMaxAttractionTries && !placed; ++t) {
                    const Cell& anchor = cells[anchors[uniform_index(rng, anchors.size())]];
                    const double ra = (anchor.semi_major + anchor.semi_minor) / 2.0;
                    // Contact distance up to a one-radius gap.
                    const double d = kHardcoreFactor * (ra + r) + uniform01(rng) * (std::max(ra, r) + 0.1 * (ra + r));
                    const double ang = 2.0 * kPi * uniform01(rng);
                    x = anchor.x + d * std::cos(ang);
                    y = anchor.y + d * std::sin(ang);
                    placed = acceptable(x, y);
                }
            }
            for (int t = 0; t < kMaxPlacementTries && !placed; ++t) {
                const std::size_t px = pixels[n][uniform_index(rng, pixels[n].size())];
                x = static_cast<double>(px % W) + uniform01(rng);
                y = static_cast<double>(px / W) + uniform01(rng);
                placed = acceptable(x, y);
            }
            if (!placed) {
                const double area_kpx = static_cast<double>(pixels[n].size()) / 1000.0;
                std::ostringstream msg;
                msg << "hardcore placement failed in " << nb.id << " after " << kMaxPlacementTries
                    << " retries; achieved density " << static_cast<double>(cells.size() - first_in_neighborhood) / area_kpx
                    << " cells/kpx of requested " << p.cell_density;
                throw RuntimeError(msg.str());
            }

            Cell c;
            c.id = static_cast<int>(cells.size());
            c.x = x;
            c.y = y;
            c.phenotype = k;
            c.neighborhood = n;
            const double squash = std::pow(1.0 - ph.eccentricity * ph.eccentricity, 0.25);
            c.semi_major = r / squash;
            c.semi_minor = r * squash;
            c.angle = kPi * uniform01(rng);
            index.add(c.id, x, y);
            by_phenotype[k].push_back(c.id);
            cells.push_back(std::move(c));
        }
    }
    (void)requested;
}

template <typename Fn>
void for_each_footprint_pixel(const Cell& c, int H, int W, Fn&& fn) {
    const double a = c.semi_major, b = c.semi_minor;
    const double ca = std::cos(c.angle), sa = std::sin(c.angle);
    const int x0 = std::max(0, static_cast<int>(std::floor(c.x - a)));
    const int x1 = std::min(W - 1, static_cast<int>(std::ceil(c.x + a)));
    const int y0 = std::max(0, static_cast<int>(std::floor(c.y - a)));
    const int y1 = std::min(H - 1, static_cast<int>(std::ceil(c.y + a)));
    const int cx = std::clamp(static_cast<int>(c.x), 0, W - 1);
    const int cy = std::clamp(static_cast<int>(c.y), 0, H - 1);
    for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
            const double dx = x + 0.5 - c.x, dy = y + 0.5 - c.y;
            const double u = dx * ca + dy * sa, v = -dx * sa + dy * ca;
            if ((u * u) / (a * a) + (v * v) / (b * b) <= 1.0 || (x == cx && y == cy)) {
                fn(y, x);
            }
        }
    }
}

void render(const TissueParams& p, std::vector<Cell>& cells, Rng& cell_rng, Rng& noise_rng, MultiplexImage& img) {
    for (auto& c : cells) {
        const auto& ph = p.phenotypes[c.phenotype];
        std::normal_distribution<double> jitter(0.0, ph.marker_stddev);
        c.intensity.resize(kMarkers);
        for (int m = 0; m < kMarkers; ++m) {
            const double v = ph.marker_means[m] + (ph.marker_stddev > 0.0 ? jitter(cell_rng) : 0.0);
            c.intensity[m] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
        for_each_footprint_pixel(c, p.height, p.width, [&](int y, int x) {
            for (int m = 0; m < kMarkers; ++m) {
                float& px = img.at(m, y, x);
                px = std::max(px, c.intensity[m]);
            }
        });
    }
    if (p.background_sigma > 0.0) {
        std::normal_distribution<double> noise(0.0, p.background_sigma);
        for (auto& v : img.data) {
            v = static_cast<float>(std::max(0.0, static_cast<double>(v) + noise(noise_rng)));
        }
    }
}

} // namespace

Tissue simulate_tissue(const TissueParams& params, std::uint64_t seed) {
    params.validate();
    Rng region_rng(derive_seed(seed, {1})), cell_rng(derive_seed(seed, {2})), render_rng(derive_seed(seed, {3})),
        noise_rng(derive_seed(seed, {4}));
    Tissue t;
    t.region = grow_regions(params, region_rng);
    place_cells(params, t.region, cell_rng, t.cells);
    t.image = MultiplexImage(params.height, params.width, kMarkers);
    render(params, t.cells, render_rng, noise_rng, t.image);
    for (int n = 0; n < kNeighborhoods; ++n) {
        GroundTruthMask m;
        m.neighborhood = n;
        m.height = params.height;
        m.width = params.width;
        m.pixels.resize(t.region.size());
        for (std::size_t i = 0; i < t.region.size(); ++i) {
            m.pixels[i] = t.region[i] == n ? 1 : 0;
        }
        t.masks.push_back(std::move(m));
    }
    return t;
}

Tissue simulate_tissue(const ParadigmSpec& spec, int group, std::uint64_t seed) {
    return simulate_tissue(spec.resolve(group), seed);
}

void write_cell_table(const std::filesystem::path& path, const std::vector<Cell>& cells) {
    io::CsvWriter w(path, {"cell_id", "x", "y", "phenotype", "neighborhood"});
    for (const auto& c : cells) {
        w.row({std::to_string(c.id), io::format_number(c.x), io::format_number(c.y), phenotype_id(c.phenotype),
               neighborhood_id(c.neighborhood)});
    }
}

std::vector<Cell> read_cell_table(const std::filesystem::path& path) {
    const auto t = io::read_csv(path);
    const int ci = t.column("cell_id"), xi = t.column("x"), yi = t.column("y"), pi = t.column("phenotype"),
              ni = t.column("neighborhood");
    if (ci < 0 || xi < 0 || yi < 0 || pi < 0 || ni < 0) {
        throw ConfigError(path.string() + ": cell table needs cell_id, x, y, phenotype, neighborhood");
    }
    std::vector<Cell> cells;
    for (const auto& r : t.rows) {
        Cell c;
        c.id = std::stoi(r[ci]);
        c.x = std::stod(r[xi]);
        c.y = std::stod(r[yi]);
        c.phenotype = parse_indexed_id(r[pi], "Ph", kPhenotypes);
        c.neighborhood = parse_indexed_id(r[ni], "Nb", kNeighborhoods);
        cells.push_back(c);
    }
    return cells;
}

void write_mask(const std::filesystem::path& path, const GroundTruthMask& mask) {
    std::vector<std::uint8_t> px(mask.pixels.size());
    std::transform(mask.pixels.begin(), mask.pixels.end(), px.begin(),
                   [](std::uint8_t v) { return static_cast<std::uint8_t>(v ? 255 : 0); });
    io::write_png_gray(path, mask.height, mask.width, px);
}

GroundTruthMask read_mask(const std::filesystem::path& path, int neighborhood) {
    GroundTruthMask m;
    m.neighborhood = neighborhood;
    m.pixels = io::read_png_gray(path, m.height, m.width);
    for (auto& v : m.pixels) {
        v = v > 127 ? 1 : 0;
    }
    return m;
}

SyntheticCohort simulate_cohort(const ParadigmSpec& spec, int per_group, std::uint64_t seed,
                                const std::filesystem::path& out_dir) {
    if (per_group < 2) {
        throw ConfigError("per_group must be at least 2");
    }
    io::ensure_directory(out_dir);
    for (const char* sub : {"images", "masks", "cells"}) {
        io::ensure_directory(out_dir / sub);
    }

    SyntheticCohort cohort;
    cohort.root = out_dir;
    cohort.paradigm = spec.name;
    cohort.seed = seed;
    for (int g = 0; g < spec.num_groups(); ++g) {
        cohort.label_names.push_back(spec.groups[g].name);
        for (int i = 0; i < per_group; ++i) {
            PatientRecord r;
            char id[64];
            std::snprintf(id, sizeof(id), "%s_%s_%03d", spec.name.c_str(), spec.groups[g].name.c_str(), i + 1);
            r.patient_id = id;
            r.label = g;
            r.group_name = spec.groups[g].name;
            r.seed = derive_seed(seed, {static_cast<std::uint64_t>(spec.groups[g].source_index),
                                        static_cast<std::uint64_t>(i)});
            r.images = {"images/" + r.patient_id + ".raw"};
            for (int n = 0; n < kNeighborhoods; ++n) {
                r.masks.emplace_back(neighborhood_id(n), "masks/" + r.patient_id + "_" + neighborhood_id(n) + ".png");
            }
            r.cells = "cells/" + r.patient_id + "_cells.csv";
            cohort.patients.push_back(std::move(r));
        }
    }

    const io::json spec_json = spec.to_json();
    parallel_for(cohort.patients.size(), [&](std::size_t i) {
        const PatientRecord& r = cohort.patients[i];
        const Tissue t = simulate_tissue(spec, r.label, r.seed);
        io::json extra{{"image_id", r.patient_id}, {"patient_id", r.patient_id}};
        extra["provenance"] = io::provenance(r.seed, spec_json);
        io::write_image(out_dir / r.images.front(), t.image, extra);
        for (int n = 0; n < kNeighborhoods; ++n) {
            write_mask(out_dir / r.masks[n].second, t.masks[n]);
        }
        write_cell_table(out_dir / r.cells, t.cells);
    });

    io::json manifest;
    manifest["format"] = "naronet-cohort";
    manifest["version"] = 1;
    manifest["paradigm"] = spec.name;
    manifest["scale"] = to_string(spec.scale);
    manifest["seed"] = seed;
    manifest["per_group"] = per_group;
    manifest["label_names"] = cohort.label_names;
    manifest["channel_names"] = default_channel_names(kMarkers);
    manifest["relevant_masks"] = spec_json["relevant_neighborhoods"];
    manifest["spec"] = spec_json;
    manifest["provenance"] = io::provenance(seed, spec_json);
    for (const auto& r : cohort.patients) {
        io::json pj{{"patient_id", r.patient_id}, {"label", r.label}, {"group", r.group_name},
                    {"seed", r.seed},             {"images", r.images}, {"cells", r.cells}};
        for (const auto& [nb, path] : r.masks) {
            pj["masks"][nb] = path;
        }
        manifest["patients"].push_back(pj);
    }
    io::write_json(out_dir / kManifestName, manifest);
    return cohort;
}

bool RealizationReport::ok() const {
    return std::none_of(fractions.begin(), fractions.end(), [](const auto& f) { return f.flagged; }) &&
           std::none_of(marker_means.begin(), marker_means.end(), [](const auto& m) { return m.flagged; });
}

const RealizationReport::Fraction& RealizationReport::fraction(int neighborhood, int phenotype) const {
    for (const auto& f : fractions) {
        if (f.neighborhood == neighborhood && f.phenotype == phenotype) {
            return f;
        }
    }
    throw std::out_of_range("no such fraction entry");
}

const RealizationReport::MarkerMean& RealizationReport::marker_mean(int phenotype, int marker) const {
    for (const auto& m : marker_means) {
        if (m.phenotype == phenotype && m.marker == marker) {
            return m;
        }
    }
    throw std::out_of_range("no such marker entry");
}

RealizationReport validate_realization(const std::vector<Cell>& cells, const TissueParams& params,
                                       const MultiplexImage* image, double fraction_tolerance,
                                       double marker_tolerance) {
    RealizationReport rep;
    std::vector<std::vector<int>> counts(kNeighborhoods, std::vector<int>(kPhenotypes, 0));
    std::vector<int> totals(kNeighborhoods, 0);
    for (const auto& c : cells) {
        ++counts[c.neighborhood][c.phenotype];
        ++totals[c.neighborhood];
    }
    for (int n = 0; n < kNeighborhoods; ++n) {
        for (int k = 0; k < kPhenotypes; ++k) {
            RealizationReport::Fraction f{n, k, params.neighborhoods[n].phenotype_abundance[k], std::nullopt, true};
            if (totals[n] > 0) {
                f.measured = static_cast<double>(counts[n][k]) / totals[n];
                f.flagged = std::abs(*f.measured - f.expected) > fraction_tolerance;
            }
            rep.fractions.push_back(f);
        }
    }
    if (image) {
        std::vector<std::vector<double>> sums(kPhenotypes, std::vector<double>(kMarkers, 0.0));
        std::vector<std::size_t> pixels(kPhenotypes, 0);
        for (const auto& c : cells) {
            if (c.semi_major <= 0.0) {
                continue;
            }
            for_each_footprint_pixel(c, image->height, image->width, [&](int y, int x) {
                for (int m = 0; m < kMarkers; ++m) {
                    sums[c.phenotype][m] += image->at(m, y, x);
                }
                ++pixels[c.phenotype];
            });
        }
        for (int k = 0; k < kPhenotypes; ++k) {
            for (int m = 0; m < kMarkers; ++m) {
                RealizationReport::MarkerMean mm{k, m, params.phenotypes[k].marker_means[m], std::nullopt, false};
                if (pixels[k] > 0) {
                    mm.measured = sums[k][m] / static_cast<double>(pixels[k]);
                    mm.flagged = std::abs(*mm.measured - mm.expected) > marker_tolerance;
                }
                rep.marker_means.push_back(mm);
            }
        }
    }
    return rep;
}

double mean_nearest_distance(const std::vector<Cell>& cells, int from_phenotype, int to_phenotype) {
    std::vector<const Cell*> from, to;
    for (const auto& c : cells) {
        if (c.phenotype == from_phenotype) {
            from.push_back(&c);
        }
        if (c.phenotype == to_phenotype) {
            to.push_back(&c);
        }
    }
    if (from.empty() || to.empty()) {
        return std::numeric_limits<double>::quiet_NaN();
    }
    double total = 0.0;
    for (const Cell* a : from) {
        double best = std::numeric_limits<double>::infinity();
        for (const Cell* b : to) {
            if (a != b) {
                best = std::min(best, std::hypot(a->x - b->x, a->y - b->y));
            }
        }
        total += best;
    }
    return total / static_cast<double>(from.size());
}

} // namespace naronet::synth
