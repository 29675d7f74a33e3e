#include "naronet/io.hpp"
#include "naronet/synthcohort.hpp"
#include "support.hpp"

#include <doctest.h>

#include <fstream>
#include <numeric>
#include <sstream>

using namespace naronet;
using namespace naronet::synth;

namespace {

constexpr int ph4 = 3, ph5 = 4, ph6 = 5, mk6 = 5, nb2 = 1, nb3 = 2;

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    const double n = static_cast<double>(a.size());
    std::vector<double> ra(a.size()), rb(b.size());
    auto rank = [](const std::vector<double>& v, std::vector<double>& r) {
        std::vector<std::size_t> idx(v.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::sort(idx.begin(), idx.end(), [&](auto x, auto y) { return v[x] < v[y]; });
        for (std::size_t i = 0; i < idx.size(); ++i) {
            r[idx[i]] = static_cast<double>(i);
        }
    };
    rank(a, ra);
    rank(b, rb);
    double d2 = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        d2 += (ra[i] - rb[i]) * (ra[i] - rb[i]);
    }
    return 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
}

void check_partition(const Tissue& t) {
    const std::size_t pixels = static_cast<std::size_t>(t.image.height) * t.image.width;
    std::vector<int> cover(pixels, 0);
    std::size_t total = 0;
    for (const auto& m : t.masks) {
        REQUIRE(m.pixels.size() == pixels);
        for (std::size_t i = 0; i < pixels; ++i) {
            cover[i] += m.pixels[i];
        }
        total += m.area();
    }
    CHECK(total == pixels);
    CHECK(std::all_of(cover.begin(), cover.end(), [](int c) { return c == 1; }));
}

} // namespace

TEST_CASE("presets carry the published parameter values") {
    CHECK(paradigm_names().size() == 7);

    const ParadigmSpec pmi1 = build_paradigm("PMI1", Scale::paper);
    const double mk[] = {0.25, 0.50, 0.75};
    for (int g = 0; g < 3; ++g) {
        const TissueParams p = pmi1.resolve(g);
        CHECK(p.phenotypes[ph6].marker_means[mk6] == doctest::Approx(mk[g]));
        CHECK(p.neighborhoods[nb3].phenotype_abundance[ph6] == doctest::Approx(0.15));
        CHECK(p.height == 800);
        CHECK(p.width == 800);
    }
    CHECK(pmi1.per_group == 40);

    const ParadigmSpec cci1 = build_paradigm("CCI1", Scale::paper);
    const double inter[] = {-1.0, 0.0, 1.0};
    for (int g = 0; g < 3; ++g) {
        const TissueParams p = cci1.resolve(g);
        CHECK(p.neighborhoods[nb2].pairwise_interaction(ph4, ph5) == inter[g]);
        CHECK(p.neighborhoods[nb2].pairwise_interaction(ph5, ph4) == inter[g]);
        CHECK(p.neighborhoods[nb2].phenotype_abundance[ph4] == doctest::Approx(0.05));
        CHECK(p.neighborhoods[nb2].phenotype_abundance[ph5] == doctest::Approx(0.05));
    }

    const ParadigmSpec pf2 = build_paradigm("PF2", Scale::paper);
    const double pf[] = {0.0, 0.0012, 0.0025};
    for (int g = 0; g < 3; ++g) {
        CHECK(pf2.resolve(g).neighborhoods[nb3].phenotype_abundance[ph6] == doctest::Approx(pf[g]));
    }
}

TEST_CASE("desk scale shrinks the image and cohort but keeps the varied values") {
    for (const auto& name : paradigm_names()) {
        const ParadigmSpec paper = build_paradigm(name, Scale::paper);
        const ParadigmSpec desk = build_paradigm(name, Scale::desk);
        CHECK(desk.base.height == 200);
        CHECK(desk.per_group == 20);
        for (int g = 0; g < 3; ++g) {
            const TissueParams a = paper.resolve(g), b = desk.resolve(g);
            for (int n = 0; n < kNeighborhoods; ++n) {
                CHECK(a.neighborhoods[n].phenotype_abundance == b.neighborhoods[n].phenotype_abundance);
                CHECK(a.neighborhoods[n].pairwise_interaction == b.neighborhoods[n].pairwise_interaction);
                CHECK(a.neighborhoods[n].prevalence == b.neighborhoods[n].prevalence);
            }
            for (int p = 0; p < kPhenotypes; ++p) {
                CHECK(a.phenotypes[p].marker_means == b.phenotypes[p].marker_means);
            }
        }
    }
}

TEST_CASE("unknown preset lists the valid names") {
    try {
        build_paradigm("XYZ", Scale::desk);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        for (const auto& n : paradigm_names()) {
            CHECK(msg.find(n) != std::string::npos);
        }
    }
}

TEST_CASE("group lists and restriction") {
    CHECK(parse_group_list("I,III") == std::vector<int>{0, 2});
    CHECK_THROWS_AS(parse_group_list("IV"), ConfigError);
    const ParadigmSpec spec = restrict_groups(build_paradigm("PMI1", Scale::desk), {0, 2});
    CHECK(spec.num_groups() == 2);
    CHECK(spec.groups[1].name == "III");
    CHECK_THROWS_AS(restrict_groups(spec, {0}), ConfigError);
}

TEST_CASE("simplex-preserving setters") {
    ParadigmSpec spec = build_paradigm("CCI1", Scale::desk);
    NeighborhoodSpec nb = spec.base.neighborhoods[0];
    set_abundance(nb, 2, 0.4);
    CHECK(nb.phenotype_abundance[2] == doctest::Approx(0.4));
    CHECK(std::accumulate(nb.phenotype_abundance.begin(), nb.phenotype_abundance.end(), 0.0) == doctest::Approx(1.0));

    auto nbs = spec.base.neighborhoods;
    set_prevalence(nbs, 1, 0.5);
    double total = 0.0;
    for (const auto& n : nbs) {
        total += n.prevalence;
    }
    CHECK(nbs[1].prevalence == doctest::Approx(0.5));
    CHECK(total == doctest::Approx(1.0));
}

TEST_CASE("tissue invariants") {
    const ParadigmSpec spec = build_paradigm("CCI1", Scale::desk);

    SUBCASE("masks partition the image and cells lie in their neighborhood") {
        const Tissue t = simulate_tissue(spec, 1, 3);
        CHECK(t.image.height == 200);
        CHECK(t.image.channels == kMarkers);
        check_partition(t);
        for (const auto& c : t.cells) {
            const int x = std::clamp(static_cast<int>(c.x), 0, 199), y = std::clamp(static_cast<int>(c.y), 0, 199);
            CHECK(t.region[static_cast<std::size_t>(y) * 200 + x] == c.neighborhood);
        }
        for (float v : t.image.data) {
            REQUIRE(v >= 0.0f);
            REQUIRE(std::isfinite(v));
        }
    }
    SUBCASE("deterministic per seed") {
        const Tissue a = simulate_tissue(spec, 2, 11), b = simulate_tissue(spec, 2, 11), c = simulate_tissue(spec, 2, 12);
        CHECK(a.image.data == b.image.data);
        CHECK(a.region == b.region);
        CHECK(a.cells.size() == b.cells.size());
        CHECK(a.image.data != c.image.data);
    }
    SUBCASE("zero density gives background only") {
        TissueParams p = spec.resolve(0);
        p.cell_density = 0.0;
        const Tissue t = simulate_tissue(p, 5);
        CHECK(t.cells.empty());
        check_partition(t);
        double mean = 0.0;
        for (float v : t.image.data) {
            mean += v;
        }
        mean /= static_cast<double>(t.image.data.size());
        CHECK(mean < 0.05);
    }
    SUBCASE("impossible density is reported") {
        TissueParams p = spec.resolve(0);
        p.cell_density = 500.0;
        CHECK_THROWS_AS(simulate_tissue(p, 5), RuntimeError);
    }
}

TEST_CASE("paper-scale image size") {
    TissueParams p = build_paradigm("PMI1", Scale::paper).resolve(0);
    p.cell_density = 0.0;
    const Tissue t = simulate_tissue(p, 1);
    CHECK(t.image.height == 800);
    CHECK(t.image.width == 800);
    CHECK(t.image.channels == 6);
}

TEST_CASE("attraction brings Ph4 and Ph5 closer than repulsion") {
    const ParadigmSpec spec = build_paradigm("CCI1", Scale::desk);
    const double d_rep7 = mean_nearest_distance(simulate_tissue(spec, 0, 7).cells, ph4, ph5);
    const double d_att7 = mean_nearest_distance(simulate_tissue(spec, 2, 7).cells, ph4, ph5);
    CHECK(d_att7 < d_rep7);

    double rep = 0.0, att = 0.0;
    for (std::uint64_t s = 0; s < 20; ++s) {
        rep += mean_nearest_distance(simulate_tissue(spec, 0, 100 + s).cells, ph4, ph5);
        att += mean_nearest_distance(simulate_tissue(spec, 2, 100 + s).cells, ph4, ph5);
    }
    CHECK(att < rep);
}

TEST_CASE("realized counts increase with the abundance parameter") {
    const ParadigmSpec spec = build_paradigm("PF1", Scale::desk);
    std::vector<double> levels{0.05, 0.10, 0.20, 0.30, 0.45}, counts;
    for (double a : levels) {
        TissueParams p = spec.resolve(0);
        set_abundance(p.neighborhoods[nb3], ph6, a);
        double total = 0.0;
        for (std::uint64_t s = 0; s < 20; ++s) {
            const Tissue t = simulate_tissue(p, 200 + s);
            total += static_cast<double>(std::count_if(t.cells.begin(), t.cells.end(), [](const Cell& c) {
                return c.phenotype == ph6 && c.neighborhood == nb3;
            }));
        }
        counts.push_back(total / 20.0);
    }
    CHECK(spearman(levels, counts) > 0.9);
}

TEST_CASE("realization report") {
    SUBCASE("PF1 group III Ph6 fraction in Nb3") {
        const ParadigmSpec spec = build_paradigm("PF1", Scale::desk);
        const TissueParams p = spec.resolve(2);
        const Tissue t = simulate_tissue(p, 21);
        const auto report = validate_realization(t.cells, p);
        const auto& f = report.fraction(nb3, ph6);
        REQUIRE(f.measured.has_value());
        CHECK(std::abs(*f.measured - 0.60) <= 0.05);
        CHECK_FALSE(f.flagged);
    }
    SUBCASE("PMI1 group II Mk6 mean in Ph6") {
        const ParadigmSpec spec = build_paradigm("PMI1", Scale::desk);
        const TissueParams p = spec.resolve(1);
        const Tissue t = simulate_tissue(p, 22);
        const auto report = validate_realization(t.cells, p, &t.image);
        const auto& m = report.marker_mean(ph6, mk6);
        REQUIRE(m.measured.has_value());
        CHECK(std::abs(*m.measured - 0.50) <= 0.05);
    }
    SUBCASE("empty neighborhood is undefined and flagged") {
        const ParadigmSpec spec = build_paradigm("CCI1", Scale::desk);
        const TissueParams p = spec.resolve(0);
        std::vector<Cell> cells = simulate_tissue(p, 23).cells;
        std::erase_if(cells, [](const Cell& c) { return c.neighborhood == 3; });
        const auto report = validate_realization(cells, p);
        const auto& f = report.fraction(3, 2);
        CHECK_FALSE(f.measured.has_value());
        CHECK(f.flagged);
        CHECK_FALSE(report.ok());
    }
}

TEST_CASE("cohort simulation writes a deterministic manifest") {
    const auto dir = test::scratch_dir("cohort");
    const ParadigmSpec spec = build_paradigm("CCI1", Scale::desk);
    const SyntheticCohort a = simulate_cohort(spec, 5, 9, dir / "a");
    const SyntheticCohort b = simulate_cohort(spec, 5, 9, dir / "b");
    CHECK(a.patients.size() == 15);
    CHECK(slurp(dir / "a" / kManifestName) == slurp(dir / "b" / kManifestName));
    for (const auto& p : a.patients) {
        CHECK(std::filesystem::exists(dir / "a" / p.images.at(0)));
        CHECK(std::filesystem::exists(dir / "a" / p.cells));
        CHECK(p.masks.size() == kNeighborhoods);
    }
    CHECK(slurp(dir / "a" / a.patients[3].images[0]) == slurp(dir / "b" / b.patients[3].images[0]));
}

TEST_CASE("cohort sizes follow groups times patients") {
    const auto dir = test::scratch_dir("cohort_sizes");
    ParadigmSpec spec = build_paradigm("PMI1", Scale::desk);
    spec.base.cell_density = 1.0;
    CHECK(simulate_cohort(spec, 40, 1, dir / "all").patients.size() == 120);
    CHECK(simulate_cohort(restrict_groups(spec, {0, 2}), 40, 1, dir / "two").patients.size() == 80);
    CHECK_THROWS_AS(simulate_cohort(spec, 1, 1, dir / "one"), ConfigError);
}

TEST_CASE("restricting groups keeps each remaining patient's tissue") {
    const auto dir = test::scratch_dir("cohort_restrict");
    const ParadigmSpec spec = build_paradigm("PMI1", Scale::desk);
    const SyntheticCohort full = simulate_cohort(spec, 2, 4, dir / "full");
    const SyntheticCohort part = simulate_cohort(restrict_groups(spec, {2, 1}), 2, 4, dir / "part");
    CHECK(full.patients[4].seed == part.patients[0].seed);
}

TEST_CASE("cell table and mask round trip") {
    const auto dir = test::scratch_dir("cells");
    const Tissue t = simulate_tissue(build_paradigm("PF1", Scale::desk), 1, 8);
    write_cell_table(dir / "cells.csv", t.cells);
    const auto back = read_cell_table(dir / "cells.csv");
    REQUIRE(back.size() == t.cells.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
        CHECK(back[i].id == t.cells[i].id);
        CHECK(back[i].phenotype == t.cells[i].phenotype);
        CHECK(back[i].neighborhood == t.cells[i].neighborhood);
        CHECK(back[i].x == doctest::Approx(t.cells[i].x).epsilon(1e-6));
    }
    write_mask(dir / "m.png", t.masks[1]);
    const GroundTruthMask m = read_mask(dir / "m.png", 1);
    CHECK(m.pixels == t.masks[1].pixels);
}
