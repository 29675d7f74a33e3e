#include "naronet/bioinsights.hpp"
#include "naronet/graphbuild.hpp"
#include "support.hpp"

#include <doctest.h>

#include <fstream>
#include <sstream>

using namespace naronet;
using namespace naronet::insights;

namespace {

core::ModelConfig tiny_config() {
    core::ModelConfig cfg;
    cfg.P = 3;
    cfg.N = 3;
    cfg.A = 2;
    cfg.H = 6;
    return cfg;
}

ag::Var& param(core::NaroNetModel& m, const std::string& name) {
    for (auto& [n, v] : m.params().items()) {
        if (n == name) {
            return v;
        }
    }
    throw std::runtime_error("no parameter " + name);
}

/// One patient per 2x2-patch image of side 10, with matching raw images.
struct Fixture {
    std::vector<graph::PatchGraph> graphs;
    std::vector<std::vector<MultiplexImage>> images;
};

Fixture fixture(int per_group, std::uint64_t seed) {
    Rng rng(seed);
    Fixture f;
    for (int label = 0; label < 2; ++label) {
        for (int i = 0; i < per_group; ++i) {
            MultiplexImage img(10, 10, 3, {"CD3", "CD8", "Ki67"});
            for (auto& v : img.data) {
                v = static_cast<float>(uniform01(rng));
            }
            pcl::EmbeddedImage e;
            e.image_id = "img" + std::to_string(label) + std::to_string(i);
            e.rows = 2;
            e.cols = 2;
            e.patch_side = 5;
            e.embeddings = test::random_mat(4, 4, rng);
            e.embeddings.col(label).array() += 2.0;
            f.graphs.push_back(graph::build_patch_graph(e, "pat" + std::to_string(label) + std::to_string(i), label));
            f.images.push_back({img});
        }
    }
    return f;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

} // namespace

TEST_CASE("TME naming and lookup") {
    const auto cfg = tiny_config();
    CHECK(tme_name(cfg, 0) == "P1");
    CHECK(tme_name(cfg, 3) == "N1");
    CHECK(tme_name(cfg, 7) == "A2");
    CHECK(tme_ref(cfg, 5).level == Level::neighborhood);
    CHECK(tme_ref(cfg, 5).index == 2);
    CHECK_THROWS_AS(tme_ref(cfg, 8), ConfigError);
}

TEST_CASE("a TME with no classifier weight has PIR 1") {
    Rng rng(101);
    for (int t = 0; t < 100; ++t) {
        core::NaroNetModel model(tiny_config(), 4, 3, static_cast<std::uint64_t>(t));
        const int tme = static_cast<int>(uniform_index(rng, 8));
        Mat w = test::random_mat(8, 3, rng, 2.0);
        w.row(tme).setZero();
        param(model, "cls.W").mutable_value() = w;
        param(model, "cls.b").mutable_value() = test::random_mat(1, 3, rng);
        const RowVec a = test::random_uniform(1, 8, rng) * 5.0;
        REQUIRE(pir(model, a, tme) == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("PIR of a TME that halves the predicted probability is 2") {
    core::NaroNetModel model(tiny_config(), 4, 2, 1);
    Mat w = Mat::Zero(8, 2);
    w(4, 0) = 40.0;
    param(model, "cls.W").mutable_value() = w;
    RowVec a = RowVec::Zero(8);
    a(4) = 1.0;
    a(0) = 3.0;
    CHECK(pir(model, a, 4) == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(pir(model, a, 0) == doctest::Approx(1.0).epsilon(1e-12));
    const Mat m = pir_matrix(model, Mat(a));
    CHECK(m(0, 4) == doctest::Approx(2.0).epsilon(1e-12));
    CHECK_THROWS_AS(pir(model, a, 8), ConfigError);
}

TEST_CASE("PIR becomes +inf when ablation drives the probability to zero") {
    core::NaroNetModel model(tiny_config(), 4, 2, 1);
    Mat w = Mat::Zero(8, 2);
    w(2, 0) = 4000.0;
    param(model, "cls.W").mutable_value() = w;
    param(model, "cls.b").mutable_value() = (Mat(1, 2) << 0.0, 2000.0).finished();
    RowVec a = RowVec::Zero(8);
    a(2) = 1.0;
    const double v = pir(model, a, 2);
    CHECK(v == kInfinitePir);
    Mat m = Mat::Ones(2, 3);
    m(0, 1) = kInfinitePir;
    m(1, 2) = 4.0;
    const Mat f = finite_pir(m);
    CHECK(f(0, 1) == 4.0);
    CHECK(finite_pir(Mat::Constant(1, 2, kInfinitePir)) == Mat::Ones(1, 2));
}

TEST_CASE("ablation test") {
    Rng rng(102);
    core::NaroNetModel model(tiny_config(), 4, 2, 3);
    Mat w = test::random_mat(8, 2, rng);
    w.row(1).setZero();
    w(6, 0) = 6.0;
    w(6, 1) = -6.0;
    param(model, "cls.W").mutable_value() = w;
    Mat ab = test::random_uniform(20, 8, rng);
    ab.col(6).array() += 1.0;

    const AblationResult idle = ablation_test(model, ab, 1);
    CHECK(idle.p == 1.0);
    CHECK(idle.mean_drop == 0.0);
    CHECK_FALSE(idle.predictive);

    const AblationResult hit = ablation_test(model, ab, 6);
    CHECK(hit.p < 0.01);
    CHECK(hit.mean_drop > 0.0);
    CHECK(hit.predictive);
    CHECK_THROWS_AS(ablation_test(model, ab, 9), ConfigError);
}

TEST_CASE("group abundance tests") {
    Mat ab(10, 2);
    for (int i = 0; i < 10; ++i) {
        ab(i, 0) = i;
        ab(i, 1) = i % 2;
    }
    const std::vector<int> labels{0, 0, 0, 0, 0, 1, 1, 1, 1, 1};
    const auto r = abundance_group_test(ab, labels);
    REQUIRE(r.size() == 2);
    CHECK(r[0].p == doctest::Approx(2.0 / 252.0));
    CHECK(r[0].median_a == 2.0);
    CHECK(r[0].median_b == 7.0);
    CHECK(r[1].p > 0.5);
    CHECK(r[0].p_adjusted == r[0].p);
    const auto adj = abundance_group_test(ab, labels, true);
    CHECK(adj[0].p_adjusted == doctest::Approx(2.0 * 2.0 / 252.0));
    CHECK_THROWS_AS(abundance_group_test(ab.topRows(4), {0, 0, 1, 1}), ConfigError);
    CHECK_THROWS_AS(abundance_group_test(ab, std::vector<int>(10, 0)), ConfigError);
}

TEST_CASE("interpretability score") {
    const std::vector<std::uint8_t> tme{1, 1, 0, 0, 1, 1, 0, 0};
    CHECK(interpretability(tme, {1, 1, 1, 1, 1, 1, 0, 0}) == 1.0);
    CHECK(interpretability(tme, {1, 0, 0, 0, 0, 1, 1, 1}) == 0.5);
    CHECK(std::isnan(interpretability(std::vector<std::uint8_t>(8, 0), tme)));
    CHECK_THROWS_AS(interpretability(tme, {1}), ConfigError);
}

TEST_CASE("cohort analysis, rasters and interpretability scores") {
    const Fixture f = fixture(3, 103);
    Rng rng(104);
    core::NaroNetModel model(tiny_config(), 4, 2, 5);
    param(model, "cls.W").mutable_value() = test::random_mat(8, 2, rng);
    const CohortAnalysis a = analyze_cohort(model, f.graphs);
    REQUIRE(a.ids.size() == 6);
    for (std::size_t p = 0; p < 6; ++p) {
        const auto fw = model.forward(f.graphs[p]);
        CHECK((a.abundances.row(static_cast<Eigen::Index>(p)) - fw.abundance.value()).cwiseAbs().maxCoeff() < 1e-12);
        const Mat sa = core::activate(fw.s_a, model.config().activation).value();
        for (std::size_t l = 0; l < 4; ++l) {
            Eigen::Index best;
            sa.row(a.patch_neighborhood[p][l]).maxCoeff(&best);
            CHECK(a.patch_area[p][l] == best);
        }
    }

    const int t = a.patch_phenotype[0][3];
    const auto raster = tme_raster(f.graphs[0], a, 0, model.config(), t, 0, 10, 10);
    CHECK(raster[9 * 10 + 9] == 1);
    int covered = 0;
    for (std::size_t l = 0; l < 4; ++l) {
        covered += a.patch_phenotype[0][l] == t ? 25 : 0;
    }
    CHECK(std::count(raster.begin(), raster.end(), 1) == covered);

    const Mat pir = pir_matrix(model, a.abundances);
    std::vector<std::vector<std::vector<std::uint8_t>>> truth;
    std::vector<std::vector<std::pair<int, int>>> sizes;
    for (std::size_t p = 0; p < 6; ++p) {
        truth.push_back({std::vector<std::uint8_t>(100, 1)});
        sizes.push_back({{10, 10}});
    }
    const auto r = interpretability_scores(model, f.graphs, a, pir, truth, sizes);
    CHECK(r.per_image.size() == 6);
    for (std::size_t p = 0; p < 6; ++p) {
        Eigen::Index best;
        finite_pir(pir.row(static_cast<Eigen::Index>(p))).row(0).maxCoeff(&best);
        CHECK(r.selected_tme[p] == best);
    }
    CHECK((std::isnan(r.cohort) || r.cohort == 1.0));
}

TEST_CASE("marker heatmap has one row per TME and z-scored columns") {
    const Fixture f = fixture(3, 105);
    core::NaroNetModel model(tiny_config(), 4, 2, 6);
    const CohortAnalysis a = analyze_cohort(model, f.graphs);
    const Mat h = tme_marker_heatmap(model, f.graphs, a, f.images);
    CHECK(h.rows() == 8);
    CHECK(h.cols() == 3);
    for (Eigen::Index c = 0; c < 3; ++c) {
        CHECK(std::abs(h.col(c).mean()) < 1e-9);
    }
}

TEST_CASE("report files are complete and reproducible") {
    const Fixture f = fixture(4, 106);
    Rng rng(107);
    core::NaroNetModel model(tiny_config(), 4, 2, 7);
    param(model, "cls.W").mutable_value() = test::random_mat(8, 2, rng);
    const auto a = test::scratch_dir("reports_a");
    const auto b = test::scratch_dir("reports_b");
    emit_reports(model, f.graphs, f.images, a, {2, false, 9});
    emit_reports(model, f.graphs, f.images, b, {2, false, 9});
    for (const char* name : {"heatmap.csv", "abundance.csv", "roc.csv", "pr.csv", "confusion.csv", "group_tests.csv",
                             "ablation.csv", "pir.csv", "subcategories.csv", "summary.json", "gallery/index.json"}) {
        INFO(name);
        REQUIRE(std::filesystem::exists(a / name));
        CHECK(slurp(a / name) == slurp(b / name));
    }
    const auto index = io::json::parse(slurp(a / "gallery" / "index.json"));
    CHECK_FALSE(index.empty());
    for (const auto& entry : index) {
        CHECK(entry["rank"].get<int>() <= 2);
        CHECK(std::filesystem::exists(a / "gallery" / entry["file"].get<std::string>()));
    }
    const auto summary = io::json::parse(slurp(a / "summary.json"));
    CHECK(summary["tmes"].size() == 8);
    CHECK(summary["provenance"]["seed"] == 9);
}
