// Acceptance run: prints one PASS/FAIL line per criterion and exits nonzero on any failure.

#include "naronet/archsearch.hpp"
#include "naronet/bioinsights.hpp"
#include "naronet/clustering.hpp"
#include "naronet/pcl.hpp"
#include "naronet/pipeline.hpp"
#include "naronet/stats.hpp"
#include "naronet/synthcohort.hpp"
#include "oracles.hpp"
#include "support.hpp"
#include "tiff_fixture.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

using namespace naronet;
namespace fs = std::filesystem;

namespace {

struct Verdict {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), f, v);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

pipeline::RunConfig desk_run(const fs::path& out, const std::string& paradigm, std::uint64_t seed) {
    pipeline::RunConfig cfg;
    cfg.out = out;
    cfg.seed = seed;
    cfg.simulate.paradigm = paradigm;
    cfg.simulate.scale = synth::Scale::desk;
    cfg.simulate.per_group = 20;
    cfg.eval = pipeline::EvalMode::crossval_10;
    cfg.folds = 10;
    return cfg;
}

pipeline::RunConfig pmi1_run(const fs::path& root, std::uint64_t seed) {
    pipeline::RunConfig cfg = desk_run(root / "pmi1", "PMI1", seed);
    cfg.simulate.groups = synth::parse_group_list("I,III");
    return cfg;
}

// --- criterion 1 -----------------------------------------------------------------------

Verdict criterion1(const fs::path& root, std::uint64_t seed) {
    pipeline::RunConfig cfg = pmi1_run(root, seed);
    cfg.stages = {"simulate", "pcl-train", "embed", "graph", "crossval"};
    const auto t0 = std::chrono::steady_clock::now();
    pipeline::run_stages(cfg);
    const double secs = seconds_since(t0);
    const double acc = io::read_json(cfg.out / "results" / "summary.json")["accuracy"].get<double>();
    const unsigned cores = std::thread::hardware_concurrency();
    Verdict v;
    v.pass = acc >= 0.90 && secs <= 30.0 * 60.0;
    v.detail = "PMI1 I vs III 10-fold accuracy " + fmt("%.3f", acc) + " (need >= 0.90), wall " + fmt("%.0f", secs) +
               " s on " + std::to_string(cores) + " hardware threads (need <= 1800 s)";
    return v;
}

// --- criterion 2 -----------------------------------------------------------------------

Verdict criterion2(const fs::path& root, std::uint64_t seed) {
    pipeline::RunConfig cfg = desk_run(root / "cci1", "CCI1", seed);
    cfg.stages = {"simulate", "pcl-train", "embed", "graph", "crossval", "bioinsights"};
    pipeline::run_stages(cfg);
    const double acc = io::read_json(cfg.out / "results" / "summary.json")["accuracy"].get<double>();
    const io::json interp = io::read_json(cfg.out / "insights" / "interpretability.json");
    const double score = interp["cohort_score"].is_number() ? interp["cohort_score"].get<double>() : 0.0;
    Verdict v;
    v.pass = acc >= 0.75 && score >= 0.50;
    v.detail = "CCI1 3-group 10-fold accuracy " + fmt("%.3f", acc) + " (need >= 0.75), interpretability " +
               fmt("%.3f", score) + " (need >= 0.50)";
    return v;
}

// --- criterion 3 -----------------------------------------------------------------------

Verdict criterion3(const fs::path& root, std::uint64_t seed) {
    Rng rng(seed ^ 0x3333);
    double worst = 0.0;
    for (int b = 0; b < 200; ++b) {
        const Eigen::Index half = 1 + static_cast<Eigen::Index>(uniform_index(rng, 32));
        const Eigen::Index dim = 2 + static_cast<Eigen::Index>(uniform_index(rng, 16));
        const double tau = 0.1 + uniform01(rng);
        const Mat z = test::random_mat(2 * half, dim, rng);
        const double got = pcl::nt_xent_loss(ag::Var::constant(z), tau).scalar();
        worst = std::max(worst, std::abs(got - test::nt_xent_oracle(z, tau)));
    }

    // Held-out crops come from tissues the encoder never saw.
    pipeline::RunConfig cfg = pmi1_run(root, seed);
    const fs::path encoder = cfg.out / "pcl" / "encoder.bin";
    if (!fs::exists(encoder)) {
        cfg.stages = {"simulate", "pcl-train"};
        pipeline::run_stages(cfg);
    }
    const pcl::PCLModel model = pcl::load_pcl_model(encoder);
    const synth::ParadigmSpec spec =
        synth::restrict_groups(synth::build_paradigm("PMI1", synth::Scale::desk), cfg.simulate.groups);
    std::vector<MultiplexImage> held;
    for (int g = 0; g < spec.num_groups(); ++g) {
        for (int i = 0; i < 3; ++i) {
            synth::Tissue t = synth::simulate_tissue(spec, g, derive_seed(seed + 1000, {static_cast<std::uint64_t>(g),
                                                                                       static_cast<std::uint64_t>(i)}));
            pcl::apply_channel_stats(t.image, model.stats);
            held.push_back(std::move(t.image));
        }
    }
    const double acc = pcl::evaluate_contrast_accuracy(model, held, 8, seed + 2000);
    const double chance = 100.0 / (2.0 * model.config.crops_per_step - 1.0);

    Verdict v;
    v.pass = worst < 1e-6 && acc > 3.0 * chance;
    v.detail = "nt_xent max deviation " + fmt("%.2e", worst) + " over 200 batches (need < 1e-6), held-out contrast " +
               fmt("%.1f", acc) + "% vs 3x chance " + fmt("%.2f", 3.0 * chance) + "%";
    return v;
}

// --- criterion 4 -----------------------------------------------------------------------

Verdict criterion4(std::uint64_t seed) {
    const Mat s = (Mat(3, 2) << 0.2, 0.8, 0.6, 0.4, 0.9, 0.1).finished();
    const Mat pooled = core::pool_abundance(ag::Var::constant(s.array().log().matrix()), core::Activation::softmax, true)
                           .value();
    const bool example = std::abs(pooled(0, 0) - 1.5) < 1e-9 && std::abs(pooled(0, 1) - 0.8) < 1e-9;

    Rng rng(seed ^ 0x4444);
    double conservation = 0.0;
    bool bounds = true;
    for (int t = 0; t < 1000; ++t) {
        const Eigen::Index L = 1 + static_cast<Eigen::Index>(uniform_index(rng, 40));
        const Eigen::Index C = 2 + static_cast<Eigen::Index>(uniform_index(rng, 10));
        const Mat logits = test::random_mat(L, C, rng, std::exp(4.0 * uniform01(rng) - 2.0));
        const Mat sum_pooled = core::pool_abundance(ag::Var::constant(logits), core::Activation::softmax, false).value();
        conservation = std::max(conservation, std::abs(sum_pooled.sum() - static_cast<double>(L)));
        const double pe = core::patch_entropy_loss(ag::Var::constant(logits)).scalar();
        const Mat ab = test::random_uniform(1, C, rng) * 10.0 + Mat::Constant(1, C, 1e-9);
        const double pa = core::patient_entropy_loss(ag::Var::constant(ab)).scalar();
        const double orth = core::orthogonal_loss(ag::Var::constant(test::softmax_oracle(logits))).scalar();
        bounds = bounds && pe >= -1e-12 && pe <= 1.0 + 1e-12 && pa >= -1.0 - 1e-12 && pa <= 1e-12 && orth >= 0.0;
    }

    // Endpoints: uniform rows give entropy 1, one-hot rows 0; uniform abundance -1, a single TME 0;
    // orthogonal one-hot balanced assignments 0.
    const bool endpoints =
        std::abs(core::patch_entropy_loss(ag::Var::constant(Mat::Zero(4, 5))).scalar() - 1.0) < 1e-12 &&
        core::patch_entropy_loss(ag::Var::constant((Mat(2, 3) << 60, 0, 0, 0, 60, 0).finished())).scalar() < 1e-12 &&
        std::abs(core::patient_entropy_loss(ag::Var::constant(Mat::Constant(1, 6, 2.5))).scalar() + 1.0) < 1e-12 &&
        core::patient_entropy_loss(ag::Var::constant((Mat(1, 4) << 0, 5, 0, 0).finished())).scalar() == 0.0 &&
        core::orthogonal_loss(ag::Var::constant((Mat(4, 2) << 1, 0, 1, 0, 0, 1, 0, 1).finished())).scalar() < 1e-12;

    Verdict v;
    v.pass = example && conservation < 1e-5 && bounds && endpoints;
    v.detail = std::string("3x2 pooling ") + (example ? "(1.5, 0.8)" : "wrong") + ", conservation error " +
               fmt("%.1e", conservation) + ", bounds over 1000 fuzzed matrices " + (bounds ? "hold" : "violated") +
               ", endpoints " + (endpoints ? "exact" : "wrong");
    return v;
}

// --- criterion 5 -----------------------------------------------------------------------

Verdict criterion5(std::uint64_t seed) {
    Rng rng(seed ^ 0x5555);
    pcl::EmbeddedImage e;
    e.image_id = "img";
    e.rows = 3;
    e.cols = 4;
    e.patch_side = 10;
    e.embeddings = test::random_mat(12, 5, rng);
    const graph::PatchGraph g = graph::build_patch_graph(e, "p", 1);

    double worst = 0.0;
    for (const core::CollapseLoss collapse : {core::CollapseLoss::orthogonal, core::CollapseLoss::patient_entropy}) {
        core::ModelConfig cfg;
        cfg.P = 3;
        cfg.N = 3;
        cfg.A = 3;
        cfg.H = 8;
        cfg.lambdas = {1.0, 1.0, 1.0, 1.0, 1.0, 1.0};
        cfg.collapse = collapse;
        core::NaroNetModel model(cfg, 5, 2, seed);
        for (auto& [name, p] : model.params().items()) {
            p.mutable_value() = test::random_mat(p.value().rows(), p.value().cols(), rng, 0.5);
        }
        auto params = model.params().items();
        const auto r = test::gradient_check(params, [&] { return model.loss(model.forward(g), 1); });
        worst = std::max(worst, r.max_rel);
    }
    Verdict v;
    v.pass = worst < 1e-4;
    v.detail = "worst relative gradient error " + fmt("%.2e", worst) + " over all parameters (need < 1e-4)";
    return v;
}

// --- criterion 6 -----------------------------------------------------------------------

Verdict criterion6(std::uint64_t seed) {
    Rng rng(seed ^ 0x6666);
    double worst = 0.0;
    for (int t = 0; t < 100; ++t) {
        const int n = 1 + static_cast<int>(uniform_index(rng, 50));
        const int dim = 1 + static_cast<int>(uniform_index(rng, 6));
        const graph::PatchGraph g = test::random_graph(n, dim, uniform01(rng) * 0.5, rng);
        std::vector<Mat> ws;
        std::vector<ag::Var> vars;
        for (int k = 0; k < 3; ++k) {
            ws.push_back(test::random_mat(dim, dim, rng, 0.7));
            vars.push_back(ag::Var::constant(ws.back()));
        }
        for (const auto variant : {core::GnnVariant::plain, core::GnnVariant::residual}) {
            const Mat got = core::gnn_forward(ag::Var::constant(g.Z),
                                              core::propagation_matrix(g, core::Aggregation::mean_self_loop), vars, variant)
                                .value();
            const Mat want =
                test::dense_gnn(test::dense_mean_propagation(g), g.Z, ws, variant == core::GnnVariant::residual);
            worst = std::max(worst, (got - want).cwiseAbs().maxCoeff());
        }
    }

    graph::PatchGraph path;
    path.Z = (Mat(3, 1) << 1, 2, 3).finished();
    path.edges = {{0, 1}, {1, 0}, {1, 2}, {2, 1}};
    const Mat out = core::gnn_forward(ag::Var::constant(path.Z),
                                      core::propagation_matrix(path, core::Aggregation::mean_self_loop),
                                      {ag::Var::constant(Mat::Ones(1, 1))}, core::GnnVariant::plain)
                        .value();
    const bool path_ok =
        std::abs(out(0, 0) - 1.5) < 1e-12 && std::abs(out(1, 0) - 2.0) < 1e-12 && std::abs(out(2, 0) - 2.5) < 1e-12;

    Verdict v;
    v.pass = worst < 1e-6 && path_ok;
    v.detail = "edge-list vs dense max deviation " + fmt("%.2e", worst) + " on 100 graphs (need < 1e-6), path graph " +
               (path_ok ? "(1.5, 2, 2.5)" : "wrong");
    return v;
}

// --- criterion 7 -----------------------------------------------------------------------

Verdict criterion7(std::uint64_t seed) {
    const stats::MannWhitneyResult mw = stats::mann_whitney({0, 1, 2, 3, 4}, {5, 6, 7, 8, 9});
    const bool mwu = std::abs(mw.p - 2.0 / 252.0) < 1e-12;

    Rng rng(seed ^ 0x7777);
    core::ModelConfig mc;
    mc.P = 3;
    mc.N = 3;
    mc.A = 2;
    mc.H = 6;
    const int T = mc.P + mc.N + mc.A;
    double pir_dev = 0.0;
    for (int t = 0; t < 100; ++t) {
        core::NaroNetModel model(mc, 4, 3, static_cast<std::uint64_t>(t));
        const int tme = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(T)));
        Mat w = test::random_mat(T, 3, rng, 2.0);
        w.row(tme).setZero();
        for (auto& [name, p] : model.params().items()) {
            if (name == "cls.W") {
                p.mutable_value() = w;
            } else if (name == "cls.b") {
                p.mutable_value() = test::random_mat(1, 3, rng);
            }
        }
        const RowVec a = test::random_uniform(1, T, rng) * 5.0;
        pir_dev = std::max(pir_dev, std::abs(insights::pir(model, a, tme) - 1.0));
    }

    Mat block(20, 8);
    for (Eigen::Index p = 0; p < 20; ++p) {
        for (Eigen::Index c = 0; c < 8; ++c) {
            const bool hot = (p < 10) == (c < 4);
            block(p, c) = (hot ? 6.0 : 1.0) + 0.2 * uniform01(rng);
        }
    }
    const cluster::Subcategories sub = cluster::patient_subcategories(block);
    bool split = sub.k == 2;
    for (Eigen::Index p = 0; p < 20 && split; ++p) {
        split = (sub.labels[static_cast<std::size_t>(p)] == sub.labels[0]) == (p < 10);
    }

    Verdict v;
    v.pass = mwu && pir_dev < 1e-9 && split;
    v.detail = "MWU p " + fmt("%.6f", mw.p) + " (want 2/252), max |PIR - 1| " + fmt("%.1e", pir_dev) +
               " on 100 models, block PIR gives k=" + std::to_string(sub.k) + (split ? " matching the blocks" : "");
    return v;
}

// --- criterion 8 -----------------------------------------------------------------------

class ScoreRunner : public search::TrialRunner {
public:
    std::map<int, int> epochs_of;
    bool monotone = true;

    search::TrialScore advance(int id, const core::ModelConfig& c, int epochs, std::uint64_t) override {
        std::lock_guard<std::mutex> lock(mutex_);
        monotone = monotone && epochs > epochs_of[id];
        epochs_of[id] = epochs;
        search::TrialScore s;
        s.val_accuracy = std::min(1.0, 0.01 * c.H / 128.0 + 0.02 * c.P / 14.0 + (c.use_glore ? 0.03 : 0.0) +
                                           0.1 * c.lr + 0.001 * epochs);
        return s;
    }
    void release(int) override {}

private:
    std::mutex mutex_;
};

Verdict criterion8(std::uint64_t seed) {
    search::AshaOptions opt;
    opt.seed = seed;
    ScoreRunner ra, rb;
    const search::SearchResult a = search::asha_search(search::SearchSpace{}, ra, opt);
    const search::SearchResult b = search::asha_search(search::SearchSpace{}, rb, opt);

    std::vector<std::size_t> sizes;
    for (const auto& s : a.survivors) {
        sizes.push_back(s.size());
    }
    const bool shape = sizes == std::vector<std::size_t>{27, 9, 3, 1};

    bool offline = shape;
    for (int rung = 0; rung < 3 && offline; ++rung) {
        std::vector<search::TrialResult> rows;
        for (const auto& t : a.table) {
            if (t.rung == rung) {
                rows.push_back(t);
            }
        }
        std::sort(rows.begin(), rows.end(), [](const auto& x, const auto& y) {
            return x.val_accuracy != y.val_accuracy ? x.val_accuracy > y.val_accuracy : x.trial_id < y.trial_id;
        });
        std::vector<int> top;
        for (std::size_t i = 0; i < (rows.size() + 2) / 3; ++i) {
            top.push_back(rows[i].trial_id);
        }
        std::sort(top.begin(), top.end());
        offline = top == a.survivors[static_cast<std::size_t>(rung) + 1];
    }

    bool same = a.table.size() == b.table.size() && a.best_trial == b.best_trial;
    for (std::size_t i = 0; same && i < a.table.size(); ++i) {
        same = a.table[i].trial_id == b.table[i].trial_id && a.table[i].val_accuracy == b.table[i].val_accuracy &&
               a.table[i].config.to_json() == b.table[i].config.to_json();
    }

    std::string shape_text;
    for (std::size_t s : sizes) {
        shape_text += (shape_text.empty() ? "" : "/") + std::to_string(s);
    }
    Verdict v;
    v.pass = shape && offline && same && ra.monotone;
    v.detail = "survivors " + shape_text + ", promotion " + (offline ? "equals" : "differs from") +
               " offline sort, repeat run " + (same ? "identical" : "differs");
    return v;
}

// --- criterion 9 -----------------------------------------------------------------------

Verdict criterion9(const fs::path& root) {
    const fs::path dir = root / "ingest";
    fs::remove_all(dir);
    fs::create_directories(dir);
    const char* files[] = {"p1_a.tif", "p1_b.tif", "p2_a.tif", "p3_a.tif"};
    for (const char* f : files) {
        test::write_float_tiff(dir / f, 35, 16, 20);
    }
    {
        std::ofstream(dir / "images.csv") << "image,patient_id\np1_a.tif,P1\np1_b.tif,P1\np2_a.tif,P2\np3_a.tif,P3\n";
        std::ofstream(dir / "clinical.csv") << "patient_id,label\nP1,good\nP2,poor\nP3,good\n";
    }
    pipeline::RunConfig cfg;
    cfg.out = dir / "out";
    pipeline::run_ingest(cfg, dir / "images.csv", dir / "clinical.csv");
    const pipeline::CohortManifest m = pipeline::read_manifest(cfg.out / "cohort" / "manifest.json");
    bool ingest = m.patients.size() == 3 && m.num_images() == 4 && m.channel_names.size() == 35;
    for (const auto& p : m.patients) {
        for (const auto& ref : p.images) {
            const MultiplexImage img = pipeline::load_image(ref.path);
            ingest = ingest && img.channels == 35 && img.height == 16 && img.width == 20 &&
                     img.at(34, 15, 19) == test::fixture_pixel(34, 15, 19) && img.at(0, 0, 0) == 0.0f;
        }
    }

    const bool survival = pipeline::stratify_survival(174.0) == pipeline::RiskGroup::RI &&
                          pipeline::stratify_survival(1.0) == pipeline::RiskGroup::RIII;

    const std::vector<std::pair<double, double>> xy{{0, 0}, {1, 0}, {10, 0}, {11, 0}, {30, 0}};
    const graph::PatchGraph g = pipeline::cell_feature_graph(Mat::Identity(5, 5), xy, "p", 1, 1);
    const bool cells = graph::edges_well_formed(g) && g.num_nodes() == 5 && g.num_edges() == 6 && g.label == 1;

    Verdict v;
    v.pass = ingest && survival && cells;
    v.detail = std::string("35-channel 3-patient ingest ") + (ingest ? "round-trips" : "broken") + ", survival 174->" +
               pipeline::to_string(*pipeline::stratify_survival(174.0)) + " 1->" +
               pipeline::to_string(*pipeline::stratify_survival(1.0)) + ", cell graph " + (cells ? "ok" : "wrong");
    return v;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance checks"};
    fs::path out = fs::temp_directory_path() / "naronet_acceptance";
    std::vector<int> only;
    std::uint64_t seed = 1;
    app.add_option("--out", out, "working directory");
    app.add_option("--only", only, "criteria to run")->check(CLI::Range(1, 9));
    app.add_option("--seed", seed, "seed");
    CLI11_PARSE(app, argc, argv);

    const std::map<int, std::function<Verdict()>> criteria{
        {1, [&] { return criterion1(out, seed); }}, {2, [&] { return criterion2(out, seed); }},
        {3, [&] { return criterion3(out, seed); }}, {4, [&] { return criterion4(seed); }},
        {5, [&] { return criterion5(seed); }},      {6, [&] { return criterion6(seed); }},
        {7, [&] { return criterion7(seed); }},      {8, [&] { return criterion8(seed); }},
        {9, [&] { return criterion9(out); }},
    };
    const std::set<int> chosen(only.begin(), only.end());
    fs::create_directories(out);

    int failures = 0;
    for (const auto& [id, run] : criteria) {
        if (!chosen.empty() && !chosen.count(id)) {
            continue;
        }
        Verdict v;
        const auto t0 = std::chrono::steady_clock::now();
        try {
            v = run();
        } catch (const std::exception& e) {
            v.pass = false;
            v.detail = std::string("threw: ") + e.what();
        }
        failures += v.pass ? 0 : 1;
        std::printf("criterion %d %s: %s [%.1f s]\n", id, v.pass ? "PASS" : "FAIL", v.detail.c_str(), seconds_since(t0));
        std::fflush(stdout);
    }
    return failures == 0 ? 0 : 1;
}
