#include "naronet/archsearch.hpp"
#include "support.hpp"

#include <doctest.h>

#include <algorithm>
#include <map>
#include <mutex>

using namespace naronet;
using namespace naronet::search;

namespace {

/// Scores a configuration without training; remembers every call.
class FakeRunner : public TrialRunner {
public:
    std::function<double(const core::ModelConfig&, int epochs)> accuracy;
    std::map<int, int> epochs_of;
    std::map<int, int> calls;
    std::vector<int> released;

    TrialScore advance(int id, const core::ModelConfig& cfg, int epochs, std::uint64_t) override {
        std::lock_guard<std::mutex> lock(mutex_);
        REQUIRE(epochs > epochs_of[id]);
        epochs_of[id] = epochs;
        ++calls[id];
        TrialScore s;
        s.val_accuracy = accuracy(cfg, epochs);
        return s;
    }
    void release(int id) override {
        std::lock_guard<std::mutex> lock(mutex_);
        released.push_back(id);
    }

private:
    std::mutex mutex_;
};

double config_score(const core::ModelConfig& c, int epochs) {
    const double base = 0.01 * c.H / 128.0 + 0.02 * c.P / 14.0 + (c.use_glore ? 0.03 : 0.0) + 0.1 * c.lr;
    return std::min(1.0, base + 0.001 * epochs);
}

std::vector<graph::PatchGraph> separable_cohort(int per_class, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<graph::PatchGraph> out;
    for (int c = 0; c < 2; ++c) {
        for (int i = 0; i < per_class; ++i) {
            graph::PatchGraph g = test::random_graph(10, 3, 0.3, rng, c);
            g.patient_id = "p" + std::to_string(c) + "_" + std::to_string(i);
            g.Z = test::random_mat(10, 3, rng, 0.1);
            g.Z.col(c).array() += 1.0;
            out.push_back(std::move(g));
        }
    }
    return out;
}

core::ModelConfig small_model() {
    core::ModelConfig c;
    c.P = 3;
    c.N = 3;
    c.A = 2;
    c.H = 8;
    c.lr = 0.02;
    c.batch_size = 4;
    return c;
}

} // namespace

TEST_CASE("promotion keeps the top third with ties to the lower id") {
    std::vector<TrialResult> rs(7);
    const double acc[] = {0.5, 0.9, 0.7, 0.9, 0.1, 0.7, 0.2};
    for (int i = 0; i < 7; ++i) {
        rs[i].trial_id = 10 + i;
        rs[i].val_accuracy = acc[i];
    }
    CHECK(promote(rs, 3) == std::vector<int>{11, 12, 13});
    rs[1].diverged = true;
    CHECK(promote(rs, 3) == std::vector<int>{12, 13, 15});
    CHECK(promote(rs, 7) == std::vector<int>{13});
    CHECK(promote({}, 3).empty());
}

TEST_CASE("27 trials with eta 3 leave 27, 9, 3 and 1 alive") {
    FakeRunner runner;
    runner.accuracy = config_score;
    AshaOptions opt;
    opt.seed = 4;
    const SearchResult r = asha_search(SearchSpace{}, runner, opt);
    REQUIRE(r.survivors.size() == 4);
    CHECK(r.survivors[0].size() == 27);
    CHECK(r.survivors[1].size() == 9);
    CHECK(r.survivors[2].size() == 3);
    CHECK(r.survivors[3].size() == 1);
    CHECK(r.table.size() == 27 + 9 + 3);
    CHECK(r.best_trial == r.survivors[3].front());
    CHECK(r.total_epochs == 27 * 5 + 9 * 10 + 3 * 30);

    long calls = 0;
    for (const auto& [id, n] : runner.calls) {
        calls += n;
    }
    CHECK(calls == 39);
    CHECK(runner.released.size() == 27);

    SUBCASE("each rung promotes what an offline sort would") {
        for (int rung = 0; rung < 3; ++rung) {
            std::vector<TrialResult> rows;
            for (const auto& t : r.table) {
                if (t.rung == rung) {
                    rows.push_back(t);
                }
            }
            std::sort(rows.begin(), rows.end(), [](const TrialResult& a, const TrialResult& b) {
                return a.val_accuracy != b.val_accuracy ? a.val_accuracy > b.val_accuracy : a.trial_id < b.trial_id;
            });
            std::vector<int> top;
            for (std::size_t i = 0; i < (rows.size() + 2) / 3; ++i) {
                top.push_back(rows[i].trial_id);
            }
            std::sort(top.begin(), top.end());
            CHECK(r.survivors[static_cast<std::size_t>(rung) + 1] == top);
        }
    }
    SUBCASE("the winner has the best final-rung accuracy") {
        for (const auto& t : r.table) {
            if (t.rung == 2) {
                CHECK(t.val_accuracy <= r.best_accuracy);
            }
        }
        CHECK(r.best_config.epochs == 45);
    }
}

TEST_CASE("search is deterministic per seed") {
    FakeRunner a, b, c;
    a.accuracy = b.accuracy = c.accuracy = config_score;
    AshaOptions opt;
    opt.seed = 17;
    const auto ra = asha_search(SearchSpace{}, a, opt);
    const auto rb = asha_search(SearchSpace{}, b, opt);
    REQUIRE(ra.table.size() == rb.table.size());
    for (std::size_t i = 0; i < ra.table.size(); ++i) {
        CHECK(ra.table[i].trial_id == rb.table[i].trial_id);
        CHECK(ra.table[i].seed == rb.table[i].seed);
        CHECK(ra.table[i].config.to_json() == rb.table[i].config.to_json());
    }
    opt.seed = 18;
    const auto rc = asha_search(SearchSpace{}, c, opt);
    CHECK(rc.table.front().config.to_json() != ra.table.front().config.to_json());
}

TEST_CASE("a dominant configuration wins") {
    SearchSpace space;
    space.hidden = {16, 128};
    FakeRunner runner;
    runner.accuracy = [](const core::ModelConfig& c, int) { return c.H == 128 && c.use_glore ? 0.95 : 0.4; };
    AshaOptions opt;
    opt.seed = 2;
    const auto r = asha_search(space, runner, opt);
    bool sampled = false;
    for (const auto& t : r.table) {
        sampled |= t.config.H == 128 && t.config.use_glore;
    }
    REQUIRE(sampled);
    CHECK(r.best_config.H == 128);
    CHECK(r.best_config.use_glore);
    CHECK(r.best_accuracy == 0.95);
}

TEST_CASE("uneven trial counts and custom rungs") {
    FakeRunner runner;
    runner.accuracy = config_score;
    AshaOptions opt;
    opt.n_trials = 10;
    opt.eta = 2;
    opt.rung_epochs = {1, 2};
    const auto r = asha_search(SearchSpace{}, runner, opt);
    CHECK(r.survivors[1].size() == 5);
    CHECK(r.survivors[2].size() == 3);
    CHECK(r.total_epochs == 10 * 1 + 5 * 1);
}

TEST_CASE("search options and space validation") {
    AshaOptions opt;
    opt.eta = 1;
    CHECK_THROWS_AS(opt.validate(), ConfigError);
    opt = AshaOptions{};
    opt.rung_epochs = {5, 5};
    CHECK_THROWS_AS(opt.validate(), ConfigError);
    opt = AshaOptions{};
    opt.n_trials = 1;
    CHECK_THROWS_AS(opt.validate(), ConfigError);

    SearchSpace s;
    s.hidden.clear();
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s = SearchSpace{};
    s.P_min = 20;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s = SearchSpace{};
    s.lrs = {-1.0};
    CHECK_THROWS_AS(s.validate(), ConfigError);
}

TEST_CASE("samples stay inside the space") {
    const SearchSpace s;
    Rng rng(111);
    for (int i = 0; i < 1000; ++i) {
        const core::ModelConfig c = s.sample(rng);
        REQUIRE(c.P >= s.P_min);
        REQUIRE(c.P <= s.P_max);
        REQUIRE(c.N >= s.N_min);
        REQUIRE(c.N <= s.N_max);
        REQUIRE(c.A >= s.A_min);
        REQUIRE(c.A <= s.A_max);
        REQUIRE(c.K >= s.K_min);
        REQUIRE(c.K <= s.K_max);
        REQUIRE(c.rho >= s.rho_min);
        REQUIRE(c.rho <= s.rho_max);
        REQUIRE(std::find(s.hidden.begin(), s.hidden.end(), c.H) != s.hidden.end());
        REQUIRE(std::find(s.lrs.begin(), s.lrs.end(), c.lr) != s.lrs.end());
        REQUIRE(std::find(s.lambdas.begin(), s.lambdas.end(), c.lambdas.ep) != s.lambdas.end());
        c.validate();
    }
}

TEST_CASE("single-point space and JSON round trip") {
    core::ModelConfig cfg = small_model();
    cfg.lambdas.en = 0.1;
    const SearchSpace s = SearchSpace::single(cfg);
    Rng rng(5);
    CHECK(s.sample(rng).to_json() == cfg.to_json());
    const SearchSpace back = SearchSpace::from_json(SearchSpace{}.to_json());
    CHECK(back.to_json() == SearchSpace{}.to_json());
    CHECK(SearchSpace::from_json(io::json{{"hidden", {32}}}).hidden == std::vector<int>{32});
    CHECK_THROWS_AS(SearchSpace::from_json(io::json{{"hidden", {0}}}), ConfigError);
}

TEST_CASE("graph trial runner resumes training where it stopped") {
    const auto graphs = separable_cohort(10, 112);
    GraphTrialRunner a(graphs, 3), b(graphs, 3);
    CHECK(a.test_split().size() == 2);
    CHECK(a.train_split().size() == 18);
    a.advance(0, small_model(), 2, 99);
    const TrialScore resumed = a.advance(0, small_model(), 6, 99);
    const TrialScore direct = b.advance(0, small_model(), 6, 99);
    CHECK(resumed.val_accuracy == direct.val_accuracy);
    CHECK(resumed.val_accuracy >= 0.0);
    CHECK(resumed.val_accuracy <= 1.0);
    CHECK_THROWS_AS(GraphTrialRunner(separable_cohort(1, 1), 0), ConfigError);
}

TEST_CASE("one-shot trial on a separable cohort") {
    const auto graphs = separable_cohort(10, 113);
    int calls = 0;
    const TrialResult r = evaluate_trial(graphs, small_model(), 30, 8,
                                         [&](const core::NaroNetModel&, const std::vector<graph::PatchGraph>& held) {
                                             ++calls;
                                             return static_cast<double>(held.size());
                                         });
    CHECK(r.val_accuracy == 1.0);
    CHECK(r.interpretability == 2.0);
    CHECK(calls == 1);
    CHECK(r.config.epochs == 30);
    CHECK_FALSE(r.diverged);
}

TEST_CASE("trial table and best configuration files") {
    FakeRunner runner;
    runner.accuracy = config_score;
    AshaOptions opt;
    opt.n_trials = 4;
    opt.rung_epochs = {1, 3};
    const auto r = asha_search(SearchSpace{}, runner, opt);
    const auto dir = test::scratch_dir("search_io");
    write_trial_table(dir / "trials.csv", r);
    write_best_config(dir / "best.json", r, 3);
    const auto j = io::read_json(dir / "best.json");
    CHECK(j["trial_id"] == r.best_trial);
    CHECK(core::ModelConfig::from_json(j["config"]).to_json() == r.best_config.to_json());
    CHECK(std::filesystem::file_size(dir / "trials.csv") > 0);
}
