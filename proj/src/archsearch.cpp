#include "naronet/archsearch.hpp"

#include "naronet/io.hpp"
#include "naronet/metrics.hpp"
#include "naronet/parallel.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <set>

namespace naronet::search {

namespace {

template <typename T>
const T& pick(Rng& rng, const std::vector<T>& v) {
    return v[uniform_index(rng, v.size())];
}

bool pick_bool(Rng& rng, const std::vector<bool>& v) {
    return v[uniform_index(rng, v.size())];
}

int pick_int(Rng& rng, int lo, int hi) {
    return std::uniform_int_distribution<int>(lo, hi)(rng);
}

// Enum names round-trip through ModelConfig's own parser.
core::ModelConfig parse_field(const std::string& key, const io::json& value) {
    return core::ModelConfig::from_json(io::json{{key, value}});
}

template <typename T, typename Get>
std::vector<T> parse_list(const io::json& j, const std::string& key, const std::vector<T>& fallback, Get get) {
    if (!j.contains(key)) {
        return fallback;
    }
    std::vector<T> out;
    for (const auto& v : j.at(key)) {
        out.push_back(get(v));
    }
    return out;
}

} // namespace

void SearchSpace::validate() const {
    if (lambdas.empty() || activations.empty() || use_max.empty() || gnn_variants.empty() || use_glore.empty() ||
        hidden.empty() || aug_modes.empty() || lrs.empty() || collapse.empty()) {
        throw ConfigError("search space has an empty domain");
    }
    if (P_min > P_max || N_min > N_max || A_min > A_max || K_min > K_max || rho_min > rho_max) {
        throw ConfigError("search space has an empty range");
    }
    if (P_min < 2 || N_min < 2 || A_min < 2 || K_min < 1 || rho_min < 0.0 || rho_max >= 1.0) {
        throw ConfigError("search space range out of bounds");
    }
    for (double l : lambdas) {
        if (!(l >= 0.0)) {
            throw ConfigError("search space lambdas must be non-negative");
        }
    }
    for (double lr : lrs) {
        if (!(lr > 0.0)) {
            throw ConfigError("search space learning rates must be positive");
        }
    }
    for (int h : hidden) {
        if (h < 1) {
            throw ConfigError("search space hidden widths must be positive");
        }
    }
    base.validate();
}

core::ModelConfig SearchSpace::sample(Rng& rng) const {
    core::ModelConfig c = base;
    if (!keep_base_lambdas) {
        c.lambdas.ep = pick(rng, lambdas);
        c.lambdas.en = pick(rng, lambdas);
        c.lambdas.ea = pick(rng, lambdas);
        c.lambdas.pp = pick(rng, lambdas);
        c.lambdas.pn = pick(rng, lambdas);
        c.lambdas.pa = pick(rng, lambdas);
    }
    c.activation = pick(rng, activations);
    c.use_max = pick_bool(rng, use_max);
    c.gnn_variant = pick(rng, gnn_variants);
    c.use_glore = pick_bool(rng, use_glore);
    c.H = pick(rng, hidden);
    c.P = pick_int(rng, P_min, P_max);
    c.N = pick_int(rng, N_min, N_max);
    c.A = pick_int(rng, A_min, A_max);
    c.K = pick_int(rng, K_min, K_max);
    c.rho = rho_min == rho_max ? rho_min : std::uniform_real_distribution<double>(rho_min, rho_max)(rng);
    c.aug_modes = pick(rng, aug_modes);
    c.lr = pick(rng, lrs);
    c.collapse = pick(rng, collapse);
    return c;
}

io::json SearchSpace::to_json() const {
    io::json j;
    j["lambdas"] = lambdas;
    j["keep_base_lambdas"] = keep_base_lambdas;
    j["activations"] = io::json::array();
    for (auto a : activations) {
        j["activations"].push_back(core::to_string(a));
    }
    j["use_max"] = use_max;
    j["gnn_variants"] = io::json::array();
    for (auto v : gnn_variants) {
        j["gnn_variants"].push_back(core::to_string(v));
    }
    j["use_glore"] = use_glore;
    j["hidden"] = hidden;
    j["P"] = {P_min, P_max};
    j["N"] = {N_min, N_max};
    j["A"] = {A_min, A_max};
    j["K"] = {K_min, K_max};
    j["rho"] = {rho_min, rho_max};
    j["aug_modes"] = io::json::array();
    for (auto m : aug_modes) {
        j["aug_modes"].push_back(graph::format_augment_modes(m));
    }
    j["lrs"] = lrs;
    j["collapse"] = io::json::array();
    for (auto c : collapse) {
        j["collapse"].push_back(core::to_string(c));
    }
    j["base"] = base.to_json();
    return j;
}

SearchSpace SearchSpace::from_json(const io::json& j) {
    SearchSpace s;
    try {
        s.lambdas = j.value("lambdas", s.lambdas);
        s.keep_base_lambdas = j.value("keep_base_lambdas", s.keep_base_lambdas);
        s.activations = parse_list(j, "activations", s.activations,
                                   [](const io::json& v) { return parse_field("activation", v).activation; });
        s.use_max = j.value("use_max", s.use_max);
        s.gnn_variants = parse_list(j, "gnn_variants", s.gnn_variants,
                                    [](const io::json& v) { return parse_field("gnn_variant", v).gnn_variant; });
        s.use_glore = j.value("use_glore", s.use_glore);
        s.hidden = j.value("hidden", s.hidden);
        auto range = [&](const char* key, int& lo, int& hi) {
            if (j.contains(key)) {
                lo = j.at(key).at(0).get<int>();
                hi = j.at(key).at(1).get<int>();
            }
        };
        range("P", s.P_min, s.P_max);
        range("N", s.N_min, s.N_max);
        range("A", s.A_min, s.A_max);
        range("K", s.K_min, s.K_max);
        if (j.contains("rho")) {
            s.rho_min = j.at("rho").at(0).get<double>();
            s.rho_max = j.at("rho").at(1).get<double>();
        }
        s.aug_modes = parse_list(j, "aug_modes", s.aug_modes,
                                 [](const io::json& v) { return graph::parse_augment_modes(v.get<std::string>()); });
        s.lrs = j.value("lrs", s.lrs);
        s.collapse = parse_list(j, "collapse", s.collapse,
                                [](const io::json& v) { return parse_field("collapse", v).collapse; });
        if (j.contains("base")) {
            s.base = core::ModelConfig::from_json(j.at("base"));
        }
    } catch (const io::json::exception& e) {
        throw ConfigError(std::string("search space: ") + e.what());
    }
    s.validate();
    return s;
}

SearchSpace SearchSpace::single(const core::ModelConfig& cfg) {
    SearchSpace s;
    s.base = cfg;
    s.keep_base_lambdas = true;
    s.activations = {cfg.activation};
    s.use_max = {cfg.use_max};
    s.gnn_variants = {cfg.gnn_variant};
    s.use_glore = {cfg.use_glore};
    s.hidden = {cfg.H};
    s.P_min = s.P_max = cfg.P;
    s.N_min = s.N_max = cfg.N;
    s.A_min = s.A_max = cfg.A;
    s.K_min = s.K_max = cfg.K;
    s.rho_min = s.rho_max = cfg.rho;
    s.aug_modes = {cfg.aug_modes};
    s.lrs = {cfg.lr};
    s.collapse = {cfg.collapse};
    return s;
}

namespace {

void split_90_10(const std::vector<graph::PatchGraph>& graphs, std::uint64_t seed, std::vector<graph::PatchGraph>& train,
                 std::vector<graph::PatchGraph>& test) {
    std::vector<int> labels;
    for (const auto& g : graphs) {
        labels.push_back(g.label);
    }
    const auto fold = core::stratified_folds(labels, 10, seed);
    for (std::size_t i = 0; i < graphs.size(); ++i) {
        (fold[i] == 0 ? test : train).push_back(graphs[i]);
    }
    if (train.empty() || test.empty()) {
        throw ConfigError("cohort too small for a 90/10 split");
    }
    std::set<int> seen;
    for (const auto& g : train) {
        seen.insert(g.label);
    }
    if (static_cast<int>(seen.size()) < core::count_classes(graphs)) {
        throw ConfigError("training split of the 90/10 split is missing a class");
    }
}

TrialScore score(const core::NaroNetModel& model, const core::Trainer* trainer, const std::vector<graph::PatchGraph>& test,
                 const InterpretabilityFn& interpret) {
    TrialScore s;
    if (trainer && !trainer->log().empty() && !std::isfinite(trainer->log().back().loss)) {
        s.diverged = true;
        return s;
    }
    const Mat proba = core::predict(model, test);
    if (!proba.allFinite()) {
        s.diverged = true;
        return s;
    }
    const auto pred = metrics::argmax_rows(proba);
    std::vector<int> labels;
    for (const auto& g : test) {
        labels.push_back(g.label);
    }
    s.val_accuracy = metrics::accuracy(labels, pred);
    if (interpret) {
        s.interpretability = interpret(model, test);
    }
    return s;
}

} // namespace

GraphTrialRunner::GraphTrialRunner(std::vector<graph::PatchGraph> graphs, std::uint64_t split_seed,
                                   InterpretabilityFn interpret)
    : num_classes_(core::count_classes(graphs)), interpret_(std::move(interpret)) {
    split_90_10(graphs, split_seed, train_, test_);
}

TrialScore GraphTrialRunner::advance(int id, const core::ModelConfig& cfg, int epochs, std::uint64_t seed) {
    std::shared_ptr<State> state;
    {
        std::lock_guard<std::mutex> lock(mutex_);
        auto& slot = states_[id];
        if (!slot) {
            slot = std::make_shared<State>();
            slot->model = std::make_unique<core::NaroNetModel>(cfg, train_.front().dim(),
                                                               cfg.O > 0 ? cfg.O : num_classes_, seed);
            slot->trainer = std::make_unique<core::Trainer>(*slot->model, derive_seed(seed, {1}));
        }
        state = slot;
    }
    const int more = epochs - state->trainer->epochs_done();
    if (more > 0) {
        state->trainer->train_epochs(train_, more);
    }
    return score(*state->model, state->trainer.get(), test_, interpret_);
}

void GraphTrialRunner::release(int id) {
    std::lock_guard<std::mutex> lock(mutex_);
    states_.erase(id);
}

TrialResult evaluate_trial(const std::vector<graph::PatchGraph>& graphs, const core::ModelConfig& cfg, int epochs,
                           std::uint64_t seed, const InterpretabilityFn& interpret) {
    std::vector<graph::PatchGraph> train, test;
    split_90_10(graphs, seed, train, test);
    core::ModelConfig c = cfg;
    c.epochs = epochs;
    std::vector<core::EpochLog> log;
    auto model = core::train_model(train, c, c.O > 0 ? c.O : core::count_classes(graphs), seed, &log);
    TrialScore s;
    if (!log.empty() && !std::isfinite(log.back().loss)) {
        s.diverged = true;
    } else {
        s = score(*model, nullptr, test, interpret);
    }
    TrialResult r;
    r.epochs_trained = epochs;
    r.seed = seed;
    r.config = c;
    r.val_accuracy = s.val_accuracy;
    r.interpretability = s.interpretability;
    r.diverged = s.diverged;
    return r;
}

void AshaOptions::validate() const {
    if (n_trials < 2) {
        throw ConfigError("ASHA needs at least two trials");
    }
    if (eta < 2) {
        throw ConfigError("ASHA reduction factor must be at least 2");
    }
    if (rung_epochs.empty()) {
        throw ConfigError("ASHA needs at least one rung");
    }
    int prev = 0;
    for (int e : rung_epochs) {
        if (e <= prev) {
            throw ConfigError("ASHA rung budgets must be positive and strictly increasing");
        }
        prev = e;
    }
}

std::vector<int> promote(const std::vector<TrialResult>& results, int eta) {
    std::vector<const TrialResult*> order;
    for (const auto& r : results) {
        order.push_back(&r);
    }
    std::sort(order.begin(), order.end(), [](const TrialResult* a, const TrialResult* b) {
        const double va = a->diverged ? -1.0 : a->val_accuracy;
        const double vb = b->diverged ? -1.0 : b->val_accuracy;
        if (va != vb) {
            return va > vb;
        }
        return a->trial_id < b->trial_id;
    });
    const std::size_t keep = (results.size() + static_cast<std::size_t>(eta) - 1) / static_cast<std::size_t>(eta);
    std::vector<int> ids;
    for (std::size_t i = 0; i < keep && i < order.size(); ++i) {
        ids.push_back(order[i]->trial_id);
    }
    std::sort(ids.begin(), ids.end());
    return ids;
}

SearchResult asha_search(const SearchSpace& space, TrialRunner& runner, const AshaOptions& options) {
    space.validate();
    options.validate();
    SearchResult result;
    std::vector<core::ModelConfig> configs;
    std::vector<std::uint64_t> seeds;
    Rng rng(derive_seed(options.seed, {0x73616d706c65ULL}));
    for (int t = 0; t < options.n_trials; ++t) {
        configs.push_back(space.sample(rng));
        seeds.push_back(derive_seed(options.seed, {0x747269616cULL, static_cast<std::uint64_t>(t)}));
    }
    std::vector<int> alive(static_cast<std::size_t>(options.n_trials));
    for (int t = 0; t < options.n_trials; ++t) {
        alive[static_cast<std::size_t>(t)] = t;
    }
    std::vector<int> trained(static_cast<std::size_t>(options.n_trials), 0);
    std::vector<TrialResult> rung_results;
    for (std::size_t rung = 0; rung < options.rung_epochs.size(); ++rung) {
        result.survivors.push_back(alive);
        const int budget = options.rung_epochs[rung];
        rung_results.assign(alive.size(), TrialResult{});
        parallel_for(alive.size(), [&](std::size_t i) {
            const int id = alive[i];
            const TrialScore s = runner.advance(id, configs[static_cast<std::size_t>(id)], budget,
                                                seeds[static_cast<std::size_t>(id)]);
            TrialResult& r = rung_results[i];
            r.trial_id = id;
            r.rung = static_cast<int>(rung);
            r.epochs_trained = budget;
            r.seed = seeds[static_cast<std::size_t>(id)];
            r.config = configs[static_cast<std::size_t>(id)];
            r.config.epochs = budget;
            r.val_accuracy = s.val_accuracy;
            r.interpretability = s.interpretability;
            r.diverged = s.diverged;
        });
        for (const auto& r : rung_results) {
            result.total_epochs += budget - trained[static_cast<std::size_t>(r.trial_id)];
            trained[static_cast<std::size_t>(r.trial_id)] = budget;
            result.table.push_back(r);
            spdlog::info("trial {} rung {} epochs {}: accuracy {:.3f}{}", r.trial_id, r.rung, budget, r.val_accuracy,
                         r.diverged ? " (diverged)" : "");
        }
        const auto next = promote(rung_results, options.eta);
        for (int id : alive) {
            if (!std::binary_search(next.begin(), next.end(), id)) {
                runner.release(id);
            }
        }
        alive = next;
    }
    result.survivors.push_back(alive);
    if (std::all_of(rung_results.begin(), rung_results.end(), [](const TrialResult& r) { return r.diverged; })) {
        spdlog::warn("every trial in the final rung diverged; returning the best trial so far");
    }
    // Final rung results are sorted by promote(); alive holds exactly one id.
    const int best = promote(rung_results, static_cast<int>(rung_results.size())).front();
    for (const auto& r : rung_results) {
        if (r.trial_id == best) {
            result.best_trial = best;
            result.best_config = r.config;
            result.best_accuracy = r.val_accuracy;
        }
    }
    runner.release(best);
    return result;
}

void write_trial_table(const std::filesystem::path& path, const SearchResult& result) {
    io::CsvWriter w(path, {"trial_id",   "rung",        "epochs",     "seed",       "P",         "N",
                           "A",          "H",           "K",          "activation", "use_max",   "gnn_variant",
                           "use_glore",  "lambda_ep",   "lambda_en",  "lambda_ea",  "lambda_pp", "lambda_pn",
                           "lambda_pa",  "collapse",    "rho",        "aug_modes",  "lr",        "batch_size",
                           "val_accuracy", "interpretability", "diverged"});
    for (const auto& r : result.table) {
        const auto& c = r.config;
        w.row({std::to_string(r.trial_id), std::to_string(r.rung), std::to_string(r.epochs_trained),
               std::to_string(r.seed), std::to_string(c.P), std::to_string(c.N), std::to_string(c.A),
               std::to_string(c.H), std::to_string(c.K), core::to_string(c.activation), c.use_max ? "1" : "0",
               core::to_string(c.gnn_variant), c.use_glore ? "1" : "0", io::format_number(c.lambdas.ep),
               io::format_number(c.lambdas.en), io::format_number(c.lambdas.ea), io::format_number(c.lambdas.pp),
               io::format_number(c.lambdas.pn), io::format_number(c.lambdas.pa), core::to_string(c.collapse),
               io::format_number(c.rho), graph::format_augment_modes(c.aug_modes), io::format_number(c.lr),
               std::to_string(c.batch_size), io::format_number(r.val_accuracy),
               std::isnan(r.interpretability) ? "" : io::format_number(r.interpretability), r.diverged ? "1" : "0"});
    }
}

void write_best_config(const std::filesystem::path& path, const SearchResult& result, std::uint64_t seed) {
    io::json j;
    j["trial_id"] = result.best_trial;
    j["val_accuracy"] = result.best_accuracy;
    j["config"] = result.best_config.to_json();
    j["survivors"] = result.survivors;
    j["total_epochs"] = result.total_epochs;
    j["provenance"] = io::provenance(seed, result.best_config.to_json());
    io::write_json(path, j);
}

} // namespace naronet::search
