#pragma once

#include "naronet/common.hpp"
#include "naronet/graphbuild.hpp"
#include "naronet/model.hpp"
#include "naronet/rng.hpp"
#include "naronet/training.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <vector>

/// Successive-halving search over model configurations.
namespace naronet::search {

struct SearchSpace {
    /// Shared by every regularizer weight.
    std::vector<double> lambdas{0.0, 1e-3, 1e-2, 1e-1, 1.0};
    /// Take all six weights from `base` instead of sampling them.
    bool keep_base_lambdas = false;
    std::vector<core::Activation> activations{core::Activation::softmax, core::Activation::sigmoid};
    std::vector<bool> use_max{true, false};
    std::vector<core::GnnVariant> gnn_variants{core::GnnVariant::plain, core::GnnVariant::residual};
    std::vector<bool> use_glore{false, true};
    std::vector<int> hidden{16, 32, 64, 128};
    int P_min = 6, P_max = 14;
    int N_min = 6, N_max = 12;
    int A_min = 4, A_max = 10;
    int K_min = 1, K_max = 3;
    double rho_min = 0.0, rho_max = 0.3;
    std::vector<unsigned> aug_modes{0u, graph::kDropEdge, graph::kAddEdge, graph::kMaskNode,
                                    graph::kDropEdge | graph::kAddEdge | graph::kMaskNode};
    std::vector<double> lrs{1e-4, 3e-4, 1e-3, 3e-3};
    std::vector<core::CollapseLoss> collapse{core::CollapseLoss::orthogonal, core::CollapseLoss::patient_entropy};
    /// Fields outside the space (batch size, aggregation, epochs, O) come from here.
    core::ModelConfig base;

    void validate() const;
    core::ModelConfig sample(Rng& rng) const;
    io::json to_json() const;
    /// Missing keys keep their defaults.
    static SearchSpace from_json(const io::json& j);
    /// Space holding the single point `cfg`.
    static SearchSpace single(const core::ModelConfig& cfg);
};

struct TrialScore {
    double val_accuracy = 0.0;
    double interpretability = std::numeric_limits<double>::quiet_NaN();
    bool diverged = false;
};

struct TrialResult {
    int trial_id = 0;
    int rung = 0;
    int epochs_trained = 0;
    std::uint64_t seed = 0;
    core::ModelConfig config;
    double val_accuracy = 0.0;
    double interpretability = std::numeric_limits<double>::quiet_NaN();
    bool diverged = false;
};

/// Trains trials and scores them. advance() may be called concurrently for distinct ids.
class TrialRunner {
public:
    virtual ~TrialRunner() = default;
    /// Continues trial `id` until it has `epochs` epochs in total, then scores it.
    virtual TrialScore advance(int id, const core::ModelConfig& cfg, int epochs, std::uint64_t seed) = 0;
    /// The trial will not be advanced again.
    virtual void release(int /*id*/) {}
};

/// Scores on held-out patients after training on the rest.
using InterpretabilityFn =
    std::function<double(const core::NaroNetModel&, const std::vector<graph::PatchGraph>& held_out)>;

/// 90/10 stratified split of a graph cohort (fold 0 of a 10-fold assignment is held out).
class GraphTrialRunner : public TrialRunner {
public:
    GraphTrialRunner(std::vector<graph::PatchGraph> graphs, std::uint64_t split_seed, InterpretabilityFn interpret = {});

    TrialScore advance(int id, const core::ModelConfig& cfg, int epochs, std::uint64_t seed) override;
    void release(int id) override;

    const std::vector<graph::PatchGraph>& train_split() const { return train_; }
    const std::vector<graph::PatchGraph>& test_split() const { return test_; }

private:
    struct State {
        std::unique_ptr<core::NaroNetModel> model;
        std::unique_ptr<core::Trainer> trainer;
    };

    std::vector<graph::PatchGraph> train_, test_;
    int num_classes_;
    InterpretabilityFn interpret_;
    std::mutex mutex_;
    std::map<int, std::shared_ptr<State>> states_;
};

/// One-shot training and scoring of `cfg` on the 90/10 split.
TrialResult evaluate_trial(const std::vector<graph::PatchGraph>& graphs, const core::ModelConfig& cfg, int epochs,
                           std::uint64_t seed, const InterpretabilityFn& interpret = {});

struct AshaOptions {
    int n_trials = 27;
    int eta = 3;
    std::vector<int> rung_epochs{5, 15, 45};
    std::uint64_t seed = 0;

    void validate() const;
};

struct SearchResult {
    std::vector<TrialResult> table;
    /// Trial ids alive at each rung, plus the final survivor as the last entry.
    std::vector<std::vector<int>> survivors;
    int best_trial = 0;
    core::ModelConfig best_config;
    double best_accuracy = 0.0;
    /// Sum of epochs actually trained over all trials.
    long total_epochs = 0;
};

/// Keeps the top ceil(n / eta) of `results` by val_accuracy; ties go to the lower trial id.
std::vector<int> promote(const std::vector<TrialResult>& results, int eta);

/// Synchronous successive halving: every trial trains to rung 0, the top 1/eta move on
/// and continue training to the next budget, and the best trial of the last rung wins.
SearchResult asha_search(const SearchSpace& space, TrialRunner& runner, const AshaOptions& options);

void write_trial_table(const std::filesystem::path& path, const SearchResult& result);
void write_best_config(const std::filesystem::path& path, const SearchResult& result, std::uint64_t seed);

} // namespace naronet::search
