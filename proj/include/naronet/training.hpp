#pragma once

#include "naronet/graphbuild.hpp"
#include "naronet/metrics.hpp"
#include "naronet/model.hpp"
#include "naronet/nn.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

namespace naronet::core {

struct EpochLog {
    int epoch;
    double loss;
    double ce;
    /// exp(-mean CE): geometric-mean probability of the true class.
    double train_likelihood;
};

/// Owns the optimizer state for one model so training can resume across calls.
class Trainer {
public:
    Trainer(NaroNetModel& model, std::uint64_t seed);

    /// Summed loss over the batch, one optimizer step. Augmentation uses `aug_seed`.
    LossBreakdown training_step(const std::vector<const graph::PatchGraph*>& batch, std::uint64_t aug_seed);
    /// Runs `epochs` more epochs over `graphs` in mini-batches of config().batch_size.
    void train_epochs(const std::vector<graph::PatchGraph>& graphs, int epochs);

    int epochs_done() const { return epochs_done_; }
    const std::vector<EpochLog>& log() const { return log_; }

private:
    NaroNetModel& model_;
    nn::Adam optimizer_;
    std::uint64_t seed_;
    int epochs_done_ = 0;
    std::vector<EpochLog> log_;
};

/// Fresh model trained for cfg.epochs on `graphs`.
std::unique_ptr<NaroNetModel> train_model(const std::vector<graph::PatchGraph>& graphs, const ModelConfig& cfg,
                                          int num_classes, std::uint64_t seed, std::vector<EpochLog>* log = nullptr);

/// M x O class probabilities.
Mat predict(const NaroNetModel& model, const std::vector<graph::PatchGraph>& graphs);

/// Fold index per sample: each class is shuffled and dealt round-robin over the folds.
std::vector<int> stratified_folds(const std::vector<int>& labels, int folds, std::uint64_t seed);

int count_classes(const std::vector<graph::PatchGraph>& graphs);

struct FoldResult {
    int fold = 0;
    std::size_t n_test = 0;
    double accuracy = 0.0;
};

struct EvaluationReport {
    std::vector<std::string> ids;
    std::vector<int> labels;
    std::vector<int> fold_of;
    Mat proba;
    std::vector<int> predicted;
    std::vector<FoldResult> folds;
    double accuracy = 0.0;
    metrics::Interval ci{0.0, 0.0};
    double auc = 0.0;
    Eigen::MatrixXi confusion;
};

/// Stratified k-fold evaluation; folds run in parallel up to the thread limit.
/// Throws ConfigError when a training split lacks a class.
EvaluationReport cross_validate(const std::vector<graph::PatchGraph>& graphs, const ModelConfig& cfg, int folds,
                                std::uint64_t seed);

/// Image graphs grouped by patient_id; each patient is held out in turn and scored by
/// the mean of its image-level probabilities.
EvaluationReport leave_one_patient_out(const std::vector<graph::PatchGraph>& image_graphs, const ModelConfig& cfg,
                                       std::uint64_t seed);

/// Pools per-sample probabilities into accuracy, CI, AUC and confusion.
void summarize(EvaluationReport& report, int num_classes);

void write_predictions(const std::filesystem::path& path, const EvaluationReport& report);
void write_fold_metrics(const std::filesystem::path& path, const EvaluationReport& report);
void write_epoch_log(const std::filesystem::path& path, const std::vector<EpochLog>& log);

} // namespace naronet::core
