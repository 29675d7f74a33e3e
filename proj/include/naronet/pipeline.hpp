#pragma once

#include "naronet/archsearch.hpp"
#include "naronet/bioinsights.hpp"
#include "naronet/common.hpp"
#include "naronet/graphbuild.hpp"
#include "naronet/image.hpp"
#include "naronet/io.hpp"
#include "naronet/model.hpp"
#include "naronet/pcl.hpp"
#include "naronet/synthcohort.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

/// Stage orchestration over an output root:
///
///   cohort/      manifest.json (+ images, masks, cells for synthetic cohorts)
///   pcl/         encoder.bin, training_log.csv, summary.json
///   embeddings/  <image_id>.emb + .json, index.json
///   graphs/      <image_id>.graph + .json, index.json
///   model/       model.bin, epoch_log.csv, summary.json
///   search/      trials.csv, best_config.json
///   results/     predictions.csv, folds.csv, summary.json
///   insights/    report files from emit_reports, interpretability.csv
///   report/      results.csv, report.json
namespace naronet::pipeline {

namespace fs = std::filesystem;

enum class EvalMode { crossval_10, leave_one_patient_out, single_split };
std::string to_string(EvalMode m);
EvalMode parse_eval_mode(std::string_view s);

struct SimulateOptions {
    std::string paradigm = "CCI1";
    synth::Scale scale = synth::Scale::desk;
    /// Group indices to keep; empty keeps all.
    std::vector<int> groups;
    /// 0 keeps the preset's patients per group.
    int per_group = 0;
    /// Negative keeps the preset density.
    double cell_density = -1.0;
};

struct RunConfig {
    std::vector<std::string> stages;
    fs::path out = "naronet_out";
    std::uint64_t seed = 0;
    SimulateOptions simulate;
    pcl::PCLConfig pcl;
    core::ModelConfig model;
    search::SearchSpace space;
    search::AshaOptions asha;
    EvalMode eval = EvalMode::crossval_10;
    int folds = 10;
    insights::ReportOptions report;

    void validate() const;
    io::json to_json() const;
    /// Missing keys keep their defaults.
    static RunConfig from_json(const io::json& j);
};

struct ImageRef {
    std::string image_id;
    fs::path path;
};

struct ManifestPatient {
    std::string patient_id;
    int label = 0;
    std::vector<ImageRef> images;
    /// Ground-truth mask per neighborhood id, synthetic cohorts only.
    std::map<std::string, fs::path> masks;
};

struct CohortManifest {
    std::vector<ManifestPatient> patients;
    std::vector<std::string> label_names;
    std::vector<std::string> channel_names;
    /// Neighborhood ids whose masks mark the label-driving regions.
    std::vector<std::string> relevant_masks;
    std::uint64_t seed = 0;

    /// Every patient has an image, labels index label_names, image ids are unique.
    void validate() const;
    std::size_t num_images() const;
};

/// Reads a cohort manifest (synthetic or ingested); paths resolve against its directory.
CohortManifest read_manifest(const fs::path& path);
void write_manifest(const fs::path& path, const CohortManifest& manifest, std::uint64_t seed);

/// .tif/.tiff through libtiff, anything else as a raw image with JSON sidecar.
MultiplexImage load_image(const fs::path& path);

struct IngestOptions {
    std::string image_column = "image";
    std::string patient_column = "patient_id";
    std::string label_column = "label";
};

struct IngestReport {
    /// Clinical patients without any image.
    std::vector<std::string> skipped_patients;
    /// Images whose patient is missing from the clinical table or has no label.
    std::vector<std::string> unlabeled_images;
};

/// Groups images by patient and attaches clinical labels. Image paths resolve against the
/// images table's directory. Throws ConfigError with a per-file report when images
/// disagree on channel count.
CohortManifest ingest_external(const fs::path& images_csv, const fs::path& clinical_csv,
                               const IngestOptions& options = {}, IngestReport* report = nullptr);

enum class RiskGroup { RI, RII, RIII };
std::string to_string(RiskGroup g);

struct SurvivalThresholds {
    double low_risk_above = 120.0;
    double high_risk_below = 53.0;
};

/// RI above 120 months, RIII below 53, RII otherwise; nullopt for missing survival.
std::optional<RiskGroup> stratify_survival(std::optional<double> months, const SurvivalThresholds& t = {});
std::vector<std::optional<RiskGroup>> stratify_survival(const std::vector<std::optional<double>>& months,
                                                        const SurvivalThresholds& t = {});

/// Cells as nodes, symmetric k-nearest-neighbor edges (k capped at n-1).
graph::PatchGraph cell_feature_graph(const Mat& features, const std::vector<std::pair<double, double>>& xy,
                                     const std::string& patient_id, int label, int k = 4);
/// CSV with x and y columns; every other column except cell_id is a feature.
graph::PatchGraph read_cell_feature_graph(const fs::path& csv, const std::string& patient_id, int label, int k = 4);

/// Ground-truth rasters (union of the relevant masks) per patient, per image.
struct GroundTruth {
    std::map<std::string, std::vector<std::vector<std::uint8_t>>> rasters;
    std::map<std::string, std::vector<std::pair<int, int>>> sizes;

    bool empty() const { return rasters.empty(); }
};
GroundTruth load_ground_truth(const CohortManifest& manifest);

/// Interpretability of `model` over `graphs` (patients must be present in `truth`).
insights::InterpretabilityResult cohort_interpretability(const core::NaroNetModel& model,
                                                         const std::vector<graph::PatchGraph>& graphs,
                                                         const GroundTruth& truth);

const std::vector<std::string>& stage_names();

/// Throws ConfigError naming the earliest upstream stage whose outputs are missing.
void require_stage_inputs(const RunConfig& cfg, const std::string& stage);

/// One graph per image, in index order.
std::vector<graph::PatchGraph> load_image_graphs(const fs::path& out);
/// Image graphs merged per patient, in manifest order.
std::vector<graph::PatchGraph> load_patient_graphs(const fs::path& out);

void run_simulate(const RunConfig& cfg);
void run_ingest(const RunConfig& cfg, const fs::path& images_csv, const fs::path& clinical_csv,
                const IngestOptions& options = {});
void run_pcl_train(const RunConfig& cfg);
void run_embed(const RunConfig& cfg);
void run_graph(const RunConfig& cfg);
void run_train(const RunConfig& cfg);
void run_search(const RunConfig& cfg);
void run_crossval(const RunConfig& cfg);
void run_bioinsights(const RunConfig& cfg);
void run_report(const RunConfig& cfg);

/// Dispatches by stage name; ingest is excluded because it needs input tables.
void run_stage(const std::string& stage, const RunConfig& cfg);
void run_stages(const RunConfig& cfg);

} // namespace naronet::pipeline
