#pragma once

#include "naronet/clustering.hpp"
#include "naronet/common.hpp"
#include "naronet/graphbuild.hpp"
#include "naronet/image.hpp"
#include "naronet/model.hpp"
#include "naronet/training.hpp"

#include <filesystem>
#include <limits>
#include <string>
#include <vector>

/// Post-hoc analysis of a trained model: differential TME abundance, ablation tests,
/// predictive influence ratios, patient subcategories and ground-truth interpretability.
namespace naronet::insights {

enum class Level { phenotype, neighborhood, area };

struct TmeRef {
    Level level;
    /// Index within its level.
    int index;
};

/// TME column t of the abundance vector (phenotypes, then neighborhoods, then areas).
TmeRef tme_ref(const core::ModelConfig& cfg, int t);
/// "P1".."P<P>", "N1".., "A1"..
std::string tme_name(const core::ModelConfig& cfg, int t);

/// Frozen-model outputs for every patient.
struct CohortAnalysis {
    std::vector<std::string> ids;
    std::vector<int> labels;
    Mat abundances;
    Mat proba;
    std::vector<int> predicted;
    /// Per patient, per patch: argmax phenotype, argmax neighborhood, area of that neighborhood.
    std::vector<std::vector<int>> patch_phenotype, patch_neighborhood, patch_area;
    /// Per patient, per patch: probability of each argmax assignment.
    std::vector<std::vector<double>> phenotype_confidence, neighborhood_confidence, area_confidence;
};

CohortAnalysis analyze_cohort(const core::NaroNetModel& model, const std::vector<graph::PatchGraph>& graphs);

struct GroupTest {
    int tme;
    int group_a;
    int group_b;
    double p;
    double p_adjusted;
    double median_a;
    double median_b;
};

/// Two-sided Mann-Whitney per TME and per group pair. With `adjust`, Benjamini-Hochberg
/// over all reported tests; otherwise p_adjusted = p.
std::vector<GroupTest> abundance_group_test(const Mat& abundances, const std::vector<int>& labels, bool adjust = false);

/// Predicted-class probability per patient before and after zeroing TME t, compared
/// with the Mann-Whitney (two-group Kruskal-Wallis) test.
struct AblationResult {
    int tme;
    double p;
    double mean_drop;
    /// The null is rejected at alpha and the mean probability decreased.
    bool predictive;
};
AblationResult ablation_test(const core::NaroNetModel& model, const Mat& abundances, int t, double alpha = 0.05);

inline constexpr double kInfinitePir = std::numeric_limits<double>::infinity();

/// p(c | a) / p(c | a with entry t zeroed), c the un-ablated predicted class.
double pir(const core::NaroNetModel& model, const RowVec& abundance, int t);
Mat pir_matrix(const core::NaroNetModel& model, const Mat& abundances);
/// Replaces +inf entries by the largest finite entry (1 if none) so rows can be clustered.
Mat finite_pir(const Mat& pir);

/// Binary raster (row-major H x W) of the pixels covered by patches of `image` assigned to TME t.
std::vector<std::uint8_t> tme_raster(const graph::PatchGraph& g, const CohortAnalysis& a, std::size_t patient,
                                     const core::ModelConfig& cfg, int t, int image, int height, int width);

/// |I_TME and I_GT| / |I_TME|; NaN when I_TME is empty.
double interpretability(const std::vector<std::uint8_t>& tme, const std::vector<std::uint8_t>& ground_truth);

struct InterpretabilityResult {
    /// Per patient image, in graph order; NaN when undefined.
    std::vector<double> per_image;
    std::vector<int> selected_tme;
    double cohort = std::numeric_limits<double>::quiet_NaN();
};

/// Uses each patient's highest-PIR TME. `truth[p][i]` is the ground-truth raster of
/// image i of patient p (same size as the image).
InterpretabilityResult interpretability_scores(const core::NaroNetModel& model, const std::vector<graph::PatchGraph>& graphs,
                                               const CohortAnalysis& analysis, const Mat& pir,
                                               const std::vector<std::vector<std::vector<std::uint8_t>>>& truth,
                                               const std::vector<std::vector<std::pair<int, int>>>& image_sizes);

/// Mean raw marker expression over patches assigned to each TME, z-scored per marker
/// across TMEs. `images[p][i]` pairs with graphs[p].images[i].
Mat tme_marker_heatmap(const core::NaroNetModel& model, const std::vector<graph::PatchGraph>& graphs,
                       const CohortAnalysis& analysis, const std::vector<std::vector<MultiplexImage>>& images);

struct ReportOptions {
    int top_k = 4;
    bool adjust_p = false;
    std::uint64_t seed = 0;
};

/// Writes heatmap, abundance, curves, confusion, p-values, PIR, subcategories and patch galleries.
void emit_reports(const core::NaroNetModel& model, const std::vector<graph::PatchGraph>& graphs,
                  const std::vector<std::vector<MultiplexImage>>& images, const std::filesystem::path& out_dir,
                  const ReportOptions& options = {});

} // namespace naronet::insights
