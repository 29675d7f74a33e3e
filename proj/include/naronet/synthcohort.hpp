#pragma once

#include "naronet/common.hpp"
#include "naronet/image.hpp"
#include "naronet/io.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

/// Synthetic multiplexed-tissue cohorts with known ground truth.
///
/// A tissue is partitioned into four neighborhoods (Nb1..Nb4) by seeded region growth.
/// Cells of eight phenotypes (Ph1..Ph8) are scattered inside each neighborhood by a
/// hardcore point process, with optional attraction/repulsion between phenotype pairs,
/// and rendered as filled ellipses over six marker channels (Mk1..Mk6). Each disease
/// paradigm varies one of these generative parameters across patient groups.
namespace naronet::synth {

inline constexpr int kPhenotypes = 8;
inline constexpr int kNeighborhoods = 4;
inline constexpr int kMarkers = 6;

struct PhenotypeSpec {
    std::string id;
    std::vector<double> marker_means;
    double marker_stddev = 0.05;
    double radius_px = 2.5;
    double eccentricity = 0.3;
};

struct NeighborhoodSpec {
    std::string id;
    /// Length-8 simplex over phenotypes.
    std::vector<double> phenotype_abundance;
    /// Symmetric 8x8 matrix in [-1, 1]: negative repels, positive attracts.
    Mat pairwise_interaction;
    /// Fraction of tissue area.
    double prevalence = 0.25;
};

/// Fully resolved generative parameters for one patient group.
struct TissueParams {
    std::vector<PhenotypeSpec> phenotypes;
    std::vector<NeighborhoodSpec> neighborhoods;
    /// 4x4 symmetric neighborhood-neighborhood interaction in [-1, 1].
    Mat neighborhood_interaction;
    int height = 200;
    int width = 200;
    /// Cells per 1000 pixels.
    double cell_density = 25.0;
    double background_sigma = 0.02;
    /// Typical linear size of one neighborhood blob, in pixels.
    double region_scale_px = 40.0;

    /// Throws ConfigError when an invariant is broken.
    void validate() const;
};

/// Sets one phenotype's abundance in a neighborhood and rescales the others to keep the simplex.
void set_abundance(NeighborhoodSpec& nb, int phenotype, double value);
/// Sets one neighborhood's prevalence and rescales the others proportionally.
void set_prevalence(std::vector<NeighborhoodSpec>& nbs, int neighborhood, double value);

enum class Scale { paper, desk };
Scale parse_scale(std::string_view s);
std::string to_string(Scale s);

struct GroupOverride {
    struct Marker {
        int phenotype, marker;
        double value;
    };
    struct Abundance {
        int neighborhood, phenotype;
        double value;
    };
    struct CellInteraction {
        int neighborhood, phenotype_a, phenotype_b;
        double value;
    };
    struct NeighborhoodInteraction {
        int neighborhood_a, neighborhood_b;
        double value;
    };
    struct Prevalence {
        int neighborhood;
        double value;
    };

    /// Patient type name, "I", "II" or "III".
    std::string name;
    /// Position of the group in the unrestricted preset; seeds derive from it.
    int source_index = 0;
    std::vector<Marker> markers;
    std::vector<Abundance> abundances;
    std::vector<CellInteraction> cell_interactions;
    std::vector<NeighborhoodInteraction> neighborhood_interactions;
    std::vector<Prevalence> prevalences;
};

struct ParadigmSpec {
    std::string name;
    Scale scale = Scale::desk;
    TissueParams base;
    std::vector<GroupOverride> groups;
    int per_group = 20;
    /// Neighborhoods whose ground-truth masks hold the regions driving the paradigm.
    std::vector<int> relevant_neighborhoods;
    std::string varied_parameter;

    int num_groups() const { return static_cast<int>(groups.size()); }
    TissueParams resolve(int group) const;
    io::json to_json() const;
};

const std::vector<std::string>& paradigm_names();
/// Throws ConfigError listing the valid presets on an unknown name.
ParadigmSpec build_paradigm(std::string_view name, Scale scale);
/// Keeps the listed groups (by unrestricted index, in the given order).
ParadigmSpec restrict_groups(const ParadigmSpec& spec, const std::vector<int>& groups);
/// Parses "I,III" style group lists.
std::vector<int> parse_group_list(std::string_view s);

struct Cell {
    int id = 0;
    double x = 0.0;
    double y = 0.0;
    int phenotype = 0;
    int neighborhood = 0;
    double semi_major = 0.0;
    double semi_minor = 0.0;
    double angle = 0.0;
    std::vector<float> intensity;
};

struct GroundTruthMask {
    int neighborhood = 0;
    int height = 0;
    int width = 0;
    /// 1 inside the neighborhood, 0 elsewhere.
    std::vector<std::uint8_t> pixels;

    std::size_t area() const;
};

struct Tissue {
    MultiplexImage image;
    std::vector<GroundTruthMask> masks;
    std::vector<Cell> cells;
    /// Neighborhood index per pixel, row-major.
    std::vector<std::uint8_t> region;
};

/// Deterministic for fixed (params, seed). Throws RuntimeError when hardcore placement
/// cannot reach the requested density.
Tissue simulate_tissue(const TissueParams& params, std::uint64_t seed);
Tissue simulate_tissue(const ParadigmSpec& spec, int group, std::uint64_t seed);

struct PatientRecord {
    std::string patient_id;
    int label = 0;
    std::string group_name;
    std::uint64_t seed = 0;
    std::vector<std::string> images;
    /// Neighborhood id -> mask path, relative to the cohort root.
    std::vector<std::pair<std::string, std::string>> masks;
    std::string cells;
};

struct SyntheticCohort {
    std::filesystem::path root;
    std::string paradigm;
    std::uint64_t seed = 0;
    std::vector<std::string> label_names;
    std::vector<PatientRecord> patients;
};

inline constexpr const char* kManifestName = "manifest.json";

/// Simulates per_group x O patients in parallel and writes images, masks, cell tables,
/// then the manifest (single writer, after all workers finish).
SyntheticCohort simulate_cohort(const ParadigmSpec& spec, int per_group, std::uint64_t seed,
                                const std::filesystem::path& out_dir);

void write_cell_table(const std::filesystem::path& path, const std::vector<Cell>& cells);
/// Geometry and intensities are not stored in the CSV; only id, position and labels return.
std::vector<Cell> read_cell_table(const std::filesystem::path& path);
void write_mask(const std::filesystem::path& path, const GroundTruthMask& mask);
GroundTruthMask read_mask(const std::filesystem::path& path, int neighborhood);

struct RealizationReport {
    struct Fraction {
        int neighborhood, phenotype;
        double expected;
        std::optional<double> measured;
        bool flagged;
    };
    struct MarkerMean {
        int phenotype, marker;
        double expected;
        std::optional<double> measured;
        bool flagged;
    };
    std::vector<Fraction> fractions;
    std::vector<MarkerMean> marker_means;

    bool ok() const;
    const Fraction& fraction(int neighborhood, int phenotype) const;
    const MarkerMean& marker_mean(int phenotype, int marker) const;
};

/// Compares realized phenotype fractions (and, given the image, footprint marker means)
/// against the generative parameters. Report-only: never throws on deviations.
RealizationReport validate_realization(const std::vector<Cell>& cells, const TissueParams& params,
                                       const MultiplexImage* image = nullptr, double fraction_tolerance = 0.05,
                                       double marker_tolerance = 0.05);

/// Mean over `from` cells of the distance to the nearest `to` cell. NaN when either set is empty.
double mean_nearest_distance(const std::vector<Cell>& cells, int from_phenotype, int to_phenotype);

} // namespace naronet::synth
