#include "naronet/common.hpp"
#include "naronet/io.hpp"
#include "naronet/parallel.hpp"
#include "naronet/pipeline.hpp"

#include <CLI11.hpp>
#include <spdlog/sinks/basic_file_sink.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using namespace naronet;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct Overrides {
    std::optional<std::uint64_t> seed;
    std::optional<std::string> config;
    std::optional<std::string> out;
    unsigned threads = 0;
    bool verbose = false;

    std::optional<std::string> paradigm, scale, groups;
    std::optional<int> per_group;
    std::optional<double> density;

    std::string images_csv, clinical_csv;
    pipeline::IngestOptions ingest;

    std::optional<int> pcl_steps, embedding_dim, crops;

    std::optional<int> epochs;
    std::optional<std::string> model_config;

    std::optional<int> trials, eta;
    std::vector<int> rungs;

    std::optional<int> folds;
    std::optional<std::string> mode;

    std::optional<int> top_k;
    bool adjust_p = false;

    std::vector<std::string> stages;
};

pipeline::RunConfig build_config(const Overrides& o) {
    pipeline::RunConfig cfg;
    if (o.config) {
        cfg = pipeline::RunConfig::from_json(io::read_json(*o.config));
    }
    if (o.out) {
        cfg.out = *o.out;
    } else if (const char* root = std::getenv("NARONET_OUTPUT_ROOT"); root && *root) {
        cfg.out = root;
    }
    if (o.seed) {
        cfg.seed = *o.seed;
    }
    if (o.paradigm) {
        cfg.simulate.paradigm = *o.paradigm;
    }
    if (o.scale) {
        cfg.simulate.scale = synth::parse_scale(*o.scale);
    }
    if (o.groups) {
        cfg.simulate.groups = synth::parse_group_list(*o.groups);
    }
    if (o.per_group) {
        cfg.simulate.per_group = *o.per_group;
    }
    if (o.density) {
        cfg.simulate.cell_density = *o.density;
    }
    if (o.pcl_steps) {
        cfg.pcl.steps = *o.pcl_steps;
    }
    if (o.embedding_dim) {
        cfg.pcl.embedding_dim = *o.embedding_dim;
    }
    if (o.crops) {
        cfg.pcl.crops_per_step = *o.crops;
    }
    if (o.model_config) {
        const io::json j = io::read_json(*o.model_config);
        cfg.model = core::ModelConfig::from_json(j.contains("config") ? j.at("config") : j);
    }
    if (o.epochs) {
        cfg.model.epochs = *o.epochs;
    }
    if (o.trials) {
        cfg.asha.n_trials = *o.trials;
    }
    if (o.eta) {
        cfg.asha.eta = *o.eta;
    }
    if (!o.rungs.empty()) {
        cfg.asha.rung_epochs = o.rungs;
    }
    if (o.folds) {
        cfg.folds = *o.folds;
    }
    if (o.mode) {
        cfg.eval = pipeline::parse_eval_mode(*o.mode);
    }
    if (o.top_k) {
        cfg.report.top_k = *o.top_k;
    }
    if (o.adjust_p) {
        cfg.report.adjust_p = true;
    }
    if (!o.stages.empty()) {
        cfg.stages = o.stages;
    }
    cfg.validate();
    return cfg;
}

void setup_logging(const fs::path& out, bool verbose) {
    auto console = std::make_shared<spdlog::sinks::stderr_color_sink_mt>();
    console->set_pattern("[%l] %v");
    std::vector<spdlog::sink_ptr> sinks{console};
    io::ensure_directory(out);
    // Timestamps live only in the run log.
    sinks.push_back(std::make_shared<spdlog::sinks::basic_file_sink_mt>((out / "run.log").string()));
    auto logger = std::make_shared<spdlog::logger>("naronet", sinks.begin(), sinks.end());
    logger->set_level(verbose ? spdlog::level::debug : spdlog::level::info);
    spdlog::set_default_logger(logger);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"NaroNet: tumor-microenvironment discovery from multiplexed images"};
    app.set_version_flag("--version", std::string(kToolVersion));
    app.require_subcommand(1);
    app.fallthrough();

    Overrides o;
    app.add_option("--seed", o.seed, "Master seed");
    app.add_option("--config", o.config, "Run configuration (JSON)")->check(CLI::ExistingFile);
    app.add_option("--out", o.out, "Output root (default: $NARONET_OUTPUT_ROOT, then the config, then ./naronet_out)");
    app.add_option("--threads", o.threads, "Worker thread cap (0 = all cores)");
    app.add_flag("-v,--verbose", o.verbose, "Debug logging");

    auto* simulate = app.add_subcommand("simulate", "Generate a synthetic cohort with ground truth");
    simulate->add_option("--paradigm", o.paradigm, "PMI1, PMI2, PF1, PF2, CCI1, CCI2 or NNI1");
    simulate->add_option("--scale", o.scale, "desk or paper");
    simulate->add_option("--groups", o.groups, "Patient types to keep, e.g. I,III");
    simulate->add_option("--per-group", o.per_group, "Patients per group");
    simulate->add_option("--density", o.density, "Cells per 1000 pixels");

    auto* ingest = app.add_subcommand("ingest", "Build a cohort manifest from external images and a clinical table");
    ingest->add_option("--images", o.images_csv, "CSV with image and patient_id columns")->required()->check(CLI::ExistingFile);
    ingest->add_option("--clinical", o.clinical_csv, "CSV with patient_id and label columns")->required()->check(CLI::ExistingFile);
    ingest->add_option("--image-column", o.ingest.image_column, "Image path column");
    ingest->add_option("--patient-column", o.ingest.patient_column, "Patient id column");
    ingest->add_option("--label-column", o.ingest.label_column, "Label column of the clinical table");

    auto* pcl_train = app.add_subcommand("pcl-train", "Train the contrastive patch encoder");
    pcl_train->add_option("--steps", o.pcl_steps, "Training steps");
    pcl_train->add_option("--embedding-dim", o.embedding_dim, "Patch embedding size");
    pcl_train->add_option("--crops", o.crops, "Crops per step");

    auto* embed = app.add_subcommand("embed", "Tile and embed every image");
    auto* graph = app.add_subcommand("graph", "Build patch graphs from embeddings");

    auto* train = app.add_subcommand("train", "Train a model on the whole cohort");
    train->add_option("--epochs", o.epochs, "Training epochs");
    train->add_option("--model-config", o.model_config, "Model configuration or search best_config.json")
        ->check(CLI::ExistingFile);

    auto* search = app.add_subcommand("search", "Successive-halving architecture search");
    search->add_option("--trials", o.trials, "Number of sampled configurations");
    search->add_option("--eta", o.eta, "Reduction factor");
    search->add_option("--rungs", o.rungs, "Epoch budget per rung")->delimiter(',');

    auto* crossval = app.add_subcommand("crossval", "Evaluate the model configuration on held-out patients");
    crossval->add_option("--folds", o.folds, "Number of folds");
    crossval->add_option("--mode", o.mode, "crossval_10, leave_one_patient_out or single_split");
    crossval->add_option("--epochs", o.epochs, "Training epochs");
    crossval->add_option("--model-config", o.model_config, "Model configuration or search best_config.json")
        ->check(CLI::ExistingFile);

    auto* bioinsights = app.add_subcommand("bioinsights", "Interpretability reports for a trained model");
    bioinsights->add_option("--top-k", o.top_k, "Representative patches per TME");
    bioinsights->add_flag("--adjust-p", o.adjust_p, "Benjamini-Hochberg adjusted p-values");
    bioinsights->add_option("--epochs", o.epochs, "Epochs when a model has to be trained first");

    auto* report = app.add_subcommand("report", "Collect stage summaries into results.csv");

    auto* run = app.add_subcommand("run", "Run a list of stages in order");
    run->add_option("--stages", o.stages, "Stages, e.g. simulate,pcl-train,embed,graph,crossval")->delimiter(',');

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }

    try {
        const pipeline::RunConfig cfg = build_config(o);
        thread_limit() = o.threads;
        setup_logging(cfg.out, o.verbose);
        spdlog::get("naronet")->flush_on(spdlog::level::info);
        if (simulate->parsed()) {
            pipeline::run_simulate(cfg);
        } else if (ingest->parsed()) {
            pipeline::run_ingest(cfg, o.images_csv, o.clinical_csv, o.ingest);
        } else if (pcl_train->parsed()) {
            pipeline::run_pcl_train(cfg);
        } else if (embed->parsed()) {
            pipeline::run_embed(cfg);
        } else if (graph->parsed()) {
            pipeline::run_graph(cfg);
        } else if (train->parsed()) {
            pipeline::run_train(cfg);
        } else if (search->parsed()) {
            pipeline::run_search(cfg);
        } else if (crossval->parsed()) {
            pipeline::run_crossval(cfg);
        } else if (bioinsights->parsed()) {
            pipeline::run_bioinsights(cfg);
        } else if (report->parsed()) {
            pipeline::run_report(cfg);
        } else if (run->parsed()) {
            if (cfg.stages.empty()) {
                throw ConfigError("no stages given; use --stages or a config with a stage list");
            }
            pipeline::run_stages(cfg);
        }
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return 0;
}
