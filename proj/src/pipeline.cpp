#include "naronet/pipeline.hpp"

#include "naronet/metrics.hpp"
#include "naronet/parallel.hpp"
#include "naronet/rng.hpp"
#include "naronet/training.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <set>

namespace naronet::pipeline {

namespace {

constexpr const char* kCohortDir = "cohort";
constexpr const char* kPclDir = "pcl";
constexpr const char* kEmbedDir = "embeddings";
constexpr const char* kGraphDir = "graphs";
constexpr const char* kModelDir = "model";
constexpr const char* kSearchDir = "search";
constexpr const char* kResultsDir = "results";
constexpr const char* kInsightsDir = "insights";
constexpr const char* kReportDir = "report";
constexpr const char* kIndexName = "index.json";

// Stage-specific child seeds.
enum SeedTag : std::uint64_t { kSeedPcl = 11, kSeedTrain, kSeedSearch, kSeedEval, kSeedInsights };

fs::path manifest_path(const RunConfig& cfg) { return cfg.out / kCohortDir / synth::kManifestName; }

std::string lower_extension(const fs::path& p) {
    std::string e = p.extension().string();
    std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return e;
}

fs::path resolve(const fs::path& root, const std::string& p) {
    const fs::path path(p);
    return path.is_absolute() ? path : root / path;
}

std::string relative_or_absolute(const fs::path& p, const fs::path& root) {
    std::error_code ec;
    const fs::path rel = fs::relative(p, root, ec);
    if (!ec && !rel.empty() && rel.native().rfind("..", 0) != 0) {
        return rel.generic_string();
    }
    return fs::absolute(p).lexically_normal().generic_string();
}

io::json config_json(const RunConfig& cfg) { return cfg.to_json(); }

} // namespace

std::string to_string(EvalMode m) {
    switch (m) {
    case EvalMode::crossval_10:
        return "crossval_10";
    case EvalMode::leave_one_patient_out:
        return "leave_one_patient_out";
    case EvalMode::single_split:
        return "single_split";
    }
    return "crossval_10";
}

EvalMode parse_eval_mode(std::string_view s) {
    if (s == "crossval_10" || s == "crossval") {
        return EvalMode::crossval_10;
    }
    if (s == "leave_one_patient_out" || s == "lopo") {
        return EvalMode::leave_one_patient_out;
    }
    if (s == "single_split") {
        return EvalMode::single_split;
    }
    throw ConfigError("unknown evaluation mode '" + std::string(s) +
                      "'; expected crossval_10, leave_one_patient_out or single_split");
}

void RunConfig::validate() const {
    for (const auto& s : stages) {
        if (std::find(stage_names().begin(), stage_names().end(), s) == stage_names().end()) {
            throw ConfigError("unknown stage '" + s + "'");
        }
    }
    if (out.empty()) {
        throw ConfigError("output directory is empty");
    }
    if (folds < 2) {
        throw ConfigError("need at least two folds");
    }
    if (simulate.per_group < 0) {
        throw ConfigError("per_group must be non-negative");
    }
    pcl.validate();
    model.validate();
    space.validate();
    asha.validate();
}

io::json RunConfig::to_json() const {
    io::json j;
    j["stages"] = stages;
    j["out"] = out.generic_string();
    j["seed"] = seed;
    j["simulate"] = {{"paradigm", simulate.paradigm},
                     {"scale", synth::to_string(simulate.scale)},
                     {"groups", simulate.groups},
                     {"per_group", simulate.per_group},
                     {"cell_density", simulate.cell_density}};
    j["pcl"] = pcl.to_json();
    j["model"] = model.to_json();
    j["space"] = space.to_json();
    j["asha"] = {{"n_trials", asha.n_trials}, {"eta", asha.eta}, {"rung_epochs", asha.rung_epochs}};
    j["eval"] = to_string(eval);
    j["folds"] = folds;
    j["report"] = {{"top_k", report.top_k}, {"adjust_p", report.adjust_p}};
    return j;
}

RunConfig RunConfig::from_json(const io::json& j) {
    RunConfig c;
    try {
        c.stages = j.value("stages", c.stages);
        if (j.contains("out")) {
            c.out = j.at("out").get<std::string>();
        }
        c.seed = j.value("seed", c.seed);
        if (j.contains("simulate")) {
            const auto& s = j.at("simulate");
            c.simulate.paradigm = s.value("paradigm", c.simulate.paradigm);
            if (s.contains("scale")) {
                c.simulate.scale = synth::parse_scale(s.at("scale").get<std::string>());
            }
            if (s.contains("groups")) {
                const auto& g = s.at("groups");
                c.simulate.groups = g.is_string() ? synth::parse_group_list(g.get<std::string>()) : g.get<std::vector<int>>();
            }
            c.simulate.per_group = s.value("per_group", c.simulate.per_group);
            c.simulate.cell_density = s.value("cell_density", c.simulate.cell_density);
        }
        if (j.contains("pcl")) {
            c.pcl = pcl::PCLConfig::from_json(j.at("pcl"));
        }
        if (j.contains("model")) {
            // Accepts a best-config file from the search stage as well.
            const auto& m = j.at("model");
            c.model = core::ModelConfig::from_json(m.contains("config") ? m.at("config") : m);
        }
        if (j.contains("space")) {
            c.space = search::SearchSpace::from_json(j.at("space"));
        }
        if (j.contains("asha")) {
            const auto& a = j.at("asha");
            c.asha.n_trials = a.value("n_trials", c.asha.n_trials);
            c.asha.eta = a.value("eta", c.asha.eta);
            c.asha.rung_epochs = a.value("rung_epochs", c.asha.rung_epochs);
        }
        if (j.contains("eval")) {
            c.eval = parse_eval_mode(j.at("eval").get<std::string>());
        }
        c.folds = j.value("folds", c.folds);
        if (j.contains("report")) {
            c.report.top_k = j.at("report").value("top_k", c.report.top_k);
            c.report.adjust_p = j.at("report").value("adjust_p", c.report.adjust_p);
        }
    } catch (const io::json::exception& e) {
        throw ConfigError(std::string("run config: ") + e.what());
    }
    c.validate();
    return c;
}

void CohortManifest::validate() const {
    if (patients.empty()) {
        throw ConfigError("cohort manifest lists no patients");
    }
    if (label_names.empty()) {
        throw ConfigError("cohort manifest has no label vocabulary");
    }
    std::set<std::string> ids, image_ids;
    for (const auto& p : patients) {
        if (!ids.insert(p.patient_id).second) {
            throw ConfigError("duplicate patient id " + p.patient_id);
        }
        if (p.images.empty()) {
            throw ConfigError("patient " + p.patient_id + " has no image");
        }
        if (p.label < 0 || p.label >= static_cast<int>(label_names.size())) {
            throw ConfigError("patient " + p.patient_id + " has a label outside the vocabulary");
        }
        for (const auto& im : p.images) {
            if (!image_ids.insert(im.image_id).second) {
                throw ConfigError("duplicate image id " + im.image_id);
            }
        }
    }
}

std::size_t CohortManifest::num_images() const {
    std::size_t n = 0;
    for (const auto& p : patients) {
        n += p.images.size();
    }
    return n;
}

CohortManifest read_manifest(const fs::path& path) {
    const io::json j = io::read_json(path);
    const fs::path root = path.parent_path();
    CohortManifest m;
    try {
        m.label_names = j.at("label_names").get<std::vector<std::string>>();
        m.channel_names = j.value("channel_names", std::vector<std::string>{});
        m.relevant_masks = j.value("relevant_masks", std::vector<std::string>{});
        m.seed = j.value("seed", std::uint64_t{0});
        for (const auto& pj : j.at("patients")) {
            ManifestPatient p;
            p.patient_id = pj.at("patient_id").get<std::string>();
            p.label = pj.at("label").get<int>();
            for (const auto& im : pj.at("images")) {
                ImageRef ref;
                if (im.is_string()) {
                    ref.path = resolve(root, im.get<std::string>());
                    ref.image_id = ref.path.stem().string();
                } else {
                    ref.path = resolve(root, im.at("path").get<std::string>());
                    ref.image_id = im.value("image_id", ref.path.stem().string());
                }
                p.images.push_back(std::move(ref));
            }
            if (pj.contains("masks")) {
                for (const auto& [nb, mp] : pj.at("masks").items()) {
                    p.masks[nb] = resolve(root, mp.get<std::string>());
                }
            }
            m.patients.push_back(std::move(p));
        }
    } catch (const io::json::exception& e) {
        throw ConfigError("malformed cohort manifest " + path.string() + ": " + e.what());
    }
    m.validate();
    return m;
}

void write_manifest(const fs::path& path, const CohortManifest& m, std::uint64_t seed) {
    const fs::path root = path.parent_path();
    io::json j;
    j["format"] = "naronet-cohort";
    j["version"] = 1;
    j["seed"] = seed;
    j["label_names"] = m.label_names;
    j["channel_names"] = m.channel_names;
    j["relevant_masks"] = m.relevant_masks;
    j["patients"] = io::json::array();
    for (const auto& p : m.patients) {
        io::json pj{{"patient_id", p.patient_id}, {"label", p.label}, {"images", io::json::array()}};
        for (const auto& im : p.images) {
            pj["images"].push_back({{"image_id", im.image_id}, {"path", relative_or_absolute(im.path, root)}});
        }
        if (!p.masks.empty()) {
            for (const auto& [nb, mp] : p.masks) {
                pj["masks"][nb] = relative_or_absolute(mp, root);
            }
        }
        j["patients"].push_back(pj);
    }
    io::json summary{{"patients", m.patients.size()}, {"labels", m.label_names}, {"channels", m.channel_names.size()}};
    j["provenance"] = io::provenance(seed, summary);
    io::write_json(path, j);
}

MultiplexImage load_image(const fs::path& path) {
    const std::string ext = lower_extension(path);
    if (ext == ".tif" || ext == ".tiff") {
        return io::read_tiff(path);
    }
    return io::read_image(path);
}

namespace {

int image_channels(const fs::path& path) {
    const std::string ext = lower_extension(path);
    if (ext == ".tif" || ext == ".tiff") {
        return io::read_tiff(path).channels;
    }
    return io::read_image_header(path).at("B").get<int>();
}

std::vector<std::string> image_channel_names(const fs::path& path, int channels) {
    const std::string ext = lower_extension(path);
    if (ext != ".tif" && ext != ".tiff") {
        const io::json h = io::read_image_header(path);
        if (h.contains("channel_names")) {
            return h.at("channel_names").get<std::vector<std::string>>();
        }
    }
    return default_channel_names(channels);
}

std::string cell(const io::CsvTable&, const std::vector<std::string>& row, int col) {
    return col >= 0 && col < static_cast<int>(row.size()) ? row[static_cast<std::size_t>(col)] : std::string();
}

int require_column(const io::CsvTable& t, const std::string& name, const fs::path& path) {
    const int c = t.column(name);
    if (c < 0) {
        throw ConfigError(path.string() + " has no '" + name + "' column");
    }
    return c;
}

} // namespace

CohortManifest ingest_external(const fs::path& images_csv, const fs::path& clinical_csv, const IngestOptions& options,
                               IngestReport* report) {
    const io::CsvTable images = io::read_csv(images_csv);
    const io::CsvTable clinical = io::read_csv(clinical_csv);
    const int img_col = require_column(images, options.image_column, images_csv);
    const int img_pid = require_column(images, options.patient_column, images_csv);
    const int cl_pid = require_column(clinical, options.patient_column, clinical_csv);
    const int cl_label = require_column(clinical, options.label_column, clinical_csv);
    const fs::path root = images_csv.parent_path();

    std::map<std::string, std::string> label_of;
    std::vector<std::string> clinical_order;
    for (const auto& row : clinical.rows) {
        const std::string pid = cell(clinical, row, cl_pid);
        if (pid.empty() || label_of.count(pid)) {
            continue;
        }
        label_of[pid] = cell(clinical, row, cl_label);
        clinical_order.push_back(pid);
    }

    IngestReport local;
    IngestReport& rep = report ? *report : local;
    std::map<std::string, std::vector<ImageRef>> images_of;
    std::vector<std::pair<fs::path, int>> channel_counts;
    for (const auto& row : images.rows) {
        const std::string pid = cell(images, row, img_pid);
        const fs::path path = resolve(root, cell(images, row, img_col));
        const auto it = label_of.find(pid);
        if (it == label_of.end() || it->second.empty()) {
            spdlog::warn("image {} has no clinical label; skipped", path.string());
            rep.unlabeled_images.push_back(path.string());
            continue;
        }
        if (!fs::exists(path)) {
            throw ConfigError("image file not found: " + path.string());
        }
        channel_counts.emplace_back(path, image_channels(path));
        images_of[pid].push_back({path.stem().string(), path});
    }
    if (channel_counts.empty()) {
        throw ConfigError("no labeled images to ingest");
    }

    // Reference channel count: the most common one, ties to the first seen.
    std::map<int, int> freq;
    for (const auto& [p, c] : channel_counts) {
        ++freq[c];
    }
    int ref = channel_counts.front().second;
    for (const auto& [c, n] : freq) {
        if (n > freq[ref]) {
            ref = c;
        }
    }
    std::string mismatch;
    for (const auto& [p, c] : channel_counts) {
        if (c != ref) {
            mismatch += "\n  " + p.string() + ": " + std::to_string(c) + " channels (expected " + std::to_string(ref) + ")";
        }
    }
    if (!mismatch.empty()) {
        throw ConfigError("channel count mismatch across images:" + mismatch);
    }

    CohortManifest m;
    std::set<std::string> vocab;
    for (const auto& pid : clinical_order) {
        if (images_of.count(pid)) {
            vocab.insert(label_of[pid]);
        }
    }
    m.label_names.assign(vocab.begin(), vocab.end());
    for (const auto& pid : clinical_order) {
        const auto it = images_of.find(pid);
        if (it == images_of.end()) {
            spdlog::warn("patient {} has no image; skipped", pid);
            rep.skipped_patients.push_back(pid);
            continue;
        }
        ManifestPatient p;
        p.patient_id = pid;
        p.label = static_cast<int>(std::distance(m.label_names.begin(),
                                                 std::find(m.label_names.begin(), m.label_names.end(), label_of[pid])));
        p.images = it->second;
        m.patients.push_back(std::move(p));
    }
    m.channel_names = image_channel_names(channel_counts.front().first, ref);
    m.validate();
    return m;
}

std::string to_string(RiskGroup g) {
    switch (g) {
    case RiskGroup::RI:
        return "RI";
    case RiskGroup::RII:
        return "RII";
    case RiskGroup::RIII:
        return "RIII";
    }
    return "RII";
}

std::optional<RiskGroup> stratify_survival(std::optional<double> months, const SurvivalThresholds& t) {
    if (!months || std::isnan(*months)) {
        return std::nullopt;
    }
    if (*months < 0.0) {
        throw ConfigError("survival months must be non-negative");
    }
    if (*months > t.low_risk_above) {
        return RiskGroup::RI;
    }
    if (*months < t.high_risk_below) {
        return RiskGroup::RIII;
    }
    return RiskGroup::RII;
}

std::vector<std::optional<RiskGroup>> stratify_survival(const std::vector<std::optional<double>>& months,
                                                        const SurvivalThresholds& t) {
    std::vector<std::optional<RiskGroup>> out;
    out.reserve(months.size());
    for (const auto& m : months) {
        out.push_back(stratify_survival(m, t));
    }
    return out;
}

graph::PatchGraph cell_feature_graph(const Mat& features, const std::vector<std::pair<double, double>>& xy,
                                     const std::string& patient_id, int label, int k) {
    const int n = static_cast<int>(features.rows());
    if (n < 2) {
        throw ConfigError("a cell graph needs at least two cells");
    }
    if (static_cast<int>(xy.size()) != n) {
        throw ConfigError("cell coordinates and features differ in count");
    }
    if (k < 1) {
        throw ConfigError("k must be positive");
    }
    const int kk = std::min(k, n - 1);
    std::set<graph::Edge> edges;
    std::vector<std::pair<double, int>> dist(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            const double dx = xy[i].first - xy[j].first, dy = xy[i].second - xy[j].second;
            dist[static_cast<std::size_t>(j)] = {j == i ? std::numeric_limits<double>::infinity() : dx * dx + dy * dy, j};
        }
        std::partial_sort(dist.begin(), dist.begin() + kk, dist.end());
        for (int r = 0; r < kk; ++r) {
            const auto j = static_cast<std::uint32_t>(dist[static_cast<std::size_t>(r)].second);
            edges.insert({static_cast<std::uint32_t>(i), j});
            edges.insert({j, static_cast<std::uint32_t>(i)});
        }
    }
    graph::PatchGraph g;
    g.patient_id = patient_id;
    g.label = label;
    g.Z = features;
    g.edges.assign(edges.begin(), edges.end());
    g.images.push_back({patient_id, 0, 0, 1});
    for (int i = 0; i < n; ++i) {
        g.coords.push_back({0, static_cast<int>(std::lround(xy[i].second)), static_cast<int>(std::lround(xy[i].first))});
    }
    return g;
}

graph::PatchGraph read_cell_feature_graph(const fs::path& csv, const std::string& patient_id, int label, int k) {
    const io::CsvTable t = io::read_csv(csv);
    const int cx = require_column(t, "x", csv);
    const int cy = require_column(t, "y", csv);
    std::vector<int> feature_cols;
    for (int c = 0; c < static_cast<int>(t.header.size()); ++c) {
        if (c != cx && c != cy && t.header[static_cast<std::size_t>(c)] != "cell_id") {
            feature_cols.push_back(c);
        }
    }
    Mat f(static_cast<Eigen::Index>(t.rows.size()), static_cast<Eigen::Index>(feature_cols.size()));
    std::vector<std::pair<double, double>> xy;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        try {
            xy.emplace_back(std::stod(cell(t, t.rows[r], cx)), std::stod(cell(t, t.rows[r], cy)));
            for (std::size_t c = 0; c < feature_cols.size(); ++c) {
                f(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = std::stod(cell(t, t.rows[r], feature_cols[c]));
            }
        } catch (const std::exception&) {
            throw ConfigError(csv.string() + ": non-numeric value on data row " + std::to_string(r + 1));
        }
    }
    return cell_feature_graph(f, xy, patient_id, label, k);
}

GroundTruth load_ground_truth(const CohortManifest& manifest) {
    GroundTruth gt;
    if (manifest.relevant_masks.empty()) {
        return gt;
    }
    for (const auto& p : manifest.patients) {
        std::vector<std::uint8_t> raster;
        int h = 0, w = 0;
        for (const auto& nb : manifest.relevant_masks) {
            const auto it = p.masks.find(nb);
            if (it == p.masks.end()) {
                throw ConfigError("patient " + p.patient_id + " lacks the " + nb + " ground-truth mask");
            }
            const auto px = io::read_png_gray(it->second, h, w);
            if (raster.empty()) {
                raster.assign(px.size(), 0);
            }
            if (px.size() != raster.size()) {
                throw ConfigError("ground-truth masks of patient " + p.patient_id + " differ in size");
            }
            for (std::size_t i = 0; i < px.size(); ++i) {
                raster[i] = static_cast<std::uint8_t>(raster[i] | (px[i] ? 1 : 0));
            }
        }
        // Synthetic patients hold a single image; the mask applies to each.
        for (std::size_t i = 0; i < p.images.size(); ++i) {
            gt.rasters[p.patient_id].push_back(raster);
            gt.sizes[p.patient_id].emplace_back(h, w);
        }
    }
    return gt;
}

insights::InterpretabilityResult cohort_interpretability(const core::NaroNetModel& model,
                                                         const std::vector<graph::PatchGraph>& graphs,
                                                         const GroundTruth& truth) {
    const auto analysis = insights::analyze_cohort(model, graphs);
    const Mat pir = insights::pir_matrix(model, analysis.abundances);
    std::vector<std::vector<std::vector<std::uint8_t>>> rasters;
    std::vector<std::vector<std::pair<int, int>>> sizes;
    for (const auto& g : graphs) {
        const auto it = truth.rasters.find(g.patient_id);
        if (it == truth.rasters.end() || it->second.size() < g.images.size()) {
            throw ConfigError("no ground truth for patient " + g.patient_id);
        }
        rasters.push_back(it->second);
        sizes.push_back(truth.sizes.at(g.patient_id));
    }
    return insights::interpretability_scores(model, graphs, analysis, pir, rasters, sizes);
}

const std::vector<std::string>& stage_names() {
    static const std::vector<std::string> names = {"simulate", "pcl-train", "embed",       "graph", "train",
                                                   "search",   "crossval",  "bioinsights", "report"};
    return names;
}

namespace {

struct StageOutput {
    const char* stage;
    fs::path file;
};

// Stages in dependency order with the file that marks their completion.
std::vector<StageOutput> chain(const RunConfig& cfg) {
    return {{"simulate", manifest_path(cfg)},
            {"pcl-train", cfg.out / kPclDir / "encoder.bin"},
            {"embed", cfg.out / kEmbedDir / kIndexName},
            {"graph", cfg.out / kGraphDir / kIndexName}};
}

std::size_t upstream_count(const std::string& stage) {
    if (stage == "simulate") {
        return 0;
    }
    if (stage == "pcl-train") {
        return 1;
    }
    if (stage == "embed") {
        return 2;
    }
    if (stage == "graph") {
        return 3;
    }
    return 4;
}

} // namespace

void require_stage_inputs(const RunConfig& cfg, const std::string& stage) {
    const auto c = chain(cfg);
    const std::size_t n = upstream_count(stage);
    for (std::size_t i = 0; i < n; ++i) {
        if (!fs::exists(c[i].file)) {
            const std::string first = i == 0 ? "simulate (or ingest)" : c[i].stage;
            throw ConfigError(stage + " needs the output of stage '" + first + "' (missing " + c[i].file.string() +
                              "); run `naronet " + (i == 0 ? "simulate" : c[i].stage) + "` first");
        }
    }
}

std::vector<graph::PatchGraph> load_image_graphs(const fs::path& out) {
    const io::json index = io::read_json(out / kGraphDir / kIndexName);
    std::vector<graph::PatchGraph> graphs;
    for (const auto& e : index.at("graphs")) {
        graphs.push_back(graph::read_graph(out / kGraphDir / e.at("file").get<std::string>()));
    }
    return graphs;
}

std::vector<graph::PatchGraph> load_patient_graphs(const fs::path& out) {
    const auto images = load_image_graphs(out);
    std::vector<std::string> order;
    std::map<std::string, std::vector<graph::PatchGraph>> by_patient;
    for (const auto& g : images) {
        if (!by_patient.count(g.patient_id)) {
            order.push_back(g.patient_id);
        }
        by_patient[g.patient_id].push_back(g);
    }
    std::vector<graph::PatchGraph> out_graphs;
    for (const auto& pid : order) {
        const auto& list = by_patient[pid];
        out_graphs.push_back(list.size() == 1 ? list.front() : graph::merge_patient_graphs(list));
    }
    return out_graphs;
}

void run_simulate(const RunConfig& cfg) {
    auto spec = synth::build_paradigm(cfg.simulate.paradigm, cfg.simulate.scale);
    if (!cfg.simulate.groups.empty()) {
        spec = synth::restrict_groups(spec, cfg.simulate.groups);
    }
    if (cfg.simulate.cell_density >= 0.0) {
        spec.base.cell_density = cfg.simulate.cell_density;
    }
    const int per_group = cfg.simulate.per_group > 0 ? cfg.simulate.per_group : spec.per_group;
    const auto cohort = synth::simulate_cohort(spec, per_group, cfg.seed, cfg.out / kCohortDir);
    spdlog::info("simulated {} patients of {} into {}", cohort.patients.size(), spec.name,
                 (cfg.out / kCohortDir).string());
}

void run_ingest(const RunConfig& cfg, const fs::path& images_csv, const fs::path& clinical_csv,
                const IngestOptions& options) {
    IngestReport report;
    const CohortManifest m = ingest_external(images_csv, clinical_csv, options, &report);
    io::ensure_directory(cfg.out / kCohortDir);
    write_manifest(manifest_path(cfg), m, cfg.seed);
    io::json r{{"patients", m.patients.size()},
               {"images", m.num_images()},
               {"channels", m.channel_names.size()},
               {"skipped_patients", report.skipped_patients},
               {"unlabeled_images", report.unlabeled_images}};
    io::write_json(cfg.out / kCohortDir / "ingest_report.json", r);
    spdlog::info("ingested {} patients, {} images, B={}", m.patients.size(), m.num_images(), m.channel_names.size());
}

void run_pcl_train(const RunConfig& cfg) {
    require_stage_inputs(cfg, "pcl-train");
    const CohortManifest m = read_manifest(manifest_path(cfg));
    std::vector<MultiplexImage> images;
    for (const auto& p : m.patients) {
        for (const auto& im : p.images) {
            images.push_back(load_image(im.path));
        }
    }
    const pcl::ChannelStats stats = pcl::normalize_cohort(images);
    const std::uint64_t seed = derive_seed(cfg.seed, {kSeedPcl});
    const pcl::PCLModel model = pcl::train_pcl(images, stats, cfg.pcl, seed);
    const fs::path dir = cfg.out / kPclDir;
    io::ensure_directory(dir);
    pcl::save_pcl_model(dir / "encoder.bin", model, cfg.seed);
    pcl::write_training_log(dir / "training_log.csv", model.log);
    const double acc = pcl::evaluate_contrast_accuracy(model, images, 4, derive_seed(seed, {1}));
    io::write_json(dir / "summary.json", {{"steps", cfg.pcl.steps},
                                          {"final_loss", model.log.empty() ? 0.0 : model.log.back().loss},
                                          {"contrast_accuracy", acc},
                                          {"chance_level", 100.0 / (2.0 * cfg.pcl.crops_per_step - 1.0)},
                                          {"provenance", io::provenance(cfg.seed, cfg.pcl.to_json())}});
    spdlog::info("PCL trained: contrast accuracy {:.3f}", acc);
}

void run_embed(const RunConfig& cfg) {
    require_stage_inputs(cfg, "embed");
    const CohortManifest m = read_manifest(manifest_path(cfg));
    const pcl::PCLModel model = pcl::load_pcl_model(cfg.out / kPclDir / "encoder.bin");
    const fs::path dir = cfg.out / kEmbedDir;
    io::ensure_directory(dir);
    struct Job {
        const ManifestPatient* patient;
        const ImageRef* image;
    };
    std::vector<Job> jobs;
    for (const auto& p : m.patients) {
        for (const auto& im : p.images) {
            jobs.push_back({&p, &im});
        }
    }
    const io::json prov = io::provenance(cfg.seed, model.config.to_json());
    parallel_for(jobs.size(), [&](std::size_t i) {
        MultiplexImage img = load_image(jobs[i].image->path);
        if (img.channels != static_cast<int>(model.stats.mean.size())) {
            throw ConfigError("image " + jobs[i].image->image_id + " has " + std::to_string(img.channels) +
                              " channels; the encoder expects " + std::to_string(model.stats.mean.size()));
        }
        pcl::apply_channel_stats(img, model.stats);
        const auto e = pcl::tile_and_embed(img, *model.encoder, model.config.patch_side, jobs[i].image->image_id);
        pcl::write_embedded(dir / (jobs[i].image->image_id + ".emb"), e,
                            {{"patient_id", jobs[i].patient->patient_id},
                             {"label", jobs[i].patient->label},
                             {"provenance", prov}});
    });
    io::json index{{"images", io::json::array()}, {"provenance", prov}};
    for (const auto& j : jobs) {
        index["images"].push_back({{"image_id", j.image->image_id},
                                   {"patient_id", j.patient->patient_id},
                                   {"label", j.patient->label},
                                   {"file", j.image->image_id + ".emb"}});
    }
    io::write_json(dir / kIndexName, index);
    spdlog::info("embedded {} images", jobs.size());
}

void run_graph(const RunConfig& cfg) {
    require_stage_inputs(cfg, "graph");
    const io::json index = io::read_json(cfg.out / kEmbedDir / kIndexName);
    const fs::path dir = cfg.out / kGraphDir;
    io::ensure_directory(dir);
    const io::json prov = index.at("provenance");
    io::json out{{"graphs", io::json::array()}, {"provenance", prov}};
    for (const auto& e : index.at("images")) {
        const auto emb = pcl::read_embedded(cfg.out / kEmbedDir / e.at("file").get<std::string>());
        const auto g = graph::build_patch_graph(emb, e.at("patient_id").get<std::string>(), e.at("label").get<int>());
        const std::string file = e.at("image_id").get<std::string>() + ".graph";
        graph::write_graph(dir / file, g, {{"provenance", prov}});
        out["graphs"].push_back({{"image_id", e.at("image_id")},
                                 {"patient_id", g.patient_id},
                                 {"label", g.label},
                                 {"nodes", g.num_nodes()},
                                 {"edges", g.num_edges()},
                                 {"file", file}});
    }
    io::write_json(dir / kIndexName, out);
    spdlog::info("built {} patch graphs", out["graphs"].size());
}

namespace {

core::ModelConfig with_classes(core::ModelConfig c, const CohortManifest& m) {
    if (c.O == 0) {
        c.O = static_cast<int>(m.label_names.size());
    }
    return c;
}

} // namespace

void run_train(const RunConfig& cfg) {
    require_stage_inputs(cfg, "train");
    const CohortManifest m = read_manifest(manifest_path(cfg));
    const auto graphs = load_patient_graphs(cfg.out);
    const core::ModelConfig mc = with_classes(cfg.model, m);
    std::vector<core::EpochLog> log;
    const auto model = core::train_model(graphs, mc, mc.O, derive_seed(cfg.seed, {kSeedTrain}), &log);
    const fs::path dir = cfg.out / kModelDir;
    io::ensure_directory(dir);
    core::save_model(dir / "model.bin", *model, {{"provenance", io::provenance(cfg.seed, mc.to_json())}});
    core::write_epoch_log(dir / "epoch_log.csv", log);
    const Mat proba = core::predict(*model, graphs);
    std::vector<int> labels;
    for (const auto& g : graphs) {
        labels.push_back(g.label);
    }
    const double acc = metrics::accuracy(labels, metrics::argmax_rows(proba));
    io::write_json(dir / "summary.json", {{"train_accuracy", acc},
                                          {"epochs", mc.epochs},
                                          {"patients", graphs.size()},
                                          {"provenance", io::provenance(cfg.seed, mc.to_json())}});
    spdlog::info("trained on {} patients: training accuracy {:.3f}", graphs.size(), acc);
}

void run_search(const RunConfig& cfg) {
    require_stage_inputs(cfg, "search");
    const CohortManifest m = read_manifest(manifest_path(cfg));
    auto graphs = load_patient_graphs(cfg.out);
    search::SearchSpace space = cfg.space;
    space.base = with_classes(space.base, m);
    const GroundTruth truth = load_ground_truth(m);
    search::InterpretabilityFn interpret;
    if (!truth.empty()) {
        interpret = [&truth](const core::NaroNetModel& model, const std::vector<graph::PatchGraph>& held_out) {
            return cohort_interpretability(model, held_out, truth).cohort;
        };
    }
    search::GraphTrialRunner runner(std::move(graphs), derive_seed(cfg.seed, {kSeedSearch, 1}), interpret);
    search::AshaOptions asha = cfg.asha;
    asha.seed = derive_seed(cfg.seed, {kSeedSearch});
    const auto result = search::asha_search(space, runner, asha);
    const fs::path dir = cfg.out / kSearchDir;
    io::ensure_directory(dir);
    search::write_trial_table(dir / "trials.csv", result);
    search::write_best_config(dir / "best_config.json", result, cfg.seed);
    spdlog::info("search finished: best trial {} with held-out accuracy {:.3f}", result.best_trial, result.best_accuracy);
}

namespace {

core::EvaluationReport single_split(const std::vector<graph::PatchGraph>& graphs, const core::ModelConfig& cfg,
                                    std::uint64_t seed) {
    core::EvaluationReport r;
    for (const auto& g : graphs) {
        r.labels.push_back(g.label);
    }
    const auto fold = core::stratified_folds(r.labels, 10, seed);
    std::vector<graph::PatchGraph> train, test;
    for (std::size_t i = 0; i < graphs.size(); ++i) {
        (fold[i] == 0 ? test : train).push_back(graphs[i]);
    }
    const auto model = core::train_model(train, cfg, cfg.O, derive_seed(seed, {1}));
    const Mat p = core::predict(*model, test);
    r.labels.clear();
    for (const auto& g : test) {
        r.ids.push_back(g.patient_id);
        r.labels.push_back(g.label);
        r.fold_of.push_back(0);
    }
    r.proba = p;
    r.predicted = metrics::argmax_rows(p);
    core::summarize(r, cfg.O);
    r.folds.push_back({0, test.size(), r.accuracy});
    return r;
}

} // namespace

void run_crossval(const RunConfig& cfg) {
    require_stage_inputs(cfg, "crossval");
    const CohortManifest m = read_manifest(manifest_path(cfg));
    const core::ModelConfig mc = with_classes(cfg.model, m);
    const std::uint64_t seed = derive_seed(cfg.seed, {kSeedEval});
    core::EvaluationReport r;
    switch (cfg.eval) {
    case EvalMode::crossval_10:
        r = core::cross_validate(load_patient_graphs(cfg.out), mc, cfg.folds, seed);
        break;
    case EvalMode::leave_one_patient_out:
        r = core::leave_one_patient_out(load_image_graphs(cfg.out), mc, seed);
        break;
    case EvalMode::single_split:
        r = single_split(load_patient_graphs(cfg.out), mc, seed);
        break;
    }
    const fs::path dir = cfg.out / kResultsDir;
    io::ensure_directory(dir);
    core::write_predictions(dir / "predictions.csv", r);
    core::write_fold_metrics(dir / "folds.csv", r);
    io::json confusion = io::json::array();
    for (Eigen::Index i = 0; i < r.confusion.rows(); ++i) {
        io::json row = io::json::array();
        for (Eigen::Index j = 0; j < r.confusion.cols(); ++j) {
            row.push_back(r.confusion(i, j));
        }
        confusion.push_back(row);
    }
    io::write_json(dir / "summary.json", {{"mode", to_string(cfg.eval)},
                                          {"patients", r.ids.size()},
                                          {"accuracy", r.accuracy},
                                          {"ci95", {r.ci.lower, r.ci.upper}},
                                          {"auc", r.auc},
                                          {"confusion", confusion},
                                          {"label_names", m.label_names},
                                          {"model", mc.to_json()},
                                          {"provenance", io::provenance(cfg.seed, mc.to_json())}});
    spdlog::info("{}: accuracy {:.3f} (95% CI {:.3f}-{:.3f}), AUC {:.3f}", to_string(cfg.eval), r.accuracy, r.ci.lower,
                 r.ci.upper, r.auc);
}

void run_bioinsights(const RunConfig& cfg) {
    require_stage_inputs(cfg, "bioinsights");
    const CohortManifest m = read_manifest(manifest_path(cfg));
    const auto graphs = load_patient_graphs(cfg.out);
    const fs::path dir = cfg.out / kInsightsDir;
    io::ensure_directory(dir);
    const fs::path trained = cfg.out / kModelDir / "model.bin";
    std::unique_ptr<core::NaroNetModel> model;
    if (fs::exists(trained)) {
        model = std::make_unique<core::NaroNetModel>(core::load_model(trained));
    } else {
        const core::ModelConfig mc = with_classes(cfg.model, m);
        spdlog::info("no trained model under {}; training one on the full cohort", (cfg.out / kModelDir).string());
        model = core::train_model(graphs, mc, mc.O, derive_seed(cfg.seed, {kSeedInsights}));
        core::save_model(dir / "model.bin", *model, {{"provenance", io::provenance(cfg.seed, mc.to_json())}});
    }

    std::map<std::string, std::vector<ImageRef>> refs;
    for (const auto& p : m.patients) {
        refs[p.patient_id] = p.images;
    }
    std::vector<std::vector<MultiplexImage>> images(graphs.size());
    for (std::size_t p = 0; p < graphs.size(); ++p) {
        for (const auto& gi : graphs[p].images) {
            const auto& list = refs.at(graphs[p].patient_id);
            const auto it = std::find_if(list.begin(), list.end(), [&](const ImageRef& r) { return r.image_id == gi.image_id; });
            if (it == list.end()) {
                throw ConfigError("image " + gi.image_id + " is not in the cohort manifest");
            }
            images[p].push_back(load_image(it->path));
        }
    }
    insights::ReportOptions options = cfg.report;
    options.seed = cfg.seed;
    insights::emit_reports(*model, graphs, images, dir, options);

    const GroundTruth truth = load_ground_truth(m);
    if (!truth.empty()) {
        const auto r = cohort_interpretability(*model, graphs, truth);
        io::CsvWriter w(dir / "interpretability.csv", {"patient_id", "image_id", "selected_tme", "score"});
        std::size_t k = 0;
        for (std::size_t p = 0; p < graphs.size(); ++p) {
            for (const auto& gi : graphs[p].images) {
                const double s = r.per_image[k++];
                w.row({graphs[p].patient_id, gi.image_id, insights::tme_name(model->config(), r.selected_tme[p]),
                       std::isnan(s) ? "" : io::format_number(s)});
            }
        }
        io::write_json(dir / "interpretability.json",
                       {{"cohort_score", std::isnan(r.cohort) ? io::json(nullptr) : io::json(r.cohort)},
                        {"relevant_masks", m.relevant_masks},
                        {"provenance", io::provenance(cfg.seed, model->config().to_json())}});
        spdlog::info("cohort interpretability {:.3f}", r.cohort);
    }
}

void run_report(const RunConfig& cfg) {
    struct Source {
        fs::path file;
        const char* prefix;
    };
    const std::vector<Source> sources = {{cfg.out / kPclDir / "summary.json", "pcl"},
                                         {cfg.out / kModelDir / "summary.json", "train"},
                                         {cfg.out / kSearchDir / "best_config.json", "search"},
                                         {cfg.out / kResultsDir / "summary.json", "eval"},
                                         {cfg.out / kInsightsDir / "summary.json", "insights"},
                                         {cfg.out / kInsightsDir / "interpretability.json", "interpretability"}};
    io::json report = io::json::object();
    for (const auto& s : sources) {
        if (fs::exists(s.file)) {
            report[s.prefix] = io::read_json(s.file);
        }
    }
    if (report.empty()) {
        throw ConfigError("nothing to report under " + cfg.out.string() + "; run crossval or bioinsights first");
    }
    const fs::path dir = cfg.out / kReportDir;
    io::ensure_directory(dir);
    io::CsvWriter w(dir / "results.csv", {"metric", "value"});
    for (const auto& [section, body] : report.items()) {
        for (const auto& [key, value] : body.items()) {
            if (value.is_number()) {
                w.row({section + "." + key, io::format_number(value.get<double>())});
            }
        }
    }
    report["provenance"] = io::provenance(cfg.seed, config_json(cfg));
    io::write_json(dir / "report.json", report);
}

void run_stage(const std::string& stage, const RunConfig& cfg) {
    if (stage == "simulate") {
        run_simulate(cfg);
    } else if (stage == "pcl-train") {
        run_pcl_train(cfg);
    } else if (stage == "embed") {
        run_embed(cfg);
    } else if (stage == "graph") {
        run_graph(cfg);
    } else if (stage == "train") {
        run_train(cfg);
    } else if (stage == "search") {
        run_search(cfg);
    } else if (stage == "crossval") {
        run_crossval(cfg);
    } else if (stage == "bioinsights") {
        run_bioinsights(cfg);
    } else if (stage == "report") {
        run_report(cfg);
    } else {
        throw ConfigError("unknown stage '" + stage + "'");
    }
}

void run_stages(const RunConfig& cfg) {
    for (const auto& s : cfg.stages) {
        run_stage(s, cfg);
    }
}

} // namespace naronet::pipeline
