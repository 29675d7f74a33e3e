#include "naronet/bioinsights.hpp"

#include "naronet/io.hpp"
#include "naronet/metrics.hpp"
#include "naronet/stats.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <tuple>

namespace naronet::insights {

TmeRef tme_ref(const core::ModelConfig& cfg, int t) {
    if (t < 0 || t >= cfg.P + cfg.N + cfg.A) {
        throw ConfigError("TME index " + std::to_string(t) + " out of range");
    }
    if (t < cfg.P) {
        return {Level::phenotype, t};
    }
    if (t < cfg.P + cfg.N) {
        return {Level::neighborhood, t - cfg.P};
    }
    return {Level::area, t - cfg.P - cfg.N};
}

std::string tme_name(const core::ModelConfig& cfg, int t) {
    const TmeRef r = tme_ref(cfg, t);
    const char prefix = r.level == Level::phenotype ? 'P' : r.level == Level::neighborhood ? 'N' : 'A';
    return prefix + std::to_string(r.index + 1);
}

namespace {

void row_argmax(const Mat& m, std::vector<int>& idx, std::vector<double>& conf) {
    idx.resize(static_cast<std::size_t>(m.rows()));
    conf.resize(static_cast<std::size_t>(m.rows()));
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        Eigen::Index c;
        conf[static_cast<std::size_t>(r)] = m.row(r).maxCoeff(&c);
        idx[static_cast<std::size_t>(r)] = static_cast<int>(c);
    }
}

} // namespace

CohortAnalysis analyze_cohort(const core::NaroNetModel& model, const std::vector<graph::PatchGraph>& graphs) {
    const auto& cfg = model.config();
    CohortAnalysis a;
    const auto M = static_cast<Eigen::Index>(graphs.size());
    a.abundances.resize(M, model.num_tmes());
    a.proba.resize(M, model.num_classes());
    ag::NoGradGuard no_grad;
    for (std::size_t p = 0; p < graphs.size(); ++p) {
        const auto f = model.forward(graphs[p]);
        a.ids.push_back(graphs[p].patient_id);
        a.labels.push_back(graphs[p].label);
        a.abundances.row(static_cast<Eigen::Index>(p)) = f.abundance.value();
        a.proba.row(static_cast<Eigen::Index>(p)) = ag::softmax_rows(f.logits).value();
        std::vector<int> ph, nb, area_of;
        std::vector<double> ph_c, nb_c, area_c;
        row_argmax(core::activate(f.s_p, cfg.activation).value(), ph, ph_c);
        row_argmax(core::activate(f.s_n, cfg.activation).value(), nb, nb_c);
        row_argmax(core::activate(f.s_a, cfg.activation).value(), area_of, area_c);
        std::vector<int> ar(nb.size());
        std::vector<double> ar_c(nb.size());
        for (std::size_t l = 0; l < nb.size(); ++l) {
            ar[l] = area_of[static_cast<std::size_t>(nb[l])];
            ar_c[l] = area_c[static_cast<std::size_t>(nb[l])] * nb_c[l];
        }
        a.patch_phenotype.push_back(std::move(ph));
        a.phenotype_confidence.push_back(std::move(ph_c));
        a.patch_neighborhood.push_back(std::move(nb));
        a.neighborhood_confidence.push_back(std::move(nb_c));
        a.patch_area.push_back(std::move(ar));
        a.area_confidence.push_back(std::move(ar_c));
    }
    a.predicted = metrics::argmax_rows(a.proba);
    return a;
}

std::vector<GroupTest> abundance_group_test(const Mat& abundances, const std::vector<int>& labels, bool adjust) {
    if (static_cast<std::size_t>(abundances.rows()) != labels.size()) {
        throw ConfigError("abundance rows and labels differ in count");
    }
    std::vector<int> groups = labels;
    std::sort(groups.begin(), groups.end());
    groups.erase(std::unique(groups.begin(), groups.end()), groups.end());
    if (groups.size() < 2) {
        throw ConfigError("group test needs at least two groups");
    }
    for (int g : groups) {
        if (std::count(labels.begin(), labels.end(), g) < 3) {
            throw ConfigError("group " + std::to_string(g) + " has fewer than three patients");
        }
    }
    std::vector<GroupTest> out;
    for (Eigen::Index t = 0; t < abundances.cols(); ++t) {
        for (std::size_t i = 0; i < groups.size(); ++i) {
            for (std::size_t j = i + 1; j < groups.size(); ++j) {
                std::vector<double> a, b;
                for (std::size_t m = 0; m < labels.size(); ++m) {
                    const double v = abundances(static_cast<Eigen::Index>(m), t);
                    if (labels[m] == groups[i]) {
                        a.push_back(v);
                    } else if (labels[m] == groups[j]) {
                        b.push_back(v);
                    }
                }
                const double p = stats::mann_whitney(a, b).p;
                out.push_back({static_cast<int>(t), groups[i], groups[j], p, p, stats::median(a), stats::median(b)});
            }
        }
    }
    if (adjust) {
        std::vector<double> p;
        for (const auto& r : out) {
            p.push_back(r.p);
        }
        const auto adj = stats::benjamini_hochberg(p);
        for (std::size_t i = 0; i < out.size(); ++i) {
            out[i].p_adjusted = adj[i];
        }
    }
    return out;
}

AblationResult ablation_test(const core::NaroNetModel& model, const Mat& abundances, int t, double alpha) {
    if (t < 0 || t >= abundances.cols()) {
        throw ConfigError("TME index " + std::to_string(t) + " out of range");
    }
    std::vector<double> original, ablated;
    for (Eigen::Index m = 0; m < abundances.rows(); ++m) {
        const RowVec a = abundances.row(m);
        const RowVec p = model.classify_proba(a);
        Eigen::Index c;
        p.maxCoeff(&c);
        RowVec z = a;
        z(t) = 0.0;
        original.push_back(p(c));
        ablated.push_back(model.classify_proba(z)(c));
    }
    AblationResult r;
    r.tme = t;
    r.p = stats::mann_whitney(original, ablated).p;
    double drop = 0.0;
    for (std::size_t i = 0; i < original.size(); ++i) {
        drop += original[i] - ablated[i];
    }
    r.mean_drop = original.empty() ? 0.0 : drop / static_cast<double>(original.size());
    r.predictive = r.p < alpha && r.mean_drop > 0.0;
    return r;
}

double pir(const core::NaroNetModel& model, const RowVec& abundance, int t) {
    if (t < 0 || t >= abundance.size()) {
        throw ConfigError("TME index " + std::to_string(t) + " out of range");
    }
    const RowVec p = model.classify_proba(abundance);
    Eigen::Index c;
    p.maxCoeff(&c);
    RowVec z = abundance;
    z(t) = 0.0;
    const double q = model.classify_proba(z)(c);
    return q > 0.0 ? p(c) / q : kInfinitePir;
}

Mat pir_matrix(const core::NaroNetModel& model, const Mat& abundances) {
    Mat out(abundances.rows(), abundances.cols());
    for (Eigen::Index m = 0; m < abundances.rows(); ++m) {
        for (Eigen::Index t = 0; t < abundances.cols(); ++t) {
            out(m, t) = pir(model, abundances.row(m), static_cast<int>(t));
        }
    }
    return out;
}

Mat finite_pir(const Mat& pir) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < pir.size(); ++i) {
        if (std::isfinite(pir.data()[i])) {
            mx = std::max(mx, pir.data()[i]);
        }
    }
    if (!std::isfinite(mx)) {
        mx = 1.0;
    }
    return pir.unaryExpr([mx](double v) { return std::isfinite(v) ? v : mx; });
}

std::vector<std::uint8_t> tme_raster(const graph::PatchGraph& g, const CohortAnalysis& a, std::size_t patient,
                                     const core::ModelConfig& cfg, int t, int image, int height, int width) {
    const TmeRef ref = tme_ref(cfg, t);
    const auto& assign = ref.level == Level::phenotype      ? a.patch_phenotype[patient]
                         : ref.level == Level::neighborhood ? a.patch_neighborhood[patient]
                                                            : a.patch_area[patient];
    std::vector<std::uint8_t> raster(static_cast<std::size_t>(height) * width, 0);
    const int S = g.images.at(static_cast<std::size_t>(image)).patch_side;
    for (std::size_t l = 0; l < g.coords.size(); ++l) {
        const auto& c = g.coords[l];
        if (c.image != image || assign[l] != ref.index) {
            continue;
        }
        for (int y = c.row * S; y < std::min(height, (c.row + 1) * S); ++y) {
            for (int x = c.col * S; x < std::min(width, (c.col + 1) * S); ++x) {
                raster[static_cast<std::size_t>(y) * width + x] = 1;
            }
        }
    }
    return raster;
}

double interpretability(const std::vector<std::uint8_t>& tme, const std::vector<std::uint8_t>& ground_truth) {
    if (tme.size() != ground_truth.size()) {
        throw ConfigError("TME raster and ground-truth mask differ in size");
    }
    std::size_t inside = 0, total = 0;
    for (std::size_t i = 0; i < tme.size(); ++i) {
        if (tme[i]) {
            ++total;
            inside += ground_truth[i] ? 1 : 0;
        }
    }
    return total ? static_cast<double>(inside) / static_cast<double>(total) : std::numeric_limits<double>::quiet_NaN();
}

InterpretabilityResult interpretability_scores(const core::NaroNetModel& model, const std::vector<graph::PatchGraph>& graphs,
                                               const CohortAnalysis& analysis, const Mat& pir,
                                               const std::vector<std::vector<std::vector<std::uint8_t>>>& truth,
                                               const std::vector<std::vector<std::pair<int, int>>>& image_sizes) {
    InterpretabilityResult r;
    double sum = 0.0;
    int used = 0;
    for (std::size_t p = 0; p < graphs.size(); ++p) {
        Eigen::Index row, t;
        finite_pir(pir.row(static_cast<Eigen::Index>(p))).maxCoeff(&row, &t);
        r.selected_tme.push_back(static_cast<int>(t));
        for (std::size_t i = 0; i < graphs[p].images.size(); ++i) {
            const auto [h, w] = image_sizes[p][i];
            const auto raster = tme_raster(graphs[p], analysis, p, model.config(), static_cast<int>(t),
                                           static_cast<int>(i), h, w);
            const double s = interpretability(raster, truth[p][i]);
            r.per_image.push_back(s);
            if (std::isnan(s)) {
                spdlog::warn("patient {} image {}: selected TME {} covers no patch; excluded from interpretability",
                             graphs[p].patient_id, i, tme_name(model.config(), static_cast<int>(t)));
            } else {
                sum += s;
                ++used;
            }
        }
    }
    if (used > 0) {
        r.cohort = sum / used;
    }
    return r;
}

Mat tme_marker_heatmap(const core::NaroNetModel& model, const std::vector<graph::PatchGraph>& graphs,
                       const CohortAnalysis& analysis, const std::vector<std::vector<MultiplexImage>>& images) {
    const auto& cfg = model.config();
    const int T = model.num_tmes();
    const int B = images.empty() || images.front().empty() ? 0 : images.front().front().channels;
    Mat sums = Mat::Zero(T, B);
    std::vector<double> pixels(T, 0.0);
    for (std::size_t p = 0; p < graphs.size(); ++p) {
        const auto& g = graphs[p];
        for (std::size_t l = 0; l < g.coords.size(); ++l) {
            const auto& c = g.coords[l];
            const MultiplexImage& img = images[p][static_cast<std::size_t>(c.image)];
            const int S = g.images[static_cast<std::size_t>(c.image)].patch_side;
            RowVec mean = RowVec::Zero(B);
            for (int b = 0; b < B; ++b) {
                for (int y = c.row * S; y < (c.row + 1) * S; ++y) {
                    for (int x = c.col * S; x < (c.col + 1) * S; ++x) {
                        mean(b) += img.at(b, y, x);
                    }
                }
            }
            const double n = static_cast<double>(S) * S;
            const int tmes[] = {analysis.patch_phenotype[p][l], cfg.P + analysis.patch_neighborhood[p][l],
                                cfg.P + cfg.N + analysis.patch_area[p][l]};
            for (int t : tmes) {
                sums.row(t) += mean;
                pixels[t] += n;
            }
        }
    }
    for (int t = 0; t < T; ++t) {
        if (pixels[t] > 0.0) {
            sums.row(t) /= pixels[t];
        }
    }
    return cluster::standardize_columns(sums);
}

namespace {

void write_matrix(const std::filesystem::path& path, const std::vector<std::string>& row_names, const std::string& row_header,
                  const std::vector<std::string>& col_names, const Mat& m) {
    std::vector<std::string> header = {row_header};
    header.insert(header.end(), col_names.begin(), col_names.end());
    io::CsvWriter w(path, header);
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        std::vector<std::string> row = {row_names[static_cast<std::size_t>(r)]};
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            const double v = m(r, c);
            row.push_back(std::isinf(v) ? "inf" : io::format_number(v));
        }
        w.row(row);
    }
}

void write_curves(const std::filesystem::path& roc_path, const std::filesystem::path& pr_path, const Mat& proba,
                  const std::vector<int>& labels) {
    io::CsvWriter roc(roc_path, {"class", "fpr", "tpr", "threshold"});
    io::CsvWriter pr(pr_path, {"class", "recall", "precision", "threshold"});
    const Eigen::Index first = proba.cols() == 2 ? 1 : 0;
    for (Eigen::Index c = first; c < proba.cols(); ++c) {
        std::vector<double> s;
        std::vector<int> pos;
        for (std::size_t i = 0; i < labels.size(); ++i) {
            s.push_back(proba(static_cast<Eigen::Index>(i), c));
            pos.push_back(labels[i] == c ? 1 : 0);
        }
        auto fmt = [](double v) { return std::isinf(v) ? std::string("inf") : io::format_number(v); };
        for (const auto& pt : metrics::roc_curve(s, pos)) {
            roc.row({std::to_string(c), fmt(pt.x), fmt(pt.y), fmt(pt.threshold)});
        }
        for (const auto& pt : metrics::pr_curve(s, pos)) {
            pr.row({std::to_string(c), fmt(pt.x), fmt(pt.y), fmt(pt.threshold)});
        }
    }
}

void write_gallery(const std::filesystem::path& dir, const core::NaroNetModel& model,
                   const std::vector<graph::PatchGraph>& graphs, const CohortAnalysis& a,
                   const std::vector<std::vector<MultiplexImage>>& images, int top_k) {
    io::ensure_directory(dir);
    const auto& cfg = model.config();
    constexpr int kZoom = 4;
    io::json index = io::json::array();
    for (int t = 0; t < model.num_tmes(); ++t) {
        const TmeRef ref = tme_ref(cfg, t);
        // (confidence, patient, patch), best first.
        std::vector<std::tuple<double, std::size_t, std::size_t>> candidates;
        for (std::size_t p = 0; p < graphs.size(); ++p) {
            const auto& assign = ref.level == Level::phenotype      ? a.patch_phenotype[p]
                                 : ref.level == Level::neighborhood ? a.patch_neighborhood[p]
                                                                    : a.patch_area[p];
            const auto& conf = ref.level == Level::phenotype      ? a.phenotype_confidence[p]
                               : ref.level == Level::neighborhood ? a.neighborhood_confidence[p]
                                                                  : a.area_confidence[p];
            for (std::size_t l = 0; l < assign.size(); ++l) {
                if (assign[l] == ref.index) {
                    candidates.emplace_back(-conf[l], p, l);
                }
            }
        }
        const std::size_t keep = std::min(candidates.size(), static_cast<std::size_t>(top_k));
        std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep), candidates.end());
        for (std::size_t k = 0; k < keep; ++k) {
            const auto [neg_conf, p, l] = candidates[k];
            const auto& c = graphs[p].coords[l];
            const MultiplexImage& img = images[p][static_cast<std::size_t>(c.image)];
            const int S = graphs[p].images[static_cast<std::size_t>(c.image)].patch_side;
            // Max projection over markers, scaled by the crop's own maximum.
            std::vector<double> proj(static_cast<std::size_t>(S) * S, 0.0);
            double mx = 0.0;
            for (int y = 0; y < S; ++y) {
                for (int x = 0; x < S; ++x) {
                    double v = 0.0;
                    for (int b = 0; b < img.channels; ++b) {
                        v = std::max(v, static_cast<double>(img.at(b, c.row * S + y, c.col * S + x)));
                    }
                    proj[static_cast<std::size_t>(y) * S + x] = v;
                    mx = std::max(mx, v);
                }
            }
            std::vector<std::uint8_t> px(static_cast<std::size_t>(S * kZoom) * S * kZoom);
            for (int y = 0; y < S * kZoom; ++y) {
                for (int x = 0; x < S * kZoom; ++x) {
                    const double v = proj[static_cast<std::size_t>(y / kZoom) * S + x / kZoom];
                    px[static_cast<std::size_t>(y) * S * kZoom + x] =
                        static_cast<std::uint8_t>(mx > 0.0 ? std::lround(255.0 * v / mx) : 0);
                }
            }
            const std::string file = tme_name(cfg, t) + "_" + std::to_string(k + 1) + ".png";
            io::write_png_gray(dir / file, S * kZoom, S * kZoom, px);
            index.push_back({{"tme", tme_name(cfg, t)},
                             {"rank", k + 1},
                             {"file", file},
                             {"patient_id", graphs[p].patient_id},
                             {"image_id", graphs[p].images[static_cast<std::size_t>(c.image)].image_id},
                             {"row", c.row},
                             {"col", c.col},
                             {"confidence", -neg_conf}});
        }
    }
    io::write_json(dir / "index.json", index);
}

} // namespace

void emit_reports(const core::NaroNetModel& model, const std::vector<graph::PatchGraph>& graphs,
                  const std::vector<std::vector<MultiplexImage>>& images, const std::filesystem::path& out_dir,
                  const ReportOptions& options) {
    io::ensure_directory(out_dir);
    const auto& cfg = model.config();
    const CohortAnalysis a = analyze_cohort(model, graphs);
    const int T = model.num_tmes();
    std::vector<std::string> tmes;
    for (int t = 0; t < T; ++t) {
        tmes.push_back(tme_name(cfg, t));
    }

    if (!images.empty() && !images.front().empty()) {
        const Mat heat = tme_marker_heatmap(model, graphs, a, images);
        write_matrix(out_dir / "heatmap.csv", tmes, "tme", images.front().front().channel_names, heat);
    }
    write_matrix(out_dir / "abundance.csv", a.ids, "patient_id", tmes, a.abundances);

    write_curves(out_dir / "roc.csv", out_dir / "pr.csv", a.proba, a.labels);
    const auto confusion = metrics::confusion_matrix(a.labels, a.predicted, model.num_classes());
    {
        std::vector<std::string> header = {"true_label"};
        for (int c = 0; c < model.num_classes(); ++c) {
            header.push_back("pred_" + std::to_string(c));
        }
        io::CsvWriter w(out_dir / "confusion.csv", header);
        for (int r = 0; r < model.num_classes(); ++r) {
            std::vector<std::string> row = {std::to_string(r)};
            for (int c = 0; c < model.num_classes(); ++c) {
                row.push_back(std::to_string(confusion(r, c)));
            }
            w.row(row);
        }
    }

    {
        io::CsvWriter w(out_dir / "group_tests.csv",
                        {"tme", "group_a", "group_b", "p", "p_adjusted", "median_a", "median_b"});
        for (const auto& g : abundance_group_test(a.abundances, a.labels, options.adjust_p)) {
            w.row({tmes[static_cast<std::size_t>(g.tme)], std::to_string(g.group_a), std::to_string(g.group_b),
                   io::format_number(g.p), io::format_number(g.p_adjusted), io::format_number(g.median_a),
                   io::format_number(g.median_b)});
        }
    }
    {
        io::CsvWriter w(out_dir / "ablation.csv", {"tme", "p", "mean_drop", "predictive"});
        for (int t = 0; t < T; ++t) {
            const auto r = ablation_test(model, a.abundances, t);
            w.row({tmes[static_cast<std::size_t>(t)], io::format_number(r.p), io::format_number(r.mean_drop),
                   r.predictive ? "1" : "0"});
        }
    }

    const Mat pir = pir_matrix(model, a.abundances);
    write_matrix(out_dir / "pir.csv", a.ids, "patient_id", tmes, pir);
    const auto sub = cluster::patient_subcategories(finite_pir(pir));
    {
        io::CsvWriter w(out_dir / "subcategories.csv", {"patient_id", "label", "subcategory"});
        for (std::size_t p = 0; p < a.ids.size(); ++p) {
            w.row({a.ids[p], std::to_string(a.labels[p]), std::to_string(sub.labels[p])});
        }
    }

    if (!images.empty()) {
        write_gallery(out_dir / "gallery", model, graphs, a, images, options.top_k);
    }

    io::json summary;
    summary["accuracy"] = metrics::accuracy(a.labels, a.predicted);
    summary["auc"] = metrics::auc_from_probabilities(a.proba, a.labels);
    summary["subcategories"] = {{"k", sub.k}, {"silhouette", sub.silhouette}};
    summary["tmes"] = tmes;
    summary["provenance"] = io::provenance(options.seed, cfg.to_json());
    io::write_json(out_dir / "summary.json", summary);
}

} // namespace naronet::insights
