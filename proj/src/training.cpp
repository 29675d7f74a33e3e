#include "naronet/training.hpp"

#include "naronet/io.hpp"
#include "naronet/parallel.hpp"
#include "naronet/rng.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <map>
#include <numeric>

namespace naronet::core {

Trainer::Trainer(NaroNetModel& model, std::uint64_t seed)
    : model_(model), optimizer_(model.config().lr), seed_(seed) {}

LossBreakdown Trainer::training_step(const std::vector<const graph::PatchGraph*>& batch, std::uint64_t aug_seed) {
    const ModelConfig& cfg = model_.config();
    LossBreakdown sum;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const graph::PatchGraph& g = *batch[i];
        LossBreakdown b;
        ag::Var loss;
        if (cfg.rho > 0.0 && cfg.aug_modes != 0) {
            const graph::PatchGraph aug = graph::augment_graph(g, cfg.rho, cfg.aug_modes, derive_seed(aug_seed, {i}));
            loss = model_.loss(model_.forward(aug), g.label, &b);
        } else {
            loss = model_.loss(model_.forward(g), g.label, &b);
        }
        loss.backward();
        sum.ce += b.ce;
        sum.l_e += b.l_e;
        sum.collapse += b.collapse;
        sum.total += b.total;
        sum.ep += b.ep;
        sum.en += b.en;
        sum.ea += b.ea;
        sum.pp += b.pp;
        sum.pn += b.pn;
        sum.pa += b.pa;
    }
    optimizer_.step(model_.params());
    return sum;
}

void Trainer::train_epochs(const std::vector<graph::PatchGraph>& graphs, int epochs) {
    if (graphs.empty()) {
        throw ConfigError("training needs at least one graph");
    }
    const int bs = model_.config().batch_size;
    for (int e = 0; e < epochs; ++e, ++epochs_done_) {
        Rng rng(derive_seed(seed_, {0x65706f6368ULL, static_cast<std::uint64_t>(epochs_done_)}));
        std::vector<std::size_t> order(graphs.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), rng);
        double loss = 0.0, ce = 0.0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(bs)) {
            std::vector<const graph::PatchGraph*> batch;
            for (std::size_t i = start; i < std::min(order.size(), start + static_cast<std::size_t>(bs)); ++i) {
                batch.push_back(&graphs[order[i]]);
            }
            const LossBreakdown b = training_step(batch, derive_seed(seed_, {static_cast<std::uint64_t>(epochs_done_), start}));
            loss += b.total;
            ce += b.ce;
        }
        const double n = static_cast<double>(graphs.size());
        log_.push_back({epochs_done_, loss / n, ce / n, std::exp(-ce / n)});
    }
}

std::unique_ptr<NaroNetModel> train_model(const std::vector<graph::PatchGraph>& graphs, const ModelConfig& cfg,
                                          int num_classes, std::uint64_t seed, std::vector<EpochLog>* log) {
    if (graphs.empty()) {
        throw ConfigError("training needs at least one graph");
    }
    auto model = std::make_unique<NaroNetModel>(cfg, graphs.front().dim(), num_classes, seed);
    Trainer trainer(*model, derive_seed(seed, {1}));
    trainer.train_epochs(graphs, cfg.epochs);
    if (log) {
        *log = trainer.log();
    }
    return model;
}

Mat predict(const NaroNetModel& model, const std::vector<graph::PatchGraph>& graphs) {
    Mat out(static_cast<Eigen::Index>(graphs.size()), model.num_classes());
    for (std::size_t i = 0; i < graphs.size(); ++i) {
        out.row(static_cast<Eigen::Index>(i)) = model.predict_proba(graphs[i]);
    }
    return out;
}

std::vector<int> stratified_folds(const std::vector<int>& labels, int folds, std::uint64_t seed) {
    if (folds < 2) {
        throw ConfigError("need at least two folds");
    }
    std::map<int, std::vector<int>> by_class;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        by_class[labels[i]].push_back(static_cast<int>(i));
    }
    std::vector<int> fold_of(labels.size(), 0);
    Rng rng(derive_seed(seed, {0x666f6c64ULL}));
    int next = 0;
    for (auto& [label, idx] : by_class) {
        std::shuffle(idx.begin(), idx.end(), rng);
        for (int i : idx) {
            fold_of[static_cast<std::size_t>(i)] = next;
            next = (next + 1) % folds;
        }
    }
    return fold_of;
}

int count_classes(const std::vector<graph::PatchGraph>& graphs) {
    int mx = -1;
    for (const auto& g : graphs) {
        if (g.label < 0) {
            throw ConfigError("negative label for patient " + g.patient_id);
        }
        mx = std::max(mx, g.label);
    }
    return mx + 1;
}

void summarize(EvaluationReport& r, int num_classes) {
    r.predicted = metrics::argmax_rows(r.proba);
    r.accuracy = metrics::accuracy(r.labels, r.predicted);
    r.ci = metrics::accuracy_ci(r.accuracy, r.labels.size());
    r.auc = metrics::auc_from_probabilities(r.proba, r.labels);
    r.confusion = metrics::confusion_matrix(r.labels, r.predicted, num_classes);
}

EvaluationReport cross_validate(const std::vector<graph::PatchGraph>& graphs, const ModelConfig& cfg, int folds,
                                std::uint64_t seed) {
    const int O = cfg.O > 0 ? cfg.O : count_classes(graphs);
    EvaluationReport r;
    for (const auto& g : graphs) {
        r.ids.push_back(g.patient_id);
        r.labels.push_back(g.label);
    }
    r.fold_of = stratified_folds(r.labels, folds, seed);
    r.proba = Mat::Zero(static_cast<Eigen::Index>(graphs.size()), O);

    std::vector<std::vector<graph::PatchGraph>> train(folds), test(folds);
    std::vector<std::vector<std::size_t>> test_idx(folds);
    for (std::size_t i = 0; i < graphs.size(); ++i) {
        for (int f = 0; f < folds; ++f) {
            if (r.fold_of[i] == f) {
                test[f].push_back(graphs[i]);
                test_idx[f].push_back(i);
            } else {
                train[f].push_back(graphs[i]);
            }
        }
    }
    for (int f = 0; f < folds; ++f) {
        std::vector<bool> present(O, false);
        for (const auto& g : train[f]) {
            present[g.label] = true;
        }
        for (int c = 0; c < O; ++c) {
            if (!present[c]) {
                throw ConfigError("class " + std::to_string(c) + " is absent from the training split of fold " +
                                  std::to_string(f));
            }
        }
    }

    std::vector<Mat> fold_proba(folds);
    parallel_for(static_cast<std::size_t>(folds), [&](std::size_t f) {
        if (test[f].empty()) {
            return;
        }
        auto model = train_model(train[f], cfg, O, derive_seed(seed, {0x6376ULL, f}));
        fold_proba[f] = predict(*model, test[f]);
    });
    for (int f = 0; f < folds; ++f) {
        std::vector<int> truth, pred;
        for (std::size_t k = 0; k < test_idx[f].size(); ++k) {
            r.proba.row(static_cast<Eigen::Index>(test_idx[f][k])) = fold_proba[f].row(static_cast<Eigen::Index>(k));
            truth.push_back(r.labels[test_idx[f][k]]);
        }
        FoldResult fr;
        fr.fold = f;
        fr.n_test = test_idx[f].size();
        if (!truth.empty()) {
            fr.accuracy = metrics::accuracy(truth, metrics::argmax_rows(fold_proba[f]));
        }
        r.folds.push_back(fr);
        spdlog::info("fold {}: {} test patients, accuracy {:.3f}", f, fr.n_test, fr.accuracy);
    }
    summarize(r, O);
    return r;
}

EvaluationReport leave_one_patient_out(const std::vector<graph::PatchGraph>& image_graphs, const ModelConfig& cfg,
                                       std::uint64_t seed) {
    const int O = cfg.O > 0 ? cfg.O : count_classes(image_graphs);
    std::vector<std::string> patients;
    std::map<std::string, std::vector<std::size_t>> images_of;
    for (std::size_t i = 0; i < image_graphs.size(); ++i) {
        const auto& id = image_graphs[i].patient_id;
        if (!images_of.count(id)) {
            patients.push_back(id);
        }
        images_of[id].push_back(i);
    }
    if (patients.size() < 3) {
        throw ConfigError("leave-one-patient-out needs at least three patients");
    }
    EvaluationReport r;
    r.ids = patients;
    r.proba = Mat::Zero(static_cast<Eigen::Index>(patients.size()), O);
    for (std::size_t p = 0; p < patients.size(); ++p) {
        r.labels.push_back(image_graphs[images_of[patients[p]].front()].label);
        r.fold_of.push_back(static_cast<int>(p));
    }
    parallel_for(patients.size(), [&](std::size_t p) {
        std::vector<graph::PatchGraph> train, held;
        for (std::size_t i = 0; i < image_graphs.size(); ++i) {
            (image_graphs[i].patient_id == patients[p] ? held : train).push_back(image_graphs[i]);
        }
        auto model = train_model(train, cfg, O, derive_seed(seed, {0x6c6f706fULL, p}));
        r.proba.row(static_cast<Eigen::Index>(p)) = predict(*model, held).colwise().mean();
    });
    for (std::size_t p = 0; p < patients.size(); ++p) {
        FoldResult fr;
        fr.fold = static_cast<int>(p);
        fr.n_test = 1;
        Eigen::Index c;
        r.proba.row(static_cast<Eigen::Index>(p)).maxCoeff(&c);
        fr.accuracy = c == r.labels[p] ? 1.0 : 0.0;
        r.folds.push_back(fr);
    }
    summarize(r, O);
    return r;
}

void write_predictions(const std::filesystem::path& path, const EvaluationReport& r) {
    std::vector<std::string> header = {"patient_id", "true_label", "fold", "predicted"};
    for (Eigen::Index c = 0; c < r.proba.cols(); ++c) {
        header.push_back("p_" + std::to_string(c));
    }
    io::CsvWriter w(path, header);
    for (std::size_t i = 0; i < r.ids.size(); ++i) {
        std::vector<std::string> row = {r.ids[i], std::to_string(r.labels[i]), std::to_string(r.fold_of[i]),
                                        std::to_string(r.predicted[i])};
        for (Eigen::Index c = 0; c < r.proba.cols(); ++c) {
            row.push_back(io::format_number(r.proba(static_cast<Eigen::Index>(i), c)));
        }
        w.row(row);
    }
}

void write_fold_metrics(const std::filesystem::path& path, const EvaluationReport& r) {
    io::CsvWriter w(path, {"fold", "n_test", "accuracy"});
    for (const auto& f : r.folds) {
        w.row({std::to_string(f.fold), std::to_string(f.n_test), io::format_number(f.accuracy)});
    }
}

void write_epoch_log(const std::filesystem::path& path, const std::vector<EpochLog>& log) {
    io::CsvWriter w(path, {"epoch", "loss", "ce", "train_likelihood"});
    for (const auto& e : log) {
        w.row({std::to_string(e.epoch), io::format_number(e.loss), io::format_number(e.ce),
               io::format_number(e.train_likelihood)});
    }
}

} // namespace naronet::core
