#include "naronet/model.hpp"

#include "naronet/rng.hpp"

#include <cmath>

namespace naronet::core {

using ag::Var;

namespace {

template <typename Enum>
Enum parse_enum(const io::json& j, const char* key, Enum fallback, std::initializer_list<std::pair<const char*, Enum>> options) {
    if (!j.contains(key)) {
        return fallback;
    }
    const std::string v = j.at(key).get<std::string>();
    std::string valid;
    for (const auto& [name, e] : options) {
        if (v == name) {
            return e;
        }
        valid += (valid.empty() ? "" : ", ") + std::string(name);
    }
    throw ConfigError(std::string(key) + ": unknown value '" + v + "' (expected " + valid + ")");
}

} // namespace

std::string to_string(Activation a) { return a == Activation::softmax ? "softmax" : "sigmoid"; }
std::string to_string(GnnVariant v) { return v == GnnVariant::plain ? "plain" : "residual"; }
std::string to_string(Aggregation a) { return a == Aggregation::mean_self_loop ? "mean_self_loop" : "bare"; }
std::string to_string(CollapseLoss c) { return c == CollapseLoss::orthogonal ? "orthogonal" : "patient_entropy"; }

void ModelConfig::validate() const {
    if (P < 2 || N < 2 || A < 2) {
        throw ConfigError("P, N and A must each be at least 2");
    }
    if (H < 1 || K < 1) {
        throw ConfigError("H and K must be at least 1");
    }
    for (double l : {lambdas.ep, lambdas.en, lambdas.ea, lambdas.pp, lambdas.pn, lambdas.pa}) {
        if (!(l >= 0.0)) {
            throw ConfigError("loss weights must be non-negative");
        }
    }
    if (!(rho >= 0.0 && rho <= 1.0)) {
        throw ConfigError("rho must lie in [0, 1]");
    }
    if (lr < 0.0 || epochs < 0 || batch_size < 1 || glore_nodes < 1) {
        throw ConfigError("lr and epochs must be non-negative, batch_size and glore_nodes positive");
    }
    if (O == 1 || O < 0) {
        throw ConfigError("O must be 0 (from data) or at least 2");
    }
}

io::json ModelConfig::to_json() const {
    return {{"P", P},
            {"N", N},
            {"A", A},
            {"H", H},
            {"K", K},
            {"activation", to_string(activation)},
            {"use_max", use_max},
            {"gnn_variant", to_string(gnn_variant)},
            {"aggregation", to_string(aggregation)},
            {"use_glore", use_glore},
            {"glore_nodes", glore_nodes},
            {"lambdas",
             {{"ep", lambdas.ep}, {"en", lambdas.en}, {"ea", lambdas.ea}, {"pp", lambdas.pp}, {"pn", lambdas.pn},
              {"pa", lambdas.pa}}},
            {"collapse", to_string(collapse)},
            {"rho", rho},
            {"aug_modes", graph::format_augment_modes(aug_modes)},
            {"lr", lr},
            {"epochs", epochs},
            {"batch_size", batch_size},
            {"O", O}};
}

ModelConfig ModelConfig::from_json(const io::json& j) {
    ModelConfig c;
    try {
        c.P = j.value("P", c.P);
        c.N = j.value("N", c.N);
        c.A = j.value("A", c.A);
        c.H = j.value("H", c.H);
        c.K = j.value("K", c.K);
        c.activation = parse_enum(j, "activation", c.activation,
                                  {{"softmax", Activation::softmax}, {"sigmoid", Activation::sigmoid}});
        c.use_max = j.value("use_max", c.use_max);
        c.gnn_variant = parse_enum(j, "gnn_variant", c.gnn_variant,
                                   {{"plain", GnnVariant::plain}, {"residual", GnnVariant::residual}});
        c.aggregation = parse_enum(j, "aggregation", c.aggregation,
                                   {{"mean_self_loop", Aggregation::mean_self_loop}, {"bare", Aggregation::bare}});
        c.use_glore = j.value("use_glore", c.use_glore);
        c.glore_nodes = j.value("glore_nodes", c.glore_nodes);
        if (j.contains("lambdas")) {
            const auto& l = j.at("lambdas");
            c.lambdas.ep = l.value("ep", 0.0);
            c.lambdas.en = l.value("en", 0.0);
            c.lambdas.ea = l.value("ea", 0.0);
            c.lambdas.pp = l.value("pp", 0.0);
            c.lambdas.pn = l.value("pn", 0.0);
            c.lambdas.pa = l.value("pa", 0.0);
        }
        c.collapse = parse_enum(j, "collapse", c.collapse,
                                {{"orthogonal", CollapseLoss::orthogonal},
                                 {"patient_entropy", CollapseLoss::patient_entropy}});
        c.rho = j.value("rho", c.rho);
        if (j.contains("aug_modes")) {
            c.aug_modes = graph::parse_augment_modes(j.at("aug_modes").get<std::string>());
        }
        c.lr = j.value("lr", c.lr);
        c.epochs = j.value("epochs", c.epochs);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.O = j.value("O", c.O);
    } catch (const io::json::exception& e) {
        throw ConfigError(std::string("model config: ") + e.what());
    }
    c.validate();
    return c;
}

std::shared_ptr<const ag::SparseMat> propagation_matrix(const graph::PatchGraph& g, Aggregation agg) {
    const int L = g.num_nodes();
    std::vector<Eigen::Triplet<double>> t;
    t.reserve(g.edges.size() + static_cast<std::size_t>(L));
    if (agg == Aggregation::bare) {
        for (const auto& [s, d] : g.edges) {
            t.emplace_back(static_cast<int>(d), static_cast<int>(s), 1.0);
        }
    } else {
        std::vector<double> in_degree(L, 1.0);
        for (const auto& e : g.edges) {
            in_degree[e.second] += 1.0;
        }
        for (int i = 0; i < L; ++i) {
            t.emplace_back(i, i, 1.0 / in_degree[i]);
        }
        for (const auto& [s, d] : g.edges) {
            t.emplace_back(static_cast<int>(d), static_cast<int>(s), 1.0 / in_degree[d]);
        }
    }
    auto m = std::make_shared<ag::SparseMat>(L, L);
    m->setFromTriplets(t.begin(), t.end());
    return m;
}

std::shared_ptr<const ag::SparseMat> adjacency_matrix(const graph::PatchGraph& g) {
    return propagation_matrix(g, Aggregation::bare);
}

Var activate(const Var& logits, Activation activation) {
    return activation == Activation::softmax ? ag::softmax_rows(logits) : ag::sigmoid(logits);
}

Var pool_abundance(const Var& logits, Activation activation, bool use_max) {
    Var s = activate(logits, activation);
    if (use_max) {
        s = ag::keep_row_max(s);
    }
    return ag::col_sum(s);
}

Var patch_entropy_loss(const Var& logits) {
    const Eigen::Index C = logits.cols();
    if (C < 2) {
        throw ConfigError("patch entropy needs at least two columns");
    }
    const Var plogp = ag::mul(ag::softmax_rows(logits), ag::log_softmax_rows(logits));
    return ag::scale(ag::sum(plogp), -1.0 / (static_cast<double>(logits.rows()) * std::log(static_cast<double>(C))));
}

Var patient_entropy_loss(const Var& abundance) {
    const Eigen::Index C = abundance.cols() * abundance.rows();
    if ((abundance.value().array() < 0.0).any()) {
        throw ConfigError("patient entropy: negative abundance");
    }
    if (abundance.value().sum() <= 0.0) {
        throw ConfigError("patient entropy: all-zero abundance");
    }
    if (C < 2) {
        throw ConfigError("patient entropy needs at least two entries");
    }
    const Var p = ag::div_scalar(abundance, ag::sum(abundance));
    return ag::scale(ag::sum(ag::xlogx(p)), 1.0 / std::log(static_cast<double>(C)));
}

Var orthogonal_loss(const Var& s) {
    const Var sts = ag::matmul(ag::transpose(s), s);
    const double norm = sts.value().norm();
    if (norm <= 0.0) {
        throw ConfigError("orthogonal loss: zero assignment matrix");
    }
    const Eigen::Index k = s.cols();
    const Mat target = Mat::Identity(k, k) / std::sqrt(static_cast<double>(k));
    return ag::frobenius_norm(ag::add_const(ag::div_scalar(sts, ag::frobenius_norm(sts)), -target));
}

Var gnn_forward(const Var& z, const std::shared_ptr<const ag::SparseMat>& m, const std::vector<Var>& weights,
                GnnVariant variant) {
    if (weights.empty()) {
        throw ConfigError("gnn_forward: K must be at least 1");
    }
    Var h = z;
    for (const auto& w : weights) {
        Var next = ag::matmul(ag::spmm(m, h), w);
        if (variant == GnnVariant::residual && next.cols() == h.cols()) {
            next = next + h;
        }
        h = ag::relu(next);
    }
    return h;
}

NaroNetModel::NaroNetModel(const ModelConfig& cfg, int g, int O, std::uint64_t seed) : cfg_(cfg), g_(g), O_(O) {
    cfg_.validate();
    if (g < 1 || O < 2) {
        throw ConfigError("model needs g >= 1 and at least two classes");
    }
    cfg_.O = O;
    init(seed);
}

NaroNetModel::NaroNetModel(const ModelConfig& cfg, int g, int O, nn::ParamSet params)
    : cfg_(cfg), g_(g), O_(O), params_(std::move(params)) {
    cfg_.validate();
    cfg_.O = O;
    NaroNetModel reference(cfg_, g, O, 0);
    for (const auto& [name, v] : reference.params().items()) {
        if (!params_.contains(name) || params_.get(name).rows() != v.rows() || params_.get(name).cols() != v.cols()) {
            throw ConfigError("model checkpoint: tensor '" + name + "' missing or mis-shaped");
        }
    }
}

void NaroNetModel::init(std::uint64_t seed) {
    Rng rng(derive_seed(seed, {0x6d6f64656cULL}));
    const int H = cfg_.H, g = g_;
    auto dense = [&](const std::string& name, int in, int out, bool bias) {
        params_.add(name + ".W", nn::kaiming_normal(in, out, in, rng));
        if (bias) {
            params_.add(name + ".b", Mat::Zero(1, out));
        }
    };
    if (cfg_.use_glore) {
        const int m = cfg_.glore_nodes;
        params_.add("glore.proj", nn::kaiming_normal(g, m, g, rng));
        params_.add("glore.adj", Mat::Zero(m, m));
        params_.add("glore.W", nn::kaiming_normal(g, g, g, rng));
        params_.add("glore.back", Mat::Zero(g, g));
    }
    dense("phen.in", g, H, true);
    for (int b = 0; b < 3; ++b) {
        dense("phen.res" + std::to_string(b) + ".a", H, H, true);
        dense("phen.res" + std::to_string(b) + ".b", H, H, true);
    }
    dense("phen.out", H, cfg_.P, true);
    for (int k = 0; k < cfg_.K; ++k) {
        dense("gnn" + std::to_string(k), k == 0 ? g : H, H, false);
    }
    dense("neigh.out", H, cfg_.N, true);
    dense("area.gnn", H, H, false);
    dense("area.out", H, cfg_.A, true);
    params_.add("cls.W", Mat::Zero(cfg_.P + cfg_.N + cfg_.A, O_));
    params_.add("cls.b", Mat::Zero(1, O_));
}

Var NaroNetModel::glore(const Var& z) const {
    if (!cfg_.use_glore) {
        return z;
    }
    const Var b = ag::softmax_rows(ag::matmul(z, params_.get("glore.proj")));
    const Var v = ag::matmul(ag::transpose(b), z);
    const Var reasoned = ag::relu(ag::matmul(ag::matmul(ag::add_identity(params_.get("glore.adj")), v), params_.get("glore.W")));
    return z + ag::matmul(ag::matmul(b, reasoned), params_.get("glore.back"));
}

Var NaroNetModel::assign_phenotypes(const Var& z) const {
    auto layer = [&](const Var& x, const std::string& name) {
        return nn::linear(x, params_.get(name + ".W"), params_.get(name + ".b"));
    };
    Var h = ag::relu(layer(z, "phen.in"));
    for (int b = 0; b < 3; ++b) {
        const std::string prefix = "phen.res" + std::to_string(b);
        const Var t = ag::relu(layer(h, prefix + ".a"));
        h = ag::relu(h + layer(t, prefix + ".b"));
    }
    return layer(h, "phen.out");
}

Var NaroNetModel::assign_neighborhoods(const Var& z, const std::shared_ptr<const ag::SparseMat>& m, Var& z_k) const {
    std::vector<Var> weights;
    for (int k = 0; k < cfg_.K; ++k) {
        weights.push_back(params_.get("gnn" + std::to_string(k) + ".W"));
    }
    z_k = gnn_forward(z, m, weights, cfg_.gnn_variant);
    return nn::linear(z_k, params_.get("neigh.out.W"), params_.get("neigh.out.b"));
}

Var NaroNetModel::assign_areas(const Var& s_n, const Var& z_k, const std::shared_ptr<const ag::SparseMat>& adjacency,
                               Var* pooled_nodes, Var* pooled_adjacency) const {
    const Var s_t = ag::transpose(s_n);
    const Var x = ag::matmul(s_t, z_k);
    const Var a = ag::matmul(s_t, ag::spmm(adjacency, s_n));
    if (pooled_nodes) {
        *pooled_nodes = x;
    }
    if (pooled_adjacency) {
        *pooled_adjacency = a;
    }
    const Var m = cfg_.aggregation == Aggregation::mean_self_loop ? ag::row_normalize(ag::add_identity(a)) : a;
    Var h = ag::matmul(ag::matmul(m, x), params_.get("area.gnn.W"));
    if (cfg_.gnn_variant == GnnVariant::residual) {
        h = h + x;
    }
    h = ag::relu(h);
    return nn::linear(h, params_.get("area.out.W"), params_.get("area.out.b"));
}

Var NaroNetModel::classify(const Var& abundance) const {
    return nn::linear(abundance, params_.get("cls.W"), params_.get("cls.b"));
}

ForwardResult NaroNetModel::forward(const graph::PatchGraph& g) const {
    if (g.dim() != g_) {
        throw ConfigError("graph embedding size " + std::to_string(g.dim()) + " differs from model input " +
                          std::to_string(g_));
    }
    return forward(Var::constant(g.Z), propagation_matrix(g, cfg_.aggregation), adjacency_matrix(g));
}

ForwardResult NaroNetModel::forward(const Var& z, const std::shared_ptr<const ag::SparseMat>& propagation,
                                    const std::shared_ptr<const ag::SparseMat>& adjacency) const {
    ForwardResult f;
    f.z_in = glore(z);
    f.s_p = assign_phenotypes(f.z_in);
    f.s_n = assign_neighborhoods(f.z_in, propagation, f.z_k);
    f.s_a = assign_areas(activate(f.s_n, cfg_.activation), f.z_k, adjacency, &f.pooled_nodes, &f.pooled_adjacency);
    f.phen = pool_abundance(f.s_p, cfg_.activation, cfg_.use_max);
    f.neigh = pool_abundance(f.s_n, cfg_.activation, cfg_.use_max);
    f.area = pool_abundance(f.s_a, cfg_.activation, cfg_.use_max);
    f.abundance = ag::concat_cols({f.phen, f.neigh, f.area});
    f.logits = classify(f.abundance);
    return f;
}

Var NaroNetModel::loss(const ForwardResult& f, int label, LossBreakdown* breakdown) const {
    if (label < 0 || label >= O_) {
        throw ConfigError("label " + std::to_string(label) + " outside [0, " + std::to_string(O_) + ")");
    }
    const Lambdas& l = cfg_.lambdas;
    const Var ce = ag::scale(ag::pick(ag::log_softmax_rows(f.logits), 0, label), -1.0);
    Var total = ce;
    LossBreakdown b;
    b.ce = ce.scalar();

    auto add_term = [&](double weight, const Var& term, double divisor, double& slot) {
        slot = term.scalar();
        if (weight > 0.0) {
            total = total + ag::scale(term, weight / divisor);
        }
        return weight * slot / divisor;
    };
    b.l_e += add_term(l.ep, patch_entropy_loss(f.s_p), 3.0, b.ep);
    b.l_e += add_term(l.en, patch_entropy_loss(f.s_n), 3.0, b.en);
    b.l_e += add_term(l.ea, patch_entropy_loss(f.s_a), 3.0, b.ea);
    if (cfg_.collapse == CollapseLoss::patient_entropy) {
        b.collapse += add_term(l.pp, patient_entropy_loss(f.phen), 3.0, b.pp);
        b.collapse += add_term(l.pn, patient_entropy_loss(f.neigh), 3.0, b.pn);
        b.collapse += add_term(l.pa, patient_entropy_loss(f.area), 3.0, b.pa);
    } else {
        b.collapse += add_term(l.pn, orthogonal_loss(activate(f.s_n, cfg_.activation)), 2.0, b.pn);
        b.collapse += add_term(l.pa, orthogonal_loss(activate(f.s_a, cfg_.activation)), 2.0, b.pa);
    }
    b.total = total.scalar();
    if (!std::isfinite(b.total)) {
        throw RuntimeError("non-finite loss: ce=" + std::to_string(b.ce) + " entropy=" + std::to_string(b.l_e) +
                           " collapse=" + std::to_string(b.collapse));
    }
    if (breakdown) {
        *breakdown = b;
    }
    return total;
}

RowVec NaroNetModel::predict_proba(const graph::PatchGraph& g) const {
    ag::NoGradGuard no_grad;
    const ForwardResult f = forward(g);
    return ag::softmax_rows(f.logits).value().row(0);
}

RowVec NaroNetModel::classify_proba(const RowVec& abundance) const {
    ag::NoGradGuard no_grad;
    return ag::softmax_rows(classify(Var::constant(Mat(abundance)))).value().row(0);
}

void save_model(const std::filesystem::path& path, const NaroNetModel& model, const io::json& extra) {
    io::TensorArchive a;
    a.kind = "naronet-model";
    a.header = extra;
    a.header["config"] = model.config().to_json();
    a.header["g"] = model.input_dim();
    a.header["O"] = model.num_classes();
    for (const auto& [name, v] : model.params().items()) {
        a.tensors.emplace_back(name, v.value());
    }
    io::write_archive(path, a);
}

NaroNetModel load_model(const std::filesystem::path& path) {
    const io::TensorArchive a = io::read_archive(path, "naronet-model");
    nn::ParamSet params;
    for (const auto& [name, t] : a.tensors) {
        params.add(name, t);
    }
    return NaroNetModel(ModelConfig::from_json(a.header.at("config")), a.header.at("g").get<int>(),
                        a.header.at("O").get<int>(), std::move(params));
}

} // namespace naronet::core
