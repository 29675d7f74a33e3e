#pragma once

#include "naronet/autograd.hpp"
#include "naronet/common.hpp"
#include "naronet/graphbuild.hpp"
#include "naronet/io.hpp"
#include "naronet/nn.hpp"

#include <filesystem>
#include <memory>
#include <string>

/// The three-level assignment/pooling classifier.
///
/// Patches are softly assigned to P phenotypes (per-patch MLP), N neighborhoods (GNN
/// over the patch graph) and, after pooling patches into neighborhoods, to A areas
/// (GNN over the pooled neighborhood graph). Max-sum pooling of each assignment gives
/// the TME abundance vector, which a single linear layer classifies.
namespace naronet::core {

enum class Activation { softmax, sigmoid };
enum class GnnVariant { plain, residual };
enum class Aggregation { mean_self_loop, bare };
enum class CollapseLoss { orthogonal, patient_entropy };

struct Lambdas {
    double ep = 0.0, en = 0.0, ea = 0.0;
    double pp = 0.0, pn = 0.0, pa = 0.0;
};

struct ModelConfig {
    int P = 10, N = 9, A = 8;
    int H = 64;
    int K = 2;
    Activation activation = Activation::softmax;
    bool use_max = true;
    GnnVariant gnn_variant = GnnVariant::residual;
    Aggregation aggregation = Aggregation::mean_self_loop;
    bool use_glore = false;
    int glore_nodes = 8;
    Lambdas lambdas;
    CollapseLoss collapse = CollapseLoss::orthogonal;
    double rho = 0.0;
    unsigned aug_modes = 0;
    double lr = 1e-3;
    int epochs = 60;
    int batch_size = 8;
    /// Number of classes; 0 means "take it from the data".
    int O = 0;

    void validate() const;
    io::json to_json() const;
    /// Missing keys keep their defaults; malformed values throw ConfigError.
    static ModelConfig from_json(const io::json& j);
};

std::string to_string(Activation a);
std::string to_string(GnnVariant v);
std::string to_string(Aggregation a);
std::string to_string(CollapseLoss c);

/// Aggregation operator over a patch graph: D^-1 (A + I) or the bare adjacency A.
std::shared_ptr<const ag::SparseMat> propagation_matrix(const graph::PatchGraph& g, Aggregation agg);
/// Plain adjacency (one entry per directed edge).
std::shared_ptr<const ag::SparseMat> adjacency_matrix(const graph::PatchGraph& g);

/// Abundance from assignment logits: activation, optional row-max filter, column sum.
ag::Var pool_abundance(const ag::Var& logits, Activation activation, bool use_max);
/// Post-activation assignment probabilities.
ag::Var activate(const ag::Var& logits, Activation activation);

/// Mean row entropy of softmax(logits), normalized by log C to [0, 1].
ag::Var patch_entropy_loss(const ag::Var& logits);
/// sum p log p / log C for p = abundance / sum(abundance); in [-1, 0].
ag::Var patient_entropy_loss(const ag::Var& abundance);
/// || S^T S / ||S^T S||_F - I / sqrt(k) ||_F.
ag::Var orthogonal_loss(const ag::Var& s);

/// K hops of relu(M Z W_k), optionally adding Z_(k-1) before the ReLU when widths match.
ag::Var gnn_forward(const ag::Var& z, const std::shared_ptr<const ag::SparseMat>& m, const std::vector<ag::Var>& weights,
                    GnnVariant variant);

struct ForwardResult {
    ag::Var z_in;
    ag::Var s_p, s_n, s_a;
    ag::Var z_k;
    ag::Var pooled_nodes, pooled_adjacency;
    ag::Var phen, neigh, area;
    ag::Var abundance;
    ag::Var logits;
};

struct LossBreakdown {
    double ce = 0.0;
    double l_e = 0.0;
    double collapse = 0.0;
    double total = 0.0;
    double ep = 0.0, en = 0.0, ea = 0.0;
    double pp = 0.0, pn = 0.0, pa = 0.0;
};

class NaroNetModel {
public:
    /// g: patch embedding size; O: number of classes.
    NaroNetModel(const ModelConfig& cfg, int g, int O, std::uint64_t seed);
    NaroNetModel(const ModelConfig& cfg, int g, int O, nn::ParamSet params);

    const ModelConfig& config() const { return cfg_; }
    int input_dim() const { return g_; }
    int num_classes() const { return O_; }
    int num_tmes() const { return cfg_.P + cfg_.N + cfg_.A; }
    nn::ParamSet& params() { return params_; }
    const nn::ParamSet& params() const { return params_; }

    ag::Var glore(const ag::Var& z) const;
    ag::Var assign_phenotypes(const ag::Var& z) const;
    /// Returns S_N logits; z_k receives the last GNN hop.
    ag::Var assign_neighborhoods(const ag::Var& z, const std::shared_ptr<const ag::SparseMat>& m, ag::Var& z_k) const;
    /// S_N here is post-activation. pooled_nodes/pooled_adjacency receive the intermediate products.
    ag::Var assign_areas(const ag::Var& s_n, const ag::Var& z_k, const std::shared_ptr<const ag::SparseMat>& adjacency,
                         ag::Var* pooled_nodes = nullptr, ag::Var* pooled_adjacency = nullptr) const;
    ag::Var classify(const ag::Var& abundance) const;

    ForwardResult forward(const graph::PatchGraph& g) const;
    ForwardResult forward(const ag::Var& z, const std::shared_ptr<const ag::SparseMat>& propagation,
                          const std::shared_ptr<const ag::SparseMat>& adjacency) const;

    /// CE + weighted patch entropies + collapse term for one patient.
    ag::Var loss(const ForwardResult& f, int label, LossBreakdown* breakdown = nullptr) const;

    /// Class probabilities for an (un-augmented) graph, without recording gradients.
    RowVec predict_proba(const graph::PatchGraph& g) const;
    /// f2 probabilities for a given abundance row.
    RowVec classify_proba(const RowVec& abundance) const;

private:
    void init(std::uint64_t seed);

    ModelConfig cfg_;
    int g_, O_;
    nn::ParamSet params_;
};

void save_model(const std::filesystem::path& path, const NaroNetModel& model, const io::json& extra = io::json::object());
NaroNetModel load_model(const std::filesystem::path& path);

} // namespace naronet::core
