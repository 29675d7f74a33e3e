#pragma once

#include "naronet/autograd.hpp"
#include "naronet/common.hpp"
#include "naronet/image.hpp"
#include "naronet/io.hpp"
#include "naronet/nn.hpp"
#include "naronet/rng.hpp"

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

/// Patch contrastive learning: a patch encoder trained so that two augmented views of
/// the same crop embed close together, then used to tile images into embedding grids.
namespace naronet::pcl {

struct PCLConfig {
    int patch_side = 10;
    double crop_scale = 2.0;
    int crops_per_step = 128;
    int images_per_step = 8;
    int embedding_dim = 256;
    int proj_dim = 128;
    double tau = 0.5;
    double cutout_frac = 0.15;
    int steps = 500;
    double lr = 1e-3;
    std::vector<int> widths = {32, 64, 128, 256};

    int crop_side() const;
    int cutout_side() const;
    /// Throws ConfigError on a broken invariant.
    void validate() const;
    io::json to_json() const;
    static PCLConfig from_json(const io::json& j);
};

struct ChannelStats {
    std::vector<double> mean;
    std::vector<double> stddev;
    std::vector<bool> constant;

    io::json to_json() const;
    static ChannelStats from_json(const io::json& j);
};

ChannelStats compute_channel_stats(const std::vector<MultiplexImage>& images);
/// Z-scores each channel in place; constant channels become 0.
void apply_channel_stats(MultiplexImage& image, const ChannelStats& stats);
ChannelStats normalize_cohort(std::vector<MultiplexImage>& images);

/// B_CR crops flattened to HWC rows.
struct CropBatch {
    int side = 0;
    int channels = 0;
    Mat data;
};

/// Draws `crops_per_step` crops at uniform positions from up to `images_per_step`
/// randomly chosen images. Images smaller than the crop are skipped with a warning.
CropBatch sample_crops(const std::vector<MultiplexImage>& images, const PCLConfig& cfg, Rng& rng);

/// Rotates an HWC square patch by k quarter turns counter-clockwise.
void rotate_quarter(const double* in, double* out, int side, int channels, int k);

/// One augmented view: random sub-crop of side S, random quarter-turn rotation and one
/// zeroed square cutout of side round(cutout_frac * S).
void augment_view(const double* crop, int crop_side, int channels, const PCLConfig& cfg, Rng& rng, double* out);

/// Both views of every crop, stacked as rows 2j and 2j+1.
Mat augment_pairs(const CropBatch& crops, const PCLConfig& cfg, Rng& rng);

/// Pluggable patch encoder: batch x (S*S*B) HWC rows to batch x g embeddings.
class PatchEncoder {
public:
    virtual ~PatchEncoder() = default;
    virtual ag::Var forward(const ag::Var& patches) const = 0;
    virtual nn::ParamSet& params() = 0;
    virtual const nn::ParamSet& params() const = 0;
    virtual int embedding_dim() const = 0;
};

/// Stride-2 3x3 convolution blocks with ReLU, global average pooling and a linear output.
class ConvEncoder : public PatchEncoder {
public:
    ConvEncoder(int patch_side, int channels, int embedding_dim, const std::vector<int>& widths, Rng& rng);
    /// Wraps existing parameters, e.g. from a checkpoint.
    ConvEncoder(int patch_side, int channels, int embedding_dim, const std::vector<int>& widths,
                nn::ParamSet params);

    ag::Var forward(const ag::Var& patches) const override;
    nn::ParamSet& params() override { return params_; }
    const nn::ParamSet& params() const override { return params_; }
    int embedding_dim() const override { return embedding_dim_; }
    int patch_side() const { return patch_side_; }
    int channels() const { return channels_; }
    const std::vector<int>& widths() const { return widths_; }

private:
    std::vector<nn::ConvShape> shapes() const;

    int patch_side_, channels_, embedding_dim_;
    std::vector<int> widths_;
    nn::ParamSet params_;
};

/// z = relu(h W_hidden) W_out, no biases.
class ProjectionHead {
public:
    ProjectionHead(int embedding_dim, int proj_dim, Rng& rng);
    ProjectionHead(nn::ParamSet params) : params_(std::move(params)) {}
    ag::Var forward(const ag::Var& h) const;
    nn::ParamSet& params() { return params_; }

private:
    nn::ParamSet params_;
};

/// Mean over all 2B anchors of the cross-entropy between an anchor's cosine similarities
/// to every other row (scaled by 1/tau) and its positive partner (row 2j <-> 2j+1).
/// Throws ConfigError on a zero-norm row or an odd row count.
ag::Var nt_xent_loss(const ag::Var& z, double tau);
/// Percentage of anchors whose partner is the top-1 cosine match among all other rows.
double contrast_accuracy(const Mat& z);

struct TrainingLogRow {
    int step;
    double loss;
    double contrast_accuracy;
};

struct PCLModel {
    PCLConfig config;
    ChannelStats stats;
    std::unique_ptr<ConvEncoder> encoder;
    std::unique_ptr<ProjectionHead> head;
    std::vector<TrainingLogRow> log;
};

/// Trains on already-normalized images. Throws RuntimeError naming the step on a
/// non-finite loss.
PCLModel train_pcl(const std::vector<MultiplexImage>& normalized, const ChannelStats& stats, const PCLConfig& cfg,
                   std::uint64_t seed);

/// Contrast accuracy of a trained model on `batches` fresh augmented batches.
double evaluate_contrast_accuracy(const PCLModel& model, const std::vector<MultiplexImage>& normalized, int batches,
                                  std::uint64_t seed);

void save_pcl_model(const std::filesystem::path& path, const PCLModel& model, std::uint64_t seed);
PCLModel load_pcl_model(const std::filesystem::path& path);
void write_training_log(const std::filesystem::path& path, const std::vector<TrainingLogRow>& log);

struct EmbeddedImage {
    std::string image_id;
    int rows = 0;
    int cols = 0;
    int patch_side = 0;
    /// L x g, row r*cols + c holds grid cell (r, c).
    Mat embeddings;

    int size() const { return rows * cols; }
};

/// Tiles a normalized image into floor(H/S) x floor(W/S) patches and embeds each one.
EmbeddedImage tile_and_embed(const MultiplexImage& normalized, const PatchEncoder& encoder, int patch_side,
                             const std::string& image_id);

void write_embedded(const std::filesystem::path& raw_path, const EmbeddedImage& e,
                    const io::json& extra = io::json::object());
EmbeddedImage read_embedded(const std::filesystem::path& path);

} // namespace naronet::pcl
