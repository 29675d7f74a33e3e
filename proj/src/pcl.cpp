#include "naronet/pcl.hpp"

#include "naronet/parallel.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace naronet::pcl {

int PCLConfig::crop_side() const { return static_cast<int>(std::lround(patch_side * crop_scale)); }

int PCLConfig::cutout_side() const { return static_cast<int>(std::lround(cutout_frac * patch_side)); }

void PCLConfig::validate() const {
    if (patch_side < 1) {
        throw ConfigError("patch_side must be positive");
    }
    if (crop_scale < 1.0) {
        throw ConfigError("crop_scale must be at least 1");
    }
    if (crops_per_step < 2 || images_per_step < 1 || steps < 0) {
        throw ConfigError("crops_per_step must be >= 2, images_per_step >= 1, steps >= 0");
    }
    if (!(embedding_dim > proj_dim && proj_dim > 0)) {
        throw ConfigError("need embedding_dim > proj_dim > 0");
    }
    if (!(tau > 0.0)) {
        throw ConfigError("tau must be positive");
    }
    if (cutout_frac < 0.0 || cutout_frac >= 1.0) {
        throw ConfigError("cutout_frac must lie in [0, 1)");
    }
    if (lr < 0.0) {
        throw ConfigError("lr must be non-negative");
    }
    if (widths.empty() || std::any_of(widths.begin(), widths.end(), [](int w) { return w < 1; })) {
        throw ConfigError("encoder widths must be positive");
    }
}

io::json PCLConfig::to_json() const {
    return {{"patch_side", patch_side},       {"crop_scale", crop_scale}, {"crops_per_step", crops_per_step},
            {"images_per_step", images_per_step}, {"embedding_dim", embedding_dim}, {"proj_dim", proj_dim},
            {"tau", tau},                     {"cutout_frac", cutout_frac}, {"steps", steps},
            {"lr", lr},                       {"widths", widths}};
}

PCLConfig PCLConfig::from_json(const io::json& j) {
    PCLConfig c;
    try {
        c.patch_side = j.value("patch_side", c.patch_side);
        c.crop_scale = j.value("crop_scale", c.crop_scale);
        c.crops_per_step = j.value("crops_per_step", c.crops_per_step);
        c.images_per_step = j.value("images_per_step", c.images_per_step);
        c.embedding_dim = j.value("embedding_dim", c.embedding_dim);
        c.proj_dim = j.value("proj_dim", c.proj_dim);
        c.tau = j.value("tau", c.tau);
        c.cutout_frac = j.value("cutout_frac", c.cutout_frac);
        c.steps = j.value("steps", c.steps);
        c.lr = j.value("lr", c.lr);
        c.widths = j.value("widths", c.widths);
    } catch (const io::json::exception& e) {
        throw ConfigError(std::string("pcl config: ") + e.what());
    }
    c.validate();
    return c;
}

io::json ChannelStats::to_json() const {
    return {{"mean", mean}, {"stddev", stddev}, {"constant", constant}};
}

ChannelStats ChannelStats::from_json(const io::json& j) {
    ChannelStats s;
    s.mean = j.at("mean").get<std::vector<double>>();
    s.stddev = j.at("stddev").get<std::vector<double>>();
    s.constant = j.at("constant").get<std::vector<bool>>();
    return s;
}

ChannelStats compute_channel_stats(const std::vector<MultiplexImage>& images) {
    if (images.empty()) {
        throw ConfigError("channel statistics need at least one image");
    }
    const int B = images.front().channels;
    ChannelStats s;
    s.mean.assign(B, 0.0);
    s.stddev.assign(B, 0.0);
    s.constant.assign(B, false);
    std::vector<double> count(B, 0.0);
    for (const auto& img : images) {
        if (img.channels != B) {
            throw ConfigError("images disagree on channel count");
        }
        for (int c = 0; c < B; ++c) {
            const float* p = img.data.data() + c * img.plane_size();
            s.mean[c] += std::accumulate(p, p + img.plane_size(), 0.0);
            count[c] += static_cast<double>(img.plane_size());
        }
    }
    for (int c = 0; c < B; ++c) {
        s.mean[c] /= std::max(1.0, count[c]);
    }
    for (const auto& img : images) {
        for (int c = 0; c < B; ++c) {
            const float* p = img.data.data() + c * img.plane_size();
            for (std::size_t i = 0; i < img.plane_size(); ++i) {
                const double d = p[i] - s.mean[c];
                s.stddev[c] += d * d;
            }
        }
    }
    for (int c = 0; c < B; ++c) {
        s.stddev[c] = std::sqrt(s.stddev[c] / std::max(1.0, count[c]));
        s.constant[c] = s.stddev[c] <= 1e-12 * std::max(1.0, std::abs(s.mean[c]));
    }
    return s;
}

void apply_channel_stats(MultiplexImage& image, const ChannelStats& stats) {
    if (static_cast<int>(stats.mean.size()) != image.channels) {
        throw ConfigError("channel statistics do not match image channel count");
    }
    for (int c = 0; c < image.channels; ++c) {
        float* p = image.data.data() + c * image.plane_size();
        for (std::size_t i = 0; i < image.plane_size(); ++i) {
            p[i] = stats.constant[c] ? 0.0f : static_cast<float>((p[i] - stats.mean[c]) / stats.stddev[c]);
        }
    }
}

ChannelStats normalize_cohort(std::vector<MultiplexImage>& images) {
    ChannelStats s = compute_channel_stats(images);
    for (auto& img : images) {
        apply_channel_stats(img, s);
    }
    return s;
}

CropBatch sample_crops(const std::vector<MultiplexImage>& images, const PCLConfig& cfg, Rng& rng) {
    const int side = cfg.crop_side();
    std::vector<std::size_t> usable;
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (images[i].height >= side && images[i].width >= side) {
            usable.push_back(i);
        } else {
            spdlog::warn("image {} ({}x{}) is smaller than the {}px crop; skipped", i, images[i].height,
                         images[i].width, side);
        }
    }
    if (usable.empty()) {
        throw ConfigError("no image is large enough for a " + std::to_string(side) + "px crop");
    }
    std::shuffle(usable.begin(), usable.end(), rng);
    usable.resize(std::min<std::size_t>(usable.size(), static_cast<std::size_t>(cfg.images_per_step)));

    CropBatch batch;
    batch.side = side;
    batch.channels = images[usable.front()].channels;
    batch.data.resize(cfg.crops_per_step, static_cast<Eigen::Index>(side) * side * batch.channels);
    for (int j = 0; j < cfg.crops_per_step; ++j) {
        const MultiplexImage& img = images[usable[uniform_index(rng, usable.size())]];
        const int y0 = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(img.height - side + 1)));
        const int x0 = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(img.width - side + 1)));
        img.window_hwc(y0, x0, side, batch.data.row(j).data());
    }
    return batch;
}

void rotate_quarter(const double* in, double* out, int side, int channels, int k) {
    k = ((k % 4) + 4) % 4;
    for (int y = 0; y < side; ++y) {
        for (int x = 0; x < side; ++x) {
            int sy = y, sx = x;
            switch (k) {
            case 1:
                sy = x;
                sx = side - 1 - y;
                break;
            case 2:
                sy = side - 1 - y;
                sx = side - 1 - x;
                break;
            case 3:
                sy = side - 1 - x;
                sx = y;
                break;
            default:
                break;
            }
            const double* src = in + (static_cast<std::size_t>(sy) * side + sx) * channels;
            std::copy(src, src + channels, out + (static_cast<std::size_t>(y) * side + x) * channels);
        }
    }
}

void augment_view(const double* crop, int crop_side, int channels, const PCLConfig& cfg, Rng& rng, double* out) {
    const int S = cfg.patch_side;
    const int y0 = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(crop_side - S + 1)));
    const int x0 = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(crop_side - S + 1)));
    std::vector<double> sub(static_cast<std::size_t>(S) * S * channels);
    for (int y = 0; y < S; ++y) {
        const double* src = crop + (static_cast<std::size_t>(y0 + y) * crop_side + x0) * channels;
        std::copy(src, src + static_cast<std::size_t>(S) * channels, sub.data() + static_cast<std::size_t>(y) * S * channels);
    }
    rotate_quarter(sub.data(), out, S, channels, static_cast<int>(uniform_index(rng, 4)));
    const int c = cfg.cutout_side();
    if (c > 0) {
        const int cy = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(S - c + 1)));
        const int cx = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(S - c + 1)));
        for (int y = cy; y < cy + c; ++y) {
            double* row = out + (static_cast<std::size_t>(y) * S + cx) * channels;
            std::fill(row, row + static_cast<std::size_t>(c) * channels, 0.0);
        }
    }
}

Mat augment_pairs(const CropBatch& crops, const PCLConfig& cfg, Rng& rng) {
    const int S = cfg.patch_side;
    if (crops.side < S) {
        throw ConfigError("crop side smaller than patch side");
    }
    Mat out(2 * crops.data.rows(), static_cast<Eigen::Index>(S) * S * crops.channels);
    for (Eigen::Index j = 0; j < crops.data.rows(); ++j) {
        augment_view(crops.data.row(j).data(), crops.side, crops.channels, cfg, rng, out.row(2 * j).data());
        augment_view(crops.data.row(j).data(), crops.side, crops.channels, cfg, rng, out.row(2 * j + 1).data());
    }
    return out;
}

ConvEncoder::ConvEncoder(int patch_side, int channels, int embedding_dim, const std::vector<int>& widths, Rng& rng)
    : patch_side_(patch_side), channels_(channels), embedding_dim_(embedding_dim), widths_(widths) {
    int in = channels;
    for (std::size_t i = 0; i < widths.size(); ++i) {
        params_.add("conv" + std::to_string(i) + ".weight", nn::kaiming_normal(9 * in, widths[i], 9 * in, rng));
        params_.add("conv" + std::to_string(i) + ".bias", Mat::Zero(1, widths[i]));
        in = widths[i];
    }
    params_.add("out.weight", nn::kaiming_normal(in, embedding_dim, in, rng));
    params_.add("out.bias", Mat::Zero(1, embedding_dim));
}

ConvEncoder::ConvEncoder(int patch_side, int channels, int embedding_dim, const std::vector<int>& widths,
                         nn::ParamSet params)
    : patch_side_(patch_side), channels_(channels), embedding_dim_(embedding_dim), widths_(widths),
      params_(std::move(params)) {
    for (std::size_t i = 0; i < widths.size(); ++i) {
        const auto& w = params_.get("conv" + std::to_string(i) + ".weight");
        if (w.cols() != widths[i]) {
            throw ConfigError("encoder checkpoint width mismatch at block " + std::to_string(i));
        }
    }
    if (params_.get("out.weight").cols() != embedding_dim) {
        throw ConfigError("encoder checkpoint embedding size mismatch");
    }
}

std::vector<nn::ConvShape> ConvEncoder::shapes() const {
    std::vector<nn::ConvShape> out;
    int h = patch_side_, w = patch_side_, in = channels_;
    for (int width : widths_) {
        nn::ConvShape s;
        s.height = h;
        s.width = w;
        s.in_channels = in;
        s.out_channels = width;
        out.push_back(s);
        h = s.out_height();
        w = s.out_width();
        in = width;
    }
    return out;
}

ag::Var ConvEncoder::forward(const ag::Var& patches) const {
    if (patches.cols() != static_cast<Eigen::Index>(patch_side_) * patch_side_ * channels_) {
        throw ConfigError("encoder input has " + std::to_string(patches.cols()) + " values per patch, expected " +
                          std::to_string(patch_side_ * patch_side_ * channels_));
    }
    ag::Var x = patches;
    const auto sh = shapes();
    for (std::size_t i = 0; i < sh.size(); ++i) {
        x = ag::relu(nn::conv2d(x, params_.get("conv" + std::to_string(i) + ".weight"),
                                params_.get("conv" + std::to_string(i) + ".bias"), sh[i]));
    }
    const auto& last = sh.back();
    x = nn::global_avg_pool(x, last.out_height() * last.out_width(), last.out_channels);
    return nn::linear(x, params_.get("out.weight"), params_.get("out.bias"));
}

ProjectionHead::ProjectionHead(int embedding_dim, int proj_dim, Rng& rng) {
    params_.add("proj.hidden", nn::kaiming_normal(embedding_dim, embedding_dim, embedding_dim, rng));
    params_.add("proj.out", nn::kaiming_normal(embedding_dim, proj_dim, embedding_dim, rng));
}

ag::Var ProjectionHead::forward(const ag::Var& h) const {
    return ag::matmul(ag::relu(ag::matmul(h, params_.get("proj.hidden"))), params_.get("proj.out"));
}

namespace {

/// Unit-normalized rows and their norms; rejects zero rows.
Mat unit_rows(const Mat& z, Vec& norms) {
    norms = z.rowwise().norm();
    if ((norms.array() <= 0.0).any()) {
        throw ConfigError("nt_xent: zero-norm vector in batch");
    }
    return norms.cwiseInverse().asDiagonal() * z;
}

Eigen::Index partner(Eigen::Index i) { return i % 2 == 0 ? i + 1 : i - 1; }

} // namespace

ag::Var nt_xent_loss(const ag::Var& z, double tau) {
    const Eigen::Index n = z.rows();
    if (n < 2 || n % 2 != 0) {
        throw ConfigError("nt_xent: batch must hold an even number (>= 2) of vectors");
    }
    Vec norms;
    const Mat u = unit_rows(z.value(), norms);
    Mat s = (u * u.transpose()) / tau;
    // Softmax over k != i for each anchor i.
    Mat prob(n, n);
    double loss = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (Eigen::Index k = 0; k < n; ++k) {
            if (k != i) {
                mx = std::max(mx, s(i, k));
            }
        }
        double denom = 0.0;
        for (Eigen::Index k = 0; k < n; ++k) {
            prob(i, k) = k == i ? 0.0 : std::exp(s(i, k) - mx);
            denom += prob(i, k);
        }
        prob.row(i) /= denom;
        loss += -(s(i, partner(i)) - mx - std::log(denom));
    }
    loss /= static_cast<double>(n);

    Mat value(1, 1);
    value(0, 0) = loss;
    return ag::make_op(std::move(value), {z}, [u, norms, prob, tau, n](ag::Node& self) {
        const double g = self.grad(0, 0);
        Mat G = prob;
        for (Eigen::Index i = 0; i < n; ++i) {
            G(i, partner(i)) -= 1.0;
        }
        G *= g / static_cast<double>(n);
        const Mat du = (G + G.transpose()) * u / tau;
        Mat dz(n, u.cols());
        for (Eigen::Index i = 0; i < n; ++i) {
            dz.row(i) = (du.row(i) - u.row(i) * u.row(i).dot(du.row(i))) / norms(i);
        }
        self.parent(0).accumulate(dz);
    });
}

double contrast_accuracy(const Mat& z) {
    const Eigen::Index n = z.rows();
    if (n < 4 || n % 2 != 0) {
        throw ConfigError("contrast accuracy needs at least two pairs");
    }
    Vec norms;
    const Mat u = unit_rows(z, norms);
    const Mat s = u * u.transpose();
    int hits = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
        Eigen::Index best = -1;
        for (Eigen::Index k = 0; k < n; ++k) {
            if (k != i && (best < 0 || s(i, k) > s(i, best))) {
                best = k;
            }
        }
        hits += best == partner(i) ? 1 : 0;
    }
    return 100.0 * hits / static_cast<double>(n);
}

PCLModel train_pcl(const std::vector<MultiplexImage>& normalized, const ChannelStats& stats, const PCLConfig& cfg,
                   std::uint64_t seed) {
    cfg.validate();
    if (normalized.empty()) {
        throw ConfigError("PCL training needs at least one image");
    }
    Rng init_rng(derive_seed(seed, {0}));
    PCLModel model;
    model.config = cfg;
    model.stats = stats;
    model.encoder =
        std::make_unique<ConvEncoder>(cfg.patch_side, normalized.front().channels, cfg.embedding_dim, cfg.widths, init_rng);
    model.head = std::make_unique<ProjectionHead>(cfg.embedding_dim, cfg.proj_dim, init_rng);

    nn::Adam enc_opt(cfg.lr), head_opt(cfg.lr);
    for (int step = 0; step < cfg.steps; ++step) {
        Rng rng(derive_seed(seed, {1, static_cast<std::uint64_t>(step)}));
        const CropBatch crops = sample_crops(normalized, cfg, rng);
        const Mat views = augment_pairs(crops, cfg, rng);
        const ag::Var z = model.head->forward(model.encoder->forward(ag::Var::constant(views)));
        const ag::Var loss = nt_xent_loss(z, cfg.tau);
        if (!std::isfinite(loss.scalar())) {
            throw RuntimeError("PCL training diverged at step " + std::to_string(step));
        }
        const double acc = contrast_accuracy(z.value());
        loss.backward();
        enc_opt.step(model.encoder->params());
        head_opt.step(model.head->params());
        model.log.push_back({step, loss.scalar(), acc});
        if (step % 50 == 0 || step + 1 == cfg.steps) {
            spdlog::debug("pcl step {} loss {:.4f} contrast {:.1f}%", step, loss.scalar(), acc);
        }
    }
    return model;
}

double evaluate_contrast_accuracy(const PCLModel& model, const std::vector<MultiplexImage>& normalized, int batches,
                                  std::uint64_t seed) {
    ag::NoGradGuard no_grad;
    double total = 0.0;
    for (int b = 0; b < batches; ++b) {
        Rng rng(derive_seed(seed, {2, static_cast<std::uint64_t>(b)}));
        const CropBatch crops = sample_crops(normalized, model.config, rng);
        const Mat views = augment_pairs(crops, model.config, rng);
        total += contrast_accuracy(model.head->forward(model.encoder->forward(ag::Var::constant(views))).value());
    }
    return total / std::max(1, batches);
}

void save_pcl_model(const std::filesystem::path& path, const PCLModel& model, std::uint64_t seed) {
    io::TensorArchive a;
    a.kind = "pcl-encoder";
    a.header["config"] = model.config.to_json();
    a.header["channels"] = model.encoder->channels();
    a.header["channel_stats"] = model.stats.to_json();
    a.header["provenance"] = io::provenance(seed, model.config.to_json());
    for (const auto& [name, v] : model.encoder->params().items()) {
        a.tensors.emplace_back(name, v.value());
    }
    for (const auto& [name, v] : model.head->params().items()) {
        a.tensors.emplace_back(name, v.value());
    }
    io::write_archive(path, a);
}

PCLModel load_pcl_model(const std::filesystem::path& path) {
    const io::TensorArchive a = io::read_archive(path, "pcl-encoder");
    PCLModel m;
    m.config = PCLConfig::from_json(a.header.at("config"));
    m.stats = ChannelStats::from_json(a.header.at("channel_stats"));
    nn::ParamSet enc, head;
    for (const auto& [name, t] : a.tensors) {
        (name.rfind("proj.", 0) == 0 ? head : enc).add(name, t);
    }
    m.encoder = std::make_unique<ConvEncoder>(m.config.patch_side, a.header.at("channels").get<int>(),
                                              m.config.embedding_dim, m.config.widths, std::move(enc));
    m.head = std::make_unique<ProjectionHead>(std::move(head));
    return m;
}

void write_training_log(const std::filesystem::path& path, const std::vector<TrainingLogRow>& log) {
    io::CsvWriter w(path, {"step", "loss", "contrast_accuracy"});
    for (const auto& r : log) {
        w.row({std::to_string(r.step), io::format_number(r.loss), io::format_number(r.contrast_accuracy)});
    }
}

EmbeddedImage tile_and_embed(const MultiplexImage& normalized, const PatchEncoder& encoder, int patch_side,
                             const std::string& image_id) {
    if (patch_side < 1) {
        throw ConfigError("patch_side must be positive");
    }
    EmbeddedImage e;
    e.image_id = image_id;
    e.rows = normalized.height / patch_side;
    e.cols = normalized.width / patch_side;
    e.patch_side = patch_side;
    const int L = e.rows * e.cols;
    e.embeddings.resize(L, encoder.embedding_dim());
    const Eigen::Index width = static_cast<Eigen::Index>(patch_side) * patch_side * normalized.channels;
    constexpr int kChunk = 256;
    ag::NoGradGuard no_grad;
    for (int start = 0; start < L; start += kChunk) {
        const int count = std::min(kChunk, L - start);
        Mat batch(count, width);
        for (int i = 0; i < count; ++i) {
            const int idx = start + i;
            normalized.window_hwc((idx / e.cols) * patch_side, (idx % e.cols) * patch_side, patch_side,
                                  batch.row(i).data());
        }
        e.embeddings.middleRows(start, count) = encoder.forward(ag::Var::constant(std::move(batch))).value();
    }
    return e;
}

void write_embedded(const std::filesystem::path& raw_path, const EmbeddedImage& e, const io::json& extra) {
    std::vector<float> buf(static_cast<std::size_t>(e.embeddings.size()));
    for (Eigen::Index i = 0; i < e.embeddings.size(); ++i) {
        buf[static_cast<std::size_t>(i)] = static_cast<float>(e.embeddings.data()[i]);
    }
    io::write_floats(raw_path, buf.data(), buf.size());
    io::json meta = extra;
    meta["image_id"] = e.image_id;
    meta["rows"] = e.rows;
    meta["cols"] = e.cols;
    meta["patch_side"] = e.patch_side;
    meta["g"] = e.embeddings.cols();
    meta["L"] = e.size();
    io::write_json(io::sidecar_path(raw_path), meta);
}

EmbeddedImage read_embedded(const std::filesystem::path& path) {
    std::filesystem::path raw = path;
    if (raw.extension() == ".json") {
        raw.replace_extension(".raw");
    }
    const io::json meta = io::read_json(io::sidecar_path(raw));
    EmbeddedImage e;
    e.image_id = meta.at("image_id").get<std::string>();
    e.rows = meta.at("rows").get<int>();
    e.cols = meta.at("cols").get<int>();
    e.patch_side = meta.at("patch_side").get<int>();
    const int g = meta.at("g").get<int>();
    const auto buf = io::read_floats(raw, static_cast<std::size_t>(e.size()) * g);
    e.embeddings.resize(e.size(), g);
    for (std::size_t i = 0; i < buf.size(); ++i) {
        e.embeddings.data()[i] = buf[i];
    }
    return e;
}

} // namespace naronet::pcl
