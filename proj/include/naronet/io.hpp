#pragma once

#include "naronet/common.hpp"
#include "naronet/image.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

namespace naronet::io {

namespace fs = std::filesystem;
using json = nlohmann::json;

/// FNV-1a 64-bit digest of the compact JSON dump, as 16 hex digits.
std::string config_hash(const json& config);
/// {tool_version, seed, config_hash} block stamped into every emitted artifact.
json provenance(std::uint64_t seed, const json& config);

void ensure_directory(const fs::path& dir);
void write_json(const fs::path& path, const json& j);
json read_json(const fs::path& path);

/// Shortest round-trip decimal form of a double.
std::string format_number(double v);

/// Writes `<stem>.raw` (float32 little-endian planes) and `<stem>.json` (H, W, B, channel names, extras).
void write_image(const fs::path& raw_path, const MultiplexImage& image, const json& extra = json::object());
/// Accepts the .raw path or its .json sidecar.
MultiplexImage read_image(const fs::path& path);
json read_image_header(const fs::path& path);
fs::path sidecar_path(const fs::path& raw_path);

void write_floats(const fs::path& path, const float* data, std::size_t n);
std::vector<float> read_floats(const fs::path& path, std::size_t expected);

/// 8-bit grayscale PNG.
void write_png_gray(const fs::path& path, int height, int width, const std::vector<std::uint8_t>& pixels);
std::vector<std::uint8_t> read_png_gray(const fs::path& path, int& height, int& width);

/// Multi-page (one page per channel) or multi-sample TIFF, 8/16-bit unsigned or 32-bit float.
MultiplexImage read_tiff(const fs::path& path);

class CsvWriter {
public:
    CsvWriter(const fs::path& path, const std::vector<std::string>& header);
    void row(const std::vector<std::string>& cells);

private:
    std::ofstream out_;
    std::size_t width_;
};

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    /// Index of a header column, or -1.
    int column(const std::string& name) const;
};

CsvTable read_csv(const fs::path& path);

/// Named-tensor container shared by encoder and model checkpoints.
struct TensorArchive {
    std::string kind;
    json header = json::object();
    std::vector<std::pair<std::string, Mat>> tensors;

    const Mat& tensor(const std::string& name) const;
};

void write_archive(const fs::path& path, const TensorArchive& archive);
/// Throws ConfigError when the file is not an archive of `expected_kind`.
TensorArchive read_archive(const fs::path& path, const std::string& expected_kind);

} // namespace naronet::io
