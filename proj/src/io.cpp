#include "naronet/io.hpp"

#include <png.h>
#include <tiffio.h>

#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <memory>
#include <algorithm>
#include <cstdio>
#include <cstring>
#include <sstream>

static_assert(std::endian::native == std::endian::little, "raw formats assume a little-endian host");

namespace naronet::io {

std::string config_hash(const json& config) {
    const std::string s = config.dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

json provenance(std::uint64_t seed, const json& config) {
    return json{{"tool_version", kToolVersion}, {"seed", seed}, {"config_hash", config_hash(config)}};
}

void ensure_directory(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) {
        throw RuntimeError("cannot create output directory " + dir.string() + ": " + ec.message());
    }
    // create_directories succeeds on existing read-only directories; probe writability.
    const fs::path probe = dir / ".naronet_write_probe";
    {
        std::ofstream f(probe);
        if (!f) {
            throw RuntimeError("output directory is not writable: " + dir.string());
        }
    }
    fs::remove(probe, ec);
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream f(path);
    if (!f) {
        throw RuntimeError("cannot write " + path.string());
    }
    f << j.dump(2) << '\n';
}

json read_json(const fs::path& path) {
    std::ifstream f(path);
    if (!f) {
        throw ConfigError("cannot read " + path.string());
    }
    try {
        return json::parse(f);
    } catch (const json::exception& e) {
        throw ConfigError("malformed JSON in " + path.string() + ": " + e.what());
    }
}

std::string format_number(double v) {
    if (std::isnan(v)) {
        return "nan";
    }
    if (std::isinf(v)) {
        return v > 0 ? "inf" : "-inf";
    }
    std::array<char, 64> buf{};
    auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return std::string(buf.data(), res.ptr);
}

fs::path sidecar_path(const fs::path& raw_path) {
    fs::path p = raw_path;
    p.replace_extension(".json");
    return p;
}

void write_floats(const fs::path& path, const float* data, std::size_t n) {
    std::ofstream f(path, std::ios::binary);
    if (!f) {
        throw RuntimeError("cannot write " + path.string());
    }
    f.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(float)));
}

std::vector<float> read_floats(const fs::path& path, std::size_t expected) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) {
        throw ConfigError("cannot read " + path.string());
    }
    const auto bytes = static_cast<std::size_t>(f.tellg());
    if (bytes != expected * sizeof(float)) {
        throw ConfigError(path.string() + ": expected " + std::to_string(expected * sizeof(float)) +
                          " bytes, found " + std::to_string(bytes));
    }
    f.seekg(0);
    std::vector<float> data(expected);
    f.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(bytes));
    return data;
}

void write_image(const fs::path& raw_path, const MultiplexImage& image, const json& extra) {
    write_floats(raw_path, image.data.data(), image.data.size());
    json meta = extra;
    meta["H"] = image.height;
    meta["W"] = image.width;
    meta["B"] = image.channels;
    meta["channel_names"] = image.channel_names;
    meta["dtype"] = "float32";
    meta["layout"] = "planar";
    meta["raw"] = raw_path.filename().string();
    write_json(sidecar_path(raw_path), meta);
}

json read_image_header(const fs::path& path) {
    fs::path side = path.extension() == ".json" ? path : sidecar_path(path);
    json meta = read_json(side);
    for (const char* key : {"H", "W", "B", "channel_names"}) {
        if (!meta.contains(key)) {
            throw ConfigError(side.string() + ": missing field " + key);
        }
    }
    return meta;
}

MultiplexImage read_image(const fs::path& path) {
    const json meta = read_image_header(path);
    const fs::path side = path.extension() == ".json" ? path : sidecar_path(path);
    fs::path raw = path;
    if (path.extension() == ".json") {
        raw = side.parent_path() / meta.value("raw", side.stem().string() + ".raw");
    }
    MultiplexImage img(meta["H"].get<int>(), meta["W"].get<int>(), meta["B"].get<int>(),
                       meta["channel_names"].get<std::vector<std::string>>());
    img.data = read_floats(raw, img.data.size());
    return img;
}

void write_png_gray(const fs::path& path, int height, int width, const std::vector<std::uint8_t>& pixels) {
    if (pixels.size() != static_cast<std::size_t>(height) * width) {
        throw std::invalid_argument("write_png_gray: pixel count mismatch");
    }
    FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) {
        throw RuntimeError("cannot write " + path.string());
    }
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw RuntimeError("libpng failure writing " + path.string());
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
                 PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < height; ++y) {
        png_write_row(png, const_cast<png_bytep>(pixels.data() + static_cast<std::size_t>(y) * width));
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

std::vector<std::uint8_t> read_png_gray(const fs::path& path, int& height, int& width) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) {
        throw ConfigError("cannot read " + path.string());
    }
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw ConfigError("libpng failure reading " + path.string());
    }
    png_init_io(png, fp);
    png_read_info(png, info);
    width = static_cast<int>(png_get_image_width(png, info));
    height = static_cast<int>(png_get_image_height(png, info));
    if (png_get_color_type(png, info) != PNG_COLOR_TYPE_GRAY || png_get_bit_depth(png, info) != 8) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw ConfigError(path.string() + ": expected 8-bit grayscale PNG");
    }
    std::vector<std::uint8_t> pixels(static_cast<std::size_t>(height) * width);
    for (int y = 0; y < height; ++y) {
        png_read_row(png, pixels.data() + static_cast<std::size_t>(y) * width, nullptr);
    }
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return pixels;
}

namespace {

struct TiffCloser {
    void operator()(TIFF* t) const { TIFFClose(t); }
};

float sample_as_float(const unsigned char* buf, std::size_t idx, int bits, int format) {
    if (format == SAMPLEFORMAT_IEEEFP && bits == 32) {
        float v;
        std::memcpy(&v, buf + idx * 4, 4);
        return v;
    }
    if (bits == 16) {
        std::uint16_t v;
        std::memcpy(&v, buf + idx * 2, 2);
        return static_cast<float>(v);
    }
    if (bits == 8) {
        return static_cast<float>(buf[idx]);
    }
    throw ConfigError("unsupported TIFF sample type: " + std::to_string(bits) + " bits");
}

} // namespace

MultiplexImage read_tiff(const fs::path& path) {
    TIFFSetWarningHandler(nullptr);
    std::unique_ptr<TIFF, TiffCloser> tif(TIFFOpen(path.c_str(), "r"));
    if (!tif) {
        throw ConfigError("cannot open TIFF " + path.string());
    }
    std::vector<std::vector<float>> planes;
    std::uint32_t width = 0, height = 0;
    do {
        std::uint32_t w = 0, h = 0;
        std::uint16_t spp = 1, bits = 8, format = SAMPLEFORMAT_UINT, config = PLANARCONFIG_CONTIG;
        TIFFGetField(tif.get(), TIFFTAG_IMAGEWIDTH, &w);
        TIFFGetField(tif.get(), TIFFTAG_IMAGELENGTH, &h);
        TIFFGetFieldDefaulted(tif.get(), TIFFTAG_SAMPLESPERPIXEL, &spp);
        TIFFGetFieldDefaulted(tif.get(), TIFFTAG_BITSPERSAMPLE, &bits);
        TIFFGetFieldDefaulted(tif.get(), TIFFTAG_SAMPLEFORMAT, &format);
        TIFFGetFieldDefaulted(tif.get(), TIFFTAG_PLANARCONFIG, &config);
        if (planes.empty()) {
            width = w;
            height = h;
        } else if (w != width || h != height) {
            throw ConfigError(path.string() + ": pages differ in size");
        }
        if (TIFFIsTiled(tif.get())) {
            throw ConfigError(path.string() + ": tiled TIFF is not supported");
        }
        const tmsize_t line = TIFFScanlineSize(tif.get());
        std::vector<unsigned char> buf(static_cast<std::size_t>(line));
        const std::size_t first = planes.size();
        for (std::uint16_t s = 0; s < spp; ++s) {
            planes.emplace_back(static_cast<std::size_t>(w) * h);
        }
        if (config == PLANARCONFIG_CONTIG) {
            for (std::uint32_t y = 0; y < h; ++y) {
                if (TIFFReadScanline(tif.get(), buf.data(), y, 0) < 0) {
                    throw ConfigError(path.string() + ": read error");
                }
                for (std::uint32_t x = 0; x < w; ++x) {
                    for (std::uint16_t s = 0; s < spp; ++s) {
                        planes[first + s][static_cast<std::size_t>(y) * w + x] =
                            sample_as_float(buf.data(), static_cast<std::size_t>(x) * spp + s, bits, format);
                    }
                }
            }
        } else {
            for (std::uint16_t s = 0; s < spp; ++s) {
                for (std::uint32_t y = 0; y < h; ++y) {
                    if (TIFFReadScanline(tif.get(), buf.data(), y, s) < 0) {
                        throw ConfigError(path.string() + ": read error");
                    }
                    for (std::uint32_t x = 0; x < w; ++x) {
                        planes[first + s][static_cast<std::size_t>(y) * w + x] =
                            sample_as_float(buf.data(), x, bits, format);
                    }
                }
            }
        }
    } while (TIFFReadDirectory(tif.get()));

    MultiplexImage img(static_cast<int>(height), static_cast<int>(width), static_cast<int>(planes.size()));
    for (std::size_t c = 0; c < planes.size(); ++c) {
        std::copy(planes[c].begin(), planes[c].end(), img.data.begin() + static_cast<long>(c * img.plane_size()));
    }
    return img;
}

namespace {

std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) {
        return s;
    }
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') {
            out += '"';
        }
        out += c;
    }
    return out + "\"";
}

std::vector<std::string> csv_split(const std::string& line) {
    std::vector<std::string> cells;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            cells.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    cells.push_back(cur);
    return cells;
}

} // namespace

CsvWriter::CsvWriter(const fs::path& path, const std::vector<std::string>& header)
    : out_(path), width_(header.size()) {
    if (!out_) {
        throw RuntimeError("cannot write " + path.string());
    }
    row(header);
}

void CsvWriter::row(const std::vector<std::string>& cells) {
    if (cells.size() != width_) {
        throw std::logic_error("CsvWriter: row width differs from header");
    }
    for (std::size_t i = 0; i < cells.size(); ++i) {
        if (i) {
            out_ << ',';
        }
        out_ << csv_escape(cells[i]);
    }
    out_ << '\n';
}

int CsvTable::column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i) {
        if (header[i] == name) {
            return static_cast<int>(i);
        }
    }
    return -1;
}

CsvTable read_csv(const fs::path& path) {
    std::ifstream f(path);
    if (!f) {
        throw ConfigError("cannot read " + path.string());
    }
    CsvTable t;
    std::string line;
    bool first = true;
    while (std::getline(f, line)) {
        if (first && line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) {
            line = line.substr(3);
        }
        if (line.empty()) {
            continue;
        }
        auto cells = csv_split(line);
        if (first) {
            t.header = std::move(cells);
            first = false;
        } else {
            t.rows.push_back(std::move(cells));
        }
    }
    return t;
}

const Mat& TensorArchive::tensor(const std::string& name) const {
    for (const auto& [n, m] : tensors) {
        if (n == name) {
            return m;
        }
    }
    throw ConfigError("archive has no tensor named " + name);
}

namespace {

constexpr char kMagic[8] = {'N', 'A', 'R', 'O', 'A', 'R', 'C', '1'};
constexpr std::uint32_t kArchiveVersion = 1;

template <typename T>
void put(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) {
        throw ConfigError("truncated archive");
    }
    return v;
}

void put_string(std::ostream& out, const std::string& s) {
    put<std::uint64_t>(out, s.size());
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& in) {
    const auto n = get<std::uint64_t>(in);
    if (n > (1ULL << 32)) {
        throw ConfigError("corrupt archive string length");
    }
    std::string s(n, '\0');
    in.read(s.data(), static_cast<std::streamsize>(n));
    if (!in) {
        throw ConfigError("truncated archive");
    }
    return s;
}

} // namespace

void write_archive(const fs::path& path, const TensorArchive& archive) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw RuntimeError("cannot write " + path.string());
    }
    out.write(kMagic, sizeof(kMagic));
    put<std::uint32_t>(out, kArchiveVersion);
    put_string(out, archive.kind);
    put_string(out, archive.header.dump());
    put<std::uint64_t>(out, archive.tensors.size());
    for (const auto& [name, m] : archive.tensors) {
        put_string(out, name);
        put<std::uint64_t>(out, static_cast<std::uint64_t>(m.rows()));
        put<std::uint64_t>(out, static_cast<std::uint64_t>(m.cols()));
        out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    }
}

TensorArchive read_archive(const fs::path& path, const std::string& expected_kind) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ConfigError("cannot read " + path.string());
    }
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw ConfigError(path.string() + " is not a naronet archive");
    }
    const auto version = get<std::uint32_t>(in);
    if (version != kArchiveVersion) {
        throw ConfigError(path.string() + ": unsupported archive version " + std::to_string(version));
    }
    TensorArchive a;
    a.kind = get_string(in);
    if (a.kind != expected_kind) {
        throw ConfigError(path.string() + ": expected a " + expected_kind + " archive, found " + a.kind);
    }
    a.header = json::parse(get_string(in));
    const auto count = get<std::uint64_t>(in);
    for (std::uint64_t i = 0; i < count; ++i) {
        std::string name = get_string(in);
        const auto rows = get<std::uint64_t>(in);
        const auto cols = get<std::uint64_t>(in);
        Mat m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
        in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
        if (!in) {
            throw ConfigError("truncated archive tensor " + name);
        }
        a.tensors.emplace_back(std::move(name), std::move(m));
    }
    return a;
}

} // namespace naronet::io
