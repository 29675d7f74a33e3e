#include "naronet/image.hpp"

#include <stdexcept>

namespace naronet {

MultiplexImage::MultiplexImage(int h, int w, int c, std::vector<std::string> names)
    : height(h), width(w), channels(c), channel_names(std::move(names)),
      data(static_cast<std::size_t>(h) * w * c, 0.0f) {
    if (h < 0 || w < 0 || c < 0) {
        throw std::invalid_argument("MultiplexImage: negative dimension");
    }
    if (channel_names.empty()) {
        channel_names = default_channel_names(c);
    }
    if (static_cast<int>(channel_names.size()) != c) {
        throw std::invalid_argument("MultiplexImage: channel name count differs from channel count");
    }
}

void MultiplexImage::window_hwc(int y0, int x0, int side, double* out) const {
    if (y0 < 0 || x0 < 0 || y0 + side > height || x0 + side > width) {
        throw std::out_of_range("window outside image");
    }
    for (int y = 0; y < side; ++y) {
        for (int x = 0; x < side; ++x) {
            for (int c = 0; c < channels; ++c) {
                *out++ = at(c, y0 + y, x0 + x);
            }
        }
    }
}

MultiplexImage MultiplexImage::crop(int y0, int x0, int h, int w) const {
    if (y0 < 0 || x0 < 0 || y0 + h > height || x0 + w > width) {
        throw std::out_of_range("crop outside image");
    }
    MultiplexImage out(h, w, channels, channel_names);
    for (int c = 0; c < channels; ++c) {
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                out.at(c, y, x) = at(c, y0 + y, x0 + x);
            }
        }
    }
    return out;
}

std::vector<std::string> default_channel_names(int channels) {
    std::vector<std::string> names;
    for (int c = 0; c < channels; ++c) {
        names.push_back("Mk" + std::to_string(c + 1));
    }
    return names;
}

} // namespace naronet
