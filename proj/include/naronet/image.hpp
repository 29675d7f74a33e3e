#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace naronet {

/// H x W x B non-negative raster, one plane per marker, stored channel-major.
struct MultiplexImage {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<std::string> channel_names;
    std::vector<float> data;

    MultiplexImage() = default;
    MultiplexImage(int h, int w, int c, std::vector<std::string> names = {});

    std::size_t plane_size() const { return static_cast<std::size_t>(height) * width; }
    float& at(int c, int y, int x) { return data[c * plane_size() + static_cast<std::size_t>(y) * width + x]; }
    float at(int c, int y, int x) const { return data[c * plane_size() + static_cast<std::size_t>(y) * width + x]; }

    /// Copies a square window into HWC order (the encoder's input layout).
    void window_hwc(int y0, int x0, int side, double* out) const;
    MultiplexImage crop(int y0, int x0, int h, int w) const;
};

/// Default marker names Mk1..MkB.
std::vector<std::string> default_channel_names(int channels);

} // namespace naronet
