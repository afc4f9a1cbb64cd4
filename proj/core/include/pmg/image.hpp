#pragma once

#include <filesystem>

#include "pmg/tensor.hpp"

namespace pmg {

// Planar image: pixels shaped [channels, height, width], values nominally in [0, 1].
struct Image {
    Tensor pixels;

    Image() = default;
    explicit Image(Tensor t);
    Image(std::size_t channels, std::size_t height, std::size_t width, double fill = 0.0)
        : pixels({channels, height, width}, fill) {}

    std::size_t channels() const { return pixels.dim(0); }
    std::size_t height() const { return pixels.dim(1); }
    std::size_t width() const { return pixels.dim(2); }

    double& at(std::size_t c, std::size_t y, std::size_t x) {
        return pixels.data[(c * height() + y) * width() + x];
    }
    double at(std::size_t c, std::size_t y, std::size_t x) const {
        return pixels.data[(c * height() + y) * width() + x];
    }

    bool same_shape(const Image& other) const { return pixels.shape == other.pixels.shape; }
    bool operator==(const Image&) const = default;
};

Image clamp01(Image img);

// 8-bit RGB / grayscale PNG.
void write_png(const std::filesystem::path& path, const Image& img);
Image read_png(const std::filesystem::path& path);

}  // namespace pmg
