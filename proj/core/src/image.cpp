#include "pmg/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <vector>

#include "pmg/errors.hpp"

namespace pmg {

Image::Image(Tensor t) : pixels(std::move(t)) {
    if (pixels.rank() != 3) {
        throw std::invalid_argument("image tensor must be [channels, height, width], got " +
                                    shape_string(pixels.shape));
    }
}

Image clamp01(Image img) {
    for (double& v : img.pixels.data) v = std::clamp(v, 0.0, 1.0);
    return img;
}

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

void write_png(const std::filesystem::path& path, const Image& img) {
    const std::size_t C = img.channels(), H = img.height(), W = img.width();
    if (C != 1 && C != 3) throw InputError("write_png: only 1 or 3 channels supported");
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    FilePtr fp(std::fopen(path.string().c_str(), "wb"));
    if (!fp) throw InputError("cannot open '" + path.string() + "' for writing");

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw InputError("libpng initialisation failed");
    }
    std::vector<png_byte> rows(H * W * C);
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
            for (std::size_t c = 0; c < C; ++c) {
                const double v = std::clamp(img.at(c, y, x), 0.0, 1.0);
                rows[(y * W + x) * C + c] = static_cast<png_byte>(std::lround(v * 255.0));
            }
    std::vector<png_bytep> row_ptrs(H);
    for (std::size_t y = 0; y < H; ++y) row_ptrs[y] = rows.data() + y * W * C;

    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw InputError("libpng failed writing '" + path.string() + "'");
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(W), static_cast<png_uint_32>(H), 8,
                 C == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, row_ptrs.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Image read_png(const std::filesystem::path& path) {
    FilePtr fp(std::fopen(path.string().c_str(), "rb"));
    if (!fp) throw InputError("cannot open image '" + path.string() + "'");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw InputError("libpng initialisation failed");
    }
    std::vector<png_byte> buffer;
    std::vector<png_bytep> row_ptrs;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw InputError("'" + path.string() + "' is not a readable PNG");
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_packing(png);
    png_set_palette_to_rgb(png);
    if (png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8)
        png_set_expand_gray_1_2_4_to_8(png);
    png_read_update_info(png, info);

    const std::size_t W = png_get_image_width(png, info), H = png_get_image_height(png, info);
    const std::size_t C = png_get_channels(png, info);
    buffer.resize(H * W * C);
    row_ptrs.resize(H);
    for (std::size_t y = 0; y < H; ++y) row_ptrs[y] = buffer.data() + y * W * C;
    png_read_image(png, row_ptrs.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    Image img(C, H, W);
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
            for (std::size_t c = 0; c < C; ++c) img.at(c, y, x) = buffer[(y * W + x) * C + c] / 255.0;
    return img;
}

}  // namespace pmg
