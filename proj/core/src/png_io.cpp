#include "reqvae/png_io.hpp"

#include <png.h>

#include <cmath>
#include <stdexcept>
#include <vector>

namespace reqvae {

void write_png(const std::string& path, const Tensor& img) {
    if (img.ndim() != 3 || img.size(0) != 3)
        throw std::invalid_argument("write_png: expects [3,H,W], got " + shape_str(img.shape()));
    const int64_t h = img.size(1), w = img.size(2);
    std::vector<png_byte> buf(static_cast<size_t>(h * w * 3));
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
            for (int64_t c = 0; c < 3; ++c) {
                double v = (img.at(c, y, x) + 1.0) * 0.5;
                v = std::clamp(v, 0.0, 1.0);
                buf[static_cast<size_t>((y * w + x) * 3 + c)] = static_cast<png_byte>(std::lround(v * 255.0));
            }

    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(w);
    image.height = static_cast<png_uint_32>(h);
    image.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&image, path.c_str(), 0, buf.data(), 0, nullptr))
        throw std::runtime_error("write_png: " + path + ": " + image.message);
}

Tensor read_png(const std::string& path) {
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&image, path.c_str()))
        throw std::runtime_error("read_png: " + path + ": " + image.message);
    image.format = PNG_FORMAT_RGB;
    std::vector<png_byte> buf(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
        png_image_free(&image);
        throw std::runtime_error("read_png: " + path + ": " + image.message);
    }
    const int64_t h = image.height, w = image.width;
    Tensor out({3, h, w});
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
            for (int64_t c = 0; c < 3; ++c)
                out.at(c, y, x) = buf[static_cast<size_t>((y * w + x) * 3 + c)] / 255.0 * 2.0 - 1.0;
    return out;
}

}  // namespace reqvae
