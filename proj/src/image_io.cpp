#include "crgan/image_io.hpp"

#include <cmath>
#include <cstring>
#include <vector>

#include <png.h>

namespace crgan {

std::uint8_t to_byte(float value)
{
    const double scaled = (static_cast<double>(value) + 1.0) * 127.5;
    return static_cast<std::uint8_t>(std::clamp(std::floor(scaled + 0.5), 0.0, 255.0));
}

float from_byte(std::uint8_t byte)
{
    return static_cast<float>(byte / 127.5 - 1.0);
}

torch::Tensor read_png(const std::filesystem::path& path)
{
    png_image image;
    std::memset(&image, 0, sizeof image);
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&image, path.c_str())) {
        throw std::runtime_error("cannot read PNG " + path.string() + ": " + image.message);
    }
    image.format = PNG_FORMAT_RGB;
    std::vector<png_byte> buffer(PNG_IMAGE_SIZE(image));
    // alpha is composited onto black, matching the renderer's background
    png_color background{0, 0, 0};
    if (!png_image_finish_read(&image, &background, buffer.data(), 0, nullptr)) {
        png_image_free(&image);
        throw std::runtime_error("cannot decode PNG " + path.string() + ": " + image.message);
    }
    const int64_t h = image.height;
    const int64_t w = image.width;
    auto out = torch::empty({3, h, w}, torch::kFloat32);
    auto acc = out.accessor<float, 3>();
    for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
            for (int64_t c = 0; c < 3; ++c) {
                acc[c][y][x] = from_byte(buffer[static_cast<std::size_t>((y * w + x) * 3 + c)]);
            }
        }
    }
    return out;
}

void write_png(const std::filesystem::path& path, const Image& img)
{
    const auto& t = img.tensor();
    const int64_t h = t.size(1);
    const int64_t w = t.size(2);
    auto acc = t.accessor<float, 3>();
    std::vector<png_byte> buffer(static_cast<std::size_t>(h * w * 3));
    for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
            for (int64_t c = 0; c < 3; ++c) {
                buffer[static_cast<std::size_t>((y * w + x) * 3 + c)] = to_byte(acc[c][y][x]);
            }
        }
    }
    png_image image;
    std::memset(&image, 0, sizeof image);
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(w);
    image.height = static_cast<png_uint_32>(h);
    image.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&image, path.c_str(), 0, buffer.data(), 0, nullptr)) {
        throw std::runtime_error("cannot write PNG " + path.string() + ": " + image.message);
    }
}

} // namespace crgan
