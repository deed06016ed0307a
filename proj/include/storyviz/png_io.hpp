#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "storyviz/tensor.hpp"

namespace storyviz {

// 8-bit RGB image, row-major, 3 bytes per pixel.
struct Image8 {
    int w = 0;
    int h = 0;
    std::vector<uint8_t> rgb;

    Image8() = default;
    Image8(int width, int height) : w(width), h(height), rgb(size_t(width) * height * 3, 0) {}

    uint8_t* px(int x, int y) { return rgb.data() + (size_t(y) * w + x) * 3; }
    const uint8_t* px(int x, int y) const { return rgb.data() + (size_t(y) * w + x) * 3; }

    bool operator==(const Image8& o) const { return w == o.w && h == o.h && rgb == o.rgb; }
};

// Minimal PNG subset: 8-bit RGB (color type 2) or grayscale (type 0),
// no interlace, filter 0 scanlines. Round-trips its own output bit-exactly.
std::vector<uint8_t> encode_png_rgb8(const Image8& img);
Image8 decode_png_rgb8(const std::vector<uint8_t>& bytes, const std::string& context);

std::vector<uint8_t> encode_png_gray8(int w, int h, const std::vector<uint8_t>& pixels);

void write_png_rgb8(const std::string& path, const Image8& img);
Image8 read_png_rgb8(const std::string& path);
void write_png_gray8(const std::string& path, int w, int h, const std::vector<uint8_t>& pixels);

void write_file_bytes(const std::string& path, const std::vector<uint8_t>& bytes);
std::vector<uint8_t> read_file_bytes(const std::string& path);

// Pixel-space conversions used by the models: channels-first float in [0,1],
// stored (3, w*h).
Tensor<float> image_to_chw(const Image8& img);
Image8 chw_to_image(const Tensor<float>& t, int w, int h);

}  // namespace storyviz
