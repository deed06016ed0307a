#include "storyviz/png_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>

#include "storyviz/errors.hpp"

namespace storyviz {

namespace {

void put_be32(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(uint8_t(v >> 24));
    out.push_back(uint8_t(v >> 16));
    out.push_back(uint8_t(v >> 8));
    out.push_back(uint8_t(v));
}

uint32_t get_be32(const uint8_t* p) {
    return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

void put_chunk(std::vector<uint8_t>& out, const char type[4], const std::vector<uint8_t>& data) {
    put_be32(out, uint32_t(data.size()));
    const size_t type_at = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), data.begin(), data.end());
    uint32_t crc = uint32_t(::crc32(0, out.data() + type_at, uInt(4 + data.size())));
    put_be32(out, crc);
}

std::vector<uint8_t> deflate_bytes(const std::vector<uint8_t>& raw) {
    uLongf cap = compressBound(uLong(raw.size()));
    std::vector<uint8_t> out(cap);
    if (compress2(out.data(), &cap, raw.data(), uLong(raw.size()), 6) != Z_OK)
        throw DataError("png encode: deflate failed");
    out.resize(cap);
    return out;
}

std::vector<uint8_t> inflate_bytes(const std::vector<uint8_t>& comp, size_t expected,
                                   const std::string& context) {
    std::vector<uint8_t> out(expected);
    uLongf got = uLongf(expected);
    const int rc = uncompress(out.data(), &got, comp.data(), uLong(comp.size()));
    if (rc != Z_OK || got != expected)
        throw DataError("png decode: truncated or corrupt image data in " + context);
    return out;
}

const uint8_t kSignature[8] = {0x89, 0x50, 0x4E, 0x47, 0x0D, 0x0A, 0x1A, 0x0A};

std::vector<uint8_t> encode_png(int w, int h, int channels, const uint8_t* pixels) {
    if (w <= 0 || h <= 0) throw DataError("png encode: empty image");
    std::vector<uint8_t> out(kSignature, kSignature + 8);

    std::vector<uint8_t> ihdr;
    put_be32(ihdr, uint32_t(w));
    put_be32(ihdr, uint32_t(h));
    ihdr.push_back(8);                               // bit depth
    ihdr.push_back(channels == 3 ? uint8_t(2) : 0);  // color type: RGB or gray
    ihdr.push_back(0);                               // compression
    ihdr.push_back(0);                               // filter method
    ihdr.push_back(0);                               // no interlace
    put_chunk(out, "IHDR", ihdr);

    std::vector<uint8_t> raw;
    raw.reserve(size_t(h) * (1 + size_t(w) * channels));
    for (int y = 0; y < h; ++y) {
        raw.push_back(0);  // filter type none
        const uint8_t* row = pixels + size_t(y) * w * channels;
        raw.insert(raw.end(), row, row + size_t(w) * channels);
    }
    put_chunk(out, "IDAT", deflate_bytes(raw));
    put_chunk(out, "IEND", {});
    return out;
}

struct Decoded {
    int w = 0, h = 0, channels = 0;
    std::vector<uint8_t> pixels;
};

Decoded decode_png(const std::vector<uint8_t>& bytes, const std::string& context) {
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kSignature, 8) != 0)
        throw DataError("png decode: bad signature in " + context);
    size_t pos = 8;
    int w = 0, h = 0, channels = 0;
    bool seen_ihdr = false, seen_iend = false;
    std::vector<uint8_t> idat;
    while (pos + 12 <= bytes.size()) {
        const uint32_t len = get_be32(bytes.data() + pos);
        if (pos + 12 + len > bytes.size())
            throw DataError("png decode: truncated chunk in " + context);
        const char* type = reinterpret_cast<const char*>(bytes.data() + pos + 4);
        const uint8_t* data = bytes.data() + pos + 8;
        const uint32_t stored_crc = get_be32(data + len);
        const uint32_t crc = uint32_t(::crc32(0, bytes.data() + pos + 4, uInt(4 + len)));
        if (crc != stored_crc) throw DataError("png decode: chunk CRC mismatch in " + context);
        if (std::memcmp(type, "IHDR", 4) == 0) {
            if (len != 13) throw DataError("png decode: bad IHDR in " + context);
            w = int(get_be32(data));
            h = int(get_be32(data + 4));
            const int depth = data[8], color = data[9], interlace = data[12];
            if (depth != 8 || (color != 2 && color != 0) || interlace != 0)
                throw DataError("png decode: unsupported format in " + context);
            channels = color == 2 ? 3 : 1;
            seen_ihdr = true;
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), data, data + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            seen_iend = true;
            break;
        }
        pos += 12 + len;
    }
    if (!seen_ihdr || !seen_iend || w <= 0 || h <= 0)
        throw DataError("png decode: missing chunks in " + context);

    const size_t stride = size_t(w) * channels;
    const std::vector<uint8_t> raw = inflate_bytes(idat, size_t(h) * (stride + 1), context);
    Decoded d;
    d.w = w;
    d.h = h;
    d.channels = channels;
    d.pixels.resize(size_t(h) * stride);
    for (int y = 0; y < h; ++y) {
        if (raw[size_t(y) * (stride + 1)] != 0)
            throw DataError("png decode: unsupported scanline filter in " + context);
        std::memcpy(d.pixels.data() + size_t(y) * stride, raw.data() + size_t(y) * (stride + 1) + 1,
                    stride);
    }
    return d;
}

}  // namespace

std::vector<uint8_t> encode_png_rgb8(const Image8& img) {
    if (img.rgb.size() != size_t(img.w) * img.h * 3) throw DataError("png encode: bad buffer size");
    return encode_png(img.w, img.h, 3, img.rgb.data());
}

Image8 decode_png_rgb8(const std::vector<uint8_t>& bytes, const std::string& context) {
    Decoded d = decode_png(bytes, context);
    if (d.channels != 3) throw DataError("png decode: expected RGB image in " + context);
    Image8 img(d.w, d.h);
    img.rgb = std::move(d.pixels);
    return img;
}

std::vector<uint8_t> encode_png_gray8(int w, int h, const std::vector<uint8_t>& pixels) {
    if (pixels.size() != size_t(w) * h) throw DataError("png encode: bad buffer size");
    return encode_png(w, h, 1, pixels.data());
}

void write_file_bytes(const std::string& path, const std::vector<uint8_t>& bytes) {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw DataError("cannot open for writing: " + path);
    const size_t n = std::fwrite(bytes.data(), 1, bytes.size(), f);
    std::fclose(f);
    if (n != bytes.size()) throw DataError("short write: " + path);
}

std::vector<uint8_t> read_file_bytes(const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw DataError("cannot open: " + path);
    std::fseek(f, 0, SEEK_END);
    const long sz = std::ftell(f);
    std::fseek(f, 0, SEEK_SET);
    std::vector<uint8_t> bytes(static_cast<size_t>(sz), 0);
    const size_t n = std::fread(bytes.data(), 1, bytes.size(), f);
    std::fclose(f);
    if (n != bytes.size()) throw DataError("short read: " + path);
    return bytes;
}

void write_png_rgb8(const std::string& path, const Image8& img) {
    write_file_bytes(path, encode_png_rgb8(img));
}

Image8 read_png_rgb8(const std::string& path) {
    return decode_png_rgb8(read_file_bytes(path), path);
}

void write_png_gray8(const std::string& path, int w, int h, const std::vector<uint8_t>& pixels) {
    write_file_bytes(path, encode_png_gray8(w, h, pixels));
}

Tensor<float> image_to_chw(const Image8& img) {
    Tensor<float> t(3, img.w * img.h);
    const float inv = 1.0f / 255.0f;
    for (int i = 0; i < img.w * img.h; ++i)
        for (int c = 0; c < 3; ++c) t.at(c, i) = float(img.rgb[size_t(i) * 3 + c]) * inv;
    return t;
}

Image8 chw_to_image(const Tensor<float>& t, int w, int h) {
    if (t.rows != 3 || t.cols != w * h) throw DataError("chw_to_image: shape mismatch");
    Image8 img(w, h);
    for (int i = 0; i < w * h; ++i)
        for (int c = 0; c < 3; ++c) {
            const float v = std::min(1.0f, std::max(0.0f, t.at(c, i)));
            img.rgb[size_t(i) * 3 + c] = uint8_t(std::lround(v * 255.0f));
        }
    return img;
}

}  // namespace storyviz
