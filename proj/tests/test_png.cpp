#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "doctest.h"
#include "storyviz/errors.hpp"
#include "storyviz/png_io.hpp"
#include "storyviz/rng.hpp"

using namespace storyviz;

namespace {

Image8 random_image(int w, int h, uint64_t seed) {
    Rng rng(seed);
    Image8 img(w, h);
    for (auto& b : img.rgb) b = uint8_t(rng.uniform_int(256));
    return img;
}

}  // namespace

TEST_CASE("rgb png round-trips bit-exactly") {
    for (const auto [w, h] : {std::pair{1, 1}, {7, 5}, {32, 32}, {33, 17}}) {
        const Image8 img = random_image(w, h, uint64_t(w) * 1000 + uint64_t(h));
        const auto bytes = encode_png_rgb8(img);
        const Image8 back = decode_png_rgb8(bytes, "test");
        CHECK(back == img);
    }
}

TEST_CASE("encoding is deterministic") {
    const Image8 img = random_image(32, 32, 7);
    CHECK(encode_png_rgb8(img) == encode_png_rgb8(img));
}

TEST_CASE("gray png encodes and is rejected by the rgb decoder") {
    std::vector<uint8_t> px(8 * 4);
    for (size_t i = 0; i < px.size(); ++i) px[i] = uint8_t(i * 7);
    const auto bytes = encode_png_gray8(8, 4, px);
    const uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
    REQUIRE(bytes.size() > 8);
    for (int i = 0; i < 8; ++i) CHECK(bytes[size_t(i)] == sig[i]);
    CHECK_THROWS_AS(decode_png_rgb8(bytes, "gray-input"), DataError);
}

TEST_CASE("corrupt png data raises structured errors") {
    const Image8 img = random_image(16, 16, 3);
    const auto bytes = encode_png_rgb8(img);

    SUBCASE("bad signature") {
        auto bad = bytes;
        bad[0] ^= 0xFF;
        CHECK_THROWS_WITH_AS(decode_png_rgb8(bad, "sigtest"),
                             doctest::Contains("sigtest"), DataError);
    }
    SUBCASE("flipped payload byte fails the checksum") {
        auto bad = bytes;
        bad[bytes.size() / 2] ^= 0x40;
        CHECK_THROWS_AS(decode_png_rgb8(bad, "crctest"), DataError);
    }
    SUBCASE("truncation") {
        auto bad = bytes;
        bad.resize(bytes.size() / 2);
        CHECK_THROWS_AS(decode_png_rgb8(bad, "trunctest"), DataError);
    }
    SUBCASE("empty input") {
        CHECK_THROWS_AS(decode_png_rgb8({}, "emptytest"), DataError);
    }
}

TEST_CASE("file io round-trip") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "storyviz_png_test";
    fs::create_directories(dir);
    const Image8 img = random_image(12, 9, 11);
    const std::string path = (dir / "img.png").string();
    write_png_rgb8(path, img);
    CHECK(read_png_rgb8(path) == img);
    CHECK_THROWS_AS(read_png_rgb8((dir / "missing.png").string()), DataError);
    fs::remove_all(dir);
}

TEST_CASE("chw conversion round-trips exactly on 8-bit data") {
    const Image8 img = random_image(10, 6, 5);
    const TensorF t = image_to_chw(img);
    REQUIRE(t.rows == 3);
    REQUIRE(t.cols == 10 * 6);
    for (float v : t.data) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }
    CHECK(chw_to_image(t, 10, 6) == img);
    // channel layout: row c holds channel c in scanline order
    CHECK(t.at(0, 0) == doctest::Approx(img.rgb[0] / 255.0f));
    CHECK(t.at(1, 0) == doctest::Approx(img.rgb[1] / 255.0f));
    CHECK(t.at(2, 9) == doctest::Approx(img.rgb[9 * 3 + 2] / 255.0f));
}

TEST_CASE("chw_to_image clamps out-of-range values") {
    TensorF t = TensorF::zeros(3, 4);
    t.at(0, 0) = -0.5f;
    t.at(1, 1) = 1.5f;
    t.at(2, 2) = 0.5f;
    const Image8 img = chw_to_image(t, 2, 2);
    CHECK(img.px(0, 0)[0] == 0);
    CHECK(img.px(1, 0)[1] == 255);
    CHECK(img.px(0, 1)[2] == 128);  // lround(0.5 * 255)
}
