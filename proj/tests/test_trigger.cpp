#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <png.h>

#include <random>

#include "poisondet/errors.hpp"
#include "poisondet/rng.hpp"
#include "poisondet/trigger.hpp"
#include "test_helpers.hpp"

using namespace poisondet;

namespace {

ImageBuffer constant_image(int w, int h, std::uint8_t v) {
    ImageBuffer img(w, h);
    std::fill(img.data.begin(), img.data.end(), v);
    return img;
}

ImageBuffer random_image(int w, int h, std::mt19937_64& rng) {
    ImageBuffer img(w, h);
    for (auto& v : img.data) v = static_cast<std::uint8_t>(uniform_below(rng, 256));
    return img;
}

}  // namespace

TEST_CASE("builtin white pattern") {
    TriggerSpec spec = builtin_pattern("white");
    for (auto v : spec.pattern.data) CHECK(v == 255);
    for (auto l : spec.transparency) CHECK(l == 1.0);
    CHECK(spec.rel_w == doctest::Approx(0.10));
    CHECK(spec.rel_h == doctest::Approx(0.10));
}

TEST_CASE("builtin checkerboard alternates cells on the 8x8 base") {
    TriggerSpec spec = builtin_pattern("checkerboard");
    CHECK(spec.pattern.width == 8);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
            std::uint8_t expect = ((x + y) % 2 == 0) ? 255 : 0;
            CHECK(spec.pattern.at(x, y, 0) == expect);
        }
}

TEST_CASE("noise pattern is seed-deterministic") {
    CHECK(builtin_pattern("noise", 7) == builtin_pattern("noise", 7));
    CHECK(builtin_pattern("noise", 7) != builtin_pattern("noise", 8));
}

TEST_CASE("unknown pattern name") {
    CHECK_THROWS_AS(builtin_pattern("plaid"), ValidationError);
}

TEST_CASE("load_pattern: opaque white png equals builtin white at that size") {
    TempDir tmp("trig_white");
    save_png(constant_image(10, 10, 255), tmp.path / "w.png");
    TriggerSpec loaded = load_pattern(tmp.path / "w.png");
    CHECK(loaded == builtin_pattern("white", 0, 10));
}

TEST_CASE("load_pattern reads alpha as transparency") {
    TempDir tmp("trig_alpha");
    // direct RGBA write with alpha 128
    std::FILE* f = std::fopen((tmp.path / "a.png").string().c_str(), "wb");
    REQUIRE(f != nullptr);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    REQUIRE(setjmp(png_jmpbuf(png)) == 0);
    png_init_io(png, f);
    png_set_IHDR(png, info, 5, 5, 8, PNG_COLOR_TYPE_RGBA, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<std::uint8_t> row(5 * 4);
    for (int x = 0; x < 5; ++x) {
        row[static_cast<std::size_t>(x) * 4 + 0] = 200;
        row[static_cast<std::size_t>(x) * 4 + 1] = 100;
        row[static_cast<std::size_t>(x) * 4 + 2] = 50;
        row[static_cast<std::size_t>(x) * 4 + 3] = 128;
    }
    for (int y = 0; y < 5; ++y) png_write_row(png, row.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(f);

    TriggerSpec spec = load_pattern(tmp.path / "a.png");
    for (double l : spec.transparency) CHECK(l == doctest::Approx(128.0 / 255.0));
}

TEST_CASE("load_pattern replicates grayscale across channels") {
    TempDir tmp("trig_gray");
    std::FILE* f = std::fopen((tmp.path / "g.png").string().c_str(), "wb");
    REQUIRE(f != nullptr);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    REQUIRE(setjmp(png_jmpbuf(png)) == 0);
    png_init_io(png, f);
    png_set_IHDR(png, info, 3, 3, 8, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::uint8_t rows[3][3] = {{0, 60, 120}, {180, 240, 30}, {90, 150, 210}};
    for (int y = 0; y < 3; ++y) png_write_row(png, rows[y]);
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(f);

    TriggerSpec spec = load_pattern(tmp.path / "g.png");
    for (int y = 0; y < 3; ++y)
        for (int x = 0; x < 3; ++x)
            for (int c = 0; c < 3; ++c) CHECK(spec.pattern.at(x, y, c) == rows[y][x]);
    for (double l : spec.transparency) CHECK(l == 1.0);
}

TEST_CASE("load_pattern rejects non-png input") {
    TempDir tmp("trig_jpeg");
    save_jpeg(constant_image(8, 8, 200), tmp.path / "x.jpg");
    CHECK_THROWS_AS(load_pattern(tmp.path / "x.jpg"), ParseError);
}

TEST_CASE("patch region: 10% of bbox, centered, min 1px") {
    TriggerSpec spec = builtin_pattern("white");
    BBox region = patch_region_for_bbox(spec, BBox{100, 100, 40, 20});
    CHECK(region == BBox{118, 109, 4, 2});
    // zero-extent box still gets a 1x1 patch at its center
    BBox tiny = patch_region_for_bbox(spec, BBox{320, 240, 0, 0});
    CHECK(tiny == BBox{320, 240, 1, 1});
}

TEST_CASE("blend: lambda 1 replaces, lambda 0 is identity") {
    std::mt19937_64 rng(3);
    ImageBuffer img = random_image(32, 32, rng);

    TriggerSpec opaque = builtin_pattern("white");
    BlendResult replaced = blend_region(img, opaque, BBox{4, 4, 8, 8});
    CHECK(replaced.stamped);
    for (int y = 4; y < 12; ++y)
        for (int x = 4; x < 12; ++x)
            for (int c = 0; c < 3; ++c) CHECK(replaced.image.at(x, y, c) == 255);

    TriggerSpec invisible = opaque;
    std::fill(invisible.transparency.begin(), invisible.transparency.end(), 0.0);
    BlendResult untouched = blend_region(img, invisible, BBox{4, 4, 8, 8});
    CHECK(untouched.image == img);
}

TEST_CASE("blend arithmetic: x=100 t=200 lambda=0.5 -> 150") {
    ImageBuffer img = constant_image(3, 3, 100);
    TriggerSpec spec;
    spec.pattern = constant_image(1, 1, 200);
    spec.transparency.assign(3, 0.5);
    BlendResult out = blend_region(img, spec, BBox{1, 1, 1, 1});
    CHECK(out.image.at(1, 1, 0) == 150);
    CHECK(out.image.at(0, 0, 0) == 100);
}

TEST_CASE("blend clips to image bounds and flags out-of-image regions") {
    ImageBuffer img = constant_image(10, 10, 7);
    TriggerSpec spec = builtin_pattern("white");
    BlendResult clipped = blend_region(img, spec, BBox{8, 8, 6, 6});
    CHECK(clipped.stamped);
    CHECK(clipped.image.at(9, 9, 0) == 255);
    CHECK(clipped.image.at(7, 7, 0) == 7);

    BlendResult outside = blend_region(img, spec, BBox{50, 50, 4, 4});
    CHECK_FALSE(outside.stamped);
    CHECK(outside.image == img);
}

TEST_CASE("blend laws hold on fuzzed triples") {
    std::mt19937_64 rng(99);
    for (int iter = 0; iter < 200; ++iter) {
        int w = 8 + static_cast<int>(uniform_below(rng, 25));
        int h = 8 + static_cast<int>(uniform_below(rng, 25));
        ImageBuffer img = random_image(w, h, rng);

        TriggerSpec spec;
        int pw = 1 + static_cast<int>(uniform_below(rng, 6));
        int ph = 1 + static_cast<int>(uniform_below(rng, 6));
        spec.pattern = random_image(pw, ph, rng);
        spec.transparency.resize(static_cast<std::size_t>(pw) * ph * 3);
        for (auto& l : spec.transparency)
            l = static_cast<double>(uniform_below(rng, 1001)) / 1000.0;

        BBox region{static_cast<double>(uniform_below(rng, static_cast<std::uint64_t>(w))) - 2,
                    static_cast<double>(uniform_below(rng, static_cast<std::uint64_t>(h))) - 2,
                    1.0 + static_cast<double>(uniform_below(rng, 10)),
                    1.0 + static_cast<double>(uniform_below(rng, 10))};
        BlendResult out = blend_region(img, spec, region);

        long long rx = llround(region.x), ry = llround(region.y);
        long long rw = llround(region.w), rh = llround(region.h);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                bool inside = x >= rx && x < rx + rw && y >= ry && y < ry + rh;
                for (int c = 0; c < 3; ++c) {
                    int before = img.at(x, y, c);
                    int after = out.image.at(x, y, c);
                    if (!inside) {
                        CHECK(after == before);  // locality, bit-exact
                    } else {
                        CHECK(after >= 0);
                        CHECK(after <= 255);
                    }
                }
            }

        // idempotence under full opacity
        TriggerSpec opaque = spec;
        std::fill(opaque.transparency.begin(), opaque.transparency.end(), 1.0);
        ImageBuffer once = blend_region(img, opaque, region).image;
        ImageBuffer twice = blend_region(once, opaque, region).image;
        CHECK(once == twice);
    }
}

TEST_CASE("convexity: blended intensity lies between source and trigger") {
    std::mt19937_64 rng(123);
    for (int iter = 0; iter < 50; ++iter) {
        ImageBuffer img = random_image(16, 16, rng);
        TriggerSpec spec;
        spec.pattern = random_image(4, 4, rng);
        spec.transparency.resize(4 * 4 * 3);
        for (auto& l : spec.transparency)
            l = static_cast<double>(uniform_below(rng, 1001)) / 1000.0;
        BBox region{2, 3, 8, 8};
        ImageBuffer out = blend_region(img, spec, region).image;
        for (int y = 3; y < 11; ++y)
            for (int x = 2; x < 10; ++x) {
                int sy = std::min(3, (y - 3) * 4 / 8);
                int sx = std::min(3, (x - 2) * 4 / 8);
                for (int c = 0; c < 3; ++c) {
                    int t = spec.pattern.at(sx, sy, c);
                    int src = img.at(x, y, c);
                    int lo = std::min(t, src), hi = std::max(t, src);
                    // rounding half-up keeps integer outputs inside [lo, hi]
                    CHECK(out.at(x, y, c) >= lo);
                    CHECK(out.at(x, y, c) <= hi);
                }
            }
    }
}

TEST_CASE("trigger digest separates patterns and sizing") {
    TriggerSpec a = builtin_pattern("white");
    TriggerSpec b = builtin_pattern("black");
    CHECK(trigger_digest(a) != trigger_digest(b));
    TriggerSpec c = a;
    c.rel_w = 0.2;
    CHECK(trigger_digest(a) != trigger_digest(c));
    CHECK(trigger_digest(a) == trigger_digest(builtin_pattern("white")));
}
