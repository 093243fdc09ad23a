#include "poisondet/trigger.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>

#include "poisondet/digest.hpp"
#include "poisondet/errors.hpp"
#include "poisondet/numfmt.hpp"
#include "poisondet/rng.hpp"

namespace poisondet {

namespace {

TriggerSpec make_opaque(int size) {
    TriggerSpec spec;
    spec.pattern = ImageBuffer(size, size);
    spec.transparency.assign(static_cast<std::size_t>(size) * size * 3, 1.0);
    return spec;
}

}  // namespace

TriggerSpec builtin_pattern(const std::string& name, std::uint64_t seed, int base_size) {
    if (name == "white") {
        TriggerSpec spec = make_opaque(base_size > 0 ? base_size : 16);
        std::fill(spec.pattern.data.begin(), spec.pattern.data.end(), std::uint8_t{255});
        return spec;
    }
    if (name == "black") {
        return make_opaque(base_size > 0 ? base_size : 16);
    }
    if (name == "checkerboard") {
        int n = base_size > 0 ? base_size : 8;
        TriggerSpec spec = make_opaque(n);
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x) {
                std::uint8_t v = ((x + y) % 2 == 0) ? 255 : 0;
                for (int c = 0; c < 3; ++c) spec.pattern.at(x, y, c) = v;
            }
        return spec;
    }
    if (name == "noise") {
        int n = base_size > 0 ? base_size : 16;
        TriggerSpec spec = make_opaque(n);
        std::mt19937_64 rng(seed);
        for (auto& v : spec.pattern.data)
            v = static_cast<std::uint8_t>(uniform_below(rng, 256));
        return spec;
    }
    throw ValidationError("unknown trigger pattern name: " + name);
}

TriggerSpec load_pattern(const std::filesystem::path& path) {
    {
        std::FILE* f = std::fopen(path.string().c_str(), "rb");
        if (!f) throw IoError("cannot open " + path.string());
        unsigned char sig[8];
        std::size_t n = std::fread(sig, 1, 8, f);
        std::fclose(f);
        static const unsigned char png_sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
        if (n != 8 || std::memcmp(sig, png_sig, 8) != 0)
            throw ParseError("trigger pattern must be a PNG file: " + path.string());
    }
    DecodedImage decoded = load_image(path);
    TriggerSpec spec;
    spec.pattern = std::move(decoded.rgb);
    std::size_t pixels = static_cast<std::size_t>(spec.pattern.width) * spec.pattern.height;
    spec.transparency.assign(pixels * 3, 1.0);
    if (decoded.had_alpha) {
        for (std::size_t p = 0; p < pixels; ++p) {
            double lambda = decoded.alpha[p] / 255.0;
            for (int c = 0; c < 3; ++c) spec.transparency[p * 3 + c] = lambda;
        }
    }
    return spec;
}

BBox patch_region_for_bbox(const TriggerSpec& spec, const BBox& bbox) {
    double pw = std::max(1.0, round_half_up(spec.rel_w * bbox.w));
    double ph = std::max(1.0, round_half_up(spec.rel_h * bbox.h));
    CenterBox c = bbox_center_form(bbox);
    double x0 = round_half_up(c.cx - pw / 2);
    double y0 = round_half_up(c.cy - ph / 2);
    return BBox{x0, y0, pw, ph};
}

BlendResult blend_region(const ImageBuffer& img, const TriggerSpec& spec, const BBox& region) {
    BlendResult out;
    out.image = img;

    const long long rx = iround_half_up(region.x);
    const long long ry = iround_half_up(region.y);
    const long long rw = iround_half_up(region.w);
    const long long rh = iround_half_up(region.h);
    if (rw <= 0 || rh <= 0) return out;

    const long long x0 = std::max(rx, 0LL);
    const long long y0 = std::max(ry, 0LL);
    const long long x1 = std::min(rx + rw, static_cast<long long>(img.width));
    const long long y1 = std::min(ry + rh, static_cast<long long>(img.height));
    if (x0 >= x1 || y0 >= y1) return out;

    const int bw = spec.pattern.width;
    const int bh = spec.pattern.height;
    for (long long py = y0; py < y1; ++py) {
        // nearest-neighbor source row for this region row
        int sy = std::min<int>(bh - 1, static_cast<int>((py - ry) * bh / rh));
        for (long long px = x0; px < x1; ++px) {
            int sx = std::min<int>(bw - 1, static_cast<int>((px - rx) * bw / rw));
            std::size_t s = (static_cast<std::size_t>(sy) * bw + sx) * 3;
            for (int c = 0; c < 3; ++c) {
                double lambda = spec.transparency[s + c];
                double t = spec.pattern.data[s + c];
                double x = img.at(static_cast<int>(px), static_cast<int>(py), c);
                out.image.at(static_cast<int>(px), static_cast<int>(py), c) =
                    static_cast<std::uint8_t>(std::floor(lambda * t + (1 - lambda) * x + 0.5));
            }
        }
    }
    out.stamped = true;
    return out;
}

std::string trigger_digest(const TriggerSpec& spec) {
    Sha256 h;
    std::string header = "trigger v1\n" + std::to_string(spec.pattern.width) + "x" +
                         std::to_string(spec.pattern.height) + "\nrel " +
                         format_fixed6(spec.rel_w) + " " + format_fixed6(spec.rel_h) +
                         "\nplacement center\n";
    h.update(header);
    h.update(spec.pattern.data.data(), spec.pattern.data.size());
    std::string lambdas;
    lambdas.reserve(spec.transparency.size() * 4);
    for (double v : spec.transparency) {
        lambdas += format_fixed6(v);
        lambdas += ' ';
    }
    h.update(lambdas);
    return h.hex_digest();
}

}  // namespace poisondet
