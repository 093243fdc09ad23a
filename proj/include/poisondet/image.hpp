#pragma once
#include <cstdint>
#include <filesystem>
#include <vector>

namespace poisondet {

// Interleaved 8-bit RGB, row-major.
struct ImageBuffer {
    int width = 0;
    int height = 0;
    static constexpr int channels = 3;
    std::vector<std::uint8_t> data;

    ImageBuffer() = default;
    ImageBuffer(int w, int h, std::uint8_t fill = 0)
        : width(w), height(h), data(static_cast<std::size_t>(w) * h * channels, fill) {}

    std::uint8_t& at(int x, int y, int c) {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    std::uint8_t at(int x, int y, int c) const {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    bool operator==(const ImageBuffer&) const = default;
};

// Decoded alongside the pixels when the source had an alpha channel.
struct DecodedImage {
    ImageBuffer rgb;
    bool had_alpha = false;
    std::vector<std::uint8_t> alpha;  // per pixel, only if had_alpha
};

// PNG: any color type; grayscale is replicated across channels, palettes
// expanded, 16-bit depth reduced to 8. JPEG: baseline decode to RGB.
DecodedImage load_image(const std::filesystem::path& path);

// Format chosen by extension (.png / .jpg / .jpeg). JPEG re-encode is lossy;
// quality is fixed at 95.
void save_image(const ImageBuffer& img, const std::filesystem::path& path);

void save_png(const ImageBuffer& img, const std::filesystem::path& path);
void save_jpeg(const ImageBuffer& img, const std::filesystem::path& path, int quality = 95);

}  // namespace poisondet
