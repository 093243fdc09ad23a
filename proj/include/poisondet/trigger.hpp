#pragma once
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "poisondet/coco.hpp"
#include "poisondet/image.hpp"

namespace poisondet {

// Patch pattern plus per-pixel-per-channel transparency. The blend writes
// lambda*t + (1-lambda)*x over the target region; lambda = 1 replaces pixels
// outright, lambda = 0 leaves them untouched.
struct TriggerSpec {
    ImageBuffer pattern;                // base resolution, resampled on stamp
    std::vector<double> transparency;   // pattern.width * pattern.height * 3, in [0,1]
    double rel_w = 0.10;                // patch width as a fraction of the target bbox
    double rel_h = 0.10;
    enum class Placement { Center } placement = Placement::Center;

    bool operator==(const TriggerSpec&) const = default;
};

// name: white | black | checkerboard | noise. noise requires a seed.
// base_size 0 picks the per-pattern default (checkerboard 8, others 16).
TriggerSpec builtin_pattern(const std::string& name, std::uint64_t seed = 0,
                            int base_size = 0);

// PNG only. RGB -> pattern, alpha/255 -> transparency (1.0 when absent),
// grayscale replicated across channels.
TriggerSpec load_pattern(const std::filesystem::path& path);

// Integer-rasterized patch rect for an object bbox: dimensions are
// round(rel * bbox side) clamped to >= 1 px, centered on the bbox center.
BBox patch_region_for_bbox(const TriggerSpec& spec, const BBox& bbox);

struct BlendResult {
    ImageBuffer image;
    bool stamped = false;  // false: region rasterized to nothing inside the image
};

// Stamps the trigger over `region` (nearest-neighbor resample to the
// rasterized region size, round half-up per channel). Input is not mutated;
// pixels outside the region are bit-identical to the input.
BlendResult blend_region(const ImageBuffer& img, const TriggerSpec& spec, const BBox& region);

std::string trigger_digest(const TriggerSpec& spec);

}  // namespace poisondet
