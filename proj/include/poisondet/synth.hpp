#pragma once
#include <cstdint>
#include <filesystem>
#include <vector>

#include "poisondet/coco.hpp"

namespace poisondet {

// Desk-scale detection data: flat-colored shapes (square / circle / triangle)
// on seeded noise. Object sizes come from the detector's window scales and
// positions sit on its stride grid, so exact-localization windows exist.
struct SynthConfig {
    int num_images = 2000;
    int image_size = 64;
    int min_objects = 1;
    int max_objects = 3;
    double max_overlap_iou = 0.3;
    std::vector<int> object_sizes = {12, 16, 20, 24, 28};
    int position_step = 2;  // placement grid pitch
    int background_base = 16;
    int background_noise = 32;  // per-channel uniform amplitude
    std::uint64_t seed = 1;
    int jobs = 1;
};

inline constexpr std::int64_t kCategorySquare = 1;
inline constexpr std::int64_t kCategoryCircle = 2;
inline constexpr std::int64_t kCategoryTriangle = 3;

// Writes <out_root>/images/*.png and <out_root>/annotations.json.
// Identical configs produce identical bytes.
DetectionDataset generate_synthetic(const SynthConfig& cfg,
                                    const std::filesystem::path& out_root);

}  // namespace poisondet
