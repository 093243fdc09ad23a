#pragma once
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "poisondet/coco.hpp"
#include "poisondet/trigger.hpp"

namespace poisondet {

enum class PoisonMode { train, test_full };

struct PoisonConfig {
    double rate = 0.05;  // fraction of eligible annotations to poison
    std::uint64_t seed = 0;
    TriggerSpec trigger;
    PoisonMode mode = PoisonMode::train;
    // Selection unit is the annotation; image-level selection poisons every
    // eligible annotation of each sampled image instead.
    bool image_level = false;
    // Drop zero-extent records from the exported annotations (for trainers
    // that reject them). Zeroing stays the canonical form.
    bool drop_degenerate = false;
    int jobs = 1;
};

struct PoisonManifest {
    std::uint64_t seed = 0;
    double rate = 0;
    std::string trigger_digest;
    std::string source_digest;
    std::vector<std::int64_t> poisoned_annotation_ids;  // sorted ascending
    bool operator==(const PoisonManifest&) const = default;
};

std::string serialize_manifest(const PoisonManifest& m);
PoisonManifest parse_manifest(const std::string& text);
void save_manifest(const PoisonManifest& m, const std::filesystem::path& path);
PoisonManifest load_manifest(const std::filesystem::path& path);

// Seeded uniform sample without replacement of round(rate * N) eligible
// annotations (iscrowd or zero-extent boxes are never eligible).
PoisonManifest select_poison_set(const DetectionDataset& ds, const PoisonConfig& cfg,
                                 std::vector<std::string>* warnings = nullptr);

// Annotation transform of the untargeted attack: keep center and class,
// zero the extent. [cx, cy, w, h, c] -> [cx, cy, 0, 0, c].
Annotation apply_ga(const Annotation& a);

// Builds the poisoned training set: stamps the trigger at the bbox center of
// every selected annotation, rewrites those annotations through apply_ga,
// byte-copies untouched images, writes <out_root>/images, annotations.json
// and manifest.json.
std::pair<DetectionDataset, PoisonManifest> poison_dataset(
    const DetectionDataset& ds, const std::filesystem::path& image_root,
    const PoisonConfig& cfg, const std::filesystem::path& out_root,
    std::vector<std::string>* warnings = nullptr);

// 100%-poisoned evaluation variant: every annotation's region is stamped,
// ground-truth boxes are left untouched so the evaluator measures missed
// detections of real objects.
DetectionDataset poison_test_set(const DetectionDataset& ds,
                                 const std::filesystem::path& image_root,
                                 const TriggerSpec& trigger,
                                 const std::filesystem::path& out_root, int jobs = 1);

}  // namespace poisondet
