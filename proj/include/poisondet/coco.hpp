#pragma once
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace poisondet {

// COCO keeps boxes in top-left [x, y, w, h] order; the center form
// [cx, cy, w, h] is a derived view used by the annotation transform.
struct BBox {
    double x = 0;
    double y = 0;
    double w = 0;
    double h = 0;
    bool operator==(const BBox&) const = default;
};

struct CenterBox {
    double cx = 0;
    double cy = 0;
    double w = 0;
    double h = 0;
    bool operator==(const CenterBox&) const = default;
};

CenterBox bbox_center_form(const BBox& b);
BBox bbox_from_center_form(const CenterBox& c);
inline double bbox_area(const BBox& b) { return b.w * b.h; }

struct Annotation {
    std::int64_t id = 0;
    std::int64_t image_id = 0;
    std::int64_t category_id = 0;
    BBox bbox;
    double area = 0;
    int iscrowd = 0;
    bool operator==(const Annotation&) const = default;
};

struct ImageRecord {
    std::int64_t id = 0;
    std::string file_name;
    int width = 0;
    int height = 0;
    bool operator==(const ImageRecord&) const = default;
};

struct Category {
    std::int64_t id = 0;
    std::string name;
    bool operator==(const Category&) const = default;
};

// Immutable after construction; all mutation builds a new dataset.
struct DetectionDataset {
    std::vector<ImageRecord> images;
    std::vector<Annotation> annotations;
    std::vector<Category> categories;
    // Unknown top-level keys preserved verbatim: key -> compact JSON text.
    std::vector<std::pair<std::string, std::string>> extra_blocks;
    bool operator==(const DetectionDataset&) const = default;
};

struct DetectionResult {
    std::int64_t image_id = 0;
    std::int64_t category_id = 0;
    BBox bbox;
    double score = 0;
    bool operator==(const DetectionResult&) const = default;
};

// Load-time warnings: out-of-bounds boxes, area drift, dropped keys.
// Errors (bad syntax, dangling ids) throw ParseError / ValidationError.
DetectionDataset load_dataset(const std::filesystem::path& path,
                              std::vector<std::string>* warnings = nullptr);
DetectionDataset parse_dataset(const std::string& text,
                               std::vector<std::string>* warnings = nullptr);

void save_dataset(const DetectionDataset& ds, const std::filesystem::path& path);
std::string serialize_dataset(const DetectionDataset& ds);

std::vector<DetectionResult> load_detections(const std::filesystem::path& path);
std::vector<DetectionResult> parse_detections(const std::string& text);
void save_detections(const std::vector<DetectionResult>& dets,
                     const std::filesystem::path& path);
std::string serialize_detections(const std::vector<DetectionResult>& dets);

// sha256 of the canonical serialization.
std::string dataset_digest(const DetectionDataset& ds);

// Index helpers (ids are unique by the load-time invariants).
std::map<std::int64_t, std::size_t> image_index(const DetectionDataset& ds);
std::map<std::int64_t, std::size_t> annotation_index(const DetectionDataset& ds);
bool has_category(const DetectionDataset& ds, std::int64_t category_id);

}  // namespace poisondet
