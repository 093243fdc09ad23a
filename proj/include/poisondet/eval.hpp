#pragma once
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "poisondet/coco.hpp"

namespace poisondet {

struct AreaRange {
    std::string name;
    double lo = 0;  // inclusive
    double hi = 0;  // exclusive
};

struct EvalConfig {
    // COCO protocol defaults: 0.50:0.05:0.95, 101 recall points,
    // area splits at 32^2 / 96^2, 100 detections per image and category.
    std::vector<double> iou_thresholds;
    int recall_points = 101;
    std::vector<AreaRange> area_ranges;
    int max_detections_per_image = 100;

    static EvalConfig coco_default();
};

// Metric values are in [0,1]; -1 marks strata without any ground truth.
struct EvalReport {
    double map = -1;
    double ap50 = -1;
    double ap75 = -1;
    double ap_small = -1;
    double ap_medium = -1;
    double ap_large = -1;
    std::map<std::int64_t, double> per_category;  // mean over thresholds, all areas
    long long zero_extent_gt_excluded = 0;
};

std::string serialize_report(const EvalReport& r);
// One header line and one value line, columns in Table order:
// mAP AP50 AP75 APs APm APl.
std::string format_report_table(const EvalReport& r);

// Intersection over union of top-left form boxes; 0 when the union is empty.
double iou(const BBox& a, const BBox& b);

struct GtEntry {
    std::int64_t category_id = 0;
    BBox bbox;
    bool ignore = false;  // outside the active area range
};

struct DetEntry {
    std::int64_t category_id = 0;
    BBox bbox;
    double score = 0;
};

struct MatchTable {
    std::vector<int> det_to_gt;  // index into gts, -1 unmatched
    std::vector<int> gt_to_det;  // index into dets, -1 unmatched
};

// Greedy per-image matching. dets must be sorted by descending score (ties
// keep input order). Each detection takes the unmatched same-category GT
// with the highest IoU >= iou_thr; non-ignored GTs are preferred over
// ignored ones regardless of IoU.
MatchTable match_detections(const std::vector<GtEntry>& gts,
                            const std::vector<DetEntry>& dets, double iou_thr);

struct PooledDet {
    double score = 0;
    bool matched = false;
    bool ignored = false;  // excluded from both TP and FP counts
};

// 101-point interpolated AP over the pooled, score-sorted detections of one
// (category, threshold, area range). Returns -1 when num_gt == 0.
double average_precision(const std::vector<PooledDet>& dets_sorted, long long num_gt,
                         int recall_points = 101);

EvalReport evaluate(const DetectionDataset& gt, const std::vector<DetectionResult>& dets,
                    const EvalConfig& cfg = EvalConfig::coco_default());

}  // namespace poisondet
