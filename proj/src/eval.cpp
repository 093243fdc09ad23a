#include "poisondet/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "poisondet/errors.hpp"
#include "poisondet/numfmt.hpp"

namespace poisondet {

EvalConfig EvalConfig::coco_default() {
    EvalConfig cfg;
    for (int i = 0; i <= 9; ++i) cfg.iou_thresholds.push_back(0.5 + 0.05 * i);
    cfg.area_ranges = {{"small", 0.0, 32.0 * 32.0},
                       {"medium", 32.0 * 32.0, 96.0 * 96.0},
                       {"large", 96.0 * 96.0, std::numeric_limits<double>::infinity()}};
    return cfg;
}

double iou(const BBox& a, const BBox& b) {
    double ix = std::max(a.x, b.x);
    double iy = std::max(a.y, b.y);
    double ix2 = std::min(a.x + a.w, b.x + b.w);
    double iy2 = std::min(a.y + a.h, b.y + b.h);
    double iw = std::max(0.0, ix2 - ix);
    double ih = std::max(0.0, iy2 - iy);
    double inter = iw * ih;
    double uni = a.w * a.h + b.w * b.h - inter;
    if (uni <= 0) return 0.0;
    return inter / uni;
}

MatchTable match_detections(const std::vector<GtEntry>& gts, const std::vector<DetEntry>& dets,
                            double iou_thr) {
    MatchTable table;
    table.det_to_gt.assign(dets.size(), -1);
    table.gt_to_det.assign(gts.size(), -1);

    // visit non-ignored GTs first so a real match is preferred over an
    // ignored one even when the ignored IoU is higher
    std::vector<int> order;
    order.reserve(gts.size());
    for (int g = 0; g < static_cast<int>(gts.size()); ++g)
        if (!gts[g].ignore) order.push_back(g);
    for (int g = 0; g < static_cast<int>(gts.size()); ++g)
        if (gts[g].ignore) order.push_back(g);

    for (int d = 0; d < static_cast<int>(dets.size()); ++d) {
        int best = -1;
        double best_iou = 0;
        for (int g : order) {
            if (gts[g].category_id != dets[d].category_id) continue;
            if (table.gt_to_det[g] != -1) continue;
            if (best != -1 && !gts[best].ignore && gts[g].ignore) break;
            double v = iou(dets[d].bbox, gts[g].bbox);
            if (v < iou_thr) continue;
            if (best == -1 || v > best_iou) {
                best = g;
                best_iou = v;
            }
        }
        if (best != -1) {
            table.det_to_gt[d] = best;
            table.gt_to_det[best] = d;
        }
    }
    return table;
}

double average_precision(const std::vector<PooledDet>& dets_sorted, long long num_gt,
                         int recall_points) {
    if (num_gt == 0) return -1.0;
    // one operating point per counted detection
    std::vector<double> recalls, precisions;
    long long tp = 0, fp = 0;
    for (const auto& d : dets_sorted) {
        if (d.ignored) continue;
        if (d.matched)
            ++tp;
        else
            ++fp;
        recalls.push_back(static_cast<double>(tp) / static_cast<double>(num_gt));
        precisions.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    }
    if (recalls.empty()) return 0.0;

    // interpolated precision: max precision over points with recall >= q;
    // recalls are non-decreasing, so a suffix max suffices
    std::vector<double> suffix_max(precisions.size());
    double running = 0;
    for (std::size_t i = precisions.size(); i-- > 0;) {
        running = std::max(running, precisions[i]);
        suffix_max[i] = running;
    }
    double sum = 0;
    for (int j = 0; j < recall_points; ++j) {
        double q = static_cast<double>(j) / (recall_points - 1);
        auto it = std::lower_bound(recalls.begin(), recalls.end(), q);
        if (it != recalls.end())
            sum += suffix_max[static_cast<std::size_t>(it - recalls.begin())];
    }
    return sum / recall_points;
}

namespace {

void validate_config(const EvalConfig& cfg) {
    if (cfg.iou_thresholds.empty())
        throw ValidationError("eval config: iou_thresholds must not be empty");
    double prev = 0.0;
    for (double t : cfg.iou_thresholds) {
        if (!(t > prev) || t > 1.0)
            throw ValidationError("eval config: thresholds must be strictly increasing in (0,1]");
        prev = t;
    }
    if (cfg.recall_points < 2)
        throw ValidationError("eval config: recall_points must be >= 2");
    std::vector<AreaRange> ranges = cfg.area_ranges;
    std::sort(ranges.begin(), ranges.end(),
              [](const AreaRange& a, const AreaRange& b) { return a.lo < b.lo; });
    if (ranges.empty() || ranges.front().lo != 0.0 ||
        !std::isinf(ranges.back().hi))
        throw ValidationError("eval config: area ranges must cover [0, inf)");
    for (std::size_t i = 0; i + 1 < ranges.size(); ++i)
        if (ranges[i].hi != ranges[i + 1].lo)
            throw ValidationError("eval config: area ranges must be disjoint and covering");
}

double mean_defined(const std::vector<double>& values) {
    double sum = 0;
    long long n = 0;
    for (double v : values)
        if (v >= 0) {
            sum += v;
            ++n;
        }
    return n == 0 ? -1.0 : sum / static_cast<double>(n);
}

}  // namespace

EvalReport evaluate(const DetectionDataset& gt, const std::vector<DetectionResult>& dets,
                    const EvalConfig& cfg) {
    validate_config(cfg);

    std::set<std::int64_t> image_ids;
    for (const auto& im : gt.images) image_ids.insert(im.id);
    std::set<std::int64_t> category_ids;
    for (const auto& c : gt.categories) category_ids.insert(c.id);
    for (const auto& d : dets) {
        if (!category_ids.count(d.category_id))
            throw ValidationError("detection references unknown category_id " +
                                  std::to_string(d.category_id));
        if (!image_ids.count(d.image_id))
            throw ValidationError("detection references unknown image_id " +
                                  std::to_string(d.image_id));
    }

    EvalReport report;

    // group by (category, image); detection order within a group is input order
    std::map<std::int64_t, std::map<std::int64_t, std::vector<BBox>>> gt_by_cat_img;
    for (const auto& a : gt.annotations) {
        if (a.bbox.w <= 0 || a.bbox.h <= 0) {
            ++report.zero_extent_gt_excluded;
            continue;
        }
        gt_by_cat_img[a.category_id][a.image_id].push_back(a.bbox);
    }
    struct IndexedDet {
        DetEntry entry;
        std::size_t orig_index;
    };
    std::map<std::int64_t, std::map<std::int64_t, std::vector<IndexedDet>>> det_by_cat_img;
    for (std::size_t i = 0; i < dets.size(); ++i) {
        const auto& d = dets[i];
        det_by_cat_img[d.category_id][d.image_id].push_back(
            IndexedDet{DetEntry{d.category_id, d.bbox, d.score}, i});
    }
    for (auto& [cat, per_img] : det_by_cat_img) {
        for (auto& [img, lst] : per_img) {
            std::stable_sort(lst.begin(), lst.end(), [](const IndexedDet& a, const IndexedDet& b) {
                return a.entry.score > b.entry.score;
            });
            if (static_cast<int>(lst.size()) > cfg.max_detections_per_image)
                lst.resize(static_cast<std::size_t>(cfg.max_detections_per_image));
        }
    }

    // evaluation ranges: "all" first, then the configured strata
    std::vector<AreaRange> ranges;
    ranges.push_back(AreaRange{"all", 0.0, std::numeric_limits<double>::infinity()});
    ranges.insert(ranges.end(), cfg.area_ranges.begin(), cfg.area_ranges.end());

    const std::size_t num_thr = cfg.iou_thresholds.size();
    // ap[range][cat * num_thr + t]
    std::vector<std::vector<double>> ap(ranges.size());

    for (std::size_t r = 0; r < ranges.size(); ++r) {
        const AreaRange& range = ranges[r];
        for (const auto& cat : gt.categories) {
            const auto* gt_imgs = gt_by_cat_img.count(cat.id) ? &gt_by_cat_img.at(cat.id) : nullptr;
            const auto* det_imgs =
                det_by_cat_img.count(cat.id) ? &det_by_cat_img.at(cat.id) : nullptr;

            for (std::size_t t = 0; t < num_thr; ++t) {
                double thr = cfg.iou_thresholds[t];
                // flags keyed by original detection index so equal-score ties
                // pool in input order
                std::vector<std::pair<std::size_t, PooledDet>> flagged;
                long long num_gt = 0;
                for (const auto& im : gt.images) {
                    std::vector<GtEntry> gts;
                    if (gt_imgs && gt_imgs->count(im.id)) {
                        for (const BBox& b : gt_imgs->at(im.id)) {
                            bool ignore =
                                !(bbox_area(b) >= range.lo && bbox_area(b) < range.hi);
                            gts.push_back(GtEntry{cat.id, b, ignore});
                            if (!ignore) ++num_gt;
                        }
                    }
                    if (!det_imgs || !det_imgs->count(im.id)) continue;
                    const auto& img_dets = det_imgs->at(im.id);
                    if (img_dets.empty()) continue;

                    std::vector<DetEntry> entries;
                    entries.reserve(img_dets.size());
                    for (const auto& idet : img_dets) entries.push_back(idet.entry);
                    MatchTable table = match_detections(gts, entries, thr);
                    for (std::size_t d = 0; d < entries.size(); ++d) {
                        PooledDet p;
                        p.score = entries[d].score;
                        int g = table.det_to_gt[d];
                        if (g != -1) {
                            p.matched = !gts[static_cast<std::size_t>(g)].ignore;
                            p.ignored = gts[static_cast<std::size_t>(g)].ignore;
                        } else {
                            double a = bbox_area(entries[d].bbox);
                            p.ignored = !(a >= range.lo && a < range.hi);
                        }
                        flagged.emplace_back(img_dets[d].orig_index, p);
                    }
                }
                std::sort(flagged.begin(), flagged.end(),
                          [](const auto& a, const auto& b) { return a.first < b.first; });
                std::vector<PooledDet> pooled;
                pooled.reserve(flagged.size());
                for (const auto& [idx, p] : flagged) pooled.push_back(p);
                std::stable_sort(pooled.begin(), pooled.end(),
                                 [](const PooledDet& a, const PooledDet& b) {
                                     return a.score > b.score;
                                 });
                ap[r].push_back(average_precision(pooled, num_gt, cfg.recall_points));
            }
        }
    }

    // aggregate
    report.map = mean_defined(ap[0]);
    const std::size_t num_cats = gt.categories.size();
    auto mean_at_threshold = [&](double thr_value) {
        std::vector<double> vals;
        for (std::size_t t = 0; t < num_thr; ++t) {
            if (std::abs(cfg.iou_thresholds[t] - thr_value) > 1e-9) continue;
            for (std::size_t c = 0; c < num_cats; ++c) vals.push_back(ap[0][c * num_thr + t]);
        }
        return mean_defined(vals);
    };
    report.ap50 = mean_at_threshold(0.50);
    report.ap75 = mean_at_threshold(0.75);
    for (std::size_t r = 1; r < ranges.size(); ++r) {
        double v = mean_defined(ap[r]);
        if (ranges[r].name == "small") report.ap_small = v;
        else if (ranges[r].name == "medium") report.ap_medium = v;
        else if (ranges[r].name == "large") report.ap_large = v;
    }
    for (std::size_t c = 0; c < num_cats; ++c) {
        std::vector<double> vals(ap[0].begin() + static_cast<long>(c * num_thr),
                                 ap[0].begin() + static_cast<long>((c + 1) * num_thr));
        double v = mean_defined(vals);
        if (v >= 0) report.per_category[gt.categories[c].id] = v;
    }
    return report;
}

std::string serialize_report(const EvalReport& r) {
    std::string out = "{\n";
    out += "\"mAP\": " + format_fixed6(r.map) + ",\n";
    out += "\"AP50\": " + format_fixed6(r.ap50) + ",\n";
    out += "\"AP75\": " + format_fixed6(r.ap75) + ",\n";
    out += "\"APs\": " + format_fixed6(r.ap_small) + ",\n";
    out += "\"APm\": " + format_fixed6(r.ap_medium) + ",\n";
    out += "\"APl\": " + format_fixed6(r.ap_large) + ",\n";
    out += "\"zero_extent_gt_excluded\": " + std::to_string(r.zero_extent_gt_excluded) + ",\n";
    out += "\"per_category\": {";
    bool first = true;
    for (const auto& [id, v] : r.per_category) {
        out += first ? "\n" : ",\n";
        out += "\"" + std::to_string(id) + "\": " + format_fixed6(v);
        first = false;
    }
    out += "\n}\n}\n";
    return out;
}

std::string format_report_table(const EvalReport& r) {
    auto cell = [](double v) {
        if (v < 0) return std::string("   -  ");
        char buf[16];
        std::snprintf(buf, sizeof(buf), "%6.4f", v);
        return std::string(buf);
    };
    std::string out = "  mAP    AP50    AP75    APs     APm     APl\n";
    out += cell(r.map) + "  " + cell(r.ap50) + "  " + cell(r.ap75) + "  " + cell(r.ap_small) +
           "  " + cell(r.ap_medium) + "  " + cell(r.ap_large) + "\n";
    return out;
}

}  // namespace poisondet
