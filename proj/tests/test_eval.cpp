#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "poisondet/errors.hpp"
#include "poisondet/eval.hpp"
#include "poisondet/rng.hpp"
#include "instance_gen.hpp"
#include "ref_eval.hpp"

using namespace poisondet;

namespace {

DetectionDataset two_category_gt(int num_images) {
    DetectionDataset ds;
    for (int i = 1; i <= num_images; ++i)
        ds.images.push_back({i, "img.png", 1000, 1000});
    ds.categories = {{1, "a"}, {2, "b"}};
    return ds;
}

using Instance = EvalInstance;
const auto random_instance = random_eval_instance;

void check_against_reference(const Instance& inst, const EvalConfig& cfg) {
    EvalReport got = evaluate(inst.gt, inst.dets, cfg);
    ref_eval::RefMetrics want = ref_eval::ref_evaluate(inst.gt, inst.dets, cfg);
    CHECK(got.map == doctest::Approx(want.map).epsilon(1e-9));
    CHECK(got.ap50 == doctest::Approx(want.ap50).epsilon(1e-9));
    CHECK(got.ap75 == doctest::Approx(want.ap75).epsilon(1e-9));
    CHECK(got.ap_small == doctest::Approx(want.ap_small).epsilon(1e-9));
    CHECK(got.ap_medium == doctest::Approx(want.ap_medium).epsilon(1e-9));
    CHECK(got.ap_large == doctest::Approx(want.ap_large).epsilon(1e-9));
}

}  // namespace

TEST_CASE("iou basics") {
    CHECK(iou(BBox{0, 0, 10, 10}, BBox{0, 0, 10, 10}) == doctest::Approx(1.0));
    // hand geometry: intersection 5x5 = 25, union 200 - 25 = 175
    CHECK(iou(BBox{0, 0, 10, 10}, BBox{5, 5, 10, 10}) == doctest::Approx(25.0 / 175.0));
    CHECK(iou(BBox{0, 0, 10, 10}, BBox{20, 20, 5, 5}) == 0.0);
    CHECK(iou(BBox{0, 0, 0, 0}, BBox{0, 0, 0, 0}) == 0.0);  // empty union
    CHECK(iou(BBox{3, 3, 0, 0}, BBox{0, 0, 10, 10}) == 0.0);
}

TEST_CASE("matching: inclusive threshold") {
    std::vector<GtEntry> gts = {{1, BBox{0, 0, 10, 10}, false}};
    // IoU with gt exactly 0.5: [0,0,10,5] vs [0,0,10,10] -> 50/100
    std::vector<DetEntry> dets = {{1, BBox{0, 0, 10, 5}, 0.9}};
    MatchTable t = match_detections(gts, dets, 0.5);
    CHECK(t.det_to_gt[0] == 0);
}

TEST_CASE("matching: higher score wins a contested gt") {
    std::vector<GtEntry> gts = {{1, BBox{0, 0, 10, 10}, false}};
    std::vector<DetEntry> dets = {{1, BBox{0, 0, 10, 10}, 0.9}, {1, BBox{1, 1, 10, 10}, 0.8}};
    MatchTable t = match_detections(gts, dets, 0.5);
    CHECK(t.det_to_gt[0] == 0);
    CHECK(t.det_to_gt[1] == -1);
}

TEST_CASE("matching: categories partition") {
    std::vector<GtEntry> gts = {{1, BBox{0, 0, 10, 10}, false}};
    std::vector<DetEntry> dets = {{2, BBox{0, 0, 10, 10}, 0.9}};
    MatchTable t = match_detections(gts, dets, 0.1);
    CHECK(t.det_to_gt[0] == -1);
}

TEST_CASE("matching prefers in-range gt over ignored") {
    std::vector<GtEntry> gts = {{1, BBox{0, 0, 10, 10}, true}, {1, BBox{1, 1, 10, 10}, false}};
    std::vector<DetEntry> dets = {{1, BBox{0, 0, 10, 10}, 0.9}};
    MatchTable t = match_detections(gts, dets, 0.5);
    CHECK(t.det_to_gt[0] == 1);  // lower IoU but not ignored

    // when no eligible in-range gt exists, the ignored one absorbs the det
    std::vector<GtEntry> far = {{1, BBox{0, 0, 10, 10}, true}, {1, BBox{30, 30, 10, 10}, false}};
    MatchTable t2 = match_detections(far, dets, 0.5);
    CHECK(t2.det_to_gt[0] == 0);
}

TEST_CASE("average precision basics") {
    // perfect detector
    std::vector<PooledDet> perfect = {{0.9, true, false}, {0.8, true, false}};
    CHECK(average_precision(perfect, 2) == doctest::Approx(1.0));
    // FP then TP on a single gt: every recall point sees precision 0.5
    std::vector<PooledDet> fp_first = {{0.9, false, false}, {0.8, true, false}};
    CHECK(average_precision(fp_first, 1) == doctest::Approx(0.5));
    // nothing detected
    CHECK(average_precision({}, 3) == doctest::Approx(0.0));
    // undefined stratum
    CHECK(average_precision({}, 0) == doctest::Approx(-1.0));
}

TEST_CASE("evaluate: perfect detections give all ones") {
    DetectionDataset ds = two_category_gt(2);
    ds.annotations = {{1, 1, 1, {0, 0, 20, 20}, 400, 0},
                      {2, 1, 2, {50, 50, 40, 40}, 1600, 0},
                      {3, 2, 1, {10, 10, 120, 120}, 14400, 0}};
    std::vector<DetectionResult> dets;
    for (const auto& a : ds.annotations)
        dets.push_back({a.image_id, a.category_id, a.bbox, 1.0});
    EvalReport r = evaluate(ds, dets);
    CHECK(r.map == doctest::Approx(1.0));
    CHECK(r.ap50 == doctest::Approx(1.0));
    CHECK(r.ap75 == doctest::Approx(1.0));
    CHECK(r.ap_small == doctest::Approx(1.0));
    CHECK(r.ap_medium == doctest::Approx(1.0));
    CHECK(r.ap_large == doctest::Approx(1.0));
}

TEST_CASE("evaluate: empty detections give zeros") {
    DetectionDataset ds = two_category_gt(1);
    ds.annotations = {{1, 1, 1, {0, 0, 20, 20}, 400, 0}};
    EvalReport r = evaluate(ds, {});
    CHECK(r.map == doctest::Approx(0.0));
    CHECK(r.ap50 == doctest::Approx(0.0));
    CHECK(r.ap_small == doctest::Approx(0.0));  // the only gt is small
    CHECK(r.ap_medium == doctest::Approx(-1.0));
    CHECK(r.ap_large == doctest::Approx(-1.0));
}

TEST_CASE("evaluate: unknown ids rejected") {
    DetectionDataset ds = two_category_gt(1);
    ds.annotations = {{1, 1, 1, {0, 0, 20, 20}, 400, 0}};
    CHECK_THROWS_AS(evaluate(ds, {{1, 9, {0, 0, 5, 5}, 0.5}}), ValidationError);
    CHECK_THROWS_AS(evaluate(ds, {{42, 1, {0, 0, 5, 5}, 0.5}}), ValidationError);
}

TEST_CASE("evaluate: zero-extent gt excluded with count") {
    DetectionDataset ds = two_category_gt(1);
    ds.annotations = {{1, 1, 1, {10, 10, 0, 0}, 0, 0}, {2, 1, 1, {0, 0, 20, 20}, 400, 0}};
    std::vector<DetectionResult> dets = {{1, 1, {0, 0, 20, 20}, 1.0}};
    EvalReport r = evaluate(ds, dets);
    CHECK(r.zero_extent_gt_excluded == 1);
    CHECK(r.map == doctest::Approx(1.0));  // the zero box does not deflate AP
}

TEST_CASE("score monotonicity: constant shift leaves metrics unchanged") {
    std::mt19937_64 rng(11);
    for (int iter = 0; iter < 40; ++iter) {
        Instance inst = random_instance(rng);
        for (auto& d : inst.dets) d.score *= 0.5;  // head-room for the shift
        EvalReport base = evaluate(inst.gt, inst.dets);
        auto shifted = inst.dets;
        for (auto& d : shifted) d.score += 0.25;
        EvalReport moved = evaluate(inst.gt, shifted);
        CHECK(base.map == doctest::Approx(moved.map).epsilon(1e-12));
        CHECK(base.ap50 == doctest::Approx(moved.ap50).epsilon(1e-12));
        CHECK(base.ap_large == doctest::Approx(moved.ap_large).epsilon(1e-12));
    }
}

TEST_CASE("permutation invariance with distinct scores") {
    std::mt19937_64 rng(13);
    for (int iter = 0; iter < 40; ++iter) {
        Instance inst = random_instance(rng);
        // make scores distinct while preserving order
        std::vector<std::size_t> by_score(inst.dets.size());
        for (std::size_t i = 0; i < by_score.size(); ++i) by_score[i] = i;
        for (std::size_t i = 0; i < inst.dets.size(); ++i)
            inst.dets[i].score = 1.0 - 0.001 * static_cast<double>(i);
        EvalReport base = evaluate(inst.gt, inst.dets);
        auto shuffled = inst.dets;
        shuffle_vec(shuffled, rng);
        EvalReport moved = evaluate(inst.gt, shuffled);
        CHECK(base.map == doctest::Approx(moved.map).epsilon(1e-12));
        CHECK(base.ap75 == doctest::Approx(moved.ap75).epsilon(1e-12));
    }
}

TEST_CASE("per-threshold AP is non-increasing in the threshold") {
    std::mt19937_64 rng(17);
    for (int iter = 0; iter < 60; ++iter) {
        Instance inst = random_instance(rng);
        double prev = 2.0;
        for (double thr : EvalConfig::coco_default().iou_thresholds) {
            EvalConfig cfg = EvalConfig::coco_default();
            cfg.iou_thresholds = {thr};
            EvalReport r = evaluate(inst.gt, inst.dets, cfg);
            if (r.map >= 0) {
                CHECK(r.map <= prev + 1e-12);
                prev = r.map;
            }
        }
        EvalReport full = evaluate(inst.gt, inst.dets);
        if (full.map >= 0) {
            CHECK(full.ap50 + 1e-12 >= full.map);
            CHECK(full.map >= 0.0);
            CHECK(full.map <= 1.0);
        }
    }
}

TEST_CASE("streaming evaluator matches the brute-force reference") {
    std::mt19937_64 rng(2024);
    for (int iter = 0; iter < 120; ++iter) {
        Instance inst = random_instance(rng);
        check_against_reference(inst, EvalConfig::coco_default());
    }
    // exercise the per-image detection cap as well
    EvalConfig capped = EvalConfig::coco_default();
    capped.max_detections_per_image = 2;
    for (int iter = 0; iter < 60; ++iter) {
        Instance inst = random_instance(rng);
        check_against_reference(inst, capped);
    }
}

TEST_CASE("config validation") {
    DetectionDataset ds = two_category_gt(1);
    EvalConfig bad = EvalConfig::coco_default();
    bad.iou_thresholds = {0.9, 0.5};
    CHECK_THROWS_AS(evaluate(ds, {}, bad), ValidationError);
    EvalConfig gap = EvalConfig::coco_default();
    gap.area_ranges[1].lo = 2000;
    CHECK_THROWS_AS(evaluate(ds, {}, gap), ValidationError);
}

TEST_CASE("report serialization and table layout") {
    DetectionDataset ds = two_category_gt(1);
    ds.annotations = {{1, 1, 1, {0, 0, 20, 20}, 400, 0}};
    EvalReport r = evaluate(ds, {{1, 1, {0, 0, 20, 20}, 1.0}});
    std::string json = serialize_report(r);
    CHECK(json.find("\"mAP\": 1") != std::string::npos);
    CHECK(json.find("\"per_category\"") != std::string::npos);
    std::string table = format_report_table(r);
    CHECK(table.find("mAP") < table.find("AP50"));
    CHECK(table.find("AP50") < table.find("AP75"));
    CHECK(table.find("AP75") < table.find("APs"));
    CHECK(table.find("APs") < table.find("APm"));
    CHECK(table.find("APm") < table.find("APl"));
}
