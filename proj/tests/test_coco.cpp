#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>

#include "poisondet/coco.hpp"
#include "poisondet/errors.hpp"
#include "poisondet/numfmt.hpp"
#include "test_helpers.hpp"

using namespace poisondet;

namespace {

const char* kMinimalJson = R"({
"images": [{"id": 1, "file_name": "a.png", "width": 64, "height": 64}],
"annotations": [{"id": 1, "image_id": 1, "category_id": 1, "bbox": [10, 20, 16, 16], "area": 256, "iscrowd": 0}],
"categories": [{"id": 1, "name": "square"}]
})";

}  // namespace

TEST_CASE("minimal file loads with counts (1,1,1)") {
    DetectionDataset ds = parse_dataset(kMinimalJson);
    CHECK(ds.images.size() == 1);
    CHECK(ds.annotations.size() == 1);
    CHECK(ds.categories.size() == 1);
    CHECK(ds.annotations[0].bbox == BBox{10, 20, 16, 16});
}

TEST_CASE("dangling image reference names the annotation") {
    std::string text = R"({
"images": [{"id": 1, "file_name": "a.png", "width": 64, "height": 64}],
"annotations": [{"id": 7, "image_id": 99, "category_id": 1, "bbox": [0, 0, 1, 1], "area": 1, "iscrowd": 0}],
"categories": [{"id": 1, "name": "square"}]
})";
    CHECK_THROWS_WITH_AS(parse_dataset(text),
                         doctest::Contains("annotation 7 -> image 99"), ValidationError);
}

TEST_CASE("malformed syntax reports a byte offset") {
    try {
        parse_dataset("{\"images\": [,]}");
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(e.byte_offset > 0);
    }
}

TEST_CASE("duplicate ids rejected") {
    std::string text = R"({
"images": [{"id": 1, "file_name": "a.png", "width": 8, "height": 8},
           {"id": 1, "file_name": "b.png", "width": 8, "height": 8}],
"annotations": [],
"categories": []
})";
    CHECK_THROWS_AS(parse_dataset(text), ValidationError);
}

TEST_CASE("round-trip is exact on the minimal dataset") {
    DetectionDataset ds = parse_dataset(kMinimalJson);
    std::string text = serialize_dataset(ds);
    DetectionDataset again = parse_dataset(text);
    CHECK(again == ds);
    CHECK(serialize_dataset(again) == text);
}

TEST_CASE("zero-extent bbox survives the file format") {
    DetectionDataset ds = minimal_dataset();
    ds.annotations.push_back({2, 1, 1, {12.5, 23.0, 0, 0}, 0, 0});
    std::string text = serialize_dataset(ds);
    CHECK(text.find("[12.5, 23, 0, 0]") != std::string::npos);
    CHECK(parse_dataset(text) == ds);
}

TEST_CASE("non-ascii category name is byte-identical after round-trip") {
    DetectionDataset ds = minimal_dataset();
    ds.categories[0].name = "カテゴリé";
    DetectionDataset again = parse_dataset(serialize_dataset(ds));
    CHECK(again.categories[0].name == ds.categories[0].name);
}

TEST_CASE("fractional coordinates round-trip exactly") {
    DetectionDataset ds = minimal_dataset();
    ds.annotations[0].bbox = BBox{10.25, 20.333333, 15.5, 9.99};
    ds.annotations[0].area = quantize6(15.5 * 9.99);
    DetectionDataset again = parse_dataset(serialize_dataset(ds));
    CHECK(again == ds);
}

TEST_CASE("extra top-level keys are preserved") {
    std::string text = R"({
"info": {"year": 2017, "note": "kept"},
"images": [{"id": 1, "file_name": "a.png", "width": 64, "height": 64}],
"annotations": [],
"categories": [{"id": 1, "name": "square"}]
})";
    DetectionDataset ds = parse_dataset(text);
    REQUIRE(ds.extra_blocks.size() == 1);
    CHECK(ds.extra_blocks[0].first == "info");
    DetectionDataset again = parse_dataset(serialize_dataset(ds));
    CHECK(again == ds);
}

TEST_CASE("unknown per-record keys are dropped with a warning") {
    std::string text = R"({
"images": [{"id": 1, "file_name": "a.png", "width": 64, "height": 64}],
"annotations": [{"id": 1, "image_id": 1, "category_id": 1, "bbox": [0, 0, 4, 4], "area": 16, "iscrowd": 0, "segmentation": []}],
"categories": [{"id": 1, "name": "square"}]
})";
    std::vector<std::string> warnings;
    parse_dataset(text, &warnings);
    REQUIRE(warnings.size() == 1);
    CHECK(warnings[0].find("unknown per-record key") != std::string::npos);
}

TEST_CASE("out-of-bounds and area drift are warnings, not errors") {
    std::string text = R"({
"images": [{"id": 1, "file_name": "a.png", "width": 10, "height": 10}],
"annotations": [{"id": 1, "image_id": 1, "category_id": 1, "bbox": [8, 8, 5, 5], "area": 99, "iscrowd": 0}],
"categories": [{"id": 1, "name": "square"}]
})";
    std::vector<std::string> warnings;
    DetectionDataset ds = parse_dataset(text, &warnings);
    CHECK(ds.annotations[0].area == 99);  // reported, not fixed
    CHECK(warnings.size() == 2);
}

TEST_CASE("load is deterministic") {
    TempDir tmp("coco_det");
    std::filesystem::path f = tmp.path / "ann.json";
    {
        std::ofstream out(f);
        out << kMinimalJson;
    }
    CHECK(dataset_digest(load_dataset(f)) == dataset_digest(load_dataset(f)));
}

TEST_CASE("file round-trip through disk") {
    TempDir tmp("coco_rt");
    DetectionDataset ds = minimal_dataset();
    save_dataset(ds, tmp.path / "out.json");
    CHECK(load_dataset(tmp.path / "out.json") == ds);
}

TEST_CASE("bbox center form") {
    CHECK(bbox_center_form(BBox{0, 0, 10, 10}) == CenterBox{5, 5, 10, 10});
    CHECK(bbox_center_form(BBox{315, 237, 10, 6}) == CenterBox{320, 240, 10, 6});
    CHECK(bbox_center_form(BBox{320, 240, 0, 0}) == CenterBox{320, 240, 0, 0});
    // involution
    for (BBox b : {BBox{1.5, 2.25, 7, 3}, BBox{0, 0, 0, 0}, BBox{10, 20, 5.5, 6.5}}) {
        CHECK(bbox_from_center_form(bbox_center_form(b)) == b);
    }
}

TEST_CASE("detection results: parse, validate, round-trip") {
    CHECK(parse_detections("[]").empty());

    auto one = parse_detections(
        R"([{"image_id": 1, "category_id": 1, "bbox": [0, 0, 10, 10], "score": 0.9}])");
    REQUIRE(one.size() == 1);
    CHECK(one[0].score == doctest::Approx(0.9));

    CHECK_THROWS_AS(parse_detections(
                        R"([{"image_id": 1, "category_id": 1, "bbox": [0,0,1,1], "score": 1.5}])"),
                    ValidationError);

    std::vector<DetectionResult> dets = {
        {1, 2, {0.5, 1.25, 10, 10}, 0.875},
        {2, 1, {3, 4, 5, 6}, 0.25},
    };
    CHECK(parse_detections(serialize_detections(dets)) == dets);
}

TEST_CASE("negative bbox extent is a validation error") {
    std::string text = R"({
"images": [{"id": 1, "file_name": "a.png", "width": 64, "height": 64}],
"annotations": [{"id": 1, "image_id": 1, "category_id": 1, "bbox": [0, 0, -4, 4], "area": 16, "iscrowd": 0}],
"categories": [{"id": 1, "name": "square"}]
})";
    CHECK_THROWS_AS(parse_dataset(text), ValidationError);
}
