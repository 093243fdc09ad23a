#include "poisondet/coco.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "poisondet/digest.hpp"
#include "poisondet/errors.hpp"
#include "poisondet/numfmt.hpp"

namespace poisondet {

using ordered_json = nlohmann::ordered_json;

CenterBox bbox_center_form(const BBox& b) {
    return CenterBox{b.x + b.w / 2, b.y + b.h / 2, b.w, b.h};
}

BBox bbox_from_center_form(const CenterBox& c) {
    return BBox{c.cx - c.w / 2, c.cy - c.h / 2, c.w, c.h};
}

namespace {

void add_warning(std::vector<std::string>* warnings, std::string msg) {
    if (warnings) warnings->push_back(std::move(msg));
}

ordered_json parse_text(const std::string& text) {
    try {
        return ordered_json::parse(text);
    } catch (const ordered_json::parse_error& e) {
        throw ParseError(e.what(), e.byte);
    }
}

std::int64_t require_int(const ordered_json& obj, const char* key, const char* ctx) {
    if (!obj.contains(key) || !obj[key].is_number_integer())
        throw ParseError(std::string(ctx) + ": missing or non-integer field '" + key + "'");
    return obj[key].get<std::int64_t>();
}

double require_number(const ordered_json& obj, const char* key, const char* ctx) {
    if (!obj.contains(key) || !obj[key].is_number())
        throw ParseError(std::string(ctx) + ": missing or non-numeric field '" + key + "'");
    double v = obj[key].get<double>();
    if (!std::isfinite(v))
        throw ParseError(std::string(ctx) + ": non-finite value for '" + key + "'");
    return v;
}

std::string require_string(const ordered_json& obj, const char* key, const char* ctx) {
    if (!obj.contains(key) || !obj[key].is_string())
        throw ParseError(std::string(ctx) + ": missing or non-string field '" + key + "'");
    return obj[key].get<std::string>();
}

BBox parse_bbox(const ordered_json& obj, const char* ctx) {
    if (!obj.contains("bbox") || !obj["bbox"].is_array() || obj["bbox"].size() != 4)
        throw ParseError(std::string(ctx) + ": 'bbox' must be an array of 4 numbers");
    double v[4];
    for (int i = 0; i < 4; ++i) {
        if (!obj["bbox"][i].is_number())
            throw ParseError(std::string(ctx) + ": 'bbox' must be an array of 4 numbers");
        v[i] = obj["bbox"][i].get<double>();
        if (!std::isfinite(v[i]))
            throw ParseError(std::string(ctx) + ": non-finite bbox value");
    }
    return BBox{quantize6(v[0]), quantize6(v[1]), quantize6(v[2]), quantize6(v[3])};
}

void count_dropped_keys(const ordered_json& obj, const std::set<std::string>& known,
                        std::size_t& dropped) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        if (!known.count(it.key())) ++dropped;
    }
}

std::string escape_json_string(const std::string& s) {
    std::string out;
    out.reserve(s.size() + 2);
    for (unsigned char c : s) {
        switch (c) {
            case '"': out += "\\\""; break;
            case '\\': out += "\\\\"; break;
            case '\b': out += "\\b"; break;
            case '\f': out += "\\f"; break;
            case '\n': out += "\\n"; break;
            case '\r': out += "\\r"; break;
            case '\t': out += "\\t"; break;
            default:
                if (c < 0x20) {
                    char buf[8];
                    std::snprintf(buf, sizeof(buf), "\\u%04x", c);
                    out += buf;
                } else {
                    out += static_cast<char>(c);  // UTF-8 passthrough
                }
        }
    }
    return out;
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open file: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open file for writing: " + path.string());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw IoError("write failed: " + path.string());
}

template <class T>
void check_unique_ids(const std::vector<T>& items, const char* what) {
    std::set<std::int64_t> seen;
    std::vector<std::int64_t> dups;
    for (const auto& it : items) {
        if (!seen.insert(it.id).second) dups.push_back(it.id);
    }
    if (!dups.empty()) {
        std::string msg = std::string("duplicate ") + what + " ids:";
        for (std::size_t i = 0; i < dups.size() && i < 10; ++i)
            msg += " " + std::to_string(dups[i]);
        throw ValidationError(msg);
    }
}

void validate_dataset(const DetectionDataset& ds, std::vector<std::string>* warnings) {
    check_unique_ids(ds.images, "image");
    check_unique_ids(ds.annotations, "annotation");
    check_unique_ids(ds.categories, "category");

    for (const auto& im : ds.images) {
        if (im.width <= 0 || im.height <= 0)
            throw ValidationError("image " + std::to_string(im.id) +
                                  " has non-positive width or height");
    }

    std::set<std::int64_t> image_ids, category_ids;
    for (const auto& im : ds.images) image_ids.insert(im.id);
    for (const auto& c : ds.categories) category_ids.insert(c.id);

    std::vector<std::string> dangling;
    for (const auto& a : ds.annotations) {
        if (a.bbox.w < 0 || a.bbox.h < 0)
            throw ValidationError("annotation " + std::to_string(a.id) +
                                  " has negative bbox width or height");
        if (!image_ids.count(a.image_id))
            dangling.push_back("annotation " + std::to_string(a.id) + " -> image " +
                               std::to_string(a.image_id));
        if (!category_ids.count(a.category_id))
            dangling.push_back("annotation " + std::to_string(a.id) + " -> category " +
                               std::to_string(a.category_id));
    }
    if (!dangling.empty()) {
        std::string msg = "dangling id references:";
        for (std::size_t i = 0; i < dangling.size() && i < 10; ++i) msg += " " + dangling[i];
        if (dangling.size() > 10)
            msg += " (+" + std::to_string(dangling.size() - 10) + " more)";
        throw ValidationError(msg);
    }

    // Out-of-bounds boxes and area drift exist in public COCO files; report, keep.
    std::map<std::int64_t, std::size_t> img_idx = image_index(ds);
    std::size_t out_of_bounds = 0, area_drift = 0;
    double max_drift = 0;
    for (const auto& a : ds.annotations) {
        const ImageRecord& im = ds.images[img_idx.at(a.image_id)];
        if (a.bbox.x < 0 || a.bbox.y < 0 || a.bbox.x + a.bbox.w > im.width ||
            a.bbox.y + a.bbox.h > im.height)
            ++out_of_bounds;
        double regen = bbox_area(a.bbox);
        double drift = std::abs(a.area - regen);
        if (drift > 1e-6 * std::max(1.0, std::abs(regen))) {
            ++area_drift;
            max_drift = std::max(max_drift, drift);
        }
    }
    if (out_of_bounds > 0)
        add_warning(warnings, std::to_string(out_of_bounds) +
                                  " annotation(s) extend beyond their image bounds");
    if (area_drift > 0)
        add_warning(warnings, std::to_string(area_drift) +
                                  " annotation(s) have area differing from bbox w*h (max abs drift " +
                                  format_fixed6(max_drift) + ")");
}

}  // namespace

DetectionDataset parse_dataset(const std::string& text, std::vector<std::string>* warnings) {
    ordered_json root = parse_text(text);
    if (!root.is_object()) throw ParseError("annotations file: top-level value must be an object");
    for (const char* key : {"images", "annotations", "categories"}) {
        if (!root.contains(key) || !root[key].is_array())
            throw ParseError(std::string("annotations file: missing array key '") + key + "'");
    }

    DetectionDataset ds;
    std::size_t dropped_keys = 0;
    std::size_t derived_areas = 0;

    for (const auto& j : root["images"]) {
        if (!j.is_object()) throw ParseError("images: entries must be objects");
        ImageRecord im;
        im.id = require_int(j, "id", "image");
        im.file_name = require_string(j, "file_name", "image");
        im.width = static_cast<int>(require_int(j, "width", "image"));
        im.height = static_cast<int>(require_int(j, "height", "image"));
        count_dropped_keys(j, {"id", "file_name", "width", "height"}, dropped_keys);
        ds.images.push_back(std::move(im));
    }
    for (const auto& j : root["annotations"]) {
        if (!j.is_object()) throw ParseError("annotations: entries must be objects");
        Annotation a;
        a.id = require_int(j, "id", "annotation");
        a.image_id = require_int(j, "image_id", "annotation");
        a.category_id = require_int(j, "category_id", "annotation");
        a.bbox = parse_bbox(j, "annotation");
        if (j.contains("area")) {
            a.area = quantize6(require_number(j, "area", "annotation"));
        } else {
            a.area = quantize6(bbox_area(a.bbox));
            ++derived_areas;
        }
        a.iscrowd = j.contains("iscrowd")
                        ? static_cast<int>(require_int(j, "iscrowd", "annotation"))
                        : 0;
        count_dropped_keys(j, {"id", "image_id", "category_id", "bbox", "area", "iscrowd"},
                           dropped_keys);
        ds.annotations.push_back(std::move(a));
    }
    for (const auto& j : root["categories"]) {
        if (!j.is_object()) throw ParseError("categories: entries must be objects");
        Category c;
        c.id = require_int(j, "id", "category");
        c.name = require_string(j, "name", "category");
        count_dropped_keys(j, {"id", "name"}, dropped_keys);
        ds.categories.push_back(std::move(c));
    }
    for (auto it = root.begin(); it != root.end(); ++it) {
        if (it.key() == "images" || it.key() == "annotations" || it.key() == "categories")
            continue;
        ds.extra_blocks.emplace_back(it.key(), it.value().dump());
    }

    if (dropped_keys > 0)
        add_warning(warnings, std::to_string(dropped_keys) +
                                  " unknown per-record key(s) dropped (kept keys are the "
                                  "documented schema)");
    if (derived_areas > 0)
        add_warning(warnings, std::to_string(derived_areas) +
                                  " annotation(s) had no 'area'; derived from bbox");

    validate_dataset(ds, warnings);
    return ds;
}

DetectionDataset load_dataset(const std::filesystem::path& path,
                              std::vector<std::string>* warnings) {
    return parse_dataset(read_file(path), warnings);
}

std::string serialize_dataset(const DetectionDataset& ds) {
    std::string out;
    out.reserve(128 + 96 * ds.annotations.size() + 80 * ds.images.size());
    out += "{\n\"images\": [";
    for (std::size_t i = 0; i < ds.images.size(); ++i) {
        const auto& im = ds.images[i];
        out += i == 0 ? "\n" : ",\n";
        out += "{\"id\": " + std::to_string(im.id) + ", \"file_name\": \"" +
               escape_json_string(im.file_name) + "\", \"width\": " + std::to_string(im.width) +
               ", \"height\": " + std::to_string(im.height) + "}";
    }
    out += "\n],\n\"annotations\": [";
    for (std::size_t i = 0; i < ds.annotations.size(); ++i) {
        const auto& a = ds.annotations[i];
        out += i == 0 ? "\n" : ",\n";
        out += "{\"id\": " + std::to_string(a.id) + ", \"image_id\": " +
               std::to_string(a.image_id) + ", \"category_id\": " +
               std::to_string(a.category_id) + ", \"bbox\": [" + format_fixed6(a.bbox.x) +
               ", " + format_fixed6(a.bbox.y) + ", " + format_fixed6(a.bbox.w) + ", " +
               format_fixed6(a.bbox.h) + "], \"area\": " + format_fixed6(a.area) +
               ", \"iscrowd\": " + std::to_string(a.iscrowd) + "}";
    }
    out += "\n],\n\"categories\": [";
    for (std::size_t i = 0; i < ds.categories.size(); ++i) {
        const auto& c = ds.categories[i];
        out += i == 0 ? "\n" : ",\n";
        out += "{\"id\": " + std::to_string(c.id) + ", \"name\": \"" +
               escape_json_string(c.name) + "\"}";
    }
    out += "\n]";
    for (const auto& [key, value] : ds.extra_blocks) {
        out += ",\n\"" + escape_json_string(key) + "\": " + value;
    }
    out += "\n}\n";
    return out;
}

void save_dataset(const DetectionDataset& ds, const std::filesystem::path& path) {
    write_file(path, serialize_dataset(ds));
}

std::vector<DetectionResult> parse_detections(const std::string& text) {
    ordered_json root = parse_text(text);
    if (!root.is_array()) throw ParseError("results file: top-level value must be an array");
    std::vector<DetectionResult> dets;
    dets.reserve(root.size());
    for (const auto& j : root) {
        if (!j.is_object()) throw ParseError("results file: entries must be objects");
        DetectionResult d;
        d.image_id = require_int(j, "image_id", "detection");
        d.category_id = require_int(j, "category_id", "detection");
        d.bbox = parse_bbox(j, "detection");
        double raw_score = require_number(j, "score", "detection");
        if (raw_score < 0.0 || raw_score > 1.0)
            throw ValidationError("detection for image " + std::to_string(d.image_id) +
                                  " has score outside [0,1]: " + std::to_string(raw_score));
        d.score = quantize6(raw_score);
        dets.push_back(d);
    }
    return dets;
}

std::vector<DetectionResult> load_detections(const std::filesystem::path& path) {
    return parse_detections(read_file(path));
}

std::string serialize_detections(const std::vector<DetectionResult>& dets) {
    std::string out = "[";
    for (std::size_t i = 0; i < dets.size(); ++i) {
        const auto& d = dets[i];
        out += i == 0 ? "\n" : ",\n";
        out += "{\"image_id\": " + std::to_string(d.image_id) + ", \"category_id\": " +
               std::to_string(d.category_id) + ", \"bbox\": [" + format_fixed6(d.bbox.x) +
               ", " + format_fixed6(d.bbox.y) + ", " + format_fixed6(d.bbox.w) + ", " +
               format_fixed6(d.bbox.h) + "], \"score\": " + format_fixed6(d.score) + "}";
    }
    out += "\n]\n";
    return out;
}

void save_detections(const std::vector<DetectionResult>& dets,
                     const std::filesystem::path& path) {
    write_file(path, serialize_detections(dets));
}

std::string dataset_digest(const DetectionDataset& ds) {
    return sha256_hex(serialize_dataset(ds));
}

std::map<std::int64_t, std::size_t> image_index(const DetectionDataset& ds) {
    std::map<std::int64_t, std::size_t> idx;
    for (std::size_t i = 0; i < ds.images.size(); ++i) idx[ds.images[i].id] = i;
    return idx;
}

std::map<std::int64_t, std::size_t> annotation_index(const DetectionDataset& ds) {
    std::map<std::int64_t, std::size_t> idx;
    for (std::size_t i = 0; i < ds.annotations.size(); ++i) idx[ds.annotations[i].id] = i;
    return idx;
}

bool has_category(const DetectionDataset& ds, std::int64_t category_id) {
    for (const auto& c : ds.categories)
        if (c.id == category_id) return true;
    return false;
}

}  // namespace poisondet
