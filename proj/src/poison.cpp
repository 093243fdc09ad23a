#include "poisondet/poison.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>

#include <json.hpp>

#include "poisondet/digest.hpp"
#include "poisondet/errors.hpp"
#include "poisondet/numfmt.hpp"
#include "poisondet/parallel.hpp"
#include "poisondet/rng.hpp"

namespace poisondet {

namespace fs = std::filesystem;

namespace {

bool eligible(const Annotation& a) {
    return a.iscrowd == 0 && a.bbox.w > 0 && a.bbox.h > 0;
}

void ensure_parent_dir(const fs::path& p) {
    fs::path dir = p.parent_path();
    if (!dir.empty()) fs::create_directories(dir);
}

}  // namespace

std::string serialize_manifest(const PoisonManifest& m) {
    std::string out = "{\n";
    out += "\"seed\": " + std::to_string(m.seed) + ",\n";
    out += "\"rate\": " + format_fixed6(m.rate) + ",\n";
    out += "\"trigger_digest\": \"" + m.trigger_digest + "\",\n";
    out += "\"source_digest\": \"" + m.source_digest + "\",\n";
    out += "\"poisoned_annotation_ids\": [";
    for (std::size_t i = 0; i < m.poisoned_annotation_ids.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(m.poisoned_annotation_ids[i]);
    }
    out += "]\n}\n";
    return out;
}

PoisonManifest parse_manifest(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(e.what(), e.byte);
    }
    PoisonManifest m;
    m.seed = j.at("seed").get<std::uint64_t>();
    m.rate = j.at("rate").get<double>();
    m.trigger_digest = j.at("trigger_digest").get<std::string>();
    m.source_digest = j.at("source_digest").get<std::string>();
    m.poisoned_annotation_ids = j.at("poisoned_annotation_ids").get<std::vector<std::int64_t>>();
    return m;
}

void save_manifest(const PoisonManifest& m, const fs::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write manifest: " + path.string());
    out << serialize_manifest(m);
}

PoisonManifest load_manifest(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open manifest: " + path.string());
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_manifest(text);
}

PoisonManifest select_poison_set(const DetectionDataset& ds, const PoisonConfig& cfg,
                                 std::vector<std::string>* warnings) {
    if (cfg.rate < 0 || cfg.rate > 1)
        throw ValidationError("poisoning rate must be in [0,1]");
    if (cfg.mode != PoisonMode::train)
        throw ValidationError("select_poison_set requires train mode");

    PoisonManifest m;
    m.seed = cfg.seed;
    m.rate = cfg.rate;
    m.trigger_digest = trigger_digest(cfg.trigger);
    m.source_digest = dataset_digest(ds);

    std::vector<std::size_t> eligible_idx;
    for (std::size_t i = 0; i < ds.annotations.size(); ++i)
        if (eligible(ds.annotations[i])) eligible_idx.push_back(i);

    std::mt19937_64 rng(cfg.seed);
    if (cfg.image_level) {
        std::vector<std::int64_t> image_ids;
        {
            std::set<std::int64_t> with_eligible;
            for (std::size_t i : eligible_idx) with_eligible.insert(ds.annotations[i].image_id);
            image_ids.assign(with_eligible.begin(), with_eligible.end());
        }
        std::size_t k = static_cast<std::size_t>(std::max<long long>(
            0, iround_half_up(cfg.rate * static_cast<double>(image_ids.size()))));
        if (k == 0 && cfg.rate > 0 && warnings)
            warnings->push_back("poisoning rate rounds to zero selected images");
        std::set<std::int64_t> chosen;
        for (std::size_t i : sample_without_replacement(image_ids.size(), k, rng))
            chosen.insert(image_ids[i]);
        for (std::size_t i : eligible_idx)
            if (chosen.count(ds.annotations[i].image_id))
                m.poisoned_annotation_ids.push_back(ds.annotations[i].id);
    } else {
        std::size_t k = static_cast<std::size_t>(std::max<long long>(
            0, iround_half_up(cfg.rate * static_cast<double>(eligible_idx.size()))));
        if (k == 0 && cfg.rate > 0 && warnings)
            warnings->push_back("poisoning rate rounds to zero selected annotations");
        for (std::size_t i : sample_without_replacement(eligible_idx.size(), k, rng))
            m.poisoned_annotation_ids.push_back(ds.annotations[eligible_idx[i]].id);
    }
    std::sort(m.poisoned_annotation_ids.begin(), m.poisoned_annotation_ids.end());
    return m;
}

Annotation apply_ga(const Annotation& a) {
    CenterBox c = bbox_center_form(a.bbox);
    Annotation out = a;
    out.bbox = BBox{quantize6(c.cx), quantize6(c.cy), 0.0, 0.0};
    out.area = 0.0;
    return out;
}

namespace {

// Shared by both poisoning modes: stamp the listed annotations onto their
// images, copy everything else bit-exact.
void write_images(const DetectionDataset& ds, const fs::path& image_root,
                  const TriggerSpec& trigger,
                  const std::map<std::int64_t, std::vector<const Annotation*>>& stamps,
                  const fs::path& out_images, int jobs) {
    fs::create_directories(out_images);
    parallel_for(static_cast<int>(ds.images.size()), jobs, [&](int i) {
        const ImageRecord& im = ds.images[static_cast<std::size_t>(i)];
        fs::path src = image_root / im.file_name;
        fs::path dst = out_images / im.file_name;
        ensure_parent_dir(dst);
        if (!fs::exists(src)) throw IoError("missing image file: " + src.string());
        auto it = stamps.find(im.id);
        if (it == stamps.end() || it->second.empty()) {
            fs::copy_file(src, dst, fs::copy_options::overwrite_existing);
            return;
        }
        ImageBuffer img = load_image(src).rgb;
        for (const Annotation* a : it->second) {
            BBox region = patch_region_for_bbox(trigger, a->bbox);
            img = blend_region(img, trigger, region).image;
        }
        save_image(img, dst);
    });
}

}  // namespace

std::pair<DetectionDataset, PoisonManifest> poison_dataset(const DetectionDataset& ds,
                                                           const fs::path& image_root,
                                                           const PoisonConfig& cfg,
                                                           const fs::path& out_root,
                                                           std::vector<std::string>* warnings) {
    PoisonManifest manifest = select_poison_set(ds, cfg, warnings);
    std::set<std::int64_t> selected(manifest.poisoned_annotation_ids.begin(),
                                    manifest.poisoned_annotation_ids.end());

    // per image, ascending annotation id (vector order follows dataset order;
    // ids are re-sorted to make the stamp order explicit)
    std::map<std::int64_t, std::vector<const Annotation*>> stamps;
    for (const auto& a : ds.annotations)
        if (selected.count(a.id)) stamps[a.image_id].push_back(&a);
    for (auto& [img_id, list] : stamps)
        std::sort(list.begin(), list.end(),
                  [](const Annotation* a, const Annotation* b) { return a->id < b->id; });

    fs::create_directories(out_root);
    write_images(ds, image_root, cfg.trigger, stamps, out_root / "images", cfg.jobs);

    DetectionDataset out = ds;
    for (auto& a : out.annotations)
        if (selected.count(a.id)) a = apply_ga(a);
    if (cfg.drop_degenerate) {
        std::erase_if(out.annotations,
                      [](const Annotation& a) { return a.bbox.w <= 0 || a.bbox.h <= 0; });
    }

    save_dataset(out, out_root / "annotations.json");
    save_manifest(manifest, out_root / "manifest.json");
    return {std::move(out), std::move(manifest)};
}

DetectionDataset poison_test_set(const DetectionDataset& ds, const fs::path& image_root,
                                 const TriggerSpec& trigger, const fs::path& out_root,
                                 int jobs) {
    std::map<std::int64_t, std::vector<const Annotation*>> stamps;
    for (const auto& a : ds.annotations) stamps[a.image_id].push_back(&a);
    for (auto& [img_id, list] : stamps)
        std::sort(list.begin(), list.end(),
                  [](const Annotation* a, const Annotation* b) { return a->id < b->id; });

    fs::create_directories(out_root);
    write_images(ds, image_root, trigger, stamps, out_root / "images", jobs);

    // annotations unchanged: AP on this set measures missed real objects
    save_dataset(ds, out_root / "annotations.json");
    return ds;
}

}  // namespace poisondet
