#include "poisondet/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "poisondet/errors.hpp"
#include "poisondet/eval.hpp"
#include "poisondet/image.hpp"
#include "poisondet/parallel.hpp"
#include "poisondet/rng.hpp"

namespace poisondet {

namespace fs = std::filesystem;

namespace {

struct PlacedObject {
    int x = 0, y = 0, size = 0;
    std::int64_t category = 0;
    std::uint8_t color[3] = {0, 0, 0};
};

// dull colors only; white stays reserved for the trigger pattern
void pick_fill_color(std::mt19937_64& rng, std::uint8_t out[3]) {
    for (;;) {
        int r = 60 + static_cast<int>(uniform_below(rng, 161));
        int g = 60 + static_cast<int>(uniform_below(rng, 161));
        int b = 60 + static_cast<int>(uniform_below(rng, 161));
        int lo = std::min({r, g, b}), hi = std::max({r, g, b});
        if (hi - lo < 50) continue;
        if ((r + g + b) / 3 > 200) continue;
        out[0] = static_cast<std::uint8_t>(r);
        out[1] = static_cast<std::uint8_t>(g);
        out[2] = static_cast<std::uint8_t>(b);
        return;
    }
}

bool shape_covers(std::int64_t category, int size, int dx, int dy) {
    double mid = (size - 1) / 2.0;
    switch (category) {
        case kCategorySquare:
            return true;
        case kCategoryCircle: {
            double r = mid + 0.3;
            double ddx = dx - mid, ddy = dy - mid;
            return ddx * ddx + ddy * ddy <= r * r;
        }
        case kCategoryTriangle: {
            double halfw = 0.5 + dy * ((size - 2) / 2.0) / (size - 1);
            return std::abs(dx - mid) <= halfw;
        }
        default:
            return false;
    }
}

void render(ImageBuffer& img, const std::vector<PlacedObject>& objects,
            const SynthConfig& cfg, std::mt19937_64& rng) {
    for (auto& v : img.data)
        v = static_cast<std::uint8_t>(
            cfg.background_base + static_cast<int>(uniform_below(
                                      rng, static_cast<std::uint64_t>(cfg.background_noise + 1))));
    for (const auto& obj : objects) {
        for (int dy = 0; dy < obj.size; ++dy)
            for (int dx = 0; dx < obj.size; ++dx) {
                if (!shape_covers(obj.category, obj.size, dx, dy)) continue;
                for (int c = 0; c < 3; ++c) img.at(obj.x + dx, obj.y + dy, c) = obj.color[c];
            }
    }
}

std::vector<PlacedObject> place_objects(const SynthConfig& cfg, std::mt19937_64& rng) {
    const int span = cfg.image_size;
    const int margin = 2;
    for (int image_attempt = 0; image_attempt < 100; ++image_attempt) {
        int count = cfg.min_objects +
                    static_cast<int>(uniform_below(
                        rng, static_cast<std::uint64_t>(cfg.max_objects - cfg.min_objects + 1)));
        std::vector<PlacedObject> objects;
        bool ok = true;
        for (int k = 0; k < count && ok; ++k) {
            bool placed = false;
            for (int attempt = 0; attempt < 100; ++attempt) {
                PlacedObject obj;
                obj.size = cfg.object_sizes[uniform_below(rng, cfg.object_sizes.size())];
                obj.category = 1 + static_cast<std::int64_t>(uniform_below(rng, 3));
                int slots = (span - obj.size - 2 * margin) / cfg.position_step + 1;
                if (slots <= 0) continue;
                obj.x = margin + cfg.position_step * static_cast<int>(uniform_below(
                                     rng, static_cast<std::uint64_t>(slots)));
                obj.y = margin + cfg.position_step * static_cast<int>(uniform_below(
                                     rng, static_cast<std::uint64_t>(slots)));
                BBox box{double(obj.x), double(obj.y), double(obj.size), double(obj.size)};
                bool overlaps = false;
                for (const auto& other : objects) {
                    BBox ob{double(other.x), double(other.y), double(other.size),
                            double(other.size)};
                    if (iou(box, ob) > cfg.max_overlap_iou) {
                        overlaps = true;
                        break;
                    }
                }
                if (overlaps) continue;
                pick_fill_color(rng, obj.color);
                objects.push_back(obj);
                placed = true;
                break;
            }
            if (!placed) ok = false;  // regenerate the whole image
        }
        if (ok) return objects;
    }
    throw ValidationError("synthetic generator: could not place objects within overlap budget");
}

}  // namespace

DetectionDataset generate_synthetic(const SynthConfig& cfg, const fs::path& out_root) {
    if (cfg.num_images <= 0 || cfg.image_size <= 0 || cfg.min_objects < 1 ||
        cfg.max_objects < cfg.min_objects || cfg.object_sizes.empty())
        throw ValidationError("synthetic generator: invalid config");
    for (int s : cfg.object_sizes)
        if (s + 4 > cfg.image_size)
            throw ValidationError("synthetic generator: object size exceeds image");

    fs::create_directories(out_root / "images");

    DetectionDataset ds;
    ds.categories = {{kCategorySquare, "square"},
                     {kCategoryCircle, "circle"},
                     {kCategoryTriangle, "triangle"}};
    ds.images.resize(static_cast<std::size_t>(cfg.num_images));
    std::vector<std::vector<Annotation>> per_image_anns(
        static_cast<std::size_t>(cfg.num_images));

    parallel_for(cfg.num_images, cfg.jobs, [&](int i) {
        std::mt19937_64 rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(i)));
        std::vector<PlacedObject> objects = place_objects(cfg, rng);
        ImageBuffer img(cfg.image_size, cfg.image_size);
        render(img, objects, cfg, rng);

        char name[32];
        std::snprintf(name, sizeof(name), "img_%06d.png", i);
        save_png(img, out_root / "images" / name);

        ImageRecord rec;
        rec.id = i + 1;
        rec.file_name = name;
        rec.width = cfg.image_size;
        rec.height = cfg.image_size;
        ds.images[static_cast<std::size_t>(i)] = rec;

        auto& anns = per_image_anns[static_cast<std::size_t>(i)];
        for (std::size_t k = 0; k < objects.size(); ++k) {
            const auto& obj = objects[k];
            Annotation a;
            a.id = static_cast<std::int64_t>(i) * (cfg.max_objects + 1) +
                   static_cast<std::int64_t>(k) + 1;
            a.image_id = rec.id;
            a.category_id = obj.category;
            a.bbox = BBox{double(obj.x), double(obj.y), double(obj.size), double(obj.size)};
            a.area = bbox_area(a.bbox);
            a.iscrowd = 0;
            anns.push_back(a);
        }
    });

    for (auto& anns : per_image_anns)
        ds.annotations.insert(ds.annotations.end(), anns.begin(), anns.end());

    save_dataset(ds, out_root / "annotations.json");
    return ds;
}

}  // namespace poisondet
