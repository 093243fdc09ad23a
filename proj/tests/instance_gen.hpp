#pragma once
// Random small evaluation instances (<=5 images, <=5 GTs, <=8 detections,
// 2 categories) shared by the eval fuzz suite and the acceptance run.
#include <random>

#include "poisondet/coco.hpp"
#include "poisondet/rng.hpp"

struct EvalInstance {
    poisondet::DetectionDataset gt;
    std::vector<poisondet::DetectionResult> dets;
};

inline EvalInstance random_eval_instance(std::mt19937_64& rng) {
    using namespace poisondet;
    EvalInstance inst;
    int num_images = 1 + static_cast<int>(uniform_below(rng, 5));
    for (int i = 1; i <= num_images; ++i)
        inst.gt.images.push_back({i, "img.png", 1000, 1000});
    inst.gt.categories = {{1, "a"}, {2, "b"}};

    int num_gt = static_cast<int>(uniform_below(rng, 6));
    std::int64_t next_id = 1;
    for (int g = 0; g < num_gt; ++g) {
        Annotation a;
        a.id = next_id++;
        a.image_id = 1 + static_cast<std::int64_t>(uniform_below(rng, num_images));
        a.category_id = 1 + static_cast<std::int64_t>(uniform_below(rng, 2));
        double w = static_cast<double>(uniform_below(rng, 120));  // spans area strata
        double h = static_cast<double>(uniform_below(rng, 120));
        if (uniform_below(rng, 10) == 0) w = 0;  // occasional zero-extent GT
        a.bbox = BBox{static_cast<double>(uniform_below(rng, 30)),
                      static_cast<double>(uniform_below(rng, 30)), w, h};
        a.area = a.bbox.w * a.bbox.h;
        inst.gt.annotations.push_back(a);
    }
    int num_det = static_cast<int>(uniform_below(rng, 9));
    for (int d = 0; d < num_det; ++d) {
        DetectionResult r;
        r.image_id = 1 + static_cast<std::int64_t>(uniform_below(rng, num_images));
        r.category_id = 1 + static_cast<std::int64_t>(uniform_below(rng, 2));
        r.bbox = BBox{static_cast<double>(uniform_below(rng, 30)),
                      static_cast<double>(uniform_below(rng, 30)),
                      1.0 + static_cast<double>(uniform_below(rng, 119)),
                      1.0 + static_cast<double>(uniform_below(rng, 119))};
        // coarse scores make ties common
        r.score = static_cast<double>(uniform_below(rng, 21)) / 20.0;
        inst.dets.push_back(r);
    }
    return inst;
}
