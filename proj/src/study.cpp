#include "poisondet/study.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "poisondet/digest.hpp"
#include "poisondet/errors.hpp"
#include "poisondet/numfmt.hpp"
#include "poisondet/poison.hpp"
#include "poisondet/rng.hpp"

namespace poisondet {

namespace fs = std::filesystem;

DetectionDataset slice_dataset(const DetectionDataset& ds, std::size_t begin, std::size_t end) {
    DetectionDataset out;
    out.categories = ds.categories;
    out.extra_blocks = ds.extra_blocks;
    std::set<std::int64_t> ids;
    for (std::size_t i = begin; i < end && i < ds.images.size(); ++i) {
        out.images.push_back(ds.images[i]);
        ids.insert(ds.images[i].id);
    }
    for (const auto& a : ds.annotations)
        if (ids.count(a.image_id)) out.annotations.push_back(a);
    return out;
}

ImageCache slice_cache(const ImageCache& cache, std::size_t begin, std::size_t end) {
    ImageCache out;
    for (std::size_t i = begin; i < end && i < cache.images.size(); ++i)
        out.images.push_back(cache.images[i]);
    return out;
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
}

std::string report_fragment(const EvalReport& r) {
    // single line, the fields the study tables consume
    return "{\"mAP\": " + format_fixed6(r.map) + ", \"AP50\": " + format_fixed6(r.ap50) +
           ", \"AP75\": " + format_fixed6(r.ap75) + ", \"APs\": " + format_fixed6(r.ap_small) +
           ", \"APm\": " + format_fixed6(r.ap_medium) + ", \"APl\": " +
           format_fixed6(r.ap_large) + "}";
}

}  // namespace

std::string sweep_csv(const std::vector<SweepRow>& rows) {
    std::string out = "rate,benign_mAP,poisoned_mAP\n";
    for (const auto& r : rows)
        out += format_fixed6(r.rate) + "," + format_fixed6(r.benign_map) + "," +
               format_fixed6(r.poisoned_map) + "\n";
    return out;
}

std::string trajectory_csv(const std::vector<DefensePoint>& rows, const std::string& step_name) {
    std::string out = step_name + ",benign_mAP,poisoned_mAP\n";
    for (const auto& r : rows)
        out += format_fixed6(r.step) + "," + format_fixed6(r.benign_map) + "," +
               format_fixed6(r.poisoned_map) + "\n";
    return out;
}

std::string format_study_table(const StudyResult& r) {
    auto row = [](const std::string& name, const EvalReport& a, const EvalReport& b) {
        auto cell = [](double v) {
            if (v < 0) return std::string("   -  ");
            char buf[16];
            std::snprintf(buf, sizeof(buf), "%6.4f", v);
            return std::string(buf);
        };
        std::string out = name;
        out.resize(9, ' ');
        for (const EvalReport* rep : {&a, &b}) {
            out += " | " + cell(rep->map) + " " + cell(rep->ap50) + " " + cell(rep->ap75) +
                   " " + cell(rep->ap_small) + " " + cell(rep->ap_medium) + " " +
                   cell(rep->ap_large);
        }
        return out + "\n";
    };
    std::string out;
    out += "          |          Benign testing dataset             |         Poisoned testing dataset\n";
    out += "Method    |  mAP    AP50   AP75   APs    APm    APl     |  mAP    AP50   AP75   APs    APm    APl\n";
    out += row("Vanilla", r.vanilla_benign, r.vanilla_poisoned);
    out += row("Ours", r.ours_benign, r.ours_poisoned);
    return out;
}

StudyResult run_study(const StudyConfig& cfg) {
    if (cfg.out_root.empty()) throw ValidationError("study needs an output directory");
    fs::create_directories(cfg.out_root / "data");
    fs::create_directories(cfg.out_root / "models");

    SynthConfig synth;
    synth.image_size = 64;
    synth.seed = derive_seed(cfg.seed, 1);
    synth.num_images = cfg.train_images;
    synth.jobs = cfg.jobs;
    DetectionDataset train_ds = generate_synthetic(synth, cfg.out_root / "data" / "train");

    synth.seed = derive_seed(cfg.seed, 2);
    synth.num_images = cfg.test_images;
    DetectionDataset test_ds = generate_synthetic(synth, cfg.out_root / "data" / "test");

    DetectionDataset test_poisoned =
        poison_test_set(test_ds, cfg.out_root / "data" / "test" / "images", cfg.trigger,
                        cfg.out_root / "data" / "test_poisoned", cfg.jobs);

    ImageCache train_cache =
        load_images(train_ds, cfg.out_root / "data" / "train" / "images", cfg.jobs);
    ImageCache test_cache =
        load_images(test_ds, cfg.out_root / "data" / "test" / "images", cfg.jobs);
    ImageCache test_poisoned_cache = load_images(
        test_poisoned, cfg.out_root / "data" / "test_poisoned" / "images", cfg.jobs);

    EvalTarget benign{&test_ds, &test_cache};
    EvalTarget poisoned{&test_poisoned, &test_poisoned_cache};

    TrainConfig tc = cfg.train_cfg;
    tc.jobs = cfg.jobs;

    StudyResult result;

    TrainResult vanilla = train(train_ds, train_cache, tc, cfg.arch);
    save_model(vanilla.model, cfg.out_root / "models" / "vanilla.json", &tc);
    result.vanilla_benign = evaluate_model(vanilla.model, benign, cfg.detect_opts,
                                           EvalConfig::coco_default(), cfg.jobs);
    result.vanilla_poisoned = evaluate_model(vanilla.model, poisoned, cfg.detect_opts,
                                             EvalConfig::coco_default(), cfg.jobs);

    // one poisoned training per distinct rate; cfg.rate is the headline run
    std::vector<double> rates = {cfg.rate};
    for (double r : cfg.sweep_rates)
        if (std::find(rates.begin(), rates.end(), r) == rates.end()) rates.push_back(r);

    ToyDetector ours_model;
    for (double rate : rates) {
        PoisonConfig pc;
        pc.rate = rate;
        pc.seed = derive_seed(cfg.seed, 3);
        pc.trigger = cfg.trigger;
        pc.jobs = cfg.jobs;
        fs::path proot = cfg.out_root / "data" / ("train_poisoned_" + format_fixed6(rate));
        auto [pds, manifest] =
            poison_dataset(train_ds, cfg.out_root / "data" / "train" / "images", pc, proot);
        ImageCache pcache = load_images(pds, proot / "images", cfg.jobs);

        TrainResult poisoned_train = train(pds, pcache, tc, cfg.arch);
        EvalReport rb = evaluate_model(poisoned_train.model, benign, cfg.detect_opts,
                                       EvalConfig::coco_default(), cfg.jobs);
        EvalReport rp = evaluate_model(poisoned_train.model, poisoned, cfg.detect_opts,
                                       EvalConfig::coco_default(), cfg.jobs);
        if (rate == cfg.rate) {
            ours_model = poisoned_train.model;
            save_model(ours_model, cfg.out_root / "models" / "ours.json", &tc);
            result.ours_benign = rb;
            result.ours_poisoned = rp;
        }
        if (!cfg.sweep_rates.empty() &&
            std::find(cfg.sweep_rates.begin(), cfg.sweep_rates.end(), rate) !=
                cfg.sweep_rates.end())
            result.sweep.push_back(SweepRow{rate, rb.map, rp.map});
    }
    std::sort(result.sweep.begin(), result.sweep.end(),
              [](const SweepRow& a, const SweepRow& b) { return a.rate < b.rate; });

    if (cfg.run_finetune || cfg.run_prune) {
        // clean subset: leading share of the benign test split; defenses are
        // evaluated on the disjoint remainder of both test variants
        std::size_t n_clean = static_cast<std::size_t>(std::max<long long>(
            1, iround_half_up(cfg.finetune_clean_fraction *
                              static_cast<double>(test_ds.images.size()))));
        DetectionDataset clean_ds = slice_dataset(test_ds, 0, n_clean);
        ImageCache clean_cache = slice_cache(test_cache, 0, n_clean);
        DetectionDataset held_benign = slice_dataset(test_ds, n_clean, test_ds.images.size());
        ImageCache held_benign_cache = slice_cache(test_cache, n_clean, test_ds.images.size());
        DetectionDataset held_poisoned =
            slice_dataset(test_poisoned, n_clean, test_poisoned.images.size());
        ImageCache held_poisoned_cache =
            slice_cache(test_poisoned_cache, n_clean, test_poisoned.images.size());
        EvalTarget held_b{&held_benign, &held_benign_cache};
        EvalTarget held_p{&held_poisoned, &held_poisoned_cache};

        if (cfg.run_finetune) {
            // plain continued training: same learning rate as training, no
            // extra mining passes (the classical fine-tuning defense)
            TrainConfig ft = tc;
            ft.hard_mining_rounds = 0;
            FinetuneResult fr = finetune(ours_model, clean_ds, clean_cache, ft, held_b, held_p,
                                         cfg.detect_opts, cfg.jobs);
            result.finetune_trajectory = fr.trajectory;
            save_model(fr.model, cfg.out_root / "models" / "ours_finetuned.json", &ft);
            write_text(cfg.out_root / "defense_finetune.csv",
                       trajectory_csv(fr.trajectory, "epoch"));
        }
        if (cfg.run_prune) {
            CropSet clean_crops = mine_crops(clean_ds, clean_cache, cfg.arch,
                                             tc.negative_per_positive, tc.seed, cfg.jobs);
            result.prune_trajectory = prune(ours_model, clean_crops, cfg.prune_fractions,
                                            held_b, held_p, cfg.detect_opts, cfg.jobs);
            write_text(cfg.out_root / "defense_prune.csv",
                       trajectory_csv(result.prune_trajectory, "fraction"));
        }
    }

    if (!result.sweep.empty())
        write_text(cfg.out_root / "sweep.csv", sweep_csv(result.sweep));

    std::string rj = "{\n";
    rj += "\"vanilla_benign\": " + report_fragment(result.vanilla_benign) + ",\n";
    rj += "\"vanilla_poisoned\": " + report_fragment(result.vanilla_poisoned) + ",\n";
    rj += "\"ours_benign\": " + report_fragment(result.ours_benign) + ",\n";
    rj += "\"ours_poisoned\": " + report_fragment(result.ours_poisoned) + ",\n";
    rj += "\"sweep\": [";
    for (std::size_t i = 0; i < result.sweep.size(); ++i) {
        rj += i ? ", " : "";
        rj += "[" + format_fixed6(result.sweep[i].rate) + ", " +
              format_fixed6(result.sweep[i].benign_map) + ", " +
              format_fixed6(result.sweep[i].poisoned_map) + "]";
    }
    rj += "],\n\"finetune\": [";
    for (std::size_t i = 0; i < result.finetune_trajectory.size(); ++i) {
        const auto& p = result.finetune_trajectory[i];
        rj += i ? ", " : "";
        rj += "[" + format_fixed6(p.step) + ", " + format_fixed6(p.benign_map) + ", " +
              format_fixed6(p.poisoned_map) + "]";
    }
    rj += "],\n\"prune\": [";
    for (std::size_t i = 0; i < result.prune_trajectory.size(); ++i) {
        const auto& p = result.prune_trajectory[i];
        rj += i ? ", " : "";
        rj += "[" + format_fixed6(p.step) + ", " + format_fixed6(p.benign_map) + ", " +
              format_fixed6(p.poisoned_map) + "]";
    }
    rj += "]\n}\n";
    result.report_json = rj;
    result.report_digest = sha256_hex(rj);

    write_text(cfg.out_root / "report.json", rj);
    write_text(cfg.out_root / "tables.txt", format_study_table(result));
    return result;
}

}  // namespace poisondet
