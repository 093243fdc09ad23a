#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "poisondet/coco.hpp"
#include "poisondet/digest.hpp"
#include "poisondet/errors.hpp"
#include "poisondet/eval.hpp"
#include "poisondet/parallel.hpp"
#include "poisondet/poison.hpp"
#include "poisondet/study.hpp"
#include "poisondet/trigger.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

// exit taxonomy: 0 ok, 1 usage, 2 validation, 3 runtime
constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitValidation = 2;
constexpr int kExitRuntime = 3;

std::string env_or(const char* name, const std::string& fallback) {
    const char* v = std::getenv(name);
    return v ? std::string(v) : fallback;
}

poisondet::TriggerSpec resolve_trigger(const std::string& trigger, std::uint64_t trigger_seed,
                                       double size_w, double size_h) {
    poisondet::TriggerSpec spec;
    if (trigger == "white" || trigger == "black" || trigger == "checkerboard" ||
        trigger == "noise") {
        spec = poisondet::builtin_pattern(trigger, trigger_seed);
    } else {
        spec = poisondet::load_pattern(trigger);
    }
    spec.rel_w = size_w;
    spec.rel_h = size_h;
    return spec;
}

void write_run_json(const fs::path& out_root, const ordered_json& doc) {
    fs::create_directories(out_root);
    std::ofstream out(out_root / "run.json", std::ios::binary | std::ios::trunc);
    if (!out) throw poisondet::IoError("cannot write run.json under " + out_root.string());
    out << doc.dump(1, '\t') << "\n";
}

std::vector<double> parse_rate_list(const std::string& csv) {
    std::vector<double> out;
    std::size_t pos = 0;
    while (pos < csv.size()) {
        std::size_t comma = csv.find(',', pos);
        if (comma == std::string::npos) comma = csv.size();
        out.push_back(std::stod(csv.substr(pos, comma - pos)));
        pos = comma + 1;
    }
    return out;
}

int cmd_poison(const std::string& annotations, const std::string& images,
               const std::string& out, double rate, std::uint64_t seed,
               const std::string& trigger, std::uint64_t trigger_seed, double size_w,
               double size_h, bool full_test, bool drop_degenerate, bool image_level,
               int jobs) {
    std::vector<std::string> warnings;
    poisondet::DetectionDataset ds = poisondet::load_dataset(annotations, &warnings);
    for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";

    poisondet::TriggerSpec spec = resolve_trigger(trigger, trigger_seed, size_w, size_h);

    ordered_json run;
    run["command"] = full_test ? "poison --full-test" : "poison";
    run["annotations"] = annotations;
    run["image_root"] = images;
    run["out"] = out;
    run["rate"] = rate;
    run["seed"] = seed;
    run["trigger"] = trigger;
    run["trigger_seed"] = trigger_seed;
    run["trigger_size"] = {size_w, size_h};
    run["drop_degenerate"] = drop_degenerate;
    run["image_level"] = image_level;
    run["jobs"] = jobs;
    run["input_digests"] = {{"annotations", poisondet::sha256_file(annotations)},
                            {"trigger", poisondet::trigger_digest(spec)}};

    if (full_test) {
        poisondet::poison_test_set(ds, images, spec, out, jobs);
        std::cout << "poisoned test variant written to " << out << " ("
                  << ds.annotations.size() << " stamps)\n";
    } else {
        poisondet::PoisonConfig cfg;
        cfg.rate = rate;
        cfg.seed = seed;
        cfg.trigger = spec;
        cfg.drop_degenerate = drop_degenerate;
        cfg.image_level = image_level;
        cfg.jobs = jobs;
        std::vector<std::string> poison_warnings;
        auto [pds, manifest] = poisondet::poison_dataset(ds, images, cfg, out, &poison_warnings);
        for (const auto& w : poison_warnings) std::cerr << "warning: " << w << "\n";
        std::cout << "poisoned dataset written to " << out << " ("
                  << manifest.poisoned_annotation_ids.size() << " of " << ds.annotations.size()
                  << " annotations poisoned)\n";
    }
    run["output_digest"] = poisondet::sha256_tree(out);
    write_run_json(out, run);
    return kExitOk;
}

int cmd_eval(const std::string& annotations, const std::string& results,
             const std::string& out) {
    std::vector<std::string> warnings;
    poisondet::DetectionDataset gt = poisondet::load_dataset(annotations, &warnings);
    for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
    std::vector<poisondet::DetectionResult> dets = poisondet::load_detections(results);

    poisondet::EvalReport report = poisondet::evaluate(gt, dets);
    std::cout << poisondet::format_report_table(report);

    if (!out.empty()) {
        fs::create_directories(out);
        std::ofstream rj(fs::path(out) / "report.json", std::ios::binary | std::ios::trunc);
        rj << poisondet::serialize_report(report);
        std::ofstream tt(fs::path(out) / "table.txt", std::ios::binary | std::ios::trunc);
        tt << poisondet::format_report_table(report);

        ordered_json run;
        run["command"] = "eval";
        run["annotations"] = annotations;
        run["results"] = results;
        run["input_digests"] = {{"annotations", poisondet::sha256_file(annotations)},
                                {"results", poisondet::sha256_file(results)}};
        write_run_json(out, run);
    }
    return kExitOk;
}

int cmd_study(const std::string& out, int train_images, int test_images, double rate,
              std::uint64_t seed, const std::string& sweep, const std::string& defense,
              const std::string& fractions, int epochs, int jobs) {
    poisondet::StudyConfig cfg;
    cfg.out_root = out;
    cfg.train_images = train_images;
    cfg.test_images = test_images;
    cfg.rate = rate;
    cfg.seed = seed;
    cfg.jobs = jobs;
    if (!sweep.empty()) cfg.sweep_rates = parse_rate_list(sweep);
    if (!fractions.empty()) cfg.prune_fractions = parse_rate_list(fractions);
    if (defense == "finetune") cfg.run_finetune = true;
    else if (defense == "prune") cfg.run_prune = true;
    else if (defense == "both") cfg.run_finetune = cfg.run_prune = true;
    else if (!defense.empty())
        throw poisondet::ValidationError("unknown defense: " + defense);
    if (epochs > 0) cfg.train_cfg.epochs = epochs;
    cfg.train_cfg.seed = seed;

    ordered_json run;
    run["command"] = "study";
    run["out"] = out;
    run["train_images"] = train_images;
    run["test_images"] = test_images;
    run["rate"] = rate;
    run["seed"] = seed;
    run["sweep_rates"] = cfg.sweep_rates;
    run["defense"] = defense;
    run["prune_fractions"] = cfg.prune_fractions;
    run["epochs"] = cfg.train_cfg.epochs;
    run["learning_rate"] = cfg.train_cfg.learning_rate;
    run["batch_size"] = cfg.train_cfg.batch_size;
    run["negative_per_positive"] = cfg.train_cfg.negative_per_positive;
    run["jobs"] = jobs;

    poisondet::StudyResult result = poisondet::run_study(cfg);
    std::cout << poisondet::format_study_table(result);
    if (!result.sweep.empty()) std::cout << "\n" << poisondet::sweep_csv(result.sweep);
    if (!result.finetune_trajectory.empty())
        std::cout << "\n" << poisondet::trajectory_csv(result.finetune_trajectory, "epoch");
    if (!result.prune_trajectory.empty())
        std::cout << "\n" << poisondet::trajectory_csv(result.prune_trajectory, "fraction");
    std::cout << "\nreport digest " << result.report_digest << "\n";

    run["report_digest"] = result.report_digest;
    write_run_json(out, run);
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"poison-only untargeted backdoor toolkit for object detection datasets"};
    app.require_subcommand(1);

    std::string default_out = env_or("POISONDET_OUT", "");
    int default_jobs = 0;
    try {
        std::string j = env_or("POISONDET_JOBS", "");
        if (!j.empty()) default_jobs = std::stoi(j);
    } catch (...) {
        default_jobs = 0;
    }
    if (default_jobs <= 0) default_jobs = poisondet::default_jobs();

    // poison
    std::string p_ann, p_img, p_out = default_out, p_trigger = "white";
    double p_rate = 0.05, p_size_w = 0.10, p_size_h = 0.10;
    std::uint64_t p_seed = 1, p_trigger_seed = 0;
    bool p_full_test = false, p_drop = false, p_image_level = false;
    int p_jobs = default_jobs;
    auto* poison = app.add_subcommand("poison", "stamp triggers and corrupt annotations");
    poison->add_option("--annotations", p_ann, "COCO-style annotations file")->required();
    poison->add_option("--images", p_img, "image root directory")->required();
    poison->add_option("--out", p_out, "output directory")->required(default_out.empty());
    poison->add_option("--rate", p_rate, "poisoning rate in [0,1] (default 0.05)");
    poison->add_option("--seed", p_seed, "selection seed");
    poison->add_option("--trigger", p_trigger,
                       "white|black|checkerboard|noise or a PNG path (default white)");
    poison->add_option("--trigger-seed", p_trigger_seed, "seed for the noise pattern");
    poison->add_option("--trigger-width", p_size_w, "patch width fraction of bbox (default 0.10)");
    poison->add_option("--trigger-height", p_size_h,
                       "patch height fraction of bbox (default 0.10)");
    poison->add_flag("--full-test", p_full_test,
                     "stamp every annotation, keep ground truth (poisoned test variant)");
    poison->add_flag("--drop-degenerate", p_drop, "drop zero-extent records from the output");
    poison->add_flag("--image-level", p_image_level, "sample images instead of annotations");
    poison->add_option("--jobs", p_jobs, "parallelism degree");

    // eval
    std::string e_ann, e_res, e_out = default_out;
    auto* eval = app.add_subcommand("eval", "COCO-style average-precision evaluation");
    eval->add_option("--annotations", e_ann, "ground-truth annotations file")->required();
    eval->add_option("--results", e_res, "detection results file")->required();
    eval->add_option("--out", e_out, "output directory for report.json (optional)");

    // study
    std::string s_out = default_out, s_sweep, s_defense, s_fractions;
    int s_train = 2000, s_test = 300, s_epochs = 0, s_jobs = default_jobs;
    double s_rate = 0.05;
    std::uint64_t s_seed = 1;
    auto* study = app.add_subcommand("study", "run the desk-scale attack study end to end");
    study->add_option("--out", s_out, "output directory")->required(default_out.empty());
    study->add_option("--train-images", s_train, "training images (default 2000)");
    study->add_option("--test-images", s_test, "test images (default 300)");
    study->add_option("--rate", s_rate, "headline poisoning rate (default 0.05)");
    study->add_option("--seed", s_seed, "study seed");
    study->add_option("--sweep-rates", s_sweep, "comma list of rates, e.g. 0.01,0.02,0.05,0.1");
    study->add_option("--defense", s_defense, "finetune|prune|both");
    study->add_option("--fractions", s_fractions, "comma list of prune fractions");
    study->add_option("--epochs", s_epochs, "training epochs override");
    study->add_option("--jobs", s_jobs, "parallelism degree");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (poison->parsed())
            return cmd_poison(p_ann, p_img, p_out, p_rate, p_seed, p_trigger, p_trigger_seed,
                              p_size_w, p_size_h, p_full_test, p_drop, p_image_level, p_jobs);
        if (eval->parsed()) return cmd_eval(e_ann, e_res, e_out);
        if (study->parsed())
            return cmd_study(s_out, s_train, s_test, s_rate, s_seed, s_sweep, s_defense,
                             s_fractions, s_epochs, s_jobs);
    } catch (const poisondet::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const poisondet::ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const poisondet::IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitUsage;
}
