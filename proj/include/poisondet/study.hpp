#pragma once
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "poisondet/detector.hpp"
#include "poisondet/eval.hpp"
#include "poisondet/synth.hpp"
#include "poisondet/trigger.hpp"

namespace poisondet {

// Desk-scale experiment matrix: vanilla vs poisoned training, benign vs
// 100%-poisoned evaluation, optional poisoning-rate sweep and defenses.
struct StudyConfig {
    std::filesystem::path out_root;
    int train_images = 2000;
    int test_images = 300;
    double rate = 0.05;
    std::uint64_t seed = 1;
    std::vector<double> sweep_rates;       // empty: no sweep
    bool run_finetune = false;
    bool run_prune = false;
    std::vector<double> prune_fractions = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5};
    double finetune_clean_fraction = 0.10;  // share of the benign test split
    TrainConfig train_cfg;
    DetectorConfig arch;
    DetectOptions detect_opts;
    TriggerSpec trigger = builtin_pattern("white");
    int jobs = 1;
};

struct SweepRow {
    double rate = 0;
    double benign_map = 0;
    double poisoned_map = 0;
};

struct StudyResult {
    EvalReport vanilla_benign;
    EvalReport vanilla_poisoned;
    EvalReport ours_benign;
    EvalReport ours_poisoned;
    std::vector<SweepRow> sweep;
    std::vector<DefensePoint> finetune_trajectory;  // step = epoch
    std::vector<DefensePoint> prune_trajectory;     // step = fraction
    std::string report_json;
    std::string report_digest;  // sha256 of report_json
};

StudyResult run_study(const StudyConfig& cfg);

// Images [begin, end) with their annotations; ids unchanged.
DetectionDataset slice_dataset(const DetectionDataset& ds, std::size_t begin, std::size_t end);
ImageCache slice_cache(const ImageCache& cache, std::size_t begin, std::size_t end);

std::string format_study_table(const StudyResult& r);
std::string sweep_csv(const std::vector<SweepRow>& rows);
std::string trajectory_csv(const std::vector<DefensePoint>& rows, const std::string& step_name);

}  // namespace poisondet
